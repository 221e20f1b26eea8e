//! Stage 1: residual bottleneck adapters over a stack of acoustic layer
//! features, learnable layer fusion, and the joint masked-reconstruction plus
//! classification objective.
//!
//! Per sample, with `x_i` the pooled feature of layer `i`:
//!
//! ```text
//! y_i      = x_i + relu(relu(x_i·W_down + b_down)·W_up + b_up)
//! fused    = Σ_i w_i · y_i
//! masked   = fused with round(ρ·d_a) random coordinates zeroed
//! recon    = relu(masked·W_1 + b_1)·W_2 + b_2
//! L_mlm    = mse(recon, fused)        (fused is a constant target)
//! L_ce     = ce(recon·W_c + b_c, label)
//! L        = L_ce + L_mlm
//! ```

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::{weighted_f1, Checkpoint, CheckpointModel, FeatureStore};
use crate::data_io::checkpoint::restore_params;
use crate::error::{Error, Result};
use crate::label::{EmotionLabel, NUM_CLASSES};
use crate::numcore::{
    affine, argmax, cross_entropy, mse, relu, relu_backward_inplace, uniform_init, AdamState,
    ParamSet, Tensor2,
};
use crate::train::{check_finite, minibatches, EarlyStopping, StageSchedule};

/// Pooled features of `k` consecutive transformer layers for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticLayerStack {
    pub features: Vec<Vec<f64>>,
    pub layer_ids: Vec<u32>,
}

impl AcousticLayerStack {
    pub fn from_store(store: &FeatureStore, i: usize) -> Self {
        Self {
            features: (0..store.k())
                .map(|l| store.acoustic_layer(i, l).iter().map(|&x| f64::from(x)).collect())
                .collect(),
            layer_ids: store.layer_ids().to_vec(),
        }
    }
}

/// Batched acoustic stacks: one `B x d_a` tensor per layer.
#[derive(Clone, Debug)]
pub struct AcousticSet {
    pub ids: Vec<String>,
    pub layers: Vec<Tensor2>,
    pub labels: Vec<Option<EmotionLabel>>,
}

impl AcousticSet {
    pub fn from_store(store: &FeatureStore, idx: &[usize]) -> Self {
        Self {
            ids: store.ids(idx),
            layers: store.acoustic_batch(idx),
            labels: store.labels(idx),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            layers: self.layers.iter().map(|l| l.select_rows(idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Class ordinals; fails naming the first unlabeled sample.
    pub fn label_ordinals(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .zip(&self.ids)
            .map(|(l, id)| {
                l.map(EmotionLabel::ordinal)
                    .ok_or_else(|| Error::Data(format!("sample {id} has no label")))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub k: usize,
    pub d_a: usize,
    pub bottleneck: usize,
    pub mask_ratio: f64,
    /// Layer whose fusion weight starts at 1.0; all others start at 0.0.
    pub best_layer: usize,
    pub stop_grad_target: bool,
}

impl AdapterConfig {
    pub fn new(k: usize, d_a: usize, bottleneck: usize) -> Self {
        Self {
            k,
            d_a,
            bottleneck,
            mask_ratio: 0.15,
            best_layer: 2.min(k.saturating_sub(1)),
            stop_grad_target: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("adapter needs at least one layer".into()));
        }
        if self.bottleneck == 0 || self.bottleneck >= self.d_a {
            return Err(Error::Config(format!(
                "bottleneck must satisfy 0 < bottleneck < d_a, got {} with d_a = {}",
                self.bottleneck, self.d_a
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if self.best_layer >= self.k {
            return Err(Error::Config(format!(
                "best_layer {} must be < k = {}",
                self.best_layer, self.k
            )));
        }
        Ok(())
    }
}

/// Borrowed parameters of one adapter.
#[derive(Clone, Copy, Debug)]
pub struct AdapterLayer<'a> {
    pub w_down: &'a Tensor2,
    pub b_down: &'a Tensor2,
    pub w_up: &'a Tensor2,
    pub b_up: &'a Tensor2,
}

const PER_LAYER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterModel {
    pub config: AdapterConfig,
    pub params: ParamSet,
}

impl AdapterModel {
    /// Adapter weights `U(±1/√d_a)`, biases zero, one-hot layer weights.
    pub fn new<R: Rng + ?Sized>(config: AdapterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.d_a, config.bottleneck);
        let bound = 1.0 / (d as f64).sqrt();
        let mut params = ParamSet::new();
        for i in 0..config.k {
            params.push(format!("adapter.{i}.w_down"), uniform_init(d, h, bound, rng));
            params.push(format!("adapter.{i}.b_down"), Tensor2::zeros(1, h));
            params.push(format!("adapter.{i}.w_up"), uniform_init(h, d, bound, rng));
            params.push(format!("adapter.{i}.b_up"), Tensor2::zeros(1, d));
        }
        let mut w = Tensor2::zeros(1, config.k);
        w.set(0, config.best_layer, 1.0);
        params.push("layer_weights", w);
        params.push("recon.w1", uniform_init(d, d, bound, rng));
        params.push("recon.b1", Tensor2::zeros(1, d));
        params.push("recon.w2", uniform_init(d, d, bound, rng));
        params.push("recon.b2", Tensor2::zeros(1, d));
        params.push("classifier.w", uniform_init(d, NUM_CLASSES, bound, rng));
        params.push("classifier.b", Tensor2::zeros(1, NUM_CLASSES));
        Ok(Self { config, params })
    }

    pub fn layer(&self, i: usize) -> AdapterLayer<'_> {
        let base = PER_LAYER * i;
        AdapterLayer {
            w_down: self.params.value(base),
            b_down: self.params.value(base + 1),
            w_up: self.params.value(base + 2),
            b_up: self.params.value(base + 3),
        }
    }

    fn idx_layer_weights(&self) -> usize {
        PER_LAYER * self.config.k
    }

    pub fn layer_weights(&self) -> &[f64] {
        self.params.value(self.idx_layer_weights()).data()
    }

    pub fn layer_weights_mut(&mut self) -> &mut [f64] {
        let i = self.idx_layer_weights();
        self.params.value_mut(i).data_mut()
    }

    fn recon(&self) -> [&Tensor2; 4] {
        let b = self.idx_layer_weights() + 1;
        [
            self.params.value(b),
            self.params.value(b + 1),
            self.params.value(b + 2),
            self.params.value(b + 3),
        ]
    }

    fn classifier(&self) -> (&Tensor2, &Tensor2) {
        let b = self.idx_layer_weights() + 5;
        (self.params.value(b), self.params.value(b + 1))
    }

    fn check_layers(&self, layers: &[Tensor2]) -> Result<()> {
        if layers.len() != self.config.k {
            return Err(Error::dim("adapter layers", self.config.k, layers.len()));
        }
        if let Some(l) = layers.iter().find(|l| l.cols() != self.config.d_a) {
            return Err(Error::dim("adapter input width", self.config.d_a, l.cols()));
        }
        Ok(())
    }
}

/// `y = x + relu(relu(x·W_down + b_down)·W_up + b_up)` for one vector.
pub fn adapter_forward(x: &[f64], p: AdapterLayer<'_>) -> Result<Vec<f64>> {
    let xt = Tensor2::row_vector(x.to_vec());
    Ok(adapter_forward_batch(&xt, p)?.adapted.into_vec())
}

struct AdapterPass {
    pre_down: Tensor2,
    act_down: Tensor2,
    pre_up: Tensor2,
    adapted: Tensor2,
}

fn adapter_forward_batch(x: &Tensor2, p: AdapterLayer<'_>) -> Result<AdapterPass> {
    let pre_down = affine(x, p.w_down, p.b_down)?;
    let act_down = relu(&pre_down);
    let pre_up = affine(&act_down, p.w_up, p.b_up)?;
    if pre_up.shape() != x.shape() {
        return Err(Error::dim(
            "adapter residual",
            format!("{:?}", x.shape()),
            format!("{:?}", pre_up.shape()),
        ));
    }
    let mut adapted = x.clone();
    for (y, &u) in adapted.data_mut().iter_mut().zip(pre_up.data()) {
        if u > 0.0 {
            *y += u;
        }
    }
    Ok(AdapterPass {
        pre_down,
        act_down,
        pre_up,
        adapted,
    })
}

/// `Σ_i w_i · features_i`.
pub fn layer_fuse(features: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if features.len() != weights.len() {
        return Err(Error::dim("layer_fuse", features.len(), weights.len()));
    }
    let d = features.first().map_or(0, Vec::len);
    let mut out = vec![0.0; d];
    for (f, &w) in features.iter().zip(weights) {
        if f.len() != d {
            return Err(Error::dim("layer_fuse width", d, f.len()));
        }
        for (o, &x) in out.iter_mut().zip(f) {
            *o += w * x;
        }
    }
    Ok(out)
}

fn layer_fuse_batch(adapted: &[Tensor2], weights: &[f64]) -> Result<Tensor2> {
    let mut fused = Tensor2::zeros(adapted[0].rows(), adapted[0].cols());
    for (y, &w) in adapted.iter().zip(weights) {
        fused.axpy(w, y)?;
    }
    Ok(fused)
}

/// Zeroes `round(ratio·d)` coordinates chosen uniformly without replacement.
/// Returns the masked copy and the sorted masked indices.
pub fn mask_features<R: Rng + ?Sized>(
    features: &[f64],
    ratio: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<usize>) {
    let d = features.len();
    let count = ((ratio * d as f64).round() as usize).min(d);
    let mut idx = sample(rng, d, count).into_vec();
    idx.sort_unstable();
    let mut out = features.to_vec();
    for &i in &idx {
        out[i] = 0.0;
    }
    (out, idx)
}

/// Reconstruction MLP applied to one (masked) fused vector.
pub fn recon_forward(masked: &[f64], model: &AdapterModel) -> Result<Vec<f64>> {
    let [w1, b1, w2, b2] = model.recon();
    let x = Tensor2::row_vector(masked.to_vec());
    let hidden = relu(&affine(&x, w1, b1)?);
    Ok(affine(&hidden, w2, b2)?.into_vec())
}

/// Adapted and fused acoustic embedding, no masking.
pub fn extract_acoustic(stack: &AcousticLayerStack, model: &AdapterModel) -> Result<Vec<f64>> {
    if stack.features.len() != model.config.k {
        return Err(Error::dim("extract_acoustic layers", model.config.k, stack.features.len()));
    }
    let layers: Vec<Tensor2> = stack
        .features
        .iter()
        .map(|f| Tensor2::row_vector(f.clone()))
        .collect();
    Ok(extract_acoustic_batch(&layers, model)?.into_vec())
}

/// Batched [`extract_acoustic`]: `k` tensors of `B x d_a` in, `B x d_a` out.
pub fn extract_acoustic_batch(layers: &[Tensor2], model: &AdapterModel) -> Result<Tensor2> {
    model.check_layers(layers)?;
    let adapted = layers
        .iter()
        .enumerate()
        .map(|(i, x)| adapter_forward_batch(x, model.layer(i)).map(|p| p.adapted))
        .collect::<Result<Vec<_>>>()?;
    layer_fuse_batch(&adapted, model.layer_weights())
}

/// Classifier logits on the unmasked reconstruction, `B x 6`.
pub fn adapter_logits(layers: &[Tensor2], model: &AdapterModel) -> Result<Tensor2> {
    let fused = extract_acoustic_batch(layers, model)?;
    let [w1, b1, w2, b2] = model.recon();
    let hidden = relu(&affine(&fused, w1, b1)?);
    let recon = affine(&hidden, w2, b2)?;
    let (wc, bc) = model.classifier();
    affine(&recon, wc, bc)
}

pub fn adapter_predict(layers: &[Tensor2], model: &AdapterModel) -> Result<Vec<usize>> {
    let logits = adapter_logits(layers, model)?;
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

#[derive(Clone, Debug)]
pub struct AdapterLoss {
    pub ce: f64,
    pub mlm: f64,
    pub total: f64,
    /// One gradient per entry of `model.params`, in order.
    pub grads: Vec<Tensor2>,
}

/// Joint objective on a labeled batch with freshly drawn masks.
pub fn adapter_loss<R: Rng + ?Sized>(
    model: &AdapterModel,
    batch: &AcousticSet,
    rng: &mut R,
) -> Result<AdapterLoss> {
    let masks: Vec<Vec<usize>> = (0..batch.len())
        .map(|_| {
            let count = ((model.config.mask_ratio * model.config.d_a as f64).round() as usize)
                .min(model.config.d_a);
            let mut idx = sample(rng, model.config.d_a, count).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    adapter_loss_with_masks(model, batch, &masks, None)
}

/// Joint objective with explicit masks.
///
/// `fixed_target` replaces the reconstruction target with a constant tensor;
/// it is how a stop-gradient target is expressed to the finite-difference
/// oracle.
pub fn adapter_loss_with_masks(
    model: &AdapterModel,
    batch: &AcousticSet,
    masks: &[Vec<usize>],
    fixed_target: Option<&Tensor2>,
) -> Result<AdapterLoss> {
    if batch.is_empty() {
        return Err(Error::Data("adapter_loss on an empty batch".into()));
    }
    model.check_layers(&batch.layers)?;
    if masks.len() != batch.len() {
        return Err(Error::dim("adapter masks", batch.len(), masks.len()));
    }
    let labels = batch.label_ordinals()?;
    let cfg = &model.config;
    let (b, d) = (batch.len(), cfg.d_a);
    let weights = model.layer_weights().to_vec();

    let passes = batch
        .layers
        .iter()
        .enumerate()
        .map(|(i, x)| adapter_forward_batch(x, model.layer(i)))
        .collect::<Result<Vec<_>>>()?;
    let adapted: Vec<Tensor2> = passes.iter().map(|p| p.adapted.clone()).collect();
    let fused = layer_fuse_batch(&adapted, &weights)?;

    let mut keep = Tensor2::filled(b, d, 1.0);
    for (r, m) in masks.iter().enumerate() {
        for &j in m {
            keep.set(r, j, 0.0);
        }
    }
    let masked = fused.hadamard(&keep)?;

    let [w1, b1, w2, b2] = model.recon();
    let pre_hidden = affine(&masked, w1, b1)?;
    let hidden = relu(&pre_hidden);
    let recon = affine(&hidden, w2, b2)?;
    let (wc, bc) = model.classifier();
    let logits = affine(&recon, wc, bc)?;

    let target = fixed_target.unwrap_or(&fused);
    if target.shape() != recon.shape() {
        return Err(Error::dim(
            "reconstruction target",
            format!("{:?}", recon.shape()),
            format!("{:?}", target.shape()),
        ));
    }

    let inv_b = 1.0 / b as f64;
    let mut ce = 0.0;
    let mut mlm = 0.0;
    let mut d_logits = Tensor2::zeros(b, NUM_CLASSES);
    let mut d_recon_mlm = Tensor2::zeros(b, d);
    for r in 0..b {
        let (l, g) = cross_entropy(logits.row(r), labels[r])?;
        ce += l;
        for (dst, gv) in d_logits.row_mut(r).iter_mut().zip(g) {
            *dst = gv * inv_b;
        }
        let (m, g) = mse(recon.row(r), target.row(r))?;
        mlm += m;
        for (dst, gv) in d_recon_mlm.row_mut(r).iter_mut().zip(g) {
            *dst = gv * inv_b;
        }
    }
    ce *= inv_b;
    mlm *= inv_b;

    // classifier
    let d_wc = recon.t_matmul(&d_logits)?;
    let d_bc = d_logits.sum_rows();
    let mut d_recon = d_logits.matmul_t(wc)?;
    d_recon.add_assign(&d_recon_mlm)?;

    // reconstruction MLP
    let d_w2 = hidden.t_matmul(&d_recon)?;
    let d_b2 = d_recon.sum_rows();
    let mut d_hidden = d_recon.matmul_t(w2)?;
    relu_backward_inplace(&mut d_hidden, &pre_hidden);
    let d_w1 = masked.t_matmul(&d_hidden)?;
    let d_b1 = d_hidden.sum_rows();
    let d_masked = d_hidden.matmul_t(w1)?;

    let mut d_fused = d_masked.hadamard(&keep)?;
    if fixed_target.is_none() && !cfg.stop_grad_target {
        d_fused.axpy(-1.0, &d_recon_mlm)?;
    }

    let mut grads = model.params.zeros_like();
    let mut d_weights = Tensor2::zeros(1, cfg.k);
    for (i, pass) in passes.iter().enumerate() {
        d_weights.data_mut()[i] = crate::numcore::dot(d_fused.data(), pass.adapted.data());
        let mut d_up = d_fused.scaled(weights[i]);
        relu_backward_inplace(&mut d_up, &pass.pre_up);
        let layer = model.layer(i);
        let d_w_up = pass.act_down.t_matmul(&d_up)?;
        let d_b_up = d_up.sum_rows();
        let mut d_down = d_up.matmul_t(layer.w_up)?;
        relu_backward_inplace(&mut d_down, &pass.pre_down);
        let d_w_down = batch.layers[i].t_matmul(&d_down)?;
        let d_b_down = d_down.sum_rows();
        let base = PER_LAYER * i;
        grads[base] = d_w_down;
        grads[base + 1] = d_b_down;
        grads[base + 2] = d_w_up;
        grads[base + 3] = d_b_up;
    }
    let lw = model.idx_layer_weights();
    grads[lw] = d_weights;
    grads[lw + 1] = d_w1;
    grads[lw + 2] = d_b1;
    grads[lw + 3] = d_w2;
    grads[lw + 4] = d_b2;
    grads[lw + 5] = d_wc;
    grads[lw + 6] = d_bc;

    Ok(AdapterLoss {
        ce,
        mlm,
        total: ce + mlm,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterEpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub mlm: f64,
    pub total: f64,
    pub val_wf1: f64,
    pub layer_weights: Vec<f64>,
}

impl AdapterEpochLog {
    pub fn tsv_header(k: usize) -> String {
        let mut h = String::from("epoch\tL_ce\tL_mlm\tL\tval_wF1");
        for i in 1..=k {
            h.push_str(&format!("\tw_{i}"));
        }
        h
    }

    pub fn tsv_row(&self) -> String {
        let mut row = format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.ce, self.mlm, self.total, self.val_wf1
        );
        for w in &self.layer_weights {
            row.push_str(&format!("\t{w:.6}"));
        }
        row
    }
}

pub fn adapter_weighted_f1(model: &AdapterModel, set: &AcousticSet) -> Result<f64> {
    let preds = adapter_predict(&set.layers, model)?;
    weighted_f1(&preds, &set.label_ordinals()?)
}

/// Minibatch Adam on the joint objective. The returned model is the one
/// with the best weighted F1 on `val` (or on `train` when `val` is empty).
pub fn train_adapter_stage(
    train: &AcousticSet,
    val: &AcousticSet,
    config: AdapterConfig,
    schedule: &StageSchedule,
    seed: u64,
) -> Result<(AdapterModel, Vec<AdapterEpochLog>)> {
    schedule.validate(train.len(), "adapter stage")?;
    train.label_ordinals()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = AdapterModel::new(config, &mut rng)?;
    let mut adam = AdamState::new(schedule.adam.clone(), &model.params);
    let monitor = if val.is_empty() { train } else { val };

    let mut best = model.clone();
    let mut stopper = EarlyStopping::new(schedule.patience);
    let mut log = Vec::new();
    for epoch in 1..=schedule.epochs {
        let (mut ce, mut mlm) = (0.0, 0.0);
        for chunk in minibatches(train.len(), schedule.batch_size, &mut rng) {
            let batch = train.subset(&chunk);
            let out = adapter_loss(&model, &batch, &mut rng)?;
            check_finite(out.total, "adapter loss", epoch)?;
            let w = chunk.len() as f64 / train.len() as f64;
            ce += w * out.ce;
            mlm += w * out.mlm;
            model.params.set_grads(out.grads)?;
            adam.step(&mut model.params)?;
        }
        let val_wf1 = adapter_weighted_f1(&model, monitor)?;
        log.push(AdapterEpochLog {
            epoch,
            ce,
            mlm,
            total: ce + mlm,
            val_wf1,
            layer_weights: model.layer_weights().to_vec(),
        });
        if stopper.observe(epoch, val_wf1) {
            best = model.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    best.params.zero_grads();
    Ok((best, log))
}

impl CheckpointModel for AdapterModel {
    const KIND: &'static str = "AdapterModel";

    fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new(Self::KIND);
        ck.dims = vec![
            ("k".into(), c.k as u64),
            ("d_a".into(), c.d_a as u64),
            ("bottleneck".into(), c.bottleneck as u64),
            ("best_layer".into(), c.best_layer as u64),
        ];
        ck.scalars = vec![
            ("mask_ratio".into(), c.mask_ratio),
            ("stop_grad_target".into(), f64::from(u8::from(c.stop_grad_target))),
        ];
        ck.params = self.params.clone();
        ck.params.zero_grads();
        ck
    }

    fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config = AdapterConfig {
            k: ck.dim("k")?,
            d_a: ck.dim("d_a")?,
            bottleneck: ck.dim("bottleneck")?,
            best_layer: ck.dim("best_layer")?,
            mask_ratio: ck.scalar("mask_ratio")?,
            stop_grad_target: ck.scalar("stop_grad_target")? != 0.0,
        };
        let mut model = AdapterModel::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        restore_params(Self::KIND, &mut model.params, &ck.params)?;
        Ok(model)
    }
}

impl AdapterModel {
    /// Fails unless this model consumes stacks of the store's shape.
    pub fn check_store(&self, store: &FeatureStore) -> Result<()> {
        if self.config.k != store.k() || self.config.d_a != store.d_a() {
            return Err(Error::Incompatible {
                expected: format!("k={}, d_a={} (feature store)", store.k(), store.d_a()),
                found: format!("k={}, d_a={} (AdapterModel)", self.config.k, self.config.d_a),
            });
        }
        Ok(())
    }
}
