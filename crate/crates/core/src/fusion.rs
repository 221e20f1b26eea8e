//! Stage 3: per-modality projections, softmax modality attention and a
//! six-way classifier.
//!
//! For each modality `h_m = relu(f_m·P_1 + c_1)·P_2 + c_2`. Scores are
//! `e_m = h_m·w_α + b_α`, `α = softmax(e)` over the active modalities and
//! `z = Σ α_m h_m`. Since `b_α` is added to every score it cancels inside the
//! softmax; it is stored for checkpoint compatibility but the scores are
//! evaluated without it, so its gradient is exactly zero.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{extract_acoustic_batch, AdapterModel};
use crate::align::{vision_forward_all, VisionMLP};
use crate::data_io::checkpoint::restore_params;
use crate::data_io::{weighted_f1, Checkpoint, CheckpointModel, FeatureStore};
use crate::error::{Error, Result};
use crate::label::{EmotionLabel, NUM_CLASSES};
use crate::numcore::{
    affine, argmax, cross_entropy, dot, relu, relu_backward_inplace, softmax, uniform_init,
    AdamState, ParamSet, Tensor2,
};
use crate::train::{check_finite, minibatches, EarlyStopping, StageSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Acoustic,
    Lexical,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Acoustic, Modality::Lexical, Modality::Visual];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Acoustic => "a",
            Modality::Lexical => "l",
            Modality::Visual => "v",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Modality::Acoustic),
            "l" => Ok(Modality::Lexical),
            "v" => Ok(Modality::Visual),
            other => Err(Error::Argument(format!(
                "unknown modality tag {other:?}; expected a, l or v"
            ))),
        }
    }
}

/// Nonempty subset of {a, l, v}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalitySet([bool; 3]);

impl ModalitySet {
    pub const FULL: ModalitySet = ModalitySet([true; 3]);

    pub fn new(members: &[Modality]) -> Result<Self> {
        let mut set = [false; 3];
        for m in members {
            set[m.index()] = true;
        }
        if !set.iter().any(|&b| b) {
            return Err(Error::Config("modality subset must not be empty".into()));
        }
        Ok(Self(set))
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0[m.index()]
    }

    pub fn members(self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|&m| self.contains(m)).collect()
    }

    pub fn bits(self) -> u64 {
        self.0.iter().enumerate().map(|(i, &b)| u64::from(b) << i).sum()
    }

    pub fn from_bits(bits: u64) -> Result<Self> {
        let members: Vec<Modality> = Modality::ALL
            .into_iter()
            .filter(|m| bits & (1 << m.index()) != 0)
            .collect();
        Self::new(&members)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in self.members() {
            f.write_str(m.tag())?;
        }
        Ok(())
    }
}

/// Accepts `alv`, `a,l,v` or `a+l`.
impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let members = s
            .chars()
            .filter(|c| !matches!(c, ',' | '+' | ' '))
            .map(|c| c.to_string().parse())
            .collect::<Result<Vec<Modality>>>()?;
        Self::new(&members).map_err(|_| Error::Argument("modality subset must not be empty".into()))
    }
}

/// How samples lacking a modality are fused.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MissingPolicy {
    /// Attention softmax over the present modalities only.
    #[default]
    Restrict,
    /// Missing inputs are replaced by zero vectors.
    ZeroImpute,
}

impl FromStr for MissingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "restrict" => Ok(MissingPolicy::Restrict),
            "zero" | "zero-impute" => Ok(MissingPolicy::ZeroImpute),
            other => Err(Error::Argument(format!(
                "unknown missing-modality policy {other:?}; expected restrict or zero-impute"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// Input widths of the acoustic, lexical and visual branches.
    pub input_dims: [usize; 3],
    pub d_h: usize,
    pub modalities: ModalitySet,
    pub missing: MissingPolicy,
}

impl FusionConfig {
    pub fn new(d_a: usize, d_l: usize, d_v: usize, d_h: usize) -> Self {
        Self {
            input_dims: [d_a, d_l, d_v],
            d_h,
            modalities: ModalitySet::FULL,
            missing: MissingPolicy::Restrict,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 {
            return Err(Error::Config("d_h must be positive".into()));
        }
        for m in Modality::ALL {
            if self.input_dims[m.index()] == 0 {
                return Err(Error::Config(format!("input width of modality {m} must be positive")));
            }
        }
        Ok(())
    }
}

const ATTN_W: usize = 12;
const ATTN_B: usize = 13;
const CLS_W: usize = 14;
const CLS_B: usize = 15;

fn proj_index(m: Modality) -> usize {
    4 * m.index()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub params: ParamSet,
}

impl FusionModel {
    /// Parameters of modalities outside the configured subset are frozen.
    pub fn new<R: Rng + ?Sized>(config: FusionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d_h = config.d_h;
        let mut params = ParamSet::new();
        for m in Modality::ALL {
            let d_m = config.input_dims[m.index()];
            let t = m.tag();
            params.push(format!("proj.{t}.w1"), uniform_init(d_m, d_h, 1.0 / (d_m as f64).sqrt(), rng));
            params.push(format!("proj.{t}.b1"), Tensor2::zeros(1, d_h));
            params.push(format!("proj.{t}.w2"), uniform_init(d_h, d_h, 1.0 / (d_h as f64).sqrt(), rng));
            params.push(format!("proj.{t}.b2"), Tensor2::zeros(1, d_h));
        }
        params.push("attn.w", uniform_init(1, d_h, 1.0 / (d_h as f64).sqrt(), rng));
        params.push("attn.b", Tensor2::zeros(1, 1));
        params.push(
            "classifier.w",
            uniform_init(d_h, NUM_CLASSES, 1.0 / (d_h as f64).sqrt(), rng),
        );
        params.push("classifier.b", Tensor2::zeros(1, NUM_CLASSES));
        for m in Modality::ALL {
            if !config.modalities.contains(m) {
                params.set_trainable_prefix(&format!("proj.{}.", m.tag()), false);
            }
        }
        Ok(Self { config, params })
    }

    pub fn d_h(&self) -> usize {
        self.config.d_h
    }

    pub fn attention_vector(&self) -> &[f64] {
        self.params.value(ATTN_W).data()
    }

    pub fn attention_bias(&self) -> f64 {
        self.params.value(ATTN_B).data()[0]
    }

    /// Fails unless `emb` has the input widths this model was built for.
    pub fn check_inputs(&self, emb: &ModalityEmbeddings) -> Result<()> {
        let found = emb.widths();
        if found != self.config.input_dims {
            return Err(Error::Incompatible {
                expected: format!("input widths a/l/v = {:?} (FusionModel)", self.config.input_dims),
                found: format!("{found:?} (embeddings)"),
            });
        }
        Ok(())
    }
}

struct Projection {
    pre_hidden: Tensor2,
    hidden: Tensor2,
    out: Tensor2,
}

fn project_batch(x: &Tensor2, model: &FusionModel, m: Modality) -> Result<Projection> {
    let d_m = model.config.input_dims[m.index()];
    if x.cols() != d_m {
        return Err(Error::dim(format!("project_modality({m})"), d_m, x.cols()));
    }
    let p = &model.params;
    let base = proj_index(m);
    let pre_hidden = affine(x, p.value(base), p.value(base + 1))?;
    let hidden = relu(&pre_hidden);
    let out = affine(&hidden, p.value(base + 2), p.value(base + 3))?;
    Ok(Projection {
        pre_hidden,
        hidden,
        out,
    })
}

/// Projects one modality vector to width `d_h`.
pub fn project_modality(f_m: &[f64], model: &FusionModel, m: Modality) -> Result<Vec<f64>> {
    Ok(project_batch(&Tensor2::row_vector(f_m.to_vec()), model, m)?
        .out
        .into_vec())
}

/// Attention weights over `hs` (inactive entries get weight 0) and the
/// fused vector.
fn fuse_row(hs: [&[f64]; 3], active: [bool; 3], w_alpha: &[f64]) -> Result<(Vec<f64>, [f64; 3])> {
    let scores: [f64; 3] = std::array::from_fn(|m| if active[m] { dot(hs[m], w_alpha) } else { 0.0 });
    fuse_scores(hs, active, scores)
}

fn fuse_scores(hs: [&[f64]; 3], active: [bool; 3], scores: [f64; 3]) -> Result<(Vec<f64>, [f64; 3])> {
    let idx: Vec<usize> = (0..3).filter(|&m| active[m]).collect();
    let a = softmax(&idx.iter().map(|&m| scores[m]).collect::<Vec<_>>())?;
    let mut alpha = [0.0; 3];
    let mut z = vec![0.0; hs[0].len()];
    for (&m, &am) in idx.iter().zip(&a) {
        alpha[m] = am;
        for (zv, &hv) in z.iter_mut().zip(hs[m]) {
            *zv += am * hv;
        }
    }
    Ok((z, alpha))
}

/// Fuses three projected vectors with the model's attention scorer.
pub fn attention_fuse(
    h_a: &[f64],
    h_l: &[f64],
    h_v: &[f64],
    model: &FusionModel,
) -> Result<(Vec<f64>, [f64; 3])> {
    let d_h = model.d_h();
    for (m, h) in Modality::ALL.iter().zip([h_a, h_l, h_v]) {
        if h.len() != d_h {
            return Err(Error::dim(format!("attention_fuse({m})"), d_h, h.len()));
        }
    }
    fuse_row([h_a, h_l, h_v], [true; 3], model.attention_vector())
}

/// Per-sample modality vectors with presence flags and optional labels.
#[derive(Clone, Debug)]
pub struct ModalityEmbeddings {
    pub ids: Vec<String>,
    /// Acoustic, lexical, visual; one row per sample.
    pub feats: [Tensor2; 3],
    pub present: Vec<[bool; 3]>,
    pub labels: Vec<Option<EmotionLabel>>,
}

impl ModalityEmbeddings {
    pub fn new(
        ids: Vec<String>,
        feats: [Tensor2; 3],
        present: Vec<[bool; 3]>,
        labels: Vec<Option<EmotionLabel>>,
    ) -> Result<Self> {
        let n = ids.len();
        for (m, f) in Modality::ALL.iter().zip(&feats) {
            if f.rows() != n {
                return Err(Error::dim(format!("embedding rows ({m})"), n, f.rows()));
            }
        }
        if present.len() != n || labels.len() != n {
            return Err(Error::dim("embedding metadata", n, present.len().min(labels.len())));
        }
        if let Some(i) = present.iter().position(|p| !p[0]) {
            return Err(Error::Data(format!("sample {} lacks the acoustic modality", ids[i])));
        }
        Ok(Self {
            ids,
            feats,
            present,
            labels,
        })
    }

    /// Embeds store samples through the frozen upstream models. Without a
    /// vision model the raw pooled visual vectors are used.
    pub fn from_store(
        store: &FeatureStore,
        idx: &[usize],
        adapter: &AdapterModel,
        vision: Option<&VisionMLP>,
    ) -> Result<Self> {
        adapter.check_store(store)?;
        let f_a = extract_acoustic_batch(&store.acoustic_batch(idx), adapter)?;
        let raw_v = store.visual_batch(idx);
        let f_v = match vision {
            Some(v) => {
                if v.d_v != store.d_v() || v.d_a != adapter.config.d_a {
                    return Err(Error::Incompatible {
                        expected: format!("d_v={}, d_a={} (store and adapter)", store.d_v(), adapter.config.d_a),
                        found: format!("d_v={}, d_a={} (VisionMLP)", v.d_v, v.d_a),
                    });
                }
                vision_forward_all(&raw_v, v)?
            }
            None => raw_v,
        };
        let f_l = store.lexical_batch(idx);
        Self::new(
            store.ids(idx),
            [f_a, f_l, f_v],
            vec![[true; 3]; idx.len()],
            store.labels(idx),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.feats[0].cols(), self.feats[1].cols(), self.feats[2].cols()]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            feats: [
                self.feats[0].select_rows(idx),
                self.feats[1].select_rows(idx),
                self.feats[2].select_rows(idx),
            ],
            present: idx.iter().map(|&i| self.present[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

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

    pub fn has_labels(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }
}

struct FusionPass {
    proj: [Option<Projection>; 3],
    active: Vec<[bool; 3]>,
    alpha: Vec<[f64; 3]>,
    z: Tensor2,
    logits: Tensor2,
}

fn active_modalities(model: &FusionModel, emb: &ModalityEmbeddings) -> Result<Vec<[bool; 3]>> {
    let set = model.config.modalities;
    emb.present
        .iter()
        .zip(&emb.ids)
        .map(|(p, id)| {
            let mut act = [false; 3];
            for m in Modality::ALL {
                act[m.index()] = set.contains(m)
                    && (p[m.index()] || model.config.missing == MissingPolicy::ZeroImpute);
            }
            if !act.iter().any(|&b| b) {
                return Err(Error::Data(format!(
                    "sample {id} has none of the modalities {set} and imputation is not configured"
                )));
            }
            Ok(act)
        })
        .collect()
}

fn fusion_forward(model: &FusionModel, emb: &ModalityEmbeddings) -> Result<FusionPass> {
    model.check_inputs(emb)?;
    let active = active_modalities(model, emb)?;
    let mut proj: [Option<Projection>; 3] = [None, None, None];
    for m in model.config.modalities.members() {
        let mut x = emb.feats[m.index()].clone();
        for (i, p) in emb.present.iter().enumerate() {
            if !p[m.index()] {
                x.row_mut(i).fill(0.0);
            }
        }
        proj[m.index()] = Some(project_batch(&x, model, m)?);
    }
    let n = emb.len();
    let d_h = model.d_h();
    let zero = vec![0.0; d_h];
    let mut z = Tensor2::zeros(n, d_h);
    let mut alpha = Vec::with_capacity(n);
    for i in 0..n {
        let hs: [&[f64]; 3] = std::array::from_fn(|m| match &proj[m] {
            Some(p) => p.out.row(i),
            None => zero.as_slice(),
        });
        let (zi, ai) = fuse_row(hs, active[i], model.attention_vector())?;
        z.row_mut(i).copy_from_slice(&zi);
        alpha.push(ai);
    }
    let logits = affine(&z, model.params.value(CLS_W), model.params.value(CLS_B))?;
    Ok(FusionPass {
        proj,
        active,
        alpha,
        z,
        logits,
    })
}

/// Classifier logits for every sample.
pub fn fusion_logits(model: &FusionModel, emb: &ModalityEmbeddings) -> Result<Tensor2> {
    Ok(fusion_forward(model, emb)?.logits)
}

#[derive(Clone, Debug)]
pub struct FusionLoss {
    pub loss: f64,
    pub grads: Vec<Tensor2>,
}

/// Batch-mean cross-entropy and gradients for every parameter.
pub fn fusion_loss(model: &FusionModel, batch: &ModalityEmbeddings) -> Result<FusionLoss> {
    let labels = batch.label_ordinals()?;
    if labels.is_empty() {
        return Err(Error::Argument("fusion loss of an empty batch".into()));
    }
    let pass = fusion_forward(model, batch)?;
    let n = labels.len();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_logits = Tensor2::zeros(n, NUM_CLASSES);
    for (i, &y) in labels.iter().enumerate() {
        let (l, g) = cross_entropy(pass.logits.row(i), y)?;
        loss += l * inv_n;
        for (d, gv) in d_logits.row_mut(i).iter_mut().zip(g) {
            *d = gv * inv_n;
        }
    }

    let p = &model.params;
    let mut grads = p.zeros_like();
    grads[CLS_W] = pass.z.t_matmul(&d_logits)?;
    grads[CLS_B] = d_logits.sum_rows();
    let d_z = d_logits.matmul_t(p.value(CLS_W))?;

    let d_h = model.d_h();
    let w_alpha = model.attention_vector();
    let mut d_h_out: [Option<Tensor2>; 3] =
        std::array::from_fn(|m| pass.proj[m].as_ref().map(|_| Tensor2::zeros(n, d_h)));
    let mut d_w_alpha = vec![0.0; d_h];
    for i in 0..n {
        let dz = d_z.row(i);
        let alpha = pass.alpha[i];
        let mut d_alpha = [0.0; 3];
        for m in 0..3 {
            if pass.active[i][m] {
                let h = pass.proj[m].as_ref().map(|pr| pr.out.row(i)).unwrap_or_default();
                d_alpha[m] = dot(dz, h);
            }
        }
        let mean: f64 = (0..3).map(|m| alpha[m] * d_alpha[m]).sum();
        for m in 0..3 {
            if !pass.active[i][m] {
                continue;
            }
            let d_e = alpha[m] * (d_alpha[m] - mean);
            let (Some(pr), Some(dh)) = (pass.proj[m].as_ref(), d_h_out[m].as_mut()) else {
                continue;
            };
            let h = pr.out.row(i);
            for (k, g) in dh.row_mut(i).iter_mut().enumerate() {
                *g = alpha[m] * dz[k] + d_e * w_alpha[k];
                d_w_alpha[k] += d_e * h[k];
            }
        }
    }
    grads[ATTN_W] = Tensor2::row_vector(d_w_alpha);

    for m in Modality::ALL {
        let (Some(pr), Some(d_out)) = (pass.proj[m.index()].as_ref(), d_h_out[m.index()].take()) else {
            continue;
        };
        let base = proj_index(m);
        let mut x = batch.feats[m.index()].clone();
        for (i, pres) in batch.present.iter().enumerate() {
            if !pres[m.index()] {
                x.row_mut(i).fill(0.0);
            }
        }
        grads[base + 2] = pr.hidden.t_matmul(&d_out)?;
        grads[base + 3] = d_out.sum_rows();
        let mut d_hidden = d_out.matmul_t(p.value(base + 2))?;
        relu_backward_inplace(&mut d_hidden, &pr.pre_hidden);
        grads[base] = x.t_matmul(&d_hidden)?;
        grads[base + 1] = d_hidden.sum_rows();
    }
    Ok(FusionLoss { loss, grads })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: EmotionLabel,
    pub probs: [f64; NUM_CLASSES],
    pub alpha: [f64; 3],
}

fn prediction_from_logits(logits: &[f64], alpha: [f64; 3]) -> Result<Prediction> {
    let p = softmax(logits)?;
    let label = EmotionLabel::from_ordinal(argmax(logits))
        .ok_or_else(|| Error::Argument(format!("expected {NUM_CLASSES} logits, got {}", logits.len())))?;
    let mut probs = [0.0; NUM_CLASSES];
    probs.copy_from_slice(&p);
    Ok(Prediction { label, probs, alpha })
}

/// Predictions for every sample; ties go to the lowest class index.
pub fn predict(model: &FusionModel, emb: &ModalityEmbeddings) -> Result<Vec<Prediction>> {
    let pass = fusion_forward(model, emb)?;
    (0..emb.len())
        .map(|i| prediction_from_logits(pass.logits.row(i), pass.alpha[i]))
        .collect()
}

/// Averages logits over several models, each paired with embeddings
/// produced by its own upstream models; α is averaged as well.
pub fn predict_ensemble(members: &[(&FusionModel, &ModalityEmbeddings)]) -> Result<Vec<Prediction>> {
    let Some((_, first)) = members.first() else {
        return Err(Error::Argument("ensemble of zero models".into()));
    };
    let n = first.len();
    let scale = 1.0 / members.len() as f64;
    let mut logits = Tensor2::zeros(n, NUM_CLASSES);
    let mut alpha = vec![[0.0; 3]; n];
    for (model, emb) in members {
        if emb.ids != first.ids {
            return Err(Error::Argument("ensemble members must embed the same samples".into()));
        }
        let pass = fusion_forward(model, emb)?;
        logits.axpy(scale, &pass.logits)?;
        for (acc, a) in alpha.iter_mut().zip(&pass.alpha) {
            for k in 0..3 {
                acc[k] += scale * a[k];
            }
        }
    }
    (0..n)
        .map(|i| prediction_from_logits(logits.row(i), alpha[i]))
        .collect()
}

pub const PREDICTIONS_TSV_HEADER: &str =
    "sample_id\tpredicted_label\tp_0\tp_1\tp_2\tp_3\tp_4\tp_5\talpha_a\talpha_l\talpha_v";

pub fn predictions_tsv(ids: &[String], preds: &[Prediction]) -> String {
    let mut out = String::from(PREDICTIONS_TSV_HEADER);
    out.push('\n');
    for (id, p) in ids.iter().zip(preds) {
        out.push_str(id);
        out.push('\t');
        out.push_str(p.label.name());
        for v in p.probs.iter().chain(&p.alpha) {
            out.push_str(&format!("\t{v:.6}"));
        }
        out.push('\n');
    }
    out
}

pub fn fusion_weighted_f1(model: &FusionModel, emb: &ModalityEmbeddings) -> Result<f64> {
    let preds: Vec<usize> = predict(model, emb)?
        .iter()
        .map(|p| p.label.ordinal())
        .collect();
    weighted_f1(&preds, &emb.label_ordinals()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_wf1: f64,
}

impl FusionEpochLog {
    pub const TSV_HEADER: &'static str = "epoch\tL_ce\tval_wF1";

    pub fn tsv_row(&self) -> String {
        format!("{}\t{:.6}\t{:.6}", self.epoch, self.loss, self.val_wf1)
    }
}

/// Minibatch Adam on [`fusion_loss`]. Returns the model with the best
/// weighted F1 on `val` (or on `train` when `val` is empty).
pub fn train_fusion_stage(
    train: &ModalityEmbeddings,
    val: &ModalityEmbeddings,
    config: FusionConfig,
    schedule: &StageSchedule,
    seed: u64,
) -> Result<(FusionModel, Vec<FusionEpochLog>)> {
    schedule.validate(train.len(), "fusion stage")?;
    train.label_ordinals()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FusionModel::new(config, &mut rng)?;
    model.check_inputs(train)?;
    let monitor = if val.is_empty() { train } else { val };
    let mut adam = AdamState::new(schedule.adam.clone(), &model.params);
    let mut best = model.clone();
    let mut stopper = EarlyStopping::new(schedule.patience);
    let mut log = Vec::new();
    for epoch in 1..=schedule.epochs {
        let mut total = 0.0;
        for chunk in minibatches(train.len(), schedule.batch_size, &mut rng) {
            let out = fusion_loss(&model, &train.subset(&chunk))?;
            check_finite(out.loss, "fusion loss", epoch)?;
            total += out.loss * chunk.len() as f64 / train.len() as f64;
            model.params.set_grads(out.grads)?;
            adam.step(&mut model.params)?;
        }
        let val_wf1 = fusion_weighted_f1(&model, monitor)?;
        log.push(FusionEpochLog {
            epoch,
            loss: total,
            val_wf1,
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

impl CheckpointModel for FusionModel {
    const KIND: &'static str = "FusionModel";

    fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new(Self::KIND);
        ck.dims = vec![
            ("d_a".into(), c.input_dims[0] as u64),
            ("d_l".into(), c.input_dims[1] as u64),
            ("d_v".into(), c.input_dims[2] as u64),
            ("d_h".into(), c.d_h as u64),
            ("modalities".into(), c.modalities.bits()),
            ("zero_impute".into(), u64::from(c.missing == MissingPolicy::ZeroImpute)),
        ];
        ck.params = self.params.clone();
        ck.params.zero_grads();
        ck
    }

    fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config = FusionConfig {
            input_dims: [ck.dim("d_a")?, ck.dim("d_l")?, ck.dim("d_v")?],
            d_h: ck.dim("d_h")?,
            modalities: ModalitySet::from_bits(ck.dim("modalities")? as u64)?,
            missing: if ck.dim("zero_impute")? != 0 {
                MissingPolicy::ZeroImpute
            } else {
                MissingPolicy::Restrict
            },
        };
        let mut model = FusionModel::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        restore_params(Self::KIND, &mut model.params, &ck.params)?;
        Ok(model)
    }
}
