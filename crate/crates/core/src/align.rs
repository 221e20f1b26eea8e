//! Stage 2: map pooled visual features into the acoustic embedding space.
//!
//! The vision MLP is `f_v = relu(relu(x·W_1 + b_1)·W_2 + b_2)` with
//! `W_1: d_v x d_a` and `W_2: d_a x d_a`. It is trained on unlabeled pairs
//! against a frozen acoustic extractor with the symmetric in-batch
//! contrastive loss over cosine similarities scaled by a learnable
//! temperature `τ = exp(log_tau)`.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{extract_acoustic_batch, AdapterModel};
use crate::data_io::checkpoint::restore_params;
use crate::data_io::{Checkpoint, CheckpointModel, FeatureStore};
use crate::error::{Error, Result};
use crate::numcore::{
    affine, argmax, dot, log_sum_exp, norm, relu, relu_backward_inplace, softmax, uniform_init,
    AdamState, ParamSet, Tensor2,
};
use crate::train::{check_finite, minibatches, StageSchedule};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
pub const TAU_INIT: f64 = 0.07;

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const LOG_TAU: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct VisionMLP {
    pub d_v: usize,
    pub d_a: usize,
    pub params: ParamSet,
}

impl VisionMLP {
    pub fn new<R: Rng + ?Sized>(d_v: usize, d_a: usize, rng: &mut R) -> Result<Self> {
        if d_v == 0 || d_a == 0 {
            return Err(Error::Config("vision MLP dimensions must be positive".into()));
        }
        let mut params = ParamSet::new();
        params.push("w1", uniform_init(d_v, d_a, 1.0 / (d_v as f64).sqrt(), rng));
        params.push("b1", Tensor2::zeros(1, d_a));
        params.push("w2", uniform_init(d_a, d_a, 1.0 / (d_a as f64).sqrt(), rng));
        params.push("b2", Tensor2::zeros(1, d_a));
        params.push("log_tau", Tensor2::row_vector(vec![TAU_INIT.ln()]));
        Ok(Self { d_v, d_a, params })
    }

    pub fn tau(&self) -> f64 {
        self.params.value(LOG_TAU).data()[0].exp()
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.params.value_mut(LOG_TAU).data_mut()[0] = tau.ln();
    }

    /// Keeps `τ` inside `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_tau(&mut self) {
        let lt = &mut self.params.value_mut(LOG_TAU).data_mut()[0];
        *lt = lt.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }
}

struct VisionPass {
    pre_hidden: Tensor2,
    hidden: Tensor2,
    pre_out: Tensor2,
    out: Tensor2,
}

fn vision_forward_batch(x: &Tensor2, m: &VisionMLP) -> Result<VisionPass> {
    if x.cols() != m.d_v {
        return Err(Error::dim("vision_forward", m.d_v, x.cols()));
    }
    let p = &m.params;
    let pre_hidden = affine(x, p.value(W1), p.value(B1))?;
    let hidden = relu(&pre_hidden);
    let pre_out = affine(&hidden, p.value(W2), p.value(B2))?;
    let out = relu(&pre_out);
    Ok(VisionPass {
        pre_hidden,
        hidden,
        pre_out,
        out,
    })
}

/// Maps one pooled visual vector (`d_v`) into acoustic space (`d_a`).
pub fn vision_forward(x: &[f64], m: &VisionMLP) -> Result<Vec<f64>> {
    Ok(vision_forward_batch(&Tensor2::row_vector(x.to_vec()), m)?
        .out
        .into_vec())
}

pub fn vision_forward_all(x: &Tensor2, m: &VisionMLP) -> Result<Tensor2> {
    Ok(vision_forward_batch(x, m)?.out)
}

fn unit_rows(x: &Tensor2, side: &str, ids: Option<&[String]>) -> Result<(Tensor2, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let n = norm(x.row(r));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateEmbedding(match ids {
                Some(ids) => format!("{side} embedding of sample {}", ids[r]),
                None => format!("{side} row {r}"),
            }));
        }
        for v in out.row_mut(r) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// `S[i][j] = cos(visual_i, acoustic_j)`.
pub fn cosine_similarity_matrix(visual: &Tensor2, acoustic: &Tensor2) -> Result<Tensor2> {
    if visual.cols() != acoustic.cols() {
        return Err(Error::dim("cosine_similarity_matrix", visual.cols(), acoustic.cols()));
    }
    let (u, _) = unit_rows(visual, "visual", None)?;
    let (a, _) = unit_rows(acoustic, "acoustic", None)?;
    u.matmul_t(&a)
}

#[derive(Clone, Debug)]
pub struct ContrastiveLoss {
    pub loss: f64,
    pub d_sim: Tensor2,
    pub d_tau: f64,
}

/// Symmetric in-batch cross-entropy over `S/τ` with the diagonal as targets.
pub fn contrastive_loss(sim: &Tensor2, tau: f64) -> Result<ContrastiveLoss> {
    let j = sim.rows();
    if sim.cols() != j {
        return Err(Error::dim("contrastive_loss", j, sim.cols()));
    }
    if j < 2 {
        return Err(Error::Argument(format!("contrastive batch needs J >= 2, got {j}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    let logits = sim.scaled(1.0 / tau);
    let logits_t = logits.transpose();
    let scale = 0.5 / j as f64;

    let mut loss = 0.0;
    // gradient w.r.t. the logits
    let mut g = Tensor2::zeros(j, j);
    for i in 0..j {
        let row = logits.row(i);
        loss += log_sum_exp(row) - row[i];
        let p = softmax(row)?;
        for (c, pc) in p.into_iter().enumerate() {
            let y = if c == i { 1.0 } else { 0.0 };
            g.data_mut()[i * j + c] += scale * (pc - y);
        }
        let col = logits_t.row(i);
        loss += log_sum_exp(col) - col[i];
        let p = softmax(col)?;
        for (r, pr) in p.into_iter().enumerate() {
            let y = if r == i { 1.0 } else { 0.0 };
            g.data_mut()[r * j + i] += scale * (pr - y);
        }
    }
    loss *= scale;
    let d_tau = -dot(g.data(), sim.data()) / (tau * tau);
    let d_sim = g.scaled(1.0 / tau);
    Ok(ContrastiveLoss {
        loss,
        d_sim,
        d_tau,
    })
}

#[derive(Clone, Debug)]
pub struct AlignLoss {
    pub loss: f64,
    pub grads: Vec<Tensor2>,
}

/// Contrastive loss of a batch of visual inputs against fixed acoustic
/// embeddings, with gradients for every vision MLP parameter and `log_tau`.
pub fn alignment_loss(model: &VisionMLP, visual: &Tensor2, acoustic: &Tensor2) -> Result<AlignLoss> {
    alignment_loss_named(model, visual, acoustic, None)
}

fn alignment_loss_named(
    model: &VisionMLP,
    visual: &Tensor2,
    acoustic: &Tensor2,
    ids: Option<&[String]>,
) -> Result<AlignLoss> {
    if visual.rows() != acoustic.rows() {
        return Err(Error::dim("alignment pairs", visual.rows(), acoustic.rows()));
    }
    if acoustic.cols() != model.d_a {
        return Err(Error::dim("alignment acoustic width", model.d_a, acoustic.cols()));
    }
    let pass = vision_forward_batch(visual, model)?;
    let (u, norms) = unit_rows(&pass.out, "visual", ids)?;
    let (a_hat, _) = unit_rows(acoustic, "acoustic", ids)?;
    let sim = u.matmul_t(&a_hat)?;
    let tau = model.tau();
    let cl = contrastive_loss(&sim, tau)?;

    // through the row normalisation of f_v
    let d_u = cl.d_sim.matmul(&a_hat)?;
    let mut d_out = Tensor2::zeros(d_u.rows(), d_u.cols());
    for r in 0..d_u.rows() {
        let ur = u.row(r);
        let proj = dot(d_u.row(r), ur);
        for ((o, &g), &uv) in d_out.row_mut(r).iter_mut().zip(d_u.row(r)).zip(ur) {
            *o = (g - proj * uv) / norms[r];
        }
    }
    relu_backward_inplace(&mut d_out, &pass.pre_out);
    let p = &model.params;
    let d_w2 = pass.hidden.t_matmul(&d_out)?;
    let d_b2 = d_out.sum_rows();
    let mut d_hidden = d_out.matmul_t(p.value(W2))?;
    relu_backward_inplace(&mut d_hidden, &pass.pre_hidden);
    let d_w1 = visual.t_matmul(&d_hidden)?;
    let d_b1 = d_hidden.sum_rows();
    let d_log_tau = Tensor2::row_vector(vec![cl.d_tau * tau]);

    Ok(AlignLoss {
        loss: cl.loss,
        grads: vec![d_w1, d_b1, d_w2, d_b2, d_log_tau],
    })
}

/// Fraction of rows whose most similar acoustic row is their own partner.
/// Ties go to the lowest index.
pub fn retrieval_recall_at_1(visual: &Tensor2, acoustic: &Tensor2) -> Result<f64> {
    if visual.rows() == 0 {
        return Err(Error::Argument("recall of an empty set".into()));
    }
    let sim = cosine_similarity_matrix(visual, acoustic)?;
    let hits = (0..sim.rows()).filter(|&i| argmax(sim.row(i)) == i).count();
    Ok(hits as f64 / sim.rows() as f64)
}

/// Recall@1 with candidates restricted to consecutive blocks of `batch`
/// rows, averaged over rows.
pub fn in_batch_recall_at_1(visual: &Tensor2, acoustic: &Tensor2, batch: usize) -> Result<f64> {
    let n = visual.rows();
    if batch == 0 || n == 0 {
        return Err(Error::Argument("in-batch recall needs rows and a positive batch".into()));
    }
    let mut hits = 0.0;
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let r = retrieval_recall_at_1(&visual.select_rows(&idx), &acoustic.select_rows(&idx))?;
        hits += r * idx.len() as f64;
        start += batch;
    }
    Ok(hits / n as f64)
}

/// Mean matched-pair cosine minus mean mismatched cosine.
pub fn alignment_gap(visual: &Tensor2, acoustic: &Tensor2) -> Result<f64> {
    let sim = cosine_similarity_matrix(visual, acoustic)?;
    let j = sim.rows();
    if j < 2 {
        return Err(Error::Argument("alignment gap needs at least two pairs".into()));
    }
    let diag: f64 = (0..j).map(|i| sim.get(i, i)).sum();
    let total: f64 = sim.data().iter().sum();
    Ok(diag / j as f64 - (total - diag) / (j * (j - 1)) as f64)
}

/// Paired visual features and acoustic layer stacks.
#[derive(Clone, Debug)]
pub struct PairedSet {
    pub ids: Vec<String>,
    pub visual: Tensor2,
    pub layers: Vec<Tensor2>,
}

impl PairedSet {
    pub fn from_store(store: &FeatureStore, idx: &[usize]) -> Result<Self> {
        let ids = store.ids(idx);
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Data(format!("duplicate sample id {dup} in paired set")));
        }
        Ok(Self {
            ids,
            visual: store.visual_batch(idx),
            layers: store.acoustic_batch(idx),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub tau: f64,
    pub recall_at_1: f64,
}

impl AlignEpochLog {
    pub const TSV_HEADER: &'static str = "epoch\tL_ita\ttau\trecall@1";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.loss, self.tau, self.recall_at_1
        )
    }
}

/// Trains a fresh vision MLP against the frozen `extractor`.
///
/// Recall@1 in the log is measured in blocks of the training batch size on
/// `held_out` when given, else on the training pairs.
pub fn train_alignment_stage(
    train: &PairedSet,
    held_out: Option<&PairedSet>,
    extractor: &AdapterModel,
    schedule: &StageSchedule,
    seed: u64,
) -> Result<(VisionMLP, Vec<AlignEpochLog>)> {
    schedule.validate(train.len(), "alignment stage")?;
    if schedule.batch_size > train.len() {
        return Err(Error::Config(format!(
            "alignment batch size {} exceeds the {} unlabeled pairs; reduce --align-batch to at most {}",
            schedule.batch_size,
            train.len(),
            train.len()
        )));
    }
    if schedule.batch_size < 2 {
        return Err(Error::Config("alignment batch size must be at least 2".into()));
    }
    let acoustic = extract_acoustic_batch(&train.layers, extractor)?;
    let monitor = match held_out {
        Some(h) => (h.visual.clone(), extract_acoustic_batch(&h.layers, extractor)?),
        None => (train.visual.clone(), acoustic.clone()),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VisionMLP::new(train.visual.cols(), acoustic.cols(), &mut rng)?;
    let mut adam = AdamState::new(schedule.adam.clone(), &model.params);
    let mut log = Vec::new();
    for epoch in 1..=schedule.epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in minibatches(train.len(), schedule.batch_size, &mut rng) {
            if chunk.len() < 2 {
                continue;
            }
            let ids: Vec<String> = chunk.iter().map(|&i| train.ids[i].clone()).collect();
            let out = alignment_loss_named(
                &model,
                &train.visual.select_rows(&chunk),
                &acoustic.select_rows(&chunk),
                Some(&ids),
            )?;
            check_finite(out.loss, "contrastive loss", epoch)?;
            total += out.loss * chunk.len() as f64;
            count += chunk.len();
            model.params.set_grads(out.grads)?;
            adam.step(&mut model.params)?;
            model.clamp_tau();
        }
        let fv = vision_forward_all(&monitor.0, &model)?;
        let recall = in_batch_recall_at_1(&fv, &monitor.1, schedule.batch_size)?;
        log.push(AlignEpochLog {
            epoch,
            loss: total / count.max(1) as f64,
            tau: model.tau(),
            recall_at_1: recall,
        });
    }
    model.params.zero_grads();
    Ok((model, log))
}

impl CheckpointModel for VisionMLP {
    const KIND: &'static str = "VisionMLP";

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::KIND);
        ck.dims = vec![("d_v".into(), self.d_v as u64), ("d_a".into(), self.d_a as u64)];
        ck.params = self.params.clone();
        ck.params.zero_grads();
        ck
    }

    fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut m = VisionMLP::new(ck.dim("d_v")?, ck.dim("d_a")?, &mut ChaCha8Rng::seed_from_u64(0))?;
        restore_params(Self::KIND, &mut m.params, &ck.params)?;
        Ok(m)
    }
}
