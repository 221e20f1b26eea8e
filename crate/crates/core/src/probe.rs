//! Linear probes: a single fully connected softmax classifier per feature
//! set, scored by weighted F1 under k-fold cross-validation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data_io::{kfold_split, mean_std, weighted_f1, FeatureStore};
use crate::error::{Error, Result};
use crate::label::NUM_CLASSES;
use crate::numcore::{affine, argmax, cross_entropy, uniform_init, AdamState, ParamSet, Tensor2};
use crate::train::{minibatches, StageSchedule};

/// Trains `x·W + b` with cross-entropy and returns `(W, b)`.
pub fn train_linear_probe(
    x: &Tensor2,
    labels: &[usize],
    schedule: &StageSchedule,
    seed: u64,
) -> Result<ParamSet> {
    if x.rows() != labels.len() {
        return Err(Error::dim("linear probe labels", x.rows(), labels.len()));
    }
    schedule.validate(x.rows(), "linear probe")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let bound = 1.0 / (x.cols() as f64).sqrt();
    params.push("w", uniform_init(x.cols(), NUM_CLASSES, bound, &mut rng));
    params.push("b", Tensor2::zeros(1, NUM_CLASSES));
    let mut adam = AdamState::new(schedule.adam.clone(), &params);
    for _ in 0..schedule.epochs {
        for chunk in minibatches(x.rows(), schedule.batch_size, &mut rng) {
            let xb = x.select_rows(&chunk);
            let logits = affine(&xb, params.value(0), params.value(1))?;
            let inv = 1.0 / chunk.len() as f64;
            let mut d = Tensor2::zeros(chunk.len(), NUM_CLASSES);
            for (r, &i) in chunk.iter().enumerate() {
                let (_, g) = cross_entropy(logits.row(r), labels[i])?;
                for (dv, gv) in d.row_mut(r).iter_mut().zip(g) {
                    *dv = gv * inv;
                }
            }
            params.set_grads(vec![xb.t_matmul(&d)?, d.sum_rows()])?;
            adam.step(&mut params)?;
        }
    }
    Ok(params)
}

pub fn linear_probe_predict(params: &ParamSet, x: &Tensor2) -> Result<Vec<usize>> {
    let logits = affine(x, params.value(0), params.value(1))?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

/// Weighted F1 of a linear probe on each validation fold.
pub fn linear_probe_cv(
    x: &Tensor2,
    labels: &[usize],
    folds: usize,
    schedule: &StageSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..x.rows()).collect();
    let plan = kfold_split(&all, folds, seed)?;
    (0..plan.k())
        .map(|f| {
            let tr = plan.train_ids(f);
            let va = plan.val_ids(f);
            let tr_labels: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
            let va_labels: Vec<usize> = va.iter().map(|&i| labels[i]).collect();
            let params = train_linear_probe(&x.select_rows(&tr), &tr_labels, schedule, seed ^ (f as u64 + 1))?;
            weighted_f1(&linear_probe_predict(&params, &x.select_rows(va))?, &va_labels)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub layer_index: usize,
    pub layer_id: u32,
    pub fold_scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    /// Index into `rows` of the best mean; ties go to the lower index.
    pub best: usize,
}

impl ProbeReport {
    pub fn means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layer_index\tlayer_id\tmean_wF1\tstd_wF1\tbest\n");
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{}\n",
                r.layer_index,
                r.layer_id,
                r.mean,
                r.std,
                if i == self.best { "*" } else { "" }
            ));
        }
        out
    }
}

/// Probes every acoustic layer of the labeled split.
pub fn probe_layers(
    store: &FeatureStore,
    folds: usize,
    schedule: &StageSchedule,
    seed: u64,
) -> Result<ProbeReport> {
    let idx = store.labeled_indices();
    if idx.is_empty() {
        return Err(Error::Data("layer probe needs labeled samples; the store has none".into()));
    }
    if idx.len() < folds {
        return Err(Error::Argument(format!(
            "{} labeled samples cannot be split into {folds} folds",
            idx.len()
        )));
    }
    let labels: Vec<usize> = store
        .labels(&idx)
        .into_iter()
        .map(|l| l.map(|l| l.ordinal()).unwrap_or(0))
        .collect();
    let mut rows = Vec::with_capacity(store.k());
    for layer in 0..store.k() {
        let x = store.acoustic_layer_batch(&idx, layer);
        let fold_scores = linear_probe_cv(&x, &labels, folds, schedule, seed)?;
        let (mean, std) = mean_std(&fold_scores);
        rows.push(ProbeRow {
            layer_index: layer,
            layer_id: store.layer_ids()[layer],
            fold_scores,
            mean,
            std,
        });
    }
    let best = argmax(&rows.iter().map(|r| r.mean).collect::<Vec<_>>());
    Ok(ProbeReport { rows, best })
}
