//! Three-stage training on one partition, cross-validation and the
//! artifacts they write.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use emofuse_core::adapter::{extract_acoustic_batch, train_adapter_stage, AcousticSet, AdapterConfig, AdapterModel};
use emofuse_core::align::{
    alignment_gap, in_batch_recall_at_1, train_alignment_stage, vision_forward_all, AlignEpochLog,
    PairedSet, VisionMLP,
};
use emofuse_core::adapter::AdapterEpochLog;
use emofuse_core::data_io::{
    format_mean_std_pct, kfold_split, load_checkpoint, mean_std, save_checkpoint, FeatureStore, Split,
};
use emofuse_core::fusion::{
    fusion_weighted_f1, train_fusion_stage, FusionConfig, FusionEpochLog, FusionModel, ModalityEmbeddings,
};
use emofuse_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;

pub const ADAPTER_FILE: &str = "adapter.ckpt";
pub const VISION_FILE: &str = "vision.ckpt";
pub const FUSION_FILE: &str = "fusion.ckpt";

/// Independent stream per (run seed, fold, stage).
pub fn derive_seed(seed: u64, fold: u64, stage: u64) -> u64 {
    let mut z = seed
        .wrapping_add(fold.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stage.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Upstream and fusion models of one trained partition.
#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub adapter: AdapterModel,
    pub vision: Option<VisionMLP>,
    pub fusion: FusionModel,
}

impl TrainedModels {
    pub fn embed(&self, store: &FeatureStore, idx: &[usize]) -> Result<ModalityEmbeddings> {
        ModalityEmbeddings::from_store(store, idx, &self.adapter, self.vision.as_ref())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        save_checkpoint(&self.adapter, dir.join(ADAPTER_FILE))?;
        if let Some(v) = &self.vision {
            save_checkpoint(v, dir.join(VISION_FILE))?;
        }
        save_checkpoint(&self.fusion, dir.join(FUSION_FILE))
    }

    /// Loads a directory written by [`TrainedModels::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let fusion_path = dir.join(FUSION_FILE);
        if !fusion_path.exists() {
            return Err(Error::Argument(format!(
                "no fusion checkpoint at {}",
                fusion_path.display()
            )));
        }
        let vision_path = dir.join(VISION_FILE);
        Ok(Self {
            adapter: load_checkpoint(dir.join(ADAPTER_FILE))?,
            vision: if vision_path.exists() {
                Some(load_checkpoint(vision_path)?)
            } else {
                None
            },
            fusion: load_checkpoint(fusion_path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignSummary {
    pub recall_at_1: f64,
    pub gap_before: f64,
    pub gap_after: f64,
}

/// Training logs of one partition, already rendered as TSV.
#[derive(Clone, Debug, Default)]
pub struct StageLogs {
    pub adapter: String,
    pub align: Option<String>,
    pub fusion: String,
}

impl StageLogs {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("adapter_log.tsv"), &self.adapter)?;
        if let Some(a) = &self.align {
            write_file(&dir.join("align_log.tsv"), a)?;
        }
        write_file(&dir.join("fusion_log.tsv"), &self.fusion)
    }
}

fn render<T>(header: String, rows: &[T], row: impl Fn(&T) -> String) -> String {
    let mut out = header;
    out.push('\n');
    for r in rows {
        out.push_str(&row(r));
        out.push('\n');
    }
    out
}

/// Splits `idx` into (train, early-stopping holdout).
pub fn early_stopping_split(idx: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_es = (fraction * idx.len() as f64).round() as usize;
    if n_es == 0 || n_es >= idx.len() {
        return (idx.to_vec(), Vec::new());
    }
    let mut order = idx.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut es = order.split_off(order.len() - n_es);
    order.sort_unstable();
    es.sort_unstable();
    (order, es)
}

fn adapter_config(cfg: &RunConfig, store: &FeatureStore) -> AdapterConfig {
    let a = &cfg.adapter;
    let mut c = AdapterConfig::new(store.k(), store.d_a(), a.bottleneck);
    c.mask_ratio = a.mask_ratio;
    c.best_layer = a.best_layer;
    c.stop_grad_target = a.stop_grad_target;
    c
}

/// Stage 1 on `train` with early stopping on `es`.
pub fn run_adapter_stage(
    cfg: &RunConfig,
    store: &FeatureStore,
    train: &[usize],
    es: &[usize],
    seed: u64,
) -> Result<(AdapterModel, String)> {
    let (model, log) = train_adapter_stage(
        &AcousticSet::from_store(store, train),
        &AcousticSet::from_store(store, es),
        adapter_config(cfg, store),
        &cfg.adapter.schedule(),
        seed,
    )?;
    let text = render(AdapterEpochLog::tsv_header(store.k()), &log, AdapterEpochLog::tsv_row);
    Ok((model, text))
}

/// Stage 2 on the unlabeled split; held-out pairs come from the test split
/// when it is non-empty.
pub fn run_alignment_stage(
    cfg: &RunConfig,
    store: &FeatureStore,
    adapter: &AdapterModel,
    seed: u64,
) -> Result<(VisionMLP, String, AlignSummary)> {
    let unlabeled = store.indices_of(Split::Unlabeled);
    if unlabeled.is_empty() {
        return Err(Error::Data(
            "the store has no unlabeled split for visual alignment; rerun with --skip-align or without the v modality"
                .into(),
        ));
    }
    let train = PairedSet::from_store(store, &unlabeled)?;
    let test = store.indices_of(Split::Test);
    let held = if test.len() >= 2 {
        Some(PairedSet::from_store(store, &test)?)
    } else {
        None
    };
    let schedule = cfg.align.schedule();
    let (model, log) = train_alignment_stage(&train, held.as_ref(), adapter, &schedule, seed)?;

    let monitor = held.as_ref().unwrap_or(&train);
    let f_a = extract_acoustic_batch(&monitor.layers, adapter)?;
    // the untrained model is the one the stage starts from
    let initial = VisionMLP::new(store.d_v(), store.d_a(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let f_v = vision_forward_all(&monitor.visual, &model)?;
    let summary = AlignSummary {
        recall_at_1: in_batch_recall_at_1(&f_v, &f_a, schedule.batch_size)?,
        gap_before: alignment_gap(&vision_forward_all(&monitor.visual, &initial)?, &f_a)?,
        gap_after: alignment_gap(&f_v, &f_a)?,
    };
    let text = render(AlignEpochLog::TSV_HEADER.to_string(), &log, AlignEpochLog::tsv_row);
    Ok((model, text, summary))
}

pub fn fusion_config(cfg: &RunConfig, emb: &ModalityEmbeddings) -> Result<FusionConfig> {
    let [d_a, d_l, d_v] = emb.widths();
    let mut c = FusionConfig::new(d_a, d_l, d_v, cfg.fusion.d_h);
    c.modalities = cfg.modality_set()?;
    c.missing = cfg.missing_policy()?;
    Ok(c)
}

/// Stage 3 on embeddings from frozen upstream models.
pub fn run_fusion_stage(
    cfg: &RunConfig,
    train: &ModalityEmbeddings,
    es: &ModalityEmbeddings,
    seed: u64,
) -> Result<(FusionModel, String)> {
    let (model, log) = train_fusion_stage(train, es, fusion_config(cfg, train)?, &cfg.fusion.schedule(), seed)?;
    Ok((model, render(FusionEpochLog::TSV_HEADER.to_string(), &log, FusionEpochLog::tsv_row)))
}

/// Result of training all stages on one partition.
pub struct PartitionRun {
    pub models: TrainedModels,
    pub logs: StageLogs,
    pub align: Option<AlignSummary>,
    /// Sample ids each stage trained or early-stopped on.
    pub train_ids: Vec<String>,
    pub es_ids: Vec<String>,
}

/// Trains stage 1, then stage 2 if the visual branch is aligned, then
/// stage 3, all on labeled `train` with early stopping on `es`.
pub fn train_partition(
    cfg: &RunConfig,
    store: &FeatureStore,
    train: &[usize],
    es: &[usize],
    seed_base: u64,
) -> Result<PartitionRun> {
    let (adapter, adapter_log) = run_adapter_stage(cfg, store, train, es, derive_seed(seed_base, 0, 1))?;
    let (vision, align_log, align) = if cfg.uses_alignment()? {
        let (v, log, s) = run_alignment_stage(cfg, store, &adapter, derive_seed(seed_base, 0, 2))?;
        (Some(v), Some(log), Some(s))
    } else {
        (None, None, None)
    };
    let train_emb = ModalityEmbeddings::from_store(store, train, &adapter, vision.as_ref())?;
    let es_emb = ModalityEmbeddings::from_store(store, es, &adapter, vision.as_ref())?;
    let (fusion, fusion_log) = run_fusion_stage(cfg, &train_emb, &es_emb, derive_seed(seed_base, 0, 3))?;
    Ok(PartitionRun {
        models: TrainedModels {
            adapter,
            vision,
            fusion,
        },
        logs: StageLogs {
            adapter: adapter_log,
            align: align_log,
            fusion: fusion_log,
        },
        align,
        train_ids: train_emb.ids,
        es_ids: es_emb.ids,
    })
}

pub struct FoldResult {
    pub fold: usize,
    pub wf1: f64,
    pub n_train: usize,
    pub n_es: usize,
    pub n_val: usize,
    pub align: Option<AlignSummary>,
    pub audit: String,
}

pub struct CvResult {
    pub folds: Vec<FoldResult>,
}

impl CvResult {
    pub fn scores(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.wf1).collect()
    }

    pub fn report(&self) -> String {
        format_mean_std_pct(&self.scores())
    }

    /// Per-fold scores; the first line records the fold count.
    pub fn folds_tsv(&self) -> String {
        let mut out = format!("# k_folds\t{}\n", self.folds.len());
        out.push_str("fold\twF1\tn_train\tn_es\tn_val\talign_recall@1\talign_gap_before\talign_gap_after\n");
        for f in &self.folds {
            let _ = write!(out, "{}\t{:.6}\t{}\t{}\t{}", f.fold, f.wf1, f.n_train, f.n_es, f.n_val);
            match &f.align {
                Some(a) => {
                    let _ = writeln!(out, "\t{:.6}\t{:.6}\t{:.6}", a.recall_at_1, a.gap_before, a.gap_after);
                }
                None => out.push_str("\t-\t-\t-\n"),
            }
        }
        out
    }

    /// `fold, role, sample_id` for every id each fold's models consumed.
    pub fn audit_tsv(&self) -> String {
        let mut out = String::from("fold\trole\tsample_id\n");
        for f in &self.folds {
            out.push_str(&f.audit);
        }
        out
    }

    pub fn metrics_rows(&self, cfg: &RunConfig) -> Vec<(String, String)> {
        let scores = self.scores();
        let (mean, std) = mean_std(&scores);
        let mut rows = vec![
            ("seed".into(), cfg.seed.to_string()),
            ("folds".into(), self.folds.len().to_string()),
            ("modalities".into(), cfg.modalities.clone()),
            ("aligned".into(), cfg.uses_alignment().unwrap_or(false).to_string()),
            ("cv_wF1_mean".into(), format!("{mean:.6}")),
            ("cv_wF1_std".into(), format!("{std:.6}")),
            ("cv_wF1_report".into(), self.report()),
        ];
        let aligns: Vec<&AlignSummary> = self.folds.iter().filter_map(|f| f.align.as_ref()).collect();
        if !aligns.is_empty() {
            let n = aligns.len() as f64;
            let avg = |g: fn(&AlignSummary) -> f64| aligns.iter().map(|a| g(a)).sum::<f64>() / n;
            rows.push(("align_recall@1_mean".into(), format!("{:.6}", avg(|a| a.recall_at_1))));
            rows.push(("align_gap_before_mean".into(), format!("{:.6}", avg(|a| a.gap_before))));
            rows.push(("align_gap_after_mean".into(), format!("{:.6}", avg(|a| a.gap_after))));
        }
        rows
    }
}

pub fn metrics_tsv(rows: &[(String, String)]) -> String {
    render("metric\tvalue".to_string(), rows, |(k, v)| format!("{k}\t{v}"))
}

fn audit_lines(fold: usize, role: &str, ids: &[String]) -> String {
    ids.iter().map(|id| format!("{fold}\t{role}\t{id}\n")).collect()
}

/// k-fold cross-validation over the labeled split. Each fold trains every
/// stage from scratch; its validation fold is used only for scoring. When
/// `out` is given, per-fold checkpoints and logs go to `out/fold_<i>/`.
pub fn cross_validate(cfg: &RunConfig, store: &FeatureStore, out: Option<&Path>) -> Result<CvResult> {
    let labeled = store.labeled_indices();
    if labeled.len() < cfg.folds {
        return Err(Error::Argument(format!(
            "{} labeled samples cannot be split into {} folds",
            labeled.len(),
            cfg.folds
        )));
    }
    let plan = kfold_split(&labeled, cfg.folds, cfg.seed)?;
    plan.check(&labeled)?;
    let folds = (0..plan.k())
        .into_par_iter()
        .map(|f| -> Result<FoldResult> {
            let seed_base = derive_seed(cfg.seed, f as u64 + 1, 0);
            let (train, es) = early_stopping_split(&plan.train_ids(f), cfg.es_fraction, seed_base);
            let val = plan.val_ids(f);
            let run = train_partition(cfg, store, &train, &es, seed_base)?;
            let val_emb = run.models.embed(store, val)?;
            let wf1 = fusion_weighted_f1(&run.models.fusion, &val_emb)?;
            if let Some(dir) = out {
                let dir = fold_dir(dir, f);
                run.models.save(&dir)?;
                run.logs.write(&dir)?;
            }
            let mut audit = audit_lines(f, "train", &run.train_ids);
            audit.push_str(&audit_lines(f, "es", &run.es_ids));
            audit.push_str(&audit_lines(f, "val", &val_emb.ids));
            Ok(FoldResult {
                fold: f,
                wf1,
                n_train: train.len(),
                n_es: es.len(),
                n_val: val.len(),
                align: run.align,
                audit,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvResult { folds })
}

pub fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold_{fold}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_split_partitions() {
        let idx: Vec<usize> = (10..60).collect();
        let (tr, es) = early_stopping_split(&idx, 0.2, 3);
        assert_eq!((tr.len(), es.len()), (40, 10));
        let mut all = [tr.clone(), es.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, idx);
        assert_eq!(early_stopping_split(&idx, 0.2, 3), (tr, es));
        assert_eq!(early_stopping_split(&idx, 0.0, 3).1.len(), 0);
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> =
            (0..5).flat_map(|f| (0..4).map(move |st| derive_seed(1, f, st))).collect();
        assert_eq!(s.len(), 20);
    }
}
