use std::fmt::Write as _;
use std::path::Path;

use emofuse_core::adapter::AdapterModel;
use emofuse_core::data_io::{
    generate_synthetic, load_checkpoint, read_store, save_checkpoint, weighted_f1, write_store,
    FeatureStore, Split,
};
use emofuse_core::fusion::{predict, predict_ensemble, predictions_tsv, ModalityEmbeddings};
use emofuse_core::probe::probe_layers;
use emofuse_core::{EmotionLabel, Error, Result};

use crate::config::RunConfig;
use crate::run::{
    cross_validate, derive_seed, early_stopping_split, fold_dir, metrics_tsv, run_adapter_stage,
    run_alignment_stage, run_fusion_stage, train_partition, write_file, TrainedModels, ADAPTER_FILE,
    FUSION_FILE, VISION_FILE,
};

fn load_store(cfg: &RunConfig) -> Result<FeatureStore> {
    read_store(cfg.store_path()?)
}

fn store_summary(store: &FeatureStore) -> String {
    let mut s = format!(
        "n={} (labeled {}, unlabeled {}, test {}) k={} d_a={} d_v={} d_l={} layer_ids={:?}\nclass histogram:",
        store.len(),
        store.indices_of(Split::Labeled).len(),
        store.indices_of(Split::Unlabeled).len(),
        store.indices_of(Split::Test).len(),
        store.k(),
        store.d_a(),
        store.d_v(),
        store.d_l(),
        store.layer_ids(),
    );
    for (label, count) in EmotionLabel::ALL.iter().zip(store.class_histogram()) {
        let _ = write!(s, " {label}={count}");
    }
    s
}

pub fn gen_data(cfg: &RunConfig) -> Result<String> {
    let out = cfg.out_path()?;
    let store = generate_synthetic(&cfg.data.to_synthetic(cfg.seed))?;
    write_store(&store, out)?;
    Ok(format!("wrote {}\n{}\n", out.display(), store_summary(&store)))
}

pub fn probe(cfg: &RunConfig) -> Result<String> {
    let store = load_store(cfg)?;
    let report = probe_layers(&store, cfg.folds, &cfg.probe.schedule(), cfg.seed)?;
    let tsv = report.to_tsv();
    if let Some(out) = &cfg.out {
        write_file(out, &tsv)?;
    }
    let best = &report.rows[report.best];
    Ok(format!(
        "{tsv}best layer: index {} (layer id {}), mean wF1 {:.4}\n",
        best.layer_index, best.layer_id, best.mean
    ))
}

fn labeled_split(cfg: &RunConfig, store: &FeatureStore, stage: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let labeled = store.labeled_indices();
    if labeled.is_empty() {
        return Err(Error::Data("the store has no labeled samples".into()));
    }
    Ok(early_stopping_split(&labeled, cfg.es_fraction, derive_seed(cfg.seed, 0, stage)))
}

pub fn train_adapter(cfg: &RunConfig) -> Result<String> {
    let store = load_store(cfg)?;
    let out = cfg.out_path()?;
    let (train, es) = labeled_split(cfg, &store, 0)?;
    let (model, log) = run_adapter_stage(cfg, &store, &train, &es, derive_seed(cfg.seed, 0, 1))?;
    write_file(&out.join("adapter_log.tsv"), &log)?;
    save_checkpoint(&model, out.join(ADAPTER_FILE))?;
    let weights: Vec<String> = model.layer_weights().iter().map(|w| format!("{w:.4}")).collect();
    Ok(format!(
        "wrote {}\nlayer weights: {}\n",
        out.join(ADAPTER_FILE).display(),
        weights.join(" ")
    ))
}

fn load_adapter(out: &Path, store: &FeatureStore) -> Result<AdapterModel> {
    let path = out.join(ADAPTER_FILE);
    if !path.exists() {
        return Err(Error::Argument(format!(
            "no adapter checkpoint at {}; run train-adapter first",
            path.display()
        )));
    }
    let model: AdapterModel = load_checkpoint(path)?;
    model.check_store(store)?;
    Ok(model)
}

pub fn align_vision(cfg: &RunConfig) -> Result<String> {
    let store = load_store(cfg)?;
    let out = cfg.out_path()?;
    let adapter = load_adapter(out, &store)?;
    let (model, log, s) = run_alignment_stage(cfg, &store, &adapter, derive_seed(cfg.seed, 0, 2))?;
    write_file(&out.join("align_log.tsv"), &log)?;
    save_checkpoint(&model, out.join(VISION_FILE))?;
    Ok(format!(
        "wrote {}\nheld-out alignment gap {:.4} -> {:.4}, in-batch recall@1 {:.4}, tau {:.4}\n",
        out.join(VISION_FILE).display(),
        s.gap_before,
        s.gap_after,
        s.recall_at_1,
        model.tau()
    ))
}

pub fn train_fusion(cfg: &RunConfig) -> Result<String> {
    let store = load_store(cfg)?;
    let out = cfg.out_path()?;
    let adapter = load_adapter(out, &store)?;
    let vision = if cfg.uses_alignment()? {
        let path = out.join(VISION_FILE);
        if !path.exists() {
            return Err(Error::Argument(format!(
                "no vision checkpoint at {}; run align-vision first or pass --skip-align",
                path.display()
            )));
        }
        Some(load_checkpoint(path)?)
    } else {
        None
    };
    let (train, es) = labeled_split(cfg, &store, 0)?;
    let train_emb = ModalityEmbeddings::from_store(&store, &train, &adapter, vision.as_ref())?;
    let es_emb = ModalityEmbeddings::from_store(&store, &es, &adapter, vision.as_ref())?;
    let (model, log) = run_fusion_stage(cfg, &train_emb, &es_emb, derive_seed(cfg.seed, 0, 3))?;
    write_file(&out.join("fusion_log.tsv"), &log)?;
    save_checkpoint(&model, out.join(FUSION_FILE))?;
    Ok(format!("wrote {}\n", out.join(FUSION_FILE).display()))
}

/// Cross-validation report; writes per-fold TSV and the fold audit to `--out`
/// when given.
pub fn cv(cfg: &RunConfig) -> Result<String> {
    let store = load_store(cfg)?;
    let result = cross_validate(cfg, &store, None)?;
    if let Some(out) = &cfg.out {
        write_file(&out.join("cv_folds.tsv"), &result.folds_tsv())?;
        write_file(&out.join("fold_audit.tsv"), &result.audit_tsv())?;
        write_file(&out.join("cv_metrics.tsv"), &metrics_tsv(&result.metrics_rows(cfg)))?;
    }
    Ok(format!("{}weighted F1 ({}): {}\n", result.folds_tsv(), cfg.modalities, result.report()))
}

/// Cross-validation with checkpoints per fold, then a final model on all
/// labeled data in `out/final/`.
pub fn pipeline(cfg: &RunConfig) -> Result<String> {
    let store = load_store(cfg)?;
    let out = cfg.out_path()?;
    if cfg.uses_alignment()? && store.indices_of(Split::Unlabeled).is_empty() {
        return Err(Error::Data(
            "the store has no unlabeled split for visual alignment; rerun with --skip-align".into(),
        ));
    }
    let result = cross_validate(cfg, &store, Some(out))?;
    write_file(&out.join("cv_folds.tsv"), &result.folds_tsv())?;
    write_file(&out.join("fold_audit.tsv"), &result.audit_tsv())?;

    let (train, es) = labeled_split(cfg, &store, 0)?;
    let final_run = train_partition(cfg, &store, &train, &es, derive_seed(cfg.seed, 0, 0))?;
    let final_dir = out.join("final");
    final_run.models.save(&final_dir)?;
    final_run.logs.write(&final_dir)?;

    let mut rows = result.metrics_rows(cfg);
    let test = store.indices_of(Split::Test);
    let test_labeled = !test.is_empty() && test.iter().all(|&i| store.sample(i).label.is_some());
    if test_labeled {
        let emb = final_run.models.embed(&store, &test)?;
        let score = emofuse_core::fusion::fusion_weighted_f1(&final_run.models.fusion, &emb)?;
        rows.push(("final_test_wF1".into(), format!("{score:.6}")));
    }
    let metrics = metrics_tsv(&rows);
    write_file(&out.join("metrics.tsv"), &metrics)?;
    Ok(format!(
        "{}weighted F1 ({}): {}\n{metrics}",
        result.folds_tsv(),
        cfg.modalities,
        result.report()
    ))
}

fn model_dir(out: &Path) -> std::path::PathBuf {
    if out.join(FUSION_FILE).exists() {
        out.to_path_buf()
    } else {
        out.join("final")
    }
}

fn check_compat(models: &TrainedModels, store: &FeatureStore) -> Result<()> {
    models.adapter.check_store(store)?;
    if let Some(v) = &models.vision {
        if v.d_v != store.d_v() {
            return Err(Error::Incompatible {
                expected: format!("d_v={} (feature store)", store.d_v()),
                found: format!("d_v={} (VisionMLP)", v.d_v),
            });
        }
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<String> {
    let store = load_store(cfg)?;
    let out = cfg.out_path()?;
    let split: Split = cfg.split.parse()?;
    let idx = store.indices_of(split);
    let (ids, preds) = if cfg.ensemble == "mean-logits" {
        let mut members = Vec::new();
        let mut f = 0;
        while fold_dir(out, f).join(FUSION_FILE).exists() {
            let m = TrainedModels::load(&fold_dir(out, f))?;
            check_compat(&m, &store)?;
            let emb = m.embed(&store, &idx)?;
            members.push((m, emb));
            f += 1;
        }
        if members.is_empty() {
            return Err(Error::Argument(format!(
                "no fold checkpoints under {} for --ensemble mean-logits",
                out.display()
            )));
        }
        let refs: Vec<_> = members.iter().map(|(m, e)| (&m.fusion, e)).collect();
        (members[0].1.ids.clone(), predict_ensemble(&refs)?)
    } else {
        let models = TrainedModels::load(&model_dir(out))?;
        check_compat(&models, &store)?;
        let emb = models.embed(&store, &idx)?;
        let preds = predict(&models.fusion, &emb)?;
        (emb.ids, preds)
    };
    let path = out.join(format!("predictions_{}.tsv", split.name()));
    write_file(&path, &predictions_tsv(&ids, &preds))?;
    let mut msg = format!("wrote {} ({} rows)\n", path.display(), preds.len());
    let labels: Option<Vec<usize>> = idx
        .iter()
        .map(|&i| store.sample(i).label.map(EmotionLabel::ordinal))
        .collect();
    if let Some(labels) = labels.filter(|l| !l.is_empty()) {
        let p: Vec<usize> = preds.iter().map(|p| p.label.ordinal()).collect();
        let _ = writeln!(msg, "weighted F1 on {}: {:.4}", split.name(), weighted_f1(&p, &labels)?);
    }
    Ok(msg)
}
