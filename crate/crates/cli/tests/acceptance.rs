//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use emofuse_core::adapter::{
    adapter_forward, adapter_loss, adapter_loss_with_masks, extract_acoustic_batch, mask_features,
    AcousticSet, AdapterConfig, AdapterModel,
};
use emofuse_core::align::{alignment_loss, contrastive_loss, VisionMLP};
use emofuse_core::data_io::{
    format_mean_std_pct, load_checkpoint, read_store, save_checkpoint, weighted_f1, write_store,
    SyntheticConfig,
};
use emofuse_core::fusion::{fusion_loss, predict, FusionConfig, FusionModel, ModalityEmbeddings};
use emofuse_core::numcore::{finite_diff_check, softmax, GradCheckConfig, ParamSet, Tensor2};
use emofuse_core::{EmotionLabel, NUM_CLASSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn emofuse(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_emofuse"))
        .args(args)
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "emofuse {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_tsv_map(path: &Path) -> Result<BTreeMap<String, String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once('\t'))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn metric(map: &BTreeMap<String, String>, key: &str) -> Result<f64, String> {
    map.get(key)
        .ok_or_else(|| format!("metric {key} missing"))?
        .parse()
        .map_err(|e| format!("metric {key}: {e}"))
}

fn is_report_format(r: &str) -> bool {
    let two_dp = |part: &str| {
        part.split_once('.').is_some_and(|(i, f)| {
            !i.is_empty() && i.bytes().all(|b| b.is_ascii_digit()) && f.len() == 2 && f.bytes().all(|b| b.is_ascii_digit())
        })
    };
    r.split_once('±').is_some_and(|(m, sd)| two_dp(m) && two_dp(sd))
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

fn jiggle(params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for p in params.entries_mut() {
        for v in p.value.data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
}

fn labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<Option<EmotionLabel>> {
    (0..n)
        .map(|_| EmotionLabel::from_ordinal(rng.random_range(0..NUM_CLASSES)))
        .collect()
}

fn gradient_oracle() -> Check {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut worst = [0.0f64; 3];
    for seed in 0..10u64 {
        let cfg = GradCheckConfig { seed, ..GradCheckConfig::default() };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ac = AdapterConfig::new(3, 8, 3);
        ac.best_layer = 1;
        let mut model = AdapterModel::new(ac, &mut rng).unwrap();
        jiggle(&mut model.params, &mut rng);
        let batch = AcousticSet {
            ids: (0..4).map(|i| format!("t{i}")).collect(),
            layers: (0..3).map(|_| randn(4, 8, &mut rng)).collect(),
            labels: labels(4, &mut rng),
        };
        let masks: Vec<Vec<usize>> = (0..4).map(|_| mask_features(&[0.0; 8], 0.25, &mut rng).1).collect();
        let target = extract_acoustic_batch(&batch.layers, &model).unwrap();
        let out = adapter_loss_with_masks(&model, &batch, &masks, Some(&target)).unwrap();
        model.params.set_grads(out.grads).unwrap();
        let r = finite_diff_check(
            &model.params,
            |p| {
                let m = AdapterModel { config: model.config.clone(), params: p.clone() };
                adapter_loss_with_masks(&m, &batch, &masks, Some(&target)).unwrap().total
            },
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        worst[0] = worst[0].max(r.max_rel_error);

        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut vision = VisionMLP::new(6, 8, &mut rng).unwrap();
        jiggle(&mut vision.params, &mut rng);
        for v in vision.params.value_mut(3).data_mut() {
            *v = v.abs() + 0.2;
        }
        vision.set_tau(rng.random_range(0.05..0.5));
        let (visual, acoustic) = (randn(5, 6, &mut rng), randn(5, 8, &mut rng));
        let out = alignment_loss(&vision, &visual, &acoustic).unwrap();
        vision.params.set_grads(out.grads).unwrap();
        let r = finite_diff_check(
            &vision.params,
            |p| {
                let m = VisionMLP { d_v: 6, d_a: 8, params: p.clone() };
                alignment_loss(&m, &visual, &acoustic).unwrap().loss
            },
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        worst[1] = worst[1].max(r.max_rel_error);

        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut fusion = FusionModel::new(FusionConfig::new(8, 10, 8, 4), &mut rng).unwrap();
        jiggle(&mut fusion.params, &mut rng);
        let emb = ModalityEmbeddings::new(
            (0..5).map(|i| format!("t{i}")).collect(),
            [randn(5, 8, &mut rng), randn(5, 10, &mut rng), randn(5, 8, &mut rng)],
            vec![[true; 3]; 5],
            labels(5, &mut rng),
        )
        .unwrap();
        let out = fusion_loss(&fusion, &emb).unwrap();
        fusion.params.set_grads(out.grads).unwrap();
        let r = finite_diff_check(
            &fusion.params,
            |p| {
                let m = FusionModel { config: fusion.config.clone(), params: p.clone() };
                fusion_loss(&m, &emb).unwrap().loss
            },
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        worst[2] = worst[2].max(r.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst.iter().all(|&w| w < TOL), || format!("max rel errors {worst:?}"))?;
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "10 seeds, max rel error adapter {:.1e}, contrastive {:.1e}, fusion {:.1e}, {secs:.2}s",
        worst[0], worst[1], worst[2]
    ))
}

fn exact_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut zero = AdapterModel::new(AdapterConfig::new(2, 16, 4), &mut rng).unwrap();
    for p in zero.params.entries_mut() {
        p.value.data_mut().fill(0.0);
    }
    let mut max_alpha_err: f64 = 0.0;
    let mut max_ita_err: f64 = 0.0;
    let mut max_shift_err: f64 = 0.0;
    for trial in 0..200 {
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1e3..1e3)).collect();
        let y = adapter_forward(&x, zero.layer(0)).unwrap();
        ensure(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            "zero adapter changed its input".into()
        })?;

        let model = AdapterModel::new(AdapterConfig::new(2, 8, 2), &mut rng).unwrap();
        let batch = AcousticSet {
            ids: (0..6).map(|i| format!("t{i}")).collect(),
            layers: (0..2).map(|_| randn(6, 8, &mut rng)).collect(),
            labels: labels(6, &mut rng),
        };
        let out = adapter_loss(&model, &batch, &mut rng).unwrap();
        ensure(out.total.to_bits() == (out.ce + out.mlm).to_bits(), || {
            format!("total {} != {} + {}", out.total, out.ce, out.mlm)
        })?;

        let fm = FusionModel::new(FusionConfig::new(5, 7, 5, 6), &mut rng).unwrap();
        let emb = ModalityEmbeddings::new(
            (0..4).map(|i| format!("t{i}")).collect(),
            [randn(4, 5, &mut rng), randn(4, 7, &mut rng), randn(4, 5, &mut rng)],
            vec![[true; 3]; 4],
            labels(4, &mut rng),
        )
        .unwrap();
        for p in predict(&fm, &emb).unwrap() {
            max_alpha_err = max_alpha_err.max((p.alpha.iter().sum::<f64>() - 1.0).abs());
        }

        let j = 2 + trial % 30;
        let tau = rng.random_range(0.01..1.0);
        let uniform = Tensor2::filled(j, j, rng.random_range(-1.0..1.0));
        let l = contrastive_loss(&uniform, tau).unwrap().loss;
        max_ita_err = max_ita_err.max((l - (j as f64).ln()).abs());

        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = rng.random_range(-100.0..100.0);
        let a = softmax(&v).unwrap();
        let b = softmax(&v.iter().map(|x| x + c).collect::<Vec<_>>()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            max_shift_err = max_shift_err.max((x - y).abs());
        }
    }
    ensure(max_alpha_err <= 1e-12, || format!("|sum alpha - 1| = {max_alpha_err:e}"))?;
    ensure(max_ita_err <= 1e-9, || format!("uniform contrastive loss off ln J by {max_ita_err:e}"))?;
    ensure(max_shift_err <= 1e-12, || format!("softmax shift error {max_shift_err:e}"))?;
    Ok(format!(
        "200 trials: identity bitwise, L == L_ce + L_mlm bitwise, |sum alpha - 1| {max_alpha_err:.1e}, \
         |L_ita - ln J| {max_ita_err:.1e}, softmax shift {max_shift_err:.1e}"
    ))
}

fn brute_force_wf1(preds: &[usize], labels: &[usize]) -> f64 {
    let mut cm = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &l) in preds.iter().zip(labels) {
        cm[l][p] += 1;
    }
    let mut total = 0.0;
    for c in 0..NUM_CLASSES {
        let tp = cm[c][c] as f64;
        let support: usize = cm[c].iter().sum();
        let predicted: usize = (0..NUM_CLASSES).map(|r| cm[r][c]).sum();
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        total += support as f64 * f1;
    }
    total / labels.len() as f64
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        let classes = rng.random_range(1..=NUM_CLASSES);
        let l: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
        let got = weighted_f1(&p, &l).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute_force_wf1(&p, &l)).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    let hand = format!("{:.4}", weighted_f1(&[0, 1, 1], &[0, 0, 1]).unwrap());
    ensure(hand == "0.6667", || format!("hand case gave {hand}"))?;
    Ok(format!("1000 random sets, max deviation {worst:.1e}; hand case {hand}"))
}

fn layer_probe(dir: &Path) -> Check {
    let peak = SyntheticConfig::default().peak_layer;
    let start = Instant::now();
    let mut hits = 0;
    let mut argmaxes = Vec::new();
    for seed in 0..10u64 {
        let store = dir.join(format!("probe_{seed}.emof"));
        let seed_s = seed.to_string();
        emofuse(&["gen-data", "--seed", &seed_s, "--out", s(&store)])?;
        let tsv = dir.join(format!("probe_{seed}.tsv"));
        emofuse(&["probe-layers", "--seed", &seed_s, "--store", s(&store), "--out", s(&tsv)])?;
        let text = std::fs::read_to_string(&tsv).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split('\t').collect()).collect();
        let curve: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
        let best = rows.iter().position(|r| r[4] == "*").ok_or("no row marked best")?;
        argmaxes.push(best);
        hits += usize::from(best == peak);
        let inversions = (0..curve.len() - 1)
            .filter(|&i| if i < best { curve[i + 1] < curve[i] } else { curve[i + 1] > curve[i] })
            .count();
        ensure(inversions <= 1, || format!("seed {seed}: curve {curve:?} has {inversions} inversions"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(hits >= 9, || format!("argmax at peak in {hits}/10 seeds: {argmaxes:?}"))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("argmax at layer index {peak} in {hits}/10 seeds, all curves unimodal, {secs:.1}s"))
}

struct PipelineRun {
    out: PathBuf,
    metrics: BTreeMap<String, String>,
    secs: f64,
}

fn run_pipeline(store: &Path, out: &Path) -> Result<PipelineRun, String> {
    let start = Instant::now();
    emofuse(&["pipeline", "--store", s(store), "--out", s(out), "--seed", "0"])?;
    let secs = start.elapsed().as_secs_f64();
    Ok(PipelineRun { out: out.to_path_buf(), metrics: read_tsv_map(&out.join("metrics.tsv"))?, secs })
}

fn unimodal_cv(store: &Path, dir: &Path, m: &str) -> Result<(f64, String), String> {
    let out = dir.join(format!("cv_{m}"));
    emofuse(&["cv", "--store", s(store), "--out", s(&out), "--seed", "0", "--modalities", m])?;
    let map = read_tsv_map(&out.join("cv_metrics.tsv"))?;
    Ok((metric(&map, "cv_wF1_mean")?, map["cv_wF1_report"].clone()))
}

fn fusion_beats_unimodal(run: &PipelineRun, store: &Path, dir: &Path) -> Check {
    let tri = metric(&run.metrics, "cv_wF1_mean")?;
    let mut parts = Vec::new();
    let mut best_uni: f64 = 0.0;
    for m in ["a", "l", "v"] {
        let (score, report) = unimodal_cv(store, dir, m)?;
        ensure(is_report_format(&report), || format!("report {report:?} for {m}"))?;
        best_uni = best_uni.max(score);
        parts.push(format!("{m} {report}"));
    }
    ensure(tri >= best_uni - 0.02, || format!("tri-modal {tri:.4} < best unimodal {best_uni:.4} - 0.02"))?;
    ensure(tri >= 0.90, || format!("tri-modal {tri:.4} < 0.90"))?;
    ensure(run.secs < 300.0, || format!("pipeline took {:.1}s", run.secs))?;
    Ok(format!(
        "alv {} vs {}; pipeline {:.1}s",
        run.metrics["cv_wF1_report"],
        parts.join(", "),
        run.secs
    ))
}

fn alignment_efficacy(run: &PipelineRun) -> Check {
    let text = std::fs::read_to_string(run.out.join("cv_folds.tsv")).map_err(|e| e.to_string())?;
    let mut worst_gain = f64::INFINITY;
    let mut worst_recall = f64::INFINITY;
    for line in text.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())) {
        let f: Vec<f64> = line.split('\t').map(|x| x.parse().unwrap_or(f64::NAN)).collect();
        let (recall, before, after) = (f[5], f[6], f[7]);
        worst_gain = worst_gain.min(after - before);
        worst_recall = worst_recall.min(recall);
    }
    ensure(worst_gain.is_finite(), || "no alignment columns in cv_folds.tsv".into())?;
    ensure(worst_gain > 0.2, || format!("worst fold gap gain {worst_gain:.4}"))?;
    ensure(worst_recall >= 0.8, || format!("worst fold recall@1 {worst_recall:.4}"))?;
    Ok(format!(
        "every fold: gap gain >= {worst_gain:.3}, held-out recall@1 >= {worst_recall:.3} (mean {})",
        run.metrics["align_recall@1_mean"]
    ))
}

fn determinism(first: &PipelineRun, store: &Path, dir: &Path, store_bytes: &[u8]) -> Check {
    let second = run_pipeline(store, &dir.join("pipeline_b"))?;
    let a = std::fs::read(first.out.join("metrics.tsv")).map_err(|e| e.to_string())?;
    let b = std::fs::read(second.out.join("metrics.tsv")).map_err(|e| e.to_string())?;
    ensure(a == b, || "metrics.tsv differs between identical runs".into())?;
    ensure(std::fs::read(store).map_err(|e| e.to_string())? == store_bytes, || {
        "pipeline modified the input store".into()
    })?;

    let loaded = read_store(store).map_err(|e| e.to_string())?;
    let copy = dir.join("copy.emof");
    write_store(&loaded, &copy).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&copy).unwrap() == store_bytes, || "store round trip not bitwise".into())?;

    let fin = first.out.join("final");
    let again = dir.join("ckpt");
    std::fs::create_dir_all(&again).unwrap();
    let adapter: AdapterModel = load_checkpoint(fin.join("adapter.ckpt")).map_err(|e| e.to_string())?;
    save_checkpoint(&adapter, again.join("adapter.ckpt")).map_err(|e| e.to_string())?;
    let vision: VisionMLP = load_checkpoint(fin.join("vision.ckpt")).map_err(|e| e.to_string())?;
    save_checkpoint(&vision, again.join("vision.ckpt")).map_err(|e| e.to_string())?;
    let fusion: FusionModel = load_checkpoint(fin.join("fusion.ckpt")).map_err(|e| e.to_string())?;
    save_checkpoint(&fusion, again.join("fusion.ckpt")).map_err(|e| e.to_string())?;
    for f in ["adapter.ckpt", "vision.ckpt", "fusion.ckpt"] {
        ensure(std::fs::read(fin.join(f)).unwrap() == std::fs::read(again.join(f)).unwrap(), || {
            format!("{f} round trip not bitwise")
        })?;
    }
    Ok("metrics.tsv byte-identical across runs; store and 3 checkpoints round-trip bitwise; input store unchanged".into())
}

fn cv_protocol(run: &PipelineRun) -> Check {
    let audit = std::fs::read_to_string(run.out.join("fold_audit.tsv")).map_err(|e| e.to_string())?;
    let mut seen: BTreeMap<usize, [BTreeSet<String>; 2]> = BTreeMap::new();
    for line in audit.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let entry = seen.entry(f[0].parse().unwrap()).or_default();
        entry[usize::from(f[1] == "val")].insert(f[2].to_string());
    }
    let mut all_val = BTreeSet::new();
    let mut total_val = 0;
    for (fold, [fit, val]) in &seen {
        ensure(fit.is_disjoint(val), || format!("fold {fold} trains on validation ids"))?;
        total_val += val.len();
        all_val.extend(val.iter().cloned());
    }
    ensure(seen.len() == 5, || format!("{} folds in audit", seen.len()))?;
    ensure(all_val.len() == total_val, || "validation folds overlap".into())?;
    let header = std::fs::read_to_string(run.out.join("cv_folds.tsv")).map_err(|e| e.to_string())?;
    ensure(header.starts_with("# k_folds\t5"), || "fold count missing from cv_folds.tsv header".into())?;
    let report = &run.metrics["cv_wF1_report"];
    ensure(is_report_format(report), || format!("report {report:?}"))?;
    ensure(is_report_format(&format_mean_std_pct(&[0.8, 0.9])), || "format helper".into())?;
    Ok(format!("5 disjoint folds covering {total_val} labeled ids; report {report}"))
}

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let dir = dir.path();
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    let mut report = |n: usize, name: &'static str, r: Check| {
        match &r {
            Ok(m) => println!("PASS criterion {n} ({name}): {m}"),
            Err(m) => println!("FAIL criterion {n} ({name}): {m}"),
        }
        results.push((n, name, r));
    };

    report(1, "gradient oracle", gradient_oracle());
    report(2, "exact invariants", exact_invariants());
    report(3, "metric oracle", metric_oracle());
    report(4, "layer probe", layer_probe(dir));

    let store = dir.join("default.emof");
    let pipeline = emofuse(&["gen-data", "--seed", "0", "--out", s(&store)])
        .and_then(|_| run_pipeline(&store, &dir.join("pipeline_a")));
    match pipeline {
        Ok(run) => {
            let bytes = std::fs::read(&store).unwrap();
            report(5, "fusion vs unimodal", fusion_beats_unimodal(&run, &store, dir));
            report(6, "alignment efficacy", alignment_efficacy(&run));
            report(7, "determinism", determinism(&run, &store, dir, &bytes));
            report(8, "cv protocol", cv_protocol(&run));
        }
        Err(e) => {
            for (n, name) in [(5, "fusion vs unimodal"), (6, "alignment efficacy"), (7, "determinism"), (8, "cv protocol")] {
                report(n, name, Err(e.clone()));
            }
        }
    }

    let failed = results.iter().filter(|(_, _, r)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
