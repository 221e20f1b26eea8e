//! Run configuration: built-in defaults, overridden by a JSON file,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use emofuse_core::data_io::SyntheticConfig;
use emofuse_core::fusion::{MissingPolicy, ModalitySet};
use emofuse_core::train::StageSchedule;
use emofuse_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_samples: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub k: usize,
    pub first_layer_id: u32,
    pub d_a: usize,
    pub d_v: usize,
    pub d_l: usize,
    pub latent_dim: usize,
    pub peak_layer: usize,
    pub snr_falloff: f64,
    pub layer_drift: f64,
    pub rho_xm: f64,
    pub sigma: f64,
    pub class_sep: f64,
    pub jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            n_samples: s.n_samples,
            n_unlabeled: s.n_unlabeled,
            n_test: s.n_test,
            k: s.k,
            first_layer_id: s.first_layer_id,
            d_a: s.d_a,
            d_v: s.d_v,
            d_l: s.d_l,
            latent_dim: s.latent_dim,
            peak_layer: s.peak_layer,
            snr_falloff: s.snr_falloff,
            layer_drift: s.layer_drift,
            rho_xm: s.rho_xm,
            sigma: s.sigma,
            class_sep: s.class_sep,
            jitter: s.jitter,
        }
    }
}

impl DataConfig {
    pub fn to_synthetic(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_samples: self.n_samples,
            n_unlabeled: self.n_unlabeled,
            n_test: self.n_test,
            k: self.k,
            first_layer_id: self.first_layer_id,
            d_a: self.d_a,
            d_v: self.d_v,
            d_l: self.d_l,
            latent_dim: self.latent_dim,
            peak_layer: self.peak_layer,
            snr_falloff: self.snr_falloff,
            layer_drift: self.layer_drift,
            rho_xm: self.rho_xm,
            sigma: self.sigma,
            class_sep: self.class_sep,
            jitter: self.jitter,
            seed,
            ..SyntheticConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// 0 disables early stopping.
    pub patience: usize,
}

impl StageConfig {
    fn new(epochs: usize, batch_size: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            epochs,
            batch_size,
            lr,
            weight_decay,
            patience: 10,
        }
    }

    pub fn schedule(&self) -> StageSchedule {
        let mut s = StageSchedule::new(self.epochs, self.batch_size, self.lr, self.weight_decay);
        s.patience = self.patience;
        s
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::new(50, 16, 1e-4, 0.02)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub bottleneck: usize,
    pub mask_ratio: f64,
    pub best_layer: usize,
    pub stop_grad_target: bool,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.02,
            patience: 10,
            bottleneck: 8,
            mask_ratio: 0.15,
            best_layer: 2,
            stop_grad_target: true,
        }
    }
}

impl AdapterSection {
    pub fn schedule(&self) -> StageSchedule {
        StageConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            patience: self.patience,
        }
        .schedule()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub d_h: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 0.02,
            patience: 10,
            d_h: 256,
        }
    }
}

impl FusionSection {
    pub fn schedule(&self) -> StageSchedule {
        StageConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            patience: self.patience,
        }
        .schedule()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub store: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub folds: usize,
    pub modalities: String,
    pub skip_align: bool,
    /// `restrict` or `zero-impute`.
    pub missing: String,
    /// Share of each training partition held out for early stopping.
    pub es_fraction: f64,
    /// `none` or `mean-logits`.
    pub ensemble: String,
    /// Split scored by `evaluate`.
    pub split: String,
    pub data: DataConfig,
    pub probe: StageConfig,
    pub adapter: AdapterSection,
    pub align: StageConfig,
    pub fusion: FusionSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            store: None,
            out: None,
            seed: 0,
            folds: 5,
            modalities: "alv".into(),
            skip_align: false,
            missing: "restrict".into(),
            es_fraction: 0.2,
            ensemble: "none".into(),
            split: "test".into(),
            data: DataConfig::default(),
            probe: StageConfig {
                patience: 0,
                ..StageConfig::new(30, 32, 1e-2, 0.0)
            },
            adapter: AdapterSection::default(),
            align: StageConfig {
                patience: 0,
                ..StageConfig::new(100, 256, 1e-3, 0.02)
            },
            fusion: FusionSection::default(),
        }
    }
}

/// Flags shared by every subcommand. Unset flags leave the config value.
#[derive(Args, Clone, Debug, Default)]
pub struct Flags {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Feature store file.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Output file (gen-data, probe-layers) or run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Modality subset, e.g. `alv`, `a,l` or `v`.
    #[arg(long, global = true)]
    pub modalities: Option<String>,
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    /// Feed raw visual features to the fusion stage instead of aligned ones.
    #[arg(long, global = true)]
    pub skip_align: bool,
    /// `restrict` or `zero-impute`.
    #[arg(long, global = true)]
    pub missing: Option<String>,
    #[arg(long, global = true)]
    pub es_fraction: Option<f64>,
    /// `none` or `mean-logits` (average over fold checkpoints).
    #[arg(long, global = true)]
    pub ensemble: Option<String>,
    /// Split to evaluate: labeled, unlabeled or test.
    #[arg(long, global = true)]
    pub split: Option<String>,

    #[arg(long, global = true)]
    pub n_samples: Option<usize>,
    #[arg(long, global = true)]
    pub n_unlabeled: Option<usize>,
    #[arg(long, global = true)]
    pub n_test: Option<usize>,
    /// Number of acoustic layers in the stack.
    #[arg(long = "layers", global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub d_a: Option<usize>,
    #[arg(long, global = true)]
    pub d_v: Option<usize>,
    #[arg(long, global = true)]
    pub d_l: Option<usize>,
    #[arg(long, global = true)]
    pub peak_layer: Option<usize>,
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    #[arg(long, global = true)]
    pub rho_xm: Option<f64>,
    #[arg(long, global = true)]
    pub jitter: Option<f64>,

    #[arg(long, global = true)]
    pub probe_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub probe_lr: Option<f64>,
    #[arg(long, global = true)]
    pub adapter_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub adapter_batch: Option<usize>,
    #[arg(long, global = true)]
    pub adapter_lr: Option<f64>,
    #[arg(long, global = true)]
    pub bottleneck: Option<usize>,
    #[arg(long, global = true)]
    pub mask_ratio: Option<f64>,
    #[arg(long, global = true)]
    pub best_layer: Option<usize>,
    #[arg(long, global = true)]
    pub align_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub align_batch: Option<usize>,
    #[arg(long, global = true)]
    pub align_lr: Option<f64>,
    #[arg(long, global = true)]
    pub fusion_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub fusion_batch: Option<usize>,
    #[arg(long, global = true)]
    pub fusion_lr: Option<f64>,
    #[arg(long, global = true)]
    pub d_h: Option<usize>,
    /// Weight decay for the adapter, alignment and fusion stages.
    #[arg(long, global = true)]
    pub weight_decay: Option<f64>,
    /// Early-stopping patience for the adapter and fusion stages.
    #[arg(long, global = true)]
    pub patience: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl RunConfig {
    pub fn from_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Argument(format!("cannot read config file {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))
    }

    /// Defaults, then the JSON file named by `--config`, then flags.
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let mut cfg = match &flags.config {
            Some(p) => Self::from_json(p)?,
            None => Self::default(),
        };
        cfg.apply(flags.clone());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, f: Flags) {
        if f.store.is_some() {
            self.store = f.store;
        }
        if f.out.is_some() {
            self.out = f.out;
        }
        set(&mut self.seed, f.seed);
        set(&mut self.modalities, f.modalities);
        set(&mut self.folds, f.folds);
        self.skip_align |= f.skip_align;
        set(&mut self.missing, f.missing);
        set(&mut self.es_fraction, f.es_fraction);
        set(&mut self.ensemble, f.ensemble);
        set(&mut self.split, f.split);

        let d = &mut self.data;
        set(&mut d.n_samples, f.n_samples);
        set(&mut d.n_unlabeled, f.n_unlabeled);
        set(&mut d.n_test, f.n_test);
        set(&mut d.k, f.k);
        set(&mut d.d_a, f.d_a);
        set(&mut d.d_v, f.d_v);
        set(&mut d.d_l, f.d_l);
        set(&mut d.peak_layer, f.peak_layer);
        set(&mut d.sigma, f.sigma);
        set(&mut d.rho_xm, f.rho_xm);
        set(&mut d.jitter, f.jitter);

        set(&mut self.probe.epochs, f.probe_epochs);
        set(&mut self.probe.lr, f.probe_lr);
        let a = &mut self.adapter;
        set(&mut a.epochs, f.adapter_epochs);
        set(&mut a.batch_size, f.adapter_batch);
        set(&mut a.lr, f.adapter_lr);
        set(&mut a.bottleneck, f.bottleneck);
        set(&mut a.mask_ratio, f.mask_ratio);
        set(&mut a.best_layer, f.best_layer);
        set(&mut self.align.epochs, f.align_epochs);
        set(&mut self.align.batch_size, f.align_batch);
        set(&mut self.align.lr, f.align_lr);
        let fu = &mut self.fusion;
        set(&mut fu.epochs, f.fusion_epochs);
        set(&mut fu.batch_size, f.fusion_batch);
        set(&mut fu.lr, f.fusion_lr);
        set(&mut fu.d_h, f.d_h);
        if let Some(wd) = f.weight_decay {
            self.adapter.weight_decay = wd;
            self.align.weight_decay = wd;
            self.fusion.weight_decay = wd;
        }
        if let Some(p) = f.patience {
            self.adapter.patience = p;
            self.fusion.patience = p;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.modality_set()?;
        self.missing_policy()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if !(0.0..0.5).contains(&self.es_fraction) {
            return Err(Error::Config(format!(
                "es_fraction must lie in [0, 0.5), got {}",
                self.es_fraction
            )));
        }
        if !matches!(self.ensemble.as_str(), "none" | "mean-logits") {
            return Err(Error::Config(format!(
                "ensemble must be none or mean-logits, got {:?}",
                self.ensemble
            )));
        }
        self.split.parse::<emofuse_core::data_io::Split>()?;
        Ok(())
    }

    pub fn modality_set(&self) -> Result<ModalitySet> {
        self.modalities.parse()
    }

    pub fn missing_policy(&self) -> Result<MissingPolicy> {
        self.missing.parse()
    }

    pub fn store_path(&self) -> Result<&Path> {
        let p = self
            .store
            .as_deref()
            .ok_or_else(|| Error::Argument("--store is required".into()))?;
        if !p.exists() {
            return Err(Error::Argument(format!("store file {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn out_path(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Argument("--out is required".into()))
    }

    /// True when the fusion stage consumes aligned visual features.
    pub fn uses_alignment(&self) -> Result<bool> {
        Ok(self.modality_set()?.contains(emofuse_core::fusion::Modality::Visual) && !self.skip_align)
    }
}
