//! Synthetic multimodal data with planted structure.
//!
//! Each sample has a latent vector `class_mean[c] + jitter`, where the class
//! means form a regular simplex in the first six latent coordinates and the
//! per-sample jitter lives in the remaining ones. Every modality is a fixed
//! random isometric embedding of that latent plus isotropic noise:
//!
//! * acoustic layer `i`: `snr[i] * P_a[i] z + sigma * noise`, with the SNR
//!   profile peaked at `peak_layer`;
//! * visual: `rho * P_v z + sigma * noise`;
//! * lexical: `rho * P_l z + sigma * noise`.
//!
//! Because the jitter is shared by all modalities but orthogonal to the class
//! means, it identifies matching audio/video pairs without blurring classes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::store::{FeatureRecord, FeatureStore, Split};
use crate::error::{Error, Result};
use crate::label::{EmotionLabel, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Labeled (train/val) samples.
    pub n_samples: usize,
    pub n_unlabeled: usize,
    /// Held-out samples; written with labels so they can be scored.
    pub n_test: usize,
    pub n_classes: usize,
    pub k: usize,
    pub first_layer_id: u32,
    pub d_a: usize,
    pub d_v: usize,
    pub d_l: usize,
    pub latent_dim: usize,
    pub peak_layer: usize,
    /// Explicit per-layer signal scale; `None` uses `1 - falloff * |i - peak|`.
    pub layer_snr: Option<Vec<f64>>,
    pub snr_falloff: f64,
    /// Relative perturbation between the per-layer acoustic embeddings.
    pub layer_drift: f64,
    pub rho_xm: f64,
    pub sigma: f64,
    /// Distance between any two class means in latent space.
    pub class_sep: f64,
    /// Standard deviation of the class-independent latent coordinates.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 600,
            n_unlabeled: 1200,
            n_test: 200,
            n_classes: NUM_CLASSES,
            k: 6,
            first_layer_id: 16,
            d_a: 64,
            d_v: 48,
            d_l: 96,
            latent_dim: 24,
            peak_layer: 2,
            layer_snr: None,
            snr_falloff: 0.15,
            layer_drift: 0.25,
            rho_xm: 0.8,
            sigma: 0.6,
            class_sep: 2.4,
            jitter: 2.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_classes != NUM_CLASSES {
            return fail(format!(
                "n_classes must be {NUM_CLASSES} (fixed emotion label set), got {}",
                self.n_classes
            ));
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.peak_layer >= self.k {
            return fail(format!("peak_layer {} must be < k = {}", self.peak_layer, self.k));
        }
        for (name, d) in [("d_a", self.d_a), ("d_v", self.d_v), ("d_l", self.d_l)] {
            if d < 2 {
                return fail(format!("{name} must be at least 2, got {d}"));
            }
        }
        let min_dim = self.d_a.min(self.d_v).min(self.d_l);
        if self.latent_dim < NUM_CLASSES || self.latent_dim > min_dim {
            return fail(format!(
                "latent_dim must lie in {NUM_CLASSES}..={min_dim} (smallest modality width), got {}",
                self.latent_dim
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.rho_xm) {
            return fail(format!("rho_xm must lie in [0, 1], got {}", self.rho_xm));
        }
        if let Some(snr) = &self.layer_snr {
            if snr.len() != self.k {
                return fail(format!("layer_snr has {} entries for k = {}", snr.len(), self.k));
            }
            let peak = snr[self.peak_layer];
            if snr.iter().any(|&s| !s.is_finite() || s > peak) {
                return fail("layer_snr must be finite and maximal at peak_layer".into());
            }
        }
        for (name, v) in [
            ("snr_falloff", self.snr_falloff),
            ("layer_drift", self.layer_drift),
            ("class_sep", self.class_sep),
            ("jitter", self.jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn snr_profile(&self) -> Vec<f64> {
        self.layer_snr.clone().unwrap_or_else(|| {
            (0..self.k)
                .map(|i| {
                    let dist = (i as f64 - self.peak_layer as f64).abs();
                    (1.0 - self.snr_falloff * dist).max(0.1)
                })
                .collect()
        })
    }

    pub fn layer_ids(&self) -> Vec<u32> {
        (0..self.k as u32).map(|i| self.first_layer_id + i).collect()
    }
}

/// Column-major `rows x cols` matrix with orthonormal columns.
struct Embedding {
    rows: usize,
    cols: Vec<Vec<f64>>,
}

impl Embedding {
    fn from_columns(rows: usize, mut cols: Vec<Vec<f64>>) -> Self {
        // modified Gram-Schmidt
        for j in 0..cols.len() {
            for i in 0..j {
                let proj: f64 = cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (x, q) in tail[0].iter_mut().zip(&head[i]) {
                    *x -= proj * q;
                }
            }
            let norm: f64 = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm > 1e-8, "degenerate random embedding");
            for x in &mut cols[j] {
                *x /= norm;
            }
        }
        Self { rows, cols }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = (0..cols).map(|_| gaussian_vec(rows, rng)).collect();
        Self::from_columns(rows, c)
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (col, &zj) in self.cols.iter().zip(z) {
            for (o, &c) in out.iter_mut().zip(col) {
                *o += zj * c;
            }
        }
        out
    }
}

fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn observe(signal: Vec<f64>, scale: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    signal
        .into_iter()
        .map(|s| (scale * s + sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect()
}

/// Deterministic store: `n_samples` labeled, then `n_unlabeled`, then
/// `n_test` samples. Classes cycle with the global sample index, so class
/// counts over the whole store differ by at most one.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<FeatureStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dz = cfg.latent_dim;

    let base = Embedding::random(cfg.d_a, dz, &mut rng);
    let acoustic_maps: Vec<Embedding> = (0..cfg.k)
        .map(|_| {
            let cols = base
                .cols
                .iter()
                .map(|c| {
                    let g = gaussian_vec(cfg.d_a, &mut rng);
                    let scale = cfg.layer_drift / (cfg.d_a as f64).sqrt();
                    c.iter().zip(g).map(|(x, e)| x + scale * e).collect()
                })
                .collect();
            Embedding::from_columns(cfg.d_a, cols)
        })
        .collect();
    let visual_map = Embedding::random(cfg.d_v, dz, &mut rng);
    let lexical_map = Embedding::random(cfg.d_l, dz, &mut rng);
    let snr = cfg.snr_profile();

    // regular simplex: e_c = s/sqrt(2) * (onehot_c - 1/C)
    let c = NUM_CLASSES as f64;
    let scale = cfg.class_sep / 2f64.sqrt();
    let class_means: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|cls| {
            (0..dz)
                .map(|j| {
                    if j >= NUM_CLASSES {
                        0.0
                    } else if j == cls {
                        scale * (1.0 - 1.0 / c)
                    } else {
                        -scale / c
                    }
                })
                .collect()
        })
        .collect();

    let mut store = FeatureStore::new(cfg.layer_ids(), cfg.d_a, cfg.d_v, cfg.d_l)?;
    let total = cfg.n_samples + cfg.n_unlabeled + cfg.n_test;
    for i in 0..total {
        let cls = i % NUM_CLASSES;
        let mut z = class_means[cls].clone();
        for zj in z.iter_mut().skip(NUM_CLASSES) {
            *zj = cfg.jitter * rng.sample::<f64, _>(StandardNormal);
        }
        let acoustic = acoustic_maps
            .iter()
            .zip(&snr)
            .map(|(map, &s)| observe(map.apply(&z), s, cfg.sigma, &mut rng))
            .collect();
        let visual = observe(visual_map.apply(&z), cfg.rho_xm, cfg.sigma, &mut rng);
        let lexical = observe(lexical_map.apply(&z), cfg.rho_xm, cfg.sigma, &mut rng);

        let (split, label) = if i < cfg.n_samples {
            (Split::Labeled, EmotionLabel::from_ordinal(cls))
        } else if i < cfg.n_samples + cfg.n_unlabeled {
            (Split::Unlabeled, None)
        } else {
            (Split::Test, EmotionLabel::from_ordinal(cls))
        };
        store.push(FeatureRecord {
            id: format!("s{i:06}"),
            label,
            split,
            acoustic,
            visual,
            lexical,
        })?;
    }
    Ok(store)
}

/// Latent class of a generated sample, including unlabeled ones.
pub fn synthetic_class_of(index: usize) -> EmotionLabel {
    EmotionLabel::from_ordinal(index % NUM_CLASSES).expect("class in range")
}
