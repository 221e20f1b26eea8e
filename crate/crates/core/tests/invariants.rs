use emofuse_core::adapter::{
    adapter_forward, adapter_loss, layer_fuse, AcousticSet, AdapterConfig, AdapterModel,
};
use emofuse_core::align::{contrastive_loss, cosine_similarity_matrix};
use emofuse_core::fusion::{fusion_logits, fusion_loss, predict, FusionConfig, FusionModel, ModalityEmbeddings};
use emofuse_core::numcore::{softmax, Tensor2};
use emofuse_core::{EmotionLabel, NUM_CLASSES};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor2 {
    let data = (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

fn labeled_set(k: usize, d: usize, n: usize, rng: &mut ChaCha8Rng) -> AcousticSet {
    AcousticSet {
        ids: (0..n).map(|i| format!("t{i}")).collect(),
        layers: (0..k).map(|_| randn(n, d, 1.0, rng)).collect(),
        labels: (0..n)
            .map(|_| EmotionLabel::from_ordinal(rng.random_range(0..NUM_CLASSES)))
            .collect(),
    }
}

fn embeddings(dims: [usize; 3], n: usize, rng: &mut ChaCha8Rng) -> ModalityEmbeddings {
    ModalityEmbeddings::new(
        (0..n).map(|i| format!("t{i}")).collect(),
        dims.map(|d| randn(n, d, 1.0, rng)),
        vec![[true; 3]; n],
        (0..n)
            .map(|_| EmotionLabel::from_ordinal(rng.random_range(0..NUM_CLASSES)))
            .collect(),
    )
    .unwrap()
}

#[test]
fn zero_adapter_is_bitwise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = AdapterModel::new(AdapterConfig::new(2, 16, 4), &mut rng).unwrap();
    for p in model.params.entries_mut() {
        p.value.data_mut().fill(0.0);
    }
    for _ in 0..50 {
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1e3..1e3)).collect();
        let y = adapter_forward(&x, model.layer(0)).unwrap();
        assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn random_init_losses_average_log_six() {
    let n_inits = 120;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut adapter_ce, mut fusion_ce) = (0.0, 0.0);
    for _ in 0..n_inits {
        let model = AdapterModel::new(AdapterConfig::new(3, 32, 4), &mut rng).unwrap();
        let batch = labeled_set(3, 32, 16, &mut rng);
        adapter_ce += adapter_loss(&model, &batch, &mut rng).unwrap().ce;

        let fm = FusionModel::new(FusionConfig::new(32, 48, 32, 64), &mut rng).unwrap();
        fusion_ce += fusion_loss(&fm, &embeddings([32, 48, 32], 16, &mut rng)).unwrap().loss;
    }
    let ln6 = (NUM_CLASSES as f64).ln();
    let (a, f) = (adapter_ce / n_inits as f64, fusion_ce / n_inits as f64);
    assert!((a - ln6).abs() < 0.15, "adapter CE {a}");
    assert!((f - ln6).abs() < 0.15, "fusion CE {f}");
}

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adapter_residual_is_nonnegative(seed in 0u64..1000, x in vec_strategy(12)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = AdapterModel::new(AdapterConfig::new(1, 12, 3), &mut rng).unwrap();
        let y = adapter_forward(&x, model.layer(0)).unwrap();
        for (a, b) in x.iter().zip(&y) {
            prop_assert!(b - a >= 0.0);
        }
    }

    #[test]
    fn layer_fuse_is_linear_in_weights(
        f in prop::collection::vec(vec_strategy(5), 3),
        w1 in vec_strategy(3),
        w2 in vec_strategy(3),
        c in -3.0f64..3.0,
    ) {
        let combo: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + c * b).collect();
        let lhs = layer_fuse(&f, &combo).unwrap();
        let r1 = layer_fuse(&f, &w1).unwrap();
        let r2 = layer_fuse(&f, &w2).unwrap();
        for i in 0..5 {
            prop_assert!((lhs[i] - (r1[i] + c * r2[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn adapter_total_is_sum_of_parts(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = AdapterModel::new(AdapterConfig::new(2, 8, 2), &mut rng).unwrap();
        let out = adapter_loss(&model, &labeled_set(2, 8, 6, &mut rng), &mut rng).unwrap();
        prop_assert_eq!(out.total.to_bits(), (out.ce + out.mlm).to_bits());
    }

    #[test]
    fn uniform_similarity_gives_log_j(j in 2usize..40, s in -1.0f64..1.0, tau in 0.01f64..1.0) {
        let l = contrastive_loss(&Tensor2::filled(j, j, s), tau).unwrap().loss;
        prop_assert!((l - (j as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn contrastive_loss_is_symmetric(seed in 0u64..1000, j in 2usize..8, tau in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = randn(j, j, 1.0, &mut rng);
        let a = contrastive_loss(&s, tau).unwrap().loss;
        let b = contrastive_loss(&s.transpose(), tau).unwrap().loss;
        prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn cosine_is_invariant_to_row_scaling(seed in 0u64..1000, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = randn(4, 6, 1.0, &mut rng);
        let a = randn(4, 6, 1.0, &mut rng);
        let s1 = cosine_similarity_matrix(&v, &a).unwrap();
        let s2 = cosine_similarity_matrix(&v.scaled(c), &a).unwrap();
        prop_assert!(s1.max_abs_diff(&s2) < 1e-12);
        prop_assert!(s1.data().iter().all(|x| x.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn softmax_shift_invariance(v in vec_strategy(6), c in -100.0f64..100.0) {
        let a = softmax(&v).unwrap();
        let b = softmax(&v.iter().map(|x| x + c).collect::<Vec<_>>()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_weights_form_a_distribution(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = FusionModel::new(FusionConfig::new(5, 7, 5, 6), &mut rng).unwrap();
        for p in predict(&model, &embeddings([5, 7, 5], 8, &mut rng)).unwrap() {
            prop_assert!((p.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.alpha.iter().all(|&a| a > 0.0 && a < 1.0));
            prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_bias_shift_changes_nothing(seed in 0u64..1000, c in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = FusionModel::new(FusionConfig::new(5, 7, 5, 6), &mut rng).unwrap();
        let emb = embeddings([5, 7, 5], 8, &mut rng);
        let mut shifted = model.clone();
        let idx = shifted.params.index_of("attn.b").unwrap();
        shifted.params.value_mut(idx).data_mut()[0] += c;
        prop_assert_eq!(predict(&model, &emb).unwrap(), predict(&shifted, &emb).unwrap());
    }

    #[test]
    fn permuting_modalities_permutes_attention(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = FusionModel::new(FusionConfig::new(4, 4, 4, 5), &mut rng).unwrap();
        let emb = embeddings([4, 4, 4], 6, &mut rng);
        // swap the acoustic and visual branches together with their inputs
        let mut swapped = model.clone();
        for s in ["w1", "b1", "w2", "b2"] {
            let ia = model.params.index_of(&format!("proj.a.{s}")).unwrap();
            let iv = model.params.index_of(&format!("proj.v.{s}")).unwrap();
            *swapped.params.value_mut(ia) = model.params.value(iv).clone();
            *swapped.params.value_mut(iv) = model.params.value(ia).clone();
        }
        let mut emb2 = emb.clone();
        emb2.feats.swap(0, 2);
        let p1 = predict(&model, &emb).unwrap();
        let p2 = predict(&swapped, &emb2).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            prop_assert!((a.alpha[0] - b.alpha[2]).abs() < 1e-12);
            prop_assert!((a.alpha[1] - b.alpha[1]).abs() < 1e-12);
            prop_assert!((a.alpha[2] - b.alpha[0]).abs() < 1e-12);
        }
        let l1 = fusion_logits(&model, &emb).unwrap();
        let l2 = fusion_logits(&swapped, &emb2).unwrap();
        prop_assert!(l1.max_abs_diff(&l2) < 1e-12);
    }

    #[test]
    fn prediction_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = FusionModel::new(FusionConfig::new(3, 3, 3, 4), &mut rng).unwrap();
        let emb = embeddings([3, 3, 3], 5, &mut rng);
        prop_assert_eq!(predict(&model, &emb).unwrap(), predict(&model, &emb).unwrap());
    }
}
