use gif_core::baseline::{ce_grad_decompose, CentroidMatrix};
use gif_core::data::{gen_identities, sample_longtail, Sample};
use gif_core::model::{loss_ar, token_probabilities, train_step, Backbone, GifLossConfig, GifModel, TokenHeads};
use gif_core::nn::Sgd;
use gif_core::sphere::{
    dot, norm, optimize_code_vectors, separation_metrics, uniformity_loss, uniformity_loss_full, uniformity_grad,
    CodeVectorMatrix, UniformityConfig, UnitVector,
};
use gif_core::tokenizer::{assign_codes, build_code_tree, decode, min_token_range, TokenizerConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reflects every row across the hyperplane orthogonal to `n`.
fn householder(h: &CodeVectorMatrix, n: &[f64]) -> CodeVectorMatrix {
    let nn = dot(n, n);
    let rows: Vec<Vec<f64>> = h
        .rows()
        .map(|r| {
            let c = 2.0 * dot(r, n) / nn;
            r.iter().zip(n).map(|(x, y)| x - c * y).collect()
        })
        .collect();
    CodeVectorMatrix::from_rows(&rows).unwrap()
}

fn shape() -> impl Strategy<Value = (usize, usize, u64)> {
    (2usize..24, 2usize..8, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn uniformity_is_rotation_invariant((m, d, seed) in shape(), t in 0.5f64..4.0, n in prop::collection::vec(-1.0f64..1.0, 8)) {
        let n = &n[..d];
        prop_assume!(norm(n) > 0.1);
        let h = CodeVectorMatrix::random(m, d, seed).unwrap();
        let r = householder(&h, n);
        prop_assert!((uniformity_loss_full(&h, t) - uniformity_loss_full(&r, t)).abs() < 1e-10);
        let a = separation_metrics(&h).unwrap();
        let b = separation_metrics(&r).unwrap();
        prop_assert!((a.min_dist - b.min_dist).abs() < 1e-10);
    }

    #[test]
    fn uniformity_loss_is_bounded_above_by_zero((m, d, seed) in shape(), t in 0.1f64..4.0) {
        let h = CodeVectorMatrix::random(m, d, seed).unwrap();
        let rows: Vec<usize> = (0..m).collect();
        let loss = uniformity_loss(&h, t, &rows).unwrap();
        prop_assert!(loss <= 1e-12 && loss >= -4.0 * t - 1e-12);
    }

    #[test]
    fn riemannian_gradient_is_tangent((m, d, seed) in shape()) {
        let h = CodeVectorMatrix::random(m, d, seed).unwrap();
        let rows: Vec<usize> = (0..m).collect();
        for (a, g) in uniformity_grad(&h, 2.0, &rows).unwrap() {
            prop_assert!(dot(h.row(a), &g).abs() < 1e-10);
        }
    }

    #[test]
    fn optimizer_never_worsens_and_stays_on_sphere((m, d, seed) in shape(), epochs in 0usize..40, lr in 0.01f64..2.0) {
        let h = CodeVectorMatrix::random(m, d, seed).unwrap();
        let cfg = UniformityConfig { epochs, lr, batch_rows: m.div_ceil(2), seed, ..Default::default() };
        let out = optimize_code_vectors(&h, &cfg).unwrap();
        prop_assert!(uniformity_loss_full(&out, cfg.t) <= uniformity_loss_full(&h, cfg.t) + 1e-12);
        for r in out.rows() {
            prop_assert!((norm(r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn codes_are_injective_and_decodable((m, d, seed) in (2usize..200, 2usize..6, any::<u64>()), l in 1usize..4, slack in 0usize..3) {
        let v = min_token_range(m, l).max(2) + slack;
        let h = CodeVectorMatrix::random(m, d, seed).unwrap();
        let tree = build_code_tree(&h, &TokenizerConfig { restarts: 1, ..TokenizerConfig::new(l, v) }).unwrap();
        let codes = assign_codes(&tree);
        let mut seen = std::collections::HashSet::new();
        prop_assert_eq!(codes.m(), m);
        for (id, code) in codes.iter() {
            prop_assert_eq!(code.len(), l);
            prop_assert!(code.iter().all(|&t| (t as usize) < v));
            prop_assert!(seen.insert(code.to_vec()));
            prop_assert_eq!(decode(code, &tree).unwrap(), Some(id));
        }
    }

    #[test]
    fn token_distributions_sum_to_one(d in 2usize..8, l in 1usize..4, v in 2usize..8, scale in 0.0f64..64.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = TokenHeads::new(l, v, d, 1, scale, &mut rng).unwrap();
        let z = UnitVector::random(d, &mut rng).unwrap().into_inner();
        for p in token_probabilities(&z, &heads) {
            prop_assert_eq!(p.len(), v);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let h = UnitVector::random(d, &mut rng).unwrap().into_inner();
        let ar = loss_ar(&z, &h);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&ar));
    }

    #[test]
    fn centroid_gradient_splits_into_pull_and_push((m, d, seed) in shape(), n in 1usize..12, scale in 0.0f64..32.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = CentroidMatrix::random(m, d, scale, seed).unwrap();
        let zs: Vec<Vec<f64>> = (0..n).map(|_| UnitVector::random(d, &mut rng).unwrap().into_inner()).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % m).collect();
        let g = ce_grad_decompose(&zs, &labels, &w).unwrap();
        for ((gx, pull), push) in g.grad.iter().zip(&g.pull).zip(&g.push) {
            prop_assert!((-gx - (pull + push)).abs() < 1e-12);
        }
    }

    #[test]
    fn longtail_sampling_is_deterministic(m in 2usize..20, seed in any::<u64>(), head in 2usize..8) {
        let sampler = gen_identities(m, 4, 30.0, seed).unwrap();
        let a = sample_longtail(&sampler, 0.25, head, 1, seed ^ 1).unwrap();
        let b = sample_longtail(&sampler, 0.25, head, 1, seed ^ 1).unwrap();
        prop_assert_eq!(&a.samples, &b.samples);
        prop_assert_eq!(a.counts.iter().sum::<usize>(), a.samples.len());
        prop_assert!(a.counts.iter().all(|&c| c == head || c == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn training_leaves_code_vectors_and_codes_untouched(m in 2usize..12, seed in any::<u64>()) {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = CodeVectorMatrix::random(m, d, seed).unwrap();
        let tree = build_code_tree(&h, &TokenizerConfig::auto(m)).unwrap();
        let codes = assign_codes(&tree);
        let (h0, codes0) = (h.clone(), codes.clone());
        let mut model = GifModel {
            backbone: Backbone::new(&[d, 8, d], &mut rng).unwrap(),
            heads: TokenHeads::new(tree.l(), tree.v(), d, 1, 8.0, &mut rng).unwrap(),
        };
        let sampler = gen_identities(m, d, 50.0, seed).unwrap();
        let batch: Vec<Sample> = sampler.draw_per_identity(2, seed, 0);
        let cfg = GifLossConfig::uniform(tree.l(), 1.0);
        let mut opt = Sgd::new(0.1, 0.9);
        for step in 0..5 {
            train_step(&batch, &mut model, &h, &codes, &cfg, &mut opt, step).unwrap();
        }
        prop_assert_eq!(h, h0);
        prop_assert_eq!(codes, codes0);
        for head in &model.heads.heads {
            for row in head.classifier.chunks(d) {
                prop_assert!((norm(row) - 1.0).abs() < 1e-9);
            }
        }
    }
}
