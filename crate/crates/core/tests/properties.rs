use comuco::embedding_store::{
    decode_feature_block, encode_feature_block, sample_k_shot, EmbeddingMatrix, ManifestRow, Split,
    TaskManifest,
};
use comuco::experts::{argmax, forward};
use comuco::geometry::{
    fisher_rao_distance, fisher_rao_distance_arccos, jeffreys, kl_divergence, laplace_log_density,
    laplace_neg_log_prior, softmax_temp, LogitVector, ProbVector,
};
use comuco::objectives::consensus_loss;
use comuco::{CoMuCoConfig, ExpertParams};
use proptest::prelude::*;

fn logits(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, c)
}

fn simplex_point(c: usize) -> impl Strategy<Value = ProbVector> {
    logits(c).prop_map(|s| softmax_temp(&LogitVector::new(s).unwrap(), 1.0).unwrap())
}

fn simplex_pair() -> impl Strategy<Value = (ProbVector, ProbVector)> {
    (2usize..8).prop_flat_map(|c| (simplex_point(c), simplex_point(c)))
}

fn simplex_triple() -> impl Strategy<Value = (ProbVector, ProbVector, ProbVector)> {
    (2usize..8).prop_flat_map(|c| (simplex_point(c), simplex_point(c), simplex_point(c)))
}

fn matrix() -> impl Strategy<Value = EmbeddingMatrix> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1e3f64..1e3, r * c).prop_map(move |v| {
            // values representable in f32 survive the file format exactly
            let v = v.into_iter().map(|x| x as f32 as f64).collect();
            EmbeddingMatrix::new(r, c, v).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn cmf_round_trip_is_exact(m in matrix()) {
        let mut buf = Vec::new();
        encode_feature_block(&m, &mut buf).unwrap();
        prop_assert_eq!(buf.len(), 12 + 4 * m.rows() * m.cols());
        let (back, used) = decode_feature_block(&buf).unwrap();
        prop_assert_eq!(used, buf.len());
        prop_assert_eq!(back, m);
    }

    #[test]
    fn normalization_is_idempotent(m in matrix()) {
        prop_assume!(m.iter_rows().all(|r| r.iter().any(|&x| x != 0.0)));
        let once = m.l2_normalize().unwrap();
        let twice = once.l2_normalize().unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
        for row in once.iter_rows() {
            let n: f64 = row.iter().map(|x| x * x).sum();
            prop_assert!((n - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative((p, q) in simplex_pair()) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn jeffreys_is_symmetrized_kl((p, q) in simplex_pair()) {
        let dj = jeffreys(&p, &q).unwrap();
        let sum = kl_divergence(&p, &q).unwrap() + kl_divergence(&q, &p).unwrap();
        prop_assert!((dj - sum).abs() <= 1e-12);
        prop_assert!((dj - jeffreys(&q, &p).unwrap()).abs() <= 1e-12 * dj.max(1.0));
    }

    #[test]
    fn fisher_rao_is_a_metric((p, q, r) in simplex_triple()) {
        let pq = fisher_rao_distance(&p, &q).unwrap();
        let qp = fisher_rao_distance(&q, &p).unwrap();
        prop_assert!((pq - qp).abs() <= 1e-15);
        prop_assert!((0.0..=std::f64::consts::PI + 1e-12).contains(&pq));
        prop_assert_eq!(fisher_rao_distance(&p, &p).unwrap(), 0.0);
        let pr = fisher_rao_distance(&p, &r).unwrap();
        let qr = fisher_rao_distance(&q, &r).unwrap();
        prop_assert!(pr <= pq + qr + 1e-9);
    }

    #[test]
    fn fisher_rao_forms_agree_away_from_zero((p, q) in simplex_pair()) {
        let chord = fisher_rao_distance(&p, &q).unwrap();
        prop_assume!(chord > 1e-4);
        let arccos = fisher_rao_distance_arccos(&p, &q).unwrap();
        prop_assert!((chord - arccos).abs() <= 1e-7);
    }

    #[test]
    fn laplace_prior_is_summed_log_density(
        delta in prop::collection::vec(-10.0f64..10.0, 1..16),
        b in 0.01f64..10.0,
    ) {
        let prior = laplace_neg_log_prior(&delta, b).unwrap();
        let summed: f64 = delta.iter().map(|&x| -laplace_log_density(x, b).unwrap()).sum();
        prop_assert!((prior - summed).abs() <= 1e-12 * prior.abs().max(1.0));
    }

    #[test]
    fn consensus_is_symmetric_and_zero_on_diagonal(
        (a, b) in (2usize..8).prop_flat_map(|c| (logits(c), logits(c))),
        tau in 0.01f64..2.0,
    ) {
        let (a, b) = (LogitVector::new(a).unwrap(), LogitVector::new(b).unwrap());
        let ab = consensus_loss(&a, &b, tau).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, consensus_loss(&b, &a, tau).unwrap());
        prop_assert_eq!(consensus_loss(&a, &a, tau).unwrap(), 0.0);
    }

    #[test]
    fn softmax_and_argmax_ignore_a_shift(s in (2usize..8).prop_flat_map(logits), c in -50.0f64..50.0, tau in 0.01f64..2.0) {
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        prop_assert_eq!(argmax(&s), argmax(&shifted));
        let p = softmax_temp(&LogitVector::new(s).unwrap(), tau).unwrap();
        let q = softmax_temp(&LogitVector::new(shifted).unwrap(), tau).unwrap();
        for (x, y) in p.as_slice().iter().zip(q.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn adapter_outputs_stay_on_the_sphere(
        (z, text, seed, noise) in (2usize..8, 2usize..6).prop_flat_map(|(d, c)| (
            prop::collection::vec(-1.0f64..1.0, d),
            prop::collection::vec(-1.0f64..1.0, c * d),
            any::<u64>(),
            prop::collection::vec(-0.5f64..0.5, 2 * d * d + 2 * d + d * d + d),
        )),
    ) {
        let d = z.len();
        prop_assume!(z.iter().any(|&x| x.abs() > 1e-3));
        let z = EmbeddingMatrix::new(1, d, z).unwrap().l2_normalize().unwrap();
        let text = EmbeddingMatrix::new(text.len() / d, d, text).unwrap();
        prop_assume!(text.l2_normalize().is_ok());
        let text = text.l2_normalize().unwrap();
        let mut p = ExpertParams::init(d, 2 * d, seed).unwrap();
        for (k, v) in noise.into_iter().enumerate().take(p.len()) {
            p.set(k, p.get(k) + v);
        }
        let out = forward(z.row(0), &p, &text, &CoMuCoConfig::default());
        prop_assume!(out.is_ok());
        let out = out.unwrap();
        for v in [&out.z_fi, &out.z_fr] {
            let n: f64 = v.iter().map(|x| x * x).sum();
            prop_assert!((n - 1.0).abs() <= 1e-12);
        }
        for s in [&out.s_fi, &out.s_fr, &out.s_zs] {
            prop_assert!(s.as_slice().iter().all(|x| x.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn k_shot_sampling_respects_the_manifest(per_class in prop::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
        let mut rows = Vec::new();
        for (label, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                rows.push(ManifestRow { index: rows.len(), label, split: Split::Train });
            }
            rows.push(ManifestRow { index: rows.len(), label, split: Split::Test });
        }
        let names = (0..per_class.len()).map(|c| format!("c{c}")).collect();
        let m = TaskManifest::new(names, "f.cmf", "t.cmf", rows, false).unwrap();
        let k = *per_class.iter().min().unwrap();
        let task = sample_k_shot(&m, k, seed).unwrap();
        prop_assert_eq!(task.train_rows.len(), k * per_class.len());
        for c in 0..per_class.len() {
            prop_assert_eq!(task.train_rows.iter().filter(|r| r.label == c).count(), k);
        }
        for r in &task.train_rows {
            prop_assert_eq!(m.rows[r.row].split, Split::Train);
            prop_assert_eq!(m.rows[r.row].label, r.label);
        }
        prop_assert_eq!(task.test_rows.len(), per_class.len());
        prop_assert_eq!(sample_k_shot(&m, k, seed).unwrap(), task);
    }
}
