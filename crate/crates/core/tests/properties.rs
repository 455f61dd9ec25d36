//! Randomized invariants. Fixed-count versions of the load-bearing checks
//! live in the acceptance suite; these shrink on failure, which makes a
//! broken invariant much easier to localize.

use mmkd_core::data::{generate, SyntheticSpec};
use mmkd_core::distill::crd_loss;
use mmkd_core::network::{Alignment, Network, NetworkConfig, StudentConfig, TeacherKind};
use mmkd_core::{Graph, Tensor};
use proptest::prelude::*;

fn entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

fn softmax_rows(logits: &[f64], cols: usize, temp: f64) -> Vec<Vec<f64>> {
    let t = Tensor::new(vec![logits.len() / cols, cols], logits.to_vec()).unwrap();
    let mut g = Graph::new();
    let x = g.constant(t).unwrap();
    let y = g.row_softmax(x, temp).unwrap();
    g.value(y).data().chunks(cols).map(|c| c.to_vec()).collect()
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(
        logits in prop::collection::vec(-5.0f64..5.0, 24),
        temp in 0.25f64..4.0,
    ) {
        for row in softmax_rows(&logits, 6, temp) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn temperature_flattens_but_keeps_the_argmax(
        logits in prop::collection::vec(-5.0f64..5.0, 8),
        t1 in 0.25f64..4.0,
        bump in 1.01f64..4.0,
    ) {
        let t2 = t1 * bump;
        let sharp = &softmax_rows(&logits, 8, t1)[0];
        let flat = &softmax_rows(&logits, 8, t2)[0];
        prop_assert!(entropy(flat) >= entropy(sharp) - 1e-9);
        let argmax = |r: &[f64]| {
            r.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
        };
        // Ties can legitimately flip; only compare when the winner is clear.
        let sorted = {
            let mut s = sharp.clone();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            s
        };
        if sorted[0] - sorted[1] > 1e-9 {
            prop_assert_eq!(argmax(sharp), argmax(flat));
        }
    }

    #[test]
    fn renormalized_rows_are_a_distribution(
        raw in prop::collection::vec(-3.0f64..3.0, 20),
    ) {
        let t = Tensor::new(vec![4, 5], raw).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t).unwrap();
        let y = g.row_renorm(x, 1e-8).unwrap();
        for row in g.value(y).data().chunks(5) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn l2_normalize_lands_on_the_unit_sphere(
        raw in prop::collection::vec(-4.0f64..4.0, 12),
    ) {
        let norm_in: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm_in > 1e-6);
        let t = Tensor::new(vec![2, 6], raw).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t).unwrap();
        let y = g.l2_normalize(x).unwrap();
        for row in g.value(y).data().chunks(6) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            // Rows of the input may still be tiny; only sized rows must land.
            if n > 0.5 {
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn crd_loss_prefers_the_positive(
        seed in 0u64..1_000_000,
        step in 0.01f64..0.2,
    ) {
        // Three random unit vectors with deterministic construction.
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let unit = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let emb = unit((0..8).map(|_| next()).collect());
        let pos = unit((0..8).map(|_| next()).collect());
        let neg = unit((0..8).map(|_| next()).collect());
        // Moving straight at the positive can also move toward the negative
        // and raise the loss; the clean statement steps along the positive's
        // component orthogonal to the negative, which fixes s.n while s.t+
        // strictly grows (and symmetrically for the negative direction).
        let toward = |from: &[f64], to: &[f64], fixed: &[f64]| {
            let d: f64 = to.iter().zip(fixed).map(|(a, b)| a * b).sum();
            let perp: Vec<f64> = to.iter().zip(fixed).map(|(a, b)| a - d * b).collect();
            let n = perp.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assume!(n > 1e-6); // to ∥ fixed: no orthogonal direction left
            Ok(from
                .iter()
                .zip(&perp)
                .map(|(f, p)| f + step * p / n)
                .collect::<Vec<f64>>())
        };
        let base = crd_loss(&emb, &pos, &[neg.clone()], 0.1).unwrap();
        let closer = crd_loss(&toward(&emb, &pos, &neg)?, &pos, &[neg.clone()], 0.1).unwrap();
        let farther = crd_loss(&toward(&emb, &neg, &pos)?, &pos, &[neg], 0.1).unwrap();
        prop_assert!(closer < base, "toward positive: {closer} !< {base}");
        prop_assert!(farther > base, "toward negative: {farther} !> {base}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn every_traced_map_is_row_stochastic(
        seed in 0u64..10_000,
        which in 0usize..7,
    ) {
        let mut cfg = NetworkConfig::desk();
        cfg.d_model = 8;
        cfg.n_h = 2;
        cfg.l = 1;
        cfg.head_hidden = 8;
        let net = match which {
            0 => Network::<f32>::teacher(cfg, TeacherKind::Complete, seed).unwrap(),
            1 => Network::<f32>::student(cfg, StudentConfig::C1, Alignment::SDown, seed).unwrap(),
            2 => Network::<f32>::student(cfg, StudentConfig::C2, Alignment::SDown, seed).unwrap(),
            3 => Network::<f32>::student(cfg, StudentConfig::C3, Alignment::SDown, seed).unwrap(),
            4 => Network::<f32>::student(cfg, StudentConfig::C4, Alignment::SDown, seed).unwrap(),
            5 => Network::<f32>::student(cfg, StudentConfig::C5, Alignment::SDown, seed).unwrap(),
            _ => Network::<f32>::student(cfg, StudentConfig::C5, Alignment::TUp, seed).unwrap(),
        };
        let ds = generate(&SyntheticSpec::desk(3, seed ^ 0xABCD)).unwrap();
        let (batch, _) = ds.batch::<f32>(&[0, 1, 2]).unwrap();
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &batch, false).unwrap();
        for (id, taps) in &fwd.stacks {
            let want = net.map_shape(*id).unwrap();
            for tap in taps {
                let t = g.value(tap.map);
                prop_assert_eq!(&t.shape()[1..], &[want.0, want.1], "{}", id);
                for row in t.data().chunks(t.last_dim()) {
                    let sum: f32 = row.iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-5, "{} row sums to {}", id, sum);
                    prop_assert!(row.iter().all(|&p| (0.0..=1.0 + 1e-6).contains(&p)));
                }
            }
        }
    }
}
