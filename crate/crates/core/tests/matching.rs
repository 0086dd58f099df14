use matchflow_core::matching::{
    correlation, correlation_volume, dual_softmax, extract_matches, match_probability, matching_loss, GtMatches,
    TEMPERATURE,
};
use matchflow_core::Error;
use matchflow_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0) * scale)
}

fn prob_of(c: &Tensor<f64>, tau: f64) -> Tensor<f64> {
    let mut g = Tape::new();
    let v = g.constant(c.clone());
    let p = dual_softmax(&mut g, v, tau).unwrap();
    g.value(p).clone()
}

fn loss_of(p: &Tensor<f64>, gt: &GtMatches) -> f64 {
    let mut g = Tape::new();
    let v = g.constant(p.clone());
    let l = matching_loss(&mut g, v, gt).unwrap();
    g.value(l).item()
}

/// Row softmax and column softmax of `c/τ`, computed directly.
fn softmax_terms(c: &Tensor<f64>, tau: f64) -> (Tensor<f64>, Tensor<f64>) {
    let (n, m) = (c.shape()[0], c.shape()[1]);
    let mut row = Tensor::zeros(&[n, m]);
    let mut col = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let z: f64 = (0..m).map(|j| (c.at(&[i, j]) / tau).exp()).sum();
        for j in 0..m {
            row.set(&[i, j], (c.at(&[i, j]) / tau).exp() / z);
        }
    }
    for j in 0..m {
        let z: f64 = (0..n).map(|i| (c.at(&[i, j]) / tau).exp()).sum();
        for i in 0..n {
            col.set(&[i, j], (c.at(&[i, j]) / tau).exp() / z);
        }
    }
    (row, col)
}

#[test]
fn one_hot_features_give_identity_volume() {
    let f = Tensor::from_fn(&[4, 2, 2], |i| if i / 4 == i % 4 { 1.0f64 } else { 0.0 });
    assert_eq!(correlation(&f, &f, false).unwrap(), Tensor::eye(4));
}

#[test]
fn volume_is_bilinear() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f1 = randn(&mut rng, &[3, 2, 4], 1.0);
    let c = correlation(&f1, &f1, false).unwrap();
    let c2 = correlation(&f1, &f1.map(|v| 2.0 * v), false).unwrap();
    assert_eq!(c2, c.map(|v| 2.0 * v));
}

#[test]
fn volume_matches_double_loop_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (f1, f2) = (randn(&mut rng, &[4, 3, 3], 1.0), randn(&mut rng, &[4, 3, 3], 1.0));
    let c = correlation(&f1, &f2, false).unwrap();
    for i in 0..9 {
        for j in 0..9 {
            let mut s = 0.0;
            for ch in 0..4 {
                s += f1.data()[ch * 9 + i] * f2.data()[ch * 9 + j];
            }
            assert_eq!(c.at(&[i, j]), s);
        }
    }
}

#[test]
fn volume_rejects_shape_mismatch() {
    let mut g = Tape::<f64>::new();
    let a = g.constant(Tensor::zeros(&[4, 2, 2]));
    let b = g.constant(Tensor::zeros(&[4, 2, 3]));
    assert!(matches!(correlation_volume(&mut g, a, b, false), Err(Error::Tensor(_))));
}

#[test]
fn identity_anchor_at_default_temperature() {
    assert_eq!(TEMPERATURE, 0.1);
    let p = prob_of(&Tensor::eye(2), TEMPERATURE);
    assert!((p.at(&[0, 0]) - 0.9999092).abs() < 1e-5);
}

#[test]
fn constant_volume_is_uniform() {
    let p = prob_of(&Tensor::full(&[5, 5], 3.7), 0.1);
    assert!(p.data().iter().all(|&v| (v - 1.0 / 25.0).abs() < 1e-12));
}

#[test]
fn perfect_and_inverse_log_losses() {
    let gt = GtMatches(vec![(0, 1), (2, 0)]);
    assert_eq!(loss_of(&Tensor::full(&[3, 3], 1.0), &gt), 0.0);
    let l = loss_of(&Tensor::full(&[3, 3], (-1.0f64).exp()), &gt);
    assert!((l - 1.0).abs() < 1e-12);
}

#[test]
fn loss_matches_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = rng.random_range(2..10usize);
        let p = prob_of(&randn(&mut rng, &[n, n], 0.5), 0.1);
        let keep: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.6)).collect();
        let gt = GtMatches(keep.into_iter().map(|i| (i, rng.random_range(0..n))).collect());
        if gt.is_empty() {
            continue;
        }
        let direct = -gt.0.iter().map(|&(i, j)| p.at(&[i, j]).ln()).sum::<f64>() / gt.len() as f64;
        assert!((loss_of(&p, &gt) - direct).abs() < 1e-10);
    }
}

#[test]
fn zero_probability_is_clamped() {
    let p = Tensor::new(&[1, 2], vec![0.0f64, 1.0]).unwrap();
    let l = loss_of(&p, &GtMatches(vec![(0, 0)]));
    assert!((l - -(1e-12f64).ln()).abs() < 1e-9);
}

#[test]
fn out_of_range_gt_is_contract_error() {
    let mut g = Tape::<f64>::new();
    let p = g.constant(Tensor::full(&[2, 2], 0.25));
    assert!(matches!(matching_loss(&mut g, p, &GtMatches(vec![(0, 2)])), Err(Error::Contract(_))));
}

#[test]
fn identity_yields_every_diagonal_pair() {
    let p: Tensor<f64> = Tensor::eye(4);
    for mutual in [false, true] {
        let m = extract_matches(&p, 0.99, mutual).unwrap();
        assert_eq!(m.iter().map(|m| (m.source, m.target)).collect::<Vec<_>>(), (0..4).map(|i| (i, i)).collect::<Vec<_>>());
    }
}

#[test]
fn threshold_one_is_empty() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = prob_of(&randn(&mut rng, &[4, 4], 1.0), 0.1);
    assert!(extract_matches(&p, 1.0, false).unwrap().is_empty());
    assert!(extract_matches(&p, 1.5, false).is_err());
}

#[test]
fn mutual_keeps_one_pair_for_a_dominant_row() {
    // Row 0 dominates columns 0 and 1; row 1 prefers column 1 but is beaten there.
    let p = Tensor::new(&[3, 3], vec![0.5f64, 0.4, 0.0, 0.1, 0.3, 0.0, 0.0, 0.0, 0.6]).unwrap();
    let m = extract_matches(&p, 0.05, true).unwrap();
    let pairs: Vec<_> = m.iter().map(|m| (m.source, m.target)).collect();
    // Exhaustive scan for pairs that are row and column argmax at once.
    let mut expect = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            let v = p.at(&[i, j]);
            if v > 0.05 && (0..3).all(|k| p.at(&[i, k]) <= v) && (0..3).all(|k| p.at(&[k, j]) <= v) {
                expect.push((i, j));
            }
        }
    }
    assert_eq!(pairs, expect);
    assert_eq!(pairs.iter().filter(|p| p.0 == 0).count(), 1);
    let all = extract_matches(&p, 0.05, false).unwrap();
    assert_eq!(all.iter().filter(|m| m.source == 0).count(), 2);
}

#[test]
fn gt_quantization_keeps_half_cell_targets() {
    // 4 px is exactly half a coarse cell, so every source survives.
    let gt = GtMatches::from_correspondence(4, 6, |x, y| Some((x + 4.0, y)));
    assert_eq!(gt.len(), 4 * 5);
    let none = GtMatches::from_correspondence(4, 6, |_, _| None);
    assert!(none.is_empty());
    let mut seen = std::collections::HashSet::new();
    assert!(gt.0.iter().all(|&(i, _)| seen.insert(i)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transposition_identity(seed in any::<u64>(), h in 1usize..4, w in 1usize..4, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f1, f2) = (randn(&mut rng, &[c, h, w], 2.0), randn(&mut rng, &[c, h, w], 2.0));
        let c12 = correlation(&f1, &f2, false).unwrap();
        let c21 = correlation(&f2, &f1, false).unwrap();
        let p12 = match_probability(&f1, &f2, false, 0.1).unwrap();
        let p21 = match_probability(&f2, &f1, false, 0.1).unwrap();
        let n = h * w;
        for i in 0..n {
            for j in 0..n {
                prop_assert!((c12.at(&[i, j]) - c21.at(&[j, i])).abs() < 1e-12);
                prop_assert!((p12.at(&[i, j]) - p21.at(&[j, i])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn probabilities_are_bounded_products(seed in any::<u64>(), n in 1usize..8, m in 1usize..8, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = randn(&mut rng, &[n, m], 3.0);
        let p = prob_of(&c, tau);
        let (row, col) = softmax_terms(&c, tau);
        for i in 0..n {
            for j in 0..m {
                let v = p.at(&[i, j]);
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!(v <= row.at(&[i, j]).min(col.at(&[i, j])) + 1e-15);
                prop_assert!((v - row.at(&[i, j]) * col.at(&[i, j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn raising_a_gt_score_never_raises_loss(seed in any::<u64>(), n in 2usize..7, bump in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = randn(&mut rng, &[n, n], 1.0);
        // One-to-one ground truth: a random rotation of the indices.
        let shift = rng.random_range(0..n);
        let gt = GtMatches((0..n).filter(|_| rng.random_bool(0.7)).map(|i| (i, (i + shift) % n)).collect());
        prop_assume!(!gt.is_empty());
        let (i, j) = gt.0[rng.random_range(0..gt.len())];
        let mut c2 = c.clone();
        c2.set(&[i, j], c.at(&[i, j]) + bump);
        prop_assert!(loss_of(&prob_of(&c2, 0.1), &gt) <= loss_of(&prob_of(&c, 0.1), &gt) + 1e-12);
    }

    #[test]
    fn colder_temperature_sharpens_strict_maxima(seed in any::<u64>(), n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift = rng.random_range(0..n);
        let mut c = randn(&mut rng, &[n, n], 0.5);
        for i in 0..n {
            c.set(&[i, (i + shift) % n], 1.0 + rng.random_range(0.0..0.5));
        }
        let gt = GtMatches((0..n).map(|i| (i, (i + shift) % n)).collect());
        let losses: Vec<f64> = [1.0, 0.3, 0.1].iter().map(|&t| loss_of(&prob_of(&c, t), &gt)).collect();
        prop_assert!(losses[1] <= losses[0] && losses[2] <= losses[1], "{losses:?}");
    }
}
