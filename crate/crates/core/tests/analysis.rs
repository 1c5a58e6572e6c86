use longer::analysis::{auc, auc_pairwise, count_params, fit_power_law, flops_merged, flops_vanilla, logloss};
use longer::model::ModelConfig;
use longer::rng::substream;
use num_rational::Ratio;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

proptest! {
    #[test]
    fn rank_auc_equals_pairwise(
        pairs in prop::collection::vec((0u8..20, any::<bool>()), 2..200)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| f64::from(*s) / 7.0).collect();
        let labels: Vec<u8> = pairs.iter().map(|(_, l)| u8::from(*l)).collect();
        let both = labels.contains(&0) && labels.contains(&1);
        match (auc(&scores, &labels), auc_pairwise(&scores, &labels)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() <= 1e-12),
            (Err(_), Err(_)) => prop_assert!(!both),
            other => prop_assert!(false, "disagree: {:?}", other),
        }
    }

    #[test]
    fn merged_ratio_identity(l in 1u64..5000, d in 1u64..256, k in 1u64..16) {
        let v = flops_vanilla(l, d).unwrap();
        let m = flops_merged(l, d, k).unwrap();
        let (l, d, k) = (u128::from(l), u128::from(d), u128::from(k));
        let lhs = m / Ratio::from_integer(v);
        let rhs = Ratio::new(6 * d * k * k + l, k * (6 * d + l));
        prop_assert_eq!(lhs, rhs);
    }
}

#[test]
fn auc_edge_cases() {
    assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &[0, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    let ll = logloss(&[0.5, 0.5], &[0, 1]).unwrap();
    assert!((ll - std::f64::consts::LN_2).abs() < 1e-15);
}

/// Noise at 1% of the range. `γ` is kept well away from zero so a 10%
/// relative bound is meaningful; every seed must pass.
#[test]
fn noisy_power_law_recovery() {
    let (alpha, beta, gamma) = (2.0, 0.5, 5.0);
    let xs: Vec<f64> = (1..=64).map(f64::from).collect();
    let clean: Vec<f64> = xs.iter().map(|x| alpha * x.powf(beta) + gamma).collect();
    let range = clean[63] - clean[0];
    let noise = Normal::new(0.0, 0.01 * range).unwrap();
    for seed in 0..12 {
        let mut rng = substream(seed, "fit-noise");
        let ys: Vec<f64> = clean.iter().map(|y| y + noise.sample(&mut rng)).collect();
        let fit = fit_power_law(&xs, &ys).unwrap();
        assert!(fit.r_squared > 0.99, "seed {} r2 {}", seed, fit.r_squared);
        let true_sse: f64 = ys.iter().zip(&clean).map(|(y, c)| (y - c).powi(2)).sum();
        assert!(fit.sse <= true_sse, "seed {}: fit is not the least-squares optimum", seed);
        for (got, want) in [(fit.alpha, alpha), (fit.beta, beta), (fit.gamma, gamma)] {
            assert!((got - want).abs() <= 0.1 * want.abs(), "seed {}: {} vs {}", seed, got, want);
        }
    }
}

#[test]
fn decreasing_curve_is_fit() {
    let xs = [32.0, 64.0, 128.0, 256.0, 512.0];
    let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.7) + 0.2).collect();
    let fit = fit_power_law(&xs, &ys).unwrap();
    assert!((fit.alpha - 3.0).abs() < 1e-6 && (fit.beta + 0.7).abs() < 1e-6 && (fit.gamma - 0.2).abs() < 1e-6);
}

#[test]
fn fit_is_scale_equivariant_in_x() {
    let mut rng = substream(3, "fit-scale");
    for _ in 0..5 {
        let alpha = rng.random_range(0.5..3.0);
        let beta = rng.random_range(-0.9..0.9);
        let gamma = rng.random_range(-1.0..1.0);
        let c = rng.random_range(0.1..10.0);
        let xs: Vec<f64> = (1..=8).map(|i| f64::from(i) * 1.5).collect();
        let ys: Vec<f64> = xs.iter().map(|x| alpha * x.powf(beta) + gamma).collect();
        let scaled: Vec<f64> = xs.iter().map(|x| c * x).collect();
        let a = fit_power_law(&xs, &ys).unwrap();
        let b = fit_power_law(&scaled, &ys).unwrap();
        assert!((b.beta - a.beta).abs() < 1e-6, "beta {} {}", a.beta, b.beta);
        assert!((b.gamma - a.gamma).abs() < 1e-6);
        let expected = a.alpha * c.powf(-a.beta);
        assert!((b.alpha - expected).abs() < 1e-6 * expected.abs().max(1.0));
    }
}

#[test]
fn block_parameter_examples() {
    let vanilla = ModelConfig {
        item_dim: 32,
        merge_factor: 1,
        seq_len: 64,
        queries: 16,
        ..ModelConfig::default()
    };
    assert_eq!(count_params(&vanilla).per_block, 12_704);
    let merged = ModelConfig {
        merge_factor: 4,
        ..vanilla
    };
    assert_eq!(count_params(&merged).per_block, 198_272);
}
