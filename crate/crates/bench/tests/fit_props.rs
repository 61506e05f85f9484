mod common;

use factordiff_bench::fit::{linear_fit, log_log_fit, median};
use factordiff_bench::study::{fit_metric, target_slope};
use proptest::prelude::*;

// Normal equations solved by Cramer's rule on the 2x2 system.
fn hand_ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let det = n * sxx - sx * sx;
    ((n * sxy - sx * sy) / det, (sxx * sy - sx * sxy) / det)
}

#[test]
fn matches_normal_equations() {
    let x = [1.0, 2.0, 4.0, 7.0, 11.0];
    let y = [3.1, 2.2, 2.9, 0.4, -1.3];
    let f = linear_fit(&x, &y).unwrap();
    let (b, a) = hand_ols(&x, &y);
    assert!((f.slope - b).abs() < 1e-12);
    assert!((f.intercept - a).abs() < 1e-12);
    // standard error by hand: sqrt(rss / (n - 2) / sxx)
    let mx = x.iter().sum::<f64>() / 5.0;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let rss: f64 = x.iter().zip(&y).map(|(u, v)| (v - a - b * u).powi(2)).sum();
    let se = (rss / 3.0 / sxx).sqrt();
    assert!((f.std_err - se).abs() < 1e-12);
    // t quantile for 3 degrees of freedom at 0.975
    assert!(((f.ci_hi - f.slope) / se - 3.182446305284263).abs() < 1e-9);
}

#[test]
fn constant_errors_fit_flat_and_fail() {
    let recs: Vec<_> = [4096, 16384, 65536, 262144]
        .iter()
        .flat_map(|&n| (1..=3).map(move |s| common::record("flat", n, s, 0.2, 0.1)))
        .collect();
    let (f, medians) = fit_metric(&recs, "tv_value", Some(-1.0 / 3.0), Some((-0.55, -0.15))).unwrap();
    assert!(f.fit.slope.abs() < 1e-12);
    assert_eq!(medians, vec![0.2; 4]);
    assert!(!f.medians_decreasing);
    assert!(!f.pass);
}

#[test]
fn exact_power_law_passes_its_band() {
    let recs: Vec<_> = [4096usize, 16384, 65536, 262144]
        .iter()
        .flat_map(|&n| (1..=3).map(move |s| common::record("pow", n, s, 2.0 * (n as f64).powf(-1.0 / 3.0), 0.1)))
        .collect();
    let (f, _) = fit_metric(&recs, "tv_value", Some(-1.0 / 3.0), Some((-0.55, -0.15))).unwrap();
    assert!((f.fit.slope + 1.0 / 3.0).abs() < 1e-12);
    assert!(f.medians_decreasing && f.pass);
}

#[test]
fn target_slopes() {
    assert!((target_slope("tv_value", 1, 1, 1.0).unwrap() + 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(target_slope("w1_value", 1, 1, 1.0), Some(-0.5));
    // d = 2, d* = 1, beta = 1: (1 + 1/2) / 3
    assert!((target_slope("w1_value", 2, 1, 1.0).unwrap() + 0.5).abs() < 1e-15);
    assert!((target_slope("w1_value", 3, 2, 1.0).unwrap() + (1.0 + 2.0 / 3.0) / 4.0).abs() < 1e-15);
    assert_eq!(target_slope("score_l2_s010", 1, 1, 1.0), None);
}

#[test]
fn median_ignores_nan() {
    assert_eq!(median(&[3.0, f64::NAN, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    assert!(median(&[f64::NAN]).is_nan());
}

proptest! {
    #[test]
    fn power_laws_are_recovered(a in -2.0f64..2.0, c in 0.01f64..100.0, k in 3usize..8) {
        let x: Vec<f64> = (0..k).map(|i| 2f64.powi(2 * i as i32 + 4)).collect();
        let y: Vec<f64> = x.iter().map(|v| c * v.powf(a)).collect();
        let f = log_log_fit(&x, &y).unwrap();
        prop_assert!((f.slope - a).abs() < 1e-10);
        prop_assert!((f.intercept - c.ln()).abs() < 1e-8);
        prop_assert!(f.std_err < 1e-8);
    }

    #[test]
    fn fit_is_equivariant_under_affine_maps(
        y in prop::collection::vec(-10.0f64..10.0, 5),
        s in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let x = [0.0, 1.0, 2.5, 3.0, 6.0];
        let f = linear_fit(&x, &y).unwrap();
        let y2: Vec<f64> = y.iter().zip(&x).map(|(v, u)| s * v + shift * u).collect();
        let g = linear_fit(&x, &y2).unwrap();
        prop_assert!((g.slope - (s * f.slope + shift)).abs() < 1e-9);
        prop_assert!((g.std_err - s * f.std_err).abs() < 1e-9 * (1.0 + g.std_err));
    }
}
