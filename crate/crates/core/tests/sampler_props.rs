use factordiff_core::rng::stream;
use factordiff_core::score_matching::mean_with_se;
use factordiff_core::{
    reverse_sample, DiffusedOracle, FnScore, InteractionDensity, SamplerConfig, Schedule, TimeWindow,
};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn standard_normal_is_preserved_by_its_own_score() {
    // s(x) = −x makes N(0, I) stationary; Euler–Maruyama inflates the
    // variance by at most h/2 for the largest step h.
    let s = Schedule::constant(1.0);
    let score = FnScore::new(1, |x: &[f64], _t: f64, out: &mut [f64]| out[0] = -x[0]);
    let cfg = SamplerConfig::new(TimeWindow::new(1e-3, 2.0).unwrap(), 200, 100_000, 5);
    let out = reverse_sample(&score, &s, &cfg).unwrap();
    let h_max = cfg
        .forward_times()
        .unwrap()
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(0.0, f64::max);
    let xs = out.samples.column(0);
    let m = mean_with_se(&xs);
    assert!(m.mean.abs() < 4.0 * m.std_err + 1e-12, "mean {}", m.mean);
    let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
    let v = mean_with_se(&sq);
    assert!(
        (v.mean - 1.0).abs() < h_max / 2.0 + 4.0 * v.std_err,
        "variance {} (h {h_max})",
        v.mean
    );
}

#[test]
fn oracle_chains_stay_near_the_cube() {
    let s = Schedule::constant(1.0);
    let oracle = DiffusedOracle::new(InteractionDensity::uniform(1).unwrap(), s.clone()).unwrap();
    let cfg = SamplerConfig::new(TimeWindow::new(1e-3, 5.0).unwrap(), 300, 4000, 2);
    let out = reverse_sample(&oracle, &s, &cfg).unwrap();
    assert!(out.outside_fraction() < 0.01);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn same_seed_same_samples(seed in any::<u64>(), chains in 1usize..600) {
        let s = Schedule::constant(1.0);
        let score = FnScore::new(2, |x: &[f64], t: f64, out: &mut [f64]| {
            out[0] = -x[0] / (1.0 + t);
            out[1] = 0.5 - x[1];
        });
        let cfg = SamplerConfig::new(TimeWindow::new(0.01, 3.0).unwrap(), 20, chains, seed);
        let a = reverse_sample(&score, &s, &cfg).unwrap();
        let b = reverse_sample(&score, &s, &cfg).unwrap();
        prop_assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn blocks_do_not_depend_on_chain_count(seed in 0u64..1000, extra in 1usize..300) {
        // the first 256-chain block draws from the same stream regardless of the total
        let s = Schedule::constant(1.0);
        let score = FnScore::new(1, |x: &[f64], _t: f64, out: &mut [f64]| out[0] = -x[0]);
        let small = SamplerConfig::new(TimeWindow::new(0.01, 3.0).unwrap(), 10, 256, seed);
        let mut big = small.clone();
        big.chains = 256 + extra;
        let a = reverse_sample(&score, &s, &small).unwrap();
        let b = reverse_sample(&score, &s, &big).unwrap();
        prop_assert_eq!(a.samples.as_slice(), &b.samples.as_slice()[..256]);
    }
}

#[test]
fn random_streams_differ_between_blocks() {
    let a: f64 = stream(1, 0).random();
    let b: f64 = stream(1, 1).random();
    assert_ne!(a, b);
}
