use factordiff_core::distances::ks_distance;
use factordiff_core::quad::{tensor_for_each, GaussLegendre};
use factordiff_core::rng::stream;
use factordiff_core::{CliqueSet, InteractionDensity, QuadSpec, SmoothComponent};
use proptest::prelude::*;
use rand::Rng;

fn pair_density(seed: u64, beta: f64, c: f64) -> InteractionDensity {
    let cliques = CliqueSet::new(2, 2, vec![vec![0], vec![0, 1]]).unwrap();
    let comps = vec![
        SmoothComponent::generate(1, beta, c, 4, seed).unwrap(),
        SmoothComponent::generate(2, beta, c, 3, seed + 1).unwrap(),
    ];
    InteractionDensity::normalize(cliques, comps, QuadSpec::auto(2)).unwrap()
}

fn line_density(seed: u64) -> InteractionDensity {
    let cliques = CliqueSet::new(1, 1, vec![vec![0]]).unwrap();
    let comps = vec![SmoothComponent::generate(1, 1.0, 2.0, 6, seed).unwrap()];
    InteractionDensity::normalize(cliques, comps, QuadSpec::auto(1)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn normalized_mass_is_one(seed in 0u64..1000, beta in 0.5f64..2.0, c in 0.2f64..1.5) {
        let p = pair_density(seed, beta, c);
        let gl = GaussLegendre::new(16);
        let axis = gl.composite(-1.0, 1.0, 16);
        let mut mass = 0.0;
        tensor_for_each(&[axis.clone(), axis], |x, w| mass += w * p.log_density(x).unwrap().exp());
        prop_assert!((mass - 1.0).abs() < 1e-3, "mass {}", mass);
    }

    #[test]
    fn holder_quotient_respects_certificate(seed in 0u64..1000, beta in 0.3f64..1.0, c in 0.2f64..2.0) {
        let f = SmoothComponent::generate(2, beta, c, 5, seed).unwrap();
        let mut rng = stream(seed, 7);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let u = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let scale: f64 = 10f64.powf(rng.random_range(-4.0..0.0));
            let v = [
                (u[0] + scale * rng.random_range(-1.0..1.0)).clamp(-1.0, 1.0),
                (u[1] + scale * rng.random_range(-1.0..1.0)).clamp(-1.0, 1.0),
            ];
            let dist = ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2)).sqrt();
            if dist > 0.0 {
                worst = worst.max((f.eval(&u) - f.eval(&v)).abs() / dist.powf(beta));
            }
        }
        prop_assert!(worst <= c * 1.01, "quotient {} vs C {}", worst, c);
    }
}

#[test]
fn certified_bounds_hold_on_random_probe() {
    for seed in 0..3 {
        let p = pair_density(seed, 1.0, 1.0);
        let c1 = p.c1();
        let mut rng = stream(seed, 3);
        for _ in 0..100_000 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let v = p.density(&x);
            assert!(v >= 1.0 / c1 && v <= c1, "{v} outside [1/{c1}, {c1}]");
        }
    }
}

#[test]
fn rejection_sampler_matches_quadrature_cdf() {
    let gl = GaussLegendre::new(8);
    for seed in [3, 11] {
        let p = line_density(seed);
        let s = p.sample(100_000, seed).unwrap();
        let mut xs = s.column(0);
        xs.sort_by(f64::total_cmp);
        // cumulative mass at each sorted sample, integrated piecewise
        let mut cdf = Vec::with_capacity(xs.len());
        let mut acc = 0.0;
        let mut prev = -1.0;
        for &x in &xs {
            acc += gl.integrate(prev, x, |u| p.density(&[u]));
            cdf.push(acc);
            prev = x;
        }
        let lookup = |x: f64| {
            let k = xs.partition_point(|v| *v < x);
            cdf[k.min(cdf.len() - 1)]
        };
        let ks = ks_distance(&xs, lookup);
        assert!(ks < 0.01, "KS {ks}");
    }
}
