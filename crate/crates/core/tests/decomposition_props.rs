use factordiff_core::decomposition::{
    delta_by_refactor, delta_by_taylor, eval_delta, probe_grid, verify_identity, Integrator, PairComponent, Probe,
    ProductDensitySpec, Term, SIGMA_GRID,
};
use factordiff_core::Schedule;
use proptest::prelude::*;

fn smooth_spec(c: [f64; 6]) -> ProductDensitySpec {
    ProductDensitySpec::new(
        "random-smooth",
        2,
        vec![
            PairComponent {
                i: 0,
                j: 1,
                c0: 2.0,
                terms: vec![
                    Term::Cosine {
                        ku: 1.0,
                        kv: c[0],
                        amp: c[1],
                    },
                    Term::Linear { a: c[2], b: 0.1 },
                ],
            },
            PairComponent {
                i: 1,
                j: 1,
                c0: 2.0,
                terms: vec![
                    Term::Cosine {
                        ku: c[3],
                        kv: 0.5,
                        amp: c[4],
                    },
                    Term::Linear { a: c[5], b: 0.0 },
                ],
            },
        ],
    )
    .unwrap()
}

fn coefs() -> impl Strategy<Value = [f64; 6]> {
    [
        -1.0f64..1.0,
        -0.5f64..0.5,
        -0.5f64..0.5,
        -1.0f64..1.0,
        -0.5f64..0.5,
        -0.5f64..0.5,
    ]
}

fn probe(xt: [f64; 2], sigma: f64) -> Probe {
    let s = Schedule::constant(1.0);
    let t = s.time_for_sigma(sigma).unwrap();
    let (m, _) = s.m_sigma(t).unwrap();
    Probe::new(vec![m * xt[0], m * xt[1]], t, &s).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn refactorizations_agree_with_direct_delta(
        c in coefs(),
        u in -1.0f64..1.0,
        v in -1.0f64..1.0,
        k in 0usize..6,
    ) {
        let spec = smooth_spec(c);
        let integ = Integrator::default();
        let p = probe([u, v], SIGMA_GRID[k]);
        for a in [vec![0], vec![1], vec![0, 1]] {
            let d = eval_delta(&spec, &a, &p, &integ).unwrap();
            let r = delta_by_refactor(&spec, &a, &p, &integ).unwrap();
            let t = delta_by_taylor(&spec, &a, &p, &integ).unwrap();
            prop_assert!((r - d).abs() < 1e-10, "refactor {} vs {}", r, d);
            prop_assert!((t.value - d).abs() < 1e-10, "taylor {} vs {}", t.value, d);
        }
    }
}

#[test]
fn identity_holds_on_random_smooth_specs() {
    let s = Schedule::constant(1.0);
    let probes = probe_grid(2, 4, &[0.01, 0.1, 0.3], &s).unwrap();
    for c in [[0.3, 0.4, 0.2, -0.7, 0.3, -0.2], [-0.9, -0.2, 0.5, 0.4, 0.45, 0.1]] {
        let r = verify_identity(&smooth_spec(c), &probes, &Integrator::default(), 24).unwrap();
        assert!(r.max_relative_residual < 1e-3, "{}", r.max_relative_residual);
    }
}

#[test]
fn probes_outside_the_region_are_rejected() {
    let s = Schedule::constant(1.0);
    let t = s.time_for_sigma(0.5).unwrap();
    assert!(Probe::new(vec![0.9, 0.0], t, &s).is_err());
    assert!(Probe::new(vec![0.8, -0.8], t, &s).is_ok());
}
