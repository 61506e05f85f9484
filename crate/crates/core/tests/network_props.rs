use factordiff_core::nn::{Encoding, Gradient};
use factordiff_core::rng::stream;
use factordiff_core::{Samples, Schedule, ScoreNetwork};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn loss(net: &ScoreNetwork, xs: &Samples, ts: &[f64], tg: &Samples) -> f64 {
    let mut g = Gradient::zeros_like(net);
    net.backward(xs, ts, tg, &mut g).unwrap()
}

#[test]
fn outputs_never_exceed_truncation() {
    let mut rng = stream(21, 0);
    let mut checked = 0;
    for k in 0..100 {
        let d = rng.random_range(1..4);
        let w = rng.random_range(1..7);
        let l = rng.random_range(1..5);
        let b: f64 = rng.random_range(0.1..5.0);
        let mut net = ScoreNetwork::init(d, w, l, b, Schedule::constant(1.0), k).unwrap();
        // large weights so that truncation is active
        let scale: f64 = rng.random_range(1.0..50.0);
        net.params_mut().iter_mut().for_each(|p| *p *= scale);
        for _ in 0..100 {
            let x: Vec<f64> = (0..d).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let t = 10f64.powf(rng.random_range(-3.0..0.7));
            let rho = b / Schedule::constant(1.0).m_sigma(t).unwrap().1 * ((w * l) as f64).ln().sqrt();
            for v in net.forward(&x, t).unwrap() {
                assert!(v.abs() <= rho + 1e-12, "{v} exceeds {rho}");
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 10_000);
}

#[test]
fn backprop_matches_central_differences_on_random_nets() {
    let mut rng = stream(22, 0);
    let mut nets = 0;
    let mut draw = 0u64;
    while nets < 100 {
        draw += 1;
        let d = rng.random_range(1..4);
        let w = rng.random_range(1..5);
        let l = rng.random_range(1..5);
        let mut net = ScoreNetwork::init(d, w, l, 10.0, Schedule::constant(1.0), draw).unwrap();
        for p in net.params_mut() {
            *p += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        let n = 4;
        let xs = Samples::new(d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let tg = Samples::new(d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..2.0)).collect();
        let margin = (0..n)
            .map(|i| net.kink_margin(xs.row(i), ts[i]).unwrap())
            .fold(f64::INFINITY, f64::min);
        if margin < 1e-3 {
            continue;
        }
        let mut g = Gradient::zeros_like(&net);
        net.backward(&xs, &ts, &tg, &mut g).unwrap();
        let h = 1e-6;
        let mut fd = vec![0.0; net.num_params()];
        for (p, f) in fd.iter_mut().enumerate() {
            let mut a = net.clone();
            a.params_mut()[p] += h;
            let mut b = net.clone();
            b.params_mut()[p] -= h;
            *f = (loss(&a, &xs, &ts, &tg) - loss(&b, &xs, &ts, &tg)) / (2.0 * h);
        }
        let scale = g.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = fd.iter().zip(&g.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-5 * scale.max(1e-3), "net {draw}: error {err}, scale {scale}");
        nets += 1;
    }
}

fn weighted_loss(net: &ScoreNetwork, xs: &Samples, ts: &[f64], tg: &Samples, w: &[f64]) -> f64 {
    let mut g = Gradient::zeros_like(net);
    net.backward_weighted(xs, ts, tg, Some(w), &mut g).unwrap()
}

#[test]
fn weighted_encoded_backprop_matches_central_differences() {
    let mut rng = stream(23, 0);
    let mut nets = 0;
    let mut draw = 0u64;
    let schedule = Schedule::constant(1.0);
    while nets < 50 {
        draw += 1;
        let d = rng.random_range(1..3);
        let w = rng.random_range(1..5);
        let l = rng.random_range(1..4);
        let enc = if draw.is_multiple_of(2) {
            Encoding::LOG_TIME_SCALED
        } else {
            Encoding {
                log_time: true,
                sigma_scaled: false,
            }
        };
        let mut net = ScoreNetwork::init_encoded(d, w, l, 10.0, schedule.clone(), enc, draw).unwrap();
        for p in net.params_mut() {
            *p += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        let n = 4;
        let xs = Samples::new(d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let tg = Samples::new(d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..2.0)).collect();
        let wts: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let margin = (0..n)
            .map(|i| net.kink_margin(xs.row(i), ts[i]).unwrap())
            .fold(f64::INFINITY, f64::min);
        if margin < 1e-3 {
            continue;
        }
        let mut g = Gradient::zeros_like(&net);
        let value = net.backward_weighted(&xs, &ts, &tg, Some(&wts), &mut g).unwrap();
        let direct: f64 = (0..n)
            .map(|i| {
                let out = net.forward(xs.row(i), ts[i]).unwrap();
                wts[i] * out.iter().zip(tg.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / n as f64;
        assert!((value - direct).abs() <= 1e-12 * direct.max(1.0));
        let h = 1e-6;
        let mut fd = vec![0.0; net.num_params()];
        for (p, f) in fd.iter_mut().enumerate() {
            let mut a = net.clone();
            a.params_mut()[p] += h;
            let mut b = net.clone();
            b.params_mut()[p] -= h;
            *f = (weighted_loss(&a, &xs, &ts, &tg, &wts) - weighted_loss(&b, &xs, &ts, &tg, &wts)) / (2.0 * h);
        }
        let scale = g.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = fd.iter().zip(&g.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-5 * scale.max(1e-3), "net {draw}: error {err}, scale {scale}");
        nets += 1;
    }
}

#[test]
fn unit_weights_match_unweighted_backward() {
    let mut rng = stream(24, 0);
    let net = ScoreNetwork::init(2, 6, 3, 5.0, Schedule::constant(1.0), 3).unwrap();
    let n = 16;
    let xs = Samples::new(2, (0..n * 2).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let tg = Samples::new(2, (0..n * 2).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..2.0)).collect();
    let mut a = Gradient::zeros_like(&net);
    let mut b = Gradient::zeros_like(&net);
    let la = net.backward(&xs, &ts, &tg, &mut a).unwrap();
    let lb = net
        .backward_weighted(&xs, &ts, &tg, Some(&vec![1.0; n]), &mut b)
        .unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.data, b.data);
}

#[test]
fn sigma_scaled_output_divides_by_sigma() {
    let s = Schedule::constant(1.0);
    let raw = ScoreNetwork::init_encoded(
        1,
        4,
        2,
        1e6,
        s.clone(),
        Encoding {
            log_time: true,
            sigma_scaled: false,
        },
        5,
    )
    .unwrap();
    let mut scaled = ScoreNetwork::init_encoded(1, 4, 2, 1e6, s.clone(), Encoding::LOG_TIME_SCALED, 5).unwrap();
    scaled.params_mut().copy_from_slice(raw.params());
    for t in [0.01, 0.3, 2.0] {
        let sigma = s.m_sigma(t).unwrap().1;
        let a = raw.forward(&[0.4], t).unwrap()[0];
        let b = scaled.forward(&[0.4], t).unwrap()[0];
        assert!((a / sigma - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bias_free_stack_is_positively_homogeneous(
        seed in 0u64..10_000,
        alpha in 0.01f64..100.0,
        x in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let net = ScoreNetwork::init(2, 5, 3, 10.0, Schedule::constant(1.0), seed).unwrap();
        let a = net.forward_input(&x);
        let scaled: Vec<f64> = x.iter().map(|v| alpha * v).collect();
        let b = net.forward_input(&scaled);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((alpha * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in 0u64..10_000, w in 1usize..6, l in 1usize..4) {
        let net = ScoreNetwork::init(2, w, l, 3.0, Schedule::linear(0.1, 1.0, 5.0), seed).unwrap();
        let meta = factordiff_core::CheckpointMeta::default();
        let text = net.to_checkpoint_json(&meta).unwrap();
        let (back, _) = ScoreNetwork::from_checkpoint_json(&text).unwrap();
        prop_assert_eq!(back.params(), net.params());
        prop_assert_eq!(back.fingerprint(), net.fingerprint());
    }

    #[test]
    fn encoded_checkpoint_round_trip(seed in 0u64..10_000, log_time: bool, sigma_scaled: bool) {
        let enc = Encoding { log_time, sigma_scaled };
        let net = ScoreNetwork::init_encoded(2, 4, 2, 3.0, Schedule::constant(1.0), enc, seed).unwrap();
        let text = net.to_checkpoint_json(&factordiff_core::CheckpointMeta::default()).unwrap();
        let (back, _) = ScoreNetwork::from_checkpoint_json(&text).unwrap();
        prop_assert_eq!(back.encoding(), enc);
        prop_assert_eq!(back.forward(&[0.3, -0.2], 0.7).unwrap(), net.forward(&[0.3, -0.2], 0.7).unwrap());
        prop_assert_eq!(back.fingerprint(), net.fingerprint());
    }
}
