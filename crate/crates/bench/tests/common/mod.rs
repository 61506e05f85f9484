use factordiff_bench::report::{RateRecord, CODE_VERSION, SCHEMA_VERSION};

pub fn record(name: &str, n: usize, seed: u64, tv: f64, w1: f64) -> RateRecord {
    RateRecord {
        schema_version: SCHEMA_VERSION,
        code_version: CODE_VERSION.into(),
        spec_hash: "0f0f".into(),
        config_hash: "a1a1".into(),
        name: name.into(),
        model: "network".into(),
        seed,
        d: 1,
        d_star: 1,
        beta: Some(1.0),
        n,
        width: 8,
        depth: 3,
        trunc_b: 10.0,
        t_lo: 1e-6,
        t_hi: 3.0,
        intervals: 1,
        train_steps: 10,
        sampler_steps: 20,
        chains: n,
        tv_value: Some(tv),
        tv_method: "histogram".into(),
        tv_bins: Some(12),
        tv_floor: Some(0.05),
        tv_clipped: Some(tv * 0.9),
        outside_fraction: 0.0,
        marginal_coord: None,
        marginal_tv: None,
        padded_ks: None,
        w1_value: Some(w1),
        w1_method: "exact-1d".into(),
        w1_se: None,
        score_l2_s010: None,
        score_l2_s030: Some(0.25),
        score_l2_s060: None,
        score_l2_s090: None,
        train_loss: Some(1.0),
        val_loss: Some(1.1),
        wall_ms: 7,
    }
}
