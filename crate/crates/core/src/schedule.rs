//! Weighting function `β_t` of the forward Ornstein–Uhlenbeck process
//! `dX_t = -β_t X_t dt + sqrt(2 β_t) dB_t` and the derived mean decay
//! `m_t = exp(-∫₀ᵗ β_s ds)` and noise scale `σ_t = sqrt(1 - m_t²)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::adaptive_integrate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `β_t = beta`.
    Constant { beta: f64 },
    /// `β_t = b0 + b1 t`.
    Linear { b0: f64, b1: f64 },
    /// `β_t = base + Σ amp_k cos(freq_k t)`; integrated numerically.
    CustomSmooth { base: f64, terms: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    #[serde(flatten)]
    pub kind: ScheduleKind,
    /// Certified bound: `1/c2 ≤ β_t ≤ c2` on the horizon of use.
    pub c2: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::constant(1.0)
    }
}

impl Schedule {
    pub fn constant(beta: f64) -> Self {
        let c2 = beta.max(1.0 / beta).max(1.0 + 1e-9);
        Self {
            kind: ScheduleKind::Constant { beta },
            c2,
        }
    }

    /// Linear schedule; `c2` is certified for `t ∈ [0, t_hi]`.
    pub fn linear(b0: f64, b1: f64, t_hi: f64) -> Self {
        let lo = b0.min(b0 + b1 * t_hi);
        let hi = b0.max(b0 + b1 * t_hi);
        let c2 = hi.max(1.0 / lo).max(b1.abs()).max(1.0 + 1e-9);
        Self {
            kind: ScheduleKind::Linear { b0, b1 },
            c2,
        }
    }

    pub fn custom(base: f64, terms: Vec<(f64, f64)>, c2: f64) -> Self {
        Self {
            kind: ScheduleKind::CustomSmooth { base, terms },
            c2,
        }
    }

    /// Short identifier recorded in checkpoints.
    pub fn id(&self) -> String {
        match &self.kind {
            ScheduleKind::Constant { beta } => format!("constant({beta})"),
            ScheduleKind::Linear { b0, b1 } => format!("linear({b0},{b1})"),
            ScheduleKind::CustomSmooth { base, terms } => {
                format!("custom({base};{} terms)", terms.len())
            }
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::Constant { beta } => *beta,
            ScheduleKind::Linear { b0, b1 } => b0 + b1 * t,
            ScheduleKind::CustomSmooth { base, terms } => {
                base + terms.iter().map(|(a, w)| a * (w * t).cos()).sum::<f64>()
            }
        }
    }

    /// `∫₀ᵗ β_s ds`.
    pub fn integral(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("time must be >= 0, got {t}")));
        }
        Ok(match &self.kind {
            ScheduleKind::Constant { beta } => beta * t,
            ScheduleKind::Linear { b0, b1 } => b0 * t + 0.5 * b1 * t * t,
            ScheduleKind::CustomSmooth { .. } => {
                if t == 0.0 {
                    0.0
                } else {
                    adaptive_integrate(&|s| self.beta(s), 0.0, t, 1e-13, 1e-15, 40)?
                }
            }
        })
    }

    /// `(m_t, σ_t)`.
    pub fn m_sigma(&self, t: f64) -> Result<(f64, f64)> {
        let int = self.integral(t)?;
        let m = (-int).exp();
        // σ² = 1 - e^{-2I} evaluated with expm1 so small t keeps full precision.
        let sigma = (-(-2.0 * int).exp_m1()).sqrt();
        Ok((m, sigma))
    }

    /// The time at which `σ_t` equals `sigma` (in `(0, 1)`).
    pub fn time_for_sigma(&self, sigma: f64) -> Result<f64> {
        if !(sigma > 0.0 && sigma < 1.0) {
            return Err(Error::Domain(format!("sigma must lie in (0, 1), got {sigma}")));
        }
        let target = -0.5 * (-sigma * sigma).ln_1p();
        match &self.kind {
            ScheduleKind::Constant { beta } => Ok(target / beta),
            ScheduleKind::Linear { b0, b1 } if *b1 != 0.0 => {
                // b1/2 t² + b0 t - target = 0, stable root.
                let disc = b0 * b0 + 2.0 * b1 * target;
                if disc < 0.0 {
                    return Err(Error::Numeric("schedule never reaches sigma".into()));
                }
                Ok(2.0 * target / (b0 + disc.sqrt()))
            }
            ScheduleKind::Linear { b0, .. } => Ok(target / b0),
            ScheduleKind::CustomSmooth { .. } => {
                let mut hi = 1.0;
                while self.integral(hi)? < target {
                    hi *= 2.0;
                    if hi > 1e6 {
                        return Err(Error::Numeric("schedule never reaches sigma".into()));
                    }
                }
                let mut lo = 0.0;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.integral(mid)? < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }

    /// Draws `m_t x0 + σ_t z`, `z ~ N(0, I)`.
    pub fn forward_perturb<R: Rng + ?Sized>(&self, x0: &[f64], t: f64, rng: &mut R) -> Result<Vec<f64>> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("forward_perturb needs t > 0, got {t}")));
        }
        let (m, s) = self.m_sigma(t)?;
        Ok(x0
            .iter()
            .map(|x| {
                let z: f64 = rng.sample(StandardNormal);
                m * x + s * z
            })
            .collect())
    }

    /// `∇ₓ log p_{t|0}(x | x0) = -(x - m_t x0) / σ_t²`.
    pub fn conditional_score(&self, x: &[f64], x0: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.conditional_score_into(x, x0, t, &mut out)?;
        Ok(out)
    }

    pub fn conditional_score_into(&self, x: &[f64], x0: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        if x.len() != x0.len() || out.len() != x.len() {
            return Err(Error::Shape("conditional_score arguments differ in length".into()));
        }
        if t == 0.0 {
            return Err(Error::Singularity("conditional score is undefined at t = 0".into()));
        }
        let (m, s) = self.m_sigma(t)?;
        let var = s * s;
        for ((o, xi), x0i) in out.iter_mut().zip(x).zip(x0) {
            *o = -(xi - m * x0i) / var;
        }
        Ok(())
    }

    /// Checks `β_t ∈ [1/c2, c2]` on a grid over `[0, t_hi]`; for the custom
    /// kind also bounds the first two derivatives by `c2` numerically.
    pub fn certify(&self, t_hi: f64) -> Result<()> {
        let n = 1000;
        for k in 0..=n {
            let t = t_hi * k as f64 / n as f64;
            let b = self.beta(t);
            if !(b >= 1.0 / self.c2 && b <= self.c2) {
                return Err(Error::Domain(format!(
                    "beta({t}) = {b} violates the bound c2 = {}",
                    self.c2
                )));
            }
            if let ScheduleKind::CustomSmooth { .. } = self.kind {
                let h = 1e-4;
                let tm = (t - h).max(0.0);
                let tp = tm + 2.0 * h;
                let d1 = (self.beta(tp) - self.beta(tm)) / (2.0 * h);
                let d2 = (self.beta(tp) - 2.0 * self.beta(tm + h) + self.beta(tm)) / (h * h);
                if d1.abs() > self.c2 || d2.abs() > self.c2 {
                    return Err(Error::Domain(format!(
                        "derivatives of beta at {t} exceed c2 = {}",
                        self.c2
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Time window `[T̲, T̄]` for score matching and sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub t_lo: f64,
    pub t_hi: f64,
}

impl TimeWindow {
    pub fn new(t_lo: f64, t_hi: f64) -> Result<Self> {
        if !(t_lo > 0.0 && t_hi > t_lo && t_hi.is_finite()) {
            return Err(Error::Domain(format!(
                "time window requires 0 < t_lo < t_hi, got [{t_lo}, {t_hi}]"
            )));
        }
        Ok(Self { t_lo, t_hi })
    }

    pub fn width(&self) -> f64 {
        self.t_hi - self.t_lo
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_lo && t <= self.t_hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn constant_schedule_at_ln2() {
        let s = Schedule::constant(1.0);
        let (m, sig) = s.m_sigma(std::f64::consts::LN_2).unwrap();
        assert!((m - 0.5).abs() < 1e-15);
        assert!((sig - 0.75f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn origin_is_noise_free() {
        for s in [
            Schedule::constant(2.0),
            Schedule::linear(0.5, 0.5, 10.0),
            Schedule::custom(1.0, vec![(0.2, 1.0)], 2.0),
        ] {
            assert_eq!(s.m_sigma(0.0).unwrap(), (1.0, 0.0));
        }
    }

    #[test]
    fn linear_schedule_matches_quadrature_of_beta() {
        let s = Schedule::linear(0.5, 0.5, 10.0);
        let (m, sig) = s.m_sigma(1.0).unwrap();
        // oracle: adaptive quadrature of β over [0, 1]
        let int = adaptive_integrate(&|t| 0.5 + 0.5 * t, 0.0, 1.0, 1e-14, 0.0, 20).unwrap();
        assert!((int - 0.75).abs() < 1e-14);
        assert!((m - (-int).exp()).abs() < 1e-14);
        assert!((m - 0.472_366_552_741_014_7).abs() < 1e-12);
        assert!((sig - 0.881_402_200_956_844_7).abs() < 1e-14);
        assert!((sig - 0.88139).abs() < 2e-5);
    }

    #[test]
    fn custom_schedule_integrates_numerically() {
        let s = Schedule::custom(1.0, vec![(0.3, 2.0)], 2.0);
        let t: f64 = 1.3;
        let exact = t + 0.3 * (2.0 * t).sin() / 2.0;
        assert!((s.integral(t).unwrap() - exact).abs() < 1e-12);
        s.certify(5.0).unwrap();
    }

    #[test]
    fn negative_time_is_rejected() {
        let s = Schedule::default();
        assert!(matches!(s.m_sigma(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn small_t_sigma_has_no_cancellation() {
        let s = Schedule::constant(1.0);
        let (_, sig) = s.m_sigma(1e-14).unwrap();
        let rel = (sig - (2e-14f64).sqrt()).abs() / (2e-14f64).sqrt();
        assert!(rel < 1e-6, "rel error {rel}");
    }

    #[test]
    fn time_for_sigma_inverts_m_sigma() {
        for s in [
            Schedule::constant(1.0),
            Schedule::linear(0.5, 0.5, 20.0),
            Schedule::custom(1.0, vec![(0.3, 2.0)], 2.0),
        ] {
            for target in [1e-3, 0.1, 0.5, 0.9] {
                let t = s.time_for_sigma(target).unwrap();
                let (_, sig) = s.m_sigma(t).unwrap();
                assert!((sig - target).abs() / target < 1e-9, "{} {target} {sig}", s.id());
            }
        }
    }

    #[test]
    fn conditional_score_examples() {
        let s = Schedule::constant(1.0);
        let t = std::f64::consts::LN_2;
        let v = s.conditional_score(&[0.0], &[1.0], t).unwrap();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15);
        let z = s.conditional_score(&[0.5, -0.25], &[1.0, -0.5], t).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(
            s.conditional_score(&[0.0], &[0.0], 0.0),
            Err(Error::Singularity(_))
        ));
    }

    #[test]
    fn conditional_score_matches_finite_difference_of_log_gaussian() {
        let s = Schedule::linear(0.5, 0.5, 10.0);
        let t = 0.4;
        let (m, sig) = s.m_sigma(t).unwrap();
        let x0 = [0.3, -0.7];
        let x = [0.1, 0.2];
        let logp = |x: &[f64]| -> f64 {
            x.iter()
                .zip(&x0)
                .map(|(xi, x0i)| -(xi - m * x0i).powi(2) / (2.0 * sig * sig))
                .sum::<f64>()
        };
        let g = s.conditional_score(&x, &x0, t).unwrap();
        for k in 0..2 {
            let h = 1e-5;
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (logp(&xp) - logp(&xm)) / (2.0 * h);
            assert!((fd - g[k]).abs() / g[k].abs() < 1e-6, "fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn forward_perturb_variance_at_origin() {
        let s = Schedule::constant(1.0);
        let t = 0.3;
        let (_, sig) = s.m_sigma(t).unwrap();
        let mut rng = stream(11, 0);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let v = s.forward_perturb(&[0.0], t, &mut rng).unwrap()[0];
            acc += v * v;
        }
        let var = acc / n as f64;
        // chi-square: sd of the variance estimate is σ²·sqrt(2/n)
        let sd = sig * sig * (2.0 / n as f64).sqrt();
        assert!((var - sig * sig).abs() < 3.0 * sd, "var {var} vs {}", sig * sig);
    }

    #[test]
    fn forward_perturb_tends_to_x0() {
        let s = Schedule::constant(1.0);
        let mut rng = stream(1, 0);
        let x = s.forward_perturb(&[0.4, -0.2], 1e-14, &mut rng).unwrap();
        assert!((x[0] - 0.4).abs() < 1e-5 && (x[1] + 0.2).abs() < 1e-5);
        let a = s.forward_perturb(&[0.4], 0.5, &mut stream(3, 0)).unwrap();
        let b = s.forward_perturb(&[0.4], 0.5, &mut stream(3, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monotone_on_grid() {
        let s = Schedule::linear(0.5, 0.5, 10.0);
        let mut prev = s.m_sigma(0.0).unwrap();
        // beyond t = 5, sigma rounds to 1 in double precision
        for k in 1..=1000 {
            let cur = s.m_sigma(5.0 * k as f64 / 1000.0).unwrap();
            assert!(cur.0 < prev.0 && cur.1 > prev.1);
            assert!((cur.0 * cur.0 + cur.1 * cur.1 - 1.0).abs() < 1e-15);
            prev = cur;
        }
    }

    #[test]
    fn window_validation() {
        assert!(TimeWindow::new(0.0, 1.0).is_err());
        assert!(TimeWindow::new(1.0, 0.5).is_err());
        assert!(TimeWindow::new(1e-3, 2.0).is_ok());
    }
}
