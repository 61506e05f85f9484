//! Gaussian quadrature rules, composite and adaptive integration, and
//! standard-normal helpers.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }

    /// Nodes and weights of the composite rule with `panels` equal panels on `[a, b]`.
    pub fn composite(&self, a: f64, b: f64, panels: usize) -> (Vec<f64>, Vec<f64>) {
        assert!(panels >= 1, "need at least one panel");
        let h = (b - a) / panels as f64;
        let mut xs = Vec::with_capacity(panels * self.len());
        let mut ws = Vec::with_capacity(panels * self.len());
        for p in 0..panels {
            let lo = a + h * p as f64;
            let mid = lo + 0.5 * h;
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                xs.push(mid + 0.5 * h * x);
                ws.push(0.5 * h * w);
            }
        }
        (xs, ws)
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss–Hermite rule for expectations under the standard normal:
/// `sum_k w_k g(y_k) ≈ E[g(Y)]`, `Y ~ N(0, 1)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "rule needs at least one node");
        // Physicists' rule (weight e^{-x^2}) by Newton iteration on the
        // orthonormal recurrence, then rescaled to the N(0,1) weight.
        let pim4 = PI.powf(-0.25);
        let nf = n as f64;
        let m = n.div_ceil(2);
        let mut xs = vec![0.0; n];
        let mut ws = vec![0.0; n];
        let mut z: f64 = 0.0;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * xs[0],
                3 => 1.91 * z - 0.91 * xs[1],
                _ => 2.0 * z - xs[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..200 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let dz = p1 / pp;
                z -= dz;
                if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            xs[i] = z;
            xs[n - 1 - i] = -z;
            ws[i] = 2.0 / (pp * pp);
            ws[n - 1 - i] = ws[i];
        }
        let sqrt_pi = PI.sqrt();
        let mut nodes: Vec<f64> = xs.iter().map(|x| x * std::f64::consts::SQRT_2).collect();
        let mut weights: Vec<f64> = ws.iter().map(|w| w / sqrt_pi).collect();
        // Ascending order.
        nodes.reverse();
        weights.reverse();
        Self { nodes, weights }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expectation<F: FnMut(f64) -> f64>(&self, mut g: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(y, w)| w * g(*y)).sum()
    }
}

/// Adaptive Gauss–Legendre integration on `[a, b]` with nested interval
/// refinement. Each interval is accepted when its 10-point and 20-point
/// estimates agree to `rel_tol` of the running total (or `abs_tol`).
pub fn adaptive_integrate<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
    max_depth: usize,
) -> Result<f64> {
    let coarse = GaussLegendre::new(10);
    let fine = GaussLegendre::new(20);
    let mut stack = vec![(a, b, 0usize)];
    let mut total = 0.0;
    let scale = fine.integrate(a, b, |x| f(x).abs()).max(f64::MIN_POSITIVE);
    while let Some((lo, hi, depth)) = stack.pop() {
        let c = coarse.integrate(lo, hi, f);
        let r = fine.integrate(lo, hi, f);
        if !r.is_finite() {
            return Err(Error::Numeric("non-finite integrand".into()));
        }
        let local_tol = (rel_tol * scale).max(abs_tol) * (hi - lo) / (b - a);
        if (r - c).abs() <= local_tol {
            total += r;
        } else if depth >= max_depth {
            return Err(Error::Numeric(format!(
                "adaptive quadrature did not converge on [{lo}, {hi}] (change {:e})",
                (r - c).abs()
            )));
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, depth + 1));
            stack.push((mid, hi, depth + 1));
        }
    }
    Ok(total)
}

/// Iterates a tensor product of one-dimensional rules, calling `f(point, weight)`.
pub fn tensor_for_each<F: FnMut(&[f64], f64)>(axes: &[(Vec<f64>, Vec<f64>)], mut f: F) {
    let d = axes.len();
    if d == 0 {
        f(&[], 1.0);
        return;
    }
    if axes.iter().any(|(x, _)| x.is_empty()) {
        return;
    }
    let mut idx = vec![0usize; d];
    let mut point: Vec<f64> = axes.iter().map(|(x, _)| x[0]).collect();
    loop {
        let w: f64 = idx.iter().zip(axes).map(|(&i, (_, ws))| ws[i]).product();
        f(&point, w);
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < axes[k].0.len() {
                point[k] = axes[k].0[idx[k]];
                break;
            }
            idx[k] = 0;
            point[k] = axes[k].0[0];
            k += 1;
            if k == d {
                return;
            }
        }
    }
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(z)` without cancellation.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z * FRAC_1_SQRT_2)
}

/// Inverse Mills ratio `φ(z) / (1 - Φ(z))`, accurate for large `z`.
pub fn inverse_mills(z: f64) -> f64 {
    if z < 6.0 {
        return normal_pdf(z) / normal_sf(z);
    }
    // Continued fraction for the Mills ratio R(z) = (1-Φ)/φ:
    // R = 1/(z + 1/(z + 2/(z + 3/(z + ...)))).
    let mut tail = 0.0;
    for k in (1..=60).rev() {
        tail = k as f64 / (z + tail);
    }
    z + tail
}

/// `log(1 - Φ(z))` for any `z`.
pub fn log_normal_sf(z: f64) -> f64 {
    if z < 6.0 {
        normal_sf(z).ln()
    } else {
        -0.5 * z * z - 0.5 * (2.0 * PI).ln() - inverse_mills(z).ln()
    }
}
