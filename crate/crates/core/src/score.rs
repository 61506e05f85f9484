use crate::error::Result;

/// A time-dependent vector field `s(x, t)` on `R^d`.
pub trait ScoreFunction: Sync {
    fn dim(&self) -> usize;

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()>;

    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.score_into(x, t, &mut out)?;
        Ok(out)
    }
}

impl<S: ScoreFunction + ?Sized> ScoreFunction for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        (**self).score_into(x, t, out)
    }
}

impl<S: ScoreFunction + ?Sized + Send> ScoreFunction for Box<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        (**self).score_into(x, t, out)
    }
}

/// The identically zero score.
#[derive(Debug, Clone, Copy)]
pub struct ZeroScore(pub usize);

impl ScoreFunction for ZeroScore {
    fn dim(&self) -> usize {
        self.0
    }

    fn score_into(&self, _x: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

/// Wraps a closure `(x, t, out)`.
pub struct FnScore<F> {
    dim: usize,
    f: F,
}

impl<F> FnScore<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> ScoreFunction for FnScore<F>
where
    F: Fn(&[f64], f64, &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        (self.f)(x, t, out);
        Ok(())
    }
}
