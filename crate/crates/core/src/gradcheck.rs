//! Central finite-difference checks of analytic input gradients.

use candle_core::{Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::ops;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub worst_rel_error: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this in magnitude are compared absolutely. The
    /// floor is raised to the finite-difference resolution `64·ε·|f| / (h·tol)`
    /// so rounding noise in `f` alone cannot fail a coordinate.
    pub floor: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            samples: 200,
            seed: 0,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backward-pass gradient of the scalar `f` at `x` with central
/// differences on randomly sampled coordinates.
pub fn check_gradient<F>(f: F, x: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let n = x.elem_count();
    if n == 0 {
        return Err(invalid("gradient check needs a non-empty input"));
    }
    let var = Var::from_tensor(&x.detach())?;
    let out = f(var.as_tensor())?;
    let resolution = 64.0 * f64::EPSILON * ops::scalar(&out)?.abs() / (opts.step * opts.tolerance);
    let floor = opts.floor.max(resolution);
    let grads = out.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => ops::flat(g)?,
        None => vec![0.0; n],
    };

    let base = ops::flat(x)?;
    let shape = x.shape().clone();
    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::from_vec(data, shape.clone(), &ops::device())?;
        ops::scalar(&f(&t)?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let coords = sample(&mut rng, n, opts.samples.min(n));
    let mut report = GradCheckReport {
        checked: 0,
        passed: 0,
        worst_rel_error: 0.0,
    };
    for i in coords.iter() {
        let mut plus = base.clone();
        plus[i] += opts.step;
        let mut minus = base.clone();
        minus[i] -= opts.step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * opts.step);
        let err = relative_error(analytic[i], numeric, floor);
        report.checked += 1;
        if err <= opts.tolerance {
            report.passed += 1;
        }
        report.worst_rel_error = report.worst_rel_error.max(err);
    }
    Ok(report)
}
