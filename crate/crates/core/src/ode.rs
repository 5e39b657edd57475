//! Sampling viewed as an ODE solver: the Euler step that cold sampling takes
//! and the measurement of its per-step discretization error.

use crate::dynamics::{oracle_state, OracleSystem};
use crate::error::{invalid, Result};
use crate::nets::oracle::{OracleForecaster, OracleInterpolator};
use crate::nets::{Forecast, Interpolate};
use crate::rng::DyRng;
use crate::sampling::Sampler;
use crate::stats::{fit_line, LinearFit};
use crate::Tensor;

/// `x + (I(x_t, F(x, s), s + ds) - I(x_t, F(x, s), s))`.
///
/// Same operands, same call order and the same floating-point evaluation as
/// one cold-sampling update, so the two agree bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn euler_step<F, I>(
    forecaster: &F,
    interp: &I,
    x_t: &Tensor,
    x: &Tensor,
    s: f64,
    ds: f64,
    cond: Option<&Tensor>,
    rng: &mut DyRng,
) -> Result<Tensor>
where
    F: Forecast + ?Sized,
    I: Interpolate + ?Sized,
{
    let x_h = forecaster.forecast_at(x, s, cond)?;
    let next = interp.interpolate_at(x_t, &x_h, s + ds, rng)?;
    let cur = interp.interpolate_at(x_t, &x_h, s, rng)?;
    let delta = next.sub(&cur)?;
    x.zip_map(&delta, "euler_step", |a, d| d + a)
}

/// Naive counterpart of [`euler_step`]: `I(x_t, F(x, s), s + ds)`.
#[allow(clippy::too_many_arguments)]
pub fn naive_step<F, I>(
    forecaster: &F,
    interp: &I,
    x_t: &Tensor,
    x: &Tensor,
    s: f64,
    ds: f64,
    cond: Option<&Tensor>,
    rng: &mut DyRng,
) -> Result<Tensor>
where
    F: Forecast + ?Sized,
    I: Interpolate + ?Sized,
{
    let x_h = forecaster.forecast_at(x, s, cond)?;
    interp.interpolate_at(x_t, &x_h, s + ds, rng)
}

/// Geometric grid of `points` step sizes from `start` down to `end`.
pub fn geometric_grid(start: f64, end: f64, points: usize) -> Result<Vec<f64>> {
    if points < 2 || !(start > end && end > 0.0) {
        return Err(invalid("geometric grid needs start > end > 0 and at least two points"));
    }
    let ratio = (end / start).powf(1.0 / (points - 1) as f64);
    Ok((0..points)
        .map(|k| if k + 1 == points { end } else { start * ratio.powi(k as i32) })
        .collect())
}

/// Setup of an error-order measurement on an oracle system.
///
/// The forecaster is `flow(x, h - s)·(1 + eps·sin s)` and the interpolator is
/// the backward flow from its `x_h` argument plus a constant `delta`. With
/// `|eps| < 1` both are Lipschitz in `x` with constants bounded by
/// `(1 + |eps|)·sup|flow|` on `[0, h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderConfig {
    pub system: OracleSystem,
    pub x0: Tensor,
    pub horizon: usize,
    pub eps: f64,
    pub delta: f64,
    /// Dynamical time where every step starts from the exact state.
    pub start: f64,
    /// Strictly decreasing step sizes.
    pub grid: Vec<f64>,
}

impl Default for OrderConfig {
    /// Exponential growth `x' = ln 2·x` with `h = 2`, `eps = 0.05`,
    /// `delta = 0.1`, starting at `s = 1`, over 8 steps from `h/4` to `h/512`.
    fn default() -> Self {
        Self {
            system: OracleSystem::LinearScalar { a: std::f64::consts::LN_2 },
            x0: Tensor::vector(vec![1.0]),
            horizon: 2,
            eps: 0.05,
            delta: 0.1,
            start: 1.0,
            grid: geometric_grid(0.5, 2.0 / 512.0, 8).expect("valid grid"),
        }
    }
}

impl OrderConfig {
    fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if self.grid.len() < 3 {
            return Err(invalid("error-order grid needs at least three step sizes"));
        }
        if self.grid.windows(2).any(|w| !(w[0] > w[1])) || self.grid.last().is_some_and(|&d| d <= 0.0) {
            return Err(invalid("error-order grid must be positive and strictly decreasing"));
        }
        let h = self.horizon as f64;
        if !(self.start >= 0.0 && self.start + self.grid[0] <= h) {
            return Err(invalid("steps must stay inside [0, h]"));
        }
        if self.eps.abs() >= 1.0 {
            return Err(invalid("perturbation eps must satisfy |eps| < 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
}

/// Least-squares slope of `log(error)` against `log(ds)`, skipping zero
/// errors. Needs three usable points.
pub fn fit_order(ds: &[f64], errors: &[f64]) -> Result<SlopeFit> {
    let (x, y): (Vec<f64>, Vec<f64>) = ds
        .iter()
        .zip(errors)
        .filter(|(_, &e)| e > 0.0 && e.is_finite())
        .map(|(d, e)| (d.ln(), e.ln()))
        .unzip();
    if x.len() < 3 {
        return Err(invalid(format!("degenerate error fit: {} usable points", x.len())));
    }
    let fit: LinearFit = fit_line(&x, &y)?;
    let (ci_low, ci_high) = fit.slope_ci(0.95);
    Ok(SlopeFit { slope: fit.slope, ci_low, ci_high, points: x.len() })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ErrorCurve {
    pub sampler: Sampler,
    pub errors: Vec<f64>,
    /// `None` when fewer than three errors are nonzero (exact components).
    pub fit: Option<SlopeFit>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ErrorScalingResult {
    pub ds: Vec<f64>,
    pub cold: ErrorCurve,
    pub naive: ErrorCurve,
}

impl ErrorScalingResult {
    pub fn curve(&self, sampler: Sampler) -> &ErrorCurve {
        match sampler {
            Sampler::Cold => &self.cold,
            Sampler::Naive => &self.naive,
        }
    }

    /// CSV with columns `sampler,dt,error,slope,ci-low,ci-high`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sampler,dt,error,slope,ci-low,ci-high")?;
        for curve in [&self.cold, &self.naive] {
            let name = match curve.sampler {
                Sampler::Cold => "cold",
                Sampler::Naive => "naive",
            };
            let (s, lo, hi) = match curve.fit {
                Some(f) => (f.slope.to_string(), f.ci_low.to_string(), f.ci_high.to_string()),
                None => Default::default(),
            };
            for (d, e) in self.ds.iter().zip(&curve.errors) {
                writeln!(w, "{name},{d},{e},{s},{lo},{hi}")?;
            }
        }
        Ok(())
    }
}

/// One-step error `‖x(s + ds) - x̂(s + ds)‖` of both samplers, each step
/// starting from the exact state `x(s)`.
pub fn measure_error_order(cfg: &OrderConfig) -> Result<ErrorScalingResult> {
    cfg.validate()?;
    let forecaster = OracleForecaster { system: cfg.system.clone(), horizon: cfg.horizon, eps: cfg.eps };
    let interp = OracleInterpolator::backward_flow(cfg.system.clone(), cfg.horizon).with_bias(cfg.delta);
    let x_s = oracle_state(&cfg.system, &cfg.x0, cfg.start)?;
    let mut rng = crate::rng::substream(0, "ode");
    let mut cold = Vec::with_capacity(cfg.grid.len());
    let mut naive = Vec::with_capacity(cfg.grid.len());
    for &ds in &cfg.grid {
        let truth = oracle_state(&cfg.system, &cfg.x0, cfg.start + ds)?;
        let c = euler_step(&forecaster, &interp, &cfg.x0, &x_s, cfg.start, ds, None, &mut rng)?;
        let n = naive_step(&forecaster, &interp, &cfg.x0, &x_s, cfg.start, ds, None, &mut rng)?;
        cold.push(c.sub(&truth)?.norm_l2());
        naive.push(n.sub(&truth)?.norm_l2());
    }
    let curve = |sampler, errors: Vec<f64>| {
        let fit = fit_order(&cfg.grid, &errors).ok();
        ErrorCurve { sampler, errors, fit }
    };
    Ok(ErrorScalingResult { ds: cfg.grid.clone(), cold: curve(Sampler::Cold, cold), naive: curve(Sampler::Naive, naive) })
}
