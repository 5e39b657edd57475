//! Time-conditioned interpolator and forecaster networks, plus closed-form
//! oracle implementations of the same interfaces.

mod backbone;
mod meta;
pub(crate) mod models;
pub mod oracle;

pub use backbone::{BackboneConfig, BoundParams, Mlp};
pub use meta::Metadata;
pub use models::{ForecasterModel, InterpolatorModel};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::rng::DyRng;
use crate::Tensor;

/// Sinusoidal features of a scalar time: `[sin(w_j t)] ++ [cos(w_j t)]` with
/// `w_j = 10000^(-j / (dim/2 - 1))`, so frequencies run from 1 down to 1e-4.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(invalid(format!("time embedding dimension must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let freq = |j: usize| {
        if half == 1 {
            1.0
        } else {
            10000f64.powf(-(j as f64) / (half - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|j| (freq(j) * t).sin()));
    out.extend((0..half).map(|j| (freq(j) * t).cos()));
    Ok(out)
}

/// What the forecaster receives besides its main input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    #[default]
    None,
    Clean,
    Noised,
}

impl std::str::FromStr for ConditioningMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "clean" => Ok(Self::Clean),
            "noised" => Ok(Self::Noised),
            other => Err(invalid(format!("unknown conditioning mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Clean => "clean",
            Self::Noised => "noised",
        })
    }
}

/// `c(x_t, n)`: absent, `x_t`, or `(n/(N-1)) x_t + (1 - n/(N-1)) eps` with
/// standard-normal `eps`. With `N = 1` the mixing weight is 1.
pub fn make_conditioning(
    mode: ConditioningMode,
    x_t: &Tensor,
    n: usize,
    total: usize,
    rng: &mut DyRng,
) -> Result<Option<Tensor>> {
    if total == 0 || n >= total {
        return Err(invalid(format!("diffusion step {n} outside 0..{total}")));
    }
    match mode {
        ConditioningMode::None => Ok(None),
        ConditioningMode::Clean => Ok(Some(x_t.clone())),
        ConditioningMode::Noised => {
            let alpha = if total == 1 { 1.0 } else { n as f64 / (total - 1) as f64 };
            let data = x_t
                .data()
                .iter()
                .map(|&x| {
                    let eps: f64 = StandardNormal.sample(rng);
                    alpha * x + (1.0 - alpha) * eps
                })
                .collect();
            Ok(Some(Tensor::new(x_t.shape().to_vec(), data)?))
        }
    }
}

/// Anything that can play the interpolator role during sampling.
pub trait Interpolate: Sync {
    fn horizon(&self) -> usize;

    /// Estimate of `x_{t+i}` from `x_t` and an estimate of `x_{t+h}`, for
    /// `0 <= i < h`. At `i = 0` each implementation applies its own origin
    /// rule; trained networks return `x_t`.
    fn interpolate_at(&self, x_t: &Tensor, x_h: &Tensor, i: f64, rng: &mut DyRng) -> Result<Tensor>;

    /// True when repeated calls with different streams can differ.
    fn is_stochastic(&self) -> bool {
        false
    }
}

/// Anything that can play the forecaster role during sampling.
pub trait Forecast: Sync {
    fn horizon(&self) -> usize;

    fn conditioning(&self) -> ConditioningMode {
        ConditioningMode::None
    }

    /// Estimate of `x_{t+h}` from a state at dynamical time `s`.
    fn forecast_at(&self, x: &Tensor, s: f64, cond: Option<&Tensor>) -> Result<Tensor>;
}
