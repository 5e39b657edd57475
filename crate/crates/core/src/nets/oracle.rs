//! Closed-form forecaster and interpolator rules over an [`OracleSystem`].
//!
//! With zero bias and zero perturbation these rules are exact for the
//! underlying system, so any sampler built on them can be checked against
//! [`oracle_state`](crate::dynamics::oracle_state).

use super::{Forecast, Interpolate};
use crate::dynamics::OracleSystem;
use crate::error::{invalid, Result};
use crate::rng::DyRng;
use crate::Tensor;

/// `F(x, s) = flow(x, h - s) * (1 + eps * sin(s))`.
///
/// The multiplicative factor is smooth and bounded, so the perturbed rule
/// stays Lipschitz in `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleForecaster {
    pub system: OracleSystem,
    pub horizon: usize,
    pub eps: f64,
}

impl OracleForecaster {
    pub fn exact(system: OracleSystem, horizon: usize) -> Self {
        Self { system, horizon, eps: 0.0 }
    }
}

impl Forecast for OracleForecaster {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn forecast_at(&self, x: &Tensor, s: f64, _cond: Option<&Tensor>) -> Result<Tensor> {
        let out = self.system.flow(x, self.horizon as f64 - s)?;
        if self.eps == 0.0 {
            return Ok(out);
        }
        Ok(out.scale(1.0 + self.eps * s.sin()))
    }
}

/// Ignores its input and returns a fixed snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantForecaster {
    pub value: Tensor,
    pub horizon: usize,
}

impl Forecast for ConstantForecaster {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn forecast_at(&self, _x: &Tensor, _s: f64, _cond: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.value.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpolationRule {
    /// `x_t + (i / h) (x_h - x_t)`.
    Linear,
    /// `flow(x_h, i - h)`: runs the estimate of `x_{t+h}` backwards to `t+i`.
    BackwardFlow,
}

/// Closed-form interpolator with an optional constant additive bias, which is
/// applied at every `i` including `i = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleInterpolator {
    pub system: OracleSystem,
    pub horizon: usize,
    pub rule: InterpolationRule,
    pub bias: f64,
}

impl OracleInterpolator {
    pub fn linear(horizon: usize) -> Self {
        Self { system: OracleSystem::LinearScalar { a: 0.0 }, horizon, rule: InterpolationRule::Linear, bias: 0.0 }
    }

    pub fn backward_flow(system: OracleSystem, horizon: usize) -> Self {
        Self { system, horizon, rule: InterpolationRule::BackwardFlow, bias: 0.0 }
    }

    pub fn with_bias(mut self, bias: f64) -> Self {
        self.bias = bias;
        self
    }

    /// Deterministic evaluation; `i` may be anywhere in `[0, h]`.
    pub fn eval(&self, x_t: &Tensor, x_h: &Tensor, i: f64) -> Result<Tensor> {
        if !(0.0..=self.horizon as f64).contains(&i) {
            return Err(invalid(format!("interpolation time {i} outside [0, {}]", self.horizon)));
        }
        let out = match self.rule {
            InterpolationRule::Linear => {
                let w = i / self.horizon as f64;
                x_t.zip_map(x_h, "interpolate", |a, b| a + w * (b - a))?
            }
            InterpolationRule::BackwardFlow => self.system.flow(x_h, i - self.horizon as f64)?,
        };
        if self.bias == 0.0 {
            return Ok(out);
        }
        Ok(out.map(|v| v + self.bias))
    }
}

impl Interpolate for OracleInterpolator {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn interpolate_at(&self, x_t: &Tensor, x_h: &Tensor, i: f64, _rng: &mut DyRng) -> Result<Tensor> {
        self.eval(x_t, x_h, i)
    }
}

/// Matching forecaster and interpolator over one system.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleModelPair {
    pub forecaster: OracleForecaster,
    pub interpolator: OracleInterpolator,
}

impl OracleModelPair {
    pub fn exact(system: OracleSystem, horizon: usize) -> Self {
        Self {
            forecaster: OracleForecaster::exact(system.clone(), horizon),
            interpolator: OracleInterpolator::backward_flow(system, horizon),
        }
    }

    pub fn with_bias(mut self, bias: f64) -> Self {
        self.interpolator.bias = bias;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.forecaster.eps = eps;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::oracle_state;
    use crate::rng::substream;
    use nalgebra::DMatrix;
    use std::f64::consts::LN_2;

    #[test]
    fn linear_rule() {
        let i = OracleInterpolator::linear(4);
        let out = i.eval(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![4.0]), 1.0).unwrap();
        assert_eq!(out.item(), 1.0);
    }

    #[test]
    fn exponential_forecaster() {
        let f = OracleForecaster::exact(OracleSystem::LinearScalar { a: LN_2 }, 2);
        let out = f.forecast_at(&Tensor::vector(vec![2.0]), 1.0, None).unwrap();
        assert!((out.item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn forecast_from_initial_conditions_hits_horizon_state() {
        let sys = OracleSystem::Harmonic { omega: 1.3 };
        let pair = OracleModelPair::exact(sys.clone(), 3);
        let x0 = Tensor::vector(vec![0.4, -0.9]);
        let f = pair.forecaster.forecast_at(&x0, 0.0, None).unwrap();
        assert!(f.max_abs_diff(&oracle_state(&sys, &x0, 3.0).unwrap()) < 1e-12);
    }

    #[test]
    fn exact_pair_reproduces_the_flow_everywhere() {
        let systems = [
            OracleSystem::LinearScalar { a: -0.3 },
            OracleSystem::LinearVector { a: DMatrix::from_row_slice(2, 2, &[-0.1, 1.0, -1.0, -0.1]) },
            OracleSystem::Harmonic { omega: 2.0 },
        ];
        let x0 = Tensor::vector(vec![1.0, 0.5]);
        for sys in systems {
            let pair = OracleModelPair::exact(sys.clone(), 4);
            let x_h = oracle_state(&sys, &x0, 4.0).unwrap();
            for k in 0..=40 {
                let s = k as f64 * 0.1;
                let truth = oracle_state(&sys, &x0, s).unwrap();
                let xs = pair.interpolator.interpolate_at(&x0, &x_h, s, &mut substream(0, "x")).unwrap();
                assert!(xs.max_abs_diff(&truth) < 1e-12);
                if s < 4.0 {
                    let f = pair.forecaster.forecast_at(&truth, s, None).unwrap();
                    assert!(f.max_abs_diff(&x_h) < 1e-12);
                }
            }
        }
    }
}
