use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::Tensor;

/// Linear systems with a closed-form flow, used as exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleSystem {
    /// `x(s) = x0 * exp(a s)`, applied elementwise.
    LinearScalar { a: f64 },
    /// `x(s) = exp(A s) x0`.
    LinearVector { a: DMatrix<f64> },
    /// Unit-mass oscillator over `[position, velocity]` with angular frequency `omega`.
    Harmonic { omega: f64 },
}

impl OracleSystem {
    /// State dimension, or `None` when any length is accepted.
    pub fn dim(&self) -> Option<usize> {
        match self {
            OracleSystem::LinearScalar { .. } => None,
            OracleSystem::LinearVector { a } => Some(a.nrows()),
            OracleSystem::Harmonic { .. } => Some(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OracleSystem::LinearScalar { a } if !a.is_finite() => Err(invalid("non-finite rate")),
            OracleSystem::LinearVector { a } if !a.is_square() || a.iter().any(|v| !v.is_finite()) => {
                Err(invalid("generator must be a finite square matrix"))
            }
            OracleSystem::Harmonic { omega } if !(omega.is_finite() && *omega > 0.0) => {
                Err(invalid("frequency must be positive"))
            }
            _ => Ok(()),
        }
    }

    fn check_state(&self, x: &Tensor) -> Result<()> {
        match self.dim() {
            Some(d) if x.len() != d => Err(invalid(format!("state has {} entries, system needs {d}", x.len()))),
            _ => Ok(()),
        }
    }

    /// Propagates `x` forward by `tau` (negative `tau` runs backwards).
    pub fn flow(&self, x: &Tensor, tau: f64) -> Result<Tensor> {
        self.check_state(x)?;
        if tau == 0.0 {
            return Ok(x.clone());
        }
        let out = match self {
            OracleSystem::LinearScalar { a } => {
                let g = (a * tau).exp();
                x.map(|v| v * g)
            }
            OracleSystem::LinearVector { a } => {
                let phi = (a * tau).exp();
                let v = phi * DVector::from_column_slice(x.data());
                Tensor::new(x.shape().to_vec(), v.as_slice().to_vec())?
            }
            OracleSystem::Harmonic { omega } => {
                let (s, c) = (omega * tau).sin_cos();
                let (q, v) = (x.data()[0], x.data()[1]);
                Tensor::new(x.shape().to_vec(), vec![c * q + s / omega * v, -omega * s * q + c * v])?
            }
        };
        Ok(out)
    }

    pub fn label(&self) -> &'static str {
        match self {
            OracleSystem::LinearScalar { .. } => "linear-scalar",
            OracleSystem::LinearVector { .. } => "linear-vector",
            OracleSystem::Harmonic { .. } => "harmonic",
        }
    }
}

/// Exact state at time `s` starting from `x0` at time 0.
pub fn oracle_state(system: &OracleSystem, x0: &Tensor, s: f64) -> Result<Tensor> {
    if !s.is_finite() {
        return Err(invalid("oracle time must be finite"));
    }
    system.flow(x0, s)
}
