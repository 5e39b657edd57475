use rand::Rng;

use super::Tensor;
use crate::error::{invalid, Result};
use crate::rng::DyRng;

/// Dropout configuration. `active_at_inference` keeps masks on outside
/// training (Monte-Carlo dropout).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DropoutSpec {
    pub rate: f64,
    pub active_at_inference: bool,
}

impl DropoutSpec {
    pub fn new(rate: f64, active_at_inference: bool) -> Result<Self> {
        validate_rate(rate)?;
        Ok(Self { rate, active_at_inference })
    }

    pub fn disabled() -> Self {
        Self { rate: 0.0, active_at_inference: false }
    }

    /// Rate to apply in the given phase.
    pub fn effective_rate(&self, training: bool) -> f64 {
        if training || self.active_at_inference {
            self.rate
        } else {
            0.0
        }
    }
}

fn validate_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut DyRng) -> Result<Vec<f64>> {
    validate_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

/// Applies dropout to `x` as it would behave at inference time.
pub fn dropout_forward(x: &Tensor, spec: &DropoutSpec, rng: &mut DyRng) -> Result<Tensor> {
    validate_rate(spec.rate)?;
    let rate = spec.effective_rate(false);
    if rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng)?;
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}
