use super::Tensor;
use crate::error::{invalid, Error, Result};

/// A named trainable tensor with its gradient and AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
    step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            step: 0,
        }
    }

    pub fn moments(&self) -> (&Tensor, &Tensor) {
        (&self.m, &self.v)
    }
}

/// Ordered collection of parameters belonging to one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `grads[i]` into parameter `i`'s gradient.
    pub fn accumulate_grads<'g>(&mut self, grads: impl IntoIterator<Item = Option<&'g Tensor>>) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "accumulate_grads",
                    detail: format!("{}: {:?} vs {:?}", p.name, g.shape(), p.value.shape()),
                });
            }
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Named values, in order; used for checkpoints.
    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Replaces values by name. Every parameter must be present with a matching shape.
    pub fn load_values(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| invalid(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "load_values",
                    detail: format!("{}: {:?} vs {:?}", p.name, t.shape(), p.value.shape()),
                });
            }
            *p = Parameter::new(p.name.clone(), t.clone());
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.99, weight_decay: 1e-4, eps: 1e-8 }
    }
}

impl AdamW {
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        for p in store.iter_mut() {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite { op: "adamw_step", location: p.name.clone() });
            }
            p.step += 1;
            let bc1 = 1.0 - self.beta1.powi(p.step as i32);
            let bc2 = 1.0 - self.beta2.powi(p.step as i32);
            let decay = 1.0 - self.lr * self.weight_decay;
            let value = p.value.data_mut();
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for (((w, g), m), v) in value.iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the factor applied (1.0 when untouched).
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(invalid(format!("max norm must be positive, got {max_norm}")));
    }
    let sq: f64 = store.iter().map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "clip_grad_norm", location: "global norm".into() });
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for p in store.iter_mut() {
        for g in p.grad.data_mut() {
            *g *= scale;
        }
    }
    Ok(scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[&[f64]]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, v) in values.iter().enumerate() {
            s.push(format!("p{i}"), Tensor::vector(v.to_vec()));
        }
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut s = store_with(&[&[0.5, -1.25]]);
        let before = s.clone();
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(0).value, before.get(0).value);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with(&[&[0.0]]);
        s.get_mut(0).grad = Tensor::vector(vec![1.0]);
        let opt = AdamW { lr: 0.1, beta1: 0.9, beta2: 0.99, weight_decay: 0.0, eps: 1e-8 };
        opt.step(&mut s).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.get(0).value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_scales_value() {
        let mut s = store_with(&[&[2.0]]);
        let opt = AdamW { lr: 0.1, weight_decay: 0.1, ..AdamW::default() };
        opt.step(&mut s).unwrap();
        assert!((s.get(0).value.item() - 2.0 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn non_positive_lr_is_rejected() {
        let mut s = store_with(&[&[1.0]]);
        assert!(AdamW { lr: 0.0, ..AdamW::default() }.step(&mut s).is_err());
    }

    #[test]
    fn clip_three_four_five() {
        let mut s = store_with(&[&[0.0, 0.0]]);
        s.get_mut(0).grad = Tensor::vector(vec![3.0, 4.0]);
        let scale = clip_grad_norm(&mut s, 1.0).unwrap();
        assert!((scale - 0.2).abs() < 1e-15);
        let g = s.get(0).grad.data();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_uses_global_norm_across_groups() {
        let mut s = store_with(&[&[0.0, 0.0], &[0.0, 0.0]]);
        s.get_mut(0).grad = Tensor::vector(vec![3.0, 0.0]);
        s.get_mut(1).grad = Tensor::vector(vec![0.0, 4.0]);
        assert!((clip_grad_norm(&mut s, 1.0).unwrap() - 0.2).abs() < 1e-15);
        assert!((s.get(0).grad.data()[0] - 0.6).abs() < 1e-15);
        assert!((s.get(1).grad.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_below_max_is_untouched() {
        let mut s = store_with(&[&[0.0, 0.0]]);
        s.get_mut(0).grad = Tensor::vector(vec![0.1, 0.2]);
        let before = s.get(0).grad.clone();
        assert_eq!(clip_grad_norm(&mut s, 1.0).unwrap(), 1.0);
        assert_eq!(s.get(0).grad, before);
    }
}
