use rand::Rng;

use super::time_embed;
use crate::error::{invalid, Result};
use crate::rng::DyRng;
use crate::tensor::{Activation, Graph, ParamStore, Var};
use crate::Tensor;

/// Perceptron with a time-embedding scale-shift after every hidden affine layer:
/// `h <- act((W h + b) * (1 + scale(e)) + shift(e))`, then dropout.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub width: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub activation: Activation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { width: 64, depth: 3, time_dim: 16, activation: Activation::Gelu }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: BackboneConfig,
    pub in_dim: usize,
    pub out_dim: usize,
    pub params: ParamStore,
}

/// Graph handles for every parameter of one [`Mlp`], in store order.
#[derive(Debug, Clone)]
pub struct BoundParams(pub Vec<Var>);

fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut DyRng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let shape = if rows == 0 { vec![cols] } else { vec![rows, cols] };
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

impl Mlp {
    pub fn new(in_dim: usize, out_dim: usize, config: BackboneConfig, rng: &mut DyRng) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || config.width == 0 || config.depth == 0 {
            return Err(invalid("backbone dimensions must be positive"));
        }
        time_embed(0.0, config.time_dim)?;
        let mut params = ParamStore::new();
        let mut fan_in = in_dim;
        for l in 0..config.depth {
            params.push(format!("layer{l}.weight"), uniform(fan_in, config.width, fan_in, rng));
            params.push(format!("layer{l}.bias"), uniform(0, config.width, fan_in, rng));
            params.push(format!("layer{l}.scale.weight"), uniform(config.time_dim, config.width, config.time_dim, rng));
            params.push(format!("layer{l}.scale.bias"), Tensor::zeros(&[config.width]));
            params.push(format!("layer{l}.shift.weight"), uniform(config.time_dim, config.width, config.time_dim, rng));
            params.push(format!("layer{l}.shift.bias"), Tensor::zeros(&[config.width]));
            fan_in = config.width;
        }
        params.push("out.weight", uniform(fan_in, out_dim, fan_in, rng));
        params.push("out.bias", uniform(0, out_dim, fan_in, rng));
        Ok(Self { config, in_dim, out_dim, params })
    }

    /// Puts the parameters on `g`, as gradient leaves when `trainable`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> Result<BoundParams> {
        self.params
            .iter()
            .map(|p| if trainable { g.leaf(&p.value) } else { g.constant_ref(&p.value) })
            .collect::<Result<Vec<_>>>()
            .map(BoundParams)
    }

    /// Batched forward pass over rows of `x` (`(n, in_dim)`) at per-row times.
    /// `dropout` is `(rate, stream)`; rate 0 or `None` disables it.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        bound: &BoundParams,
        x: Var,
        times: &[f64],
        dropout: Option<(f64, &mut DyRng)>,
    ) -> Result<Var> {
        let rows = g.value(x).shape()[0];
        if times.len() != rows || g.value(x).shape() != [rows, self.in_dim] {
            return Err(crate::Error::Shape {
                op: "backbone",
                detail: format!("input {:?} with {} times, expected (_, {})", g.value(x).shape(), times.len(), self.in_dim),
            });
        }
        let mut emb = Vec::with_capacity(rows * self.config.time_dim);
        for &t in times {
            emb.extend(time_embed(t, self.config.time_dim)?);
        }
        let emb = g.constant(Tensor::new(vec![rows, self.config.time_dim], emb)?)?;
        let p = &bound.0;
        let mut dropout = dropout.filter(|(rate, _)| *rate > 0.0);
        let mut h = x;
        for l in 0..self.config.depth {
            let base = 6 * l;
            let z = g.matmul(h, p[base])?;
            let z = g.add_row(z, p[base + 1])?;
            let scale = g.matmul(emb, p[base + 2])?;
            let scale = g.add_row(scale, p[base + 3])?;
            let scale = g.add_scalar(scale, 1.0)?;
            let shift = g.matmul(emb, p[base + 4])?;
            let shift = g.add_row(shift, p[base + 5])?;
            let z = g.mul(z, scale)?;
            let z = g.add(z, shift)?;
            h = g.activation(z, self.config.activation)?;
            if let Some((rate, rng)) = dropout.as_mut() {
                h = g.dropout(h, *rate, rng)?;
            }
        }
        let base = 6 * self.config.depth;
        let out = g.matmul(h, p[base])?;
        g.add_row(out, p[base + 1])
    }

    /// Forward pass without gradients. `x` is `(n, in_dim)`.
    pub fn predict(&self, x: Tensor, times: &[f64], dropout: Option<(f64, &mut DyRng)>) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let xv = g.constant(x)?;
        let out = self.forward(&mut g, &bound, xv, times, dropout)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn tiny() -> Mlp {
        let cfg = BackboneConfig { width: 5, depth: 3, time_dim: 4, activation: Activation::Silu };
        Mlp::new(3, 2, cfg, &mut substream(0, "init")).unwrap()
    }

    #[test]
    fn parameter_layout() {
        let m = tiny();
        assert_eq!(m.params.len(), 6 * 3 + 2);
        assert_eq!(m.params.get(0).value.shape(), &[3, 5]);
        assert_eq!(m.params.get(18).value.shape(), &[5, 2]);
    }

    #[test]
    fn predict_without_dropout_is_pure() {
        let m = tiny();
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.0]).unwrap();
        let a = m.predict(x.clone(), &[1.0, 2.5], None).unwrap();
        let b = m.predict(x, &[1.0, 2.5], None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 2]);
    }

    #[test]
    fn output_depends_on_time() {
        let m = tiny();
        let x = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let a = m.predict(x.clone(), &[1.0], None).unwrap();
        let b = m.predict(x, &[2.0], None).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let m = tiny();
        let x = Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap();
        assert!(m.predict(x, &[1.0], None).is_err());
    }
}
