use std::borrow::Cow;

use super::{check_same_shape, dropout::dropout_mask, Tensor};
use crate::error::{Error, Result};
use crate::rng::DyRng;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let th = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    Concat(Var, Var),
    Mask(Var, Vec<f64>),
    MeanSquare(Var),
    MeanAbs(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// index is already a topological order.
///
/// Leaves can borrow their value (`'a`), which lets frozen or trainable
/// parameters take part in a pass without being copied.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: name,
                location: format!("node #{}", self.nodes.len()),
            });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Cow::Owned(t), Op::Leaf, false, "constant")
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Result<Var> {
        self.push(Cow::Borrowed(t), Op::Leaf, false, "constant")
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, t: &'a Tensor) -> Result<Var> {
        self.push(Cow::Borrowed(t), Op::Leaf, true, "leaf")
    }

    pub fn leaf_owned(&mut self, t: Tensor) -> Result<Var> {
        self.push(Cow::Owned(t), Op::Leaf, true, "leaf")
    }

    /// `(n, k) x (k, m) -> (n, m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(av.data(), bv.data(), n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::MatMul(a, b), ng, "matmul")
    }

    /// Adds a bias vector `(m)` to every row of `(n, m)`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.shape().len() != 2 || bv.shape() != [xv.shape()[1]] {
            return Err(shape_err("add_row", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let m = bv.len();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(bias);
        self.push(Cow::Owned(value), Op::AddRow(x, bias), ng, "add_row")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(Cow::Owned(value), Op::Scale(a, c), ng, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v + c);
        let ng = self.needs(a);
        self.push(Cow::Owned(value), Op::AddScalar(a), ng, "add_scalar")
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        let value = self.value(a).map(|v| act.apply(v));
        let ng = self.needs(a);
        self.push(Cow::Owned(value), Op::Act(a, act), ng, "activation")
    }

    /// Concatenates two rank-2 tensors with equal row counts along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat", format!("{sa:?} ++ {sb:?}")));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let value = Tensor::new(vec![n, ca + cb], out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Cow::Owned(value), Op::Concat(a, b), ng, "concat")
    }

    /// Inverted dropout with a freshly drawn mask. `rate == 0` is the identity
    /// and draws nothing from `rng`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut DyRng) -> Result<Var> {
        if rate == 0.0 {
            return Ok(a);
        }
        let mask = dropout_mask(self.value(a).len(), rate, rng)?;
        self.apply_mask(a, mask)
    }

    /// Multiplies by a fixed mask (a dropout draw taken elsewhere).
    pub fn apply_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(shape_err("dropout", format!("mask of {} for {:?}", mask.len(), av.shape())));
        }
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(Cow::Owned(value), Op::Mask(a, mask), ng, "dropout")
    }

    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let v = av.data().iter().map(|x| x * x).sum::<f64>() / av.len() as f64;
        let ng = self.needs(a);
        self.push(Cow::Owned(Tensor::scalar(v)), Op::MeanSquare(a), ng, "mean_square")
    }

    pub fn mean_abs(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let v = av.data().iter().map(|x| x.abs()).sum::<f64>() / av.len() as f64;
        let ng = self.needs(a);
        self.push(Cow::Owned(Tensor::scalar(v)), Op::MeanAbs(a), ng, "mean_abs")
    }

    /// `mean((pred - target)^2)`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        self.mean_square(d)
    }

    /// `mean(|pred - target|)`.
    pub fn mae(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        self.mean_abs(d)
    }

    /// Gradients of the scalar `loss` with respect to all nodes upstream of it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                // Leaf gradients stay in place for the caller.
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.needs(*a) {
                        let da = matmul_a_bt(g.data(), bv.data(), n, m, k);
                        accumulate(&mut grads, *a, Tensor::new(vec![n, k], da)?)?;
                    }
                    if self.needs(*b) {
                        let db = matmul_at_b(av.data(), g.data(), n, k, m);
                        accumulate(&mut grads, *b, Tensor::new(vec![k, m], db)?)?;
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.needs(*bias) {
                        let m = self.value(*bias).len();
                        let mut db = vec![0.0; m];
                        for row in g.data().chunks(m) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        accumulate(&mut grads, *bias, Tensor::vector(db))?;
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let da = g.zip_map(self.value(*b), "mul", |gv, bv| gv * bv)?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.needs(*b) {
                        let db = g.zip_map(self.value(*a), "mul", |gv, av| gv * av)?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.scale(*c))?;
                    }
                }
                Op::AddScalar(a) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g)?;
                    }
                }
                Op::Act(a, act) => {
                    if self.needs(*a) {
                        let da = g.zip_map(self.value(*a), "activation", |gv, x| gv * act.derivative(x))?;
                        accumulate(&mut grads, *a, da)?;
                    }
                }
                Op::Concat(a, b) => {
                    let (n, ca) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let cb = self.value(*b).shape()[1];
                    let w = ca + cb;
                    if self.needs(*a) {
                        let mut da = Vec::with_capacity(n * ca);
                        for r in 0..n {
                            da.extend_from_slice(&g.data()[r * w..r * w + ca]);
                        }
                        accumulate(&mut grads, *a, Tensor::new(vec![n, ca], da)?)?;
                    }
                    if self.needs(*b) {
                        let mut db = Vec::with_capacity(n * cb);
                        for r in 0..n {
                            db.extend_from_slice(&g.data()[r * w + ca..(r + 1) * w]);
                        }
                        accumulate(&mut grads, *b, Tensor::new(vec![n, cb], db)?)?;
                    }
                }
                Op::Mask(a, mask) => {
                    if self.needs(*a) {
                        let data = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                        accumulate(&mut grads, *a, Tensor::new(g.shape().to_vec(), data)?)?;
                    }
                }
                Op::MeanSquare(a) => {
                    if self.needs(*a) {
                        let av = self.value(*a);
                        let c = 2.0 * g.item() / av.len() as f64;
                        accumulate(&mut grads, *a, av.scale(c))?;
                    }
                }
                Op::MeanAbs(a) => {
                    if self.needs(*a) {
                        let av = self.value(*a);
                        let c = g.item() / av.len() as f64;
                        let da = av.map(|x| {
                            if x > 0.0 {
                                c
                            } else if x < 0.0 {
                                -c
                            } else {
                                0.0
                            }
                        });
                        accumulate(&mut grads, *a, da)?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            check_same_shape("backward", existing, &g)?;
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `G (n, m) x B^T` where `B` is `(k, m)`; result `(n, k)`.
fn matmul_a_bt(g: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `A^T (k, n) x G (n, m)`; result `(k, m)`.
fn matmul_at_b(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_chain_rule() {
        // loss = mean((w x - y)^2), w = 1, x = 2, y = 0
        let w = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let mut g = Graph::new();
        let wv = g.leaf(&w).unwrap();
        let x = g.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        let y = g.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        let p = g.matmul(x, wv).unwrap();
        let loss = g.mse(p, y).unwrap();
        assert_eq!(g.value(loss).item(), 4.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(wv).unwrap().data(), &[8.0]);
    }

    #[test]
    fn constant_graph_has_zero_gradient() {
        let w = Tensor::vector(vec![0.3, -0.2]);
        let mut g = Graph::new();
        let wv = g.leaf(&w).unwrap();
        let zero = g.scale(wv, 0.0).unwrap();
        let c = g.add_scalar(zero, 5.0).unwrap();
        let loss = g.mean_square(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(wv).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }), "{err}");
        assert!(err.to_string().contains("[2, 3] x [2, 3]"));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1e300])).unwrap();
        let err = g.mul(a, a).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul", .. }));
        assert!(g.constant(Tensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn shared_leaf_accumulates() {
        // loss = mean((a*a)^2) with a=3 -> d/da = 4 a^3 = 108
        let a = Tensor::vector(vec![3.0]);
        let mut g = Graph::new();
        let av = g.leaf(&a).unwrap();
        let sq = g.mul(av, av).unwrap();
        let loss = g.mean_square(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads.wrt(av).unwrap().item() - 108.0).abs() < 1e-12);
    }
}
