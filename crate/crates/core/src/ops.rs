//! Tensor-level forward ops without gradient tracking.
//!
//! Each call records into a throwaway [`Graph`], so values are bit-identical
//! to what the differentiable path computes.

use crate::autodiff::{Graph, Reduce, Var};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

fn unary(x: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone())?;
    let out = f(&mut g, v)?;
    Ok(g.value(out).clone())
}

fn binary(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let va = g.constant(a.clone())?;
    let vb = g.constant(b.clone())?;
    let out = f(&mut g, va, vb)?;
    Ok(g.value(out).clone())
}

fn channel_axis(x: &Tensor) -> Result<usize> {
    x.rank().checked_sub(2).ok_or_else(|| shape_err!("feature map rank < 2: {:?}", x.shape()))
}

pub use crate::kernels::{affine, conv1d};

pub fn relu(x: &Tensor) -> Result<Tensor> {
    unary(x, |g, v| g.relu(v))
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    unary(x, |g, v| g.sigmoid(v))
}

pub fn tanh(x: &Tensor) -> Result<Tensor> {
    unary(x, |g, v| g.tanh(v))
}

pub fn neg(x: &Tensor) -> Result<Tensor> {
    unary(x, |g, v| g.neg(v))
}

pub fn scale(x: &Tensor, k: f64) -> Result<Tensor> {
    unary(x, |g, v| g.scale(v, k))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |g, a, b| g.add(a, b))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |g, a, b| g.mul(a, b))
}

/// Reduces `axis` away.
pub fn reduce(x: &Tensor, kind: Reduce, axis: usize) -> Result<Tensor> {
    unary(x, |g, v| g.reduce(v, kind, axis))
}

/// Splits the channel axis into `n` equal groups, in order.
pub fn split_channels(x: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let axis = channel_axis(x)?;
    let c = x.shape()[axis];
    if n == 0 || !c.is_multiple_of(n) {
        return Err(invalid!("{} subsets do not divide {} channels", n, c));
    }
    let w = c / n;
    let mut g = Graph::new();
    let v = g.constant(x.clone())?;
    (0..n)
        .map(|i| {
            let s = g.narrow(v, axis, i * w, w)?;
            Ok(g.value(s).clone())
        })
        .collect()
}

pub fn concat_channels(subsets: &[Tensor]) -> Result<Tensor> {
    let first = subsets.first().ok_or_else(|| invalid!("no subsets to concatenate"))?;
    let axis = channel_axis(first)?;
    let mut g = Graph::new();
    let vs = subsets.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = g.concat(&vs, axis)?;
    Ok(g.value(out).clone())
}

pub fn flip_channels(x: &Tensor) -> Result<Tensor> {
    let axis = channel_axis(x)?;
    unary(x, |g, v| g.flip(v, axis))
}
