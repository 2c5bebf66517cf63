//! Layer normalization along one axis.
//!
//! The normalized axis is described by an `(outer, len, inner)` layout so the
//! same kernel serves channel normalization of NCHW maps (`len = C`,
//! `inner = H*W`) and last-dimension normalization of token sequences
//! (`inner = 1`).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormLayout {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl NormLayout {
    /// Channel axis of a `[B, C, H, W]` tensor.
    pub fn channels(shape: &[usize]) -> Result<Self> {
        if shape.len() != 4 {
            return Err(Error::shape(
                "layer_norm_channels",
                format!("expected [B,C,H,W], got {shape:?}"),
            ));
        }
        Ok(NormLayout {
            outer: shape[0],
            len: shape[1],
            inner: shape[2] * shape[3],
        })
    }

    /// Last axis of any tensor with rank >= 1.
    pub fn last(shape: &[usize]) -> Result<Self> {
        let Some(&len) = shape.last() else {
            return Err(Error::shape("layer_norm", "rank-0 input"));
        };
        Ok(NormLayout {
            outer: shape[..shape.len() - 1].iter().product(),
            len,
            inner: 1,
        })
    }
}

fn check_affine<T: Scalar>(layout: NormLayout, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<()> {
    if !(eps > T::zero()) {
        return Err(Error::InvalidArgument("layer_norm: eps must be > 0".into()));
    }
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [layout.len] {
            return Err(Error::shape(
                "layer_norm",
                format!("{name} must be [{}], got {:?}", layout.len, t.shape()),
            ));
        }
    }
    Ok(())
}

/// Per-position mean and reciprocal standard deviation, each `outer*inner`.
fn statistics<T: Scalar>(x: &[T], l: NormLayout, eps: T) -> (Vec<T>, Vec<T>) {
    let n = T::of(l.len as f64);
    let mut mean = vec![T::zero(); l.outer * l.inner];
    let mut rstd = vec![T::zero(); l.outer * l.inner];
    for o in 0..l.outer {
        let block = &x[o * l.len * l.inner..][..l.len * l.inner];
        let m = &mut mean[o * l.inner..][..l.inner];
        for c in 0..l.len {
            for (acc, &v) in m.iter_mut().zip(&block[c * l.inner..][..l.inner]) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v = *v / n);
        let r = &mut rstd[o * l.inner..][..l.inner];
        for c in 0..l.len {
            for ((acc, &v), &mu) in r.iter_mut().zip(&block[c * l.inner..][..l.inner]).zip(m.iter()) {
                let d = v - mu;
                *acc += d * d;
            }
        }
        r.iter_mut().for_each(|v| *v = T::one() / (*v / n + eps).sqrt());
    }
    (mean, rstd)
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    layout: NormLayout,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    check_affine(layout, gamma, beta, eps)?;
    let l = layout;
    let (mean, rstd) = statistics(x.data(), l, eps);
    let (g, b) = (gamma.data(), beta.data());
    let mut out = x.data().to_vec();
    for o in 0..l.outer {
        for c in 0..l.len {
            let row = &mut out[(o * l.len + c) * l.inner..][..l.inner];
            let stats = o * l.inner;
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[stats + i]) * rstd[stats + i] * g[c] + b[c];
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out).ensure_finite("layer_norm")
}

/// Layer norm across the channel axis of an NCHW tensor.
pub fn layer_norm_channels<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm(x, NormLayout::channels(x.shape())?, gamma, beta, eps)
}

pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    layout: NormLayout,
    gamma: &Tensor<T>,
    eps: T,
    grad_out: &Tensor<T>,
) -> NormGrads<T> {
    let l = layout;
    let (mean, rstd) = statistics(x.data(), l, eps);
    let (xs, gy, g) = (x.data(), grad_out.data(), gamma.data());
    let n = T::of(l.len as f64);
    let mut gx = vec![T::zero(); xs.len()];
    let mut ggamma = vec![T::zero(); l.len];
    let mut gbeta = vec![T::zero(); l.len];

    let mut sum_d = vec![T::zero(); l.inner];
    let mut sum_dx = vec![T::zero(); l.inner];
    for o in 0..l.outer {
        let stats = o * l.inner;
        sum_d.iter_mut().for_each(|v| *v = T::zero());
        sum_dx.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..l.len {
            let base = (o * l.len + c) * l.inner;
            for i in 0..l.inner {
                let xhat = (xs[base + i] - mean[stats + i]) * rstd[stats + i];
                let dy = gy[base + i];
                ggamma[c] += dy * xhat;
                gbeta[c] += dy;
                let d = dy * g[c];
                sum_d[i] += d;
                sum_dx[i] += d * xhat;
            }
        }
        for c in 0..l.len {
            let base = (o * l.len + c) * l.inner;
            for i in 0..l.inner {
                let r = rstd[stats + i];
                let xhat = (xs[base + i] - mean[stats + i]) * r;
                let d = gy[base + i] * g[c];
                gx[base + i] = r * (d - sum_d[i] / n - xhat * sum_dx[i] / n);
            }
        }
    }
    NormGrads {
        input: Tensor::from_parts(x.shape().to_vec(), gx),
        gamma: Tensor::from_parts(vec![l.len], ggamma),
        beta: Tensor::from_parts(vec![l.len], gbeta),
    }
}
