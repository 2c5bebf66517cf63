use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<(usize, usize)> {
    weight.expect_rank(2, "linear", "weight")?;
    let (dout, din) = (weight.dim(0), weight.dim(1));
    match x.shape().last() {
        Some(&d) if d == din => {}
        _ => {
            return Err(Error::shape(
                "linear",
                format!("input trailing dim of {:?} must equal weight Din {din}", x.shape()),
            ))
        }
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::shape(
                "linear",
                format!("bias must be [{dout}], got {:?}", b.shape()),
            ));
        }
    }
    Ok((dout, din))
}

/// `y = x W^T + b` over the last dimension; leading dims are kept.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (dout, din) = check(x, weight, bias)?;
    let w = weight.data();
    let mut out = vec![T::zero(); x.numel() / din * dout];
    out.par_chunks_mut(dout)
        .zip(x.data().par_chunks(din))
        .for_each(|(y, xr)| {
            for (o, yo) in y.iter_mut().enumerate() {
                let wr = &w[o * din..][..din];
                let mut acc = bias.map_or(T::zero(), |b| b.data()[o]);
                for (&a, &b) in xr.iter().zip(wr) {
                    acc += a * b;
                }
                *yo = acc;
            }
        });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = dout;
    Tensor::from_parts(shape, out).ensure_finite("linear")
}

pub struct LinearGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> LinearGrads<T> {
    let (dout, din) = (weight.dim(0), weight.dim(1));
    let (xs, w, gy) = (x.data(), weight.data(), grad_out.data());

    let input = need[0].then(|| {
        let mut gx = vec![T::zero(); xs.len()];
        gx.par_chunks_mut(din)
            .zip(gy.par_chunks(dout))
            .for_each(|(gxr, gyr)| {
                for (o, &g) in gyr.iter().enumerate() {
                    for (d, &wv) in gxr.iter_mut().zip(&w[o * din..][..din]) {
                        *d += g * wv;
                    }
                }
            });
        Tensor::from_parts(x.shape().to_vec(), gx)
    });

    let weight_grad = need[1].then(|| {
        let mut gw = vec![T::zero(); w.len()];
        gw.par_chunks_mut(din).enumerate().for_each(|(o, gwr)| {
            for (xr, gyr) in xs.chunks(din).zip(gy.chunks(dout)) {
                let g = gyr[o];
                for (d, &xv) in gwr.iter_mut().zip(xr) {
                    *d += g * xv;
                }
            }
        });
        Tensor::from_parts(vec![dout, din], gw)
    });

    let bias = need[2].then(|| {
        let mut gb = vec![T::zero(); dout];
        for gyr in gy.chunks(dout) {
            for (d, &g) in gb.iter_mut().zip(gyr) {
                *d += g;
            }
        }
        Tensor::from_parts(vec![dout], gb)
    });

    LinearGrads {
        input,
        weight: weight_grad,
        bias,
    }
}
