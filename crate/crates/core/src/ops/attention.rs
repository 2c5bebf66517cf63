//! Causal multi-head scaled dot-product attention on `[B, S, D]` inputs.
//!
//! Position `i` attends to positions `0..=i` only. Heads split `D` into
//! contiguous slices of `D / heads`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn dims<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<(usize, usize, usize)> {
    q.expect_rank(3, "causal_attention", "q")?;
    q.expect_same_shape(k, "causal_attention")?;
    q.expect_same_shape(v, "causal_attention")?;
    let (b, s, d) = (q.dim(0), q.dim(1), q.dim(2));
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "causal_attention",
            format!("model dim {d} not divisible by {heads} heads"),
        ));
    }
    Ok((b, s, d))
}

/// Softmax-normalized causal scores for one (batch, head): row `i` holds
/// `i + 1` weights.
fn probabilities<T: Scalar>(q: &[T], k: &[T], s: usize, d: usize, off: usize, dh: usize) -> Vec<Vec<T>> {
    let scale = T::one() / T::of(dh as f64).sqrt();
    (0..s)
        .map(|i| {
            let qi = &q[i * d + off..][..dh];
            let mut row: Vec<T> = (0..=i)
                .map(|j| {
                    let kj = &k[j * d + off..][..dh];
                    qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale
                })
                .collect();
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            row.iter_mut().for_each(|p| *p = *p / z);
            row
        })
        .collect()
}

pub fn causal_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (_, s, d) = dims(q, k, v, heads)?;
    let dh = d / heads;
    let mut out = vec![T::zero(); q.numel()];
    out.par_chunks_mut(s * d)
        .zip(q.data().par_chunks(s * d))
        .zip(k.data().par_chunks(s * d).zip(v.data().par_chunks(s * d)))
        .for_each(|((o, qb), (kb, vb))| {
            for h in 0..heads {
                let off = h * dh;
                let p = probabilities(qb, kb, s, d, off, dh);
                for (i, row) in p.iter().enumerate() {
                    let oi = &mut o[i * d + off..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        for (acc, &vv) in oi.iter_mut().zip(&vb[j * d + off..][..dh]) {
                            *acc += pij * vv;
                        }
                    }
                }
            }
        });
    Tensor::from_parts(q.shape().to_vec(), out).ensure_finite("causal_attention")
}

pub struct AttentionGrads<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

pub fn causal_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    grad_out: &Tensor<T>,
) -> AttentionGrads<T> {
    let (s, d) = (q.dim(1), q.dim(2));
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let n = q.numel();
    let (mut gq, mut gk, mut gv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    gq.par_chunks_mut(s * d)
        .zip(gk.par_chunks_mut(s * d))
        .zip(gv.par_chunks_mut(s * d))
        .enumerate()
        .for_each(|(bi, ((gqb, gkb), gvb))| {
            let base = bi * s * d;
            let qb = &q.data()[base..][..s * d];
            let kb = &k.data()[base..][..s * d];
            let vb = &v.data()[base..][..s * d];
            let gob = &grad_out.data()[base..][..s * d];
            for h in 0..heads {
                let off = h * dh;
                let p = probabilities(qb, kb, s, d, off, dh);
                for (i, row) in p.iter().enumerate() {
                    let go = &gob[i * d + off..][..dh];
                    // dp_ij = go_i . v_j
                    let dp: Vec<T> = (0..=i)
                        .map(|j| go.iter().zip(&vb[j * d + off..][..dh]).map(|(&a, &b)| a * b).sum())
                        .collect();
                    let dot: T = row.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        let pij = row[j];
                        for (acc, &g) in gvb[j * d + off..][..dh].iter_mut().zip(go) {
                            *acc += pij * g;
                        }
                        let ds = pij * (dp[j] - dot) * scale;
                        for t in 0..dh {
                            gqb[i * d + off + t] += ds * kb[j * d + off + t];
                            gkb[j * d + off + t] += ds * qb[i * d + off + t];
                        }
                    }
                }
            }
        });
    let shape = q.shape().to_vec();
    AttentionGrads {
        q: Tensor::from_parts(shape.clone(), gq),
        k: Tensor::from_parts(shape.clone(), gk),
        v: Tensor::from_parts(shape, gv),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_position_copies_its_value() {
        let q = Tensor::<f64>::from_fn(&[1, 3, 4], |i| (i as f64 * 0.37).sin());
        let k = Tensor::from_fn(&[1, 3, 4], |i| (i as f64 * 0.11).cos());
        let v = Tensor::from_fn(&[1, 3, 4], |i| i as f64);
        let o = causal_attention(&q, &k, &v, 2).unwrap();
        assert_eq!(&o.data()[..4], &v.data()[..4]);
    }

    #[test]
    fn heads_must_divide_dim() {
        let t = Tensor::<f64>::zeros(&[1, 2, 6]);
        assert!(causal_attention(&t, &t, &t, 4).is_err());
    }
}
