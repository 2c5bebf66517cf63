//! Layout and broadcast helpers: token flattening, sequence concatenation,
//! row gathers, trailing-dim bias add and per-channel scaling.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `[B, C, H, W]` -> `[B, H*W, C]`, rows in row-major grid order.
pub fn to_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(4, "to_tokens", "input")?;
    let (b, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &src[(bi * c + ci) * hw..][..hw];
            for (p, &v) in plane.iter().enumerate() {
                out[(bi * hw + p) * c + ci] = v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, hw, c], out))
}

/// Inverse of [`to_tokens`] for a known grid.
pub fn from_tokens<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (b, hw, c) = (x.dim(0), x.dim(1), x.dim(2));
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for p in 0..hw {
            for ci in 0..c {
                out[(bi * c + ci) * hw + p] = src[(bi * hw + p) * c + ci];
            }
        }
    }
    Tensor::from_parts(vec![b, c, h, w], out)
}

/// Concatenate two `[B, S_i, D]` tensors along the sequence axis.
pub fn concat_seq<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank(3, "concat_seq", "first input")?;
    b.expect_rank(3, "concat_seq", "second input")?;
    if a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) {
        return Err(Error::shape(
            "concat_seq",
            format!("{:?} and {:?} differ outside the sequence axis", a.shape(), b.shape()),
        ));
    }
    let (batch, sa, sb, d) = (a.dim(0), a.dim(1), b.dim(1), a.dim(2));
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for bi in 0..batch {
        out.extend_from_slice(&a.data()[bi * sa * d..][..sa * d]);
        out.extend_from_slice(&b.data()[bi * sb * d..][..sb * d]);
    }
    Ok(Tensor::from_parts(vec![batch, sa + sb, d], out))
}

/// Split the gradient of [`concat_seq`] back into its two parts.
pub fn split_seq<T: Scalar>(g: &Tensor<T>, sa: usize) -> (Tensor<T>, Tensor<T>) {
    let (batch, s, d) = (g.dim(0), g.dim(1), g.dim(2));
    let sb = s - sa;
    let (mut ga, mut gb) = (Vec::with_capacity(batch * sa * d), Vec::with_capacity(batch * sb * d));
    for chunk in g.data().chunks(s * d) {
        ga.extend_from_slice(&chunk[..sa * d]);
        gb.extend_from_slice(&chunk[sa * d..]);
    }
    (
        Tensor::from_parts(vec![batch, sa, d], ga),
        Tensor::from_parts(vec![batch, sb, d], gb),
    )
}

/// Rows of a `[V, D]` table; the output shape is `lead ++ [D]`.
pub fn gather_rows<T: Scalar>(table: &Tensor<T>, ids: &[usize], lead: &[usize]) -> Result<Tensor<T>> {
    table.expect_rank(2, "gather_rows", "table")?;
    let (v, d) = (table.dim(0), table.dim(1));
    if lead.iter().product::<usize>() != ids.len() {
        return Err(Error::shape(
            "gather_rows",
            format!("{} ids do not fill leading shape {lead:?}", ids.len()),
        ));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: id {id} outside table of {v} rows"
            )));
        }
        out.extend_from_slice(&table.data()[id * d..][..d]);
    }
    let mut shape = lead.to_vec();
    shape.push(d);
    Ok(Tensor::from_parts(shape, out))
}

pub fn gather_rows_backward<T: Scalar>(table_shape: &[usize], ids: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let d = table_shape[1];
    let mut g = vec![T::zero(); table_shape[0] * d];
    for (&id, row) in ids.iter().zip(grad_out.data().chunks(d)) {
        for (acc, &v) in g[id * d..][..d].iter_mut().zip(row) {
            *acc += v;
        }
    }
    Tensor::from_parts(table_shape.to_vec(), g)
}

fn trailing_len<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>, op: &'static str) -> Result<usize> {
    let (xs, bs) = (x.shape(), bias.shape());
    if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
        return Err(Error::shape(
            op,
            format!("{bs:?} is not a trailing shape of {xs:?}"),
        ));
    }
    Ok(bias.numel())
}

/// `x + bias` where `bias.shape()` equals the trailing dims of `x`.
pub fn add_trailing<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let n = trailing_len(x, bias, "add_trailing")?;
    let mut out = x.data().to_vec();
    for chunk in out.chunks_mut(n) {
        for (o, &b) in chunk.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn add_trailing_backward<T: Scalar>(bias_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let n: usize = bias_shape.iter().product();
    let mut g = vec![T::zero(); n];
    for chunk in grad_out.data().chunks(n) {
        for (acc, &v) in g.iter_mut().zip(chunk) {
            *acc += v;
        }
    }
    Tensor::from_parts(bias_shape.to_vec(), g)
}

/// `x[b, c, h, w] * gamma[c]` on an NCHW tensor.
pub fn scale_channels<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(4, "scale_channels", "input")?;
    let (c, hw) = (x.dim(1), x.dim(2) * x.dim(3));
    if gamma.shape() != [c] {
        return Err(Error::shape(
            "scale_channels",
            format!("gamma must be [{c}], got {:?}", gamma.shape()),
        ));
    }
    let mut out = x.data().to_vec();
    for (i, plane) in out.chunks_mut(hw).enumerate() {
        let s = gamma.data()[i % c];
        plane.iter_mut().for_each(|v| *v *= s);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn scale_channels_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (c, hw) = (x.dim(1), x.dim(2) * x.dim(3));
    let gx = scale_channels(grad_out, gamma).expect("shapes checked in forward");
    let mut gg = vec![T::zero(); c];
    for (i, (xp, gp)) in x.data().chunks(hw).zip(grad_out.data().chunks(hw)).enumerate() {
        gg[i % c] += xp.iter().zip(gp).map(|(&a, &b)| a * b).sum::<T>();
    }
    (gx, Tensor::from_parts(vec![c], gg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_order_is_row_major() {
        // one channel, 2x3 grid
        let x = Tensor::<f64>::from_fn(&[1, 2, 2, 3], |i| i as f64);
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[1, 6, 2]);
        assert_eq!(&t.data()[..4], &[0.0, 6.0, 1.0, 7.0]);
        assert_eq!(from_tokens(&t, 2, 3), x);
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor::<f64>::from_fn(&[2, 1, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 2, 2], |i| 10.0 + i as f64);
        let c = concat_seq(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        let (ga, gb) = split_seq(&c, 1);
        assert_eq!((ga, gb), (a, b));
    }

    #[test]
    fn trailing_bias_shape_checked() {
        let x = Tensor::<f64>::zeros(&[2, 3, 4]);
        assert!(add_trailing(&x, &Tensor::zeros(&[3, 4])).is_ok());
        assert!(add_trailing(&x, &Tensor::zeros(&[4, 3])).is_err());
    }
}
