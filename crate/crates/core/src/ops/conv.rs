//! 2-D convolution over NCHW tensors.
//!
//! [`conv2d`] is the reference direct algorithm. [`conv2d_im2col`] lowers to
//! a matrix product and must agree with it to within 1e-6. Every call of the
//! direct path tallies the multiply-accumulates it iterates (padded taps
//! included) and reports them to [`mac_probe`] when a recording is active.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvParams {
            stride,
            padding,
            groups,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    pub(crate) fn resolve(
        input: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
        p: ConvParams,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        if p.stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d: stride must be positive".into(),
            ));
        }
        if p.groups == 0 {
            return Err(Error::InvalidArgument(
                "conv2d: groups must be positive".into(),
            ));
        }
        if input.len() != 4 {
            return Err(Error::shape(
                OP,
                format!("input must be [B,C,H,W], got {input:?}"),
            ));
        }
        if weight.len() != 4 {
            return Err(Error::shape(
                OP,
                format!("weight must be [Cout,Cin/groups,k,k], got {weight:?}"),
            ));
        }
        let (batch, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, wcin, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if kh != kw {
            return Err(Error::shape(
                OP,
                format!("kernel must be square, got {kh}x{kw}"),
            ));
        }
        if cin % p.groups != 0 {
            return Err(Error::shape(
                OP,
                format!("input channels {cin} not divisible by groups {}", p.groups),
            ));
        }
        if cout % p.groups != 0 {
            return Err(Error::shape(
                OP,
                format!("output channels {cout} not divisible by groups {}", p.groups),
            ));
        }
        let cin_g = cin / p.groups;
        if wcin != cin_g {
            return Err(Error::shape(
                OP,
                format!("weight in-channels per group is {wcin}, input gives {cin}/{} = {cin_g}", p.groups),
            ));
        }
        let k = kh;
        if h + 2 * p.padding < k {
            return Err(Error::shape(
                OP,
                format!("height {h} + 2*padding {} < kernel {k}", p.padding),
            ));
        }
        if w + 2 * p.padding < k {
            return Err(Error::shape(
                OP,
                format!("width {w} + 2*padding {} < kernel {k}", p.padding),
            ));
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(Error::shape(
                    OP,
                    format!("bias must be [{cout}], got {b:?}"),
                ));
            }
        }
        Ok(ConvGeometry {
            batch,
            cin,
            h,
            w,
            cout,
            cin_g,
            cout_g: cout / p.groups,
            k,
            oh: (h + 2 * p.padding - k) / p.stride + 1,
            ow: (w + 2 * p.padding - k) / p.stride + 1,
            stride: p.stride,
            pad: p.padding,
        })
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.oh, self.ow]
    }

    /// Output indices `o` in `[lo, hi)` for which `o*stride + tap - pad` lands
    /// inside `[0, len)`.
    #[inline]
    fn valid_range(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if tap >= self.pad {
            0
        } else {
            (self.pad - tap).div_ceil(s)
        };
        // largest o with o*s + tap - pad <= len - 1
        let hi = if len + self.pad > tap {
            ((len + self.pad - tap - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Reference direct convolution with zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::resolve(input.shape(), weight.shape(), bias.map(|b| b.shape()), p)?;
    let (x, wt) = (input.data(), weight.data());
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![T::zero(); g.batch * g.cout * plane_out];

    let macs: u64 = out
        .par_chunks_mut(plane_out)
        .enumerate()
        .map(|(idx, plane)| {
            let (bi, oc) = (idx / g.cout, idx % g.cout);
            let grp = oc / g.cout_g;
            if let Some(b) = bias {
                plane.fill(b.data()[oc]);
            }
            let mut tally = 0u64;
            for icl in 0..g.cin_g {
                let ic = grp * g.cin_g + icl;
                let src = &x[(bi * g.cin + ic) * plane_in..][..plane_in];
                for kh in 0..g.k {
                    let (oy0, oy1) = g.valid_range(kh, g.h, g.oh);
                    for kw in 0..g.k {
                        tally += plane_out as u64;
                        let wv = wt[((oc * g.cin_g + icl) * g.k + kh) * g.k + kw];
                        let (ox0, ox1) = g.valid_range(kw, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + kh - g.pad;
                            let row = &src[iy * g.w..][..g.w];
                            let dst = &mut plane[oy * g.ow..][..g.ow];
                            for ox in ox0..ox1 {
                                dst[ox] += wv * row[ox * g.stride + kw - g.pad];
                            }
                        }
                    }
                }
            }
            tally
        })
        .sum();

    mac_probe::report(ConvMacRecord {
        in_channels: g.cin,
        out_channels: g.cout,
        kernel: g.k,
        stride: g.stride,
        groups: p.groups,
        out_h: g.oh,
        out_w: g.ow,
        macs,
    });
    Tensor::from_parts(g.out_shape(), out).ensure_finite("conv2d")
}

/// im2col + matmul lowering of [`conv2d`].
pub fn conv2d_im2col<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::resolve(input.shape(), weight.shape(), bias.map(|b| b.shape()), p)?;
    let (x, wt) = (input.data(), weight.data());
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let rows = g.cin_g * g.k * g.k;
    let groups = p.groups;
    let mut out = vec![T::zero(); g.batch * g.cout * plane_out];

    // one (batch, group) slab of output channels at a time
    out.par_chunks_mut(g.cout_g * plane_out)
        .enumerate()
        .for_each(|(idx, slab)| {
            let (bi, grp) = (idx / groups, idx % groups);
            let mut cols = vec![T::zero(); rows * plane_out];
            for icl in 0..g.cin_g {
                let ic = grp * g.cin_g + icl;
                let src = &x[(bi * g.cin + ic) * plane_in..][..plane_in];
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let r = (icl * g.k + kh) * g.k + kw;
                        let col = &mut cols[r * plane_out..][..plane_out];
                        let (oy0, oy1) = g.valid_range(kh, g.h, g.oh);
                        let (ox0, ox1) = g.valid_range(kw, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + kh - g.pad;
                            for ox in ox0..ox1 {
                                col[oy * g.ow + ox] = src[iy * g.w + ox * g.stride + kw - g.pad];
                            }
                        }
                    }
                }
            }
            for ocl in 0..g.cout_g {
                let oc = grp * g.cout_g + ocl;
                let dst = &mut slab[ocl * plane_out..][..plane_out];
                if let Some(b) = bias {
                    dst.fill(b.data()[oc]);
                }
                let wrow = &wt[oc * rows..][..rows];
                for (r, &wv) in wrow.iter().enumerate() {
                    let col = &cols[r * plane_out..][..plane_out];
                    for (d, &c) in dst.iter_mut().zip(col) {
                        *d += wv * c;
                    }
                }
            }
        });
    Tensor::from_parts(g.out_shape(), out).ensure_finite("conv2d_im2col")
}

/// Gradients of [`conv2d`] with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: ConvParams,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::resolve(input.shape(), weight.shape(), None, p)?;
    if grad_out.shape() != g.out_shape().as_slice() {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad {:?} vs output {:?}", grad_out.shape(), g.out_shape()),
        ));
    }
    let (x, wt, gy) = (input.data(), weight.data(), grad_out.data());
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;

    let grad_input = need[0].then(|| {
        let mut gx = vec![T::zero(); input.numel()];
        gx.par_chunks_mut(plane_in).enumerate().for_each(|(idx, dst)| {
            let (bi, ic) = (idx / g.cin, idx % g.cin);
            let (grp, icl) = (ic / g.cin_g, ic % g.cin_g);
            for ocl in 0..g.cout_g {
                let oc = grp * g.cout_g + ocl;
                let src = &gy[(bi * g.cout + oc) * plane_out..][..plane_out];
                for kh in 0..g.k {
                    let (oy0, oy1) = g.valid_range(kh, g.h, g.oh);
                    for kw in 0..g.k {
                        let wv = wt[((oc * g.cin_g + icl) * g.k + kh) * g.k + kw];
                        let (ox0, ox1) = g.valid_range(kw, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + kh - g.pad;
                            let row = &mut dst[iy * g.w..][..g.w];
                            let grow = &src[oy * g.ow..][..g.ow];
                            for ox in ox0..ox1 {
                                row[ox * g.stride + kw - g.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        });
        Tensor::from_parts(input.shape().to_vec(), gx)
    });

    let grad_weight = need[1].then(|| {
        let per_oc = g.cin_g * g.k * g.k;
        let mut gw = vec![T::zero(); weight.numel()];
        gw.par_chunks_mut(per_oc).enumerate().for_each(|(oc, dst)| {
            let grp = oc / g.cout_g;
            for bi in 0..g.batch {
                let src = &gy[(bi * g.cout + oc) * plane_out..][..plane_out];
                for icl in 0..g.cin_g {
                    let ic = grp * g.cin_g + icl;
                    let xin = &x[(bi * g.cin + ic) * plane_in..][..plane_in];
                    for kh in 0..g.k {
                        let (oy0, oy1) = g.valid_range(kh, g.h, g.oh);
                        for kw in 0..g.k {
                            let (ox0, ox1) = g.valid_range(kw, g.w, g.ow);
                            let mut acc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + kh - g.pad;
                                let row = &xin[iy * g.w..][..g.w];
                                let grow = &src[oy * g.ow..][..g.ow];
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * row[ox * g.stride + kw - g.pad];
                                }
                            }
                            dst[(icl * g.k + kh) * g.k + kw] += acc;
                        }
                    }
                }
            }
        });
        Tensor::from_parts(weight.shape().to_vec(), gw)
    });

    let grad_bias = need[2].then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for bi in 0..g.batch {
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc += gy[(bi * g.cout + oc) * plane_out..][..plane_out]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        Tensor::from_parts(vec![g.cout], gb)
    });

    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

/// One direct-path convolution call as seen by the MAC tally.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvMacRecord {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub macs: u64,
}

impl ConvMacRecord {
    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }
}

/// Per-thread recording of direct-path convolution MACs.
pub mod mac_probe {
    use std::cell::RefCell;

    use super::ConvMacRecord;

    thread_local! {
        static LOG: RefCell<Option<Vec<ConvMacRecord>>> = const { RefCell::new(None) };
    }

    /// Run `f`, returning its result together with every direct conv call
    /// it made on this thread, in call order.
    pub fn record<R>(f: impl FnOnce() -> R) -> (R, Vec<ConvMacRecord>) {
        let prev = LOG.with(|l| l.borrow_mut().replace(Vec::new()));
        let out = f();
        let log = LOG.with(|l| std::mem::replace(&mut *l.borrow_mut(), prev));
        (out, log.unwrap_or_default())
    }

    pub(super) fn report(rec: ConvMacRecord) {
        LOG.with(|l| {
            if let Some(log) = l.borrow_mut().as_mut() {
                log.push(rec);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_kernel() -> Tensor<f64> {
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        w
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f64>::ones(&[1, 1, 5, 5]);
        let y = conv2d(&x, &identity_kernel(), None, ConvParams::new(1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn stem_shape() {
        let x = Tensor::<f32>::zeros(&[1, 3, 336, 336]);
        let w = Tensor::<f32>::zeros(&[192, 3, 4, 4]);
        let y = conv2d(&x, &w, None, ConvParams::new(4, 0, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 192, 84, 84]);
    }

    #[test]
    fn zero_stride_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let err = conv2d(&x, &w, None, ConvParams::new(0, 0, 1)).unwrap_err();
        assert!(err.to_string().contains("stride"));
    }

    #[test]
    fn mismatched_channels_name_the_dimension() {
        let x = Tensor::<f32>::zeros(&[1, 4, 8, 8]);
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        let err = conv2d(&x, &w, None, ConvParams::new(1, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("in-channels"), "{err}");
        let err = conv2d(&x, &w, None, ConvParams::new(1, 1, 3)).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn kernel_larger_than_padded_input() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 7, 7]);
        let err = conv2d(&x, &w, None, ConvParams::new(1, 2, 1)).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn probe_counts_all_taps() {
        let x = Tensor::<f32>::ones(&[2, 4, 6, 6]);
        let w = Tensor::<f32>::ones(&[4, 1, 3, 3]);
        let (_, log) = mac_probe::record(|| conv2d(&x, &w, None, ConvParams::new(1, 1, 4)).unwrap());
        assert_eq!(log.len(), 1);
        assert!(log[0].is_depthwise());
        assert_eq!(log[0].macs, 2 * 4 * 36 * 9);
    }

    #[test]
    fn probe_is_inactive_by_default() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f32>::ones(&[1, 1, 1, 1]);
        conv2d(&x, &w, None, ConvParams::new(1, 0, 1)).unwrap();
        let (_, log) = mac_probe::record(|| ());
        assert!(log.is_empty());
    }
}
