use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy<T> {
    /// Mean negative log-likelihood over unmasked rows; zero when none are.
    pub loss: T,
    pub count: usize,
    pub all_masked: bool,
}

fn check<T: Scalar>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<(usize, usize)> {
    if logits.rank() < 2 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits must be [..., V], got {:?}", logits.shape()),
        ));
    }
    let vocab = logits.dim(logits.rank() - 1);
    let rows = logits.numel() / vocab;
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!(
                "{rows} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            ),
        ));
    }
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m && t >= vocab {
            return Err(Error::InvalidArgument(format!(
                "target {t} at row {i} is outside vocabulary [0, {vocab})"
            )));
        }
    }
    Ok((rows, vocab))
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Masked mean of `-log softmax(logits)[target]`, max-subtracted. Leading
/// dims of `logits` are flattened into rows.
///
/// Row losses are summed in ascending order so the result does not depend on
/// the order of rows.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<CrossEntropy<T>> {
    let (_, vocab) = check(logits, targets, mask)?;
    let mut losses: Vec<T> = logits
        .data()
        .chunks(vocab)
        .zip(targets.iter().zip(mask))
        .filter(|(_, (_, &m))| m)
        .map(|(row, (&t, _))| log_sum_exp(row) - row[t])
        .collect();
    let count = losses.len();
    if count == 0 {
        return Ok(CrossEntropy {
            loss: T::zero(),
            count,
            all_masked: true,
        });
    }
    losses.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let loss = losses.into_iter().sum::<T>() / T::of(count as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "softmax_cross_entropy",
        });
    }
    Ok(CrossEntropy {
        loss,
        count,
        all_masked: false,
    })
}

/// Gradient w.r.t. logits, scaled by the upstream scalar gradient.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
    grad_out: T,
) -> Tensor<T> {
    let vocab = logits.dim(logits.rank() - 1);
    let count = mask.iter().filter(|&&m| m).count();
    let mut g = vec![T::zero(); logits.numel()];
    if count == 0 {
        return Tensor::from_parts(logits.shape().to_vec(), g);
    }
    let scale = grad_out / T::of(count as f64);
    for ((row, dst), (&t, &m)) in logits
        .data()
        .chunks(vocab)
        .zip(g.chunks_mut(vocab))
        .zip(targets.iter().zip(mask))
    {
        if !m {
            continue;
        }
        let lse = log_sum_exp(row);
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - lse).exp() * scale;
        }
        dst[t] -= scale;
    }
    Tensor::from_parts(logits.shape().to_vec(), g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_v() {
        let logits = Tensor::<f64>::zeros(&[3, 4]);
        let ce = softmax_cross_entropy(&logits, &[0, 1, 3], &[true, true, true]).unwrap();
        assert!((ce.loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(ce.count, 3);
    }

    #[test]
    fn saturated_margin() {
        let mut logits = Tensor::<f64>::zeros(&[1, 5]);
        logits.data_mut()[2] = 1000.0;
        let ce = softmax_cross_entropy(&logits, &[2], &[true]).unwrap();
        assert!(ce.loss < 1e-6 && ce.loss >= 0.0);
    }

    #[test]
    fn all_masked_is_zero_with_flag() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        let ce = softmax_cross_entropy(&logits, &[0, 9], &[false, false]).unwrap();
        assert_eq!(ce.loss, 0.0);
        assert!(ce.all_masked);
    }

    #[test]
    fn out_of_range_target() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        let err = softmax_cross_entropy(&logits, &[0, 3], &[true, true]).unwrap_err();
        assert!(err.to_string().contains("outside vocabulary"));
    }
}
