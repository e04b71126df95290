use super::{Op, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Class-weighted softmax cross-entropy averaged over supervised voxels.
///
/// `logits` is `[B, C, ...spatial]`; `labels` and `mask` hold one entry per
/// `(b, spatial)` position in row-major order. Positions with `mask == false`
/// contribute to neither the value nor the gradient. With no supervised
/// position at all the loss is exactly zero.
pub fn weighted_masked_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u16],
    weights: &[T],
    mask: &[bool],
) -> Result<Tensor<T>> {
    const OP: &str = "weighted_masked_cross_entropy";
    if logits.ndim() < 2 {
        return Err(Error::dim(OP, "logits rank", 2, logits.ndim()));
    }
    let batch = logits.shape()[0];
    let classes = logits.shape()[1];
    let spatial: usize = logits.shape()[2..].iter().product();
    let positions = batch * spatial;
    if labels.len() != positions {
        return Err(Error::dim(OP, "label count", positions, labels.len()));
    }
    if mask.len() != positions {
        return Err(Error::dim(OP, "mask count", positions, mask.len()));
    }
    if weights.len() != classes {
        return Err(Error::dim(OP, "class weights", classes, weights.len()));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > T::zero())) {
        return Err(Error::Data(format!(
            "class weight {w} is not finite and positive"
        )));
    }

    let x = logits.data();
    let supervised = mask.iter().filter(|&&m| m).count();
    let mut dlogits = vec![T::zero(); x.len()];
    let mut total = 0.0f64;
    if supervised > 0 {
        let norm = 1.0 / supervised as f64;
        let mut probs = vec![0.0f64; classes];
        for (pos, (&label, &keep)) in labels.iter().zip(mask).enumerate() {
            if !keep {
                continue;
            }
            let label = label as usize;
            if label >= classes {
                return Err(Error::Data(format!(
                    "label {label} at voxel {pos} outside [0, {}]",
                    classes - 1
                )));
            }
            let (b, s) = (pos / spatial, pos % spatial);
            let base = b * classes * spatial + s;
            let at = |c: usize| x[base + c * spatial].as_f64();
            let max = (0..classes).map(at).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (c, p) in probs.iter_mut().enumerate() {
                *p = (at(c) - max).exp();
                denom += *p;
            }
            let log_denom = denom.ln();
            let w = weights[label].as_f64();
            total += w * (log_denom - (at(label) - max));
            for (c, p) in probs.iter().enumerate() {
                let target = if c == label { 1.0 } else { 0.0 };
                dlogits[base + c * spatial] = T::from_f64_lossy(w * norm * (p / denom - target));
            }
        }
        total *= norm;
    }
    Ok(Tensor::from_op(
        vec![T::from_f64_lossy(total)],
        Vec::new(),
        Op::CrossEntropy { dlogits },
        vec![logits.clone()],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class_is_ln2() {
        let logits = Tensor::<f64>::new(vec![0.0, 0.0], &[1, 2, 1]).unwrap();
        let loss = weighted_masked_cross_entropy(&logits, &[0], &[1.0, 1.0], &[true]).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_is_zero_with_zero_gradient() {
        let logits = Tensor::<f64>::param(vec![1.0, -2.0, 0.5, 3.0, 0.1, 0.2], &[1, 3, 2]).unwrap();
        let loss =
            weighted_masked_cross_entropy(&logits, &[1, 2], &[1.0; 3], &[false, false]).unwrap();
        assert_eq!(loss.item(), 0.0);
        loss.backward().unwrap();
        assert!(logits.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn out_of_range_label_reports_voxel() {
        let logits = Tensor::<f64>::zeros(&[1, 2, 3]);
        let err = weighted_masked_cross_entropy(&logits, &[0, 5, 0], &[1.0, 1.0], &[true; 3])
            .unwrap_err();
        assert!(err.to_string().contains("voxel 1"), "{err}");
        // The same label is fine when masked out.
        assert!(weighted_masked_cross_entropy(
            &logits,
            &[0, 5, 0],
            &[1.0, 1.0],
            &[true, false, true]
        )
        .is_ok());
    }

    #[test]
    fn rejects_non_positive_weights() {
        let logits = Tensor::<f64>::zeros(&[1, 2, 1]);
        assert!(weighted_masked_cross_entropy(&logits, &[0], &[1.0, 0.0], &[true]).is_err());
        assert!(weighted_masked_cross_entropy(&logits, &[0], &[1.0, f64::NAN], &[true]).is_err());
    }
}
