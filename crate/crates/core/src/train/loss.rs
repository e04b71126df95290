use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::LEVELS;
use crate::tensor::{self, Tensor};
use crate::voxel::{majority_pool, LabelGrid, UNKNOWN};
use crate::Scalar;

/// Targets of one level for a batch: labels with unknown replaced by 0 and
/// the matching supervision mask, both in logits order.
pub fn level_targets(gt: &[&LabelGrid], level: usize) -> Result<(Vec<u16>, Vec<bool>, [usize; 3])> {
    let mut labels = Vec::new();
    let mut mask = Vec::new();
    let mut dims = None;
    for g in gt {
        let pooled = majority_pool(g, 1 << level)?;
        let d = pooled.dims();
        dims.get_or_insert([d.nx, d.ny, d.nz]);
        labels.extend(
            pooled
                .labels()
                .iter()
                .map(|&l| if l == UNKNOWN { 0 } else { l }),
        );
        mask.extend(pooled.labels().iter().map(|&l| l != UNKNOWN));
    }
    let dims = dims.ok_or_else(|| Error::Data("empty batch".into()))?;
    Ok((labels, mask, dims))
}

/// Weighted cross-entropy of one level against majority-pooled ground truth.
///
/// `logits` is `[B, N + 1, x, y, z]` at level `level`; `gt` holds the
/// full-resolution grids of the batch. Unknown voxels are not supervised.
pub fn level_loss<T: Scalar>(
    logits: &Tensor<T>,
    gt: &[&LabelGrid],
    weights: &[T],
    level: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "level_loss";
    if logits.ndim() != 5 {
        return Err(Error::dim(OP, "logits rank", 5, logits.ndim()));
    }
    if logits.shape()[0] != gt.len() {
        return Err(Error::dim(OP, "batch", logits.shape()[0], gt.len()));
    }
    let (labels, mask, dims) = level_targets(gt, level)?;
    for (axis, (&want, got)) in ["x", "y", "z"]
        .iter()
        .zip(logits.shape()[2..].iter().zip(dims))
    {
        if want != got {
            return Err(Error::dim(
                OP,
                format!("pooled ground truth {axis}"),
                want,
                got,
            ));
        }
    }
    tensor::weighted_masked_cross_entropy(logits, &labels, weights, &mask)
}

/// `sum_l alpha_l * L_l` over the levels with a positive weight.
///
/// Every such level must be present in `losses`; levels with zero weight are
/// left out of the graph entirely.
pub fn total_loss<T: Scalar>(
    losses: &BTreeMap<usize, Tensor<T>>,
    alpha: [f64; LEVELS],
) -> Result<Tensor<T>> {
    let mut acc: Option<Tensor<T>> = None;
    for (l, &a) in alpha.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let loss = losses
            .get(&l)
            .ok_or_else(|| Error::Config(format!("level {l} has weight {a} but no loss")))?;
        let term = if a == 1.0 {
            loss.clone()
        } else {
            tensor::scale(loss, T::from_f64_lossy(a))
        };
        acc = Some(match acc {
            Some(s) => tensor::add(&s, &term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Config("all level weights are zero".into()))
}
