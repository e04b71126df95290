use serde::{Deserialize, Serialize};

use super::{LabelGrid, UNKNOWN};

pub const DEFAULT_EPS: f64 = 0.001;
/// Weight given to classes too rare for the log formula.
pub const MAX_CLASS_WEIGHT: f64 = 10.0;

/// Per-class voxel counts over a set of grids, unknown excluded.
///
/// Ids at or above `num_classes` are ignored.
pub fn compute_class_frequencies<'a>(
    grids: impl IntoIterator<Item = &'a LabelGrid>,
    num_classes: usize,
) -> Vec<u64> {
    let mut freq = vec![0u64; num_classes];
    for g in grids {
        for &l in g.labels() {
            if l != UNKNOWN {
                if let Some(f) = freq.get_mut(l as usize) {
                    *f += 1;
                }
            }
        }
    }
    freq
}

/// `w_c = 1 / ln(f_c + eps)`, capped at [`MAX_CLASS_WEIGHT`].
///
/// Counts with `f_c + eps <= 1` (non-positive log) get the cap directly.
pub fn class_weights(freq: &[f64], eps: f64) -> Vec<f64> {
    freq.iter()
        .map(|&f| {
            let l = (f + eps).ln();
            if l <= 0.0 {
                MAX_CLASS_WEIGHT
            } else {
                (1.0 / l).min(MAX_CLASS_WEIGHT)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub freq: Vec<u64>,
    pub eps: f64,
    pub w: Vec<f64>,
}

impl ClassWeights {
    pub fn from_frequencies(freq: Vec<u64>, eps: f64) -> Self {
        let f: Vec<f64> = freq.iter().map(|&c| c as f64).collect();
        let w = class_weights(&f, eps);
        ClassWeights { freq, eps, w }
    }

    pub fn from_grids<'a>(
        grids: impl IntoIterator<Item = &'a LabelGrid>,
        num_classes: usize,
    ) -> Self {
        Self::from_frequencies(compute_class_frequencies(grids, num_classes), DEFAULT_EPS)
    }

    /// All-ones weights (plain masked cross-entropy).
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights {
            freq: vec![0; num_classes],
            eps: DEFAULT_EPS,
            w: vec![1.0; num_classes],
        }
    }
}
