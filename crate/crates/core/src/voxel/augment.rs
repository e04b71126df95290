use rand::Rng;

use super::{GridDims, LabelGrid, OccupancyGrid};
use crate::error::Result;
use crate::rng::{keyed, tags};

/// Horizontal mirror choice for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlipPlan {
    pub flip_x: bool,
    pub flip_y: bool,
}

impl FlipPlan {
    /// Independent fair coins per axis, drawn from a stream keyed by
    /// `(seed, epoch, sample)` so the result does not depend on load order.
    pub fn sample(seed: u64, epoch: u64, sample: u64) -> Self {
        let mut rng = keyed(tags::FLIP, &[seed, epoch, sample]);
        FlipPlan {
            flip_x: rng.gen_bool(0.5),
            flip_y: rng.gen_bool(0.5),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip_x && !self.flip_y
    }
}

#[inline]
fn source_index(d: GridDims, v: usize, plan: FlipPlan) -> usize {
    let (x, y, z) = d.coords(v);
    let sx = if plan.flip_x { d.nx - 1 - x } else { x };
    let sy = if plan.flip_y { d.ny - 1 - y } else { y };
    d.index(sx, sy, z)
}

pub fn flip_labels(labels: &LabelGrid, plan: FlipPlan) -> LabelGrid {
    if plan.is_identity() {
        return labels.clone();
    }
    let d = labels.dims();
    let src = labels.labels();
    let out = (0..d.num_voxels())
        .map(|v| src[source_index(d, v, plan)])
        .collect();
    LabelGrid::from_vec(d, out).expect("same dims")
}

pub fn flip_occupancy(occ: &OccupancyGrid, plan: FlipPlan) -> OccupancyGrid {
    if plan.is_identity() {
        return occ.clone();
    }
    let d = occ.dims();
    let mut out = OccupancyGrid::empty(d);
    for v in 0..d.num_voxels() {
        if occ.get_linear(source_index(d, v, plan)) {
            out.set_linear(v, true);
        }
    }
    out
}

/// Mirror an input/target pair along the selected horizontal axes.
pub fn flip_xy(
    occ: &OccupancyGrid,
    labels: &LabelGrid,
    flip_x: bool,
    flip_y: bool,
) -> Result<(OccupancyGrid, LabelGrid)> {
    occ.dims().check_same(&labels.dims(), "flip_xy")?;
    let plan = FlipPlan { flip_x, flip_y };
    Ok((flip_occupancy(occ, plan), flip_labels(labels, plan)))
}
