use super::{LabelGrid, UNKNOWN};
use crate::error::{Error, Result};

/// Downscale labels by majority vote over `factor`^3 blocks.
///
/// Unknown voxels do not vote; a block with no known voxel stays unknown.
/// Ties go to the smallest class id. `factor == 1` is the identity.
pub fn majority_pool(labels: &LabelGrid, factor: usize) -> Result<LabelGrid> {
    let src = labels.dims();
    let dst = src.downscaled(factor).map_err(|_| {
        Error::geometry(
            "majority_pool",
            format!("grid {src} is not divisible by factor {factor}"),
        )
    })?;
    if factor == 1 {
        return Ok(labels.clone());
    }
    let max_label = labels
        .labels()
        .iter()
        .copied()
        .filter(|&l| l != UNKNOWN)
        .max()
        .unwrap_or(0) as usize;
    let mut counts = vec![0u32; max_label + 1];
    let mut touched: Vec<u16> = Vec::with_capacity(factor * factor * factor);
    let mut out = Vec::with_capacity(dst.num_voxels());
    let data = labels.labels();
    for bx in 0..dst.nx {
        for by in 0..dst.ny {
            for bz in 0..dst.nz {
                for x in bx * factor..(bx + 1) * factor {
                    for y in by * factor..(by + 1) * factor {
                        let row = src.index(x, y, bz * factor);
                        for &l in &data[row..row + factor] {
                            if l == UNKNOWN {
                                continue;
                            }
                            if counts[l as usize] == 0 {
                                touched.push(l);
                            }
                            counts[l as usize] += 1;
                        }
                    }
                }
                let mut best = UNKNOWN;
                let mut best_count = 0;
                for &l in &touched {
                    let c = counts[l as usize];
                    if c > best_count || (c == best_count && l < best) {
                        best = l;
                        best_count = c;
                    }
                    counts[l as usize] = 0;
                }
                touched.clear();
                out.push(best);
            }
        }
    }
    LabelGrid::from_vec(dst, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{GridDims, FREE};

    fn dims2() -> GridDims {
        GridDims::new(2, 2, 2, 0.2).unwrap()
    }

    #[test]
    fn unanimous_block() {
        let g = LabelGrid::filled(dims2(), 1);
        assert_eq!(majority_pool(&g, 2).unwrap().labels(), &[1]);
    }

    #[test]
    fn five_to_three_majority() {
        let g = LabelGrid::from_vec(dims2(), vec![6, 1, 6, 1, 1, 6, 1, 1]).unwrap();
        assert_eq!(majority_pool(&g, 2).unwrap().labels(), &[1]);
    }

    #[test]
    fn unknown_does_not_vote() {
        let g = LabelGrid::from_vec(
            dims2(),
            vec![UNKNOWN, FREE, UNKNOWN, FREE, UNKNOWN, FREE, UNKNOWN, FREE],
        )
        .unwrap();
        assert_eq!(majority_pool(&g, 2).unwrap().labels(), &[FREE]);
        let g = LabelGrid::filled(dims2(), UNKNOWN);
        assert_eq!(majority_pool(&g, 2).unwrap().labels(), &[UNKNOWN]);
    }

    #[test]
    fn tie_goes_to_smallest_id() {
        let g = LabelGrid::from_vec(dims2(), vec![5, 3, 5, 3, 5, 3, 5, 3]).unwrap();
        assert_eq!(majority_pool(&g, 2).unwrap().labels(), &[3]);
    }

    #[test]
    fn indivisible_is_geometry_error() {
        let g = LabelGrid::filled(GridDims::new(4, 4, 6, 0.2).unwrap(), 0);
        assert!(matches!(majority_pool(&g, 4), Err(Error::Geometry { .. })));
        let pooled = majority_pool(&g, 2).unwrap();
        assert_eq!(pooled.dims().nz, 3);
        assert!((pooled.dims().voxel_size - 0.4).abs() < 1e-12);
    }
}
