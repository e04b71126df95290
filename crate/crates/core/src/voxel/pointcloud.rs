use super::{GridDims, OccupancyGrid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// One LiDAR return in meters, tagged with the laser ring that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub ring: u16,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Keep only rings whose index is a multiple of `keep_every`.
/// `keep_every` of 0 is treated as 1.
pub fn subsample_layers(pc: &PointCloud, keep_every: usize) -> PointCloud {
    let k = keep_every.max(1);
    PointCloud {
        points: pc
            .points
            .iter()
            .filter(|p| (p.ring as usize).is_multiple_of(k))
            .copied()
            .collect(),
    }
}

/// Mark the voxel containing each in-bounds point.
pub fn voxelize(pc: &PointCloud, origin: [f64; 3], dims: GridDims) -> OccupancyGrid {
    let mut grid = OccupancyGrid::empty(dims);
    let extent = [dims.nx, dims.ny, dims.nz];
    'points: for p in &pc.points {
        let mut idx = [0usize; 3];
        for (a, c) in [p.x, p.y, p.z].into_iter().enumerate() {
            let f = ((c as f64 - origin[a]) / dims.voxel_size).floor();
            if !(f >= 0.0 && f < extent[a] as f64) {
                continue 'points;
            }
            idx[a] = f as usize;
        }
        grid.set(idx[0], idx[1], idx[2], true);
    }
    grid
}

/// Occupancy as a `[1, nz, nx, ny]` tensor: height slices become channels.
pub fn grid_to_input<T: Scalar>(occ: &OccupancyGrid) -> Tensor<T> {
    grids_to_input(&[occ]).expect("single grid")
}

/// Stack grids of equal dims into a `[B, nz, nx, ny]` batch.
pub fn grids_to_input<T: Scalar>(grids: &[&OccupancyGrid]) -> Result<Tensor<T>> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Data("cannot build an input batch from zero grids".into()))?;
    let d = first.dims();
    let plane = d.nx * d.ny;
    let mut data = vec![T::zero(); grids.len() * d.num_voxels()];
    for (b, g) in grids.iter().enumerate() {
        d.check_same(&g.dims(), "grids_to_input")?;
        let base = b * d.num_voxels();
        for v in 0..d.num_voxels() {
            if g.get_linear(v) {
                let (x, y, z) = d.coords(v);
                data[base + z * plane + x * d.ny + y] = T::one();
            }
        }
    }
    Tensor::new(data, &[grids.len(), d.nz, d.nx, d.ny])
}

/// Points as consecutive little-endian f32 quadruples `(x, y, z, ring)`.
pub fn encode_points(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * 16);
    for p in &pc.points {
        for v in [p.x, p.y, p.z, p.ring as f32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_points(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::Format(format!(
            "point stream length {} is not a multiple of 16 bytes",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, c) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes([c[4 * k], c[4 * k + 1], c[4 * k + 2], c[4 * k + 3]]);
        let ring = f(3);
        if !(ring >= 0.0 && ring <= u16::MAX as f32 && ring.fract() == 0.0) {
            return Err(Error::Format(format!(
                "point {i}: invalid ring value {ring}"
            )));
        }
        points.push(LidarPoint {
            x: f(0),
            y: f(1),
            z: f(2),
            ring: ring as u16,
        });
    }
    Ok(PointCloud { points })
}
