//! Voxel grids and everything that touches them before the network does.
//!
//! Voxels are addressed `(x, y, z)` with linear index `((x * ny) + y) * nz + z`
//! (z fastest). Occupancy bitsets pack that order MSB-first per byte.

mod augment;
mod classes;
mod io;
mod manifest;
mod pointcloud;
mod pool;
pub mod synthetic;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{flip_labels, flip_occupancy, flip_xy, FlipPlan};
pub use classes::{ClassTable, LabelMap, Rgb, RAW_UNKNOWN};
pub use io::{
    encode_labels, encode_occupancy, load_labels, load_occupancy, read_label_file,
    read_occupancy_file,
};
pub use manifest::{Dataset, Manifest, Sample, SampleEntry};
pub use pointcloud::{
    decode_points, encode_points, grid_to_input, grids_to_input, subsample_layers, voxelize,
    LidarPoint, PointCloud,
};
pub use pool::majority_pool;
pub use weights::{
    class_weights, compute_class_frequencies, ClassWeights, DEFAULT_EPS, MAX_CLASS_WEIGHT,
};

/// Internal label of voxels whose ground truth was never observed.
pub const UNKNOWN: u16 = u16::MAX;
/// Internal label of empty space.
pub const FREE: u16 = 0;

/// Extent of a voxel grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Edge length of one voxel in meters.
    pub voxel_size: f64,
}

impl GridDims {
    /// Dataset grid at 0.2 m resolution.
    pub const SEMANTIC_KITTI: GridDims = GridDims {
        nx: 256,
        ny: 256,
        nz: 32,
        voxel_size: 0.2,
    };

    pub fn new(nx: usize, ny: usize, nz: usize, voxel_size: f64) -> Result<Self> {
        let dims = GridDims {
            nx,
            ny,
            nz,
            voxel_size,
        };
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Config(format!(
                "grid extents must be positive, got {dims}"
            )));
        }
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(Error::Config(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        Ok(dims)
    }

    /// Extra constraint for grids fed to the network: horizontal extents
    /// divisible by 8 so three 2x poolings stay exact.
    pub fn check_network_grid(&self) -> Result<()> {
        if !self.nx.is_multiple_of(8) || !self.ny.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "grid {self}: nx and ny must be divisible by 8"
            )));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.ny + y) * self.nz + z
    }

    #[inline]
    pub fn coords(&self, v: usize) -> (usize, usize, usize) {
        let z = v % self.nz;
        let y = (v / self.nz) % self.ny;
        let x = v / (self.nz * self.ny);
        (x, y, z)
    }

    /// Dims of this grid downscaled by `factor` along every axis.
    pub fn downscaled(&self, factor: usize) -> Result<GridDims> {
        if factor == 0
            || !self.nx.is_multiple_of(factor)
            || !self.ny.is_multiple_of(factor)
            || !self.nz.is_multiple_of(factor)
        {
            return Err(Error::Config(format!(
                "grid {self} is not divisible by factor {factor}"
            )));
        }
        Ok(GridDims {
            nx: self.nx / factor,
            ny: self.ny / factor,
            nz: self.nz / factor,
            voxel_size: self.voxel_size * factor as f64,
        })
    }

    fn check_same(&self, other: &GridDims, what: &str) -> Result<()> {
        if (self.nx, self.ny, self.nz) != (other.nx, other.ny, other.nz) {
            return Err(Error::Data(format!(
                "{what}: grid {self} does not match {other}"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for GridDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Binary occupancy over a grid, packed MSB-first.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    dims: GridDims,
    bits: Vec<u8>,
}

impl OccupancyGrid {
    pub fn empty(dims: GridDims) -> Self {
        OccupancyGrid {
            dims,
            bits: vec![0; dims.num_voxels().div_ceil(8)],
        }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get_linear(&self, v: usize) -> bool {
        self.bits[v / 8] & (0x80 >> (v % 8)) != 0
    }

    #[inline]
    pub fn set_linear(&mut self, v: usize, occupied: bool) {
        let mask = 0x80 >> (v % 8);
        if occupied {
            self.bits[v / 8] |= mask;
        } else {
            self.bits[v / 8] &= !mask;
        }
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.get_linear(self.dims.index(x, y, z))
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, occupied: bool) {
        let v = self.dims.index(x, y, z);
        self.set_linear(v, occupied);
    }

    pub fn count(&self) -> usize {
        // Padding bits past the last voxel are always zero.
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn density(&self) -> f64 {
        self.count() as f64 / self.dims.num_voxels() as f64
    }
}

/// One semantic label per voxel (internal ids, [`UNKNOWN`] for unobserved).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGrid {
    dims: GridDims,
    labels: Vec<u16>,
}

impl LabelGrid {
    pub fn filled(dims: GridDims, label: u16) -> Self {
        LabelGrid {
            dims,
            labels: vec![label; dims.num_voxels()],
        }
    }

    pub fn from_vec(dims: GridDims, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != dims.num_voxels() {
            return Err(Error::Data(format!(
                "label count {} does not match grid {dims} ({} voxels)",
                labels.len(),
                dims.num_voxels()
            )));
        }
        Ok(LabelGrid { dims, labels })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[self.dims.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u16) {
        let v = self.dims.index(x, y, z);
        self.labels[v] = label;
    }

    pub fn known_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != UNKNOWN).count()
    }

    /// Labels that are neither free nor unknown.
    pub fn occupied_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l != UNKNOWN && l != FREE)
            .count()
    }

    /// Every label is unknown or an internal id in `0..=num_semantic`.
    pub fn validate(&self, num_semantic: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .position(|&l| l != UNKNOWN && l as usize > num_semantic)
        {
            Some(v) => Err(Error::Data(format!(
                "label {} at voxel {v} outside [0, {num_semantic}]",
                self.labels[v]
            ))),
            None => Ok(()),
        }
    }
}
