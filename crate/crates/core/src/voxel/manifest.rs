use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{read_label_file, read_occupancy_file};
use super::pointcloud::{decode_points, PointCloud};
use super::{ClassTable, GridDims, LabelGrid, LabelMap, OccupancyGrid};
use crate::error::{Error, Result};

/// Dataset description stored as `manifest.toml` next to the sample files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub grid: GridSection,
    pub classes: ClassSection,
    #[serde(default)]
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSection {
    #[serde(flatten)]
    pub dims: GridDims,
    /// World position of the grid corner, used when voxelizing point files.
    #[serde(default)]
    pub origin: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSection {
    pub names: Vec<String>,
    /// `[raw, internal]` pairs.
    pub label_map: Vec<[u16; 2]>,
}

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub occupancy: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<PathBuf>,
}

impl Manifest {
    pub fn new(dims: GridDims, origin: [f64; 3], classes: &ClassTable, map: &LabelMap) -> Self {
        Manifest {
            grid: GridSection { dims, origin },
            classes: ClassSection {
                names: classes.semantic_names().to_vec(),
                label_map: map.pairs().into_iter().map(|(r, i)| [r, i]).collect(),
            },
            samples: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn class_table(&self) -> Result<ClassTable> {
        ClassTable::new(self.classes.names.iter().cloned())
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        let map = LabelMap::new(self.classes.label_map.iter().map(|&[r, i]| (r, i)))?;
        map.check_range(self.classes.names.len())?;
        Ok(map)
    }
}

/// One loaded sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub occupancy: OccupancyGrid,
    pub labels: LabelGrid,
    pub points: Option<PointCloud>,
}

/// A manifest resolved against its directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    classes: ClassTable,
    map: LabelMap,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path)
            .map_err(|e| Error::io(format!("reading manifest {}", manifest_path.display()), e))?;
        let manifest = Manifest::parse(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", manifest_path.display())),
            other => other,
        })?;
        let root = manifest_path
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Self::from_manifest(root, manifest)
    }

    pub fn from_manifest(root: PathBuf, manifest: Manifest) -> Result<Self> {
        let dims = manifest.grid.dims;
        GridDims::new(dims.nx, dims.ny, dims.nz, dims.voxel_size)?;
        dims.check_network_grid()?;
        let classes = manifest.class_table()?;
        let map = manifest.label_map()?;
        Ok(Dataset {
            root,
            manifest,
            classes,
            map,
        })
    }

    pub fn dims(&self) -> GridDims {
        self.manifest.grid.dims
    }

    pub fn origin(&self) -> [f64; 3] {
        self.manifest.grid.origin
    }

    pub fn classes(&self) -> &ClassTable {
        &self.classes
    }

    pub fn label_map(&self) -> &LabelMap {
        &self.map
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let entry = self.manifest.samples.get(index).ok_or_else(|| {
            Error::Data(format!(
                "sample {index} out of range ({} samples)",
                self.len()
            ))
        })?;
        let dims = self.dims();
        let occupancy = read_occupancy_file(&self.resolve(&entry.occupancy), dims)?;
        let labels = read_label_file(&self.resolve(&entry.labels), dims, &self.map)?;
        let points = match &entry.points {
            Some(p) => {
                let path = self.resolve(p);
                let bytes = std::fs::read(&path)
                    .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                Some(decode_points(&bytes).map_err(|e| match e {
                    Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
                    other => other,
                })?)
            }
            None => None,
        };
        Ok(Sample {
            occupancy,
            labels,
            points,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}
