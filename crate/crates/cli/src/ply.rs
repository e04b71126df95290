use std::io::{self, Write};

use lmscnet::voxel::{ClassTable, LabelGrid, FREE, UNKNOWN};

/// Write one colored vertex per solid voxel, placed at the voxel center
/// `origin + (i + 0.5) * voxel_size`. Returns the vertex count.
pub fn write_ply(
    labels: &LabelGrid,
    classes: &ClassTable,
    origin: [f64; 3],
    sink: &mut dyn Write,
) -> io::Result<usize> {
    let dims = labels.dims();
    let solid: Vec<usize> = (0..dims.num_voxels())
        .filter(|&v| !matches!(labels.labels()[v], FREE | UNKNOWN))
        .collect();
    writeln!(sink, "ply")?;
    writeln!(sink, "format ascii 1.0")?;
    writeln!(sink, "comment grid {dims} voxel {}", dims.voxel_size)?;
    writeln!(sink, "element vertex {}", solid.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(sink, "property double {axis}")?;
    }
    for channel in ["red", "green", "blue"] {
        writeln!(sink, "property uchar {channel}")?;
    }
    writeln!(sink, "end_header")?;
    for &v in &solid {
        let (x, y, z) = dims.coords(v);
        let c = [x, y, z];
        let p: [f64; 3] =
            std::array::from_fn(|a| origin[a] + (c[a] as f64 + 0.5) * dims.voxel_size);
        let [r, g, b] = classes.color(labels.labels()[v]);
        writeln!(sink, "{} {} {} {r} {g} {b}", p[0], p[1], p[2])?;
    }
    Ok(solid.len())
}
