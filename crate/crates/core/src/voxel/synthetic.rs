//! Procedural street scenes in the dataset's byte formats.
//!
//! Each scene is a flat ground plane (a road strip flanked by slightly raised
//! terrain) with box buildings beside the road and box cars on it. The input
//! is a single simulated 64-ring scan from a sensor at the near grid edge,
//! with random ray dropping. Ground truth covers every voxel the scan hit or
//! that is in line of sight of one of several poses along the road; the rest
//! is unknown.

use std::path::Path;

use rand::Rng;

use super::io::{encode_labels, encode_occupancy};
use super::pointcloud::{encode_points, voxelize, LidarPoint, PointCloud};
use super::{
    ClassTable, GridDims, LabelGrid, LabelMap, Manifest, OccupancyGrid, SampleEntry, FREE, UNKNOWN,
};
use crate::error::{Error, Result};
use crate::rng::{keyed, tags};

/// Sensor and scene knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanParams {
    pub rings: usize,
    /// Elevation of ring 0 and of the last ring, degrees.
    pub elevation_range: (f64, f64),
    /// Azimuth samples across the forward half plane.
    pub azimuth_steps: usize,
    pub drop_prob: f64,
    /// Sensor height above the ground surface, meters.
    pub sensor_height: f64,
    /// Number of poses used for the ground-truth visibility mask.
    pub gt_poses: usize,
}

impl Default for ScanParams {
    fn default() -> Self {
        ScanParams {
            rings: 64,
            elevation_range: (2.0, -24.8),
            azimuth_steps: 1024,
            drop_prob: 0.1,
            sensor_height: 1.7,
            gt_poses: 6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub occupancy: OccupancyGrid,
    pub labels: LabelGrid,
    pub points: PointCloud,
}

struct Ids {
    road: u16,
    terrain: u16,
    building: u16,
    car: u16,
}

impl Ids {
    fn lookup(classes: &ClassTable) -> Result<Self> {
        let get = |n: &str| {
            classes
                .id_of(n)
                .ok_or_else(|| Error::Config(format!("synthetic scenes need a {n:?} class")))
        };
        Ok(Ids {
            road: get("road")?,
            terrain: get("terrain")?,
            building: get("building")?,
            car: get("car")?,
        })
    }
}

/// World position of the grid corner: the sensor sits at the world origin,
/// centered in y, on the near x face of the grid.
pub fn grid_origin(dims: GridDims, params: &ScanParams) -> [f64; 3] {
    let below = (params.sensor_height / dims.voxel_size).round() + 1.0;
    [
        0.0,
        -(dims.ny as f64) * dims.voxel_size / 2.0,
        -below * dims.voxel_size,
    ]
}

fn meters(m: f64, dims: GridDims) -> usize {
    ((m / dims.voxel_size).round() as usize).max(1)
}

fn fill_box(g: &mut LabelGrid, lo: [usize; 3], hi: [usize; 3], label: u16) {
    let d = g.dims();
    for x in lo[0]..hi[0].min(d.nx) {
        for y in lo[1]..hi[1].min(d.ny) {
            for z in lo[2]..hi[2].min(d.nz) {
                g.set(x, y, z, label);
            }
        }
    }
}

fn build_world(dims: GridDims, ids: &Ids, rng: &mut impl Rng) -> LabelGrid {
    let mut g = LabelGrid::filled(dims, FREE);
    let cy = dims.ny / 2;
    let road_half = (dims.ny / 5).max(2);
    let (road_lo, road_hi) = (cy.saturating_sub(road_half), (cy + road_half).min(dims.ny));
    let raised = if dims.nz >= 4 { 2 } else { 1 };
    for x in 0..dims.nx {
        for y in 0..dims.ny {
            if (road_lo..road_hi).contains(&y) {
                g.set(x, y, 0, ids.road);
            } else {
                for z in 0..raised {
                    g.set(x, y, z, ids.terrain);
                }
            }
        }
    }

    let area_scale = ((dims.nx * dims.ny) as f64 / 4096.0).max(1.0);
    let n_buildings = (rng.gen_range(1..=3) as f64 * area_scale.sqrt()).round() as usize;
    for _ in 0..n_buildings {
        let sx = rng
            .gen_range(meters(1.6, dims)..=meters(4.0, dims))
            .min(dims.nx);
        let sy = rng.gen_range(meters(1.2, dims)..=meters(3.0, dims));
        let x0 = rng.gen_range(0..=dims.nx - sx);
        let (y0, y1) = if rng.gen_bool(0.5) && road_lo > 1 {
            let y1 = rng.gen_range(1..road_lo);
            (y1.saturating_sub(sy), y1)
        } else if road_hi + 1 < dims.ny {
            let y0 = rng.gen_range(road_hi + 1..dims.ny);
            (y0, y0 + sy)
        } else {
            continue;
        };
        fill_box(&mut g, [x0, y0, 0], [x0 + sx, y1, dims.nz], ids.building);
    }

    let car_len = meters(4.0, dims).min(dims.nx);
    let car_w = meters(1.8, dims).min(road_half.max(1));
    let car_h = meters(1.4, dims).min(dims.nz.saturating_sub(2).max(1));
    let n_cars = (rng.gen_range(1..=3) as f64 * area_scale.sqrt()).round() as usize;
    for _ in 0..n_cars {
        let x0 = rng.gen_range(0..=dims.nx - car_len);
        let lane = if rng.gen_bool(0.5) { road_lo } else { cy };
        let y0 = lane + rng.gen_range(0..=(road_half - car_w.min(road_half)));
        fill_box(
            &mut g,
            [x0, y0, 1],
            [x0 + car_len, y0 + car_w, 1 + car_h],
            ids.car,
        );
    }
    g
}

/// Visit voxels pierced by the ray `o + t d`, t in `[0, t_max]`, in grid
/// units. The callback gets `(linear index, t_in, t_out)` and returns false
/// to stop.
fn traverse(
    dims: GridDims,
    o: [f64; 3],
    d: [f64; 3],
    t_max: f64,
    mut f: impl FnMut(usize, f64, f64) -> bool,
) {
    let n = [dims.nx as f64, dims.ny as f64, dims.nz as f64];
    let (mut t0, mut t1) = (0.0f64, t_max);
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < 0.0 || o[a] >= n[a] {
                return;
            }
        } else {
            let (ta, tb) = ((0.0 - o[a]) / d[a], (n[a] - o[a]) / d[a]);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 >= t1 {
        return;
    }
    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    let mut next = [f64::INFINITY; 3];
    let mut delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let p = o[a] + d[a] * t0;
        idx[a] = (p.floor() as i64).clamp(0, n[a] as i64 - 1);
        if d[a] > 1e-12 {
            step[a] = 1;
            next[a] = (idx[a] as f64 + 1.0 - o[a]) / d[a];
            delta[a] = 1.0 / d[a];
        } else if d[a] < -1e-12 {
            step[a] = -1;
            next[a] = (idx[a] as f64 - o[a]) / d[a];
            delta[a] = -1.0 / d[a];
        }
    }
    let mut t = t0;
    loop {
        let a = if next[0] <= next[1] && next[0] <= next[2] {
            0
        } else if next[1] <= next[2] {
            1
        } else {
            2
        };
        let t_out = next[a].min(t1);
        let v = dims.index(idx[0] as usize, idx[1] as usize, idx[2] as usize);
        if !f(v, t, t_out) || next[a] >= t1 {
            return;
        }
        t = next[a];
        idx[a] += step[a];
        if idx[a] < 0 || idx[a] >= n[a] as i64 {
            return;
        }
        next[a] += delta[a];
    }
}

fn scan(
    world: &LabelGrid,
    origin: [f64; 3],
    params: &ScanParams,
    rng: &mut impl Rng,
) -> PointCloud {
    let dims = world.dims();
    let vs = dims.voxel_size;
    let sensor = [-origin[0] / vs, -origin[1] / vs, -origin[2] / vs];
    let range = (dims.nx.max(dims.ny).max(dims.nz) as f64) * 2.0;
    let (e0, e1) = params.elevation_range;
    let mut points = Vec::new();
    for ring in 0..params.rings {
        let elev = if params.rings > 1 {
            e0 + (e1 - e0) * ring as f64 / (params.rings - 1) as f64
        } else {
            e0
        }
        .to_radians();
        for k in 0..params.azimuth_steps {
            let az = (-90.0 + 180.0 * (k as f64 + 0.5) / params.azimuth_steps as f64).to_radians();
            if rng.gen_bool(params.drop_prob) {
                continue;
            }
            let dir = [elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()];
            let mut hit = None;
            traverse(dims, sensor, dir, range, |v, t_in, t_out| {
                if world.labels()[v] != FREE {
                    hit = Some((v, 0.5 * (t_in + t_out)));
                    false
                } else {
                    true
                }
            });
            let Some((v, t)) = hit else { continue };
            let p = LidarPoint {
                x: ((sensor[0] + dir[0] * t) * vs + origin[0]) as f32,
                y: ((sensor[1] + dir[1] * t) * vs + origin[1]) as f32,
                z: ((sensor[2] + dir[2] * t) * vs + origin[2]) as f32,
                ring: ring as u16,
            };
            // Keep only points that voxelize back to the voxel they hit.
            let single = voxelize(&PointCloud::new(vec![p]), origin, dims);
            if single.count() == 1 && single.get_linear(v) {
                points.push(p);
            }
        }
    }
    PointCloud::new(points)
}

/// Walk from `p` to `c`, recording free voxels passed on the way. True if
/// the walk reaches voxel `v` before any solid voxel.
fn sight_line(
    dims: GridDims,
    labels: &[u16],
    p: [f64; 3],
    c: [f64; 3],
    v: usize,
    path: &mut Vec<usize>,
) -> bool {
    let diff = [c[0] - p[0], c[1] - p[1], c[2] - p[2]];
    let len = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
    let dir = [diff[0] / len, diff[1] / len, diff[2] / len];
    let mut reached = false;
    path.clear();
    traverse(dims, p, dir, len + 1e-9, |u, _, _| {
        if u == v {
            reached = true;
            return false;
        }
        if labels[u] != FREE {
            return false;
        }
        path.push(u);
        true
    });
    reached
}

/// Replace voxels that no pose can see, and that the scan did not hit, with
/// unknown.
fn mask_unseen(world: &LabelGrid, poses: &[[f64; 3]], scanned: &OccupancyGrid) -> LabelGrid {
    let dims = world.dims();
    let labels = world.labels();
    let mut seen: Vec<bool> = (0..dims.num_voxels())
        .map(|v| scanned.get_linear(v))
        .collect();
    let mut path = Vec::new();
    for v in 0..dims.num_voxels() {
        if seen[v] {
            continue;
        }
        let (x, y, z) = dims.coords(v);
        let lo = [x as f64, y as f64, z as f64];
        'poses: for p in poses {
            // Aim at the centers of the faces turned toward the pose, so rays
            // grazing flat ground do not clip the neighbouring voxel.
            for a in 0..3 {
                let face = if p[a] < lo[a] {
                    lo[a] + 1e-3
                } else if p[a] > lo[a] + 1.0 {
                    lo[a] + 1.0 - 1e-3
                } else {
                    continue;
                };
                let mut c = [lo[0] + 0.5, lo[1] + 0.5, lo[2] + 0.5];
                c[a] = face;
                if sight_line(dims, labels, *p, c, v, &mut path) {
                    seen[v] = true;
                    for &u in &path {
                        seen[u] = true;
                    }
                    break 'poses;
                }
            }
            if (0..3).all(|a| p[a] >= lo[a] && p[a] <= lo[a] + 1.0) {
                seen[v] = true;
                break;
            }
        }
    }
    let out = labels
        .iter()
        .zip(&seen)
        .map(|(&l, &s)| if s { l } else { UNKNOWN })
        .collect();
    LabelGrid::from_vec(dims, out).expect("same dims")
}

/// Generate scene `index` of the stream identified by `seed`.
pub fn generate_scene(
    dims: GridDims,
    classes: &ClassTable,
    params: &ScanParams,
    seed: u64,
    index: u64,
) -> Result<SyntheticScene> {
    let ids = Ids::lookup(classes)?;
    let mut rng = keyed(tags::SCENE, &[seed, index]);
    let world = build_world(dims, &ids, &mut rng);
    let origin = grid_origin(dims, params);
    let points = scan(&world, origin, params, &mut rng);
    let occupancy = voxelize(&points, origin, dims);
    let vs = dims.voxel_size;
    // Poses walk down the road, alternating between the two lanes.
    let n = params.gt_poses.max(1);
    let lane = (dims.ny / 10) as f64;
    let poses: Vec<[f64; 3]> = (0..n)
        .map(|k| {
            let x = dims.nx as f64 * k as f64 / n as f64;
            let dy = if k % 2 == 0 { 0.0 } else { lane };
            [x - origin[0] / vs, -origin[1] / vs - dy, -origin[2] / vs]
        })
        .collect();
    let labels = mask_unseen(&world, &poses, &occupancy);
    Ok(SyntheticScene {
        occupancy,
        labels,
        points,
    })
}

/// Write `count` scenes plus `manifest.toml` into `out_dir`.
pub fn write_dataset(
    out_dir: &Path,
    count: usize,
    dims: GridDims,
    classes: &ClassTable,
    params: &ScanParams,
    seed: u64,
) -> Result<Manifest> {
    let map: LabelMap = classes.kitti_label_map();
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut manifest = Manifest::new(dims, grid_origin(dims, params), classes, &map);
    let write = |name: &str, bytes: &[u8]| {
        let p = out_dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    };
    for i in 0..count {
        let scene = generate_scene(dims, classes, params, seed, i as u64)?;
        let stem = format!("{i:06}");
        write(&format!("{stem}.bin"), &encode_occupancy(&scene.occupancy))?;
        write(
            &format!("{stem}.label"),
            &encode_labels(&scene.labels, &map),
        )?;
        write(&format!("{stem}.points"), &encode_points(&scene.points))?;
        manifest.samples.push(SampleEntry {
            occupancy: format!("{stem}.bin").into(),
            labels: format!("{stem}.label").into(),
            points: Some(format!("{stem}.points").into()),
        });
    }
    write("manifest.toml", manifest.to_toml().as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traverse_axis_aligned() {
        let d = GridDims::new(4, 1, 1, 1.0).unwrap();
        let mut seen = Vec::new();
        traverse(d, [-1.0, 0.5, 0.5], [1.0, 0.0, 0.0], 100.0, |v, t0, t1| {
            seen.push((v, t0, t1));
            true
        });
        assert_eq!(
            seen.iter().map(|s| s.0).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        assert!((seen[0].1 - 1.0).abs() < 1e-12 && (seen[3].2 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn traverse_diagonal_is_connected() {
        let d = GridDims::new(8, 8, 8, 1.0).unwrap();
        let s = 1.0 / 3f64.sqrt();
        let mut prev: Option<(usize, usize, usize)> = None;
        let mut count = 0;
        traverse(d, [0.1, 0.2, 0.3], [s, s, s], 100.0, |v, _, _| {
            let c = d.coords(v);
            if let Some(p) = prev {
                let step = c.0.abs_diff(p.0) + c.1.abs_diff(p.1) + c.2.abs_diff(p.2);
                assert_eq!(step, 1);
            }
            prev = Some(c);
            count += 1;
            true
        });
        assert!(count >= 20);
    }

    #[test]
    fn scene_is_sparse_input_dense_truth() {
        let dims = GridDims::new(32, 32, 8, 0.2).unwrap();
        let classes = ClassTable::street();
        let scene = generate_scene(dims, &classes, &ScanParams::default(), 5, 0).unwrap();
        scene.labels.validate(classes.num_semantic()).unwrap();
        let known = scene.labels.known_count() as f64 / dims.num_voxels() as f64;
        assert!(scene.occupancy.density() > 0.0);
        assert!(
            scene.occupancy.density() < known,
            "{} vs {known}",
            scene.occupancy.density()
        );
        // Every scanned voxel is a solid voxel of the truth.
        for v in 0..dims.num_voxels() {
            if scene.occupancy.get_linear(v) {
                let l = scene.labels.labels()[v];
                assert!(l != FREE && l != UNKNOWN, "voxel {v} label {l}");
            }
        }
    }
}
