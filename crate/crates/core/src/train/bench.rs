use std::io::{self, Write};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LmscNet, ScaleSelection};
use crate::rng::{keyed, tags};
use crate::tensor::Tensor;
use crate::Scalar;

pub const MIN_REPS: usize = 10;
pub const MIN_WARMUP: usize = 3;

/// Fraction of occupied voxels in the benchmark input.
const INPUT_DENSITY: f64 = 0.07;

/// Timing of pruned inference for one output level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub level: usize,
    pub warmup: usize,
    pub reps: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub fps: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub params: usize,
    pub grid: [usize; 3],
    pub scales: Vec<LatencyStats>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Time a single-level forward pass for every level in `scales` on a fixed
/// random input drawn from `seed`.
pub fn benchmark<T: Scalar>(
    model: &LmscNet<T>,
    scales: &ScaleSelection,
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport> {
    if reps < MIN_REPS {
        return Err(Error::Config(format!(
            "benchmark needs at least {MIN_REPS} repetitions, got {reps}"
        )));
    }
    if warmup < MIN_WARMUP {
        return Err(Error::Config(format!(
            "benchmark needs at least {MIN_WARMUP} warmup runs, got {warmup}"
        )));
    }
    let cfg = model.config();
    let mut rng = keyed(tags::BENCH, &[seed]);
    let data = (0..cfg.nz * cfg.nx * cfg.ny)
        .map(|_| {
            if rng.gen_bool(INPUT_DENSITY) {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let input = Tensor::new(data, &[1, cfg.nz, cfg.nx, cfg.ny])?;

    let mut out = Vec::new();
    for level in scales.levels() {
        let sel = ScaleSelection::single(level)?;
        for _ in 0..warmup {
            model.predict(&input, &sel)?;
        }
        let mut ms = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            let y = model.predict(&input, &sel)?;
            ms.push(t.elapsed().as_secs_f64() * 1e3);
            drop(y);
        }
        let mean = ms.iter().sum::<f64>() / reps as f64;
        ms.sort_by(f64::total_cmp);
        let median = if reps % 2 == 1 {
            ms[reps / 2]
        } else {
            0.5 * (ms[reps / 2 - 1] + ms[reps / 2])
        };
        out.push(LatencyStats {
            level,
            warmup,
            reps,
            mean_ms: mean,
            median_ms: median,
            min_ms: ms[0],
            max_ms: ms[reps - 1],
            fps: 1e3 / mean,
            flops: model.count_flops(&sel),
        });
    }
    Ok(BenchReport {
        params: model.count_params(),
        grid: [cfg.nx, cfg.ny, cfg.nz],
        scales: out,
    })
}

pub fn render_bench(report: &BenchReport, sink: &mut dyn Write) -> io::Result<()> {
    let [nx, ny, nz] = report.grid;
    writeln!(
        sink,
        "grid {nx}x{ny}x{nz}, {:.3} M parameters",
        report.params as f64 / 1e6
    )?;
    writeln!(
        sink,
        "{:<6} {:>10} {:>10} {:>10} {:>9}",
        "scale", "GFLOPs", "mean ms", "median ms", "FPS"
    )?;
    for s in &report.scales {
        writeln!(
            sink,
            "{:<6} {:>10.3} {:>10.2} {:>10.2} {:>9.2}",
            format!("1:{}", 1 << s.level),
            s.flops as f64 / 1e9,
            s.mean_ms,
            s.median_ms,
            s.fps
        )?;
    }
    Ok(())
}
