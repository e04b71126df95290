use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use lmscnet::model::{read_checkpoint, LmscNet, ScaleSelection};
use lmscnet::train::{
    argmax_labels, benchmark, evaluate, render_bench, report_metrics, train, BenchReport,
    EpochRecord, MetricsReport, Pair,
};
use lmscnet::voxel::synthetic::{write_dataset, ScanParams};
use lmscnet::voxel::{
    encode_labels, grid_to_input, read_label_file, read_occupancy_file, ClassTable, ClassWeights,
    Dataset, GridDims, LabelGrid, Manifest,
};
use lmscnet::{Error, Real};
use toml::Value;

use crate::args::{
    BenchArgs, Cli, Command, Dims, EvalArgs, ExportPlyArgs, InferArgs, MakeSyntheticArgs, TrainArgs,
};
use crate::config::{load_entries, split_overrides, Entries, RunConfig};
use crate::ply::write_ply;
use crate::{CliError, CliResult, EXIT_CONFIG};

/// File names written into output directories.
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn write_file(path: &Path, bytes: &[u8]) -> lmscnet::Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn create_dir(path: &Path) -> lmscnet::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn open_dataset(path: &Path) -> CliResult<Dataset> {
    Dataset::open(path).map_err(CliError::data)
}

fn dataset_grid(ds: &Dataset) -> ([usize; 3], usize) {
    let d = ds.dims();
    ([d.nx, d.ny, d.nz], ds.classes().num_semantic())
}

fn check_model_matches(model: &lmscnet::model::ModelConfig, ds: &Dataset) -> lmscnet::Result<()> {
    let ([nx, ny, nz], n) = dataset_grid(ds);
    if (model.nx, model.ny, model.nz, model.num_classes) != (nx, ny, nz, n) {
        return Err(Error::Config(format!(
            "model is {}x{}x{} with {} classes, dataset is {nx}x{ny}x{nz} with {n}",
            model.nx, model.ny, model.nz, model.num_classes
        )));
    }
    Ok(())
}

fn insert_flags(entries: &mut Entries, output: Option<&Path>, seed: Option<u64>) {
    if let Some(p) = output {
        entries.insert("output".into(), Value::String(p.display().to_string()));
    }
    if let Some(s) = seed {
        entries.insert("seed".into(), Value::Integer(s as i64));
    }
}

/// What [`cmd_train`] produced.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: RunConfig,
    pub output: PathBuf,
    pub log: Vec<EpochRecord>,
}

impl TrainRun {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.output.join(FINAL_CHECKPOINT)
    }
}

/// Resolve the run config, then train on every sample of the manifest.
///
/// The output directory receives `config.toml`, `train_log.jsonl`, one
/// checkpoint per epoch and `final.ckpt`.
pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainRun> {
    let mut entries = load_entries(args.config.as_deref(), &args.overrides)?;
    insert_flags(&mut entries, args.output.as_deref(), args.seed);
    let manifest = RunConfig::manifest_entry(&entries)?
        .ok_or_else(|| Error::Config("data.manifest is not set".into()))?;
    let dataset = open_dataset(&manifest)?;
    let config = RunConfig::resolve(&entries, Some(dataset_grid(&dataset)))?;
    check_model_matches(&config.model, &dataset)?;
    let output = config
        .output
        .clone()
        .ok_or_else(|| Error::Config("output is not set".into()))?;

    let samples = dataset.load_all().map_err(CliError::data)?;
    let model = LmscNet::<Real>::new(config.model.clone())?;
    create_dir(&output)?;
    write_file(&output.join(CONFIG_FILE), config.to_flat_toml().as_bytes())?;

    let pairs: Vec<Pair> = samples.iter().map(|s| (&s.occupancy, &s.labels)).collect();
    let weights = ClassWeights::from_grids(
        samples.iter().map(|s| &s.labels),
        dataset.classes().num_classes(),
    );
    let outcome = train(model, &pairs, &weights, &config.train, Some(&output))?;
    Ok(TrainRun {
        config,
        output,
        log: outcome.log,
    })
}

/// Score a checkpoint on a dataset. Nothing is written unless every step
/// before it succeeded.
pub fn cmd_eval(args: &EvalArgs) -> CliResult<MetricsReport> {
    let ckpt = read_checkpoint::<Real>(&args.checkpoint).map_err(CliError::config)?;
    let dataset = open_dataset(&args.manifest)?;
    check_model_matches(ckpt.model.config(), &dataset)?;
    let samples = dataset.load_all().map_err(CliError::data)?;
    let pairs: Vec<Pair> = samples.iter().map(|s| (&s.occupancy, &s.labels)).collect();
    let report = evaluate(
        &ckpt.model,
        &pairs,
        &args.scales,
        dataset.classes(),
        args.iou_absent,
    )?;
    if let Some(dir) = &args.output {
        let mut table = Vec::new();
        report_metrics(&report, &mut table).expect("writing to memory");
        create_dir(dir)?;
        write_file(&dir.join("metrics.txt"), &table)?;
        write_file(&dir.join("metrics.json"), report.to_json().as_bytes())?;
    }
    Ok(report)
}

/// Predict labels at one scale and write them in the label file format.
pub fn cmd_infer(args: &InferArgs) -> CliResult<LabelGrid> {
    let ckpt = read_checkpoint::<Real>(&args.checkpoint).map_err(CliError::config)?;
    let cfg = ckpt.model.config();
    let scales = ScaleSelection::single(args.scale)?;
    let (map, voxel_size) = match &args.manifest {
        Some(p) => {
            let ds = open_dataset(p)?;
            check_model_matches(cfg, &ds)?;
            (ds.label_map().clone(), ds.dims().voxel_size)
        }
        None => {
            let kitti = ClassTable::semantic_kitti();
            if cfg.num_classes != kitti.num_semantic() {
                return Err(Error::Config(format!(
                    "model predicts {} classes; pass --manifest for its label map",
                    cfg.num_classes
                ))
                .into());
            }
            (kitti.kitti_label_map(), GridDims::SEMANTIC_KITTI.voxel_size)
        }
    };
    let dims = cfg.grid(voxel_size);
    let occ = read_occupancy_file(&args.input, dims).map_err(CliError::data)?;
    let logits = ckpt.model.predict(&grid_to_input::<Real>(&occ), &scales)?;
    let labels = argmax_labels(&logits[&args.scale])?;
    let grid = LabelGrid::from_vec(dims.downscaled(1 << args.scale)?, labels)?;
    write_file(&args.output, &encode_labels(&grid, &map))?;
    Ok(grid)
}

/// Time pruned inference per scale for a checkpoint or a configured model.
pub fn cmd_bench(args: &BenchArgs) -> CliResult<BenchReport> {
    let (model, seed) = match &args.checkpoint {
        Some(path) => {
            if !args.overrides.is_empty() {
                return Err(
                    Error::Config("config flags do not apply to a checkpoint".into()).into(),
                );
            }
            let ckpt = read_checkpoint::<Real>(path).map_err(CliError::config)?;
            (ckpt.model, args.seed.unwrap_or(0))
        }
        None => {
            let mut entries = load_entries(args.config.as_deref(), &args.overrides)?;
            insert_flags(&mut entries, None, args.seed);
            let grid = match RunConfig::manifest_entry(&entries)? {
                Some(p) => Some(dataset_grid(&open_dataset(&p)?)),
                None => None,
            };
            let config = RunConfig::resolve(&entries, grid)?;
            (LmscNet::<Real>::new(config.model)?, config.seed)
        }
    };
    let scales = args.scales.clone().unwrap_or_else(ScaleSelection::all);
    let report = benchmark(&model, &scales, args.reps, args.warmup, seed)?;
    if let Some(dir) = &args.output {
        create_dir(dir)?;
        write_file(&dir.join("bench.json"), report.to_json().as_bytes())?;
    }
    Ok(report)
}

/// Write a procedural street dataset with its manifest.
pub fn cmd_make_synthetic(args: &MakeSyntheticArgs) -> CliResult<Manifest> {
    if args.count == 0 {
        return Err(Error::Config("count must be positive".into()).into());
    }
    let [nx, ny, nz] = args.dims.0;
    let dims = GridDims::new(nx, ny, nz, args.voxel_size)?;
    dims.check_network_grid()?;
    Ok(write_dataset(
        &args.output,
        args.count,
        dims,
        &ClassTable::street(),
        &ScanParams::default(),
        args.seed,
    )?)
}

/// Convert a label file to PLY; returns the vertex count.
pub fn cmd_export_ply(args: &ExportPlyArgs) -> CliResult<usize> {
    let (classes, map, grid, origin) = match &args.manifest {
        Some(p) => {
            let ds = open_dataset(p)?;
            (
                ds.classes().clone(),
                ds.label_map().clone(),
                Some(ds.dims()),
                ds.origin(),
            )
        }
        None => {
            let kitti = ClassTable::semantic_kitti();
            let map = kitti.kitti_label_map();
            (kitti, map, None, [0.0; 3])
        }
    };
    let voxel_size = args
        .voxel_size
        .or(grid.map(|d| d.voxel_size))
        .unwrap_or(GridDims::SEMANTIC_KITTI.voxel_size);
    let [nx, ny, nz] = match (args.dims, grid) {
        (Some(Dims(d)), _) => d,
        (None, Some(d)) => [d.nx, d.ny, d.nz],
        (None, None) => {
            return Err(Error::Config("--dims is required without --manifest".into()).into())
        }
    };
    let dims = GridDims::new(nx, ny, nz, voxel_size)?;
    let labels = read_label_file(&args.labels, dims, &map).map_err(CliError::data)?;
    let io_err = |e| Error::io(format!("writing {}", args.output.display()), e);
    let mut sink = BufWriter::new(File::create(&args.output).map_err(io_err)?);
    let n = write_ply(&labels, &classes, origin, &mut sink).map_err(io_err)?;
    sink.flush().map_err(io_err)?;
    Ok(n)
}

fn stdout_err(e: io::Error) -> CliError {
    Error::io("writing to stdout", e).into()
}

/// Run a parsed command, printing its summary to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Train(a) => {
            let r = cmd_train(&a)?;
            for rec in &r.log {
                writeln!(
                    out,
                    "epoch {:>3}  loss {:.5}  lr {:.3e}  {:.1} s",
                    rec.epoch, rec.loss, rec.lr, rec.wall_secs
                )
                .map_err(stdout_err)?;
            }
            writeln!(out, "wrote {}", r.final_checkpoint().display()).map_err(stdout_err)?;
        }
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            report_metrics(&report, &mut out).map_err(stdout_err)?;
        }
        Command::Infer(a) => {
            let grid = cmd_infer(&a)?;
            writeln!(
                out,
                "wrote {} labels ({}) to {}",
                grid.labels().len(),
                grid.dims(),
                a.output.display()
            )
            .map_err(stdout_err)?;
        }
        Command::Bench(a) => {
            let report = cmd_bench(&a)?;
            render_bench(&report, &mut out).map_err(stdout_err)?;
        }
        Command::MakeSynthetic(a) => {
            let m = cmd_make_synthetic(&a)?;
            writeln!(
                out,
                "wrote {} scenes to {}",
                m.samples.len(),
                a.output.display()
            )
            .map_err(stdout_err)?;
        }
        Command::ExportPly(a) => {
            let n = cmd_export_ply(&a)?;
            writeln!(out, "wrote {n} vertices to {}", a.output.display()).map_err(stdout_err)?;
        }
    }
    Ok(())
}

/// Entry point of the binary: parse `args` (program name first), run, and
/// return the exit code. Errors are reported on stderr.
pub fn run_args(args: Vec<String>) -> i32 {
    let result = split_overrides(args)
        .map_err(CliError::from)
        .and_then(|(rest, overrides)| {
            let mut cli = match Cli::try_parse_from(rest) {
                Ok(cli) => cli,
                Err(e) => {
                    let _ = e.print();
                    return Ok(Some(if e.use_stderr() { EXIT_CONFIG } else { 0 }));
                }
            };
            match &mut cli.command {
                Command::Train(a) => a.overrides = overrides,
                Command::Bench(a) => a.overrides = overrides,
                _ if !overrides.is_empty() => {
                    return Err(
                        Error::Config(format!("unexpected flag --{}", overrides[0].0)).into(),
                    );
                }
                _ => {}
            }
            run(cli).map(|()| None)
        });
    match result {
        Ok(code) => code.unwrap_or(0),
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
