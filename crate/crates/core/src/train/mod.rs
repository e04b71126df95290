//! Multiscale losses, the training loop, evaluation metrics and the
//! latency benchmark.

mod bench;
mod loss;
mod metrics;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use bench::{benchmark, render_bench, BenchReport, LatencyStats, MIN_REPS, MIN_WARMUP};
pub use loss::{level_loss, level_targets, total_loss};
pub use metrics::{
    argmax_labels, evaluate, report_metrics, ConfusionMatrix, IouAbsent, MetricsReport,
    ScaleMetrics,
};

use crate::error::{Error, Result};
use crate::model::{write_checkpoint, LmscNet, ScaleSelection, LEVELS};
use crate::rng::{keyed, tags};
use crate::tensor::{Adam, AdamState, Tensor};
use crate::voxel::{flip_xy, grids_to_input, ClassWeights, FlipPlan, LabelGrid, OccupancyGrid};
use crate::Scalar;

/// One training or evaluation example: sparse input and dense target.
pub type Pair<'a> = (&'a OccupancyGrid, &'a LabelGrid);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Learning rate at epoch `e` is `lr0 * lr_decay^e`.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Per-level loss weights.
    pub alpha: [f64; LEVELS],
    pub seed: u64,
    /// Train on the full-resolution loss only.
    pub singlescale: bool,
    /// Random horizontal flips.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            lr_decay: 0.98,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            epochs: 80,
            alpha: [1.0; LEVELS],
            seed: 0,
            singlescale: false,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad(format!("lr_decay must be positive, got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad(format!(
                "alpha {:?} must be finite and non-negative",
                self.alpha
            ));
        }
        if !self.singlescale && self.alpha.iter().all(|&a| a == 0.0) {
            return bad("at least one alpha must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    /// Level weights actually used: `(1, 0, 0, 0)` in singlescale mode.
    pub fn effective_alpha(&self) -> [f64; LEVELS] {
        if self.singlescale {
            let mut a = [0.0; LEVELS];
            a[0] = 1.0;
            a
        } else {
            self.alpha
        }
    }

    /// Levels the forward pass has to produce during training.
    pub fn train_scales(&self) -> ScaleSelection {
        let levels = self
            .effective_alpha()
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > 0.0)
            .map(|(l, _)| l)
            .collect::<Vec<_>>();
        ScaleSelection::new(levels).expect("validated alpha has a positive entry")
    }
}

/// Losses of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub total: f64,
    pub levels: BTreeMap<usize, f64>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub level_losses: BTreeMap<usize, f64>,
    pub lr: f64,
    pub batches: usize,
    pub wall_secs: f64,
}

/// Model plus optimizer, stepping on batches of pairs.
pub struct Trainer<T> {
    model: LmscNet<T>,
    adam: Adam,
    config: TrainConfig,
    weights: Vec<T>,
    scales: ScaleSelection,
    alpha: [f64; LEVELS],
    epoch: usize,
    batch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: LmscNet<T>, config: TrainConfig, weights: &ClassWeights) -> Result<Self> {
        config.validate()?;
        let classes = model.config().num_classes + 1;
        if weights.w.len() != classes {
            return Err(Error::Config(format!(
                "{} class weights for a model with {classes} outputs",
                weights.w.len()
            )));
        }
        Ok(Trainer {
            adam: Adam::new(config.beta1, config.beta2, config.adam_eps),
            weights: weights.w.iter().map(|&w| T::from_f64_lossy(w)).collect(),
            scales: config.train_scales(),
            alpha: config.effective_alpha(),
            model,
            config,
            epoch: 0,
            batch: 0,
        })
    }

    /// Continue from saved optimizer moments.
    pub fn with_adam_state(mut self, state: AdamState) -> Self {
        self.adam = Adam::from_state(state);
        self
    }

    pub fn model(&self) -> &LmscNet<T> {
        &self.model
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_parts(self) -> (LmscNet<T>, AdamState) {
        (self.model, self.adam.state)
    }

    /// Per-level and total loss without updating anything.
    pub fn losses(&self, batch: &[Pair]) -> Result<StepReport> {
        let (total, levels) = self.loss_graph(batch)?;
        Ok(StepReport {
            total: total.item().as_f64(),
            levels: levels
                .iter()
                .map(|(&l, t)| (l, t.item().as_f64()))
                .collect(),
        })
    }

    fn loss_graph(&self, batch: &[Pair]) -> Result<(Tensor<T>, BTreeMap<usize, Tensor<T>>)> {
        let occ: Vec<&OccupancyGrid> = batch.iter().map(|p| p.0).collect();
        let gt: Vec<&LabelGrid> = batch.iter().map(|p| p.1).collect();
        let input = grids_to_input::<T>(&occ)?;
        let logits = self.model.forward(&input, &self.scales)?;
        let mut levels = BTreeMap::new();
        for (&l, t) in &logits {
            levels.insert(l, level_loss(t, &gt, &self.weights, l)?);
        }
        Ok((total_loss(&levels, self.alpha)?, levels))
    }

    /// Forward, backward and one Adam update at learning rate `lr`.
    ///
    /// A non-finite loss aborts before the parameters change.
    pub fn step(&mut self, batch: &[Pair], lr: f64) -> Result<StepReport> {
        for p in self.model.parameters() {
            p.value.zero_grad();
        }
        let (total, levels) = self.loss_graph(batch)?;
        let value = total.item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                epoch: self.epoch,
                batch: self.batch,
                loss: value,
            });
        }
        total.backward()?;
        self.adam.step(self.model.parameters_mut(), lr)?;
        self.batch += 1;
        Ok(StepReport {
            total: value,
            levels: levels
                .iter()
                .map(|(&l, t)| (l, t.item().as_f64()))
                .collect(),
        })
    }

    /// One pass over `data` in a seeded order, dropping the last incomplete
    /// batch.
    pub fn run_epoch(&mut self, data: &[Pair], epoch: usize) -> Result<EpochRecord> {
        let start = Instant::now();
        let bs = self.config.batch_size;
        if data.len() < bs {
            return Err(Error::Config(format!(
                "batch size {bs} exceeds the {} available samples",
                data.len()
            )));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut keyed(tags::SHUFFLE, &[self.config.seed, epoch as u64]));
        self.epoch = epoch;
        self.batch = 0;
        let lr = self.config.lr_at(epoch);
        let mut sum = 0.0;
        let mut level_sums: BTreeMap<usize, f64> = BTreeMap::new();
        let batches = data.len() / bs;
        for chunk in order.chunks_exact(bs) {
            let flipped: Vec<(OccupancyGrid, LabelGrid)> = chunk
                .iter()
                .map(|&i| {
                    let (occ, gt) = data[i];
                    let plan = if self.config.augment {
                        FlipPlan::sample(self.config.seed, epoch as u64, i as u64)
                    } else {
                        FlipPlan::default()
                    };
                    flip_xy(occ, gt, plan.flip_x, plan.flip_y)
                })
                .collect::<Result<_>>()?;
            let batch: Vec<Pair> = flipped.iter().map(|(o, l)| (o, l)).collect();
            let r = self.step(&batch, lr)?;
            sum += r.total;
            for (l, v) in r.levels {
                *level_sums.entry(l).or_default() += v;
            }
        }
        let n = batches as f64;
        Ok(EpochRecord {
            epoch,
            loss: sum / n,
            level_losses: level_sums.into_iter().map(|(l, v)| (l, v / n)).collect(),
            lr,
            batches,
            wall_secs: start.elapsed().as_secs_f64(),
        })
    }
}

/// Result of [`train`].
pub struct TrainOutcome<T> {
    pub model: LmscNet<T>,
    pub adam: AdamState,
    pub log: Vec<EpochRecord>,
}

/// Run every epoch of `config`.
///
/// With `out_dir`, each epoch appends a JSON line to `train_log.jsonl` and
/// writes `epoch_NNN.ckpt`; the final state goes to `final.ckpt`.
pub fn train<T: Scalar>(
    model: LmscNet<T>,
    data: &[Pair],
    weights: &ClassWeights,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut trainer = Trainer::new(model, config.clone(), weights)?;
    let mut log_file = match out_dir {
        Some(dir) => {
            let path = dir.join("train_log.jsonl");
            Some(
                std::fs::File::create(&path)
                    .map_err(|e| Error::io(format!("creating {}", path.display()), e))?,
            )
        }
        None => None,
    };
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let rec = trainer.run_epoch(data, epoch)?;
        if let (Some(f), Some(dir)) = (log_file.as_mut(), out_dir) {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io("writing training log", e))?;
            let ckpt = dir.join(format!("epoch_{epoch:03}.ckpt"));
            write_checkpoint(&ckpt, trainer.model(), Some(trainer.adam_state()))?;
        }
        log.push(rec);
    }
    if let Some(dir) = out_dir {
        write_checkpoint(
            &dir.join("final.ckpt"),
            trainer.model(),
            Some(trainer.adam_state()),
        )?;
    }
    let (model, adam) = trainer.into_parts();
    Ok(TrainOutcome { model, adam, log })
}
