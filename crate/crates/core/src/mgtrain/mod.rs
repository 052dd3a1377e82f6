//! Multigrid training: one cycle over a hierarchy of grid resolutions with the
//! same resolution-agnostic network. Steps heading to a coarser grid train
//! for a fixed number of epochs; all other steps train until early stopping.

mod schedule;

pub use schedule::{make_schedule, CycleKind, Schedule, Step, StepMode};

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelState;
use crate::parallel::{ClusterSpec, Dataset, EnergyObjective, Engine, EpochOptions, EpochReport, OptimizerSpec};
use crate::problem::{diffusivity_batch, GridSpec, OmegaSample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
    pub rel_tol: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            patience: 10,
            rel_tol: 1e-3,
        }
    }
}

impl EarlyStop {
    /// Whether training should stop after the given epoch losses of the
    /// current step: true once `patience` consecutive epochs have failed to
    /// improve on the best loss so far by a relative `rel_tol`.
    pub fn should_stop(&self, losses: &[f64]) -> bool {
        if losses.len() < self.patience.max(1) {
            return false;
        }
        let mut best = f64::INFINITY;
        let mut stale = 0;
        for &l in losses {
            if l < best - self.rel_tol * best.abs() || best == f64::INFINITY {
                best = l;
                stale = 0;
            } else {
                stale += 1;
            }
        }
        stale >= self.patience
    }
}

/// Network input derived from a diffusivity field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFeature {
    /// The diffusivity itself.
    #[default]
    Diffusivity,
    /// Its natural logarithm.
    LogDiffusivity,
}

impl InputFeature {
    pub fn apply(&self, nu: &crate::tensor::Tensor) -> crate::tensor::Tensor {
        match self {
            InputFeature::Diffusivity => nu.clone(),
            InputFeature::LogDiffusivity => nu.map(f64::ln),
        }
    }
}

/// Training samples of one run, regenerated analytically at every resolution.
#[derive(Clone, Debug)]
pub struct Problem {
    pub omegas: Vec<OmegaSample>,
    pub rank: usize,
    pub feature: InputFeature,
}

impl Problem {
    pub fn dataset(&self, resolution: usize) -> Result<Dataset> {
        let grid = GridSpec::new(resolution, self.rank)?;
        let nu = diffusivity_batch(&self.omegas, &grid)?;
        Ok(Dataset {
            inputs: self.feature.apply(&nu),
            coefficients: nu,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub optimizer: OptimizerSpec,
    pub cluster: ClusterSpec,
    pub epoch: EpochOptions,
    pub early_stop: EarlyStop,
    /// Adapt the architecture at every coarse-to-fine transition.
    pub adapt: bool,
    pub seed: u64,
    /// Upper bound on the epochs of any train-to-convergence step.
    pub max_epochs_per_step: usize,
    /// Upper bound on the epochs of the whole run.
    pub max_total_epochs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            optimizer: OptimizerSpec::default(),
            cluster: ClusterSpec::default(),
            epoch: EpochOptions::default(),
            early_stop: EarlyStop::default(),
            adapt: false,
            seed: 0,
            max_epochs_per_step: 10_000,
            max_total_epochs: 100_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    FixedEpochs,
    EarlyStop,
    StepCap,
    TotalCap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub index: usize,
    pub resolution: usize,
    pub level: usize,
    pub mode: StepMode,
    pub epochs: usize,
    pub wall_s: f64,
    pub final_loss: f64,
    pub stop: StopReason,
    pub adapted: bool,
    pub fingerprint_in: String,
    pub fingerprint_out: String,
    /// Parameter and statistics digests at step entry and exit.
    pub digest_in: String,
    pub digest_out: String,
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Global epoch counter, starting at 1.
    pub epoch: usize,
    pub step: usize,
    pub level: usize,
    pub resolution: usize,
    pub loss: f64,
    pub wall_s: f64,
    pub compute_s: f64,
    pub comm_s: f64,
    pub workers: usize,
    /// Wall time since the start of the run, after this epoch.
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: CycleKind,
    pub steps: Vec<StepReport>,
    pub history: Vec<EpochRecord>,
    /// Sum of the step wall times.
    pub total_s: f64,
    pub total_epochs: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.final_loss)
    }

    /// Run time until the first epoch at `resolution` whose loss is at most
    /// `target`, counting every preceding epoch at any resolution.
    pub fn time_to_loss(&self, resolution: usize, target: f64) -> Option<f64> {
        self.history
            .iter()
            .find(|r| r.resolution == resolution && r.loss <= target)
            .map(|r| r.elapsed_s)
    }

    /// Training time spent at each resolution, finest first.
    pub fn time_by_resolution(&self) -> Vec<(usize, f64)> {
        let mut by: Vec<(usize, f64)> = Vec::new();
        for s in &self.steps {
            match by.iter_mut().find(|(r, _)| *r == s.resolution) {
                Some(e) => e.1 += s.wall_s,
                None => by.push((s.resolution, s.wall_s)),
            }
        }
        by.sort_by(|a, b| b.0.cmp(&a.0));
        by
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub base_s: f64,
    pub multigrid_s: f64,
    pub speedup: f64,
    /// Fraction of the multigrid run spent at each resolution, finest first.
    pub shares: Vec<(usize, f64)>,
}

pub fn speedup_report(multigrid: &TrainReport, base: &TrainReport) -> SpeedupReport {
    let total: f64 = multigrid.steps.iter().map(|s| s.wall_s).sum();
    let shares = multigrid
        .time_by_resolution()
        .into_iter()
        .map(|(r, t)| (r, if total > 0.0 { t / total } else { 0.0 }))
        .collect();
    SpeedupReport {
        base_s: base.total_s,
        multigrid_s: multigrid.total_s,
        speedup: base.total_s / multigrid.total_s,
        shares,
    }
}

/// Callbacks for logging and checkpointing during a run.
pub trait Observer {
    fn on_epoch(&mut self, _record: &EpochRecord, _report: &EpochReport, _model: &ModelState) -> Result<()> {
        Ok(())
    }

    fn on_step_end(&mut self, _step: &StepReport, _model: &ModelState) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

/// Executes every step of `schedule`, carrying one model across resolutions.
pub fn run(
    schedule: &Schedule,
    model: ModelState,
    problem: &Problem,
    opts: &RunOptions,
    observer: &mut dyn Observer,
) -> Result<(ModelState, TrainReport)> {
    if schedule.coarsest() < model.spec().min_extent() {
        return Err(Error::invalid(
            "run",
            format!(
                "coarsest resolution {} is below the network minimum {}",
                schedule.coarsest(),
                model.spec().min_extent()
            ),
        ));
    }
    if model.spec().spatial_rank != problem.rank {
        return Err(Error::invalid("run", "network and problem differ in spatial rank"));
    }
    let mut engine = Engine::new(model, opts.optimizer, opts.cluster)?;
    let mut datasets: HashMap<usize, (Dataset, EnergyObjective)> = HashMap::new();
    let mut steps = Vec::with_capacity(schedule.steps.len());
    let mut history = Vec::new();
    let mut done_s = 0.0;
    let mut transitions = 0u64;
    for (i, step) in schedule.steps.iter().enumerate() {
        let mut adapted = false;
        if i > 0 && step.resolution > schedule.steps[i - 1].resolution && opts.adapt {
            transitions += 1;
            let next = engine.model().adapt(opts.seed.wrapping_add(transitions))?;
            engine.set_model(next);
            adapted = true;
        }
        let fingerprint_in = engine.model().fingerprint();
        let digest_in = engine.model().digest();
        let step_start = Instant::now();
        if let std::collections::hash_map::Entry::Vacant(e) = datasets.entry(step.resolution) {
            let grid = GridSpec::new(step.resolution, problem.rank)?;
            e.insert((problem.dataset(step.resolution)?, EnergyObjective::new(grid)));
        }
        let (data, objective) = &datasets[&step.resolution];
        let mut losses = Vec::new();
        let stop = loop {
            if let StepMode::Fixed(k) = step.mode {
                if losses.len() >= k {
                    break StopReason::FixedEpochs;
                }
            }
            if history.len() >= opts.max_total_epochs {
                break StopReason::TotalCap;
            }
            if step.mode == StepMode::Converge {
                if opts.early_stop.should_stop(&losses) {
                    break StopReason::EarlyStop;
                }
                if losses.len() >= opts.max_epochs_per_step {
                    break StopReason::StepCap;
                }
            }
            let report = engine.train_epoch(data, objective, &opts.epoch).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {i} at resolution {}: {m}", step.resolution)),
                e => e,
            })?;
            losses.push(report.loss);
            let record = EpochRecord {
                epoch: history.len() + 1,
                step: i,
                level: step.level,
                resolution: step.resolution,
                loss: report.loss,
                wall_s: report.wall_s,
                compute_s: report.compute_s,
                comm_s: report.comm_s,
                workers: report.workers,
                elapsed_s: done_s + step_start.elapsed().as_secs_f64(),
            };
            observer.on_epoch(&record, &report, engine.model())?;
            history.push(record);
        };
        let report = StepReport {
            index: i,
            resolution: step.resolution,
            level: step.level,
            mode: step.mode,
            epochs: losses.len(),
            wall_s: step_start.elapsed().as_secs_f64(),
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
            stop,
            adapted,
            fingerprint_in,
            fingerprint_out: engine.model().fingerprint(),
            digest_in,
            digest_out: engine.model().digest(),
        };
        done_s += report.wall_s;
        observer.on_step_end(&report, engine.model())?;
        steps.push(report);
    }
    engine.sync_bn()?;
    let total_epochs = history.len();
    let report = TrainReport {
        kind: schedule.kind,
        steps,
        history,
        total_s: done_s,
        total_epochs,
    };
    Ok((engine.model().clone(), report))
}
