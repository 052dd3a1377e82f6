use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mgtrain::{make_schedule, CycleKind, EarlyStop, InputFeature, Problem, RunOptions, Schedule};
use crate::network::UNetSpec;
use crate::parallel::{ClusterSpec, EpochOptions, OptimizerSpec, ReplicaCheck};
use crate::problem::{sample_omegas, GridSpec, OmegaSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub rank: usize,
    pub max_resolution: usize,
    pub omega_count: usize,
    pub sample_seed: u64,
    pub input_feature: InputFeature,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            rank: 2,
            max_resolution: 64,
            omega_count: 64,
            sample_seed: 0,
            input_feature: InputFeature::Diffusivity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: usize,
    pub base_filters: usize,
    pub init_seed: u64,
    pub leaky_slope: f64,
    pub kernel_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let s = UNetSpec::default();
        NetworkConfig {
            depth: s.depth,
            base_filters: s.base_filters,
            init_seed: 0,
            leaky_slope: s.leaky_slope,
            kernel_size: s.kernel_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub global_batch_size: usize,
    /// Cap on the epochs of the whole run.
    pub max_epochs: usize,
    /// Cap on the epochs of a single train-to-convergence step.
    pub max_epochs_per_step: usize,
    pub early_stop: EarlyStop,
    pub shuffle_seed: Option<u64>,
    pub replica_check: ReplicaCheck,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-5,
            global_batch_size: 64,
            max_epochs: 3000,
            max_epochs_per_step: 3000,
            early_stop: EarlyStop::default(),
            shuffle_seed: None,
            replica_check: ReplicaCheck::EpochEnd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultigridConfig {
    pub kind: CycleKind,
    pub levels: usize,
    pub fixed_epochs: usize,
    pub adapt: bool,
}

impl Default for MultigridConfig {
    fn default() -> Self {
        MultigridConfig {
            kind: CycleKind::HalfV,
            levels: 3,
            fixed_epochs: 5,
            adapt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub p: usize,
    pub threads_per_worker: Option<usize>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            p: 1,
            threads_per_worker: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Also checkpoint every this many epochs; 0 checkpoints only at step boundaries.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: PathBuf::from("runs/default"),
            checkpoint_every: 0,
        }
    }
}

/// Complete description of a training experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub multigrid: MultigridConfig,
    pub cluster: ClusterConfig,
    pub output: OutputConfig,
}

fn key_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| key_err("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if !(2..=3).contains(&p.rank) {
            return Err(key_err("problem.rank", "must be 2 or 3"));
        }
        GridSpec::new(p.max_resolution, p.rank).map_err(|e| key_err("problem.max_resolution", e.to_string()))?;
        if p.omega_count == 0 {
            return Err(key_err("problem.omega_count", "must be positive"));
        }
        self.unet_spec().validate().map_err(|e| {
            let key = if self.network.depth == 0 {
                "network.depth"
            } else if self.network.base_filters == 0 {
                "network.base_filters"
            } else if self.network.kernel_size.is_multiple_of(2) {
                "network.kernel_size"
            } else {
                "network"
            };
            key_err(key, e.to_string())
        })?;
        let t = &self.training;
        self.optimizer()
            .validate()
            .map_err(|e| key_err("training.learning_rate", e.to_string()))?;
        if t.global_batch_size == 0 || t.global_batch_size > p.omega_count {
            return Err(key_err(
                "training.global_batch_size",
                format!("must lie in 1..={}", p.omega_count),
            ));
        }
        if t.global_batch_size < self.cluster.p {
            return Err(key_err("training.global_batch_size", "must be at least the worker count"));
        }
        if t.max_epochs == 0 {
            return Err(key_err("training.max_epochs", "must be positive"));
        }
        if t.max_epochs_per_step == 0 {
            return Err(key_err("training.max_epochs_per_step", "must be positive"));
        }
        if t.early_stop.patience == 0 {
            return Err(key_err("training.early_stop.patience", "must be positive"));
        }
        if !(t.early_stop.rel_tol >= 0.0) {
            return Err(key_err("training.early_stop.rel_tol", "must be non-negative"));
        }
        if self.cluster.p == 0 {
            return Err(key_err("cluster.p", "must be positive"));
        }
        if self.cluster.threads_per_worker == Some(0) {
            return Err(key_err("cluster.threads_per_worker", "must be positive"));
        }
        let s = self.schedule().map_err(|e| key_err("multigrid.levels", e.to_string()))?;
        if s.coarsest() < self.unet_spec().min_extent() {
            return Err(key_err(
                "multigrid.levels",
                format!(
                    "coarsest resolution {} is below the network minimum {}",
                    s.coarsest(),
                    self.unet_spec().min_extent()
                ),
            ));
        }
        if self.multigrid.adapt && self.network.depth < 2 {
            return Err(key_err("multigrid.adapt", "adaptation requires network.depth >= 2"));
        }
        Ok(())
    }

    pub fn unet_spec(&self) -> UNetSpec {
        UNetSpec {
            depth: self.network.depth,
            base_filters: self.network.base_filters,
            spatial_rank: self.problem.rank,
            leaky_slope: self.network.leaky_slope,
            kernel_size: self.network.kernel_size,
        }
    }

    pub fn optimizer(&self) -> OptimizerSpec {
        match self.training.optimizer {
            OptimizerKind::Adam => OptimizerSpec::adam(self.training.learning_rate),
            OptimizerKind::Sgd => OptimizerSpec::Sgd {
                lr: self.training.learning_rate,
            },
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        make_schedule(
            self.multigrid.kind,
            self.problem.max_resolution,
            self.multigrid.levels,
            self.multigrid.fixed_epochs,
        )
    }

    pub fn problem(&self) -> Problem {
        Problem {
            omegas: sample_omegas(self.problem.omega_count, self.problem.sample_seed),
            rank: self.problem.rank,
            feature: self.problem.input_feature,
        }
    }

    /// Held-out sample `index`: the Sobol point that follows the training set.
    pub fn held_out(&self, index: usize) -> OmegaSample {
        let n = self.problem.omega_count;
        sample_omegas(n + index + 1, self.problem.sample_seed)[n + index]
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            optimizer: self.optimizer(),
            cluster: ClusterSpec {
                workers: self.cluster.p,
                threads_per_worker: self.cluster.threads_per_worker,
            },
            epoch: EpochOptions {
                batch_size: self.training.global_batch_size,
                shuffle_seed: self.training.shuffle_seed,
                replica_check: self.training.replica_check,
                sync_bn: true,
            },
            early_stop: self.training.early_stop,
            adapt: self.multigrid.adapt,
            seed: self.network.init_seed,
            max_epochs_per_step: self.training.max_epochs_per_step,
            max_total_epochs: self.training.max_epochs,
        }
    }
}
