//! Data-parallel training over in-process workers.
//!
//! Each worker owns a replica of the model and its optimizer. For every
//! mini-batch the workers run forward and backward passes on their local
//! shares, average gradients and losses with a deterministic tree reduce and
//! apply identical updates, so replicas never drift apart. Batch-norm layers
//! pool their batch statistics across workers, which makes the whole
//! trajectory independent of the worker count up to summation order.

mod comm;
mod optim;
mod partition;

pub use comm::{allreduce_average, tree_sum, CommCounter, Communicator, Traffic, TrafficStats, WorkerGroup};
pub use optim::{Optimizer, OptimizerSpec};
pub use partition::{partition, Partition};

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Mode, ModelState};
use crate::problem::{apply_bc, energy_loss, BoundaryMasks, GridSpec};
use crate::tensor::{StatReducer, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub workers: usize,
    /// Intra-op threads per worker; `None` shares the global pool.
    pub threads_per_worker: Option<usize>,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            workers: 1,
            threads_per_worker: None,
        }
    }
}

/// Paired network inputs and PDE coefficients, one sample per batch entry.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Tensor,
    pub coefficients: Tensor,
}

impl Dataset {
    /// Feeds the coefficient field itself to the network.
    pub fn from_coefficients(coefficients: Tensor) -> Self {
        Dataset {
            inputs: coefficients.clone(),
            coefficients,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let len = t.sample_len();
        let mut data = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * len..][..len]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            inputs: Self::gather(&self.inputs, idx)?,
            coefficients: Self::gather(&self.coefficients, idx)?,
        })
    }
}

/// Scalar training objective of a mini-batch.
pub trait Objective: Sync {
    /// Loss of a local mini-batch, averaged over its samples.
    fn loss(&self, tape: &mut Tape, prediction: Var, coefficients: Var) -> Result<Var>;
}

/// Energy of the prediction with exact Dirichlet values imposed.
pub struct EnergyObjective {
    pub grid: GridSpec,
    pub masks: BoundaryMasks,
}

impl EnergyObjective {
    pub fn new(grid: GridSpec) -> Self {
        EnergyObjective {
            grid,
            masks: BoundaryMasks::new(&grid),
        }
    }
}

impl Objective for EnergyObjective {
    fn loss(&self, tape: &mut Tape, prediction: Var, coefficients: Var) -> Result<Var> {
        let u = apply_bc(tape, prediction, &self.masks)?;
        energy_loss(tape, u, coefficients, &self.grid)
    }
}

/// How often replicas are compared by parameter digest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicaCheck {
    Off,
    #[default]
    EpochEnd,
    EveryStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochOptions {
    pub batch_size: usize,
    /// Reshuffles the sample order every epoch when set.
    pub shuffle_seed: Option<u64>,
    pub replica_check: ReplicaCheck,
    /// Average running batch-norm statistics across workers at epoch end.
    pub sync_bn: bool,
}

impl Default for EpochOptions {
    fn default() -> Self {
        EpochOptions {
            batch_size: 64,
            shuffle_seed: None,
            replica_check: ReplicaCheck::EpochEnd,
            sync_bn: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    /// Mean over mini-batches of the worker-averaged loss.
    pub loss: f64,
    pub batch_losses: Vec<f64>,
    /// Worker-averaged gradient of the final mini-batch.
    pub last_gradient: Vec<f64>,
    pub wall_s: f64,
    pub compute_s: f64,
    pub comm_s: f64,
    pub workers: usize,
    pub partition: Partition,
    /// Counters of worker 0; payloads are identical on every worker.
    pub comm: CommCounter,
}

pub struct Replica {
    pub model: ModelState,
    pub optimizer: Optimizer,
}

/// Replicas plus the worker configuration that trains them.
pub struct Engine {
    cluster: ClusterSpec,
    optimizer: OptimizerSpec,
    replicas: Vec<Replica>,
    pools: Vec<Option<rayon::ThreadPool>>,
    epochs: u64,
}

fn digest_words(model: &ModelState) -> Vec<f64> {
    model
        .digest()
        .as_bytes()
        .chunks(8)
        .map(|c| {
            let mut b = [0u8; 8];
            b[..c.len()].copy_from_slice(c);
            f64::from_bits(u64::from_le_bytes(b))
        })
        .collect()
}

fn check_replicas(comm: &Communicator, model: &ModelState) -> Result<()> {
    let all = comm.allgather(&digest_words(model), Traffic::Digest)?;
    let bits = |v: &Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    if let Some(r) = all.iter().position(|v| bits(v) != bits(&all[0])) {
        return Err(Error::ReplicaDivergence(format!("worker {r} differs from worker 0")));
    }
    Ok(())
}

fn flat_grad(model: &ModelState, grads: &mut crate::tensor::Gradients, params: &[Var]) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.parameter_count());
    for (t, &v) in model.params().iter().zip(params) {
        match grads.take(v) {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    out
}

/// Averages every batch-norm layer's running statistics across workers,
/// one collective per layer.
fn sync_bn_collective(comm: &Communicator, model: &mut ModelState) -> Result<()> {
    for s in model.bn_stats_mut() {
        let c = s.channels();
        let mut local = s.mean.clone();
        local.extend_from_slice(&s.var);
        let avg = comm.allreduce_average(&local, Traffic::BnSync)?;
        s.mean.copy_from_slice(&avg[..c]);
        s.var.copy_from_slice(&avg[c..]);
    }
    Ok(())
}

/// Replaces every replica's running statistics with their plain average:
/// the mean of the means and the mean of the variances.
pub fn sync_bn(models: &mut [ModelState]) -> Result<()> {
    let Some(first) = models.first() else {
        return Ok(());
    };
    let layout: Vec<usize> = first.bn_stats().iter().map(|s| s.channels()).collect();
    let fp = first.fingerprint();
    for (r, m) in models.iter().enumerate() {
        let l: Vec<usize> = m.bn_stats().iter().map(|s| s.channels()).collect();
        if l != layout || m.fingerprint() != fp {
            return Err(Error::Collective(format!("worker {r} has a different layer structure")));
        }
    }
    for layer in 0..layout.len() {
        let locals: Vec<Vec<f64>> = models
            .iter()
            .map(|m| {
                let s = m.bn_stats()[layer];
                s.mean.iter().chain(&s.var).copied().collect()
            })
            .collect();
        let refs: Vec<&[f64]> = locals.iter().map(Vec::as_slice).collect();
        let avg = allreduce_average(&refs)?;
        let c = layout[layer];
        for m in models.iter_mut() {
            let mut stats = m.bn_stats_mut();
            stats[layer].mean.copy_from_slice(&avg[..c]);
            stats[layer].var.copy_from_slice(&avg[c..]);
        }
    }
    Ok(())
}

impl Engine {
    pub fn new(model: ModelState, optimizer: OptimizerSpec, cluster: ClusterSpec) -> Result<Self> {
        if cluster.workers == 0 {
            return Err(Error::invalid("cluster", "at least one worker is required"));
        }
        if cluster.threads_per_worker == Some(0) {
            return Err(Error::invalid("cluster", "threads per worker must be positive"));
        }
        optimizer.validate()?;
        let pools = (0..cluster.workers)
            .map(|_| {
                cluster
                    .threads_per_worker
                    .map(|t| {
                        rayon::ThreadPoolBuilder::new()
                            .num_threads(t)
                            .build()
                            .map_err(|e| Error::invalid("cluster", e.to_string()))
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut engine = Engine {
            cluster,
            optimizer,
            replicas: Vec::new(),
            pools,
            epochs: 0,
        };
        engine.set_model(model);
        Ok(engine)
    }

    pub fn cluster(&self) -> &ClusterSpec {
        &self.cluster
    }

    /// Worker 0's replica.
    pub fn model(&self) -> &ModelState {
        &self.replicas[0].model
    }

    pub fn replicas(&self) -> &[Replica] {
        &self.replicas
    }

    pub fn epochs(&self) -> u64 {
        self.epochs
    }

    /// Installs a model on every worker and resets the optimizers.
    pub fn set_model(&mut self, model: ModelState) {
        let n = model.parameter_count();
        self.replicas = (0..self.cluster.workers)
            .map(|_| Replica {
                model: model.clone(),
                optimizer: Optimizer::new(self.optimizer, n),
            })
            .collect();
    }

    /// Averages running batch-norm statistics across replicas.
    pub fn sync_bn(&mut self) -> Result<()> {
        let mut models: Vec<ModelState> = self.replicas.iter().map(|r| r.model.clone()).collect();
        sync_bn(&mut models)?;
        for (r, m) in self.replicas.iter_mut().zip(models) {
            r.model = m;
        }
        Ok(())
    }

    /// Mean objective over `data` in evaluation mode, after synchronizing
    /// batch-norm statistics.
    pub fn evaluate(&mut self, data: &Dataset, objective: &dyn Objective, chunk: usize) -> Result<f64> {
        self.sync_bn()?;
        evaluate(self.model(), data, objective, chunk)
    }

    /// One pass over `data`.
    pub fn train_epoch(&mut self, data: &Dataset, objective: &dyn Objective, opts: &EpochOptions) -> Result<EpochReport> {
        let p = self.cluster.workers;
        let part = partition(data.len(), opts.batch_size, p)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        if let Some(seed) = opts.shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.epochs.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            order.shuffle(&mut rng);
        }
        let comms = Communicator::group(p);
        let start = Instant::now();
        let results: Vec<Result<(Vec<f64>, Vec<f64>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .replicas
                .iter_mut()
                .zip(&comms)
                .zip(&self.pools)
                .map(|((replica, comm), pool)| {
                    let order = &order;
                    s.spawn(move || {
                        let mut work = || {
                            let r = run_worker(replica, comm, data, objective, opts, &part, order);
                            if let Err(e) = &r {
                                comm.abort(&e.to_string());
                            }
                            r
                        };
                        match pool {
                            Some(pool) => pool.install(work),
                            None => work(),
                        }
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Collective("worker panicked".into()))))
                .collect()
        });
        let wall = start.elapsed().as_secs_f64();
        // Prefer the root cause over peers' "peer failed" errors.
        let mut losses = None;
        let mut first_err = None;
        for r in results {
            match r {
                Ok(l) => {
                    losses.get_or_insert(l);
                }
                Err(e @ Error::Collective(_)) => {
                    first_err.get_or_insert(e);
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        let (batch_losses, last_gradient) = losses.expect("at least one worker");
        let comm_s = comms.iter().map(|c| c.counter().seconds()).fold(0.0, f64::max);
        self.epochs += 1;
        Ok(EpochReport {
            epoch: self.epochs,
            loss: batch_losses.iter().sum::<f64>() / batch_losses.len() as f64,
            batch_losses,
            last_gradient,
            wall_s: wall,
            compute_s: (wall - comm_s).max(0.0),
            comm_s,
            workers: p,
            partition: part,
            comm: comms[0].counter(),
        })
    }
}

fn run_worker(
    replica: &mut Replica,
    comm: &Communicator,
    data: &Dataset,
    objective: &dyn Objective,
    opts: &EpochOptions,
    part: &Partition,
    order: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rank = comm.rank();
    let reducer: Option<Arc<dyn StatReducer>> = (comm.size() > 1).then(|| Arc::new(comm.clone()) as Arc<dyn StatReducer>);
    let mode = Mode::Train(reducer);
    let mut losses = Vec::with_capacity(part.batches);
    let mut theta = replica.model.flat_params();
    let mut last = Vec::new();
    for n in 0..part.batches {
        let idx: Vec<usize> = part.local_batch(n, rank).map(|pos| order[part.sample_at(pos)]).collect();
        let local = data.subset(&idx)?;
        let mut tape = Tape::new();
        let x = tape.constant(local.inputs);
        let c = tape.constant(local.coefficients);
        let rec = replica.model.record(&mut tape, x, &mode)?;
        let loss = objective.loss(&mut tape, rec.output, c)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let g = flat_grad(&replica.model, &mut grads, &rec.params);
        drop(tape);
        let g = comm.allreduce_average(&g, Traffic::Gradient)?;
        let l = comm.allreduce_average(&[value], Traffic::Loss)?[0];
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss in mini-batch {n}")));
        }
        replica.optimizer.update(&mut theta, &g)?;
        replica.model.set_flat_params(&theta)?;
        losses.push(l);
        last = g;
        if opts.replica_check == ReplicaCheck::EveryStep {
            check_replicas(comm, &replica.model)?;
        }
    }
    if opts.sync_bn {
        sync_bn_collective(comm, &mut replica.model)?;
    }
    if opts.replica_check == ReplicaCheck::EpochEnd {
        check_replicas(comm, &replica.model)?;
    }
    Ok((losses, last))
}

/// Mean objective of a model over `data` in evaluation mode.
pub fn evaluate(model: &ModelState, data: &Dataset, objective: &dyn Objective, chunk: usize) -> Result<f64> {
    if chunk == 0 {
        return Err(Error::invalid("evaluate", "chunk size must be positive"));
    }
    let mut total = 0.0;
    let n = data.len();
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let part = data.subset(&idx)?;
        let pred = model.predict(&part.inputs)?;
        let mut tape = Tape::new();
        let u = tape.constant(pred);
        let c = tape.constant(part.coefficients);
        let l = objective.loss(&mut tape, u, c)?;
        total += tape.value(l).item() * idx.len() as f64;
    }
    Ok(total / n as f64)
}
