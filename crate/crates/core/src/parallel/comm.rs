//! In-process collectives for a fixed group of workers.
//!
//! Every collective deposits one vector per worker, waits for all peers,
//! combines the deposits with a fixed rank-ordered binary tree and waits again
//! before slots may be reused. Each worker evaluates the same tree, so all
//! receive bit-identical results.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::StatReducer;

/// Pairwise sum in rank order: `((v0 + v1) + (v2 + v3)) + ...`.
pub fn tree_sum(parts: &[&[f64]]) -> Vec<f64> {
    let mut level: Vec<Vec<f64>> = parts.iter().map(|p| p.to_vec()).collect();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        level = next;
    }
    level.pop().unwrap_or_default()
}

fn check_lengths(parts: &[&[f64]]) -> Result<()> {
    if let Some(first) = parts.first() {
        if let Some((rank, p)) = parts.iter().enumerate().find(|(_, p)| p.len() != first.len()) {
            return Err(Error::Collective(format!(
                "worker {rank} contributed {} values, worker 0 contributed {}",
                p.len(),
                first.len()
            )));
        }
    }
    Ok(())
}

/// Mean of one vector per worker, summed in tree order.
pub fn allreduce_average(parts: &[&[f64]]) -> Result<Vec<f64>> {
    if parts.is_empty() {
        return Err(Error::Collective("no workers".into()));
    }
    check_lengths(parts)?;
    let p = parts.len() as f64;
    let mut s = tree_sum(parts);
    if parts.len() > 1 {
        for v in &mut s {
            *v /= p;
        }
    }
    Ok(s)
}

/// What a collective carried, for accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Traffic {
    Gradient,
    Loss,
    /// Batch statistics pooled inside batch-norm layers.
    BnBatch,
    /// Running statistics averaged at synchronization points.
    BnSync,
    Digest,
}

const TRAFFIC: [Traffic; 5] = [
    Traffic::Gradient,
    Traffic::Loss,
    Traffic::BnBatch,
    Traffic::BnSync,
    Traffic::Digest,
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrafficStats {
    pub calls: u64,
    /// Payload contributed by this worker, `8 *` values per call.
    pub bytes: u64,
    /// Bytes of the most recent call.
    pub last_bytes: u64,
    pub seconds: f64,
}

/// Per-worker communication counters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommCounter {
    stats: [TrafficStats; 5],
}

impl CommCounter {
    fn slot(t: Traffic) -> usize {
        TRAFFIC.iter().position(|&x| x == t).expect("known traffic")
    }

    pub fn get(&self, t: Traffic) -> TrafficStats {
        self.stats[Self::slot(t)]
    }

    fn record(&mut self, t: Traffic, bytes: u64, elapsed: Duration) {
        let s = &mut self.stats[Self::slot(t)];
        s.calls += 1;
        s.bytes += bytes;
        s.last_bytes = bytes;
        s.seconds += elapsed.as_secs_f64();
    }

    pub fn seconds(&self) -> f64 {
        self.stats.iter().map(|s| s.seconds).sum()
    }

    pub fn merge_max_time(&mut self, other: &CommCounter) {
        for (a, b) in self.stats.iter_mut().zip(&other.stats) {
            a.seconds = a.seconds.max(b.seconds);
        }
    }
}

struct Slots {
    data: Vec<Option<Arc<Vec<f64>>>>,
    arrived: usize,
    generation: u64,
    failed: Option<String>,
}

/// Shared state of a worker group.
pub struct WorkerGroup {
    size: usize,
    state: Mutex<Slots>,
    cv: Condvar,
}

type Guard<'a> = MutexGuard<'a, Slots>;

impl WorkerGroup {
    pub fn new(size: usize) -> Arc<Self> {
        Arc::new(WorkerGroup {
            size,
            state: Mutex::new(Slots {
                data: vec![None; size],
                arrived: 0,
                generation: 0,
                failed: None,
            }),
            cv: Condvar::new(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Marks the group as failed so that peers blocked in a collective
    /// return an error instead of waiting forever.
    pub fn abort(&self, reason: &str) {
        let mut s = self.lock();
        if s.failed.is_none() {
            s.failed = Some(reason.to_string());
        }
        self.cv.notify_all();
    }

    fn lock(&self) -> Guard<'_> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn failure(s: &Slots) -> Error {
        Error::Collective(format!("peer failed: {}", s.failed.clone().unwrap_or_default()))
    }

    /// Barrier on the group; fails if any peer aborted.
    fn wait<'a>(&'a self, mut s: Guard<'a>) -> Result<Guard<'a>> {
        if s.failed.is_some() {
            return Err(Self::failure(&s));
        }
        let gen = s.generation;
        s.arrived += 1;
        if s.arrived == self.size {
            s.arrived = 0;
            s.generation += 1;
            self.cv.notify_all();
            return Ok(s);
        }
        while s.generation == gen && s.failed.is_none() {
            s = self.cv.wait(s).unwrap_or_else(|e| e.into_inner());
        }
        if s.generation == gen {
            return Err(Self::failure(&s));
        }
        Ok(s)
    }

    /// Deposits `local`, waits for all workers and returns every deposit in rank order.
    fn exchange(&self, rank: usize, local: &[f64]) -> Result<Vec<Arc<Vec<f64>>>> {
        let mut s = self.lock();
        s.data[rank] = Some(Arc::new(local.to_vec()));
        let s = self.wait(s)?;
        let all: Vec<Arc<Vec<f64>>> = s.data.iter().map(|d| d.clone().expect("all ranks deposited")).collect();
        // Slots may only be refilled once every worker has taken its references.
        drop(self.wait(s)?);
        Ok(all)
    }
}

/// One worker's handle on its group.
#[derive(Clone)]
pub struct Communicator {
    rank: usize,
    group: Arc<WorkerGroup>,
    counter: Arc<Mutex<CommCounter>>,
}

impl Communicator {
    pub fn new(rank: usize, group: Arc<WorkerGroup>) -> Self {
        Communicator {
            rank,
            group,
            counter: Arc::new(Mutex::new(CommCounter::default())),
        }
    }

    /// Handles for every rank of a fresh group.
    pub fn group(size: usize) -> Vec<Communicator> {
        let g = WorkerGroup::new(size);
        (0..size).map(|r| Communicator::new(r, g.clone())).collect()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.group.size
    }

    pub fn counter(&self) -> CommCounter {
        self.counter.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn reset_counter(&self) {
        *self.counter.lock().unwrap_or_else(|e| e.into_inner()) = CommCounter::default();
    }

    pub fn abort(&self, reason: &str) {
        self.group.abort(reason);
    }

    fn collect(&self, local: &[f64], traffic: Traffic) -> Result<Vec<Arc<Vec<f64>>>> {
        let start = Instant::now();
        let all = self.group.exchange(self.rank, local)?;
        self.counter
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .record(traffic, 8 * local.len() as u64, start.elapsed());
        Ok(all)
    }

    pub fn allreduce_sum(&self, local: &[f64], traffic: Traffic) -> Result<Vec<f64>> {
        let all = self.collect(local, traffic)?;
        let refs: Vec<&[f64]> = all.iter().map(|v| v.as_slice()).collect();
        check_lengths(&refs)?;
        Ok(tree_sum(&refs))
    }

    pub fn allreduce_average(&self, local: &[f64], traffic: Traffic) -> Result<Vec<f64>> {
        let all = self.collect(local, traffic)?;
        let refs: Vec<&[f64]> = all.iter().map(|v| v.as_slice()).collect();
        allreduce_average(&refs)
    }

    /// Every worker's vector, in rank order.
    pub fn allgather(&self, local: &[f64], traffic: Traffic) -> Result<Vec<Vec<f64>>> {
        Ok(self.collect(local, traffic)?.iter().map(|v| v.to_vec()).collect())
    }
}

impl StatReducer for Communicator {
    fn sum_across(&self, local: &[f64]) -> Result<Vec<f64>> {
        self.allreduce_sum(local, Traffic::BnBatch)
    }
}
