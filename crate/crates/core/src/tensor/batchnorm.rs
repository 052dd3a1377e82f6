use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tape::{Backward, Tape, Var};
use super::{field_rank, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Per-channel running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Sums per-channel partial statistics across the workers sharing a global
/// mini-batch. Every worker must call it the same number of times, in the
/// same order.
pub trait StatReducer: Send + Sync {
    fn sum_across(&self, local: &[f64]) -> Result<Vec<f64>>;
}

/// Per-channel sums over batch and spatial positions, visited in layout order.
fn channel_sums(x: &Tensor, f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    let c = x.channels();
    let vol = x.sample_len() / c;
    let mut sums = vec![0.0; c];
    for n in 0..x.batch() {
        for (ch, acc) in sums.iter_mut().enumerate() {
            for &v in &x.data()[(n * c + ch) * vol..][..vol] {
                *acc += f(ch, v);
            }
        }
    }
    sums
}

fn channel_dot_sums(a: &Tensor, b: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let c = a.channels();
    let vol = a.sample_len() / c;
    let mut sums = vec![0.0; c];
    for n in 0..a.batch() {
        for (ch, acc) in sums.iter_mut().enumerate() {
            let base = (n * c + ch) * vol;
            for (i, &v) in a.data()[base..][..vol].iter().enumerate() {
                *acc += v * b(ch, base + i);
            }
        }
    }
    sums
}

struct BatchNormOp {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// Samples contributing to the statistics, over all workers; zero in
    /// evaluation mode where the statistics are constants.
    count: f64,
    reducer: Option<Arc<dyn StatReducer>>,
}

impl Backward for BatchNormOp {
    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c = x.channels();
        let vol = x.sample_len() / c;
        let xhat = |ch: usize, i: usize| (x.data()[i] - self.mean[ch]) * self.inv_std[ch];

        let sum_dy = channel_sums(grad, |_, v| v);
        let sum_dy_xhat = channel_dot_sums(grad, xhat);

        let dx = if needs[0] {
            let mut dx = Tensor::zeros(x.shape());
            if self.count > 0.0 {
                let mut local = sum_dy.clone();
                local.extend_from_slice(&sum_dy_xhat);
                let global = match &self.reducer {
                    Some(r) => r.sum_across(&local)?,
                    None => local,
                };
                let (g1, g2) = global.split_at(c);
                for n in 0..x.batch() {
                    for ch in 0..c {
                        let base = (n * c + ch) * vol;
                        let k = gamma.data()[ch] * self.inv_std[ch];
                        let (m1, m2) = (g1[ch] / self.count, g2[ch] / self.count);
                        for i in base..base + vol {
                            dx.data_mut()[i] = k * (grad.data()[i] - m1 - xhat(ch, i) * m2);
                        }
                    }
                }
            } else {
                for n in 0..x.batch() {
                    for ch in 0..c {
                        let k = gamma.data()[ch] * self.inv_std[ch];
                        let base = (n * c + ch) * vol;
                        for i in base..base + vol {
                            dx.data_mut()[i] = k * grad.data()[i];
                        }
                    }
                }
            }
            Some(dx)
        } else {
            None
        };
        Ok(vec![
            dx,
            Some(Tensor::new(vec![c], sum_dy_xhat)?),
            Some(Tensor::new(vec![c], sum_dy)?),
        ])
    }
}

/// Batch normalization over batch and spatial positions, per channel.
///
/// In training mode the statistics come from the current mini-batch. When
/// `reducer` is given the mini-batch is the union of all workers' local
/// batches, so the result does not depend on how it was split. Running
/// statistics are updated as `running = (1 - momentum) * running + momentum * batch`.
/// In evaluation mode the running statistics normalize the input.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm(
    tape: &mut Tape,
    input: Var,
    gamma: Var,
    beta: Var,
    stats: &mut BnStats,
    training: bool,
    momentum: f64,
    reducer: Option<&Arc<dyn StatReducer>>,
) -> Result<Var> {
    let x = tape.value(input);
    field_rank("batchnorm", x.shape())?;
    let c = x.channels();
    for (name, t) in [("gamma", tape.value(gamma)), ("beta", tape.value(beta))] {
        if t.len() != c {
            return Err(Error::shape("batchnorm", name, c, t.len()));
        }
    }
    if stats.channels() != c {
        return Err(Error::shape("batchnorm", "running statistics", c, stats.channels()));
    }

    let (mean, var, count) = if training {
        let local_count = (x.len() / c) as f64;
        let mut local = channel_sums(x, |_, v| v);
        local.push(local_count);
        let global = match reducer {
            Some(r) => r.sum_across(&local)?,
            None => local,
        };
        let count = global[c];
        let mean: Vec<f64> = global[..c].iter().map(|s| s / count).collect();
        let local_sq = channel_sums(x, |ch, v| (v - mean[ch]) * (v - mean[ch]));
        let sq = match reducer {
            Some(r) => r.sum_across(&local_sq)?,
            None => local_sq,
        };
        let var: Vec<f64> = sq.iter().map(|s| s / count).collect();
        for ch in 0..c {
            stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean[ch];
            stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * var[ch];
        }
        (mean, var, count)
    } else {
        (stats.mean.clone(), stats.var.clone(), 0.0)
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let (g, b) = (tape.value(gamma).data(), tape.value(beta).data());
    let vol = x.sample_len() / c;
    let mut out = x.clone();
    for n in 0..x.batch() {
        for ch in 0..c {
            for v in &mut out.data_mut()[(n * c + ch) * vol..][..vol] {
                *v = g[ch] * (*v - mean[ch]) * inv_std[ch] + b[ch];
            }
        }
    }
    let op = BatchNormOp {
        mean,
        inv_std,
        count,
        reducer: reducer.cloned(),
    };
    Ok(tape.push(out, &[input, gamma, beta], Box::new(op)))
}
