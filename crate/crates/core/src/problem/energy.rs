//! Discrete energy `J(u) = 1/2 int nu |grad u|^2 - int f u` on multilinear
//! elements with a two-point Gauss rule per axis.

use rayon::prelude::*;

use super::GridSpec;
use crate::error::{Error, Result};
use crate::tensor::{Backward, Tape, Tensor, Var};

/// Shape values and reference-cell gradients of the `2^rank` element basis
/// functions at the `2^rank` Gauss points.
struct Quadrature {
    rank: usize,
    corners: usize,
    weight: f64,
    /// `phi[q * corners + a]`
    phi: Vec<f64>,
    /// `dphi[(q * corners + a) * rank + d]`
    dphi: Vec<f64>,
}

impl Quadrature {
    fn new(rank: usize) -> Self {
        let g = [0.5 - 0.5 / 3f64.sqrt(), 0.5 + 0.5 / 3f64.sqrt()];
        let corners = 1 << rank;
        let mut phi = Vec::with_capacity(corners * corners);
        let mut dphi = Vec::with_capacity(corners * corners * rank);
        for q in 0..corners {
            let xi: Vec<f64> = (0..rank).map(|d| g[(q >> d) & 1]).collect();
            for a in 0..corners {
                let f = |d: usize| if (a >> d) & 1 == 1 { xi[d] } else { 1.0 - xi[d] };
                let df = |d: usize| if (a >> d) & 1 == 1 { 1.0 } else { -1.0 };
                phi.push((0..rank).map(f).product());
                for d in 0..rank {
                    dphi.push((0..rank).map(|e| if e == d { df(e) } else { f(e) }).product());
                }
            }
        }
        Quadrature {
            rank,
            corners,
            weight: 0.5f64.powi(rank as i32),
            phi,
            dphi,
        }
    }

    /// Linear offsets of the element corners relative to the element origin.
    fn corner_offsets(&self, n: usize) -> Vec<usize> {
        (0..self.corners)
            .map(|a| (a & 1) + ((a >> 1) & 1) * n + ((a >> 2) & 1) * n * n)
            .collect()
    }
}

fn element_origins(grid: &GridSpec) -> impl Iterator<Item = usize> {
    let n = grid.resolution;
    let depth = if grid.rank == 3 { n - 1 } else { 1 };
    (0..depth).flat_map(move |z| {
        (0..n - 1).flat_map(move |y| (0..n - 1).map(move |x| (z * n + y) * n + x))
    })
}

/// Energy of one sample, accumulating `dJ/du` into `grad` if given.
fn sample_energy(
    quad: &Quadrature,
    grid: &GridSpec,
    u: &[f64],
    nu: &[f64],
    forcing: Option<&[f64]>,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let (rank, corners) = (quad.rank, quad.corners);
    let h = grid.h();
    let stiff_scale = h.powi(rank as i32 - 2) * quad.weight;
    let load_scale = h.powi(rank as i32) * quad.weight;
    let offsets = quad.corner_offsets(grid.resolution);
    let mut ue = [0.0; 8];
    let mut ne = [0.0; 8];
    let mut fe = [0.0; 8];
    let mut ge = [0.0; 8];
    let mut total = 0.0;
    for origin in element_origins(grid) {
        for a in 0..corners {
            ue[a] = u[origin + offsets[a]];
            ne[a] = nu[origin + offsets[a]];
            if let Some(f) = forcing {
                fe[a] = f[origin + offsets[a]];
            }
        }
        ge[..corners].fill(0.0);
        for q in 0..corners {
            let phi = &quad.phi[q * corners..][..corners];
            let dphi = &quad.dphi[q * corners * rank..][..corners * rank];
            let mut grad_u = [0.0; 3];
            let mut nu_q = 0.0;
            for a in 0..corners {
                nu_q += phi[a] * ne[a];
                for d in 0..rank {
                    grad_u[d] += dphi[a * rank + d] * ue[a];
                }
            }
            let sq: f64 = grad_u[..rank].iter().map(|g| g * g).sum();
            total += 0.5 * stiff_scale * nu_q * sq;
            let mut f_q = 0.0;
            if forcing.is_some() {
                let u_q: f64 = (0..corners).map(|a| phi[a] * ue[a]).sum();
                f_q = (0..corners).map(|a| phi[a] * fe[a]).sum();
                total -= load_scale * f_q * u_q;
            }
            if grad.is_some() {
                for a in 0..corners {
                    let dot: f64 = (0..rank).map(|d| dphi[a * rank + d] * grad_u[d]).sum();
                    ge[a] += stiff_scale * nu_q * dot - load_scale * f_q * phi[a];
                }
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            for a in 0..corners {
                g[origin + offsets[a]] += ge[a];
            }
        }
    }
    total
}

fn check_inputs(op: &'static str, u: &Tensor, nu: &Tensor, f: Option<&Tensor>, grid: &GridSpec) -> Result<()> {
    grid.check_field(op, u)?;
    grid.check_field(op, nu)?;
    if nu.batch() != u.batch() && nu.batch() != 1 {
        return Err(Error::shape(op, "batch", u.batch(), nu.batch()));
    }
    if let Some(f) = f {
        grid.check_field(op, f)?;
        if f.batch() != u.batch() && f.batch() != 1 {
            return Err(Error::shape(op, "batch", u.batch(), f.batch()));
        }
    }
    Ok(())
}

/// Selects sample `n` of a field that is either batched or shared.
fn sample(t: &Tensor, n: usize, vol: usize) -> &[f64] {
    let n = if t.batch() == 1 { 0 } else { n };
    &t.data()[n * vol..][..vol]
}

fn evaluate(
    u: &Tensor,
    nu: &Tensor,
    forcing: Option<&Tensor>,
    grid: &GridSpec,
    with_grad: bool,
) -> (Vec<f64>, Option<Tensor>) {
    let quad = Quadrature::new(grid.rank);
    let vol = grid.nodes();
    let mut grad = with_grad.then(|| Tensor::zeros(u.shape()));
    let energies: Vec<f64> = match grad.as_mut() {
        Some(g) => g
            .data_mut()
            .par_chunks_mut(vol)
            .enumerate()
            .map(|(n, gs)| {
                let f = forcing.map(|f| sample(f, n, vol));
                sample_energy(&quad, grid, sample(u, n, vol), sample(nu, n, vol), f, Some(gs))
            })
            .collect(),
        None => (0..u.batch())
            .into_par_iter()
            .map(|n| {
                let f = forcing.map(|f| sample(f, n, vol));
                sample_energy(&quad, grid, sample(u, n, vol), sample(nu, n, vol), f, None)
            })
            .collect(),
    };
    (energies, grad)
}

/// Per-sample energies of a batch of nodal fields.
pub fn energy_per_sample(u: &Tensor, nu: &Tensor, grid: &GridSpec) -> Result<Vec<f64>> {
    check_inputs("energy", u, nu, None, grid)?;
    Ok(evaluate(u, nu, None, grid, false).0)
}

struct EnergyOp {
    grid: GridSpec,
    forcing: Option<Tensor>,
}

impl Backward for EnergyOp {
    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        if needs[1] {
            return Err(Error::invalid("energy", "gradient with respect to the diffusivity is not supported"));
        }
        let (u, nu) = (inputs[0], inputs[1]);
        let (_, g) = evaluate(u, nu, self.forcing.as_ref(), &self.grid, true);
        let scale = grad.item() / u.batch() as f64;
        let g = g.map(|g| g.map(|v| v * scale));
        Ok(vec![g, None])
    }
}

/// Batch-mean energy with zero forcing. `nu` is a constant of the tape and
/// may be shared by all samples (batch 1).
pub fn energy_loss(tape: &mut Tape, u: Var, nu: Var, grid: &GridSpec) -> Result<Var> {
    energy_loss_with_forcing(tape, u, nu, None, grid)
}

/// Batch-mean energy `1/2 int nu |grad u|^2 - int f u` with a nodal forcing field.
pub fn energy_loss_with_forcing(
    tape: &mut Tape,
    u: Var,
    nu: Var,
    forcing: Option<&Tensor>,
    grid: &GridSpec,
) -> Result<Var> {
    let (ut, nt) = (tape.value(u), tape.value(nu));
    check_inputs("energy", ut, nt, forcing, grid)?;
    let (per_sample, _) = evaluate(ut, nt, forcing, grid, false);
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    let op = EnergyOp {
        grid: *grid,
        forcing: forcing.cloned(),
    };
    Ok(tape.push(Tensor::scalar(mean), &[u, nu], Box::new(op)))
}
