//! Reference finite-element solver: multilinear stiffness assembly for a
//! nodal diffusivity, symmetric Dirichlet elimination and conjugate gradients.

use crate::error::{Error, Result};
use crate::problem::{diffusivity_field, BoundaryMasks, GridSpec, OmegaSample};
use crate::tensor::Tensor;

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
    symmetric: bool,
}

impl SparseMatrix {
    /// Builds an `n x n` matrix, summing duplicate entries.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>, symmetric: bool) -> Result<Self> {
        if let Some(&(i, j, _)) = triplets.iter().find(|(i, j, _)| *i >= n || *j >= n) {
            return Err(Error::invalid("sparse", format!("entry ({i}, {j}) outside {n} x {n}")));
        }
        triplets.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last = None;
        for (i, j, v) in triplets {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                cols.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(SparseMatrix {
            n,
            row_ptr,
            cols,
            values,
            symmetric,
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            n,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            values: vec![1.0; n],
            symmetric: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Stored entries of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    /// `x^T A x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul(x))
    }

    /// Largest `|A_ij - A_ji|` over stored entries.
    pub fn asymmetry(&self) -> f64 {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v)))
            .map(|(i, j, v)| (v - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Element stiffness `int nu grad(phi_a) . grad(phi_b)` on a cell of side `h`
/// with nodal diffusivity `nu_e`, by two-point Gauss quadrature per axis.
fn element_matrix(rank: usize, h: f64, nu_e: &[f64]) -> Vec<f64> {
    let m = 1 << rank;
    let r = 1.0 / 3f64.sqrt();
    // Corner a sits at reference coordinate s_d = -1 or +1 on [-1, 1]^rank.
    let sign = |a: usize, d: usize| if (a >> d) & 1 == 1 { 1.0 } else { -1.0 };
    let mut k = vec![0.0; m * m];
    for q in 0..m {
        let p: Vec<f64> = (0..rank).map(|d| sign(q, d) * r).collect();
        let shape = |a: usize| (0..rank).map(|d| 0.5 * (1.0 + sign(a, d) * p[d])).product::<f64>();
        // d(phi_a)/dx_d in physical units, the reference Jacobian being h/2.
        let deriv = |a: usize, d: usize| {
            (0..rank)
                .map(|e| if e == d { 0.5 * sign(a, e) } else { 0.5 * (1.0 + sign(a, e) * p[e]) })
                .product::<f64>()
                * 2.0
                / h
        };
        let nu_q: f64 = (0..m).map(|a| shape(a) * nu_e[a]).sum();
        // Gauss weights are 1 on [-1, 1]; the volume factor is (h/2)^rank.
        let jw = (0.5 * h).powi(rank as i32);
        for a in 0..m {
            for b in 0..m {
                let g: f64 = (0..rank).map(|d| deriv(a, d) * deriv(b, d)).sum();
                k[a * m + b] += jw * nu_q * g;
            }
        }
    }
    k
}

/// Assembled linear system for one diffusivity field.
#[derive(Clone, Debug)]
pub struct System {
    /// Stiffness with Dirichlet rows and columns replaced by the identity.
    pub matrix: SparseMatrix,
    /// Right-hand side carrying the lifted boundary values.
    pub rhs: Vec<f64>,
    /// Stiffness before elimination (pure Neumann operator).
    pub stiffness: SparseMatrix,
    pub dirichlet: Vec<bool>,
    pub boundary_values: Vec<f64>,
}

/// Assembles the stiffness system for a single nodal diffusivity `[1, 1, N..]`.
pub fn assemble(nu: &Tensor, grid: &GridSpec) -> Result<System> {
    grid.check_field("assemble", nu)?;
    if nu.batch() != 1 {
        return Err(Error::shape("assemble", "batch", 1, nu.batch()));
    }
    if let Some(v) = nu.data().iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("assemble", format!("diffusivity must be positive, found {v}")));
    }
    let n = grid.resolution;
    let rank = grid.rank;
    let m = 1 << rank;
    let h = grid.h();
    let nodes = grid.nodes();
    let depth = if rank == 3 { n - 1 } else { 1 };
    let mut triplets = Vec::with_capacity((n - 1).pow(rank as u32) * m * m);
    let mut idx = vec![0; m];
    let mut nu_e = vec![0.0; m];
    for ez in 0..depth {
        for ey in 0..n - 1 {
            for ex in 0..n - 1 {
                for (a, id) in idx.iter_mut().enumerate() {
                    let (x, y, z) = (ex + (a & 1), ey + ((a >> 1) & 1), ez + ((a >> 2) & 1));
                    *id = (z * n + y) * n + x;
                    nu_e[a] = nu.data()[*id];
                }
                let k = element_matrix(rank, h, &nu_e);
                for a in 0..m {
                    for b in 0..m {
                        triplets.push((idx[a], idx[b], k[a * m + b]));
                    }
                }
            }
        }
    }
    let stiffness = SparseMatrix::from_triplets(nodes, triplets, true)?;

    let masks = BoundaryMasks::new(grid);
    let dirichlet: Vec<bool> = masks.dirichlet.data().iter().map(|&v| v == 1.0).collect();
    let boundary_values: Vec<f64> = masks.values.data().to_vec();
    let mut rhs = vec![0.0; nodes];
    let mut reduced = Vec::with_capacity(stiffness.nnz());
    for i in 0..nodes {
        if dirichlet[i] {
            reduced.push((i, i, 1.0));
            rhs[i] = boundary_values[i];
            continue;
        }
        for (j, v) in stiffness.row(i) {
            if dirichlet[j] {
                rhs[i] -= v * boundary_values[j];
            } else {
                reduced.push((i, j, v));
            }
        }
    }
    Ok(System {
        matrix: SparseMatrix::from_triplets(nodes, reduced, true)?,
        rhs,
        stiffness,
        dirichlet,
        boundary_values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgOptions {
    /// Relative residual target `||Ax - b|| / ||b||`.
    pub tol: f64,
    pub max_iter: usize,
    /// Diagonal preconditioning.
    pub jacobi: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            tol: 1e-12,
            max_iter: 100_000,
            jacobi: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final relative residual, recomputed from `b - Ax`.
    pub residual: f64,
}

/// Conjugate gradients from a zero initial guess.
pub fn solve_cg(a: &SparseMatrix, rhs: &[f64], opts: &CgOptions) -> Result<CgSolution> {
    if rhs.len() != a.dim() {
        return Err(Error::shape("solve_cg", "rhs", a.dim(), rhs.len()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("solve_cg", "tolerance must be positive"));
    }
    let n = a.dim();
    let b_norm = norm(rhs);
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
        });
    }
    let inv_diag: Option<Vec<f64>> = opts.jacobi.then(|| a.diagonal().iter().map(|d| 1.0 / d).collect());
    let precondition = |r: &[f64], z: &mut Vec<f64>| match &inv_diag {
        Some(d) => {
            z.clear();
            z.extend(r.iter().zip(d).map(|(r, d)| r * d));
        }
        None => {
            z.clear();
            z.extend_from_slice(r);
        }
    };
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut z = Vec::with_capacity(n);
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut iterations = 0;
    let mut rel = 1.0;
    while iterations < opts.max_iter {
        a.matvec(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iterations += 1;
        rel = norm(&r) / b_norm;
        if rel <= opts.tol {
            // Guard against drift of the recursive residual.
            let true_rel = norm(&residual(a, &x, rhs)) / b_norm;
            if true_rel <= opts.tol {
                return Ok(CgSolution {
                    x,
                    iterations,
                    residual: true_rel,
                });
            }
            r = residual(a, &x, rhs);
            rel = true_rel;
        }
        precondition(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        if !rel.is_finite() {
            break;
        }
    }
    Err(Error::NotConverged {
        iterations,
        residual: rel,
    })
}

fn residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let ax = a.mul(x);
    b.iter().zip(ax).map(|(b, ax)| b - ax).collect()
}

/// Solves the boundary-value problem for a given nodal diffusivity.
pub fn solve_field(nu: &Tensor, grid: &GridSpec, opts: &CgOptions) -> Result<Tensor> {
    let sys = assemble(nu, grid)?;
    let sol = solve_cg(&sys.matrix, &sys.rhs, opts)?;
    let mut x = sol.x;
    // Elimination makes boundary rows trivial; restore them bit-exactly.
    for i in 0..x.len() {
        if sys.dirichlet[i] {
            x[i] = sys.boundary_values[i];
        }
    }
    Tensor::new(grid.field_shape(1), x)
}

/// Reference solution `u(x; omega)` at tolerance 1e-12.
pub fn fem_solution(omega: &OmegaSample, grid: &GridSpec) -> Result<Tensor> {
    fem_solution_with(omega, grid, &CgOptions::default())
}

pub fn fem_solution_with(omega: &OmegaSample, grid: &GridSpec, opts: &CgOptions) -> Result<Tensor> {
    solve_field(&diffusivity_field(omega, grid)?, grid, opts)
}
