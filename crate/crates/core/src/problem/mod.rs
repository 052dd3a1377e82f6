//! The parametric Poisson problem: log-permeability diffusivity fields,
//! quasi-random parameter sampling, exact Dirichlet masking and the
//! variational energy used as a training loss.
//!
//! Fields are nodal on `N` nodes per axis covering `[0, 1]` inclusive. The
//! `x` coordinate runs along the last (width) axis, `y` along height and `z`
//! along depth. The problem is
//!
//! ```text
//! -div(nu grad u) = 0,  u = 1 on x = 0,  u = 0 on x = 1,  du/dn = 0 elsewhere.
//! ```

mod energy;
mod sobol;

pub use energy::{energy_loss, energy_loss_with_forcing, energy_per_sample};
pub use sobol::Sobol4;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{affine_field, Tape, Tensor, Var};

/// Number of terms in the log-permeability expansion.
pub const TERMS: usize = 4;
/// Wave numbers of the expansion.
pub const WAVE_NUMBERS: [f64; TERMS] = [1.72, 4.05, 6.85, 9.82];
/// Parameters live in `[OMEGA_MIN, OMEGA_MAX]^4`.
pub const OMEGA_MIN: f64 = -3.0;
pub const OMEGA_MAX: f64 = 3.0;

/// Expansion weights `1 / (1 + a^2 / 4)`, strictly decreasing.
pub fn eigen_weights() -> [f64; TERMS] {
    WAVE_NUMBERS.map(|a| 1.0 / (1.0 + 0.25 * a * a))
}

/// A point of the parameter box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaSample(pub [f64; TERMS]);

impl OmegaSample {
    pub fn zero() -> Self {
        OmegaSample([0.0; TERMS])
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &w) in self.0.iter().enumerate() {
            if !(OMEGA_MIN..=OMEGA_MAX).contains(&w) {
                return Err(Error::invalid(
                    "omega",
                    format!("component {i} = {w} outside [{OMEGA_MIN}, {OMEGA_MAX}]"),
                ));
            }
        }
        Ok(())
    }
}

/// Uniform nodal grid on the unit square or cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    /// Nodes per axis.
    pub resolution: usize,
    /// 2 or 3.
    pub rank: usize,
}

impl GridSpec {
    pub fn new(resolution: usize, rank: usize) -> Result<Self> {
        if !(2..=3).contains(&rank) {
            return Err(Error::invalid("grid", format!("rank must be 2 or 3, found {rank}")));
        }
        if resolution < 4 || !resolution.is_power_of_two() {
            return Err(Error::invalid(
                "grid",
                format!("resolution must be a power of two >= 4, found {resolution}"),
            ));
        }
        Ok(GridSpec { resolution, rank })
    }

    /// Node spacing.
    pub fn h(&self) -> f64 {
        1.0 / (self.resolution - 1) as f64
    }

    pub fn nodes(&self) -> usize {
        self.resolution.pow(self.rank as u32)
    }

    /// Shape of a single-sample, single-channel field.
    pub fn field_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch, 1];
        s.extend(std::iter::repeat_n(self.resolution, self.rank));
        s
    }

    /// Node coordinates `[x, y, z]` of linear node index `i` (`z = 0` in 2D).
    pub fn coords(&self, i: usize) -> [f64; 3] {
        let n = self.resolution;
        let h = self.h();
        [
            (i % n) as f64 * h,
            ((i / n) % n) as f64 * h,
            (i / (n * n)) as f64 * h,
        ]
    }

    pub(crate) fn check_field(&self, op: &'static str, t: &Tensor) -> Result<()> {
        let expected = self.field_shape(t.batch());
        if t.shape() != expected.as_slice() {
            return Err(Error::invalid(
                op,
                format!("field of shape {:?} is not on grid {:?}", t.shape(), self),
            ));
        }
        Ok(())
    }
}

fn mode(a: f64, t: f64) -> f64 {
    0.5 * a * (a * t).cos() + (a * t).sin()
}

/// `log nu` at a point of the unit domain (`z` ignored in 2D).
pub fn log_diffusivity_at(omega: &OmegaSample, point: [f64; 3], rank: usize) -> f64 {
    let lambda = eigen_weights();
    (0..TERMS)
        .map(|i| {
            let a = WAVE_NUMBERS[i];
            let mut term = omega.0[i] * lambda[i] * mode(a, point[0]) * mode(a, point[1]);
            if rank == 3 {
                term *= mode(a, point[2]);
            }
            term
        })
        .sum()
}

/// Nodal diffusivity `nu(x; omega)` as a `[1, 1, N..]` field.
pub fn diffusivity_field(omega: &OmegaSample, grid: &GridSpec) -> Result<Tensor> {
    omega.validate()?;
    let shape = grid.field_shape(1);
    Ok(Tensor::from_fn(&shape, |i| {
        log_diffusivity_at(omega, grid.coords(i), grid.rank).exp()
    }))
}

/// Diffusivity fields of several samples stacked along the batch axis.
pub fn diffusivity_batch(omegas: &[OmegaSample], grid: &GridSpec) -> Result<Tensor> {
    let fields = omegas
        .iter()
        .map(|w| diffusivity_field(w, grid))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&fields.iter().collect::<Vec<_>>())
}

/// `count` low-discrepancy parameters mapped affinely onto the parameter box.
pub fn sample_omegas(count: usize, seed: u64) -> Vec<OmegaSample> {
    Sobol4::seeded(seed)
        .take(count)
        .map(|p| OmegaSample(p.map(|u| OMEGA_MIN + (OMEGA_MAX - OMEGA_MIN) * u)))
        .collect()
}

/// Interior/Dirichlet indicators and lifted boundary values on a grid.
#[derive(Clone, Debug)]
pub struct BoundaryMasks {
    pub interior: Tensor,
    pub dirichlet: Tensor,
    /// 1 on the `x = 0` face, 0 elsewhere.
    pub values: Tensor,
}

impl BoundaryMasks {
    pub fn new(grid: &GridSpec) -> Self {
        let shape = grid.field_shape(1);
        let n = grid.resolution;
        let on_face = |i: usize| {
            let col = i % n;
            col == 0 || col == n - 1
        };
        BoundaryMasks {
            interior: Tensor::from_fn(&shape, |i| if on_face(i) { 0.0 } else { 1.0 }),
            dirichlet: Tensor::from_fn(&shape, |i| if on_face(i) { 1.0 } else { 0.0 }),
            values: Tensor::from_fn(&shape, |i| if i % n == 0 { 1.0 } else { 0.0 }),
        }
    }

    /// `values * dirichlet`, the constant part of [`apply_bc`].
    fn lifted(&self) -> Tensor {
        let mut t = self.values.clone();
        for (v, m) in t.data_mut().iter_mut().zip(self.dirichlet.data()) {
            *v *= m;
        }
        t
    }
}

/// `u = u_int * interior + values * dirichlet`, recorded on the tape.
pub fn apply_bc(tape: &mut Tape, u_int: Var, masks: &BoundaryMasks) -> Result<Var> {
    affine_field(tape, u_int, &masks.interior, &masks.lifted())
}

/// Untracked version of [`apply_bc`].
pub fn apply_bc_tensor(u_int: &Tensor, masks: &BoundaryMasks) -> Result<Tensor> {
    let mut tape = Tape::new();
    let u = tape.constant(u_int.clone());
    let out = apply_bc(&mut tape, u, masks)?;
    Ok(tape.value(out).clone())
}

/// Multilinear interpolation of nodal fields between grids on the unit domain.
pub fn resample_field(field: &Tensor, from: &GridSpec, to: &GridSpec) -> Result<Tensor> {
    if from.rank != to.rank {
        return Err(Error::invalid("resample_field", "grids differ in rank"));
    }
    let planes = field.batch() * field.channels();
    let expect_from: Vec<usize> = std::iter::repeat_n(from.resolution, from.rank).collect();
    if field.spatial() != expect_from.as_slice() {
        return Err(Error::invalid(
            "resample_field",
            format!("field of shape {:?} is not on grid {:?}", field.shape(), from),
        ));
    }
    let (ns, nt) = (from.resolution, to.resolution);
    // Per target index along one axis: (lower source index, weight of upper).
    let stencil: Vec<(usize, f64)> = (0..nt)
        .map(|j| {
            let s = j as f64 * (ns - 1) as f64 / (nt - 1) as f64;
            let i0 = (s.floor() as usize).min(ns - 2);
            (i0, s - i0 as f64)
        })
        .collect();
    let (vs, vt) = (from.nodes(), to.nodes());
    let mut shape = field.shape()[..2].to_vec();
    shape.extend(std::iter::repeat_n(nt, to.rank));
    let mut out = vec![0.0; planes * vt];
    let depth_t = if to.rank == 3 { nt } else { 1 };
    for p in 0..planes {
        let src = &field.data()[p * vs..][..vs];
        let dst = &mut out[p * vt..][..vt];
        for z in 0..depth_t {
            for y in 0..nt {
                for x in 0..nt {
                    let (ix, tx) = stencil[x];
                    let (iy, ty) = stencil[y];
                    let bilinear = |zoff: usize| {
                        let at = |yy: usize, xx: usize| src[zoff + yy * ns + xx];
                        (1.0 - ty) * ((1.0 - tx) * at(iy, ix) + tx * at(iy, ix + 1))
                            + ty * ((1.0 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1))
                    };
                    let v = if to.rank == 3 {
                        let (iz, tz) = stencil[z];
                        (1.0 - tz) * bilinear(iz * ns * ns) + tz * bilinear((iz + 1) * ns * ns)
                    } else {
                        bilinear(0)
                    };
                    dst[(z * nt + y) * nt + x] = v;
                }
            }
        }
    }
    Tensor::new(shape, out)
}
