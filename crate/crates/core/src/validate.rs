//! Error norms between predicted and reference solution fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mgtrain::InputFeature;
use crate::network::ModelState;
use crate::problem::{apply_bc_tensor, diffusivity_field, BoundaryMasks, GridSpec, OmegaSample};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorNorms {
    /// `||u - u_ref|| / ||u_ref||` over interior nodes.
    pub l2_rel: f64,
    /// Largest absolute nodal difference over interior nodes.
    pub linf: f64,
}

/// Norms over the non-Dirichlet nodes of single-sample fields.
pub fn interior_errors(u: &Tensor, reference: &Tensor, grid: &GridSpec) -> Result<ErrorNorms> {
    if u.shape() != reference.shape() {
        return Err(Error::invalid(
            "compare",
            format!("fields differ in shape: {:?} vs {:?}", u.shape(), reference.shape()),
        ));
    }
    let masks = BoundaryMasks::new(grid);
    let vol = grid.nodes();
    let (mut num, mut den, mut linf) = (0.0, 0.0, 0.0f64);
    for (i, (a, b)) in u.data().iter().zip(reference.data()).enumerate() {
        if masks.interior.data()[i % vol] == 1.0 {
            num += (a - b) * (a - b);
            den += b * b;
            linf = linf.max((a - b).abs());
        }
    }
    Ok(ErrorNorms {
        l2_rel: (num / den).sqrt(),
        linf,
    })
}

/// Network solution with boundary values imposed.
pub fn predict_solution(model: &ModelState, omega: &OmegaSample, grid: &GridSpec, feature: InputFeature) -> Result<Tensor> {
    let nu = diffusivity_field(omega, grid)?;
    let out = model.predict(&feature.apply(&nu))?;
    apply_bc_tensor(&out, &BoundaryMasks::new(grid))
}
