use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleKind {
    V,
    W,
    F,
    HalfV,
    Base,
}

impl std::str::FromStr for CycleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "v" => Ok(CycleKind::V),
            "w" => Ok(CycleKind::W),
            "f" => Ok(CycleKind::F),
            "halfv" => Ok(CycleKind::HalfV),
            "base" => Ok(CycleKind::Base),
            _ => Err(Error::invalid("schedule", format!("unknown cycle kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// Train for exactly this many epochs.
    Fixed(usize),
    /// Train until early stopping fires.
    Converge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub resolution: usize,
    /// 0 is the finest level.
    pub level: usize,
    pub mode: StepMode,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: CycleKind,
    pub levels: usize,
    pub max_resolution: usize,
    pub steps: Vec<Step>,
}

/// Level visits of one cycle; 0 is the finest level, `levels - 1` the coarsest.
fn visits(kind: CycleKind, levels: usize) -> Vec<usize> {
    let coarsest = levels - 1;
    // Descend from `l` to the coarsest level and back, with `gamma` coarse
    // corrections at every level below the top.
    fn cycle(l: usize, coarsest: usize, gamma: usize, out: &mut Vec<usize>) {
        out.push(l);
        if l == coarsest {
            return;
        }
        for _ in 0..gamma {
            cycle(l + 1, coarsest, gamma, out);
            out.push(l);
        }
    }
    fn f_cycle(l: usize, coarsest: usize, out: &mut Vec<usize>) {
        out.push(l);
        if l == coarsest {
            return;
        }
        f_cycle(l + 1, coarsest, out);
        out.push(l);
        cycle(l + 1, coarsest, 1, out);
        out.push(l);
    }
    let mut out = Vec::new();
    match kind {
        CycleKind::Base => out.push(0),
        CycleKind::HalfV => out.extend((0..levels).rev()),
        CycleKind::V => cycle(0, coarsest, 1, &mut out),
        CycleKind::W | CycleKind::F => {
            // The top level is visited once on the way down and once on the way up.
            out.push(0);
            if levels > 1 {
                let mut inner = Vec::new();
                if kind == CycleKind::W {
                    cycle(1, coarsest, 2, &mut inner);
                } else {
                    f_cycle(1, coarsest, &mut inner);
                }
                out.extend(inner);
                out.push(0);
            }
        }
    }
    out
}

/// One cycle of the given kind over `levels` resolutions ending at `max_resolution`.
///
/// A visit is a fixed-length step when the next visit is coarser and a
/// train-to-convergence step otherwise.
pub fn make_schedule(kind: CycleKind, max_resolution: usize, levels: usize, fixed_epochs: usize) -> Result<Schedule> {
    if levels == 0 {
        return Err(Error::invalid("schedule", "at least one level is required"));
    }
    if max_resolution < 4 || !max_resolution.is_power_of_two() {
        return Err(Error::invalid(
            "schedule",
            format!("maximum resolution {max_resolution} must be a power of two of at least 4"),
        ));
    }
    if levels > 63 || (max_resolution >> (levels - 1)) < 4 {
        return Err(Error::invalid(
            "schedule",
            format!("{levels} levels below {max_resolution} reach a grid coarser than 4"),
        ));
    }
    if fixed_epochs == 0 {
        return Err(Error::invalid("schedule", "fixed steps need at least one epoch"));
    }
    let levels = if kind == CycleKind::Base { 1 } else { levels };
    let v = visits(kind, levels);
    let steps = v
        .iter()
        .enumerate()
        .map(|(i, &l)| Step {
            resolution: max_resolution >> l,
            level: l,
            mode: match v.get(i + 1) {
                Some(&next) if next > l => StepMode::Fixed(fixed_epochs),
                _ => StepMode::Converge,
            },
        })
        .collect();
    Ok(Schedule {
        kind,
        levels,
        max_resolution,
        steps,
    })
}

impl Schedule {
    /// Resolutions in visit order.
    pub fn resolutions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.resolution).collect()
    }

    /// Smallest resolution visited.
    pub fn coarsest(&self) -> usize {
        self.steps.iter().map(|s| s.resolution).min().unwrap_or(self.max_resolution)
    }
}
