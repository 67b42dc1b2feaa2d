//! Numerical core: DC operating point by modified nodal analysis with
//! Newton iteration, and small-signal AC sweeps of the linearized circuit.

mod ac;
mod dc;
pub mod mosfet;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::KvConfig;
use crate::lde::{
    apply_arrangement, Arrangement, DeviceParams, DieSample, LdeError, LdeTable, MismatchTable,
    ModelCard,
};
use crate::netlist::{ArrangementSlot, Circuit, NodeId};

pub use ac::{
    ac_sweep, linearize, AcPoint, DeviceSmallSignal, FrequencyGrid, SmallSignalModel, Stimulus,
};
pub(crate) use dc::solve_with_overrides;
pub use dc::{branch_current, dc_operating_point, dc_power, DeviceState, OperatingPoint, Strategy};
pub use mosfet::{mosfet_eval, mosfet_eval_gmin, MosEval, Region, DEFAULT_GMIN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("DC solve did not converge: worst node `{worst_node}` residual {residual:.3e} A after {iterations} iterations")]
    NonConvergence {
        worst_node: String,
        residual: f64,
        iterations: usize,
    },
    #[error("singular MNA matrix at {frequency} Hz")]
    SingularMatrix { frequency: f64 },
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("device `{device}` sits in key slot `{group}` with no arrangement assigned")]
    UnresolvedSlot { device: String, group: String },
    #[error("no voltage source drives input node `{0}`")]
    NoInputSource(String),
    #[error("circuit has no {0} directive")]
    MissingDirective(&'static str),
    #[error("bad frequency range: {0}")]
    BadSweep(String),
    #[error(transparent)]
    Lde(#[from] LdeError),
}

/// Newton solver settings and convergence ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Max KCL residual at a converged point (A).
    pub residual_tol: f64,
    /// Max node-voltage update at a converged point (V).
    pub step_tol: f64,
    pub max_iterations: usize,
    /// Largest node-voltage change per Newton step (V).
    pub max_step: f64,
    pub gmin: f64,
    pub gmin_start: f64,
    pub gmin_stop: f64,
    pub source_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            residual_tol: 1e-9,
            step_tol: 1e-9,
            max_iterations: 200,
            max_step: 0.3,
            gmin: DEFAULT_GMIN,
            gmin_start: 1e-2,
            gmin_stop: 1e-12,
            source_steps: 10,
        }
    }
}

impl SolverOptions {
    /// Read `solver.*` keys over the defaults.
    pub fn from_config(cfg: &KvConfig) -> Result<Self, crate::config::ConfigError> {
        let d = SolverOptions::default();
        Ok(SolverOptions {
            residual_tol: cfg.parse_or("solver.residual_tol", d.residual_tol)?,
            step_tol: cfg.parse_or("solver.step_tol", d.step_tol)?,
            max_iterations: cfg.parse_or("solver.max_iterations", d.max_iterations)?,
            max_step: cfg.parse_or("solver.max_step", d.max_step)?,
            gmin: cfg.parse_or("solver.gmin", d.gmin)?,
            gmin_start: cfg.parse_or("solver.gmin_start", d.gmin_start)?,
            gmin_stop: cfg.parse_or("solver.gmin_stop", d.gmin_stop)?,
            source_steps: cfg.parse_or("solver.source_steps", d.source_steps)?,
        })
    }
}

/// Per-device parameters for every MOSFET in `c`, in circuit order.
///
/// Literal slots use their own arrangement; key slots look the device name up
/// in `assignment`. With `variation`, a die sample is applied on top.
pub fn resolve_params(
    c: &Circuit,
    card: &ModelCard,
    table: &LdeTable,
    assignment: &BTreeMap<String, Arrangement>,
    variation: Option<(&DieSample, &MismatchTable)>,
) -> Result<Vec<DeviceParams>, EngineError> {
    c.mosfets
        .iter()
        .map(|m| {
            let arr = match &m.slot {
                ArrangementSlot::Literal(a) => assignment.get(&m.name).copied().unwrap_or(*a),
                ArrangementSlot::Key(g) => {
                    *assignment
                        .get(&m.name)
                        .ok_or_else(|| EngineError::UnresolvedSlot {
                            device: m.name.clone(),
                            group: g.clone(),
                        })?
                }
            };
            let base = card.device_params(m.polarity, m.flavor, m.total_width(), m.length);
            let p = apply_arrangement(&base, m.polarity, m.flavor, arr, table)?;
            Ok(match variation {
                Some((die, mm)) => die.apply(&p, m.polarity, m.flavor, arr, mm),
                None => p,
            })
        })
        .collect()
}

/// Voltage source driving `node` against ground, with the sign of the node
/// voltage relative to the source value.
pub(crate) fn driving_source(c: &Circuit, node: NodeId) -> Option<(usize, f64)> {
    c.elements.iter().enumerate().find_map(|(i, e)| {
        if !matches!(e.kind, crate::netlist::ElementKind::Voltage { .. }) {
            return None;
        }
        if e.pos == node && e.neg.is_ground() {
            Some((i, 1.0))
        } else if e.neg == node && e.pos.is_ground() {
            Some((i, -1.0))
        } else {
            None
        }
    })
}
