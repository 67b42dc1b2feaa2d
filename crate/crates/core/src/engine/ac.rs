//! Small-signal linearization and AC sweeps.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::dc::OperatingPoint;
use super::mosfet::{mosfet_eval_gmin, Region, DEFAULT_GMIN};
use super::{driving_source, EngineError};
use crate::lde::DeviceParams;
use crate::netlist::{Circuit, ElementKind, NodeId};

/// Linearized MOSFET in its conducting orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSmallSignal {
    pub name: String,
    pub gm: f64,
    pub gds: f64,
    pub gmb: f64,
    pub cgs: f64,
    pub cgd: f64,
    pub region: Region,
    /// Effective drain and source after any role exchange.
    pub drain: NodeId,
    pub source: NodeId,
    pub gate: NodeId,
    pub bulk: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallSignalModel {
    pub devices: Vec<DeviceSmallSignal>,
}

/// Linearize every MOSFET at `op`.
pub fn linearize(c: &Circuit, params: &[DeviceParams], op: &OperatingPoint) -> SmallSignalModel {
    let devices = c
        .mosfets
        .iter()
        .zip(params)
        .map(|(m, p)| {
            let v = |n: NodeId| op.voltage(n);
            let probe = mosfet_eval_gmin(
                p,
                m.polarity,
                v(m.gate) - v(m.source),
                v(m.drain) - v(m.source),
                v(m.bulk) - v(m.source),
                DEFAULT_GMIN,
            );
            let (d, s) = if probe.reversed {
                (m.source, m.drain)
            } else {
                (m.drain, m.source)
            };
            let e = if probe.reversed {
                mosfet_eval_gmin(
                    p,
                    m.polarity,
                    v(m.gate) - v(s),
                    v(d) - v(s),
                    v(m.bulk) - v(s),
                    DEFAULT_GMIN,
                )
            } else {
                probe
            };
            let cov = p.overlap_cap();
            let (cgs, cgd) = match e.region {
                Region::Saturation => (2.0 / 3.0 * p.cox_area_cap + cov, cov),
                Region::Triode => (0.5 * p.cox_area_cap + cov, 0.5 * p.cox_area_cap + cov),
                Region::Cutoff => (cov, cov),
            };
            DeviceSmallSignal {
                name: m.name.clone(),
                gm: e.did_dvgs,
                gds: e.did_dvds,
                gmb: e.did_dvbs,
                cgs,
                cgd,
                region: e.region,
                drain: d,
                source: s,
                gate: m.gate,
                bulk: m.bulk,
            }
        })
        .collect();
    SmallSignalModel { devices }
}

/// Log-spaced frequency grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub f_start: f64,
    pub f_stop: f64,
    pub points_per_decade: usize,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        FrequencyGrid {
            f_start: 1.0,
            f_stop: 1e9,
            points_per_decade: 20,
        }
    }
}

impl FrequencyGrid {
    pub fn new(f_start: f64, f_stop: f64, points_per_decade: usize) -> Result<Self, EngineError> {
        if !(f_start > 0.0 && f_start.is_finite()) || !(f_stop > f_start && f_stop.is_finite()) {
            return Err(EngineError::BadSweep(format!(
                "need 0 < f_start < f_stop, got {f_start}..{f_stop}"
            )));
        }
        if points_per_decade == 0 {
            return Err(EngineError::BadSweep(
                "points_per_decade must be at least 1".into(),
            ));
        }
        Ok(FrequencyGrid {
            f_start,
            f_stop,
            points_per_decade,
        })
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let decades = (self.f_stop / self.f_start).log10();
        let steps = (decades * self.points_per_decade as f64 - 1e-9)
            .ceil()
            .max(1.0) as usize;
        let mut out: Vec<f64> = (0..steps)
            .map(|i| self.f_start * 10f64.powf(i as f64 / self.points_per_decade as f64))
            .collect();
        out.push(self.f_stop);
        out
    }
}

/// Small-signal excitation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Stimulus {
    /// Unit differential drive split as +1/2 and -1/2 on the sources driving
    /// the two nodes; transfer is `V(probe) / (V(pos) - V(neg))`.
    Differential { pos: NodeId, neg: NodeId },
    /// Use the `AC` magnitudes written on the netlist's voltage sources;
    /// transfer is the raw probe voltage.
    Netlist,
}

impl Stimulus {
    /// Differential drive on the circuit's `.input` pair.
    pub fn from_circuit(c: &Circuit) -> Result<Stimulus, EngineError> {
        let (pos, neg) = c.input.ok_or(EngineError::MissingDirective(".input"))?;
        Ok(Stimulus::Differential { pos, neg })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcPoint {
    pub frequency: f64,
    pub transfer: Complex64,
}

impl AcPoint {
    pub fn magnitude_db(&self) -> f64 {
        20.0 * self.transfer.norm().log10()
    }

    /// Phase in degrees, wrapped to (-180, 180].
    pub fn phase_deg(&self) -> f64 {
        self.transfer.arg().to_degrees()
    }
}

fn source_excitation(c: &Circuit, stimulus: &Stimulus) -> Result<Vec<(usize, f64)>, EngineError> {
    match *stimulus {
        Stimulus::Netlist => Ok(c
            .elements
            .iter()
            .enumerate()
            .filter_map(|(i, e)| match e.kind {
                ElementKind::Voltage { ac } if ac != 0.0 => Some((i, ac)),
                _ => None,
            })
            .collect()),
        Stimulus::Differential { pos, neg } => {
            let halves = if pos.is_ground() || neg.is_ground() {
                1.0
            } else {
                0.5
            };
            let mut out = Vec::new();
            for (node, sign) in [(pos, 1.0), (neg, -1.0)] {
                if node.is_ground() {
                    continue;
                }
                let (idx, orient) = driving_source(c, node)
                    .ok_or_else(|| EngineError::NoInputSource(c.node_name(node).to_string()))?;
                out.push((idx, sign * orient * halves));
            }
            Ok(out)
        }
    }
}

/// Sweep the linearized circuit over `grid`, returning `V(probe)` relative
/// to the stimulus at each frequency.
pub fn ac_sweep(
    c: &Circuit,
    model: &SmallSignalModel,
    grid: &FrequencyGrid,
    stimulus: &Stimulus,
    probe: NodeId,
) -> Result<Vec<AcPoint>, EngineError> {
    let grid = FrequencyGrid::new(grid.f_start, grid.f_stop, grid.points_per_decade)?;
    let n = c.node_count() - 1;
    let vsrc: Vec<usize> = c
        .elements
        .iter()
        .enumerate()
        .filter(|(_, e)| matches!(e.kind, ElementKind::Voltage { .. }))
        .map(|(i, _)| i)
        .collect();
    let size = n + vsrc.len();
    let idx = |node: NodeId| {
        if node.is_ground() {
            None
        } else {
            Some(node.0 - 1)
        }
    };

    let mut g = DMatrix::<f64>::zeros(size, size);
    let mut cap = DMatrix::<f64>::zeros(size, size);
    let stamp = |m: &mut DMatrix<f64>, a: NodeId, b: NodeId, y: f64| {
        if let Some(i) = idx(a) {
            m[(i, i)] += y;
        }
        if let Some(j) = idx(b) {
            m[(j, j)] += y;
        }
        if let (Some(i), Some(j)) = (idx(a), idx(b)) {
            m[(i, j)] -= y;
            m[(j, i)] -= y;
        }
    };
    let vccs = |m: &mut DMatrix<f64>, row: NodeId, col: NodeId, y: f64| {
        if let (Some(i), Some(j)) = (idx(row), idx(col)) {
            m[(i, j)] += y;
        }
    };

    for e in &c.elements {
        match e.kind {
            ElementKind::Resistor => stamp(&mut g, e.pos, e.neg, 1.0 / e.value),
            ElementKind::Capacitor => stamp(&mut cap, e.pos, e.neg, e.value),
            _ => {}
        }
    }
    for (j, &ei) in vsrc.iter().enumerate() {
        let e = &c.elements[ei];
        let row = n + j;
        if let Some(p) = idx(e.pos) {
            g[(p, row)] += 1.0;
            g[(row, p)] += 1.0;
        }
        if let Some(q) = idx(e.neg) {
            g[(q, row)] -= 1.0;
            g[(row, q)] -= 1.0;
        }
    }
    for d in &model.devices {
        let sum = d.gm + d.gds + d.gmb;
        for (row, sign) in [(d.drain, 1.0), (d.source, -1.0)] {
            vccs(&mut g, row, d.gate, sign * d.gm);
            vccs(&mut g, row, d.drain, sign * d.gds);
            vccs(&mut g, row, d.bulk, sign * d.gmb);
            vccs(&mut g, row, d.source, -sign * sum);
        }
        stamp(&mut cap, d.gate, d.source, d.cgs);
        stamp(&mut cap, d.gate, d.drain, d.cgd);
    }

    let mut rhs = DVector::<Complex64>::zeros(size);
    for (ei, v) in source_excitation(c, stimulus)? {
        let j = vsrc
            .iter()
            .position(|&x| x == ei)
            .expect("excitation refers to a voltage source");
        rhs[n + j] = Complex64::new(v, 0.0);
    }
    let reference = |x: &DVector<Complex64>| -> Complex64 {
        match *stimulus {
            Stimulus::Differential { pos, neg } => {
                let v = |node: NodeId| idx(node).map_or(Complex64::new(0.0, 0.0), |i| x[i]);
                v(pos) - v(neg)
            }
            Stimulus::Netlist => Complex64::new(1.0, 0.0),
        }
    };

    let mut out = Vec::new();
    for f in grid.frequencies() {
        let w = 2.0 * PI * f;
        let y = DMatrix::<Complex64>::from_fn(size, size, |i, j| {
            Complex64::new(g[(i, j)], w * cap[(i, j)])
        });
        let x = y
            .lu()
            .solve(&rhs)
            .ok_or(EngineError::SingularMatrix { frequency: f })?;
        if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(EngineError::SingularMatrix { frequency: f });
        }
        let vout = idx(probe).map_or(Complex64::new(0.0, 0.0), |i| x[i]);
        out.push(AcPoint {
            frequency: f,
            transfer: vout / reference(&x),
        });
    }
    Ok(out)
}
