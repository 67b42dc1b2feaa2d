//! DC operating point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mosfet::{mosfet_eval_gmin, Region};
use super::{EngineError, SolverOptions};
use crate::lde::DeviceParams;
use crate::netlist::{Circuit, ElementKind, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Newton,
    GminStepping,
    SourceRamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub name: String,
    /// Current into the drain terminal (A).
    pub id: f64,
    pub vgs: f64,
    pub vds: f64,
    pub vbs: f64,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Indexed by node id; ground is entry 0.
    pub node_voltages: Vec<f64>,
    /// Current through each voltage source from its `+` to its `-` terminal,
    /// keyed by element index.
    pub source_currents: Vec<(usize, f64)>,
    pub devices: Vec<DeviceState>,
    pub iterations: usize,
    pub strategy: Strategy,
    /// Largest KCL residual over non-ground nodes (A).
    pub max_residual: f64,
}

impl OperatingPoint {
    pub fn voltage(&self, n: NodeId) -> f64 {
        self.node_voltages[n.0]
    }

    pub fn source_current(&self, element: usize) -> Option<f64> {
        self.source_currents
            .iter()
            .find(|(i, _)| *i == element)
            .map(|(_, a)| *a)
    }
}

pub(crate) struct Mna<'a> {
    pub c: &'a Circuit,
    pub params: &'a [DeviceParams],
    /// Node unknowns (ground excluded).
    pub n: usize,
    /// Element indices of voltage sources, in unknown order.
    pub vsrc: Vec<usize>,
    /// Source value overrides by element index.
    pub overrides: Vec<(usize, f64)>,
}

struct Failure {
    iterations: usize,
    residual: f64,
    worst: usize,
}

impl<'a> Mna<'a> {
    pub fn new(c: &'a Circuit, params: &'a [DeviceParams]) -> Self {
        let vsrc = c
            .elements
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(e.kind, ElementKind::Voltage { .. }))
            .map(|(i, _)| i)
            .collect();
        Mna {
            c,
            params,
            n: c.node_count() - 1,
            vsrc,
            overrides: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.n + self.vsrc.len()
    }

    fn idx(node: NodeId) -> Option<usize> {
        if node.is_ground() {
            None
        } else {
            Some(node.0 - 1)
        }
    }

    fn value(&self, element: usize) -> f64 {
        self.overrides
            .iter()
            .find(|(i, _)| *i == element)
            .map(|(_, v)| *v)
            .unwrap_or(self.c.elements[element].value)
    }

    fn volt(x: &[f64], node: NodeId) -> f64 {
        Self::idx(node).map_or(0.0, |i| x[i])
    }

    /// Residual `f(x)` (currents leaving each node, then source constraints) and Jacobian.
    fn assemble(
        &self,
        x: &[f64],
        scale: f64,
        gshunt: f64,
        gmin: f64,
        jac: &mut DMatrix<f64>,
        f: &mut DVector<f64>,
    ) {
        jac.fill(0.0);
        f.fill(0.0);
        let add_f = |f: &mut DVector<f64>, node: NodeId, v: f64| {
            if let Some(i) = Self::idx(node) {
                f[i] += v;
            }
        };
        let add_j = |jac: &mut DMatrix<f64>, r: NodeId, c: NodeId, v: f64| {
            if let (Some(i), Some(j)) = (Self::idx(r), Self::idx(c)) {
                jac[(i, j)] += v;
            }
        };

        for (ei, e) in self.c.elements.iter().enumerate() {
            match e.kind {
                ElementKind::Resistor => {
                    let g = 1.0 / e.value;
                    let i = g * (Self::volt(x, e.pos) - Self::volt(x, e.neg));
                    add_f(f, e.pos, i);
                    add_f(f, e.neg, -i);
                    add_j(jac, e.pos, e.pos, g);
                    add_j(jac, e.neg, e.neg, g);
                    add_j(jac, e.pos, e.neg, -g);
                    add_j(jac, e.neg, e.pos, -g);
                }
                ElementKind::Capacitor => {}
                ElementKind::Current => {
                    let v = self.value(ei) * scale;
                    add_f(f, e.pos, v);
                    add_f(f, e.neg, -v);
                }
                ElementKind::Voltage { .. } => {}
            }
        }

        for (j, &ei) in self.vsrc.iter().enumerate() {
            let e = &self.c.elements[ei];
            let row = self.n + j;
            let cur = x[row];
            add_f(f, e.pos, cur);
            add_f(f, e.neg, -cur);
            if let Some(p) = Self::idx(e.pos) {
                jac[(p, row)] += 1.0;
                jac[(row, p)] += 1.0;
            }
            if let Some(m) = Self::idx(e.neg) {
                jac[(m, row)] -= 1.0;
                jac[(row, m)] -= 1.0;
            }
            f[row] = Self::volt(x, e.pos) - Self::volt(x, e.neg) - self.value(ei) * scale;
        }

        for (m, p) in self.c.mosfets.iter().zip(self.params) {
            let (vd, vg, vs, vb) = (
                Self::volt(x, m.drain),
                Self::volt(x, m.gate),
                Self::volt(x, m.source),
                Self::volt(x, m.bulk),
            );
            let e = mosfet_eval_gmin(p, m.polarity, vg - vs, vd - vs, vb - vs, gmin);
            add_f(f, m.drain, e.id);
            add_f(f, m.source, -e.id);
            let gsum = e.did_dvgs + e.did_dvds + e.did_dvbs;
            for (row, sign) in [(m.drain, 1.0), (m.source, -1.0)] {
                add_j(jac, row, m.gate, sign * e.did_dvgs);
                add_j(jac, row, m.drain, sign * e.did_dvds);
                add_j(jac, row, m.bulk, sign * e.did_dvbs);
                add_j(jac, row, m.source, -sign * gsum);
            }
        }

        if gshunt > 0.0 {
            for i in 0..self.n {
                f[i] += gshunt * x[i];
                jac[(i, i)] += gshunt;
            }
        }
    }

    fn node_residual(&self, f: &DVector<f64>) -> (f64, usize) {
        let mut worst = (0.0, 0);
        for i in 0..self.n {
            if f[i].abs() > worst.0 {
                worst = (f[i].abs(), i);
            }
        }
        worst
    }

    fn newton(
        &self,
        x0: Vec<f64>,
        scale: f64,
        gshunt: f64,
        opts: &SolverOptions,
    ) -> Result<(Vec<f64>, usize), Failure> {
        let size = self.size();
        let mut x = x0;
        let mut jac = DMatrix::<f64>::zeros(size, size);
        let mut f = DVector::<f64>::zeros(size);
        let mut last_step = f64::INFINITY;
        let mut worst = (f64::INFINITY, 0);
        for iter in 0..opts.max_iterations {
            self.assemble(&x, scale, gshunt, opts.gmin, &mut jac, &mut f);
            worst = self.node_residual(&f);
            let src_ok = (self.n..size).all(|r| f[r].abs() < opts.step_tol);
            if iter > 0 && last_step < opts.step_tol && worst.0 < opts.residual_tol && src_ok {
                return Ok((x, iter));
            }
            let rhs = -&f;
            let Some(dx) = jac.clone().lu().solve(&rhs) else {
                break;
            };
            if dx.iter().any(|v| !v.is_finite()) {
                break;
            }
            let dv = dx.rows(0, self.n).amax();
            let damp = if dv > opts.max_step {
                opts.max_step / dv
            } else {
                1.0
            };
            for (xi, d) in x.iter_mut().zip(dx.iter()) {
                *xi += damp * d;
            }
            last_step = dv * damp;
        }
        Err(Failure {
            iterations: opts.max_iterations,
            residual: worst.0,
            worst: worst.1,
        })
    }

    fn gmin_ladder(
        &self,
        x0: Vec<f64>,
        scale: f64,
        opts: &SolverOptions,
    ) -> Result<(Vec<f64>, usize), Failure> {
        let mut x = x0;
        let mut total = 0;
        let mut g = opts.gmin_start;
        while g >= opts.gmin_stop * 0.999 {
            let (nx, it) = self.newton(x, scale, g, opts)?;
            x = nx;
            total += it;
            g /= 10.0;
        }
        let (x, it) = self.newton(x, scale, 0.0, opts)?;
        Ok((x, total + it))
    }

    /// Run the convergence ladder. `guess` seeds plain Newton only; the
    /// fallback stages always start from zero.
    pub fn solve(
        &self,
        opts: &SolverOptions,
        guess: Option<&[f64]>,
    ) -> Result<(Vec<f64>, usize, Strategy), EngineError> {
        let zero = vec![0.0; self.size()];
        let mut total = 0;
        if let Some(g) = guess {
            let mut x0 = zero.clone();
            for (d, v) in x0.iter_mut().zip(g) {
                *d = *v;
            }
            match self.newton(x0, 1.0, 0.0, opts) {
                Ok((x, it)) => return Ok((x, it, Strategy::Newton)),
                Err(e) => total += e.iterations,
            }
        }
        let mut last = match self.newton(zero.clone(), 1.0, 0.0, opts) {
            Ok((x, it)) => return Ok((x, total + it, Strategy::Newton)),
            Err(e) => e,
        };
        total += last.iterations;
        match self.gmin_ladder(zero.clone(), 1.0, opts) {
            Ok((x, it)) => return Ok((x, total + it, Strategy::GminStepping)),
            Err(e) => {
                total += e.iterations;
                last = e;
            }
        }
        let mut x = zero;
        let steps = opts.source_steps.max(1);
        for s in 1..=steps {
            let scale = s as f64 / steps as f64;
            let attempt = self
                .newton(x.clone(), scale, 0.0, opts)
                .or_else(|_| self.gmin_ladder(x.clone(), scale, opts));
            match attempt {
                Ok((nx, it)) => {
                    x = nx;
                    total += it;
                }
                Err(e) => {
                    last = e;
                    break;
                }
            }
            if s == steps {
                return Ok((x, total, Strategy::SourceRamp));
            }
        }
        Err(EngineError::NonConvergence {
            worst_node: self.c.node_name(NodeId(last.worst + 1)).to_string(),
            residual: last.residual,
            iterations: total,
        })
    }

    pub fn operating_point(
        &self,
        x: Vec<f64>,
        iterations: usize,
        strategy: Strategy,
        opts: &SolverOptions,
    ) -> OperatingPoint {
        let size = self.size();
        let mut jac = DMatrix::<f64>::zeros(size, size);
        let mut f = DVector::<f64>::zeros(size);
        self.assemble(&x, 1.0, 0.0, opts.gmin, &mut jac, &mut f);
        let (max_residual, _) = self.node_residual(&f);

        let mut node_voltages = Vec::with_capacity(self.n + 1);
        node_voltages.push(0.0);
        node_voltages.extend_from_slice(&x[..self.n]);
        let source_currents = self
            .vsrc
            .iter()
            .enumerate()
            .map(|(j, &ei)| (ei, x[self.n + j]))
            .collect();
        let devices = self
            .c
            .mosfets
            .iter()
            .zip(self.params)
            .map(|(m, p)| {
                let v = |n: NodeId| node_voltages[n.0];
                let (vgs, vds, vbs) = (
                    v(m.gate) - v(m.source),
                    v(m.drain) - v(m.source),
                    v(m.bulk) - v(m.source),
                );
                let e = mosfet_eval_gmin(p, m.polarity, vgs, vds, vbs, opts.gmin);
                DeviceState {
                    name: m.name.clone(),
                    id: e.id,
                    vgs,
                    vds,
                    vbs,
                    region: e.region,
                }
            })
            .collect();
        OperatingPoint {
            node_voltages,
            source_currents,
            devices,
            iterations,
            strategy,
            max_residual,
        }
    }
}

/// Solve the DC operating point of `c` with per-device parameters `params`.
pub fn dc_operating_point(
    c: &Circuit,
    params: &[DeviceParams],
    opts: &SolverOptions,
) -> Result<OperatingPoint, EngineError> {
    solve_with_overrides(c, params, &[], opts, None)
}

/// DC solve with some source values replaced (by element index) and an
/// optional Newton starting point given as node voltages without ground.
pub(crate) fn solve_with_overrides(
    c: &Circuit,
    params: &[DeviceParams],
    overrides: &[(usize, f64)],
    opts: &SolverOptions,
    guess: Option<&[f64]>,
) -> Result<OperatingPoint, EngineError> {
    let mut mna = Mna::new(c, params);
    mna.overrides = overrides.to_vec();
    let (x, it, strategy) = mna.solve(opts, guess)?;
    Ok(mna.operating_point(x, it, strategy, opts))
}

/// DC power delivered by the `.supply` source (W).
pub fn dc_power(c: &Circuit, op: &OperatingPoint) -> f64 {
    let Some(idx) = c.elements.iter().position(|e| e.name == c.supply) else {
        return 0.0;
    };
    let e = &c.elements[idx];
    let i = op.source_current(idx).unwrap_or(0.0);
    // Source current runs + to - inside the source; delivered power is -V*I.
    -(e.value * i)
}

/// Drain current of the named device at `op` (A, into the drain).
pub fn branch_current(c: &Circuit, op: &OperatingPoint, device: &str) -> Result<f64, EngineError> {
    let idx = c
        .device_index(device)
        .ok_or_else(|| EngineError::UnknownDevice(device.to_string()))?;
    Ok(op.devices[idx].id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netlist::parse_netlist;

    pub(crate) fn ideal(vth0: f64, k: f64, lambda: f64) -> DeviceParams {
        DeviceParams {
            vth0,
            k,
            lambda,
            gamma: 0.0,
            phi: 0.8,
            cox_area_cap: 0.0,
            overlap_cap_per_width: 0.0,
            width: 1e-6,
        }
    }

    #[test]
    fn resistor_divider() {
        let c = parse_netlist("V1 a 0 1.2\nR1 a m 10k\nR2 m 0 10k\n.supply V1\n").unwrap();
        let op = dc_operating_point(&c, &[], &SolverOptions::default()).unwrap();
        let m = c.node_id("m").unwrap();
        assert!((op.voltage(m) - 0.6).abs() < 1e-6);
        // 60 uA drawn from 1.2 V
        assert!((dc_power(&c, &op) - 72e-6).abs() < 1e-12);
        assert!(op.max_residual < 1e-9);
    }

    #[test]
    fn diode_connected_nmos_matches_quadratic() {
        let c =
            parse_netlist("V1 vdd 0 1.2\nR1 vdd d 10k\nM1 d d 0 0 NMOS W=1u L=1u\n.supply V1\n")
                .unwrap();
        let p = [ideal(0.4, 1e-3, 0.0)];
        let op = dc_operating_point(&c, &p, &SolverOptions::default()).unwrap();
        // k/2 (v - 0.4)^2 = (1.2 - v)/R  ->  5 x^2 + x - 0.8 = 0 with x = v - 0.4
        let x = (-1.0 + (1.0f64 + 16.0).sqrt()) / 10.0;
        let v = 0.4 + x;
        let d = c.node_id("d").unwrap();
        assert!((op.voltage(d) - v).abs() < 1e-6, "{} vs {v}", op.voltage(d));
        assert!((v - 0.712_31).abs() < 1e-5);
        let id = branch_current(&c, &op, "M1").unwrap();
        assert!((id - (1.2 - v) / 1e4).abs() < 1e-9);
        assert!((id - 48.77e-6).abs() < 0.01e-6);
        assert_eq!(op.devices[0].region, Region::Saturation);
        assert!(matches!(
            branch_current(&c, &op, "M9"),
            Err(EngineError::UnknownDevice(_))
        ));
    }

    #[test]
    fn cutoff_branch_leaks_gmin_only() {
        let c =
            parse_netlist("V1 vdd 0 1.2\nR1 vdd d 10k\nM1 d 0 0 0 NMOS W=1u L=1u\n.supply V1\n")
                .unwrap();
        let op =
            dc_operating_point(&c, &[ideal(0.4, 1e-3, 0.0)], &SolverOptions::default()).unwrap();
        let id = branch_current(&c, &op, "M1").unwrap();
        assert!(id.abs() < 2e-12);
        assert_eq!(op.devices[0].region, Region::Cutoff);
        assert!(dc_power(&c, &op) < 1e-11);
    }

    #[test]
    fn power_of_current_sink() {
        let c = parse_netlist("V1 vdd 0 1.2\nI1 vdd 0 1m\n.supply V1\n").unwrap();
        let op = dc_operating_point(&c, &[], &SolverOptions::default()).unwrap();
        assert!((dc_power(&c, &op) - 1.2e-3).abs() < 1e-15);
    }

    #[test]
    fn ladder_falls_back_when_newton_is_starved() {
        let c =
            parse_netlist("V1 vdd 0 1.2\nR1 vdd d 10k\nM1 d d 0 0 NMOS W=1u L=1u\n.supply V1\n")
                .unwrap();
        let opts = SolverOptions {
            max_iterations: 3,
            ..SolverOptions::default()
        };
        let err = dc_operating_point(&c, &[ideal(0.4, 1e-3, 0.0)], &opts).unwrap_err();
        match err {
            EngineError::NonConvergence { worst_node, .. } => assert_eq!(worst_node, "d"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn every_ladder_stage_reaches_the_same_point() {
        let c =
            parse_netlist("V1 vdd 0 1.2\nR1 vdd d 10k\nM1 d d 0 0 NMOS W=1u L=1u\n.supply V1\n")
                .unwrap();
        let p = [ideal(0.4, 1e-3, 0.02)];
        let opts = SolverOptions::default();
        let mna = Mna::new(&c, &p);
        let zero = vec![0.0; mna.size()];
        let (a, _) = mna.newton(zero.clone(), 1.0, 0.0, &opts).ok().unwrap();
        let (b, _) = mna.gmin_ladder(zero.clone(), 1.0, &opts).ok().unwrap();
        let mut x = zero;
        for s in 1..=opts.source_steps {
            x = mna
                .newton(x, s as f64 / opts.source_steps as f64, 0.0, &opts)
                .ok()
                .unwrap()
                .0;
        }
        for i in 0..mna.n {
            assert!((a[i] - b[i]).abs() < 1e-9);
            assert!((a[i] - x[i]).abs() < 1e-9);
        }
    }
}
