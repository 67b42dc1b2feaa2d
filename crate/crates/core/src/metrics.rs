//! Performance metrics from operating points and AC sweeps, and key
//! classification against a spec window.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::engine::{
    ac_sweep, dc_operating_point, dc_power, linearize, mosfet_eval, resolve_params,
    solve_with_overrides, AcPoint, EngineError, FrequencyGrid, OperatingPoint, SolverOptions,
    Stimulus,
};
use crate::lde::{Arrangement, DeviceParams, LdeTable, ModelCard, Polarity};
use crate::netlist::{builtin_ro, Circuit, Element, ElementKind, NodeId};

/// Half-power drop below the low-frequency gain (dB).
pub const BW_DROP_DB: f64 = 3.0103;

/// Differential input step used by [`extract_gm`] (V).
pub const GM_STEP: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty AC sweep")]
    EmptySweep,
    #[error("response does not fall 3 dB inside the swept range")]
    NoRolloffInRange,
    #[error("circuit is not a ring of inverters: {0}")]
    NotARing(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub gain_db: f64,
    /// None when the response never crosses 0 dB.
    pub phase_margin_deg: Option<f64>,
    /// None when the response does not roll off inside the grid.
    pub bw_3db_hz: Option<f64>,
    pub power_w: f64,
    pub gm_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KeyClass {
    Incorrect,
    NearlyCorrect,
    Correct,
}

impl KeyClass {
    pub fn as_str(self) -> &'static str {
        match self {
            KeyClass::Correct => "correct",
            KeyClass::NearlyCorrect => "nearly_correct",
            KeyClass::Incorrect => "incorrect",
        }
    }
}

impl std::fmt::Display for KeyClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for KeyClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "correct" => Ok(KeyClass::Correct),
            "nearly_correct" => Ok(KeyClass::NearlyCorrect),
            "incorrect" => Ok(KeyClass::Incorrect),
            other => Err(format!("unknown key class `{other}`")),
        }
    }
}

/// Acceptance window. Gain decides the class; other windows are optional
/// extra conditions for both Correct and NearlyCorrect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecWindow {
    pub gain_min_correct: f64,
    /// `[lo, hi)`; `hi` equals `gain_min_correct`.
    pub nearly_correct_band: (f64, f64),
    pub pm_min_deg: Option<f64>,
    pub bw_min_hz: Option<f64>,
    pub power_range_w: Option<(f64, f64)>,
}

impl Default for SpecWindow {
    fn default() -> Self {
        SpecWindow {
            gain_min_correct: 70.0,
            nearly_correct_band: (62.0, 70.0),
            pm_min_deg: None,
            bw_min_hz: None,
            power_range_w: None,
        }
    }
}

impl SpecWindow {
    /// Read `spec.*` keys: `gain_min`, `band_low`, `pm_min`, `bw_min`,
    /// `power_min`/`power_max`.
    pub fn from_config(cfg: &KvConfig) -> Result<Self, ConfigError> {
        let d = SpecWindow::default();
        let gain_min: f64 = cfg.parse_or("spec.gain_min", d.gain_min_correct)?;
        let gap = d.gain_min_correct - d.nearly_correct_band.0;
        let low: f64 = cfg.parse_or("spec.band_low", gain_min - gap)?;
        if low > gain_min {
            return Err(ConfigError::BadValue {
                key: "spec.band_low".into(),
                reason: format!("{low} is above spec.gain_min {gain_min}"),
            });
        }
        let pmin: Option<f64> = cfg.parse_opt("spec.power_min")?;
        let pmax: Option<f64> = cfg.parse_opt("spec.power_max")?;
        Ok(SpecWindow {
            gain_min_correct: gain_min,
            nearly_correct_band: (low, gain_min),
            pm_min_deg: cfg.parse_opt("spec.pm_min")?,
            bw_min_hz: cfg.parse_opt("spec.bw_min")?,
            power_range_w: match (pmin, pmax) {
                (None, None) => None,
                (lo, hi) => Some((lo.unwrap_or(0.0), hi.unwrap_or(f64::INFINITY))),
            },
        })
    }

    fn secondary_ok(&self, m: &MetricsReport) -> bool {
        let pm = self
            .pm_min_deg
            .is_none_or(|lo| m.phase_margin_deg.is_some_and(|pm| pm >= lo));
        let bw = self
            .bw_min_hz
            .is_none_or(|lo| m.bw_3db_hz.is_some_and(|bw| bw >= lo));
        let pw = self
            .power_range_w
            .is_none_or(|(lo, hi)| m.power_w >= lo && m.power_w <= hi);
        pm && bw && pw
    }
}

pub fn classify(m: &MetricsReport, s: &SpecWindow) -> KeyClass {
    if !m.gain_db.is_finite() || !s.secondary_ok(m) {
        return KeyClass::Incorrect;
    }
    if m.gain_db >= s.gain_min_correct {
        KeyClass::Correct
    } else if m.gain_db >= s.nearly_correct_band.0 && m.gain_db < s.nearly_correct_band.1 {
        KeyClass::NearlyCorrect
    } else {
        KeyClass::Incorrect
    }
}

/// Gain at the lowest swept frequency (dB).
pub fn extract_gain_db(sweep: &[AcPoint]) -> Result<f64, MetricsError> {
    sweep
        .first()
        .map(AcPoint::magnitude_db)
        .ok_or(MetricsError::EmptySweep)
}

/// Phase along the sweep with 360 degree jumps removed.
pub fn unwrapped_phase_deg(sweep: &[AcPoint]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sweep.len());
    let mut offset = 0.0;
    let mut prev: Option<f64> = None;
    for p in sweep {
        let raw = p.phase_deg();
        if let Some(q) = prev {
            let mut d = raw + offset - q;
            while d > 180.0 {
                offset -= 360.0;
                d -= 360.0;
            }
            while d < -180.0 {
                offset += 360.0;
                d += 360.0;
            }
        }
        let v = raw + offset;
        out.push(v);
        prev = Some(v);
    }
    out
}

/// Position of `target` between `a` and `b`, as a fraction.
fn frac(a: f64, b: f64, target: f64) -> f64 {
    if b == a {
        0.0
    } else {
        (target - a) / (b - a)
    }
}

fn log_interp(f0: f64, f1: f64, t: f64) -> f64 {
    (f0.ln() + t * (f1.ln() - f0.ln())).exp()
}

/// 180 degrees plus the phase where the magnitude first falls through 0 dB.
pub fn extract_phase_margin(sweep: &[AcPoint]) -> Option<f64> {
    let phase = unwrapped_phase_deg(sweep);
    let db: Vec<f64> = sweep.iter().map(AcPoint::magnitude_db).collect();
    if db.first().is_none_or(|d| *d < 0.0) {
        return None;
    }
    (0..db.len().saturating_sub(1)).find_map(|i| {
        if db[i] >= 0.0 && db[i + 1] < 0.0 {
            let t = frac(db[i], db[i + 1], 0.0);
            Some(180.0 + phase[i] + t * (phase[i + 1] - phase[i]))
        } else {
            None
        }
    })
}

/// Frequency where |H| crosses unity, log-interpolated.
pub fn unity_gain_frequency(sweep: &[AcPoint]) -> Option<f64> {
    let db: Vec<f64> = sweep.iter().map(AcPoint::magnitude_db).collect();
    (0..db.len().saturating_sub(1)).find_map(|i| {
        (db[i] >= 0.0 && db[i + 1] < 0.0).then(|| {
            log_interp(
                sweep[i].frequency,
                sweep[i + 1].frequency,
                frac(db[i], db[i + 1], 0.0),
            )
        })
    })
}

/// Lowest frequency at which the gain is 3.01 dB under its low-frequency value.
pub fn extract_bw_3db(sweep: &[AcPoint]) -> Result<f64, MetricsError> {
    let db: Vec<f64> = sweep.iter().map(AcPoint::magnitude_db).collect();
    let target = *db.first().ok_or(MetricsError::EmptySweep)? - BW_DROP_DB;
    (0..db.len() - 1)
        .find_map(|i| {
            (db[i] >= target && db[i + 1] < target).then(|| {
                log_interp(
                    sweep[i].frequency,
                    sweep[i + 1].frequency,
                    frac(db[i], db[i + 1], target),
                )
            })
        })
        .ok_or(MetricsError::NoRolloffInRange)
}

/// Differential transconductance into the `.gmprobe` nodes (the output node
/// if none are declared).
///
/// The probe nodes are held at their operating-point voltages by added
/// sources; the inputs step by `+-GM_STEP/2` and the summed short-circuit
/// current change is divided by `GM_STEP`.
pub fn extract_gm(
    c: &Circuit,
    params: &[DeviceParams],
    op: &OperatingPoint,
    opts: &SolverOptions,
) -> Result<f64, MetricsError> {
    let (pos, neg) = c.input.ok_or(EngineError::MissingDirective(".input"))?;
    let probes: Vec<NodeId> = if c.gm_probe.is_empty() {
        vec![c.output.ok_or(EngineError::MissingDirective(".output"))?]
    } else {
        c.gm_probe.clone()
    };

    let mut clamped = c.clone();
    let first_clamp = clamped.elements.len();
    for (k, &n) in probes.iter().enumerate() {
        clamped.elements.push(Element {
            name: format!("VGMPROBE{k}"),
            kind: ElementKind::Voltage { ac: 0.0 },
            pos: n,
            neg: NodeId::GROUND,
            value: op.voltage(n),
            line: 0,
        });
    }

    let mut drives = Vec::new();
    for (node, sign) in [(pos, 0.5), (neg, -0.5)] {
        if node.is_ground() {
            continue;
        }
        let (idx, orient) = crate::engine::driving_source(c, node)
            .ok_or_else(|| EngineError::NoInputSource(c.node_name(node).to_string()))?;
        drives.push((idx, sign * orient));
    }
    let scale = if pos.is_ground() || neg.is_ground() {
        2.0
    } else {
        1.0
    };

    let guess = &op.node_voltages[1..];
    let mut total = [0.0; 2];
    for (slot, dir) in [(0, 1.0), (1, -1.0)] {
        let over: Vec<(usize, f64)> = drives
            .iter()
            .map(|&(i, s)| (i, c.elements[i].value + dir * s * scale * GM_STEP))
            .collect();
        let sol = solve_with_overrides(&clamped, params, &over, opts, Some(guess))?;
        // A clamp's branch current flows + to - inside it: that is the
        // current the circuit pushes into the probe node.
        total[slot] = (first_clamp..clamped.elements.len())
            .map(|i| sol.source_current(i).unwrap_or(0.0))
            .sum();
    }
    Ok(((total[0] - total[1]) / GM_STEP).abs())
}

/// Settings for a full metrics evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureOptions {
    pub solver: SolverOptions,
    pub grid: FrequencyGrid,
    /// Skip the extra DC solves of [`extract_gm`] (gm reported as 0).
    pub skip_gm: bool,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        MeasureOptions {
            solver: SolverOptions::default(),
            grid: FrequencyGrid::default(),
            skip_gm: false,
        }
    }
}

/// DC solve, AC sweep on the `.input` pair into `.output`, and every metric.
pub fn measure(
    c: &Circuit,
    params: &[DeviceParams],
    opts: &MeasureOptions,
) -> Result<(MetricsReport, OperatingPoint), MetricsError> {
    let out = c.output.ok_or(EngineError::MissingDirective(".output"))?;
    let op = dc_operating_point(c, params, &opts.solver)?;
    let model = linearize(c, params, &op);
    let sweep = ac_sweep(c, &model, &opts.grid, &Stimulus::from_circuit(c)?, out)?;
    let gm_s = if opts.skip_gm {
        0.0
    } else {
        extract_gm(c, params, &op, &opts.solver)?
    };
    let report = MetricsReport {
        gain_db: extract_gain_db(&sweep)?,
        phase_margin_deg: extract_phase_margin(&sweep),
        bw_3db_hz: extract_bw_3db(&sweep).ok(),
        power_w: dc_power(c, &op).max(0.0),
        gm_s,
    };
    Ok((report, op))
}

/// First-order ring oscillator frequency from a switched-current delay model.
///
/// Each inverter output node is charged by the on-current of its devices
/// (`|vgs| = |vds| = VDD`); stage delay is `C_node * VDD / (2 * I_on,avg)`
/// and `f = 1 / (2 * sum(tp))`.
pub fn ro_frequency_estimate(c: &Circuit, params: &[DeviceParams]) -> Result<f64, MetricsError> {
    let vdd = c
        .supply_voltage()
        .ok_or(EngineError::MissingDirective(".supply"))?;
    let mut outputs: Vec<NodeId> = c.mosfets.iter().map(|m| m.drain).collect();
    outputs.sort();
    outputs.dedup();
    if outputs.len() < 3 {
        return Err(MetricsError::NotARing(format!(
            "{} stage outputs",
            outputs.len()
        )));
    }
    let mut total_tp = 0.0;
    for node in outputs {
        let mut cap = 0.0;
        let mut i_sum = 0.0;
        let mut drivers = 0usize;
        for (m, p) in c.mosfets.iter().zip(params) {
            if m.gate == node {
                cap += p.cox_area_cap + 2.0 * p.overlap_cap();
            }
            if m.drain == node {
                cap += p.overlap_cap();
                let v = match m.polarity {
                    Polarity::Nmos => vdd,
                    Polarity::Pmos => -vdd,
                };
                i_sum += mosfet_eval(p, m.polarity, v, v, 0.0).id.abs();
                drivers += 1;
            }
        }
        if drivers == 0 || i_sum <= 0.0 {
            return Err(MetricsError::NotARing(format!(
                "node `{}` has no drive",
                c.node_name(node)
            )));
        }
        let i_avg = i_sum / drivers as f64;
        total_tp += cap * vdd / (2.0 * i_avg);
    }
    Ok(1.0 / (2.0 * total_tp))
}

/// Ring frequency as the PMOS devices of an `n`-stage ring switch one by
/// one from `weak` to `strong`. Entry `k` has the first `k` inverters
/// switched; entry 0 is all-`weak`.
pub fn ro_substitution_trend(
    n: usize,
    weak: Arrangement,
    strong: Arrangement,
    card: &ModelCard,
    table: &LdeTable,
) -> Result<Vec<f64>, MetricsError> {
    let c = builtin_ro(n).map_err(|e| MetricsError::NotARing(e.to_string()))?;
    (0..=n)
        .map(|k| {
            let asg: BTreeMap<String, Arrangement> = (0..n)
                .map(|i| (format!("MP{i}"), if i < k { strong } else { weak }))
                .collect();
            let p = resolve_params(&c, card, table, &asg, None)?;
            ro_frequency_estimate(&c, &p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn pt(f: f64, h: Complex64) -> AcPoint {
        AcPoint {
            frequency: f,
            transfer: h,
        }
    }

    /// Two-pole response a0 / ((1 + s/p1)(1 + s/p2)) on a log grid.
    fn two_pole(a0: f64, p1: f64, p2: f64) -> Vec<AcPoint> {
        FrequencyGrid::new(1.0, 1e9, 50)
            .unwrap()
            .frequencies()
            .into_iter()
            .map(|f| {
                let s = Complex64::new(0.0, f);
                pt(f, a0 / ((1.0 + s / p1) * (1.0 + s / p2)))
            })
            .collect()
    }

    #[test]
    fn gain_of_unity_and_hundred() {
        assert_eq!(
            extract_gain_db(&[pt(1.0, Complex64::new(1.0, 0.0))]).unwrap(),
            0.0
        );
        assert!(
            (extract_gain_db(&[pt(1.0, Complex64::new(100.0, 0.0))]).unwrap() - 40.0).abs() < 1e-12
        );
        assert_eq!(extract_gain_db(&[]), Err(MetricsError::EmptySweep));
    }

    #[test]
    fn single_pole_margin_near_ninety() {
        let s = two_pole(100.0, 1e3, 1e15);
        let pm = extract_phase_margin(&s).unwrap();
        assert!((pm - 90.6).abs() < 1.0, "{pm}");
    }

    #[test]
    fn two_pole_margin_matches_closed_form() {
        // Second pole 100x above the first; a0 chosen so that the unity
        // crossing lands on the second pole: |H| = a0 / (100 * sqrt(2)) = 1.
        let a0 = 100.0 * 2f64.sqrt();
        let s = two_pole(a0, 1e3, 1e5);
        let pm = extract_phase_margin(&s).unwrap();
        let expected = 180.0 - (1e5f64 / 1e3).atan().to_degrees() - 45.0;
        assert!((pm - expected).abs() < 2.0, "{pm} vs {expected}");
        assert!((expected - 45.57).abs() < 0.1);
    }

    #[test]
    fn no_crossing_means_no_margin() {
        let s = two_pole(0.5, 1e3, 1e6);
        assert_eq!(extract_phase_margin(&s), None);
    }

    #[test]
    fn bandwidth_of_rc_pole() {
        let fp = 159.154_943;
        let s = two_pole(1.0, fp, 1e15);
        let bw = extract_bw_3db(&s).unwrap();
        assert!((bw / fp - 1.0).abs() < 0.01, "{bw}");
        let flat: Vec<AcPoint> = (0..10)
            .map(|i| pt(10f64.powi(i), Complex64::new(2.0, 0.0)))
            .collect();
        assert_eq!(extract_bw_3db(&flat), Err(MetricsError::NoRolloffInRange));
    }

    #[test]
    fn bandwidth_below_unity_frequency() {
        let s = two_pole(1000.0, 1e3, 1e7);
        assert!(extract_bw_3db(&s).unwrap() <= unity_gain_frequency(&s).unwrap());
    }

    fn report(gain_db: f64) -> MetricsReport {
        MetricsReport {
            gain_db,
            phase_margin_deg: Some(80.0),
            bw_3db_hz: Some(1e3),
            power_w: 1e-3,
            gm_s: 1e-3,
        }
    }

    #[test]
    fn classification_bands() {
        let s = SpecWindow::default();
        assert_eq!(classify(&report(73.6), &s), KeyClass::Correct);
        assert_eq!(classify(&report(70.0), &s), KeyClass::Correct);
        assert_eq!(classify(&report(65.0), &s), KeyClass::NearlyCorrect);
        assert_eq!(classify(&report(62.0), &s), KeyClass::NearlyCorrect);
        assert_eq!(classify(&report(61.99), &s), KeyClass::Incorrect);
        assert_eq!(classify(&report(-57.0), &s), KeyClass::Incorrect);
        assert_eq!(classify(&report(f64::NAN), &s), KeyClass::Incorrect);
    }

    #[test]
    fn secondary_windows_gate_both_classes() {
        let s = SpecWindow {
            pm_min_deg: Some(85.0),
            ..SpecWindow::default()
        };
        assert_eq!(classify(&report(80.0), &s), KeyClass::Incorrect);
        let s = SpecWindow {
            power_range_w: Some((0.5e-3, 2e-3)),
            ..SpecWindow::default()
        };
        assert_eq!(classify(&report(80.0), &s), KeyClass::Correct);
    }

    #[test]
    fn spec_from_config() {
        let cfg = KvConfig::parse("[spec]\ngain_min = 60\npm_min = 45\n").unwrap();
        let s = SpecWindow::from_config(&cfg).unwrap();
        assert_eq!(s.gain_min_correct, 60.0);
        assert_eq!(s.nearly_correct_band, (52.0, 60.0));
        assert_eq!(s.pm_min_deg, Some(45.0));
        let bad = KvConfig::parse("[spec]\ngain_min = 60\nband_low = 65\n").unwrap();
        assert!(SpecWindow::from_config(&bad).is_err());
    }

    #[test]
    fn phase_unwrap_removes_jumps() {
        let s = two_pole(1e4, 1.0, 10.0);
        let ph = unwrapped_phase_deg(&s);
        assert!(ph.windows(2).all(|w| (w[1] - w[0]).abs() < 90.0));
        assert!(ph.last().unwrap() < &-170.0);
    }

    #[test]
    fn ro_trend_rises_toward_baseline() {
        let card = ModelCard::n65();
        let t = card.lde_table();
        let f = ro_substitution_trend(3, Arrangement::Sod, Arrangement::Bl, &card, &t).unwrap();
        assert_eq!(f.len(), 4);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
    }
}
