//! Attack analyses against a locked circuit: brute-force cost projection,
//! divide-and-conquer on device blocks, power-window filtering, removal
//! and branch-current studies.
//!
//! The oracle stands in for a working chip. It answers with measured
//! metrics and never with key material.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::resolve_params;
use crate::lde::{Arrangement, DieSample};
use crate::locking::{assignment_for, key_for_selection, product, KeyGroup, LockedCircuit};
use crate::metrics::{measure, KeyClass, MetricsError, MetricsReport};
use crate::sweep::{run_sweep, SweepConfig, SweepError, SweepRecord};

/// Default relative matching tolerance.
pub const DEFAULT_TOL: f64 = 0.01;

/// Reference point for the power-window analysis: keys inside the correct
/// keys' power envelope versus truly correct keys.
pub const REFERENCE_IN_WINDOW: usize = 1702;
pub const REFERENCE_CORRECT: usize = 266;

/// Reference brute-force campaign: keys simulated and the time it took.
pub const REFERENCE_KEYS: u64 = 340_200;
pub const REFERENCE_DAYS: f64 = 22.0;

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("device `{0}` is not in any key group")]
    NotKeyed(String),
    #[error("no records to analyse")]
    EmptyRecords,
    #[error("unknown metric `{0}`")]
    BadMetric(String),
    #[error("reference selection has {got} entries, plan has {expected} groups")]
    BadReference { expected: usize, got: usize },
    #[error("the oracle needs a lock that carries its secret")]
    NoSecret,
    #[error("oracle instance failed to simulate: {0}")]
    Oracle(#[from] MetricsError),
    #[error(transparent)]
    Sweep(#[from] SweepError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    Gain,
    PhaseMargin,
    Bandwidth,
    Power,
    Gm,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Gain,
        Metric::PhaseMargin,
        Metric::Bandwidth,
        Metric::Power,
        Metric::Gm,
    ];

    fn value(self, m: &MetricsReport) -> Option<f64> {
        match self {
            Metric::Gain => Some(m.gain_db),
            Metric::PhaseMargin => m.phase_margin_deg,
            Metric::Bandwidth => m.bw_3db_hz,
            Metric::Power => Some(m.power_w),
            Metric::Gm => Some(m.gm_s),
        }
    }
}

impl FromStr for Metric {
    type Err = AttackError;
    fn from_str(s: &str) -> Result<Self, AttackError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gain" => Ok(Metric::Gain),
            "pm" | "phase_margin" => Ok(Metric::PhaseMargin),
            "bw" | "bandwidth" => Ok(Metric::Bandwidth),
            "power" => Ok(Metric::Power),
            "gm" => Ok(Metric::Gm),
            other => Err(AttackError::BadMetric(other.to_string())),
        }
    }
}

/// True when every listed metric of `m` is within relative `tol` of the
/// target. A metric absent on both sides matches; absent on one side does not.
pub fn metrics_match(
    m: &MetricsReport,
    target: &MetricsReport,
    metrics: &[Metric],
    tol: f64,
) -> bool {
    metrics.iter().all(|k| match (k.value(m), k.value(target)) {
        (Some(a), Some(b)) => tol.is_infinite() || (a - b).abs() <= tol * b.abs(),
        (None, None) => true,
        _ => tol.is_infinite(),
    })
}

/// A functional unlocked instance. Queries return its metrics and bump a
/// counter that stays exact under concurrent use.
#[derive(Debug)]
pub struct Oracle {
    response: MetricsReport,
    assignment: BTreeMap<String, Arrangement>,
    queries: AtomicU64,
    die_seed: Option<u64>,
}

impl Oracle {
    /// Build the oracle from a lock that still carries its secret. With
    /// `die_seed`, the instance is one mismatch-sampled die.
    pub fn new(
        lc: &LockedCircuit,
        cfg: &SweepConfig,
        die_seed: Option<u64>,
    ) -> Result<Oracle, AttackError> {
        let sel = lc.plan.correct_selection().ok_or(AttackError::NoSecret)?;
        let assignment = assignment_for(&lc.plan, &sel);
        let die = die_seed.map(DieSample::draw);
        let params = resolve_params(
            &lc.base,
            &cfg.card,
            &cfg.table,
            &assignment,
            die.as_ref().map(|d| (d, &cfg.mismatch)),
        )
        .map_err(MetricsError::from)?;
        let (response, _) = measure(&lc.base, &params, &cfg.measure)?;
        Ok(Oracle {
            response,
            assignment,
            queries: AtomicU64::new(0),
            die_seed,
        })
    }

    /// Noiseless oracle: the nominal correct-key circuit.
    pub fn noiseless(lc: &LockedCircuit, cfg: &SweepConfig) -> Result<Oracle, AttackError> {
        Oracle::new(lc, cfg, None)
    }

    pub fn query(&self) -> MetricsReport {
        self.queries.fetch_add(1, Ordering::SeqCst);
        self.response.clone()
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    pub fn is_noiseless(&self) -> bool {
        self.die_seed.is_none()
    }

    /// Scoring only: whether every device in `assignment` carries its
    /// protected arrangement. Not an attacker-visible query.
    fn unlocks(&self, assignment: &BTreeMap<String, Arrangement>) -> bool {
        !assignment.is_empty()
            && assignment
                .iter()
                .all(|(d, a)| self.assignment.get(d) == Some(a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    BruteForce,
    DivideAndConquer,
    PowerWindow,
    Removal,
    BranchCurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttackDetails {
    BruteForce {
        valid_keyspace: u128,
        per_key_s: f64,
        parallelism: usize,
        projected_s: f64,
        projected_days: f64,
        budget_s: f64,
        executed: bool,
    },
    DivideAndConquer {
        block_devices: Vec<String>,
        block_groups: Vec<String>,
        matched_metrics: Vec<Metric>,
        tolerance: f64,
        combinations: usize,
        matches: usize,
        false_accepts: usize,
        /// Matched block options as arrangement text per device.
        matched_options: Vec<BTreeMap<String, Arrangement>>,
    },
    PowerWindow {
        window_w: (f64, f64),
        in_window: usize,
        correct: usize,
        ratio: f64,
        reference_ratio: f64,
    },
    Removal {
        keyed_devices: usize,
        total_devices: usize,
        fraction: f64,
    },
    BranchCurrent {
        device: String,
        min_a: f64,
        max_a: f64,
        spread: f64,
        series: Vec<(usize, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    /// Settings the result depends on, e.g. tolerances.
    pub header: String,
    pub oracle_queries: u64,
    pub simulations: usize,
    /// Candidate keys (hex) that survived the attack's filter.
    pub candidates: Vec<String>,
    pub success: bool,
    pub details: AttackDetails,
}

impl AttackReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "attack: {:?}\n{}\noracle queries: {}\nsimulations: {}\ncandidates: {}\nsuccess: {}\n",
            self.kind,
            self.header,
            self.oracle_queries,
            self.simulations,
            self.candidates.len(),
            self.success
        );
        match &self.details {
            AttackDetails::BruteForce {
                valid_keyspace,
                per_key_s,
                parallelism,
                projected_days,
                executed,
                ..
            } => s += &format!(
                "valid keyspace: {valid_keyspace}\nper-key time: {per_key_s:.4} s\nparallelism: {parallelism}\nprojected: {projected_days:.2} days\nexecuted: {executed}\n"
            ),
            AttackDetails::DivideAndConquer {
                block_groups,
                combinations,
                matches,
                false_accepts,
                ..
            } => s += &format!(
                "block groups: {}\ncombinations: {combinations}\nmatches: {matches}\nfalse accepts: {false_accepts}\n",
                block_groups.join(", ")
            ),
            AttackDetails::PowerWindow {
                window_w,
                in_window,
                correct,
                ratio,
                reference_ratio,
            } => s += &format!(
                "window: [{:.4e}, {:.4e}] W\nkeys in window: {in_window}\ncorrect keys: {correct}\nratio: {ratio:.2} (reference {reference_ratio:.2})\n",
                window_w.0, window_w.1
            ),
            AttackDetails::Removal {
                keyed_devices,
                total_devices,
                fraction,
            } => s += &format!("keyed devices: {keyed_devices} of {total_devices}\nfraction to redesign: {fraction:.3}\n"),
            AttackDetails::BranchCurrent {
                device, min_a, max_a, spread, ..
            } => s += &format!("device: {device}\nmin: {min_a:.4e} A\nmax: {max_a:.4e} A\nmax/min: {spread:.3}\n"),
        }
        s
    }
}

/// Wall time of an exhaustive campaign (s).
pub fn projected_seconds(keys: u128, per_key_s: f64, parallelism: usize) -> f64 {
    keys as f64 * per_key_s / parallelism.max(1) as f64
}

/// Per-key simulation time implied by the reference campaign (s).
pub fn reference_per_key_seconds() -> f64 {
    REFERENCE_DAYS * SECONDS_PER_DAY / REFERENCE_KEYS as f64
}

/// Project the cost of trying every valid key; if it fits `budget_s` and an
/// oracle is given, run the search and keep keys matching every metric.
pub fn brute_force_projection(
    lc: &LockedCircuit,
    per_key_s: f64,
    budget_s: f64,
    oracle: Option<&Oracle>,
    cfg: &SweepConfig,
    tol: f64,
) -> Result<AttackReport, AttackError> {
    let keyspace = lc.plan.valid_keyspace();
    let parallelism = cfg.jobs.max(1);
    let projected = projected_seconds(keyspace, per_key_s, parallelism);
    let mut report = AttackReport {
        kind: AttackKind::BruteForce,
        header: format!("match tolerance {:.3}% on all metrics", tol * 100.0),
        oracle_queries: 0,
        simulations: 0,
        candidates: Vec::new(),
        success: false,
        details: AttackDetails::BruteForce {
            valid_keyspace: keyspace,
            per_key_s,
            parallelism,
            projected_s: projected,
            projected_days: projected / SECONDS_PER_DAY,
            budget_s,
            executed: false,
        },
    };
    let Some(oracle) = oracle else {
        return Ok(report);
    };
    if budget_s <= 0.0 || projected > budget_s {
        return Ok(report);
    }
    let target = oracle.query();
    let keys = crate::sweep::enumerate_keys(lc, keyspace)?;
    let recs = run_sweep(lc, &keys, cfg)?;
    report.simulations = recs.len();
    for r in &recs {
        if r.metrics
            .as_ref()
            .is_some_and(|m| metrics_match(m, &target, &Metric::ALL, tol))
        {
            report.candidates.push(r.key.to_hex());
            if let Some(s) = &r.selection {
                report.success |= oracle.unlocks(&assignment_for(&lc.plan, s));
            }
        }
    }
    report.oracle_queries = oracle.queries();
    if let AttackDetails::BruteForce { executed, .. } = &mut report.details {
        *executed = true;
    }
    Ok(report)
}

/// Attacker's guess for groups outside the block: the first option whose
/// members share an arrangement, else option 0.
pub fn default_reference(lc: &LockedCircuit) -> Vec<usize> {
    lc.plan
        .groups
        .iter()
        .map(|g| {
            g.options
                .iter()
                .position(|o| !KeyGroup::is_asymmetric(o))
                .unwrap_or(0)
        })
        .collect()
}

/// Groups touched by a set of device names or role tags.
pub fn block_groups(lc: &LockedCircuit, block: &[String]) -> Result<Vec<usize>, AttackError> {
    let mut out = BTreeSet::new();
    for name in block {
        let by_role = lc.base.devices_with_role(name);
        let devices: Vec<String> = if by_role.is_empty() {
            vec![lc
                .base
                .device(name)
                .ok_or_else(|| AttackError::UnknownDevice(name.clone()))?
                .name
                .clone()]
        } else {
            by_role.iter().map(|m| m.name.clone()).collect()
        };
        let mut keyed = false;
        for d in devices {
            if let Some(gi) = lc.plan.groups.iter().position(|g| g.members.contains(&d)) {
                out.insert(gi);
                keyed = true;
            }
        }
        if !keyed {
            return Err(AttackError::NotKeyed(name.clone()));
        }
    }
    Ok(out.into_iter().collect())
}

/// Enumerate the block's group options with every other group held at
/// `reference`, keeping combinations whose `matched` metrics fall within
/// `tol` of the oracle's.
pub fn divide_and_conquer(
    lc: &LockedCircuit,
    oracle: &Oracle,
    block: &[String],
    matched: &[Metric],
    tol: f64,
    reference: Option<&[usize]>,
    cfg: &SweepConfig,
) -> Result<AttackReport, AttackError> {
    let gis = block_groups(lc, block)?;
    let reference = match reference {
        Some(r) if r.len() != lc.plan.groups.len() => {
            return Err(AttackError::BadReference {
                expected: lc.plan.groups.len(),
                got: r.len(),
            })
        }
        Some(r) => r.to_vec(),
        None => default_reference(lc),
    };
    let sizes: Vec<usize> = gis
        .iter()
        .map(|&g| lc.plan.groups[g].options.len())
        .collect();
    let sels: Vec<Vec<usize>> = product(&sizes)
        .into_iter()
        .map(|combo| {
            let mut s = reference.clone();
            for (&g, &o) in gis.iter().zip(&combo) {
                s[g] = o;
            }
            s
        })
        .collect();
    let keys: Vec<_> = sels
        .iter()
        .map(|s| key_for_selection(&lc.plan, s))
        .collect();
    let mut cfg = cfg.clone();
    cfg.measure.skip_gm = !matched.contains(&Metric::Gm);
    cfg.checkpoint = None;
    let recs = run_sweep(lc, &keys, &cfg)?;
    let target = oracle.query();
    let block_devices: Vec<String> = gis
        .iter()
        .flat_map(|&g| lc.plan.groups[g].members.clone())
        .collect();
    let mut candidates = Vec::new();
    let mut matched_options = Vec::new();
    let mut false_accepts = 0;
    let mut success = false;
    for r in &recs {
        if !r
            .metrics
            .as_ref()
            .is_some_and(|m| metrics_match(m, &target, matched, tol))
        {
            continue;
        }
        let s = r.selection.as_ref().expect("enumerated keys are valid");
        let asg = assignment_for(&lc.plan, s);
        let block_asg: BTreeMap<String, Arrangement> =
            block_devices.iter().map(|d| (d.clone(), asg[d])).collect();
        if oracle.unlocks(&block_asg) {
            success = true;
        } else {
            false_accepts += 1;
        }
        candidates.push(r.key.to_hex());
        matched_options.push(block_asg);
    }
    Ok(AttackReport {
        kind: AttackKind::DivideAndConquer,
        header: format!(
            "matched metrics {:?} within {:.3}% (relative); other groups fixed at a reference option",
            matched,
            tol * 100.0
        ),
        oracle_queries: oracle.queries(),
        simulations: recs.len(),
        success,
        details: AttackDetails::DivideAndConquer {
            block_devices,
            block_groups: gis.iter().map(|&g| lc.plan.groups[g].id.clone()).collect(),
            matched_metrics: matched.to_vec(),
            tolerance: tol,
            combinations: recs.len(),
            matches: candidates.len(),
            false_accepts,
            matched_options,
        },
        candidates,
    })
}

/// Keys whose power falls inside the envelope of the Correct keys.
pub fn power_window_analysis(records: &[SweepRecord]) -> Result<AttackReport, AttackError> {
    let powers = |pred: &dyn Fn(&SweepRecord) -> bool| -> Vec<f64> {
        records
            .iter()
            .filter(|r| pred(r))
            .filter_map(|r| r.metrics.as_ref().map(|m| m.power_w))
            .collect()
    };
    let correct = powers(&|r| r.class == KeyClass::Correct);
    if records.is_empty() || correct.is_empty() {
        return Err(AttackError::EmptyRecords);
    }
    let lo = correct.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = correct.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let inside: Vec<&SweepRecord> = records
        .iter()
        .filter(|r| {
            r.metrics
                .as_ref()
                .is_some_and(|m| m.power_w >= lo && m.power_w <= hi)
        })
        .collect();
    Ok(AttackReport {
        kind: AttackKind::PowerWindow,
        header: "window = [min, max] power over keys classified correct".into(),
        oracle_queries: 0,
        simulations: 0,
        candidates: inside.iter().map(|r| r.key.to_hex()).collect(),
        success: false,
        details: AttackDetails::PowerWindow {
            window_w: (lo, hi),
            in_window: inside.len(),
            correct: correct.len(),
            ratio: inside.len() as f64 / correct.len() as f64,
            reference_ratio: REFERENCE_IN_WINDOW as f64 / REFERENCE_CORRECT as f64,
        },
    })
}

/// Share of the design's transistors that sit in key groups; a removal
/// attack must redesign that share.
pub fn removal_analysis(lc: &LockedCircuit) -> AttackReport {
    let keyed: usize = lc.plan.groups.iter().map(|g| g.members.len()).sum();
    let total = lc.base.mosfets.len();
    AttackReport {
        kind: AttackKind::Removal,
        header: "keyed devices over all devices".into(),
        oracle_queries: 0,
        simulations: 0,
        candidates: Vec::new(),
        success: false,
        details: AttackDetails::Removal {
            keyed_devices: keyed,
            total_devices: total,
            fraction: lc.keyed_fraction(),
        },
    }
}

/// Drain current of `device` across `keys`.
pub fn branch_current_sweep(
    lc: &LockedCircuit,
    keys: &[crate::locking::Key],
    device: &str,
    cfg: &SweepConfig,
) -> Result<AttackReport, AttackError> {
    let dev = lc
        .base
        .device(device)
        .ok_or_else(|| AttackError::UnknownDevice(device.to_string()))?;
    let mut cfg = cfg.clone();
    cfg.branch = Some(dev.name.clone());
    cfg.measure.skip_gm = true;
    let recs = run_sweep(lc, keys, &cfg)?;
    branch_current_from_records(&recs, &dev.name)
}

/// Branch-current report from records that carry a branch current.
pub fn branch_current_from_records(
    records: &[SweepRecord],
    device: &str,
) -> Result<AttackReport, AttackError> {
    let series: Vec<(usize, f64)> = records
        .iter()
        .filter_map(|r| r.branch_current_a.map(|i| (r.index, i.abs())))
        .collect();
    if series.is_empty() {
        return Err(AttackError::EmptyRecords);
    }
    let min_a = series.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_a = series.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(AttackReport {
        kind: AttackKind::BranchCurrent,
        header: format!("|drain current| of {device} per key"),
        oracle_queries: 0,
        simulations: records.len(),
        candidates: Vec::new(),
        success: false,
        details: AttackDetails::BranchCurrent {
            device: device.to_string(),
            min_a,
            max_a,
            spread: if min_a > 0.0 {
                max_a / min_a
            } else {
                f64::INFINITY
            },
            series,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(gain: f64, power: f64, gm: f64) -> MetricsReport {
        MetricsReport {
            gain_db: gain,
            phase_margin_deg: Some(60.0),
            bw_3db_hz: None,
            power_w: power,
            gm_s: gm,
        }
    }

    #[test]
    fn reference_rate_gives_22_days() {
        let per_key = reference_per_key_seconds();
        assert!((per_key - 5.587).abs() < 1e-3);
        let days = projected_seconds(340_200, 5.59, 1) / SECONDS_PER_DAY;
        assert!((days - 22.01).abs() < 0.01, "{days}");
        assert_eq!(projected_seconds(100, 1.0, 4), 25.0);
    }

    #[test]
    fn matching_rules() {
        let t = report(80.0, 1e-3, 1e-3);
        let all = Metric::ALL;
        assert!(metrics_match(&report(80.5, 1.005e-3, 1e-3), &t, &all, 0.01));
        assert!(!metrics_match(&report(40.0, 1e-3, 1e-3), &t, &all, 0.01));
        assert!(metrics_match(
            &report(40.0, 1e-3, 1e-3),
            &t,
            &[Metric::Gm],
            0.01
        ));
        assert!(metrics_match(
            &report(-10.0, 5.0, 9.0),
            &t,
            &all,
            f64::INFINITY
        ));
        let mut no_pm = report(80.0, 1e-3, 1e-3);
        no_pm.phase_margin_deg = None;
        assert!(!metrics_match(&no_pm, &t, &[Metric::PhaseMargin], 0.01));
        assert!(metrics_match(&no_pm, &t, &[Metric::Bandwidth], 0.01));
    }

    #[test]
    fn metric_names() {
        assert_eq!("pm".parse::<Metric>().unwrap(), Metric::PhaseMargin);
        assert_eq!("GM".parse::<Metric>().unwrap(), Metric::Gm);
        assert!("noise".parse::<Metric>().is_err());
    }
}
