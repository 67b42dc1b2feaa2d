//! Attack analyses on the bundled locks.

use std::collections::BTreeSet;

use ldelock::attacks::{self, AttackDetails, AttackError, AttackReport, Metric, Oracle};
use ldelock::locking::{bundled, LockedCircuit, LockingPlan};
use ldelock::metrics::{KeyClass, MetricsReport};
use ldelock::netlist::builtin_ota;
use ldelock::sweep::{self, SolverStatus, SweepConfig, SweepRecord};

fn desk() -> LockedCircuit {
    bundled::desk_lock(&builtin_ota()).unwrap()
}

fn candidates(r: &AttackReport) -> BTreeSet<String> {
    r.candidates.iter().cloned().collect()
}

#[test]
fn divide_and_conquer_on_the_p9_p10_block() {
    let lc = desk();
    let cfg = SweepConfig::default();
    let oracle = Oracle::noiseless(&lc, &cfg).unwrap();
    let correct = lc.plan.correct_selection().unwrap();
    let block = ["MP10".to_string()];
    let run = |m: &[Metric], tol: f64| {
        attacks::divide_and_conquer(&lc, &oracle, &block, m, tol, Some(&correct), &cfg).unwrap()
    };

    let gm = run(&[Metric::Gm], attacks::DEFAULT_TOL);
    let gm_gain = run(&[Metric::Gm, Metric::Gain], attacks::DEFAULT_TOL);
    let all = run(&Metric::ALL, attacks::DEFAULT_TOL);
    let everything = run(&Metric::ALL, f64::INFINITY);

    // Adding metrics never enlarges the match set.
    assert!(candidates(&all).is_subset(&candidates(&gm_gain)));
    assert!(candidates(&gm_gain).is_subset(&candidates(&gm)));
    assert_eq!(everything.candidates.len(), 4);
    // The true option always matches the noiseless oracle.
    assert!(gm.success && all.success);
    match &gm.details {
        AttackDetails::DivideAndConquer {
            false_accepts,
            matches,
            combinations,
            ..
        } => {
            assert_eq!(*combinations, 4);
            assert_eq!(*false_accepts, matches - 1);
            assert!(*false_accepts >= 1);
        }
        d => panic!("{d:?}"),
    }
    assert!(oracle.queries() >= 4);
}

#[test]
fn block_must_be_keyed() {
    let lc = desk();
    let cfg = SweepConfig::default();
    let oracle = Oracle::noiseless(&lc, &cfg).unwrap();
    let err = attacks::divide_and_conquer(
        &lc,
        &oracle,
        &["MN3".into()],
        &[Metric::Gm],
        0.01,
        None,
        &cfg,
    )
    .unwrap_err();
    assert!(matches!(err, AttackError::NotKeyed(_)));
    let err = attacks::divide_and_conquer(
        &lc,
        &oracle,
        &["MX1".into()],
        &[Metric::Gm],
        0.01,
        None,
        &cfg,
    )
    .unwrap_err();
    assert!(matches!(err, AttackError::UnknownDevice(_)));
}

#[test]
fn oracle_needs_the_secret_and_reports_never_carry_it() {
    let lc = desk();
    let cfg = SweepConfig::default();
    let hidden = LockedCircuit::new(&builtin_ota(), lc.plan.without_secret()).unwrap();
    assert!(matches!(
        Oracle::noiseless(&hidden, &cfg),
        Err(AttackError::NoSecret)
    ));

    let oracle = Oracle::new(&lc, &cfg, Some(3)).unwrap();
    assert!(!oracle.is_noiseless());
    let r = attacks::divide_and_conquer(
        &lc,
        &oracle,
        &["input_pair".into()],
        &[Metric::Gm],
        0.01,
        None,
        &cfg,
    )
    .unwrap();
    let json = serde_json::to_string(&r).unwrap();
    assert!(!json.contains("correct_index"));
    assert!(!json.contains("secret"));
    assert!(!format!("{oracle:?}").is_empty());
}

fn record(index: usize, class: KeyClass, power: f64) -> SweepRecord {
    SweepRecord {
        index,
        selection: None,
        key: ldelock::locking::Key::zeros(4),
        valid: true,
        metrics: Some(MetricsReport {
            gain_db: 80.0,
            phase_margin_deg: None,
            bw_3db_hz: None,
            power_w: power,
            gm_s: 1e-3,
        }),
        class,
        solver_status: SolverStatus::Failed(String::new()),
        wall_time_s: 0.0,
        mc_correct_fraction: None,
        branch_current_a: Some(1e-6 * (index + 1) as f64),
    }
}

#[test]
fn power_window_counts() {
    let disjoint = vec![
        record(0, KeyClass::Correct, 1.0e-3),
        record(1, KeyClass::Correct, 1.1e-3),
        record(2, KeyClass::Incorrect, 2.0e-3),
        record(3, KeyClass::Incorrect, 0.5e-3),
    ];
    let r = attacks::power_window_analysis(&disjoint).unwrap();
    match r.details {
        AttackDetails::PowerWindow {
            in_window,
            correct,
            ratio,
            ..
        } => {
            assert_eq!((in_window, correct), (2, 2));
            assert_eq!(ratio, 1.0);
        }
        d => panic!("{d:?}"),
    }
    let mut overlapping = disjoint.clone();
    overlapping.push(record(4, KeyClass::Incorrect, 1.05e-3));
    match attacks::power_window_analysis(&overlapping)
        .unwrap()
        .details
    {
        AttackDetails::PowerWindow { in_window, .. } => assert_eq!(in_window, 3),
        d => panic!("{d:?}"),
    }
    let none_correct = vec![record(0, KeyClass::Incorrect, 1.0)];
    assert!(matches!(
        attacks::power_window_analysis(&none_correct),
        Err(AttackError::EmptyRecords)
    ));
}

#[test]
fn removal_fraction_of_bundled_plans() {
    let c = builtin_ota();
    let frac = |lc: &LockedCircuit| match attacks::removal_analysis(lc).details {
        AttackDetails::Removal {
            fraction,
            keyed_devices,
            total_devices,
        } => {
            assert_eq!(total_devices, 33);
            assert_eq!(fraction, keyed_devices as f64 / 33.0);
            fraction
        }
        d => panic!("{d:?}"),
    };
    assert_eq!(frac(&bundled::lock_41(&c).unwrap()), 17.0 / 33.0);
    assert_eq!(frac(&bundled::lock_36(&c).unwrap()), 13.0 / 33.0);
    assert_eq!(
        frac(&LockedCircuit::new(&c, LockingPlan::from_groups(vec![])).unwrap()),
        0.0
    );
}

#[test]
fn brute_force_projection_only_without_budget() {
    let lc = bundled::lock_36(&builtin_ota()).unwrap();
    let cfg = SweepConfig::default();
    let oracle = Oracle::noiseless(&lc, &cfg).unwrap();
    let r = attacks::brute_force_projection(&lc, 5.59, 0.0, Some(&oracle), &cfg, 0.01).unwrap();
    assert!(!r.success);
    assert_eq!(r.simulations, 0);
    match r.details {
        AttackDetails::BruteForce {
            valid_keyspace,
            projected_s,
            executed,
            ..
        } => {
            assert_eq!(valid_keyspace, 64_800);
            assert!((projected_s - 64_800.0 * 5.59).abs() < 1e-6);
            assert!(!executed);
        }
        d => panic!("{d:?}"),
    }
}

#[test]
fn brute_force_executes_within_budget() {
    let lc = bundled::symmetry_lock(&builtin_ota()).unwrap();
    let cfg = SweepConfig::default();
    let oracle = Oracle::noiseless(&lc, &cfg).unwrap();
    let r = attacks::brute_force_projection(&lc, 0.05, 3600.0, Some(&oracle), &cfg, 0.01).unwrap();
    assert!(r.success);
    assert_eq!(r.simulations, 27);
    assert!(r.candidates.contains(&lc.correct_key().unwrap().to_hex()));
}

#[test]
fn branch_current_spread() {
    let lc = desk();
    let cfg = SweepConfig::default();
    let keys = sweep::sample_keys(&lc, 64, 4, true).unwrap();
    let r = attacks::branch_current_sweep(&lc, &keys, "MN9", &cfg).unwrap();
    match &r.details {
        AttackDetails::BranchCurrent {
            series,
            spread,
            min_a,
            ..
        } => {
            assert_eq!(series.len(), 64);
            assert!(*spread > 1.0 && *min_a > 0.0);
        }
        d => panic!("{d:?}"),
    }
    let one = attacks::branch_current_sweep(&lc, &keys[..1], "MN9", &cfg).unwrap();
    match one.details {
        AttackDetails::BranchCurrent { spread, .. } => assert_eq!(spread, 1.0),
        d => panic!("{d:?}"),
    }
    assert!(matches!(
        attacks::branch_current_sweep(&lc, &keys, "MX9", &cfg),
        Err(AttackError::UnknownDevice(_))
    ));
    let synthetic: Vec<_> = (0..3)
        .map(|i| record(i, KeyClass::Incorrect, 1.0))
        .collect();
    match attacks::branch_current_from_records(&synthetic, "M")
        .unwrap()
        .details
    {
        AttackDetails::BranchCurrent { spread, .. } => assert_eq!(spread, 3.0),
        d => panic!("{d:?}"),
    }
}
