//! The `ldelock` binary: outputs and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ldelock(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldelock"))
        .arg("--out")
        .arg(out)
        .arg("--jobs")
        .arg("2")
        .args(args)
        .env_remove("LDELOCK_SEED")
        .output()
        .expect("run ldelock")
}

fn demo_config() -> String {
    format!("{}/../../configs/demo.ini", env!("CARGO_MANIFEST_DIR"))
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn lock_demo_reports_bookkeeping_and_hides_the_secret() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldelock(dir.path(), &["--config", &demo_config(), "lock"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report = fs::read_to_string(dir.path().join("lock_report.txt")).unwrap();
    assert!(
        report.contains("key_length                  36"),
        "{report}"
    );
    assert!(
        report.contains("arrangements_added          57"),
        "{report}"
    );
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("lock_report.json")).unwrap())
            .unwrap();
    assert_eq!(json["key_length"], 36);
    assert!(!dir.path().join("secret.ini").exists());
    let plan = fs::read_to_string(dir.path().join("plan.ini")).unwrap();
    assert!(plan.contains("lock.key_length = 36") && !plan.contains("secret"));
    let echo = fs::read_to_string(dir.path().join("lock.config.ini")).unwrap();
    assert!(echo.contains("# config hash ") && echo.contains("lock.plan = bundled:36"));
    assert!(fs::read_to_string(dir.path().join("locked.cir"))
        .unwrap()
        .contains("ARR=@g"));
}

#[test]
fn export_secret_writes_the_correct_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldelock(
        dir.path(),
        &["--set", "lock.plan=bundled:desk", "lock", "--export-secret"],
    );
    assert_eq!(o.status.code(), Some(0));
    let secret = fs::read_to_string(dir.path().join("secret.ini")).unwrap();
    assert!(secret.contains("secret.key = "));

    // The plan and secret files drive a later attack.
    let plan = dir.path().join("plan.ini");
    let secret = dir.path().join("secret.ini");
    let o = ldelock(
        dir.path(),
        &[
            "attack",
            "dnc",
            "--plan",
            plan.to_str().unwrap(),
            "--secret",
            secret.to_str().unwrap(),
            "--noiseless",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    // Without the secret no oracle can be built.
    let o = ldelock(
        dir.path(),
        &[
            "attack",
            "dnc",
            "--plan",
            plan.to_str().unwrap(),
            "--noiseless",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_netlist_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldelock(
        dir.path(),
        &["--set", "netlist=/does/not/exist.cir", "lock"],
    );
    assert_eq!(o.status.code(), Some(2));
    let o = ldelock(dir.path(), &["--config", "/does/not/exist.ini", "lock"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generated_lock_needs_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldelock(dir.path(), &["--set", "lock.plan=generate", "lock"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_over_cap_without_sample_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldelock(
        dir.path(),
        &[
            "--set",
            "lock.plan=bundled:desk",
            "--set",
            "sweep.cap=100",
            "sweep",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sampled_sweep_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "--set",
        "lock.plan=bundled:desk",
        "--seed",
        "9",
        "sweep",
        "--sample",
        "24",
    ];
    for d in [&a, &b] {
        let o = ldelock(d.path(), &args);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let csv = |d: &tempfile::TempDir| fs::read(d.path().join("sweep.csv")).unwrap();
    assert_eq!(csv(&a), csv(&b));
    assert_eq!(String::from_utf8(csv(&a)).unwrap().lines().count(), 25);
    for f in [
        "sweep_summary.json",
        "sweep_plotdata.tsv",
        "sweep_gain.svg",
        "sweep.ckpt",
        "sweep.config.ini",
    ] {
        assert!(a.path().join(f).exists(), "{f}");
    }
    // A rerun in the same directory resumes from the checkpoint.
    let o = ldelock(a.path(), &args);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(csv(&a), csv(&b));
}

#[test]
fn attack_removal_on_the_41_bit_plan() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldelock(
        dir.path(),
        &["--set", "lock.plan=bundled:41", "attack", "removal"],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("fraction to redesign: 0.515"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("attack_removal.json")).unwrap())
            .unwrap();
    assert_eq!(json["details"]["keyed_devices"], 17);
}

#[test]
fn attack_dnc_gm_only_has_false_accepts() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldelock(
        dir.path(),
        &[
            "attack",
            "dnc",
            "--block",
            "input_pair",
            "--match",
            "gm",
            "--noiseless",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("attack_dnc.json")).unwrap())
            .unwrap();
    assert!(json["details"]["false_accepts"].as_u64().unwrap() > 0);
    let o = ldelock(
        dir.path(),
        &["attack", "dnc", "--match", "noise", "--noiseless"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_attack_kind_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldelock(dir.path(), &["attack", "sat"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn brute_force_projection_from_a_given_rate() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldelock(
        dir.path(),
        &[
            "--set",
            "lock.plan=bundled:36",
            "attack",
            "brute",
            "--per-key",
            "5.59",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("attack_brute.json")).unwrap())
            .unwrap();
    let projected = json["details"]["projected_s"].as_f64().unwrap();
    // Two workers.
    assert!((projected - 64_800.0 * 5.59 / 2.0).abs() < 1e-6);
    assert_eq!(json["details"]["executed"], false);
}

#[test]
fn demo_ro_prints_a_monotone_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = ldelock(dir.path(), &["demo", "ro"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.matches("strictly increasing").count(), 3, "{text}");
    let csv = fs::read_to_string(dir.path().join("ro_trend.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 6 + 8);
}
