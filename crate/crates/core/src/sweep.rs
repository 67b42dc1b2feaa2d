//! Key enumeration and sampling, per-key evaluation, parallel resumable
//! sweeps, summaries and file export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::engine::{branch_current, resolve_params, Strategy};
use crate::lde::{DieSample, LdeTable, MismatchTable, ModelCard};
use crate::locking::{
    assignment_for, key_for_selection, product, selection_of, Key, KeyEvaluator, LockError,
    LockedCircuit,
};
use crate::metrics::{
    classify, measure, KeyClass, MeasureOptions, MetricsError, MetricsReport, SpecWindow,
};

/// Default cap on exhaustive enumeration.
pub const DEFAULT_KEYSPACE_CAP: u128 = 1_000_000;

pub const CSV_HEADER: [&str; 9] = [
    "key_hex",
    "valid",
    "gain_db",
    "pm_deg",
    "bw_hz",
    "power_w",
    "gm_s",
    "class",
    "solver_status",
];

const CHECKPOINT_MAGIC: &str = "# ldelock-checkpoint v1";

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("valid keyspace {size} exceeds the enumeration cap {cap}")]
    KeyspaceTooLarge { size: u128, cap: u128 },
    #[error("sample of {requested} keys requested from a keyspace of {available}")]
    SampleTooLarge { requested: usize, available: u128 },
    #[error("no records to summarize")]
    EmptyRecords,
    #[error("checkpoint {path} belongs to a different run (hash {found}, expected {expected})")]
    ResumeMismatch {
        path: String,
        expected: String,
        found: String,
    },
    #[error("corrupt checkpoint line {line}: {reason}")]
    BadCheckpoint { line: usize, reason: String },
    #[error("bad CSV: {0}")]
    BadCsv(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SweepError + '_ {
    move |source| SweepError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SweepMode {
    Exhaustive,
    Sample {
        n: usize,
        seed: u64,
        include_correct: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub samples: usize,
    pub seed: u64,
}

/// Everything that determines a sweep's results. `jobs` and the
/// checkpoint settings only affect how it runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub mode: SweepMode,
    pub card: ModelCard,
    pub table: LdeTable,
    pub mismatch: MismatchTable,
    pub measure: MeasureOptions,
    pub spec: SpecWindow,
    /// Device whose drain current is recorded per key.
    pub branch: Option<String>,
    pub monte_carlo: Option<MonteCarlo>,
    pub keyspace_cap: u128,
    pub jobs: usize,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let card = ModelCard::n65();
        SweepConfig {
            mode: SweepMode::Exhaustive,
            table: card.lde_table(),
            card,
            mismatch: crate::lde::default_mismatch_table(),
            measure: MeasureOptions::default(),
            spec: SpecWindow::default(),
            branch: None,
            monte_carlo: None,
            keyspace_cap: DEFAULT_KEYSPACE_CAP,
            jobs: 1,
            checkpoint: None,
            checkpoint_every: 64,
        }
    }
}

impl SweepConfig {
    /// Read `model`, `lde.*`, `mismatch.*`, `solver.*`, `spec.*` and
    /// `sweep.*` keys over the defaults.
    pub fn from_config(cfg: &KvConfig) -> Result<SweepConfig, SweepError> {
        let mut s = SweepConfig::default();
        if let Some(m) = cfg.get("model") {
            s.card = ModelCard::by_name(m).map_err(|e| ConfigError::BadValue {
                key: "model".into(),
                reason: e.to_string(),
            })?;
            s.table = s.card.lde_table();
        }
        let bad = |key: &str, e: &dyn std::fmt::Display| ConfigError::BadValue {
            key: key.into(),
            reason: e.to_string(),
        };
        s.table.apply_overrides(cfg).map_err(|e| bad("lde", &e))?;
        s.mismatch
            .apply_overrides(cfg)
            .map_err(|e| bad("mismatch", &e))?;
        s.measure.solver = crate::engine::SolverOptions::from_config(cfg)?;
        s.measure.skip_gm = !cfg.get_bool("sweep.gm", true)?;
        s.spec = SpecWindow::from_config(cfg)?;
        s.branch = cfg.get("sweep.branch").map(str::to_string);
        s.keyspace_cap = cfg.parse_or("sweep.cap", s.keyspace_cap)?;
        s.jobs = cfg.parse_or("sweep.jobs", s.jobs)?;
        if s.jobs == 0 {
            return Err(bad("sweep.jobs", &"must be at least 1").into());
        }
        s.checkpoint_every = cfg
            .parse_or("sweep.checkpoint_every", s.checkpoint_every)?
            .max(1);
        if let Some(n) = cfg.parse_opt::<usize>("sweep.sample")? {
            if n == 0 {
                return Err(bad("sweep.sample", &"must be at least 1").into());
            }
            s.mode = SweepMode::Sample {
                n,
                seed: cfg.parse_or("sweep.seed", cfg.parse_or("seed", 0u64)?)?,
                include_correct: cfg.get_bool("sweep.include_correct", true)?,
            };
        }
        if let Some(n) = cfg.parse_opt::<usize>("sweep.mc_samples")? {
            if n > 0 {
                s.monte_carlo = Some(MonteCarlo {
                    samples: n,
                    seed: cfg.parse_or("sweep.mc_seed", cfg.parse_or("seed", 0u64)?)?,
                });
            }
        }
        Ok(s)
    }

    /// Digest of every result-affecting setting.
    pub fn result_hash(&self) -> String {
        let mut h = Sha256::new();
        let text = format!(
            "{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}",
            self.mode,
            self.card,
            self.table,
            self.mismatch,
            self.measure,
            self.spec,
            self.branch,
            self.monte_carlo
        );
        h.update(text);
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SolverStatus {
    Converged(Strategy),
    Failed(String),
    InvalidKey(String),
}

impl SolverStatus {
    pub fn label(&self) -> String {
        match self {
            SolverStatus::Converged(Strategy::Newton) => "newton".into(),
            SolverStatus::Converged(Strategy::GminStepping) => "gmin_stepping".into(),
            SolverStatus::Converged(Strategy::SourceRamp) => "source_ramp".into(),
            SolverStatus::Failed(why) => format!("failed: {why}"),
            SolverStatus::InvalidKey(why) => format!("invalid_key: {why}"),
        }
    }

    pub fn converged(&self) -> bool {
        matches!(self, SolverStatus::Converged(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    /// Position in the swept key list.
    pub index: usize,
    /// Option index per group; None for keys that fail the one-hot check.
    pub selection: Option<Vec<usize>>,
    pub key: Key,
    pub valid: bool,
    /// Absent for invalid or non-converged keys.
    pub metrics: Option<MetricsReport>,
    pub class: KeyClass,
    pub solver_status: SolverStatus,
    pub wall_time_s: f64,
    /// Share of Monte Carlo dies on which this key still classifies Correct.
    pub mc_correct_fraction: Option<f64>,
    pub branch_current_a: Option<f64>,
}

impl serde::Serialize for Key {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{}:{}", self.len(), self.to_hex()))
    }
}

impl<'de> serde::Deserialize<'de> for Key {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let (len, hex) = s
            .split_once(':')
            .ok_or_else(|| serde::de::Error::custom("expected <len>:<hex>"))?;
        let len: usize = len.parse().map_err(serde::de::Error::custom)?;
        Key::from_hex(hex, len).map_err(serde::de::Error::custom)
    }
}

/// Every valid key in lexicographic order of group option indices.
pub fn enumerate_keys(lc: &LockedCircuit, cap: u128) -> Result<Vec<Key>, SweepError> {
    let size = lc.plan.valid_keyspace();
    if size > cap {
        return Err(SweepError::KeyspaceTooLarge { size, cap });
    }
    let sizes: Vec<usize> = lc.plan.groups.iter().map(|g| g.options.len()).collect();
    Ok(product(&sizes)
        .into_iter()
        .map(|s| key_for_selection(&lc.plan, &s))
        .collect())
}

/// Selection for a mixed-radix index (last group varies fastest).
fn selection_at(sizes: &[usize], mut i: u128) -> Vec<usize> {
    let mut s = vec![0; sizes.len()];
    for d in (0..sizes.len()).rev() {
        s[d] = (i % sizes[d] as u128) as usize;
        i /= sizes[d] as u128;
    }
    s
}

/// `n` distinct valid keys drawn uniformly without replacement, returned in
/// lexicographic order. With `include_correct`, the correct key replaces
/// one draw if it was not picked.
pub fn sample_keys(
    lc: &LockedCircuit,
    n: usize,
    seed: u64,
    include_correct: bool,
) -> Result<Vec<Key>, SweepError> {
    let size = lc.plan.valid_keyspace();
    if n as u128 > size {
        return Err(SweepError::SampleTooLarge {
            requested: n,
            available: size,
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let sizes: Vec<usize> = lc.plan.groups.iter().map(|g| g.options.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: BTreeSet<u128> = if size <= 1 << 26 {
        index::sample(&mut rng, size as usize, n)
            .into_iter()
            .map(|i| i as u128)
            .collect()
    } else {
        let mut set = BTreeSet::new();
        while set.len() < n {
            set.insert(rng.random_range(0..size));
        }
        set
    };
    if include_correct {
        if let Some(cs) = lc.plan.correct_selection() {
            let ci = cs
                .iter()
                .zip(&sizes)
                .fold(0u128, |acc, (&o, &r)| acc * r as u128 + o as u128);
            if !picked.contains(&ci) {
                let victims: Vec<u128> = picked.iter().copied().collect();
                let v = victims[rng.random_range(0..victims.len())];
                picked.remove(&v);
                picked.insert(ci);
            }
        }
    }
    Ok(picked
        .into_iter()
        .map(|i| key_for_selection(&lc.plan, &selection_at(&sizes, i)))
        .collect())
}

/// Keys selected by `cfg.mode`.
pub fn keys_for(lc: &LockedCircuit, cfg: &SweepConfig) -> Result<Vec<Key>, SweepError> {
    match &cfg.mode {
        SweepMode::Exhaustive => enumerate_keys(lc, cfg.keyspace_cap),
        SweepMode::Sample {
            n,
            seed,
            include_correct,
        } => sample_keys(lc, *n, *seed, *include_correct),
    }
}

/// Decode, simulate, measure and classify one key. Failures are recorded,
/// never returned.
pub fn evaluate_key(lc: &LockedCircuit, key: &Key, cfg: &SweepConfig) -> SweepRecord {
    let started = Instant::now();
    let mut rec = SweepRecord {
        index: 0,
        selection: None,
        key: key.clone(),
        valid: false,
        metrics: None,
        class: KeyClass::Incorrect,
        solver_status: SolverStatus::InvalidKey(String::new()),
        wall_time_s: 0.0,
        mc_correct_fraction: None,
        branch_current_a: None,
    };
    let sel = match selection_of(&lc.plan, key) {
        Ok(s) => s,
        Err(e) => {
            rec.solver_status = SolverStatus::InvalidKey(e.to_string());
            rec.wall_time_s = started.elapsed().as_secs_f64();
            return rec;
        }
    };
    rec.valid = true;
    let assignment = assignment_for(&lc.plan, &sel);
    rec.selection = Some(sel);
    let mut run = || -> Result<(), MetricsError> {
        let params = resolve_params(&lc.base, &cfg.card, &cfg.table, &assignment, None)?;
        let (m, op) = measure(&lc.base, &params, &cfg.measure)?;
        rec.class = classify(&m, &cfg.spec);
        rec.solver_status = SolverStatus::Converged(op.strategy);
        if let Some(dev) = &cfg.branch {
            rec.branch_current_a = Some(branch_current(&lc.base, &op, dev)?);
        }
        rec.metrics = Some(m);
        if let Some(mc) = &cfg.monte_carlo {
            let mut opts = cfg.measure.clone();
            opts.skip_gm = true;
            let mut hits = 0usize;
            for d in 0..mc.samples {
                let die = DieSample::draw(die_seed(mc.seed, d));
                let p = resolve_params(
                    &lc.base,
                    &cfg.card,
                    &cfg.table,
                    &assignment,
                    Some((&die, &cfg.mismatch)),
                )?;
                // A die that fails to converge is a non-working chip.
                if let Ok((mut m, _)) = measure(&lc.base, &p, &opts) {
                    m.gm_s = rec.metrics.as_ref().map_or(0.0, |n| n.gm_s);
                    if classify(&m, &cfg.spec) == KeyClass::Correct {
                        hits += 1;
                    }
                }
            }
            rec.mc_correct_fraction = Some(hits as f64 / mc.samples.max(1) as f64);
        }
        Ok(())
    };
    if let Err(e) = run() {
        rec.metrics = None;
        rec.class = KeyClass::Incorrect;
        rec.branch_current_a = None;
        rec.solver_status = SolverStatus::Failed(e.to_string());
    }
    rec.wall_time_s = started.elapsed().as_secs_f64();
    rec
}

/// Seed of Monte Carlo die `d`; every key sees the same dies.
pub fn die_seed(seed: u64, d: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add(d as u64 + 1)
}

/// Hash tying a checkpoint to one lock, key list and config.
pub fn run_hash(lc: &LockedCircuit, keys: &[Key], cfg: &SweepConfig) -> String {
    let mut h = Sha256::new();
    h.update(lc.base.to_netlist());
    h.update(lc.plan.to_config().to_canonical());
    h.update(cfg.result_hash());
    for k in keys {
        h.update(k.to_hex());
        h.update(b"\n");
    }
    hex(&h.finalize())
}

/// Evaluate `keys` on `cfg.jobs` workers. Records come back ordered by key
/// position. With a checkpoint path, finished records are appended there
/// and an existing checkpoint from the same run is resumed.
pub fn run_sweep(
    lc: &LockedCircuit,
    keys: &[Key],
    cfg: &SweepConfig,
) -> Result<Vec<SweepRecord>, SweepError> {
    let hash = run_hash(lc, keys, cfg);
    let mut done: BTreeMap<usize, SweepRecord> = BTreeMap::new();
    let writer = match &cfg.checkpoint {
        Some(path) => {
            if path.exists() {
                done = read_checkpoint(path, &hash, lc, keys)?;
            }
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(io_err(path))?;
            if done.is_empty() {
                f.set_len(0).map_err(io_err(path))?;
                writeln!(f, "{CHECKPOINT_MAGIC} {hash}").map_err(io_err(path))?;
            }
            Some(Mutex::new((f, Vec::<String>::new())))
        }
        None => None,
    };
    let todo: Vec<usize> = (0..keys.len()).filter(|i| !done.contains_key(i)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .expect("thread pool");
    let every = cfg.checkpoint_every.max(1);
    let fresh: Vec<Result<SweepRecord, SweepError>> = pool.install(|| {
        todo.par_iter()
            .map(|&i| {
                let mut r = evaluate_key(lc, &keys[i], cfg);
                r.index = i;
                if let Some(w) = &writer {
                    let mut g = w.lock().expect("checkpoint lock");
                    g.1.push(checkpoint_line(&r));
                    if g.1.len() >= every {
                        flush_lines(&mut g, cfg.checkpoint.as_deref().expect("path"))?;
                    }
                }
                Ok(r)
            })
            .collect()
    });
    if let Some(w) = &writer {
        let mut g = w.lock().expect("checkpoint lock");
        flush_lines(&mut g, cfg.checkpoint.as_deref().expect("path"))?;
    }
    for r in fresh {
        let r = r?;
        done.insert(r.index, r);
    }
    Ok(done.into_values().collect())
}

fn flush_lines(g: &mut (File, Vec<String>), path: &Path) -> Result<(), SweepError> {
    let mut buf = String::new();
    for l in g.1.drain(..) {
        buf.push_str(&l);
        buf.push('\n');
    }
    g.0.write_all(buf.as_bytes()).map_err(io_err(path))?;
    g.0.flush().map_err(io_err(path))
}

const NONE_BITS: &str = "----------------";

fn opt_bits(v: Option<f64>) -> String {
    v.map_or_else(
        || NONE_BITS.to_string(),
        |x| format!("{:016x}", x.to_bits()),
    )
}

fn parse_bits(s: &str) -> Result<Option<f64>, String> {
    if s == NONE_BITS {
        return Ok(None);
    }
    u64::from_str_radix(s, 16)
        .map(|b| Some(f64::from_bits(b)))
        .map_err(|e| e.to_string())
}

/// Fixed-width record: index, class, status code, then nine 16-hex-digit
/// float fields (gain, pm, bw, power, gm, mc fraction, branch current,
/// wall time) and the free-text status detail.
fn checkpoint_line(r: &SweepRecord) -> String {
    let m = r.metrics.as_ref();
    let code = match &r.solver_status {
        SolverStatus::Converged(Strategy::Newton) => 'N',
        SolverStatus::Converged(Strategy::GminStepping) => 'G',
        SolverStatus::Converged(Strategy::SourceRamp) => 'R',
        SolverStatus::Failed(_) => 'F',
        SolverStatus::InvalidKey(_) => 'I',
    };
    let detail = match &r.solver_status {
        SolverStatus::Failed(s) | SolverStatus::InvalidKey(s) => s.replace('\n', " "),
        SolverStatus::Converged(_) => String::new(),
    };
    let class = match r.class {
        KeyClass::Correct => 'C',
        KeyClass::NearlyCorrect => 'B',
        KeyClass::Incorrect => 'X',
    };
    format!(
        "{:010} {class} {code} {} {} {} {} {} {} {} {} {detail}",
        r.index,
        opt_bits(m.map(|m| m.gain_db)),
        opt_bits(m.and_then(|m| m.phase_margin_deg)),
        opt_bits(m.and_then(|m| m.bw_3db_hz)),
        opt_bits(m.map(|m| m.power_w)),
        opt_bits(m.map(|m| m.gm_s)),
        opt_bits(r.mc_correct_fraction),
        opt_bits(r.branch_current_a),
        opt_bits(Some(r.wall_time_s)),
    )
}

fn parse_checkpoint_line(
    line: &str,
    lc: &LockedCircuit,
    keys: &[Key],
) -> Result<SweepRecord, String> {
    let mut it = line.splitn(12, ' ');
    let mut next = || it.next().ok_or_else(|| "truncated".to_string());
    let index: usize = next()?
        .parse()
        .map_err(|e: std::num::ParseIntError| e.to_string())?;
    let key = keys.get(index).ok_or("index beyond key list")?.clone();
    let class = match next()? {
        "C" => KeyClass::Correct,
        "B" => KeyClass::NearlyCorrect,
        "X" => KeyClass::Incorrect,
        c => return Err(format!("class `{c}`")),
    };
    let code = next()?.to_string();
    let mut f = Vec::new();
    for _ in 0..8 {
        f.push(parse_bits(next()?)?);
    }
    let detail = it.next().unwrap_or("").to_string();
    let solver_status = match code.as_str() {
        "N" => SolverStatus::Converged(Strategy::Newton),
        "G" => SolverStatus::Converged(Strategy::GminStepping),
        "R" => SolverStatus::Converged(Strategy::SourceRamp),
        "F" => SolverStatus::Failed(detail),
        "I" => SolverStatus::InvalidKey(detail),
        c => return Err(format!("status `{c}`")),
    };
    let metrics = match (f[0], f[3], f[4]) {
        (Some(gain_db), Some(power_w), Some(gm_s)) => Some(MetricsReport {
            gain_db,
            phase_margin_deg: f[1],
            bw_3db_hz: f[2],
            power_w,
            gm_s,
        }),
        _ => None,
    };
    let selection = selection_of(&lc.plan, &key).ok();
    Ok(SweepRecord {
        index,
        valid: selection.is_some(),
        selection,
        key,
        metrics,
        class,
        solver_status,
        wall_time_s: f[7].unwrap_or(0.0),
        mc_correct_fraction: f[5],
        branch_current_a: f[6],
    })
}

fn read_checkpoint(
    path: &Path,
    hash: &str,
    lc: &LockedCircuit,
    keys: &[Key],
) -> Result<BTreeMap<usize, SweepRecord>, SweepError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().unwrap_or("").trim_end();
    let found = header
        .strip_prefix(CHECKPOINT_MAGIC)
        .map(str::trim)
        .unwrap_or("");
    if found != hash {
        return Err(SweepError::ResumeMismatch {
            path: path.display().to_string(),
            expected: hash.to_string(),
            found: found.to_string(),
        });
    }
    let mut out = BTreeMap::new();
    let mut good_len = header.len() + 1;
    for (n, raw) in lines.enumerate() {
        // A final line without newline was cut off mid-write.
        if !raw.ends_with('\n') {
            break;
        }
        let r = parse_checkpoint_line(raw.trim_end_matches('\n'), lc, keys).map_err(|reason| {
            SweepError::BadCheckpoint {
                line: n + 2,
                reason,
            }
        })?;
        out.insert(r.index, r);
        good_len += raw.len();
    }
    if good_len < text.len() {
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        f.set_len(good_len as u64).map_err(io_err(path))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub total: usize,
    pub valid: usize,
    pub invalid: usize,
    pub non_converged: usize,
    pub correct: usize,
    pub nearly_correct: usize,
    pub incorrect: usize,
    /// Correct keys over all records.
    pub correct_rate: f64,
    /// `(bin lower edge dB, count)` for 1 dB bins of measured gain.
    pub gain_histogram: Vec<(i64, usize)>,
    /// Records without a measured gain.
    pub unbinned: usize,
    pub gain_range_db: Option<(f64, f64)>,
    pub correct_power_range_w: Option<(f64, f64)>,
    /// Empty interval `[highest gain below the threshold, threshold)`.
    pub gap_below_threshold_db: Option<(f64, f64)>,
    pub wall_time_s: f64,
    pub per_key_s: f64,
}

pub fn summarize(records: &[SweepRecord], spec: &SpecWindow) -> Result<SweepSummary, SweepError> {
    if records.is_empty() {
        return Err(SweepError::EmptyRecords);
    }
    let class_of = |r: &SweepRecord| {
        r.metrics
            .as_ref()
            .map_or(KeyClass::Incorrect, |m| classify(m, spec))
    };
    let count = |k: KeyClass| records.iter().filter(|r| class_of(r) == k).count();
    let gains: Vec<f64> = records
        .iter()
        .filter_map(|r| r.metrics.as_ref().map(|m| m.gain_db))
        .filter(|g| g.is_finite())
        .collect();
    let mut hist: BTreeMap<i64, usize> = BTreeMap::new();
    for g in &gains {
        *hist.entry(g.floor() as i64).or_default() += 1;
    }
    let minmax = |v: &mut dyn Iterator<Item = f64>| {
        v.fold(None, |acc: Option<(f64, f64)>, x| {
            Some(acc.map_or((x, x), |(a, b)| (a.min(x), b.max(x))))
        })
    };
    let thr = spec.gain_min_correct;
    let below = gains
        .iter()
        .copied()
        .filter(|g| *g < thr)
        .fold(f64::NEG_INFINITY, f64::max);
    let wall: f64 = records.iter().map(|r| r.wall_time_s).sum();
    let correct = count(KeyClass::Correct);
    Ok(SweepSummary {
        total: records.len(),
        valid: records.iter().filter(|r| r.valid).count(),
        invalid: records.iter().filter(|r| !r.valid).count(),
        non_converged: records
            .iter()
            .filter(|r| matches!(r.solver_status, SolverStatus::Failed(_)))
            .count(),
        correct,
        nearly_correct: count(KeyClass::NearlyCorrect),
        incorrect: count(KeyClass::Incorrect),
        correct_rate: correct as f64 / records.len() as f64,
        gain_histogram: hist.into_iter().collect(),
        unbinned: records.len() - gains.len(),
        gain_range_db: minmax(&mut gains.iter().copied()),
        correct_power_range_w: minmax(
            &mut records
                .iter()
                .filter(|r| class_of(r) == KeyClass::Correct)
                .filter_map(|r| r.metrics.as_ref().map(|m| m.power_w)),
        ),
        gap_below_threshold_db: below.is_finite().then_some((below, thr)),
        wall_time_s: wall,
        per_key_s: wall / records.len() as f64,
    })
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// One CSV row per record with the columns of [`CSV_HEADER`].
pub fn write_csv<W: Write>(records: &[SweepRecord], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in records {
        let m = r.metrics.as_ref();
        out.write_record([
            r.key.to_hex(),
            r.valid.to_string(),
            num(m.map(|m| m.gain_db)),
            num(m.and_then(|m| m.phase_margin_deg)),
            num(m.and_then(|m| m.bw_3db_hz)),
            num(m.map(|m| m.power_w)),
            num(m.map(|m| m.gm_s)),
            r.class.to_string(),
            r.solver_status.label(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn export_csv(records: &[SweepRecord], path: &Path) -> Result<(), SweepError> {
    let f = File::create(path).map_err(io_err(path))?;
    write_csv(records, f).map_err(|e| SweepError::BadCsv(e.to_string()))
}

/// A CSV row read back.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub key_hex: String,
    pub valid: bool,
    pub metrics: Option<MetricsReport>,
    pub class: KeyClass,
    pub solver_status: String,
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>, SweepError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut rd = csv::Reader::from_reader(BufReader::new(f));
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| SweepError::BadCsv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CSV_HEADER {
        return Err(SweepError::BadCsv(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| SweepError::BadCsv(e.to_string()))?;
        let f = |i: usize| -> Result<Option<f64>, SweepError> {
            let s = &row[i];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|e| SweepError::BadCsv(format!("column {}: {e}", CSV_HEADER[i])))
            }
        };
        let metrics = match (f(2)?, f(5)?, f(6)?) {
            (Some(gain_db), Some(power_w), Some(gm_s)) => Some(MetricsReport {
                gain_db,
                phase_margin_deg: f(3)?,
                bw_3db_hz: f(4)?,
                power_w,
                gm_s,
            }),
            _ => None,
        };
        out.push(CsvRow {
            key_hex: row[0].to_string(),
            valid: row[1] == *"true",
            metrics,
            class: row[7].parse().map_err(SweepError::BadCsv)?,
            solver_status: row[8].to_string(),
        });
    }
    Ok(out)
}

pub fn export_summary_json(summary: &SweepSummary, path: &Path) -> Result<(), SweepError> {
    let text = serde_json::to_string_pretty(summary).expect("serializable");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// `key_index,class,gain_db,pm_deg,bw_hz,power_w,gm_s,branch_a` series for plotting.
pub fn export_plotdata(records: &[SweepRecord], path: &Path) -> Result<(), SweepError> {
    let mut s = String::from("key_index,class,gain_db,pm_deg,bw_hz,power_w,gm_s,branch_a\n");
    for r in records.iter().filter(|r| r.valid) {
        let m = r.metrics.as_ref();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.index,
            r.class,
            num(m.map(|m| m.gain_db)),
            num(m.and_then(|m| m.phase_margin_deg)),
            num(m.and_then(|m| m.bw_3db_hz)),
            num(m.map(|m| m.power_w)),
            num(m.map(|m| m.gm_s)),
            num(r.branch_current_a),
        );
    }
    fs::write(path, s).map_err(io_err(path))
}

/// Scatter plot of one metric against key index; one circle per point.
pub fn scatter_svg(title: &str, y_label: &str, points: &[(usize, f64, KeyClass)]) -> String {
    let (w, h, pad) = (800.0, 400.0, 50.0);
    let xmax = points.iter().map(|p| p.0).max().unwrap_or(0).max(1) as f64;
    let (ymin, ymax) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.1), b.max(p.1))
        });
    let (ymin, ymax) = if ymin.is_finite() && ymax > ymin {
        (ymin, ymax)
    } else {
        (ymin.min(0.0) - 1.0, ymax.max(0.0) + 1.0)
    };
    let sx = |x: usize| pad + (w - 2.0 * pad) * x as f64 / xmax;
    let sy = |y: f64| h - pad - (h - 2.0 * pad) * (y - ymin) / (ymax - ymin);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
        w / 2.0
    );
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="{}" font-size="11">{ymin:.3}</text>"#,
        h - pad + 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="5" y="{}" font-size="11">{ymax:.3}</text>"#,
        pad - 5.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">key index / {y_label}</text>"#,
        w / 2.0,
        h - 10.0
    );
    for (x, y, class) in points {
        let color = match class {
            KeyClass::Correct => "green",
            KeyClass::NearlyCorrect => "orange",
            KeyClass::Incorrect => "red",
        };
        let _ = writeln!(
            s,
            r#"<circle class="pt" cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#,
            sx(*x),
            sy(*y)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Gain scatter with one point per valid key that has a measured gain.
pub fn export_gain_svg(records: &[SweepRecord], path: &Path) -> Result<(), SweepError> {
    let pts: Vec<(usize, f64, KeyClass)> = records
        .iter()
        .filter(|r| r.valid)
        .filter_map(|r| r.metrics.as_ref().map(|m| (r.index, m.gain_db, r.class)))
        .collect();
    fs::write(path, scatter_svg("Gain per key", "gain (dB)", &pts)).map_err(io_err(path))
}

/// Read a checkpoint's header hash, if the file has one.
pub fn checkpoint_hash(path: &Path) -> Result<Option<String>, SweepError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut line = String::new();
    BufReader::new(f)
        .read_line(&mut line)
        .map_err(io_err(path))?;
    Ok(line
        .trim_end()
        .strip_prefix(CHECKPOINT_MAGIC)
        .map(|h| h.trim().to_string()))
}

/// Evaluates candidate locks through [`run_sweep`] during pruning.
pub struct SweepEvaluator<'a> {
    pub cfg: &'a SweepConfig,
}

impl KeyEvaluator for SweepEvaluator<'_> {
    fn evaluate(
        &mut self,
        lc: &LockedCircuit,
        selections: &[Vec<usize>],
    ) -> Result<Vec<SweepRecord>, LockError> {
        let keys: Vec<Key> = selections
            .iter()
            .map(|s| key_for_selection(&lc.plan, s))
            .collect();
        let mut cfg = self.cfg.clone();
        cfg.checkpoint = None;
        run_sweep(lc, &keys, &cfg).map_err(|e| LockError::Evaluation(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lde::Arrangement;
    use crate::locking::{KeyGroup, LockingPlan};
    use crate::netlist::parse_netlist;

    /// Common-source stage with a keyed load device: cheap to simulate.
    pub(crate) fn toy_lock(sizes: &[usize]) -> LockedCircuit {
        let c = parse_netlist(
            "VDD vdd 0 DC 1.2\nVIN in 0 DC 0.6\nVREF ref 0 DC 0.6\nRL vdd out 20k\nCL out 0 1p\n\
             M1 out in 0 0 NMOS W=2u L=0.5u\nM2 out in 0 0 NMOS W=1u L=0.5u\nM3 out in 0 0 NMOS W=1u L=0.5u\n\
             .supply VDD\n.input in ref\n.output out\n",
        )
        .unwrap();
        let names = ["M1", "M2", "M3"];
        let groups = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                KeyGroup::new(
                    &format!("g{i}"),
                    vec![names[i].into()],
                    Arrangement::ALL[..n].iter().map(|a| vec![*a]).collect(),
                    Some(0),
                )
                .unwrap()
            })
            .collect();
        LockedCircuit::new(&c, LockingPlan::from_groups(groups)).unwrap()
    }

    #[test]
    fn enumeration_counts_and_cap() {
        let lc = toy_lock(&[3, 3, 2]);
        let keys = enumerate_keys(&lc, DEFAULT_KEYSPACE_CAP).unwrap();
        assert_eq!(keys.len(), 18);
        assert!(keys.iter().all(|k| selection_of(&lc.plan, k).is_ok()));
        assert!(matches!(
            enumerate_keys(&lc, 17),
            Err(SweepError::KeyspaceTooLarge { size: 18, .. })
        ));
        assert_eq!(enumerate_keys(&toy_lock(&[3]), 10).unwrap().len(), 3);
    }

    #[test]
    fn sampling() {
        let lc = toy_lock(&[3, 3, 2]);
        let all = enumerate_keys(&lc, 100).unwrap();
        assert_eq!(sample_keys(&lc, 18, 1, false).unwrap(), all);
        assert_eq!(
            sample_keys(&lc, 5, 9, false).unwrap(),
            sample_keys(&lc, 5, 9, false).unwrap()
        );
        assert!(sample_keys(&lc, 0, 9, true).unwrap().is_empty());
        assert!(matches!(
            sample_keys(&lc, 19, 9, false),
            Err(SweepError::SampleTooLarge { .. })
        ));
        let correct = lc.correct_key().unwrap();
        for seed in 0..20 {
            let s = sample_keys(&lc, 2, seed, true).unwrap();
            assert!(s.contains(&correct));
            assert_eq!(s.len(), 2);
        }
    }

    #[test]
    fn selection_index_roundtrip() {
        let sizes = [4, 3, 2];
        let lex = product(&sizes);
        for (i, s) in lex.iter().enumerate() {
            assert_eq!(&selection_at(&sizes, i as u128), s);
        }
    }

    #[test]
    fn invalid_key_carries_no_metrics() {
        let lc = toy_lock(&[3]);
        let r = evaluate_key(
            &lc,
            &Key::from_bits(vec![true, true, false]),
            &SweepConfig::default(),
        );
        assert!(!r.valid);
        assert!(r.metrics.is_none());
        assert_eq!(r.class, KeyClass::Incorrect);
        assert!(r.solver_status.label().starts_with("invalid_key"));
    }

    #[test]
    fn checkpoint_line_roundtrip() {
        let lc = toy_lock(&[3, 2]);
        let keys = enumerate_keys(&lc, 100).unwrap();
        let mut cfg = SweepConfig::default();
        cfg.branch = Some("M1".into());
        for (i, k) in keys.iter().enumerate() {
            let mut r = evaluate_key(&lc, k, &cfg);
            r.index = i;
            let back = parse_checkpoint_line(&checkpoint_line(&r), &lc, &keys).unwrap();
            assert_eq!(back, r);
        }
    }

    #[test]
    fn summary_gap_and_histogram() {
        let lc = toy_lock(&[3]);
        let mk = |g: f64| SweepRecord {
            index: 0,
            selection: Some(vec![0]),
            key: lc.correct_key().unwrap(),
            valid: true,
            metrics: Some(MetricsReport {
                gain_db: g,
                phase_margin_deg: None,
                bw_3db_hz: None,
                power_w: 1e-3,
                gm_s: 0.0,
            }),
            class: KeyClass::Incorrect,
            solver_status: SolverStatus::Converged(Strategy::Newton),
            wall_time_s: 0.5,
            mc_correct_fraction: None,
            branch_current_a: None,
        };
        let recs: Vec<_> = [10.0, 40.5, 62.0, 71.0, 75.0]
            .iter()
            .map(|&g| mk(g))
            .collect();
        let s = summarize(&recs, &SpecWindow::default()).unwrap();
        assert_eq!(s.gap_below_threshold_db, Some((62.0, 70.0)));
        assert_eq!(s.correct, 2);
        assert_eq!(s.correct + s.nearly_correct + s.incorrect, s.total);
        assert_eq!(
            s.gain_histogram.iter().map(|b| b.1).sum::<usize>() + s.unbinned,
            s.total
        );
        assert!((s.correct_rate - 0.4).abs() < 1e-15);
        assert!(matches!(
            summarize(&[], &SpecWindow::default()),
            Err(SweepError::EmptyRecords)
        ));
    }
}
