//! `ldelock`: lock an analog netlist with layout-dependent-effect keys,
//! sweep the keyspace, and run the attack analyses.
//!
//! Configuration is a flat `key = value` file (`--config`) overlaid by
//! repeated `--set key=value` flags. Every command writes the resolved
//! configuration and its hash into the output directory.
//!
//! Exit codes: 0 ok, 2 usage or configuration, 3 procedure failure, 4 I/O.

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ldelock::attacks::{self, AttackError, AttackReport, Metric, Oracle};
use ldelock::config::{ConfigError, KvConfig};
use ldelock::lde::Arrangement;
use ldelock::locking::{
    bundled, obfuscate, protect, LockError, LockReport, LockedCircuit, LockingPlan, ObfuscateConfig,
};
use ldelock::metrics::ro_substitution_trend;
use ldelock::netlist::{builtin_ota, parse_netlist, Circuit};
use ldelock::sweep::{self, SweepConfig, SweepError, SweepRecord, SweepSummary};

#[derive(Parser, Debug)]
#[command(
    name = "ldelock",
    version,
    about = "Analog logic locking through layout-dependent effects"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Configuration file (`key = value` lines, `[section]` prefixes).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed for randomized steps; falls back to `seed` in the config, then LDELOCK_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "ldelock-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a lock and write its plan, report and keyed netlist.
    Lock {
        /// Also write the correct key to `secret.ini`.
        #[arg(long)]
        export_secret: bool,
    },
    /// Evaluate every (or a sample of) valid key.
    Sweep {
        #[command(flatten)]
        src: PlanSource,
        /// Sweep this many sampled keys instead of the whole keyspace.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Run one attack analysis against a lock.
    Attack {
        kind: AttackArg,
        #[command(flatten)]
        src: PlanSource,
        /// Devices or role tags forming the divide-and-conquer block.
        #[arg(long, value_delimiter = ',', default_value = "input_pair")]
        block: Vec<String>,
        /// Metrics that must match the oracle: gain, pm, bw, power, gm.
        #[arg(long = "match", value_delimiter = ',', default_value = "gm")]
        matched: Vec<String>,
        /// Relative match tolerance.
        #[arg(long, default_value_t = attacks::DEFAULT_TOL)]
        tol: f64,
        /// Hold groups outside the block at the correct option instead of
        /// the attacker's symmetric guess.
        #[arg(long)]
        reference_correct: bool,
        /// Device whose branch current is traced.
        #[arg(long, default_value = "MN9")]
        device: String,
        /// Brute-force time budget in seconds; 0 projects only.
        #[arg(long, default_value_t = 0.0)]
        budget: f64,
        /// Per-key simulation time in seconds; measured when omitted.
        #[arg(long)]
        per_key: Option<f64>,
        /// Query the nominal design rather than a mismatch-sampled die.
        #[arg(long)]
        noiseless: bool,
    },
    /// Bundled end-to-end demonstrations.
    Demo { which: DemoArg },
}

#[derive(Args, Debug)]
struct PlanSource {
    /// Plan file written by `lock`; defaults to `lock.plan_file` or the bundled plan named by `lock.plan`.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Secret file written by `lock --export-secret`.
    #[arg(long)]
    secret: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AttackArg {
    Brute,
    Dnc,
    Power,
    Removal,
    Branch,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DemoArg {
    Ota,
    Ro,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Procedure(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Procedure(_) => 3,
            Failure::Io(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Procedure(m) => write!(f, "procedure failed: {m}"),
            Failure::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<LockError> for Failure {
    fn from(e: LockError) -> Self {
        match e {
            LockError::CannotEliminate(_) | LockError::Evaluation(_) => {
                Failure::Procedure(e.to_string())
            }
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<SweepError> for Failure {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Io { .. } | SweepError::BadCheckpoint { .. } | SweepError::BadCsv(_) => {
                Failure::Io(e.to_string())
            }
            SweepError::EmptyRecords => Failure::Procedure(e.to_string()),
            SweepError::Lock(l) => l.into(),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<AttackError> for Failure {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Sweep(s) => s.into(),
            AttackError::Oracle(_) | AttackError::EmptyRecords => Failure::Procedure(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

type Res<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ldelock: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Merged configuration plus the output directory.
struct Ctx {
    cfg: KvConfig,
    out: PathBuf,
}

impl Ctx {
    fn resolve(g: &Global) -> Res<Ctx> {
        let mut cfg = match &g.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::new(),
        };
        for kv in &g.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Failure::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim());
        }
        if let Some(s) = g.seed {
            cfg.set("seed", s.to_string());
        } else if !cfg.contains("seed") {
            if let Ok(s) = std::env::var("LDELOCK_SEED") {
                let s: u64 = s.trim().parse().map_err(|_| {
                    Failure::Config(format!("LDELOCK_SEED `{s}` is not an unsigned integer"))
                })?;
                cfg.set("seed", s.to_string());
            }
        }
        let jobs = match g.jobs {
            Some(j) => j,
            None => cfg.parse_or(
                "sweep.jobs",
                std::thread::available_parallelism().map_or(1, |n| n.get()),
            )?,
        };
        if jobs == 0 {
            return Err(Failure::Config("--jobs must be at least 1".into()));
        }
        cfg.set("sweep.jobs", jobs.to_string());
        fs::create_dir_all(&g.out).map_err(|e| Failure::Io(format!("{}: {e}", g.out.display())))?;
        Ok(Ctx {
            cfg,
            out: g.out.clone(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Res<PathBuf> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
        Ok(p)
    }

    fn seed(&self, what: &str) -> Res<u64> {
        match self.cfg.parse_opt::<u64>("seed")? {
            Some(s) => Ok(s),
            None => Err(Failure::Config(format!(
                "{what} needs a seed (--seed, `seed` key or LDELOCK_SEED)"
            ))),
        }
    }

    /// Write `<command>.config.ini`: the resolved keys and their hash.
    fn echo(&self, command: &str, extra: &[(&str, String)]) -> Res<()> {
        let mut text = format!(
            "# ldelock {command}\n# config hash {}\n",
            self.cfg.hash_hex()
        );
        for (k, v) in extra {
            text.push_str(&format!("# {k} {v}\n"));
        }
        text.push_str(&self.cfg.to_canonical());
        self.write(&format!("{command}.config.ini"), &text)?;
        Ok(())
    }

    fn circuit(&self) -> Res<Circuit> {
        match self.cfg.get("netlist") {
            None | Some("builtin:ota") => Ok(builtin_ota()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Failure::Config(format!("netlist {p}: {e}")))?;
                parse_netlist(&text).map_err(|e| Failure::Config(format!("netlist {p}: {e}")))
            }
        }
    }

    fn sweep_config(&self) -> Res<SweepConfig> {
        let mut s = SweepConfig::from_config(&self.cfg)?;
        s.checkpoint = self.cfg.get("sweep.checkpoint").map(PathBuf::from);
        Ok(s)
    }

    fn obfuscate_config(&self) -> Res<ObfuscateConfig> {
        Ok(ObfuscateConfig::from_config(&self.cfg)?)
    }

    /// A bundled lock by name: `bundled:36`, `bundled:41`, `bundled:desk`
    /// or `bundled:symmetry`.
    fn bundled(&self, c: &Circuit, name: &str) -> Res<Option<LockedCircuit>> {
        let lc = match name {
            "bundled:36" => bundled::lock_36(c)?,
            "bundled:41" => bundled::lock_41(c)?,
            "bundled:desk" => bundled::desk_lock(c)?,
            "bundled:symmetry" => bundled::symmetry_lock(c)?,
            _ => return Ok(None),
        };
        Ok(Some(lc))
    }

    /// The lock a sweep or attack runs on.
    fn load_lock(&self, src: &PlanSource) -> Res<LockedCircuit> {
        let c = self.circuit()?;
        let plan_file = src
            .plan
            .clone()
            .or_else(|| self.cfg.get("lock.plan_file").map(PathBuf::from));
        if let Some(p) = plan_file {
            let mut plan = LockingPlan::from_config(&KvConfig::load(&p)?)?;
            let secret = src
                .secret
                .clone()
                .or_else(|| self.cfg.get("lock.secret_file").map(PathBuf::from));
            if let Some(s) = secret {
                plan.apply_secret(&KvConfig::load(&s)?)?;
            }
            return Ok(LockedCircuit::new(&c, plan)?);
        }
        let name = self.cfg.get("lock.plan").unwrap_or("bundled:desk");
        self.bundled(&c, name)?.ok_or_else(|| {
            Failure::Config(format!(
                "`lock.plan = {name}` needs a plan file; run `ldelock lock` first and pass --plan"
            ))
        })
    }
}

fn run(cli: Cli) -> Res<()> {
    let ctx = Ctx::resolve(&cli.global)?;
    match cli.command {
        Command::Lock { export_secret } => cmd_lock(&ctx, export_secret),
        Command::Sweep { src, sample } => cmd_sweep(&ctx, &src, sample),
        Command::Attack {
            kind,
            src,
            block,
            matched,
            tol,
            reference_correct,
            device,
            budget,
            per_key,
            noiseless,
        } => {
            let opts = AttackOpts {
                block,
                matched,
                tol,
                reference_correct,
                device,
                budget,
                per_key,
                noiseless,
            };
            cmd_attack(&ctx, kind, &src, &opts)
        }
        Command::Demo {
            which: DemoArg::Ota,
        } => cmd_demo_ota(&ctx),
        Command::Demo { which: DemoArg::Ro } => cmd_demo_ro(&ctx),
    }
}

fn cmd_lock(ctx: &Ctx, export_secret: bool) -> Res<()> {
    let c = ctx.circuit()?;
    let plan_name = ctx.cfg.get("lock.plan").unwrap_or("generate").to_string();
    let scfg = ctx.sweep_config()?;
    let (lc, report) = match ctx.bundled(&c, &plan_name)? {
        Some(lc) if ctx.cfg.get_bool("lock.protect", false)? => {
            let ocfg = ctx.obfuscate_config()?;
            let (lc, report, _) = protect(&lc, &ocfg, &scfg, vec![format!("{plan_name} plan")])?;
            (lc, report)
        }
        Some(lc) => {
            let report = LockReport::for_plan(
                &lc,
                vec![format!("{plan_name} plan"), "layout order shuffled".into()],
            );
            (lc, report)
        }
        None if plan_name == "generate" => {
            ctx.seed("lock generation")?;
            let ocfg = ctx.obfuscate_config()?;
            let (lc, report, _) = obfuscate(&c, &ocfg, &scfg)?;
            (lc, report)
        }
        None => return Err(Failure::Config(format!("unknown lock.plan `{plan_name}`"))),
    };
    ctx.echo("lock", &[])?;
    let plan_text = format!(
        "# ldelock plan ({plan_name})\n{}",
        lc.plan.to_config().to_canonical()
    );
    ctx.write("plan.ini", &plan_text)?;
    ctx.write("locked.cir", &lc.base.to_netlist())?;
    let text = report.to_text();
    ctx.write("lock_report.txt", &text)?;
    ctx.write("lock_report.json", &to_json(&report)?)?;
    if export_secret {
        let secret = lc
            .plan
            .secret_to_config()
            .ok_or_else(|| Failure::Procedure("lock carries no secret to export".into()))?;
        ctx.write("secret.ini", &secret.to_canonical())?;
    }
    print!("{text}");
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Res<String> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Procedure(e.to_string()))
}

/// Sweep `lc` with a checkpoint in the output directory, then write the
/// CSV, summary, plot data and gain scatter under `stem`.
fn sweep_and_export(
    ctx: &Ctx,
    lc: &LockedCircuit,
    scfg: &mut SweepConfig,
    stem: &str,
) -> Res<(Vec<SweepRecord>, SweepSummary)> {
    if scfg.checkpoint.is_none() {
        scfg.checkpoint = Some(ctx.path(&format!("{stem}.ckpt")));
    }
    let keys = sweep::keys_for(lc, scfg)?;
    let t0 = Instant::now();
    let records = sweep::run_sweep(lc, &keys, scfg)?;
    let elapsed = t0.elapsed().as_secs_f64();
    let summary = sweep::summarize(&records, &scfg.spec)?;
    sweep::export_csv(&records, &ctx.path(&format!("{stem}.csv")))?;
    sweep::export_summary_json(&summary, &ctx.path(&format!("{stem}_summary.json")))?;
    sweep::export_plotdata(&records, &ctx.path(&format!("{stem}_plotdata.tsv")))?;
    sweep::export_gain_svg(&records, &ctx.path(&format!("{stem}_gain.svg")))?;
    println!("keys swept              {}", records.len());
    println!("workers                 {}", scfg.jobs);
    println!("elapsed (this run)      {elapsed:.2} s");
    print_summary(&summary);
    Ok((records, summary))
}

fn print_summary(s: &SweepSummary) {
    println!("valid / invalid         {} / {}", s.valid, s.invalid);
    println!("non-converged           {}", s.non_converged);
    println!(
        "correct                 {} ({:.4})",
        s.correct, s.correct_rate
    );
    println!("nearly correct          {}", s.nearly_correct);
    println!("incorrect               {}", s.incorrect);
    if let Some((lo, hi)) = s.gain_range_db {
        println!("gain range              {lo:.2} .. {hi:.2} dB");
    }
    if let Some((lo, hi)) = s.correct_power_range_w {
        println!("correct-key power       {lo:.4e} .. {hi:.4e} W");
    }
    if let Some((lo, hi)) = s.gap_below_threshold_db {
        println!("empty band below spec   {lo:.2} .. {hi:.2} dB");
    }
    println!("per-key time            {:.4} s", s.per_key_s);
}

fn cmd_sweep(ctx: &Ctx, src: &PlanSource, sample: Option<usize>) -> Res<()> {
    let lc = ctx.load_lock(src)?;
    let mut scfg = ctx.sweep_config()?;
    if let Some(n) = sample {
        if n == 0 {
            return Err(Failure::Config("--sample must be at least 1".into()));
        }
        scfg.mode = sweep::SweepMode::Sample {
            n,
            seed: ctx.seed("sampling")?,
            include_correct: ctx.cfg.get_bool("sweep.include_correct", true)?,
        };
    } else if matches!(scfg.mode, sweep::SweepMode::Sample { .. }) {
        ctx.seed("sampling")?;
    }
    ctx.echo("sweep", &[("sweep result hash", scfg.result_hash())])?;
    sweep_and_export(ctx, &lc, &mut scfg, "sweep")?;
    Ok(())
}

struct AttackOpts {
    block: Vec<String>,
    matched: Vec<String>,
    tol: f64,
    reference_correct: bool,
    device: String,
    budget: f64,
    per_key: Option<f64>,
    noiseless: bool,
}

fn oracle(ctx: &Ctx, lc: &LockedCircuit, scfg: &SweepConfig, noiseless: bool) -> Res<Oracle> {
    let die = if noiseless {
        None
    } else {
        Some(ctx.seed("a mismatch-sampled oracle")?)
    };
    Ok(Oracle::new(lc, scfg, die)?)
}

/// Wall time per key, measured on up to eight keys on one worker.
fn measure_per_key(lc: &LockedCircuit, scfg: &SweepConfig) -> Res<f64> {
    let keys = sweep::enumerate_keys(lc, u128::MAX)
        .map(|k| k.into_iter().take(8).collect::<Vec<_>>())
        .or_else(|_| sweep::sample_keys(lc, 8, 0, false))?;
    let mut cfg = scfg.clone();
    cfg.jobs = 1;
    cfg.checkpoint = None;
    let t0 = Instant::now();
    let n = sweep::run_sweep(lc, &keys, &cfg)?.len().max(1);
    Ok(t0.elapsed().as_secs_f64() / n as f64)
}

fn cmd_attack(ctx: &Ctx, kind: AttackArg, src: &PlanSource, o: &AttackOpts) -> Res<()> {
    let lc = ctx.load_lock(src)?;
    let mut scfg = ctx.sweep_config()?;
    if !(o.tol >= 0.0) {
        return Err(Failure::Config("--tol must be non-negative".into()));
    }
    let (name, report): (&str, AttackReport) = match kind {
        AttackArg::Removal => ("removal", attacks::removal_analysis(&lc)),
        AttackArg::Brute => {
            let per_key = match o.per_key {
                Some(p) if p > 0.0 => p,
                Some(_) => return Err(Failure::Config("--per-key must be positive".into())),
                None => measure_per_key(&lc, &scfg)?,
            };
            let orc = if o.budget > 0.0 {
                Some(oracle(ctx, &lc, &scfg, o.noiseless)?)
            } else {
                None
            };
            (
                "brute",
                attacks::brute_force_projection(
                    &lc,
                    per_key,
                    o.budget,
                    orc.as_ref(),
                    &scfg,
                    o.tol,
                )?,
            )
        }
        AttackArg::Dnc => {
            let matched = o
                .matched
                .iter()
                .map(|m| m.parse::<Metric>())
                .collect::<Result<Vec<_>, _>>()?;
            let orc = oracle(ctx, &lc, &scfg, o.noiseless)?;
            let reference = if o.reference_correct {
                Some(lc.plan.correct_selection().ok_or(AttackError::NoSecret)?)
            } else {
                None
            };
            scfg.checkpoint = None;
            (
                "dnc",
                attacks::divide_and_conquer(
                    &lc,
                    &orc,
                    &o.block,
                    &matched,
                    o.tol,
                    reference.as_deref(),
                    &scfg,
                )?,
            )
        }
        AttackArg::Power => {
            ctx.echo("attack", &[("sweep result hash", scfg.result_hash())])?;
            let (records, _) = sweep_and_export(ctx, &lc, &mut scfg, "sweep")?;
            ("power", attacks::power_window_analysis(&records)?)
        }
        AttackArg::Branch => {
            let dev = lc
                .base
                .device(&o.device)
                .ok_or_else(|| AttackError::UnknownDevice(o.device.clone()))?
                .name
                .clone();
            scfg.branch = Some(dev.clone());
            scfg.measure.skip_gm = true;
            if scfg.checkpoint.is_none() {
                scfg.checkpoint = Some(ctx.path(&format!("branch_{dev}.ckpt")));
            }
            let keys = sweep::keys_for(&lc, &scfg)?;
            let records = sweep::run_sweep(&lc, &keys, &scfg)?;
            sweep::export_plotdata(&records, &ctx.path(&format!("branch_{dev}_plotdata.tsv")))?;
            (
                "branch",
                attacks::branch_current_from_records(&records, &dev)?,
            )
        }
    };
    if !matches!(kind, AttackArg::Power) {
        ctx.echo("attack", &[])?;
    }
    let text = report.to_text();
    ctx.write(&format!("attack_{name}.txt"), &text)?;
    ctx.write(&format!("attack_{name}.json"), &to_json(&report)?)?;
    print!("{text}");
    Ok(())
}

fn cmd_demo_ota(ctx: &Ctx) -> Res<()> {
    let lc = bundled::desk_lock(&builtin_ota())?;
    let mut scfg = ctx.sweep_config()?;
    scfg.mode = sweep::SweepMode::Exhaustive;
    scfg.branch = Some(ctx.cfg.get("sweep.branch").unwrap_or("MN9").to_string());
    ctx.echo("demo_ota", &[("sweep result hash", scfg.result_hash())])?;
    let report = LockReport::for_plan(&lc, vec!["bundled:desk plan".into()]);
    ctx.write("demo_ota_lock_report.txt", &report.to_text())?;
    print!("{}", report.to_text());
    let (records, _) = sweep_and_export(ctx, &lc, &mut scfg, "demo_ota")?;
    let pw = attacks::power_window_analysis(&records)?;
    ctx.write("demo_ota_power.txt", &pw.to_text())?;
    print!("{}", pw.to_text());
    Ok(())
}

fn cmd_demo_ro(ctx: &Ctx) -> Res<()> {
    let scfg = ctx.sweep_config()?;
    let stages = match ctx.cfg.get("ro.stages") {
        Some(_) => ctx
            .cfg
            .get_list("ro.stages")
            .iter()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Failure::Config(format!("ro.stages entry `{s}`")))
            })
            .collect::<Res<Vec<_>>>()?,
        None => vec![3, 5, 7],
    };
    ctx.echo("demo_ro", &[])?;
    let mut csv = String::from("stages,switched,frequency_hz\n");
    println!("PMOS arrangement SOD -> BL, one inverter at a time");
    for n in stages {
        let f = ro_substitution_trend(
            n,
            Arrangement::Sod,
            Arrangement::Bl,
            &scfg.card,
            &scfg.table,
        )
        .map_err(|e| Failure::Procedure(e.to_string()))?;
        let monotone = f.windows(2).all(|w| w[1] > w[0]);
        println!(
            "N = {n} ({})",
            if monotone {
                "strictly increasing"
            } else {
                "NOT monotone"
            }
        );
        for (k, v) in f.iter().enumerate() {
            println!("  {k} switched  {:10.4} GHz", v / 1e9);
            csv.push_str(&format!("{n},{k},{v}\n"));
        }
    }
    ctx.write("ro_trend.csv", &csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(
            Failure::from(LockError::CannotEliminate("x".into())).code(),
            3
        );
        assert_eq!(Failure::from(LockError::NoCandidates).code(), 2);
        let big = SweepError::KeyspaceTooLarge { size: 10, cap: 1 };
        assert_eq!(Failure::from(big).code(), 2);
        assert_eq!(Failure::from(AttackError::EmptyRecords).code(), 3);
    }

    #[test]
    fn parser_accepts_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from([
            "ldelock", "attack", "dnc", "--match", "gm,gain", "--seed", "7",
        ])
        .unwrap();
        assert_eq!(cli.global.seed, Some(7));
        assert!(Cli::try_parse_from(["ldelock", "attack", "sat"]).is_err());
    }
}
