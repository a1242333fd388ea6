//! `rscn`: data generation, training, prototype caching, evaluation,
//! ablation and gradient verification.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rscn_core::eval::{evaluate, EvalReport, EvalSplit};
use rscn_core::gradcheck::{run_gradcheck, run_gradcheck_with_fault, Fault, GradcheckReport, DEFAULT_TRIALS};
use rscn_core::losses::LossWeights;
use rscn_core::synthbench::{generate_dataset, load_dataset, write_dataset, Dataset};
use rscn_core::trainer::{
    cache_reference_prototypes, encode_checkpoint, load_checkpoint, save_checkpoint, train_rscn,
    train_source_only, MetricsLog, PrototypeCache, TrainConfig,
};

pub use config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.rsck";
pub const METRICS_FILE: &str = "metrics.ndjson";

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// 1: a check or a training run failed.
    Verification(String),
    /// 2: bad arguments, config or paths.
    Usage(String),
    /// 3: an artifact on disk is corrupt or belongs to another run.
    Integrity(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Integrity(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Verification(m) | CliError::Usage(m) | CliError::Integrity(m) => f.write_str(m),
        }
    }
}

impl From<rscn_core::Error> for CliError {
    fn from(e: rscn_core::Error) -> Self {
        use rscn_core::Error as E;
        let msg = e.to_string();
        match e {
            _ if e.is_integrity() => CliError::Integrity(msg),
            E::MissingCacheEntry(_) => CliError::Integrity(msg),
            E::Io { .. } | E::Config(_) | E::InvalidSpec(_) | E::InvalidArgument(_) | E::Json(_) => {
                CliError::Usage(msg)
            }
            _ => CliError::Verification(msg),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "rscn", version, about = "Instance-free domain adaptive detection lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    SourceOnly,
    Rscn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InjectedFault {
    GrlSign,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic benchmark to a directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the source-only reference or the adapted detector.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Reference prototype cache; required with `--mode rscn`.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Loss weights `det,bpa,rsh,ssp`, overriding the config file.
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute the reference detector's per-image prototypes.
    CacheProtos {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// AP@50 and feature metrics of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// source_train, target_val or source_val.
        #[arg(long, default_value = "target_val")]
        split: String,
        /// Earlier report to compute the mAP gain against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Source-only plus the four constraint combinations, one table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every primitive and loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        /// Write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<InjectedFault>,
    },
}

/// Parses `args` (program name first), runs the command, returns the exit
/// status.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult {
    match command {
        Command::GenData { config, out } => cmd_gen_data(&RunConfig::load(&config)?, &out),
        Command::Train {
            mode,
            config,
            data,
            cache,
            weights,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(w) = weights {
                let [det, bpa, rsh, ssp] = parse_weights(&w)?;
                cfg.file.weights = LossWeights {
                    det,
                    bpa,
                    rsh,
                    ssp,
                    ..cfg.file.weights
                };
                cfg.file.weights.validate()?;
            }
            if mode == Mode::Rscn && cache.is_none() {
                return Err(CliError::Usage("--mode rscn requires --cache".into()));
            }
            cmd_train(mode, &cfg, &data, cache.as_deref(), &out)
        }
        Command::CacheProtos {
            checkpoint,
            data,
            config,
            out,
        } => cmd_cache_protos(&checkpoint, &data, &RunConfig::load(&config)?, &out),
        Command::Eval {
            checkpoint,
            data,
            config,
            split,
            baseline,
            out,
        } => {
            let split = EvalSplit::parse(&split).ok_or_else(|| {
                CliError::Usage(format!("unknown split `{split}` (source_train, target_val, source_val)"))
            })?;
            cmd_eval(&checkpoint, &data, &RunConfig::load(&config)?, split, baseline.as_deref(), &out)
        }
        Command::Ablate {
            config,
            data,
            cache,
            out,
        } => cmd_ablate(&RunConfig::load(&config)?, &data, &cache, &out),
        Command::Gradcheck {
            seed,
            trials,
            report,
            inject_fault,
        } => cmd_gradcheck(seed, trials, report.as_deref(), inject_fault),
    }
}

pub fn parse_weights(text: &str) -> CliResult<[f64; 4]> {
    let bad = || CliError::Usage(format!("--weights expects det,bpa,rsh,ssp, got `{text}`"));
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    v.try_into().map_err(|_| bad())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn open_dataset(dir: &Path) -> CliResult<Dataset> {
    Ok(load_dataset(dir)?)
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> CliResult {
    let ds = generate_dataset(&cfg.file.scene, cfg.file.data.sizes(), cfg.seed)?;
    write_dataset(&ds, out)?;
    cfg.write_echo(out)?;
    println!("{}", ds.manifest.summary_table());
    Ok(())
}

/// Trains one detector and writes checkpoint, metrics log and echoed config
/// into `out`.
pub fn cmd_train(mode: Mode, cfg: &RunConfig, data: &Path, cache: Option<&Path>, out: &Path) -> CliResult {
    let ds = open_dataset(data)?;
    let tc = cfg.train_config();
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    cfg.write_echo(out)?;
    let mut log = MetricsLog::create(&out.join(METRICS_FILE))?;
    let params = match mode {
        Mode::SourceOnly => train_source_only(&tc, &ds, &mut log)?,
        Mode::Rscn => {
            let path = cache.ok_or_else(|| CliError::Usage("--mode rscn requires --cache".into()))?;
            let cache = PrototypeCache::load(path)?;
            train_rscn(&tc, &ds, &cache, &mut log)?
        }
    };
    let hash = save_checkpoint(&out.join(CHECKPOINT_FILE), &params)?;
    println!("checkpoint {} ({} iterations)", hex::encode(hash), tc.iterations);
    Ok(())
}

pub fn cmd_cache_protos(checkpoint: &Path, data: &Path, cfg: &RunConfig, out: &Path) -> CliResult {
    let (reference, hash) = load_checkpoint(checkpoint)?;
    if out.exists() {
        let existing = PrototypeCache::load(out)?;
        if existing.ref_hash != hash {
            return Err(CliError::Integrity(format!(
                "{} was built from reference {}, not {}",
                out.display(),
                hex::encode(existing.ref_hash),
                hex::encode(hash)
            )));
        }
    }
    let ds = open_dataset(data)?;
    let cache = cache_reference_prototypes(&reference, hash, &cfg.train_config(), &ds)?;
    cache.save(out)?;
    println!(
        "cached prototypes for {} source images (reference {})",
        cache.entries.len(),
        &hex::encode(hash)[..16]
    );
    Ok(())
}

/// `| split | AP per class | mAP | gain |` in points.
pub fn table_row(report: &EvalReport, gain: Option<f64>) -> String {
    let pts = |v: f64| format!("{:.1}", 100.0 * v);
    let mut cells = vec![report.split.clone()];
    cells.extend(report.per_class_ap.iter().map(|ap| ap.map_or("-".into(), pts)));
    cells.push(pts(report.map50));
    cells.push(gain.map_or("-".into(), |g| format!("{:+.1}", 100.0 * g)));
    format!("| {} |", cells.join(" | "))
}

pub fn table_header(num_classes: usize) -> String {
    let mut cells = vec!["split".to_string()];
    cells.extend((0..num_classes).map(|c| format!("AP c{c}")));
    cells.push("mAP".into());
    cells.push("gain".into());
    let sep = vec!["---"; cells.len()].join(" | ");
    format!("| {} |\n| {sep} |", cells.join(" | "))
}

pub fn read_report(path: &Path) -> CliResult<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    cfg: &RunConfig,
    split: EvalSplit,
    baseline: Option<&Path>,
    out: &Path,
) -> CliResult {
    let base = baseline.map(read_report).transpose()?;
    let (params, hash) = load_checkpoint(checkpoint)?;
    let ds = open_dataset(data)?;
    let report = evaluate(&params, &ds, split, &cfg.file.eval, cfg.seed, &hex::encode(hash))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(out, json + "\n")?;
    let gain = base.map(|b| report.map50 - b.map50);
    println!("{}\n{}", table_header(params.num_classes), table_row(&report, gain));
    if let Some(s) = report.intra_class_sim_mean {
        println!("cross-domain intra-class similarity {s:.4}");
    }
    if let Some(d) = report.inter_class_disc {
        println!("inter-class discriminability {d:.4}");
    }
    Ok(())
}

/// One row of the constraint ablation.
pub struct AblationRow {
    pub name: &'static str,
    pub weights: LossWeights,
    pub checkpoint: Vec<u8>,
    pub report: EvalReport,
}

/// Row weights: the configured weights with the constraints outside the
/// row switched off.
pub fn ablation_weights(base: &LossWeights) -> Vec<(&'static str, LossWeights)> {
    let row = |bpa: bool, rsh: bool, ssp: bool| LossWeights {
        bpa: if bpa { base.bpa } else { 0.0 },
        rsh: if rsh { base.rsh } else { 0.0 },
        ssp: if ssp { base.ssp } else { 0.0 },
        ..*base
    };
    vec![
        ("source-only", row(false, false, false)),
        ("BPA", row(true, false, false)),
        ("BPA+RSH", row(true, true, false)),
        ("BPA+SSP", row(true, false, true)),
        ("BPA+RSH+SSP", row(true, true, true)),
    ]
}

/// Trains and evaluates every ablation row on `target_val`. `logs` receives
/// each row's metrics log.
pub fn run_ablation(
    tc: &TrainConfig,
    ds: &Dataset,
    cache: &PrototypeCache,
    mut logs: impl FnMut(&str) -> CliResult<MetricsLog>,
) -> CliResult<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, weights) in ablation_weights(&tc.weights) {
        let cfg = TrainConfig { weights, ..tc.clone() };
        let mut log = logs(name)?;
        let params = if name == "source-only" {
            train_source_only(&cfg, ds, &mut log)?
        } else {
            train_rscn(&cfg, ds, cache, &mut log)?
        };
        let checkpoint = encode_checkpoint(&params);
        let hash = rscn_core::trainer::checkpoint_hash(&checkpoint)?;
        let report = evaluate(&params, ds, EvalSplit::TargetVal, &cfg.eval, cfg.seed, &hex::encode(hash))?;
        rows.push(AblationRow {
            name,
            weights,
            checkpoint,
            report,
        });
    }
    Ok(rows)
}

fn mark(w: f64) -> &'static str {
    if w > 0.0 {
        "x"
    } else {
        ""
    }
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let k = rows.first().map_or(0, |r| r.report.per_class_ap.len());
    let base = rows.first().map_or(0.0, |r| r.report.map50);
    let mut head = vec!["method".to_string(), "BPA".into(), "RSH".into(), "SSP".into()];
    head.extend((0..k).map(|c| format!("AP c{c}")));
    head.extend(["mAP".into(), "gain".into()]);
    let mut out = format!("| {} |\n| {} |\n", head.join(" | "), vec!["---"; head.len()].join(" | "));
    for r in rows {
        let mut cells = vec![
            r.name.to_string(),
            mark(r.weights.bpa).into(),
            mark(r.weights.rsh).into(),
            mark(r.weights.ssp).into(),
        ];
        cells.extend(r.report.per_class_ap.iter().map(|ap| ap.map_or("-".into(), |v| format!("{:.1}", 100.0 * v))));
        cells.push(format!("{:.1}", 100.0 * r.report.map50));
        cells.push(format!("{:+.1}", 100.0 * (r.report.map50 - base)));
        out += &format!("| {} |\n", cells.join(" | "));
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let k = rows.first().map_or(0, |r| r.report.per_class_ap.len());
    let base = rows.first().map_or(0.0, |r| r.report.map50);
    let mut head = vec!["method".to_string(), "w_bpa".into(), "w_rsh".into(), "w_ssp".into()];
    head.extend((0..k).map(|c| format!("ap_c{c}")));
    head.extend(["map50".into(), "gain".into()]);
    let mut out = head.join(",") + "\n";
    for r in rows {
        let mut cells = vec![
            r.name.to_string(),
            r.weights.bpa.to_string(),
            r.weights.rsh.to_string(),
            r.weights.ssp.to_string(),
        ];
        cells.extend(r.report.per_class_ap.iter().map(|ap| ap.map_or(String::new(), |v| format!("{v:.6}"))));
        cells.push(format!("{:.6}", r.report.map50));
        cells.push(format!("{:.6}", r.report.map50 - base));
        out += &(cells.join(",") + "\n");
    }
    out
}

pub fn cmd_ablate(cfg: &RunConfig, data: &Path, cache: &Path, out: &Path) -> CliResult {
    let ds = open_dataset(data)?;
    let cache = PrototypeCache::load(cache)?;
    cfg.write_echo(out)?;
    let row_dir = |name: &str| out.join("rows").join(name);
    let rows = run_ablation(&cfg.train_config(), &ds, &cache, |name| {
        let dir = row_dir(name);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(MetricsLog::create(&dir.join(METRICS_FILE))?)
    })?;
    for r in &rows {
        let dir = row_dir(r.name);
        write_file(&dir.join(CHECKPOINT_FILE), &r.checkpoint)?;
        write_file(&dir.join("report.json"), serde_json::to_string_pretty(&r.report).expect("report serializes") + "\n")?;
    }
    let md = ablation_markdown(&rows);
    write_file(&out.join("ablation.md"), &md)?;
    write_file(&out.join("ablation.csv"), ablation_csv(&rows))?;
    print!("{md}");
    Ok(())
}

pub fn gradcheck_table(report: &GradcheckReport) -> String {
    let mut out = format!("{:<24} {:>6} {:>12}  status\n", "check", "trials", "max rel err");
    for c in &report.checks {
        let status = if c.passed { "ok" } else { "FAIL" };
        out += &format!("{:<24} {:>6} {:>12.3e}  {status}\n", c.name, c.trials, c.max_rel_err);
    }
    out
}

pub fn cmd_gradcheck(seed: u64, trials: usize, report_path: Option<&Path>, fault: Option<InjectedFault>) -> CliResult {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let report = match fault {
        None => run_gradcheck(seed, trials)?,
        Some(InjectedFault::GrlSign) => run_gradcheck_with_fault(seed, trials, Fault::GrlSign)?,
    };
    print!("{}", gradcheck_table(&report));
    if let Some(p) = report_path {
        write_file(p, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    }
    if report.passed() {
        println!("gradcheck passed");
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::Verification(format!("gradcheck failed: {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_flag() {
        assert_eq!(parse_weights("1,0,0.5,2").unwrap(), [1.0, 0.0, 0.5, 2.0]);
        for bad in ["1,0,0", "1,0,0,0,0", "a,b,c,d", ""] {
            assert!(matches!(parse_weights(bad), Err(CliError::Usage(_))));
        }
    }

    #[test]
    fn ablation_rows_differ_only_in_constraint_weights() {
        let base = LossWeights {
            grl_lambda: 0.7,
            rsh: 2.0,
            ..LossWeights::default()
        };
        let rows = ablation_weights(&base);
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].1, LossWeights { bpa: 0.0, rsh: 0.0, ssp: 0.0, ..base });
        assert_eq!(rows[4].1, base);
        for (_, w) in &rows {
            assert_eq!((w.det, w.grl_lambda), (1.0, 0.7));
        }
        assert_eq!(rows[2].1.rsh, 2.0);
        assert_eq!(rows[3].1.rsh, 0.0);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(rscn_core::Error::Integrity("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(rscn_core::Error::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(rscn_core::Error::NonFiniteGradient("w".into())).exit_code(), 1);
        assert_eq!(run(["rscn", "frobnicate"]), 2);
        assert_eq!(run(["rscn", "eval"]), 2);
    }

    #[test]
    fn table_row_format() {
        let r = EvalReport {
            split: "target_val".into(),
            checkpoint_hash: String::new(),
            per_class_ap: vec![Some(0.5), None, Some(1.0)],
            map50: 0.75,
            detections: 0,
            ground_truths: 0,
            intra_class_sim: Default::default(),
            intra_class_sim_mean: None,
            inter_class_disc: None,
        };
        assert_eq!(table_row(&r, Some(0.101)), "| target_val | 50.0 | - | 100.0 | 75.0 | +10.1 |");
        assert_eq!(table_row(&r, None), "| target_val | 50.0 | - | 100.0 | 75.0 | - |");
        assert!(table_header(3).starts_with("| split | AP c0 | AP c1 | AP c2 | mAP | gain |"));
    }
}
