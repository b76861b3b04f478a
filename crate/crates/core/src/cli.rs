//! Command-line front end: `run`, `sweep`, and `analyze buffer-model`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 divergence. Other
//! runtime failures (I/O, malformed files) also exit with 1.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::engine::{IterationMetrics, RunSummary, SimConfig, Simulation};
use crate::error::{Error, Result};
use crate::streams::{analytic_queue_size, QueueForm, QueueModelParams, DEFAULT_SAMPLE_BYTES};

#[derive(Debug, Parser)]
#[command(
    name = "streamsgd",
    version,
    about = "Synchronous distributed SGD over heterogeneous streams, on a simulated clock"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment.
    Run(RunArgs),
    /// Run every point of a parameter grid.
    Sweep(SweepArgs),
    /// Analytic tools.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Grid file with a `[grid]` table and optional `[[zip]]` groups.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Closed-form persistence-buffer growth over iterations.
    BufferModel(BufferModelArgs),
}

#[derive(Debug, Args)]
pub struct BufferModelArgs {
    /// Iteration time in seconds.
    #[arg(long)]
    pub t: f64,
    /// Streaming rate in samples/second.
    #[arg(long)]
    pub rate: f64,
    /// Batch size.
    #[arg(long)]
    pub batch: u64,
    #[arg(long)]
    pub t_max: u64,
    #[arg(long, default_value_t = 1)]
    pub step: u64,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_BYTES)]
    pub sample_bytes: u64,
    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` (including the program name) and executes the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: &Command) -> Result<i32> {
    match command {
        Command::Run(a) => {
            let mut cfg = load_config(&a.config)?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            let summary = cmd_run(&cfg, &a.out)?;
            if !a.quiet {
                print_summary(&summary);
            }
            Ok(EXIT_OK)
        }
        Command::Sweep(a) => {
            let mut cfg = load_config(&a.config)?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            let grid = load_grid(&a.grid)?;
            let outcomes = cmd_sweep(&cfg, &grid, &a.out, a.quiet)?;
            let diverged = outcomes.iter().any(|o| matches!(o, SweepOutcome::Diverged(_)));
            Ok(if diverged { EXIT_DIVERGED } else { EXIT_OK })
        }
        Command::Analyze(AnalyzeCommand::BufferModel(a)) => {
            let rows = buffer_model_table(a.t, a.rate, a.batch, a.t_max, a.step, a.sample_bytes)?;
            if let Some(path) = &a.out {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                write_buffer_model(&rows, File::create(path)?)?;
            }
            if !a.quiet {
                write_buffer_model(&rows, io::stdout().lock())?;
            }
            Ok(EXIT_OK)
        }
    }
}

fn print_summary(s: &RunSummary) {
    println!(
        "iterations {}  sim time {:.3} s  final accuracy {:.4}  floats sent {}  buffer {} samples",
        s.iterations, s.sim_time_s, s.final_accuracy, s.floats_sent, s.final_buffer_samples
    );
}

/// Parses an experiment file. Unknown keys are rejected by name.
pub fn parse_config(text: &str) -> Result<SimConfig> {
    let cfg: SimConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<SimConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn render_config(cfg: &SimConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Format(e.to_string()))
}

/// Metrics CSV header for `n_devices` devices.
pub fn metrics_header(n_devices: usize) -> Vec<String> {
    let mut h: Vec<String> =
        ["iteration", "sim_time_s", "epoch", "global_batch", "lr_used", "train_loss", "test_accuracy"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    h.extend((0..n_devices).map(|d| format!("buffer_dev{d}")));
    h.extend(
        [
            "buffer_samples",
            "buffer_bytes",
            "floats_sent_cum",
            "bytes_sent_cum",
            "cnc_cum",
            "injection_bytes",
            "injection_bytes_cum",
            "wait_time_s",
            "compute_time_s",
            "comm_time_s",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    h
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_record(m: &IterationMetrics) -> Vec<String> {
    let mut r = vec![
        m.iteration.to_string(),
        m.sim_time_s.to_string(),
        m.epoch.to_string(),
        m.global_batch.to_string(),
        m.lr_used.to_string(),
        m.train_loss.to_string(),
        opt_cell(m.test_accuracy),
    ];
    r.extend(m.buffer_occupancy.iter().map(|o| o.to_string()));
    let samples: usize = m.buffer_occupancy.iter().sum();
    r.extend([
        samples.to_string(),
        m.buffer_bytes.to_string(),
        m.floats_sent_cum.to_string(),
        m.bytes_sent_cum.to_string(),
        opt_cell(m.cnc_cum),
        m.injection_bytes.to_string(),
        m.injection_bytes_cum.to_string(),
        m.wait_time_s.to_string(),
        m.compute_time_s.to_string(),
        m.comm_time_s.to_string(),
    ]);
    r
}

/// Runs `cfg`, writing `config.toml`, `metrics.csv`, and `summary.json` into `out`.
pub fn cmd_run(cfg: &SimConfig, out: &Path) -> Result<RunSummary> {
    let mut sim = Simulation::new(cfg.clone())?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), render_config(cfg)?)?;
    let mut writer = csv::Writer::from_path(out.join("metrics.csv"))?;
    writer.write_record(metrics_header(cfg.n_devices))?;
    let summary = sim.run(|row| {
        writer.write_record(metrics_record(row))?;
        Ok(())
    });
    writer.flush()?;
    let summary = summary?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// A parameter grid: the cartesian product of `axes`, where each axis is
/// either one key or several keys varied together.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub axes: Vec<Vec<(String, Vec<toml::Value>)>>,
}

impl Grid {
    pub fn keys(&self) -> Vec<String> {
        self.axes.iter().flatten().map(|(k, _)| k.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|axis| axis[0].1.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points in row-major order (last axis fastest).
    pub fn points(&self) -> Vec<Vec<(String, toml::Value)>> {
        let mut points = vec![Vec::new()];
        for axis in &self.axes {
            let n = axis[0].1.len();
            points = points
                .into_iter()
                .flat_map(|p| {
                    (0..n).map(move |i| {
                        let mut p = p.clone();
                        p.extend(axis.iter().map(|(k, vals)| (k.clone(), vals[i].clone())));
                        p
                    })
                })
                .collect();
        }
        points
    }
}

fn values_of(key: &str, v: &toml::Value) -> Result<Vec<toml::Value>> {
    match v {
        toml::Value::Array(a) if !a.is_empty() => Ok(a.clone()),
        _ => Err(Error::Config(format!("grid key `{key}` needs a non-empty array of values"))),
    }
}

pub fn parse_grid(text: &str) -> Result<Grid> {
    let doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("grid: {}", e.message())))?;
    let mut axes = Vec::new();
    for (section, value) in &doc {
        match (section.as_str(), value) {
            ("grid", toml::Value::Table(t)) => {
                for (k, v) in t {
                    axes.push(vec![(k.clone(), values_of(k, v)?)]);
                }
            }
            ("zip", toml::Value::Array(groups)) => {
                for g in groups {
                    let toml::Value::Table(t) = g else {
                        return Err(Error::config("grid: every [[zip]] entry must be a table"));
                    };
                    let axis = t.iter().map(|(k, v)| Ok((k.clone(), values_of(k, v)?))).collect::<Result<Vec<_>>>()?;
                    let Some(first) = axis.first() else {
                        return Err(Error::config("grid: empty [[zip]] group"));
                    };
                    if let Some((k, vals)) = axis.iter().find(|(_, vals)| vals.len() != first.1.len()) {
                        return Err(Error::Config(format!(
                            "grid: zipped key `{k}` has {} values, `{}` has {}",
                            vals.len(),
                            first.0,
                            first.1.len()
                        )));
                    }
                    axes.push(axis);
                }
            }
            (other, _) => return Err(Error::Config(format!("grid: unknown section `{other}`"))),
        }
    }
    if axes.is_empty() {
        return Err(Error::config("grid is empty"));
    }
    let grid = Grid { axes };
    let keys = grid.keys();
    if let Some(k) = keys.iter().enumerate().find(|(i, k)| keys[..*i].contains(k)).map(|(_, k)| k) {
        return Err(Error::Config(format!("grid: key `{k}` appears twice")));
    }
    Ok(grid)
}

pub fn load_grid(path: &Path) -> Result<Grid> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_grid(&text)
}

/// Returns `cfg` with the dotted `key` set to `value`, revalidated.
pub fn apply_override(cfg: &SimConfig, key: &str, value: &toml::Value) -> Result<SimConfig> {
    let mut doc = toml::Table::try_from(cfg).map_err(|e| Error::Format(e.to_string()))?;
    let mut parts = key.split('.').peekable();
    let mut table = &mut doc;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            table.insert(part.to_string(), value.clone());
            break;
        }
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("grid key `{key}`: `{part}` is not a table"))),
        };
    }
    let cfg: SimConfig =
        doc.try_into().map_err(|e: toml::de::Error| Error::Config(format!("grid key `{key}`: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepOutcome {
    Completed(RunSummary),
    Diverged(String),
}

const SUMMARY_COLUMNS: [&str; 12] = [
    "iterations",
    "epochs",
    "final_accuracy",
    "best_accuracy",
    "sim_time_s",
    "time_to_target_s",
    "floats_sent",
    "bytes_sent",
    "final_buffer_samples",
    "final_buffer_bytes",
    "cnc",
    "injection_bytes",
];

fn summary_cells(s: &RunSummary) -> Vec<String> {
    vec![
        s.iterations.to_string(),
        s.epochs.to_string(),
        s.final_accuracy.to_string(),
        s.best_accuracy.to_string(),
        s.sim_time_s.to_string(),
        opt_cell(s.time_to_target_s),
        s.floats_sent.to_string(),
        s.bytes_sent.to_string(),
        s.final_buffer_samples.to_string(),
        s.final_buffer_bytes.to_string(),
        opt_cell(s.cnc),
        s.injection_bytes.to_string(),
    ]
}

fn value_cell(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        other => other.to_string(),
    }
}

/// Runs every grid point into `out/run_NNN` and writes `out/sweep_summary.csv`.
/// Diverged runs are recorded and the sweep continues.
pub fn cmd_sweep(base: &SimConfig, grid: &Grid, out: &Path, quiet: bool) -> Result<Vec<SweepOutcome>> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::config("grid is empty"));
    }
    let configs = points
        .iter()
        .map(|p| p.iter().try_fold(base.clone(), |cfg, (k, v)| apply_override(&cfg, k, v)))
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(out)?;
    let mut table = csv::Writer::from_path(out.join("sweep_summary.csv"))?;
    let mut header = vec!["run".to_string()];
    header.extend(grid.keys());
    header.push("status".into());
    header.extend(SUMMARY_COLUMNS.iter().map(|s| s.to_string()));
    table.write_record(&header)?;

    let mut outcomes = Vec::with_capacity(configs.len());
    for (i, (point, cfg)) in points.iter().zip(&configs).enumerate() {
        let name = format!("run_{i:03}");
        let mut row = vec![name.clone()];
        row.extend(point.iter().map(|(_, v)| value_cell(v)));
        let outcome = match cmd_run(cfg, &out.join(&name)) {
            Ok(s) => {
                row.push("ok".into());
                row.extend(summary_cells(&s));
                SweepOutcome::Completed(s)
            }
            Err(e @ Error::Divergence { .. }) => {
                row.push("diverged".into());
                row.extend(std::iter::repeat_n(String::new(), SUMMARY_COLUMNS.len()));
                SweepOutcome::Diverged(e.to_string())
            }
            Err(e) => return Err(e),
        };
        if !quiet {
            let desc: Vec<String> = point.iter().map(|(k, v)| format!("{k}={}", value_cell(v))).collect();
            match &outcome {
                SweepOutcome::Completed(s) => println!(
                    "{name} {}  accuracy {:.4}  sim time {:.3} s",
                    desc.join(" "),
                    s.final_accuracy,
                    s.sim_time_s
                ),
                SweepOutcome::Diverged(msg) => println!("{name} {}  {msg}", desc.join(" ")),
            }
        }
        table.write_record(&row)?;
        outcomes.push(outcome);
    }
    table.flush()?;
    Ok(outcomes)
}

/// One row of the analytic buffer-model table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferModelRow {
    pub steps: u64,
    /// `None` when `t*S < b`.
    pub q_exact: Option<f64>,
    pub q_approx: f64,
    /// Storage of `q_approx` in GiB.
    pub gb: f64,
    pub log10_q: f64,
}

pub fn buffer_model_table(
    t: f64,
    rate: f64,
    b: u64,
    t_max: u64,
    step: u64,
    sample_bytes: u64,
) -> Result<Vec<BufferModelRow>> {
    if !(t >= 0.0) || !t.is_finite() || !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::config("buffer-model: need t >= 0 and rate > 0"));
    }
    if step == 0 || sample_bytes == 0 {
        return Err(Error::config("buffer-model: step and sample-bytes must be positive"));
    }
    (0..=t_max)
        .step_by(step as usize)
        .map(|steps| {
            let p = QueueModelParams { t, rate, b, steps };
            let q_exact = match analytic_queue_size(&p, QueueForm::Exact) {
                Ok(q) => Some(q.samples),
                Err(Error::QueueDomain { .. }) => None,
                Err(e) => return Err(e),
            };
            let approx = analytic_queue_size(&p, QueueForm::Approximate)?;
            Ok(BufferModelRow {
                steps,
                q_exact,
                q_approx: approx.samples,
                gb: approx.gib(sample_bytes),
                log10_q: approx.samples.log10(),
            })
        })
        .collect()
}

pub fn write_buffer_model<W: Write>(rows: &[BufferModelRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["T", "q_exact", "q_approx", "gb", "log10_q"])?;
    for r in rows {
        w.write_record([
            r.steps.to_string(),
            r.q_exact.map(|q| q.to_string()).unwrap_or_else(|| "NA".into()),
            r.q_approx.to_string(),
            r.gb.to_string(),
            r.log10_q.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
