//! Command-line driver. Every pipeline subcommand recomputes its inputs from
//! the configuration, so runs are independent and reproducible.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tse_core::config::ExperimentConfig;
use tse_core::domain::{Field, ObservationSet};
use tse_core::experiment::{self, GroundTruth};
use tse_core::metrics::{field_metrics, uq_metrics, KlMode, UqTruth, DEFAULT_BINS};
use tse_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tse", version, about = "Traffic state estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the configured one, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct FieldPair {
    /// Predicted density field CSV.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth density field CSV.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, requires = "truth_u")]
    pred_u: Option<PathBuf>,
    #[arg(long, requires = "pred_u")]
    truth_u: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the truth model and write the field CSVs.
    Generate(Common),
    /// Write observation, collocation and boundary sets.
    Sample(Common),
    /// Train a PIDL model and write its report and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train the data-only baseline instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Run the extended Kalman filter baseline.
    Ekf(Common),
    /// Train a GAN variant and write Monte-Carlo predictions.
    GanTrain(Common),
    /// Metrics of a predicted field against a truth field.
    Evaluate(FieldPair),
    /// Squared-error maps and matrix-layout CSVs for heatmaps.
    Export(FieldPair),
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    tse_version: &'static str,
    outputs: Vec<String>,
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.text(name, &text)
    }

    fn field(&mut self, name: &str, f: &Field) -> Result<()> {
        f.save_csv(self.path(name))
    }

    fn manifest(mut self, command: &str, cfg: &ExperimentConfig) -> Result<()> {
        let m = Manifest {
            command,
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            tse_version: env!("CARGO_PKG_VERSION"),
            outputs: std::mem::take(&mut self.files),
        };
        let text = serde_json::to_string_pretty(&m)?;
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, Output)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let dir = common.out.clone().or_else(|| cfg.output_dir.clone().map(PathBuf::from)).unwrap_or_else(|| "out".into());
    Ok((cfg, Output::new(dir)?))
}

fn write_truth(out: &mut Output, truth: &GroundTruth) -> Result<()> {
    out.field("truth_rho.csv", &truth.rho)?;
    if let Some(u) = &truth.u {
        out.field("truth_u.csv", u)?;
    }
    Ok(())
}

fn csv_text(header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(f64::to_string).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn observations_text(o: &ObservationSet) -> Result<String> {
    let mut buf = Vec::new();
    o.write_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

/// Field as a matrix: first row holds the times, first column the positions.
fn matrix_text(f: &Field) -> String {
    let g = f.grid();
    let mut s = String::from("x\\t");
    for j in 0..g.nt {
        s.push(',');
        s.push_str(&g.t_at(j).to_string());
    }
    s.push('\n');
    for i in 0..g.nx {
        s.push_str(&g.x_at(i).to_string());
        for j in 0..g.nt {
            s.push(',');
            s.push_str(&f.get(i, j).to_string());
        }
        s.push('\n');
    }
    s
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let (cfg, mut out) = load(&c)?;
            let truth = experiment::generate(&cfg)?;
            write_truth(&mut out, &truth)?;
            out.json("diagnostics.json", &truth.diagnostics)?;
            out.manifest("generate", &cfg)
        }
        Command::Sample(c) => {
            let (cfg, mut out) = load(&c)?;
            let data = experiment::sample(&cfg, &experiment::generate(&cfg)?)?;
            out.text("observations.csv", &observations_text(&data.observations)?)?;
            out.text(
                "collocation.csv",
                &csv_text(&["x", "t"], data.collocation.points.iter().map(|p| vec![p.x, p.t])),
            )?;
            out.text("boundary.csv", &csv_text(&["t"], data.boundary.times.iter().map(|&t| vec![t])))?;
            out.manifest("sample", &cfg)
        }
        Command::Train { common, baseline } => {
            let (cfg, mut out) = load(&common)?;
            let truth = experiment::generate(&cfg)?;
            let data = experiment::sample(&cfg, &truth)?;
            let outcome =
                if baseline { experiment::train_baseline(&cfg, &data)? } else { experiment::train(&cfg, &data)? };
            out.text("report.json", &outcome.report.to_json()?)?;
            out.text("network.json", &outcome.net.to_json()?)?;
            if let Some(p) = &outcome.physics {
                out.json("physics.json", p)?;
            }
            let (rho, u) = experiment::predict(&cfg, &outcome.net)?;
            out.field("pred_rho.csv", &rho)?;
            if let Some(u) = &u {
                out.field("pred_u.csv", u)?;
            }
            out.text("metrics.json", &experiment::evaluate(&rho, u.as_ref(), &truth)?.to_json()?)?;
            out.manifest(if baseline { "train --baseline" } else { "train" }, &cfg)
        }
        Command::Ekf(c) => {
            let (cfg, mut out) = load(&c)?;
            let truth = experiment::generate(&cfg)?;
            let data = experiment::sample(&cfg, &truth)?;
            let r = experiment::run_ekf(&cfg, &data.observations)?;
            out.field("ekf_rho.csv", &r.rho)?;
            if let Some(u) = &r.u {
                out.field("ekf_u.csv", u)?;
            }
            out.json("covariance_traces.json", &r.covariance_traces)?;
            out.text("metrics.json", &experiment::evaluate(&r.rho, r.u.as_ref(), &truth)?.to_json()?)?;
            out.manifest("ekf", &cfg)
        }
        Command::GanTrain(c) => {
            let (cfg, mut out) = load(&c)?;
            let truth = experiment::generate(&cfg)?;
            let data = experiment::sample(&cfg, &truth)?;
            let (outcome, samples) = experiment::run_gan(&cfg, &data)?;
            out.json("gan_trace.json", &outcome.trace)?;
            out.text("generator.json", &outcome.generator.to_json()?)?;
            out.text("discriminator.json", &outcome.discriminator.to_json()?)?;
            let mut buf = Vec::new();
            samples.write_csv(&mut buf)?;
            out.text("uq_samples.csv", std::str::from_utf8(&buf).expect("csv is utf-8"))?;
            let report = uq_metrics(
                &samples,
                UqTruth::Fields { rho: &truth.rho, u: truth.u.as_ref() },
                DEFAULT_BINS,
                KlMode::Pooled,
            )?;
            out.text("metrics.json", &report.to_json()?)?;
            out.manifest("gan-train", &cfg)
        }
        Command::Evaluate(p) => {
            let (pred, truth, pu, tu) = load_pair(&p)?;
            let report = field_metrics(&pred, &truth, pu.as_ref(), tu.as_ref(), p.bins)?;
            let mut out = Output::new(p.out.clone())?;
            out.text("metrics.json", &report.to_json()?)?;
            Ok(())
        }
        Command::Export(p) => {
            let (pred, truth, pu, tu) = load_pair(&p)?;
            let report = field_metrics(&pred, &truth, pu.as_ref(), tu.as_ref(), p.bins)?;
            let mut out = Output::new(p.out.clone())?;
            out.text("pred_rho_matrix.csv", &matrix_text(&pred))?;
            out.text("truth_rho_matrix.csv", &matrix_text(&truth))?;
            if let Some(se) = &report.se_rho {
                out.field("se_rho.csv", se)?;
                out.text("se_rho_matrix.csv", &matrix_text(se))?;
            }
            if let (Some(pu), Some(se)) = (&pu, &report.se_u) {
                out.text("pred_u_matrix.csv", &matrix_text(pu))?;
                out.field("se_u.csv", se)?;
                out.text("se_u_matrix.csv", &matrix_text(se))?;
            }
            Ok(())
        }
    }
}

type Pair = (Field, Field, Option<Field>, Option<Field>);

fn load_pair(p: &FieldPair) -> Result<Pair> {
    let read = |path: &Path| Field::load_csv(path);
    let pu = p.pred_u.as_deref().map(read).transpose()?;
    let tu = p.truth_u.as_deref().map(read).transpose()?;
    Ok((read(&p.pred)?, read(&p.truth)?, pu, tu))
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 2 for usage or configuration errors, 1
/// otherwise.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => 2,
                _ => 1,
            }
        }
    }
}
