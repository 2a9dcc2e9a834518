use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::run_search;
use crate::space::{build_stacked_bcnn, channel_plan_for, count_params_flops, Genotype, OpKind};

use super::config::RunConfig;
use super::eval::evaluate;
use super::fs::write_atomic;
use super::genotype_io::{load_genotype, save_genotype};
use super::records::{metrics_csv, parse_trajectory_csv, plot_csv, trajectory_csv, MetricRecord, Phase};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "stacked-bnas", version, about = "Differentiable search over stacked broad convolutional networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file, or a manifest written by an earlier run.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Search knowledge-embedding widths as well.
    #[arg(long, global = true)]
    pub kes: bool,
    /// Drop the virtual step (ξ = 0).
    #[arg(long = "first-order", global = true)]
    pub first_order: bool,
    /// Output directory (default: runs/<command>).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the architecture search and write genotype, trajectory and manifest.
    Search,
    /// Retrain a genotype from scratch and report test accuracy.
    Eval {
        #[arg(long, value_name = "PATH")]
        genotype: PathBuf,
    },
    /// Print the channel plan, parameter count and MACs.
    Inspect {
        #[arg(long, value_name = "PATH")]
        genotype: Option<PathBuf>,
    },
    /// Expand a trajectory CSV into plot-ready columns.
    ExportPlot {
        #[arg(long, value_name = "PATH")]
        trajectory: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Search => "search",
            Command::Eval { .. } => "eval",
            Command::Inspect { .. } => "inspect",
            Command::ExportPlot { .. } => "export-plot",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub config: RunConfig,
    pub outputs: BTreeMap<String, PathBuf>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Cli {
    /// Config file (or defaults) with command-line overrides applied.
    pub fn effective_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.kes |= self.kes;
        cfg.first_order |= self.first_order;
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| Path::new("runs").join(self.command.name()))
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to `err`.
pub fn cli_dispatch<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Search => search(cli, out),
        Command::Eval { genotype } => eval(cli, genotype, out),
        Command::Inspect { genotype } => inspect(cli, genotype.as_deref(), out),
        Command::ExportPlot { trajectory } => export_plot(cli, trajectory, out),
    }
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, started: u64, outputs: BTreeMap<String, PathBuf>) -> Result<()> {
    let m = Manifest {
        manifest_version: MANIFEST_VERSION,
        command: command.into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        started_unix: started,
        finished_unix: unix_now(),
        config: cfg.clone(),
        outputs,
    };
    let text = serde_json::to_string_pretty(&m).expect("plain data serializes") + "\n";
    write_atomic(dir.join("manifest.json"), text.as_bytes())
}

fn search(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.effective_config()?;
    let started = unix_now();
    let dir = cli.out_dir();
    let (train, _) = cfg.datasets()?;
    let clock = Instant::now();
    let mut metrics = Vec::new();
    let mut log = Vec::new();
    let outcome = run_search(&cfg.space(), &cfg.search(), &train, |row| {
        metrics.push(MetricRecord {
            phase: Phase::Search,
            epoch: row.epoch,
            loss: row.val_loss,
            accuracy: row.val_accuracy.unwrap_or(0.0),
            lr: row.lr,
            params: 0,
            macs: 0,
            wall_time_s: clock.elapsed().as_secs_f64(),
        });
        log.push(format!(
            "epoch {:>3}  train {:.4}  val {:.4}  rank {:016x}  q {}",
            row.epoch, row.train_loss, row.val_loss, row.fingerprint, row.q
        ));
    })?;
    for l in &log {
        writeln!(out, "{l}").map_err(io_err)?;
    }
    // size of the discretized network, filled into every search row
    let mut net = build_stacked_bcnn(&cfg.space(), &outcome.genotype, cfg.seed)?;
    let (params, macs) = count_params_flops(&mut net)?;
    for m in &mut metrics {
        m.params = params;
        m.macs = macs;
    }

    let mut outputs = BTreeMap::new();
    for (name, file) in [("genotype", "genotype.json"), ("trajectory", "trajectory.csv"), ("metrics", "metrics.csv")] {
        outputs.insert(name.to_string(), dir.join(file));
    }
    save_genotype(&outputs["genotype"], &outcome.genotype)?;
    write_atomic(&outputs["trajectory"], trajectory_csv(&outcome.trajectory).as_bytes())?;
    write_atomic(&outputs["metrics"], metrics_csv(&metrics).as_bytes())?;
    write_manifest(&dir, "search", &cfg, started, outputs)?;
    writeln!(
        out,
        "{} after {} epochs; params {params}, MACs {macs}; wrote {}",
        if outcome.early_stopped { "rank stable" } else { "no early stop" },
        outcome.trajectory.len(),
        dir.display()
    )
    .map_err(io_err)?;
    Ok(())
}

fn eval(cli: &Cli, genotype: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.effective_config()?;
    let g = load_genotype(genotype)?;
    let started = unix_now();
    let dir = cli.out_dir();
    let (train, test) = cfg.datasets()?;
    let mut lines = Vec::new();
    let report = evaluate(&g, &cfg.space(), &cfg.eval(), &train, &test, |r| {
        lines.push(format!("epoch {:>3}  loss {:.4}  test acc {:.4}  lr {:.5}", r.epoch, r.loss, r.accuracy, r.lr));
    })?;
    for l in &lines {
        writeln!(out, "{l}").map_err(io_err)?;
    }
    let metrics = dir.join("metrics.csv");
    write_atomic(&metrics, metrics_csv(&report.records).as_bytes())?;
    let outputs = BTreeMap::from([("metrics".to_string(), metrics)]);
    write_manifest(&dir, "eval", &cfg, started, outputs)?;
    writeln!(
        out,
        "test accuracy {:.4}; params {}; MACs {}",
        report.test_accuracy, report.params, report.macs
    )
    .map_err(io_err)?;
    Ok(())
}

fn inspect(cli: &Cli, genotype: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.effective_config()?;
    let space = cfg.space();
    let (g, label) = match genotype {
        Some(p) => (load_genotype(p)?, p.display().to_string()),
        None => (Genotype::uniform(space.n_in, OpKind::Conv3x3), "reference (all conv_3x3)".to_string()),
    };
    let plan = channel_plan_for(&space, g.embedding_channels.as_deref())?;
    let mut s = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(
        s,
        "u={} k={} c={} N_in={} b2o={} d2e={} input {}x{}x{} -> stem {}x{}",
        space.u,
        space.k,
        space.c,
        space.n_in,
        space.b2o,
        space.d2e,
        space.input_channels,
        space.input_size,
        space.input_size,
        plan.stem_out,
        plan.stem_spatial
    );
    for st in &plan.stages {
        let _ = writeln!(
            s,
            "stage {}: c_in={} c_deep={} c_broad={} c_enh={} spatial {}->{}",
            st.index, st.c_in, st.c_deep, st.c_broad, st.c_enh, st.spatial_in, st.spatial_out
        );
        for site in st.sites() {
            let p = st.site(site);
            let _ = writeln!(s, "  {:<10} {:>5} -> {:<5} stride {}", site.name(), p.in_ch, p.out_ch, p.stride);
        }
        let _ = writeln!(s, "  concat={} out={}", st.concat, st.out);
    }
    let _ = writeln!(s, "gap width={}", plan.gap_width);
    let mut net = build_stacked_bcnn(&space, &g, cfg.seed)?;
    let (params, macs) = count_params_flops(&mut net)?;
    let _ = writeln!(s, "genotype: {label}");
    let _ = writeln!(s, "params={params} macs={macs}");
    out.write_all(s.as_bytes()).map_err(io_err)
}

fn export_plot(cli: &Cli, trajectory: &Path, out: &mut dyn Write) -> Result<()> {
    let text = std::fs::read_to_string(trajectory).map_err(|e| Error::io(trajectory, e))?;
    let rows = parse_trajectory_csv(&text)?;
    let csv = plot_csv(&rows);
    match &cli.out {
        Some(dir) => {
            let path = dir.join("plot.csv");
            write_atomic(&path, csv.as_bytes())?;
            writeln!(out, "wrote {}", path.display()).map_err(io_err)
        }
        None => out.write_all(csv.as_bytes()).map_err(io_err),
    }
}
