//! `swarmflow`: train an interval-coefficient steering field, propagate
//! ensembles under it, and run the identity-check suite.

mod config;
mod svg;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;

use swarmflow_core::lti::TimeWindow;
use swarmflow_core::model::{CoefficientField, CoefficientMap, ZeroCoefficient};
use swarmflow_core::propagate::{
    ensemble_distance, propagate, propagate_with_targets, PropagationTrace,
};
use swarmflow_core::train::train;
use swarmflow_core::verify;
use swarmflow_core::Error as CoreError;

use config::ExperimentConfig;

/// Exit classes: 2 configuration/input, 3 numeric failure, 4 failed checks.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Check(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Check(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Check(m) => write!(f, "{m}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(_)
            | CoreError::GramianSingular { .. }
            | CoreError::Diverged { .. }
            | CoreError::OutsideWindow { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("i/o: {e}"))
    }
}

#[derive(Parser)]
#[command(name = "swarmflow", version, about = "few-step swarm steering under linear dynamics")]
struct Cli {
    /// Bound worker threads for batch and ensemble parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a coefficient field from a config; writes checkpoint + log.
    Train { config: PathBuf },
    /// Propagate the source ensemble; writes trace JSON + snapshot CSVs.
    Propagate {
        config: PathBuf,
        /// Trained checkpoint (omit only with --stub).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the config's interval count with a uniform K-step grid.
        #[arg(long)]
        steps: Option<usize>,
        /// Use the all-zeros stub field (pure drift) instead of a checkpoint.
        #[arg(long)]
        stub: bool,
    },
    /// Run the identity-check suite; exit 0 iff every check passes.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the reports as JSON to this path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print the state-transition matrix and Gramian for one window.
    Gramian {
        config: PathBuf,
        /// Window endpoints, e.g. --window 0.0 1.0
        #[arg(long, num_args = 2, value_names = ["T", "R"], required = true)]
        window: Vec<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Propagate {
            config,
            checkpoint,
            steps,
            stub,
        } => cmd_propagate(&config, checkpoint.as_deref(), steps, stub),
        Cmd::Verify { seed, json } => cmd_verify(seed, json.as_deref()),
        Cmd::Gramian { config, window } => cmd_gramian(&config, window[0], window[1]),
    }
}

fn cmd_train(config_path: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let sys = cfg.system()?;
    let (source, target) = cfg.ensembles(&sys)?;
    let tc = cfg.train_config()?;
    let out = cfg.output_dir();
    fs::create_dir_all(&out)?;

    let (model, records) = train(&sys, &source, &target, &tc)?;

    let ckpt = out.join("checkpoint.swf");
    model.save(&ckpt)?;

    let log_path = out.join("train_log.csv");
    let mut log = fs::File::create(&log_path).map(std::io::BufWriter::new)?;
    writeln!(log, "step,loss,residual_norm_mean,grad_norm,wall_time_s")?;
    for r in &records {
        writeln!(
            log,
            "{},{:.16e},{:.16e},{:.16e},{:.3}",
            r.step, r.loss, r.residual_norm_mean, r.grad_norm, r.wall_time
        )?;
    }
    log.flush()?;

    match (records.first(), records.last()) {
        (Some(first), Some(last)) => println!(
            "trained {} steps: loss {:.3e} -> {:.3e}",
            tc.steps, first.loss, last.loss
        ),
        _ => println!("trained 0 steps (initialization only)"),
    }
    println!("checkpoint: {}", ckpt.display());
    println!("training log: {}", log_path.display());
    Ok(())
}

fn write_snapshot_csv(path: &Path, points: &DMatrix<f64>) -> Result<(), CliError> {
    let mut f = fs::File::create(path).map(std::io::BufWriter::new)?;
    let d = points.ncols();
    let header: Vec<String> = std::iter::once("member_id".to_string())
        .chain((1..=d).map(|j| format!("x{j}")))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for i in 0..points.nrows() {
        let row: Vec<String> = std::iter::once(i.to_string())
            .chain((0..d).map(|j| format!("{:.16e}", points[(i, j)])))
            .collect();
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}

fn trace_json(trace: &PropagationTrace, terminal_distance: f64) -> serde_json::Value {
    let k = trace.coefficients.len();
    let steps: Vec<serde_json::Value> = (0..k)
        .map(|i| {
            let coeff = &trace.coefficients[i];
            let mean_coeff_norm = (0..coeff.nrows())
                .map(|m| coeff.row(m).norm())
                .sum::<f64>()
                / coeff.nrows() as f64;
            let mut step = serde_json::json!({
                "t": trace.grid[i],
                "r": trace.grid[i + 1],
                "mean_coefficient_norm": mean_coeff_norm,
            });
            if let Some(eta) = &trace.eta {
                let max_eta = (0..eta[i].nrows())
                    .map(|m| eta[i].row(m).norm())
                    .fold(0.0_f64, f64::max);
                step["max_eta_norm"] = serde_json::json!(max_eta);
            }
            step
        })
        .collect();
    let energies: Vec<f64> = trace.energy.iter().copied().collect();
    let mean_energy = energies.iter().sum::<f64>() / energies.len() as f64;
    let max_energy = energies.iter().fold(0.0_f64, |a, &b| a.max(b));
    serde_json::json!({
        "grid": trace.grid,
        "members": trace.members(),
        "dim": trace.dim(),
        "terminal_distance_to_target": terminal_distance,
        "energy": { "per_member": energies, "mean": mean_energy, "max": max_energy },
        "steps": steps,
    })
}

fn cmd_propagate(
    config_path: &Path,
    checkpoint: Option<&Path>,
    steps: Option<usize>,
    stub: bool,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let sys = cfg.system()?;
    let (source, target) = cfg.ensembles(&sys)?;
    let plan = cfg.plan(steps)?;
    let out = cfg.output_dir();
    fs::create_dir_all(&out)?;

    let stub_model;
    let file_model;
    let model: &dyn CoefficientMap = if stub {
        stub_model = ZeroCoefficient::new(sys.dim());
        &stub_model
    } else {
        let path = checkpoint.ok_or_else(|| {
            CliError::Config("propagate needs --checkpoint <path> (or --stub)".into())
        })?;
        file_model = CoefficientField::load(path)?;
        if file_model.state_dim() != sys.dim() {
            return Err(CliError::Config(format!(
                "checkpoint dimension {} does not match system dimension {}",
                file_model.state_dim(),
                sys.dim()
            )));
        }
        &file_model
    };

    let trace = if cfg.propagate.eta {
        if source.len() != target.len() {
            return Err(CliError::Config(format!(
                "eta diagnostics need member-for-member pairing, but source has {} members and target has {}",
                source.len(),
                target.len()
            )));
        }
        propagate_with_targets(&sys, model, &source, &target, &plan)?
    } else {
        propagate(&sys, model, &source, &plan)?
    };

    let terminal = trace.final_ensemble("terminal")?;
    let distance = ensemble_distance(&terminal, &target)?;

    let hues = svg::initial_hues(&trace.states[0]);
    let window = svg::bounds(&trace.states);
    for (k, snap) in trace.states.iter().enumerate() {
        write_snapshot_csv(&out.join(format!("snapshot_{k:03}.csv")), snap)?;
        if cfg.propagate.svg {
            svg::write_scatter(
                &out.join(format!("snapshot_{k:03}.svg")),
                snap,
                &hues,
                window,
                &format!("t = {:.4}", trace.grid[k]),
            )?;
        }
    }
    let json = trace_json(&trace, distance);
    fs::write(out.join("trace.json"), serde_json::to_string_pretty(&json).unwrap())?;

    println!("propagated {} members over {} intervals", trace.members(), plan.k());
    println!("terminal energy distance to target: {distance:.6}");
    println!("outputs: {}", out.display());
    Ok(())
}

fn cmd_verify(seed: u64, json: Option<&Path>) -> Result<(), CliError> {
    let mut reports = verify::run_all(seed).map_err(|e| CliError::Numeric(e.to_string()))?;

    // Test hook: scale every tolerance (e.g. to force failures in tests of
    // the failure path).
    if let Ok(text) = std::env::var("SWARMFLOW_TOLERANCE_SCALE") {
        let scale: f64 = text
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("SWARMFLOW_TOLERANCE_SCALE is not a number: {text:?}")))?;
        for r in &mut reports {
            r.tolerance *= scale;
            r.passed = r.max_residual <= r.tolerance;
        }
    }

    println!("{:<42} {:>13} {:>10} {:>7}", "check", "max residual", "tolerance", "status");
    for r in &reports {
        println!(
            "{:<42} {:>13.3e} {:>10.1e} {:>7}",
            r.name,
            r.max_residual,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(path) = json {
        fs::write(path, serde_json::to_string_pretty(&reports).unwrap())?;
        println!("report json: {}", path.display());
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("failed checks: {}", failed.join(", "))))
    }
}

fn print_matrix(name: &str, m: &DMatrix<f64>) {
    println!("{name} =");
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:>20.12e}", m[(i, j)])).collect();
        println!("  {}", row.join(" "));
    }
}

fn cmd_gramian(config_path: &Path, t: f64, r: f64) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let sys = cfg.system()?;
    let window = TimeWindow::new(t, r)?;
    let ops = sys.window_operators(window)?;
    println!("system dimension {}, window [{t}, {r}]", sys.dim());
    print_matrix("phi", ops.phi());
    print_matrix("gramian", ops.gramian());
    Ok(())
}
