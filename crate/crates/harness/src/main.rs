use clap::{Parser, Subcommand};
use physrec::data::{self, ChannelSchema, GenOptions};
use physrec::experiment::{self, Experiment, ExperimentConfig, Method};
use physrec::report::{self, Format};
use physrec::HarnessError;
use physrec_core::dynamics::{self, ThetaVec};
use physrec_core::signal;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "physrec", version, about = "Physical model recovery from sparse time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a benchmark dataset into a directory of CSV files.
    Generate {
        /// Built-in system name or system file.
        #[arg(long)]
        system: String,
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover coefficients from a dataset directory.
    Recover {
        #[arg(long)]
        arch: Method,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment sweep and write a CSV or JSON report.
    Sweep {
        #[arg(long)]
        experiment: Experiment,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the Nyquist rate of every channel in a trace CSV.
    Nyquist {
        #[arg(long)]
        data: PathBuf,
    },
}

fn read_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    ExperimentConfig::from_json(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

fn generate(system: &str, preset: &str, seed: u64, out: &Path) -> Result<(), HarnessError> {
    let (spec, theta) = dynamics::resolve_system(system)?;
    let ds = data::generate_benchmark_data(&spec, &theta, preset, seed, &GenOptions::default())?;
    data::write_dataset(&ds, out)?;
    println!("wrote {} traces to {}", ds.traces.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct Coefficient {
    name: String,
    value: f64,
}

#[derive(Serialize)]
struct RecoverOutput {
    system: String,
    arch: String,
    sampling_factor: usize,
    theta: Vec<Coefficient>,
    shifts: Vec<f64>,
    rmse_theta: Option<f64>,
    rmse_y: f64,
    rmse_y_raw: f64,
    spurious: usize,
    loss_history: Vec<f64>,
}

fn recover(method: Method, data_dir: &Path, config: &Path, out: &Path) -> Result<(), HarnessError> {
    let cfg = read_config(config)?;
    let (spec, theta) = cfg.resolve()?;
    let mask = cfg.sensing_mask(&spec)?;
    let schema = ChannelSchema {
        states: spec.state_labels(),
        inputs: spec.input_labels(),
    };
    let (traces, meta) = data::read_dataset(data_dir, &schema)?;
    let truth = match meta {
        Some(m) if m.system == spec.name() => ThetaVec::new(&spec, m.theta)?,
        _ => theta,
    };
    let factor = cfg.sampling_factors.as_ref().and_then(|f| f.first().copied()).unwrap_or(1);
    let prepared = experiment::prepare_traces(&traces, factor, &mask, cfg.train.explicit_loss)?;
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let o = experiment::run_point(method, &spec, &truth, &mask, &prepared, &cfg, seed, cfg.shift_search)?;
    let result = RecoverOutput {
        system: spec.name().to_string(),
        arch: method.to_string(),
        sampling_factor: factor,
        theta: spec.coefficients().iter().zip(o.theta_est).map(|(c, value)| Coefficient { name: c.name.clone(), value }).collect(),
        shifts: o.shifts,
        rmse_theta: o.rmse_theta.is_finite().then_some(o.rmse_theta),
        rmse_y: o.rmse_y,
        rmse_y_raw: o.rmse_y_raw,
        spurious: o.spurious,
        loss_history: o.loss_history,
    };
    let text = serde_json::to_string_pretty(&result).expect("result serializes") + "\n";
    fs::write(out, text).map_err(|e| HarnessError::io(out, e))?;
    println!("rmse_y {:.6} written to {}", result.rmse_y, out.display());
    Ok(())
}

fn sweep(exp: Experiment, config: &Path, out: &Path) -> Result<(), HarnessError> {
    let cfg = read_config(config)?;
    let rows = experiment::run_experiment(exp, &cfg)?;
    report::emit_report(&rows, Format::from_path(out), out)?;
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    println!("{} rows ({failed} failed) written to {}", rows.len(), out.display());
    Ok(())
}

fn nyquist(path: &Path) -> Result<(), HarnessError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| HarnessError::io(path, e))?;
    let header: Vec<String> = rdr.headers().map_err(|e| HarnessError::io(path, e))?.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let schema = ChannelSchema {
        states: header,
        inputs: Vec::new(),
    };
    let (segments, _) = data::load_real_csv(path, None, &schema)?;
    let longest = segments.iter().max_by_key(|t| t.k()).ok_or_else(|| HarnessError::Data(format!("{}: no samples", path.display())))?;
    let mut top: f64 = 0.0;
    for (label, row) in schema.states.iter().zip(&longest.y) {
        let rate = signal::nyquist_rate(row, longest.fs())?;
        top = top.max(rate);
        println!("{label}\t{rate:.6}");
    }
    println!("nyquist_rate\t{top:.6}");
    println!("sampling_rate\t{:.6}", longest.fs());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Generate { system, preset, seed, out } => generate(system, preset, *seed, out),
        Command::Recover { arch, data, config, out } => recover(*arch, data, config, out),
        Command::Sweep { experiment, config, out } => sweep(*experiment, config, out),
        Command::Nyquist { data } => nyquist(data),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("physrec: {e}");
            ExitCode::FAILURE
        }
    }
}
