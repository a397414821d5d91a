//! `sgp`: fit sparse GP models, predict, compare collapsed bounds and run
//! repeated experiments from the command line.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure,
//! 3 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use sgp_core::data::{
    load_csv, make_poisson_toy, make_snelson_like, make_synthetic_regression, save_csv, Dataset,
    TargetColumn,
};
use sgp_core::error::{Error, Result};
use sgp_core::experiment::{compare_bounds, run_experiment, ExperimentConfig, SavedModel};
use sgp_core::kernels::KernelSpec;
use sgp_core::trainer::{fit, kmeans_init, Method, TrainConfig, DEFAULT_KMEANS_ITERS};

#[derive(Debug, Parser)]
#[command(name = "sgp", version, about = "Sparse variational GP regression")]
struct Cli {
    /// JSON config for the subcommand (training or experiment settings).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model on a CSV file; writes model.json and trace.csv.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// Overrides the method in the config.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
    },
    /// Predict at the inputs of a CSV file with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CSV of inputs (a target column, if named, is ignored).
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        drop_column: Option<String>,
        #[arg(long)]
        no_header: bool,
    },
    /// Evaluate exact, classic, spherical and new collapsed bounds at fixed
    /// hyperparameters.
    CompareBounds {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "sq-exp")]
        kernel: KernelArg,
        #[arg(long, default_value_t = 1.0)]
        amplitude_sq: f64,
        #[arg(long, default_value_t = 1.0)]
        lengthscale: f64,
        #[arg(long, default_value_t = 0.1)]
        noise_var: f64,
        #[arg(long, default_value_t = 20)]
        num_inducing: usize,
    },
    /// Run a repeated train/test experiment described by --config.
    Experiment,
    /// Write a generated dataset as CSV.
    GenData {
        #[arg(value_enum)]
        kind: GenKind,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 0.05)]
        noise_var: f64,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Training CSV.
    #[arg(long)]
    data: PathBuf,
    /// Target column, by header name or zero-based index.
    #[arg(long, default_value = "y")]
    target: String,
    #[arg(long)]
    no_header: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KernelArg {
    SqExp,
    SqExpArd,
    Matern32,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GenKind {
    SnelsonLike,
    PoissonToy,
    Synthetic,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl DataArgs {
    fn load(&self, center_y: bool) -> Result<Dataset> {
        let target = match self.target.parse::<usize>() {
            Ok(i) => TargetColumn::Index(i),
            Err(_) => TargetColumn::Name(self.target.clone()),
        };
        let loaded = load_csv(&self.data, &target, !self.no_header)?;
        if loaded.rejected_rows > 0 {
            eprintln!("warning: dropped {} non-finite row(s)", loaded.rejected_rows);
        }
        Ok(loaded.dataset.normalized(center_y))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn out_dir(cli_out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = cli_out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn read_inputs(path: &Path, drop: Option<&str>, has_header: bool) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let skip = match drop {
        Some(name) => match name.parse::<usize>() {
            Ok(i) => Some(i),
            Err(_) => Some(
                rdr.headers()?
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::Config(format!("no column named '{name}'")))?,
            ),
        },
        None => None,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .filter(|(k, _)| Some(*k) != skip)
            .map(|(_, f)| {
                f.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {}: '{f}' is not a number", line + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let d = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || d == 0 {
        return Err(Error::EmptyDataset);
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Parse("rows have differing numbers of fields".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, k| rows[i][k]))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Fit { data, method } => {
            let mut config: TrainConfig = match &cli.config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            if let Some(m) = method {
                config.method = *m;
            }
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            let train = data.load(!config.method.is_poisson())?;
            let result = fit(&config, &train).map_err(|e| {
                if let Error::NonFiniteObjective { step, last: Some(last) } = &e {
                    eprintln!(
                        "stopped at step {step}; last finite bound {}",
                        last.final_bound.bound
                    );
                }
                e
            })?;
            let dir = out_dir(&cli.out)?;
            let mut w = csv::Writer::from_path(dir.join("trace.csv"))?;
            w.write_record(["step", "bound", "noise_var"])?;
            for p in &result.trace {
                w.write_record([p.step.to_string(), p.bound.to_string(), p.noise_var.to_string()])?;
            }
            w.flush()?;
            println!("{}", serde_json::to_string_pretty(&result.final_bound)?);
            SavedModel::new(result, &train).save(&dir.join("model.json"))?;
        }
        Command::Predict {
            model,
            inputs,
            drop_column,
            no_header,
        } => {
            let saved = SavedModel::load(model)?;
            let x = read_inputs(inputs, drop_column.as_deref(), !no_header)?;
            let table = saved.predict(&x)?;
            let dir = out_dir(&cli.out)?;
            let mut w = csv::Writer::from_path(dir.join("predictions.csv"))?;
            let mut header: Vec<String> = (0..x.ncols()).map(|k| format!("x{k}")).collect();
            header.extend(["mean", "var", "latent_mean", "latent_var"].map(String::from));
            w.write_record(&header)?;
            for i in 0..x.nrows() {
                let mut rec: Vec<String> = x.row(i).iter().map(f64::to_string).collect();
                for v in [table.mean[i], table.var[i], table.latent_mean[i], table.latent_var[i]] {
                    rec.push(v.to_string());
                }
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        Command::CompareBounds {
            data,
            kernel,
            amplitude_sq,
            lengthscale,
            noise_var,
            num_inducing,
        } => {
            let train = data.load(true)?;
            let d = train.dim();
            let spec = match kernel {
                KernelArg::SqExp => KernelSpec::sq_exp(*amplitude_sq, *lengthscale),
                KernelArg::SqExpArd => KernelSpec::sq_exp_ard(*amplitude_sq, vec![*lengthscale; d]),
                KernelArg::Matern32 => KernelSpec::matern32(*amplitude_sq, *lengthscale),
            };
            let z = kmeans_init(&train.x, *num_inducing, DEFAULT_KMEANS_ITERS, cli.seed.unwrap_or(0))?;
            let report = compare_bounds(&train, spec, *noise_var, z)?;
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            if let Some(dir) = &cli.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("bounds.json"), text)?;
            }
        }
        Command::Experiment => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::Config("experiment needs --config <file>".into()))?;
            let mut config = ExperimentConfig::load(path)?;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            let dir = cli
                .out
                .clone()
                .or_else(|| config.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            let report = run_experiment(&config, &dir)?;
            for row in &report.summary {
                let cell = |s: Option<sgp_core::experiment::MeanSe>| match s {
                    Some(m) => match m.se {
                        Some(se) => format!("{:.4} ± {:.4}", m.mean, se),
                        None => format!("{:.4}", m.mean),
                    },
                    None => "-".into(),
                };
                println!(
                    "{:<18} bound {:<22} test loglik {:<22} rmse {:<22} failed {}",
                    row.method.to_string(),
                    cell(row.bound),
                    cell(row.test_loglik),
                    cell(row.test_rmse),
                    row.failed
                );
            }
        }
        Command::GenData { kind, n, dim, noise_var } => {
            let seed = cli.seed.unwrap_or(0);
            let (data, name) = match kind {
                GenKind::SnelsonLike => (make_snelson_like(*n, seed)?, "snelson_like"),
                GenKind::PoissonToy => (make_poisson_toy(seed)?, "poisson_toy"),
                GenKind::Synthetic => (make_synthetic_regression(*n, *dim, *noise_var, seed)?, "synthetic"),
            };
            let dir = out_dir(&cli.out)?;
            let path = dir.join(format!("{name}.csv"));
            save_csv(&data, &path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
