//! `tailfree` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure, 5 fit finished without converging (outputs are still written).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tailfree::benchmark::{nominal_grid, run_benchmark, Method};
use tailfree::evaluate::{leave_one_out, metrics};
use tailfree::io::{load_dataset, write_atomic, write_csv, ModelFile, RunConfig, Table};
use tailfree::model::{predict, PredictOptions};
use tailfree::vi::{fit, write_trace_file};
use tailfree::{Error, ModelTree};

const EXIT_NOT_CONVERGED: u8 = 5;

#[derive(Parser)]
#[command(name = "tailfree", version, about = "Adaptive Bayesian ensembles with calibrated variational inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's output_dir, else `.`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the ensemble on the configured dataset; writes model.json and trace.csv.
    Fit {
        #[command(flatten)]
        common: Common,
    },
    /// Predict at the rows of a data file; writes predictions.csv.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a fitted model on labeled data; writes metrics.json.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Leave-one-out: refit once per row of `data` (expensive).
        #[arg(long)]
        loo: bool,
    },
    /// Run the 1-D benchmark; writes rmse_table.csv, coverage.csv,
    /// predictions.csv and summary.json.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Overrides the number of repetitions.
        #[arg(long)]
        repetitions: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn predict_options(cfg: &RunConfig) -> PredictOptions {
    PredictOptions {
        n_samples: cfg.predict.n_samples,
        seed: cfg.seed,
        include_noise: cfg.predict.include_noise,
        quantiles: cfg.predict.quantiles.clone(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn cmd_fit(common: &Common) -> Result<u8, Error> {
    let cfg = load_config(common)?;
    let cols = cfg.data()?.clone();
    let data = load_dataset(&cols)?;
    let tree = cfg.build_tree()?;
    let opt = tailfree::vi::OptimizerConfig {
        seed: cfg.seed,
        ..cfg.optimizer.clone()
    };
    let result = fit(&data, &cfg.priors, &tree, &opt, cfg.calibrate)?;
    let dir = out_dir(common, &cfg);
    let mut model = ModelFile::new(&cols, opt, cfg.calibrate, result.converged, result.state);
    model.meta.insert(
        "training_data".into(),
        cols.path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
    );
    model.save(&dir.join("model.json"))?;
    write_trace_file(&result.trace, &dir.join("trace.csv"))?;
    if result.converged {
        Ok(0)
    } else {
        log::warn!("fit did not converge; model written anyway");
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn cmd_predict(common: &Common, model_path: &Path, data_path: &Path) -> Result<u8, Error> {
    let cfg = load_config(common)?;
    let model = ModelFile::load(model_path)?;
    let table = Table::read(data_path)?;
    let inputs = table.inputs(&model.features, &model.base_predictions)?;
    let p = predict(&model.state, &inputs, &predict_options(&cfg))?;
    let mut headers: Vec<String> = ["mean", "total_sd", "selection_sd", "prediction_sd"]
        .map(String::from)
        .to_vec();
    headers.extend(p.quantiles.iter().map(|(q, _)| format!("q{q}")));
    headers.extend(model.base_predictions.iter().map(|n| format!("weight_{n}")));
    let rows = (0..p.len()).map(|i| {
        let mut r = vec![p.mean[i], p.total_sd[i], p.selection_sd[i], p.prediction_sd[i]];
        r.extend(p.quantiles.iter().map(|(_, v)| v[i]));
        r.extend_from_slice(p.mean_weights.row(i));
        r
    });
    write_csv(&out_dir(common, &cfg).join("predictions.csv"), &headers, rows)?;
    Ok(0)
}

fn cmd_evaluate(common: &Common, model_path: &Path, data_path: &Path, loo: bool) -> Result<u8, Error> {
    let cfg = load_config(common)?;
    let model = ModelFile::load(model_path)?;
    let table = Table::read(data_path)?;
    let cols = model.data_config(data_path.to_path_buf());
    let data = table.dataset(&cols)?;
    let popts = predict_options(&cfg);
    let dir = out_dir(common, &cfg);
    #[derive(Serialize)]
    struct Report<T: Serialize> {
        schema_version: u32,
        mode: &'static str,
        nominal: Vec<f64>,
        #[serde(flatten)]
        body: T,
    }
    if loo {
        let tree: ModelTree = model.state.tree.clone();
        let r = leave_one_out(&data, &tree, &model.state.priors, &model.optimizer, model.calibrate, &popts)?;
        write_json(
            &dir.join("metrics.json"),
            &Report {
                schema_version: 1,
                mode: "leave_one_out",
                nominal: nominal_grid(),
                body: r,
            },
        )?;
    } else {
        let p = predict(&model.state, &data.inputs, &popts)?;
        let m = metrics(&p, &data.targets)?;
        write_json(
            &dir.join("metrics.json"),
            &Report {
                schema_version: 1,
                mode: "holdout",
                nominal: nominal_grid(),
                body: m,
            },
        )?;
    }
    Ok(0)
}

fn cmd_benchmark(common: &Common, repetitions: Option<usize>) -> Result<u8, Error> {
    let cfg = load_config(common)?;
    let mut bench = cfg.benchmark.clone();
    if common.seed.is_some() {
        bench.seed = cfg.seed;
    }
    if let Some(n) = repetitions {
        bench.n_repetitions = n;
    }
    let report = run_benchmark(&bench)?;
    report.write(&out_dir(common, &cfg))?;
    for s in report.summaries() {
        println!(
            "{:<14} rmse {:.4} +/- {:.4} ({} ok){}",
            s.method.name(),
            s.mean_rmse,
            s.sd_rmse,
            s.n_success,
            s.mean_abs_gap.map(|g| format!(", coverage gap {g:.4}")).unwrap_or_default()
        );
    }
    for m in Method::ALL {
        let rate = report.failure_rate(m);
        if rate >= 0.05 {
            log::warn!("{} failed in {:.0}% of repetitions", m.name(), 100.0 * rate);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit { common } => cmd_fit(common),
        Command::Predict { common, model, data } => cmd_predict(common, model, data),
        Command::Evaluate {
            common,
            model,
            data,
            loo,
        } => cmd_evaluate(common, model, data, *loo),
        Command::Benchmark { common, repetitions } => cmd_benchmark(common, *repetitions),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
