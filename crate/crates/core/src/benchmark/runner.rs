use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::coverage::{coverage_curve, nominal_grid, CoverageCurve, IntervalForecast};
use super::data::{
    base_prediction_matrix, dataset_1d, generate_sample, inputs_1d, validation_grid, BaseModel, BaseModelKind,
    NoiseModel,
};
use crate::baselines::{avg_predict, cv_stack_fit, gam_fit, lnr_stack_fit_folds, nlr_stack_fit, GaussianPredictive, SearchConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{PredictOptions, PriorConfig};
use crate::rng::{derive_seed, substream};
use crate::tailfree::{ModelTree, TreeSpec};
use crate::vi::{fit, OptimizerConfig};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Tail-free ensemble fit with the KL + CRPS objective.
    Ours,
    /// The same model fit with the KL objective alone.
    OursKlOnly,
    Avg,
    CvStack,
    LnrStack,
    NlrStack,
    Gam,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ours,
        Method::OursKlOnly,
        Method::Avg,
        Method::CvStack,
        Method::LnrStack,
        Method::NlrStack,
        Method::Gam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::OursKlOnly => "ours_kl_only",
            Method::Avg => "avg",
            Method::CvStack => "cv_stack",
            Method::LnrStack => "lnr_stack",
            Method::NlrStack => "nlr_stack",
            Method::Gam => "gam",
        }
    }

    pub fn is_probabilistic(self) -> bool {
        !matches!(self, Method::Avg | Method::CvStack)
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// How the base models are arranged under the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeChoice {
    Flat,
    /// Two groups, `smooth` and `complex`, split at a lengthscale threshold.
    /// Falls back to a flat tree when one group would be empty.
    BySmoothness { threshold: f64 },
    /// Explicit tree over the names `base_0`, `base_1`, ...
    Custom(TreeSpec),
}

impl Default for TreeChoice {
    fn default() -> Self {
        TreeChoice::BySmoothness { threshold: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub n_holdout: usize,
    pub n_validation: usize,
    pub n_repetitions: usize,
    pub noise_sd: f64,
    pub noise: NoiseModel,
    pub base_lengthscales: Vec<f64>,
    /// Training points per base model.
    pub n_base_train: usize,
    pub base_model: BaseModelKind,
    pub seed: u64,
    pub tree: TreeChoice,
    pub priors: PriorConfig,
    pub optimizer: OptimizerConfig,
    pub search: SearchConfig,
    pub predict_samples: usize,
    /// Methods to run, in this order. Each method draws from its own seeded
    /// stream, so the order does not affect results.
    pub methods: Vec<Method>,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_holdout: 20,
            n_validation: 500,
            n_repetitions: 100,
            noise_sd: 0.1,
            noise: NoiseModel::Additive,
            base_lengthscales: vec![0.2, 0.1, 0.02, 0.01],
            n_base_train: 20,
            base_model: BaseModelKind::NadarayaWatson,
            seed: 0,
            tree: TreeChoice::default(),
            priors: PriorConfig::default(),
            optimizer: OptimizerConfig::default(),
            search: SearchConfig::default(),
            predict_samples: 1000,
            methods: Method::ALL.to_vec(),
            threads: 0,
        }
    }
}

impl BenchmarkConfig {
    /// Ten repetitions, otherwise the defaults.
    pub fn smoke() -> Self {
        Self {
            n_repetitions: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_holdout", self.n_holdout),
            ("n_validation", self.n_validation),
            ("n_repetitions", self.n_repetitions),
            ("n_base_train", self.n_base_train),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::invalid("noise_sd must be positive"));
        }
        if self.base_lengthscales.is_empty() || self.base_lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::invalid("base_lengthscales must be non-empty and positive"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("methods must not be empty"));
        }
        if self.predict_samples < 2 {
            return Err(Error::invalid("predict_samples must be >= 2"));
        }
        self.priors.validate()?;
        self.optimizer.validate()?;
        self.search.validate()?;
        self.build_tree().map(|_| ())
    }

    pub fn base_names(&self) -> Vec<String> {
        (0..self.base_lengthscales.len()).map(|k| format!("base_{k}")).collect()
    }

    pub fn build_tree(&self) -> Result<ModelTree> {
        let names = self.base_names();
        match &self.tree {
            TreeChoice::Flat => ModelTree::flat(&names),
            TreeChoice::BySmoothness { threshold } => {
                let (smooth, complex): (Vec<_>, Vec<_>) = names
                    .iter()
                    .cloned()
                    .zip(&self.base_lengthscales)
                    .partition(|(_, &l)| l >= *threshold);
                if smooth.is_empty() || complex.is_empty() {
                    return ModelTree::flat(&names);
                }
                let group = |v: Vec<(String, &f64)>| TreeSpec::Leaves(v.into_iter().map(|(n, _)| n).collect());
                let spec = TreeSpec::Groups(
                    [("complex".to_string(), group(complex)), ("smooth".to_string(), group(smooth))]
                        .into_iter()
                        .collect(),
                );
                ModelTree::from_spec(&spec, &names)
            }
            TreeChoice::Custom(spec) => ModelTree::from_spec(spec, &names),
        }
    }
}

/// One repetition's result for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub rmse: f64,
    pub coverage: Option<CoverageCurve>,
    /// Predictive mean on the validation grid.
    pub mean: Vec<f64>,
    /// Central 95% interval on the validation grid, if probabilistic.
    pub interval_95: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repetition {
    pub index: usize,
    /// Validation RMSE of each base model on its own.
    pub base_rmse: Vec<f64>,
    pub holdout_x: Vec<f64>,
    pub holdout_y: Vec<f64>,
    pub outcomes: Vec<(Method, std::result::Result<MethodOutcome, String>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_rmse: f64,
    pub sd_rmse: f64,
    pub n_success: usize,
    pub mean_abs_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub validation_x: Vec<f64>,
    pub validation_truth: Vec<f64>,
    pub repetitions: Vec<Repetition>,
}

fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    (pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64).sqrt()
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn probabilistic_outcome<F: IntervalForecast>(mean: Vec<f64>, pred: &F, truth: &[f64]) -> Result<MethodOutcome> {
    Ok(MethodOutcome {
        rmse: rmse(&mean, truth),
        coverage: Some(coverage_curve(pred, truth, &nominal_grid())?),
        mean,
        interval_95: Some(pred.central_interval(0.95)),
    })
}

fn point_outcome(mean: Vec<f64>, truth: &[f64]) -> MethodOutcome {
    MethodOutcome {
        rmse: rmse(&mean, truth),
        coverage: None,
        mean,
        interval_95: None,
    }
}

/// Runs a single repetition: fresh base models, a fresh holdout set, every method.
pub fn run_repetition(cfg: &BenchmarkConfig, tree: &ModelTree, rep: usize) -> Result<Repetition> {
    let mut rng = substream(cfg.seed, rep as u64);
    let models = cfg
        .base_lengthscales
        .iter()
        .map(|&l| {
            let train = generate_sample(cfg.n_base_train, cfg.noise_sd, cfg.noise, &mut rng);
            BaseModel::fit(train, l, cfg.base_model, cfg.noise_sd * cfg.noise_sd)
        })
        .collect::<Result<Vec<_>>>()?;
    let hold = generate_sample(cfg.n_holdout, cfg.noise_sd, cfg.noise, &mut rng);
    let data = dataset_1d(&models, &hold)?;
    let val = validation_grid(cfg.n_validation);
    let query = inputs_1d(&models, &val.x)?;
    let base = base_prediction_matrix(&models, &val.x);
    let base_rmse = (0..models.len()).map(|k| rmse(&base.col(k), &val.y)).collect();

    let rep_seed = derive_seed(cfg.seed, rep as u64);
    let outcomes = cfg
        .methods
        .iter()
        .copied()
        .map(|m| {
            let seed = derive_seed(rep_seed, m.tag());
            let r: Result<MethodOutcome> = match m {
                Method::Ours | Method::OursKlOnly => {
                    // both variants share optimizer and prediction streams
                    let opt = OptimizerConfig {
                        seed: rep_seed,
                        ..cfg.optimizer.clone()
                    };
                    fit(&data, &cfg.priors, tree, &opt, m == Method::Ours).and_then(|f| {
                        let p = crate::model::predict(
                            &f.state,
                            &query,
                            &PredictOptions {
                                n_samples: cfg.predict_samples,
                                seed: rep_seed,
                                ..Default::default()
                            },
                        )?;
                        probabilistic_outcome(p.mean.clone(), &p, &val.y)
                    })
                }
                Method::Avg => Ok(point_outcome(
                    (0..query.len()).map(|i| avg_predict(query.base_predictions.row(i))).collect(),
                    &val.y,
                )),
                Method::CvStack => cv_stack_fit(&data, cfg.search.n_folds).map(|w| point_outcome(w.predict(&query), &val.y)),
                Method::LnrStack => lnr_stack_fit_folds(&data, cfg.search.n_folds).and_then(|(w, sd)| {
                    let g = GaussianPredictive::homoscedastic(w.predict(&query), sd);
                    probabilistic_outcome(g.mean.clone(), &g, &val.y)
                }),
                Method::NlrStack | Method::Gam => {
                    let search = SearchConfig { seed, ..cfg.search };
                    let fitted = if m == Method::Gam {
                        gam_fit(&data, &search)
                    } else {
                        nlr_stack_fit(&data, &search)
                    };
                    fitted.and_then(|a| {
                        let g = a.predict(&query);
                        probabilistic_outcome(g.mean.clone(), &g, &val.y)
                    })
                }
            };
            (m, r.map_err(|e| e.to_string()))
        })
        .collect();
    Ok(Repetition {
        index: rep,
        base_rmse,
        holdout_x: hold.x,
        holdout_y: hold.y,
        outcomes,
    })
}

/// Runs every repetition, distributing them over worker threads. Results are
/// collected by repetition index, so the report does not depend on scheduling.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let tree = cfg.build_tree()?;
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        t => t,
    }
    .min(cfg.n_repetitions);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Repetition>>>> = Mutex::new((0..cfg.n_repetitions).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let rep = next.fetch_add(1, Ordering::Relaxed);
                if rep >= cfg.n_repetitions {
                    break;
                }
                let r = run_repetition(cfg, &tree, rep);
                log::info!("benchmark repetition {} of {} done", rep + 1, cfg.n_repetitions);
                slots.lock().expect("worker panicked")[rep] = Some(r);
            });
        }
    });
    let repetitions = slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every repetition is scheduled"))
        .collect::<Result<Vec<_>>>()?;

    for rep in &repetitions {
        for (m, r) in &rep.outcomes {
            if let Err(e) = r {
                log::warn!("repetition {}: {} failed: {e}", rep.index, m.name());
            }
        }
        if rep.base_rmse.iter().any(|&r| r < 0.15) {
            log::warn!(
                "repetition {}: a base model reaches validation RMSE below 0.15 on its own",
                rep.index
            );
        }
    }
    let val = validation_grid(cfg.n_validation);
    Ok(BenchmarkReport {
        config: cfg.clone(),
        validation_x: val.x,
        validation_truth: val.y,
        repetitions,
    })
}

impl BenchmarkReport {
    pub fn methods(&self) -> Vec<Method> {
        self.repetitions
            .first()
            .map(|r| r.outcomes.iter().map(|(m, _)| *m).collect())
            .unwrap_or_default()
    }

    fn successes(&self, m: Method) -> impl Iterator<Item = &MethodOutcome> {
        self.repetitions.iter().filter_map(move |r| {
            r.outcomes
                .iter()
                .find(|(k, _)| *k == m)
                .and_then(|(_, o)| o.as_ref().ok())
        })
    }

    pub fn summary(&self, m: Method) -> MethodSummary {
        let rmses: Vec<f64> = self.successes(m).map(|o| o.rmse).collect();
        let n = rmses.len();
        let curves: Vec<CoverageCurve> = self.successes(m).filter_map(|o| o.coverage.clone()).collect();
        MethodSummary {
            method: m,
            mean_rmse: if n > 0 { rmses.iter().sum::<f64>() / n as f64 } else { f64::NAN },
            sd_rmse: sample_sd(&rmses),
            n_success: n,
            mean_abs_gap: CoverageCurve::average(&curves).map(|c| c.mean_abs_gap),
        }
    }

    pub fn summaries(&self) -> Vec<MethodSummary> {
        self.methods().into_iter().map(|m| self.summary(m)).collect()
    }

    /// Coverage averaged over successful repetitions.
    pub fn coverage(&self, m: Method) -> Option<CoverageCurve> {
        let curves: Vec<CoverageCurve> = self.successes(m).filter_map(|o| o.coverage.clone()).collect();
        CoverageCurve::average(&curves)
    }

    /// Fraction of repetitions in which method `m` failed.
    pub fn failure_rate(&self, m: Method) -> f64 {
        let n = self.repetitions.len();
        (n - self.successes(m).count()) as f64 / n.max(1) as f64
    }

    pub fn sanity_violations(&self) -> usize {
        self.repetitions
            .iter()
            .filter(|r| r.base_rmse.iter().any(|&x| x < 0.15))
            .count()
    }

    pub fn rmse_table_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(["method", "mean_rmse", "sd_rmse", "n_success"]).map_err(ser)?;
        for s in self.summaries() {
            w.write_record([
                s.method.name().to_string(),
                s.mean_rmse.to_string(),
                s.sd_rmse.to_string(),
                s.n_success.to_string(),
            ])
            .map_err(ser)?;
        }
        w.into_inner().map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn coverage_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(["method", "nominal", "empirical"]).map_err(ser)?;
        for m in self.methods() {
            if let Some(c) = self.coverage(m) {
                for (p, e) in c.nominal.iter().zip(&c.empirical) {
                    w.write_record([m.name().to_string(), p.to_string(), e.to_string()]).map_err(ser)?;
                }
            }
        }
        w.into_inner().map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Validation-grid predictions of the first repetition.
    pub fn predictions_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(vec![]);
        let Some(rep) = self.repetitions.first() else {
            return w.into_inner().map_err(|e| Error::Serialization(e.to_string()));
        };
        let ok: Vec<(Method, &MethodOutcome)> = rep
            .outcomes
            .iter()
            .filter_map(|(m, o)| o.as_ref().ok().map(|o| (*m, o)))
            .collect();
        let mut header = vec!["x".to_string(), "truth".to_string()];
        for (m, o) in &ok {
            header.push(format!("{}_mean", m.name()));
            if o.interval_95.is_some() {
                header.push(format!("{}_q0.025", m.name()));
                header.push(format!("{}_q0.975", m.name()));
            }
        }
        w.write_record(&header).map_err(ser)?;
        for j in 0..self.validation_x.len() {
            let mut row = vec![self.validation_x[j].to_string(), self.validation_truth[j].to_string()];
            for (_, o) in &ok {
                row.push(o.mean[j].to_string());
                if let Some((lo, hi)) = &o.interval_95 {
                    row.push(lo[j].to_string());
                    row.push(hi[j].to_string());
                }
            }
            w.write_record(&row).map_err(ser)?;
        }
        w.into_inner().map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn summary_json(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Summary<'a> {
            schema_version: u32,
            n_repetitions: usize,
            seed: u64,
            methods: Vec<MethodSummary>,
            failure_rates: Vec<(&'a str, f64)>,
            sanity_gate_violations: usize,
        }
        let methods = self.methods();
        let s = Summary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            n_repetitions: self.repetitions.len(),
            seed: self.config.seed,
            methods: self.summaries(),
            failure_rates: methods.iter().map(|&m| (m.name(), self.failure_rate(m))).collect(),
            sanity_gate_violations: self.sanity_violations(),
        };
        serde_json::to_vec_pretty(&s).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Writes `rmse_table.csv`, `coverage.csv`, `predictions.csv` and
    /// `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("rmse_table.csv"), &self.rmse_table_csv()?)?;
        write_atomic(&dir.join("coverage.csv"), &self.coverage_csv()?)?;
        write_atomic(&dir.join("predictions.csv"), &self.predictions_csv()?)?;
        write_atomic(&dir.join("summary.json"), &self.summary_json()?)
    }
}

fn ser(e: csv::Error) -> Error {
    Error::Serialization(e.to_string())
}
