//! Batch experiment runner: configuration, sweeps over (method, ratio, seed)
//! and CSV/JSON exports.
//!
//! Output layout under the output directory:
//!
//! - `experiment.toml`: the resolved configuration
//! - `results.csv`: one row per run
//! - `summary.csv`: median and quartiles per (method, ratio)
//! - `runs/<method>_rho<rho>_seed<seed>.json` and `.ckpt` per successful run

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{self, DataError, LookupTeacher, Sample, StratifiedDataset, Teacher};
use crate::model::{Architecture, FourierMlp, LossKind, ModelError, ModelParams};
use crate::objectives::{ObjectiveKind, TuningMode};
use crate::scenarios::toy::{ToySpec, ToyTarget};
use crate::scenarios::urban::{DEFAULT_TEST_SIZE, DEFAULT_TRAIN_SIZE};
use crate::scenarios::{toy_generate, urban_generate, ScenarioError, UrbanScene, UrbanTeacher};
use crate::trainer::{self, Cadence, GridSpec, RunHistory, TrainConfig, TrainError};
use crate::tuning::dr_equivalent_lambda;

/// Labeled ratios swept when a configuration does not list any.
pub const DEFAULT_RHO_GRID: [f64; 5] = [0.005, 0.01, 0.02, 0.05, 0.1];

/// Environment variable that overrides the configured output directory.
pub const OUT_ENV: &str = "CDRLAB_OUT";

pub const DEFAULT_GRID_CELLS: usize = 200;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::File {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Toy,
    Urban,
    File,
}

impl ScenarioKind {
    pub fn context_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            ScenarioKind::Toy => &["A", "B"],
            ScenarioKind::Urban => &["NLOS", "LOS"],
            ScenarioKind::File => &[],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

/// Overrides applied on top of the per-scenario training defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub erm_epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub labeled_batch_size: Option<usize>,
    pub cadence: Option<Cadence>,
    pub curriculum: Option<bool>,
    /// Replaces the estimated tuning of TDR and CDR.
    pub fixed_lambda: Option<Vec<f64>>,
    pub record_wall_clock: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub fourier_features: Option<usize>,
    pub sigma: Option<f64>,
    pub hidden: Option<Vec<usize>>,
    pub loss: Option<LossKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    /// Training pool size before the labeled/unlabeled split.
    pub pool: usize,
    pub test: usize,
    pub boundary: f64,
    pub target: ToyTarget,
    pub corruption: f64,
    pub noise: f64,
}

impl Default for ToySection {
    fn default() -> Self {
        let s = ToySpec::default();
        Self {
            pool: 2000,
            test: s.test,
            boundary: s.boundary,
            target: s.target,
            corruption: s.corruption,
            noise: s.noise,
        }
    }
}

impl ToySection {
    pub fn spec(&self) -> ToySpec {
        ToySpec {
            labeled: self.pool,
            unlabeled: 0,
            test: self.test,
            boundary: self.boundary,
            target: self.target,
            corruption: self.corruption,
            noise: self.noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UrbanSection {
    /// Scene file; the built-in scene when absent.
    pub scene: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for UrbanSection {
    fn default() -> Self {
        Self {
            scene: None,
            train_size: DEFAULT_TRAIN_SIZE,
            test_size: DEFAULT_TEST_SIZE,
        }
    }
}

/// Imported data in the sample CSV format. The training file must be fully
/// labeled; the ratio split masks labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Teacher table with columns `x_1..x_d,f_1..f_m`.
    pub teacher: Option<PathBuf>,
    /// Alternatively, a scene whose direct-ray predictor is the teacher.
    pub teacher_scene: Option<PathBuf>,
    pub contexts: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioKind,
    pub methods: Vec<ObjectiveKind>,
    pub rhos: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub workers: usize,
    pub train: TrainSection,
    pub model: ModelSection,
    pub toy: ToySection,
    pub urban: UrbanSection,
    pub file: FileSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::Urban,
            methods: ObjectiveKind::ALL.to_vec(),
            rhos: DEFAULT_RHO_GRID.to_vec(),
            seeds: (0..10).collect(),
            out: PathBuf::from("out"),
            workers: 1,
            train: TrainSection::default(),
            model: ModelSection::default(),
            toy: ToySection::default(),
            urban: UrbanSection::default(),
            file: FileSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// The toy comparison: all methods at 40 labeled points out of 2000.
    pub fn toy_default() -> Self {
        Self {
            scenario: ScenarioKind::Toy,
            rhos: vec![0.02],
            ..Default::default()
        }
    }

    /// The beamforming comparison at the two smallest ratios.
    pub fn urban_default() -> Self {
        Self {
            scenario: ScenarioKind::Urban,
            rhos: vec![0.005, 0.01],
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml(&fs::read_to_string(path).map_err(file_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Every violated constraint, each prefixed by its field path.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let mut errs = Vec::new();
        if self.methods.is_empty() {
            errs.push("methods: at least one method is required".to_string());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                errs.push(format!("methods[{i}]: {} is listed twice", m.name()));
            }
        }
        if self.rhos.is_empty() {
            errs.push("rhos: at least one ratio is required".to_string());
        }
        for (i, r) in self.rhos.iter().enumerate() {
            if !(*r > 0.0 && *r <= 1.0) {
                errs.push(format!("rhos[{i}]: {r} is outside (0, 1]"));
            }
        }
        if self.seeds.is_empty() {
            errs.push("seeds: at least one seed is required".to_string());
        }
        if self.workers == 0 {
            errs.push("workers: must be at least 1".to_string());
        }
        let t = &self.train;
        if t.epochs == Some(0) {
            errs.push("train.epochs: must be at least 1".to_string());
        }
        if t.erm_epochs == Some(0) {
            errs.push("train.erm_epochs: must be at least 1".to_string());
        }
        if let Some(lr) = t.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                errs.push(format!("train.learning_rate: {lr} is not positive"));
            }
        }
        if let Some(v) = &t.fixed_lambda {
            if v.is_empty() {
                errs.push("train.fixed_lambda: must not be empty".to_string());
            }
            for (i, l) in v.iter().enumerate() {
                if !(0.0..=1.0).contains(l) {
                    errs.push(format!("train.fixed_lambda[{i}]: {l} is outside [0, 1]"));
                }
            }
        }
        let m = &self.model;
        if m.fourier_features == Some(0) {
            errs.push("model.fourier_features: must be at least 1".to_string());
        }
        if let Some(s) = m.sigma {
            if !(s > 0.0 && s.is_finite()) {
                errs.push(format!("model.sigma: {s} is not positive"));
            }
        }
        if let Some(h) = &m.hidden {
            if let Some(i) = h.iter().position(|&w| w == 0) {
                errs.push(format!("model.hidden[{i}]: width must be at least 1"));
            }
        }
        match self.scenario {
            ScenarioKind::Toy => {
                if self.toy.pool == 0 {
                    errs.push("toy.pool: must be at least 1".to_string());
                }
                if self.toy.test == 0 {
                    errs.push("toy.test: must be at least 1".to_string());
                }
                if !(self.toy.noise >= 0.0 && self.toy.noise.is_finite()) {
                    errs.push("toy.noise: must be non-negative".to_string());
                }
            }
            ScenarioKind::Urban => {
                if self.urban.train_size == 0 {
                    errs.push("urban.train_size: must be at least 1".to_string());
                }
                if self.urban.test_size == 0 {
                    errs.push("urban.test_size: must be at least 1".to_string());
                }
            }
            ScenarioKind::File => {
                let f = &self.file;
                if f.train.is_none() {
                    errs.push("file.train: required for the file scenario".to_string());
                }
                if f.test.is_none() {
                    errs.push("file.test: required for the file scenario".to_string());
                }
                let uses_teacher = self.methods.iter().any(|m| m.uses_teacher());
                match (&f.teacher, &f.teacher_scene) {
                    (Some(_), Some(_)) => errs.push(
                        "file.teacher: give either a teacher table or a teacher scene, not both"
                            .to_string(),
                    ),
                    (None, None) if uses_teacher => errs.push(
                        "file.teacher: required by the listed methods (or set file.teacher_scene)"
                            .to_string(),
                    ),
                    _ => {}
                }
                if f.contexts == Some(0) {
                    errs.push("file.contexts: must be at least 1".to_string());
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ExperimentError::Config(errs))
        }
    }

    /// The output directory after the environment override.
    pub fn resolved_out(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out.clone(),
        }
    }

    pub fn architecture(&self, input_dim: usize, output_dim: usize) -> Architecture {
        let base = match self.scenario {
            ScenarioKind::Toy => Architecture {
                input_dim: 1,
                fourier_features: 8,
                sigma: 4.0,
                hidden: vec![32, 32],
                output_dim: 1,
            },
            _ => Architecture::beamforming(),
        };
        Architecture {
            input_dim,
            fourier_features: self.model.fourier_features.unwrap_or(base.fourier_features),
            sigma: self.model.sigma.unwrap_or(base.sigma),
            hidden: self.model.hidden.clone().unwrap_or(base.hidden),
            output_dim,
        }
    }

    pub fn loss(&self) -> LossKind {
        self.model.loss.unwrap_or(match self.scenario {
            ScenarioKind::Toy => LossKind::Squared,
            _ => LossKind::Angular,
        })
    }

    /// Training settings for one run.
    pub fn train_config(&self, method: ObjectiveKind, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::standard(method, seed);
        if self.scenario == ScenarioKind::Toy {
            c.learning_rate = 5e-3;
            c.batch_size = 64;
            c.labeled_batch_size = 16;
        }
        let t = &self.train;
        if method == ObjectiveKind::Erm {
            if let Some(e) = t.erm_epochs {
                c.epochs = e;
            }
        } else if let Some(e) = t.epochs {
            c.epochs = e;
        }
        if let Some(v) = t.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = t.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = t.labeled_batch_size {
            c.labeled_batch_size = v;
        }
        if let Some(v) = t.cadence {
            c.cadence = v;
        }
        if let Some(v) = t.curriculum {
            c.objective.curriculum = v && method.is_bias_corrected();
        }
        if let (Some(v), true) = (&t.fixed_lambda, method.is_tuned()) {
            c.objective.tuning = TuningMode::Fixed(v.clone());
        }
        c.record_wall_clock = t.record_wall_clock;
        c
    }

    /// Every (method, ratio, seed) triple, methods outermost.
    pub fn jobs(&self) -> Vec<Job> {
        let mut jobs = Vec::new();
        for &method in &self.methods {
            for &rho in &self.rhos {
                for &seed in &self.seeds {
                    jobs.push(Job { method, rho, seed });
                }
            }
        }
        jobs
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Job {
    pub method: ObjectiveKind,
    pub rho: f64,
    pub seed: u64,
}

impl Job {
    pub fn stem(&self) -> String {
        format!("{}_rho{:?}_seed{}", self.method.name(), self.rho, self.seed)
    }
}

/// Fully labeled training pool, test set and teacher for one seed.
#[derive(Clone)]
pub struct PreparedData {
    pub pool: StratifiedDataset,
    pub test: StratifiedDataset,
    pub teacher: Option<Arc<dyn Teacher>>,
    pub scene: Option<UrbanScene>,
    pub context_names: Vec<String>,
}

impl PreparedData {
    fn dims(&self) -> Result<(usize, usize), ExperimentError> {
        let s = self
            .pool
            .iter()
            .chain(self.test.iter())
            .next()
            .ok_or_else(|| ExperimentError::Usage("no samples".into()))?;
        let y = s.ground_truth().ok_or(DataError::MissingLabel(0))?;
        Ok((s.x.len(), y.len()))
    }
}

fn read_samples(path: &Path, contexts: Option<usize>) -> Result<StratifiedDataset, ExperimentError> {
    let samples: Vec<Sample> = datasets::read_csv(File::open(path).map_err(file_err(path))?)?;
    let k = contexts.unwrap_or_else(|| samples.iter().map(|s| s.context + 1).max().unwrap_or(1));
    Ok(StratifiedDataset::partition_by_context(samples, k)?)
}

/// Builds the data for `seed`. The file scenario ignores the seed.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData, ExperimentError> {
    match cfg.scenario {
        ScenarioKind::Toy => {
            let d = toy_generate(&cfg.toy.spec(), seed)?;
            Ok(PreparedData {
                pool: d.labeled,
                test: d.test,
                teacher: Some(Arc::new(d.world)),
                scene: None,
                context_names: cfg.scenario.context_names(),
            })
        }
        ScenarioKind::Urban => {
            let scene = match &cfg.urban.scene {
                Some(p) => UrbanScene::read(p)?,
                None => UrbanScene::default_scene(),
            };
            let d = urban_generate(&scene, cfg.urban.train_size, cfg.urban.test_size, seed)?;
            Ok(PreparedData {
                pool: d.train,
                test: d.test,
                teacher: Some(Arc::new(UrbanTeacher { scene: scene.clone() })),
                scene: Some(scene),
                context_names: cfg.scenario.context_names(),
            })
        }
        ScenarioKind::File => {
            let f = &cfg.file;
            let train_path = f.train.as_deref().expect("validated");
            let test_path = f.test.as_deref().expect("validated");
            let pool = read_samples(train_path, f.contexts)?;
            let k = pool.num_contexts();
            let test = read_samples(test_path, Some(f.contexts.unwrap_or(k)))?;
            if test.num_contexts() != k {
                return Err(ExperimentError::Usage(format!(
                    "{}: {} contexts, but the training data has {k}",
                    test_path.display(),
                    test.num_contexts()
                )));
            }
            let mut scene = None;
            let teacher: Option<Arc<dyn Teacher>> = match (&f.teacher, &f.teacher_scene) {
                (Some(p), _) => Some(Arc::new(LookupTeacher::read_csv(
                    File::open(p).map_err(file_err(p))?,
                )?)),
                (None, Some(p)) => {
                    let s = UrbanScene::read(p)?;
                    scene = Some(s.clone());
                    Some(Arc::new(UrbanTeacher { scene: s }))
                }
                (None, None) => None,
            };
            Ok(PreparedData {
                pool,
                test,
                teacher,
                scene,
                context_names: (0..k).map(|c| c.to_string()).collect(),
            })
        }
    }
}

/// A finished run as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: ScenarioKind,
    pub rho: f64,
    pub context_names: Vec<String>,
    /// Checkpoint file name, relative to the record.
    pub checkpoint: String,
    /// Scene used for ground truth, when the scenario has one.
    pub scene: Option<UrbanScene>,
    pub history: RunHistory,
}

impl RunRecord {
    pub fn read(path: &Path) -> Result<Self, ExperimentError> {
        let f = File::open(path).map_err(file_err(path))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    pub fn checkpoint_path(&self, record_path: &Path) -> PathBuf {
        record_path.with_file_name(&self.checkpoint)
    }
}

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub job: Job,
    pub error: Option<String>,
    pub labeled_counts: Vec<usize>,
    pub unlabeled_counts: Vec<usize>,
    pub test_loss: Option<f64>,
    pub context_losses: Vec<Option<f64>>,
    pub final_lambda: Vec<f64>,
    pub wall_ms: Option<f64>,
}

impl ResultRow {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    fn failed(job: Job, error: String) -> Self {
        Self {
            job,
            error: Some(error),
            labeled_counts: vec![],
            unlabeled_counts: vec![],
            test_loss: None,
            context_losses: vec![],
            final_lambda: vec![],
            wall_ms: None,
        }
    }
}

/// Split, train, evaluate and write the run files into `runs_dir`.
pub fn run_single(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    job: Job,
    runs_dir: &Path,
) -> Result<ResultRow, ExperimentError> {
    let start = Instant::now();
    let (labeled, unlabeled) = data.pool.split_labeled_unlabeled(job.rho, job.seed)?;
    let (d, m) = data.dims()?;
    let arch = cfg.architecture(d, m);
    let model = FourierMlp::new(arch.clone(), cfg.loss());
    let tc = cfg.train_config(job.method, job.seed);
    let teacher = match job.method {
        ObjectiveKind::Erm => None,
        _ => data.teacher.as_deref(),
    };
    let history = trainer::train(
        &tc,
        &model,
        model.init_params(job.seed),
        &labeled,
        &unlabeled,
        teacher,
        &data.test,
    )?;
    let wall_ms = tc
        .record_wall_clock
        .then(|| start.elapsed().as_secs_f64() * 1e3);

    let stem = job.stem();
    let ckpt_name = format!("{stem}.ckpt");
    let ckpt_path = runs_dir.join(&ckpt_name);
    let params = ModelParams {
        arch,
        loss: cfg.loss(),
        theta: history.theta.clone(),
    };
    let f = File::create(&ckpt_path).map_err(file_err(&ckpt_path))?;
    params.write_checkpoint(BufWriter::new(f))?;

    let record = RunRecord {
        scenario: cfg.scenario,
        rho: job.rho,
        context_names: data.context_names.clone(),
        checkpoint: ckpt_name,
        scene: data.scene.clone(),
        history,
    };
    let json_path = runs_dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    fs::write(&json_path, text).map_err(file_err(&json_path))?;

    let h = &record.history;
    let eval = h.test.as_ref();
    Ok(ResultRow {
        job,
        error: None,
        labeled_counts: h.labeled_counts.clone(),
        unlabeled_counts: h.unlabeled_counts.clone(),
        test_loss: eval.map(|e| e.global_loss),
        context_losses: eval.map(|e| e.context_losses.clone()).unwrap_or_default(),
        final_lambda: h.final_lambda().to_vec(),
        wall_ms,
    })
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub context_names: Vec<String>,
    pub rows: Vec<ResultRow>,
}

impl SweepResult {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(ResultRow::ok)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok()).count()
    }
}

/// Runs every job and writes all outputs. Failed runs become rows with
/// status `failed`; the sweep always completes.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepResult, ExperimentError> {
    cfg.validate()?;
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir).map_err(file_err(&runs_dir))?;
    let cfg_path = out.join("experiment.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(file_err(&cfg_path))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| ExperimentError::Usage(format!("cannot start workers: {e}")))?;

    // the file scenario is seed independent, so it is read once
    let seeds: Vec<u64> = match cfg.scenario {
        ScenarioKind::File => vec![cfg.seeds[0]],
        _ => cfg.seeds.clone(),
    };
    let prepared: Vec<(u64, Result<PreparedData, String>)> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| (s, prepare(cfg, s).map_err(|e| e.to_string())))
            .collect()
    });
    let data_for = |seed: u64| match cfg.scenario {
        ScenarioKind::File => &prepared[0].1,
        _ => &prepared.iter().find(|(s, _)| *s == seed).expect("prepared").1,
    };
    let context_names = prepared
        .iter()
        .find_map(|(_, d)| d.as_ref().ok().map(|d| d.context_names.clone()))
        .unwrap_or_else(|| cfg.scenario.context_names());

    let jobs = cfg.jobs();
    let total = jobs.len();
    let rows: Vec<ResultRow> = pool.install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(i, &job)| {
                let row = match data_for(job.seed) {
                    Ok(d) => run_single(cfg, d, job, &runs_dir)
                        .unwrap_or_else(|e| ResultRow::failed(job, e.to_string())),
                    Err(e) => ResultRow::failed(job, format!("data preparation failed: {e}")),
                };
                match &row.error {
                    None => info!(
                        "[{}/{total}] {} done, test loss {:?}",
                        i + 1,
                        job.stem(),
                        row.test_loss
                    ),
                    Some(e) => warn!("[{}/{total}] {} failed: {e}", i + 1, job.stem()),
                }
                row
            })
            .collect()
    });

    let result = SweepResult {
        context_names,
        rows,
    };
    write_results_csv(&out.join("results.csv"), &result)?;
    write_summary_csv(&out.join("summary.csv"), &result)?;
    Ok(result)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, ExperimentError> {
    let f = File::create(path).map_err(file_err(path))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(f))
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn results_header(context_names: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["method", "rho", "seed", "status", "labeled", "unlabeled"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for prefix in ["labeled_", "unlabeled_", "loss_", "lambda_"] {
        if prefix == "loss_" {
            h.push("test_loss".into());
        }
        h.extend(context_names.iter().map(|c| format!("{prefix}{c}")));
    }
    h.push("wall_ms".into());
    h.push("error".into());
    h
}

pub fn write_results_csv(path: &Path, result: &SweepResult) -> Result<(), ExperimentError> {
    let k = result.context_names.len();
    let mut w = csv_writer(path)?;
    w.write_record(results_header(&result.context_names))?;
    for r in &result.rows {
        let mut rec = vec![
            r.job.method.name().to_string(),
            num(r.job.rho),
            r.job.seed.to_string(),
            if r.ok() { "ok" } else { "failed" }.to_string(),
        ];
        if r.ok() {
            rec.push(r.labeled_counts.iter().sum::<usize>().to_string());
            rec.push(r.unlabeled_counts.iter().sum::<usize>().to_string());
        } else {
            rec.extend([String::new(), String::new()]);
        }
        let cell = |v: Option<String>| v.unwrap_or_default();
        rec.extend((0..k).map(|c| cell(r.labeled_counts.get(c).map(usize::to_string))));
        rec.extend((0..k).map(|c| cell(r.unlabeled_counts.get(c).map(usize::to_string))));
        rec.push(opt_num(r.test_loss));
        rec.extend((0..k).map(|c| opt_num(r.context_losses.get(c).copied().flatten())));
        rec.extend((0..k).map(|c| opt_num(r.final_lambda.get(c).copied())));
        rec.push(opt_num(r.wall_ms));
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(file_err(path))?;
    Ok(())
}

/// Sample quantile with linear interpolation between order statistics
/// (the common "type 7" definition). `None` for an empty sample.
pub fn quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

pub fn summary_header(context_names: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["method", "rho", "runs", "failed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let metrics =
        std::iter::once("test_loss".to_string()).chain(context_names.iter().map(|c| format!("loss_{c}")));
    for m in metrics {
        for q in ["median", "q1", "q3"] {
            h.push(format!("{m}_{q}"));
        }
    }
    h
}

pub fn write_summary_csv(path: &Path, result: &SweepResult) -> Result<(), ExperimentError> {
    let k = result.context_names.len();
    let mut w = csv_writer(path)?;
    w.write_record(summary_header(&result.context_names))?;
    // groups in first-appearance order
    let mut groups: Vec<(ObjectiveKind, f64)> = Vec::new();
    for r in &result.rows {
        let key = (r.job.method, r.job.rho);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    for (method, rho) in groups {
        let rows: Vec<&ResultRow> = result
            .rows
            .iter()
            .filter(|r| r.job.method == method && r.job.rho == rho)
            .collect();
        let ok: Vec<&&ResultRow> = rows.iter().filter(|r| r.ok()).collect();
        let mut rec = vec![
            method.name().to_string(),
            num(rho),
            rows.len().to_string(),
            (rows.len() - ok.len()).to_string(),
        ];
        let mut push_quartiles = |vals: Vec<f64>| {
            for p in [0.5, 0.25, 0.75] {
                rec.push(opt_num(quantile(&vals, p)));
            }
        };
        push_quartiles(ok.iter().filter_map(|r| r.test_loss).collect());
        for c in 0..k {
            push_quartiles(
                ok.iter()
                    .filter_map(|r| r.context_losses.get(c).copied().flatten())
                    .collect(),
            );
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(file_err(path))?;
    Ok(())
}

/// Writes `x,y,loss` over the grid, with an empty loss inside buildings.
/// The scene defaults to the one stored in the record.
pub fn export_loss_map(
    record_path: &Path,
    scene: Option<&UrbanScene>,
    nx: usize,
    ny: usize,
    out: &Path,
) -> Result<(), ExperimentError> {
    let record = RunRecord::read(record_path)?;
    let scene = scene.or(record.scene.as_ref()).ok_or_else(|| {
        ExperimentError::Usage(format!(
            "{}: loss maps need a scene, and this run has none",
            record_path.display()
        ))
    })?;
    let ckpt = record.checkpoint_path(record_path);
    let f = File::open(&ckpt).map_err(file_err(&ckpt))?;
    let params = ModelParams::read_checkpoint(BufReader::new(f))?;
    let grid = GridSpec::covering(scene.bounds.into(), nx, ny);
    let cells = trainer::loss_map(&params.network(), &params.theta, scene, &grid)?;
    let mut w = csv_writer(out)?;
    w.write_record(["x", "y", "loss"])?;
    for c in cells {
        w.write_record([num(c.x), num(c.y), opt_num(c.loss)])?;
    }
    w.flush().map_err(file_err(out))?;
    Ok(())
}

pub const LAMBDA_TRACE_HEADER: [&str; 7] =
    ["series", "method", "rho", "seed", "epoch", "context", "lambda"];

/// Long-format tuning traces of TDR and CDR runs, each followed by the
/// constant value the fixed-weight DR objective would use.
pub fn export_lambda_traces(records: &[PathBuf], out: &Path) -> Result<(), ExperimentError> {
    if records.is_empty() {
        return Err(ExperimentError::Usage("no run files given".into()));
    }
    let mut loaded = Vec::with_capacity(records.len());
    for p in records {
        let r = RunRecord::read(p)?;
        if !r.history.method.is_tuned() {
            return Err(ExperimentError::Usage(format!(
                "{}: {} has no tuning parameters; traces need TDR or CDR runs",
                p.display(),
                r.history.method.name()
            )));
        }
        loaded.push(r);
    }
    let mut w = csv_writer(out)?;
    w.write_record(LAMBDA_TRACE_HEADER)?;
    for r in &loaded {
        let h = &r.history;
        let method = h.method.name();
        let series: Vec<(String, usize, f64)> = match h.method {
            ObjectiveKind::Tdr => {
                let n: usize = h.labeled_counts.iter().sum();
                let big: usize = h.unlabeled_counts.iter().sum();
                vec![("pooled".into(), 0, dr_reference(n, big))]
            }
            _ => (0..h.labeled_counts.len())
                .map(|c| {
                    let name = r.context_names.get(c).cloned().unwrap_or_else(|| c.to_string());
                    (name, c, dr_reference(h.labeled_counts[c], h.unlabeled_counts[c]))
                })
                .collect(),
        };
        let base = |s: &str, e: usize, ctx: &str, v: f64| {
            vec![
                s.to_string(),
                method.to_string(),
                num(r.rho),
                h.seed.to_string(),
                e.to_string(),
                ctx.to_string(),
                num(v),
            ]
        };
        for (name, c, reference) in &series {
            for e in &h.epochs {
                w.write_record(base("tuned", e.epoch, name, e.lambda[*c]))?;
            }
            for e in &h.epochs {
                w.write_record(base("dr_reference", e.epoch, name, *reference))?;
            }
        }
    }
    w.flush().map_err(file_err(out))?;
    Ok(())
}

fn dr_reference(n: usize, big_n: usize) -> f64 {
    dr_equivalent_lambda(n, big_n).unwrap_or(0.0)
}

/// Expands directories into their TDR and CDR run files, sorted by name.
/// Explicitly listed files are kept as given.
pub fn collect_tuned_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(file_err(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name.ends_with(".json") && (name.starts_with("TDR_") || name.starts_with("CDR_"))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// A random scene as TOML.
pub fn generate_scene(seed: u64) -> Result<String, ExperimentError> {
    Ok(UrbanScene::random(seed)?.to_toml())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    let mut f = File::create(path).map_err(file_err(path))?;
    f.write_all(text.as_bytes()).map_err(file_err(path))?;
    Ok(())
}
