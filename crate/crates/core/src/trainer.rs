//! Optimization loop: Adam or plain gradient descent over the objective
//! family, with per-epoch tuning re-estimation and a linear curriculum on
//! the labeled correction terms.

use std::time::Instant;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{StratifiedDataset, Teacher};
use crate::model::{Differentiable, ModelError, Term};
use crate::objectives::{
    cdr_terms, curriculum_alpha, ContextSelection, ObjectiveError, ObjectiveKind, ObjectiveSpec,
    SemiSupervisedSet, TuningMode, TuningVector,
};
use crate::tuning::{dr_equivalent_lambda, estimate_per_context, estimate_pooled, TuningError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("numeric failure in epoch {epoch}: {source}")]
    Numeric { epoch: usize, source: ModelError },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("optimizer state has {expected} parameters, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty test set")]
    EmptyTest,
    #[error("grid {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tuning(#[from] TuningError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    GradientDescent,
}

impl Optimizer {
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

/// When the estimated tuning vector is refreshed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cadence {
    PerEpoch,
    PerStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveSpec,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Unlabeled (or pooled) samples per step; 0 means full batch.
    pub batch_size: usize,
    /// Labeled samples per step for the bias-corrected objectives; 0 uses
    /// every labeled sample in every step.
    pub labeled_batch_size: usize,
    pub cadence: Cadence,
    /// Record elapsed milliseconds per epoch. Off by default so histories
    /// are reproducible byte for byte.
    pub record_wall_clock: bool,
}

pub const DEFAULT_LEARNING_RATE: f64 = 5e-4;
pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_ERM_EPOCHS: usize = 1000;

impl TrainConfig {
    /// Adam at the default learning rate; 1000 epochs for ERM, 100 otherwise.
    pub fn standard(kind: ObjectiveKind, seed: u64) -> Self {
        Self {
            objective: ObjectiveSpec::standard(kind),
            epochs: if kind == ObjectiveKind::Erm {
                DEFAULT_ERM_EPOCHS
            } else {
                DEFAULT_EPOCHS
            },
            learning_rate: DEFAULT_LEARNING_RATE,
            optimizer: Optimizer::ADAM,
            seed,
            batch_size: 256,
            labeled_batch_size: 64,
            cadence: Cadence::PerEpoch,
            record_wall_clock: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0) {
                return bad("Adam betas must lie in (0, 1)");
            }
            if !(eps > 0.0) {
                return bad("Adam eps must be positive");
            }
        }
        Ok(())
    }
}

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(p: usize) -> Self {
        Self {
            m: vec![0.0; p],
            v: vec![0.0; p],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn adam_step(
    state: &mut AdamState,
    theta: &mut [f64],
    grad: &[f64],
    gamma: f64,
    (beta1, beta2, eps): (f64, f64, f64),
) -> Result<(), TrainError> {
    if state.m.len() != theta.len() || grad.len() != theta.len() {
        return Err(TrainError::DimensionMismatch {
            expected: state.m.len(),
            found: grad.len().min(theta.len()),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..theta.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= gamma * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the step objective values within the epoch.
    pub objective_value: f64,
    pub alpha: f64,
    pub lambda: Vec<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub global_loss: f64,
    /// `None` for contexts without test samples.
    pub context_losses: Vec<Option<f64>>,
    pub context_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub method: ObjectiveKind,
    pub seed: u64,
    pub labeled_counts: Vec<usize>,
    pub unlabeled_counts: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    pub test: Option<Evaluation>,
    #[serde(skip)]
    pub theta: Vec<f64>,
}

impl RunHistory {
    pub fn final_lambda(&self) -> &[f64] {
        self.epochs.last().map_or(&[], |r| &r.lambda)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }
}

/// Mean test loss overall and per context.
pub fn evaluate<M: Differentiable + ?Sized>(
    model: &M,
    theta: &[f64],
    test: &StratifiedDataset,
) -> Result<Evaluation, TrainError> {
    if test.is_empty() {
        return Err(TrainError::EmptyTest);
    }
    let mut total = 0.0;
    let mut context_losses = Vec::with_capacity(test.num_contexts());
    let mut context_counts = Vec::with_capacity(test.num_contexts());
    for c in 0..test.num_contexts() {
        let mut sum = 0.0;
        for (i, s) in test.context(c).iter().enumerate() {
            let y = s
                .ground_truth()
                .ok_or(crate::datasets::DataError::MissingLabel(i))
                .map_err(ObjectiveError::from)?;
            sum += model.loss(theta, &s.x, y)?;
        }
        let count = test.context_len(c);
        total += sum;
        context_losses.push((count > 0).then(|| sum / count as f64));
        context_counts.push(count);
    }
    Ok(Evaluation {
        global_loss: total / test.len() as f64,
        context_losses,
        context_counts,
    })
}

/// Shuffled pass over `0..len`, reshuffled whenever it wraps around.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: 0,
        }
    }

    fn take<R: Rng>(&mut self, k: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos == 0 {
                self.order.shuffle(rng);
            }
            out.push(self.order[self.pos]);
            self.pos = (self.pos + 1) % self.order.len();
        }
        out
    }
}

fn proportional(batch: usize, part: usize, whole: usize) -> usize {
    if part == 0 {
        return 0;
    }
    if batch == 0 {
        return part;
    }
    ((batch as f64 * part as f64 / whole as f64).round() as usize).clamp(1, part)
}

/// Index sampling for one run.
enum Batcher {
    Full,
    /// Uniform minibatches from a flat pool (ERM, P-ERM).
    Pool { cursor: Cursor, batch: usize },
    /// Per-context draws from each component (DR, TDR, CDR).
    Stratified {
        labeled: Vec<Cursor>,
        unlabeled: Vec<Cursor>,
        lab_sizes: Vec<usize>,
        unl_sizes: Vec<usize>,
    },
}

impl Batcher {
    fn steps_per_epoch(&self, pool: usize, config: &TrainConfig, set: &SemiSupervisedSet) -> usize {
        match self {
            Batcher::Full => 1,
            Batcher::Pool { batch, .. } => pool.div_ceil(*batch),
            Batcher::Stratified { .. } => {
                let big_n = set.unlabeled_count();
                if big_n > 0 {
                    big_n.div_ceil(config.batch_size)
                } else {
                    let l = if config.labeled_batch_size == 0 {
                        set.labeled_count()
                    } else {
                        config.labeled_batch_size
                    };
                    set.labeled_count().div_ceil(l.max(1))
                }
            }
        }
    }
}

/// Tuning vector in force for an epoch or step.
fn current_lambda<M: Differentiable + ?Sized>(
    spec: &ObjectiveSpec,
    model: &M,
    theta: &[f64],
    set: &SemiSupervisedSet,
) -> Result<TuningVector, TrainError> {
    let k = set.num_contexts();
    let v = match (spec.kind, &spec.tuning) {
        (ObjectiveKind::Erm, _) => TuningVector::uniform(k, 0.0)?,
        (ObjectiveKind::PseudoErm, _) => TuningVector::uniform(k, 1.0)?,
        (ObjectiveKind::Dr, _) => {
            let l = dr_equivalent_lambda(set.labeled_count(), set.unlabeled_count())?;
            TuningVector::uniform(k, l)?
        }
        (_, TuningMode::Fixed(v)) if v.len() == 1 => TuningVector::uniform(k, v[0])?,
        (_, TuningMode::Fixed(v)) => TuningVector::new(v.clone())?,
        (ObjectiveKind::Cdr, TuningMode::Estimated) => {
            let est = estimate_per_context(model, theta, set)?;
            TuningVector::clipped(est.iter().map(|e| e.value).collect())
        }
        (ObjectiveKind::Tdr, TuningMode::Estimated) => {
            TuningVector::uniform(k, estimate_pooled(model, theta, set)?.value)?
        }
    };
    Ok(v)
}

/// Trains from `theta0` and evaluates on `test` when it is nonempty.
///
/// ERM uses only the labeled data; the teacher and unlabeled pool are
/// ignored. Every other objective needs a teacher.
#[allow(clippy::too_many_arguments)]
pub fn train<M: Differentiable + ?Sized>(
    config: &TrainConfig,
    model: &M,
    theta0: Vec<f64>,
    labeled: &StratifiedDataset,
    unlabeled: &StratifiedDataset,
    teacher: Option<&dyn Teacher>,
    test: &StratifiedDataset,
) -> Result<RunHistory, TrainError> {
    let set = match (config.objective.kind, teacher) {
        (ObjectiveKind::Erm, _) => SemiSupervisedSet::supervised(labeled)?,
        (_, Some(t)) => SemiSupervisedSet::new(labeled, unlabeled, t)?,
        (_, None) => return Err(ObjectiveError::MissingPseudoLabels.into()),
    };
    train_on_set(config, model, theta0, &set, test)
}

/// [`train`] on data with teacher labels already attached.
pub fn train_on_set<M: Differentiable + ?Sized>(
    config: &TrainConfig,
    model: &M,
    theta0: Vec<f64>,
    set: &SemiSupervisedSet,
    test: &StratifiedDataset,
) -> Result<RunHistory, TrainError> {
    config.validate()?;
    if theta0.len() != model.num_params() {
        return Err(TrainError::DimensionMismatch {
            expected: model.num_params(),
            found: theta0.len(),
        });
    }
    let kind = config.objective.kind;
    if set.labeled_count() == 0 && kind != ObjectiveKind::PseudoErm {
        return Err(ObjectiveError::EmptyBatch("no labeled samples").into());
    }

    let pool: Vec<(&[f64], &[f64])> = match kind {
        ObjectiveKind::Erm => set.labeled_pairs(),
        ObjectiveKind::PseudoErm => {
            let mut p = set.labeled_pairs();
            p.extend(set.unlabeled_pseudo_pairs());
            p
        }
        _ => Vec::new(),
    };
    if matches!(kind, ObjectiveKind::Erm | ObjectiveKind::PseudoErm) && pool.is_empty() {
        return Err(ObjectiveError::EmptyBatch("no samples").into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut batcher = match kind {
        _ if config.batch_size == 0 => Batcher::Full,
        ObjectiveKind::Erm | ObjectiveKind::PseudoErm => Batcher::Pool {
            cursor: Cursor::new(pool.len()),
            batch: config.batch_size.min(pool.len()),
        },
        _ => {
            let ctxs = set.contexts();
            Batcher::Stratified {
                labeled: ctxs.iter().map(|c| Cursor::new(c.n())).collect(),
                unlabeled: ctxs.iter().map(|c| Cursor::new(c.big_n())).collect(),
                lab_sizes: ctxs
                    .iter()
                    .map(|c| proportional(config.labeled_batch_size, c.n(), set.labeled_count()))
                    .collect(),
                unl_sizes: ctxs
                    .iter()
                    .map(|c| proportional(config.batch_size, c.big_n(), set.unlabeled_count()))
                    .collect(),
            }
        }
    };
    let steps = batcher.steps_per_epoch(pool.len(), config, set);

    let mut theta = theta0;
    let mut adam = AdamState::new(theta.len());
    let mut records = Vec::with_capacity(config.epochs);
    let started = Instant::now();
    let full_weight = 1.0 / pool.len().max(1) as f64;

    for epoch in 1..=config.epochs {
        let numeric = |source| TrainError::Numeric { epoch, source };
        let alpha = if config.objective.curriculum {
            curriculum_alpha(epoch, config.epochs)?
        } else {
            1.0
        };
        let mut lambda = current_lambda(&config.objective, model, &theta, set)?;
        let mut value_sum = 0.0;

        for step in 0..steps {
            if step > 0 && config.cadence == Cadence::PerStep {
                lambda = current_lambda(&config.objective, model, &theta, set)?;
            }
            let terms: Vec<Term> = match &mut batcher {
                Batcher::Full if pool.is_empty() => cdr_terms(set, &lambda, alpha, None)?,
                Batcher::Full => pool
                    .iter()
                    .map(|&(x, y)| Term { x, y, weight: full_weight })
                    .collect(),
                Batcher::Pool { cursor, batch } => {
                    let w = 1.0 / *batch as f64;
                    cursor
                        .take(*batch, &mut rng)
                        .into_iter()
                        .map(|i| Term {
                            x: pool[i].0,
                            y: pool[i].1,
                            weight: w,
                        })
                        .collect()
                }
                Batcher::Stratified {
                    labeled,
                    unlabeled,
                    lab_sizes,
                    unl_sizes,
                } => {
                    let mut sel = Vec::with_capacity(set.num_contexts());
                    for c in 0..set.num_contexts() {
                        sel.push(ContextSelection {
                            labeled: labeled[c].take(lab_sizes[c], &mut rng),
                            unlabeled: unlabeled[c].take(unl_sizes[c], &mut rng),
                        });
                    }
                    cdr_terms(set, &lambda, alpha, Some(&sel))?
                }
            };
            if terms.is_empty() {
                continue;
            }
            let (value, grad) = model
                .weighted_loss_and_grad(&theta, &terms)
                .map_err(numeric)?;
            value_sum += value;
            match config.optimizer {
                Optimizer::Adam { beta1, beta2, eps } => {
                    adam_step(&mut adam, &mut theta, &grad, config.learning_rate, (beta1, beta2, eps))
                        .map_err(|e| match e {
                            TrainError::NonFiniteGradient => {
                                numeric(ModelError::NonFinite("gradient"))
                            }
                            other => other,
                        })?;
                }
                Optimizer::GradientDescent => {
                    for (t, g) in theta.iter_mut().zip(&grad) {
                        *t -= config.learning_rate * g;
                    }
                }
            }
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(numeric(ModelError::NonFinite("parameters")));
        }
        let record = EpochRecord {
            epoch,
            objective_value: value_sum / steps as f64,
            alpha,
            lambda: lambda.as_slice().to_vec(),
            wall_ms: config
                .record_wall_clock
                .then(|| started.elapsed().as_secs_f64() * 1e3),
        };
        debug!(
            "{kind} epoch {epoch}: objective {:.6}, lambda {:?}",
            record.objective_value, record.lambda
        );
        records.push(record);
    }

    let test_eval = if test.is_empty() {
        None
    } else {
        Some(evaluate(model, &theta, test)?)
    };
    Ok(RunHistory {
        method: kind,
        seed: config.seed,
        labeled_counts: set.labeled_counts(),
        unlabeled_counts: set.unlabeled_counts(),
        epochs: records,
        test: test_eval,
        theta,
    })
}

/// Ground truth as a function of planar position, for loss maps.
pub trait SpatialOracle {
    /// `(xmin, ymin, xmax, ymax)`.
    fn bounds(&self) -> [f64; 4];

    /// Model covariate and target at `(x, y)`; `None` where no device can be
    /// (inside a building).
    fn sample_at(&self, x: f64, y: f64) -> Option<(Vec<f64>, Vec<f64>)>;
}

/// Regular grid of cell centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn covering(bounds: [f64; 4], nx: usize, ny: usize) -> Self {
        Self {
            xmin: bounds[0],
            ymin: bounds[1],
            xmax: bounds[2],
            ymax: bounds[3],
            nx,
            ny,
        }
    }

    /// Cell centers in row-major order (x fastest).
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let dx = (self.xmax - self.xmin) / self.nx as f64;
        let dy = (self.ymax - self.ymin) / self.ny as f64;
        (0..self.ny).flat_map(move |j| {
            (0..self.nx).map(move |i| {
                (
                    self.xmin + (i as f64 + 0.5) * dx,
                    self.ymin + (j as f64 + 0.5) * dy,
                )
            })
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossMapCell {
    pub x: f64,
    pub y: f64,
    pub loss: Option<f64>,
}

/// Per-cell test loss against the oracle's ground truth.
pub fn loss_map<M: Differentiable + ?Sized, O: SpatialOracle + ?Sized>(
    model: &M,
    theta: &[f64],
    oracle: &O,
    grid: &GridSpec,
) -> Result<Vec<LossMapCell>, TrainError> {
    let [bx0, by0, bx1, by1] = oracle.bounds();
    if grid.nx == 0 || grid.ny == 0 {
        return Err(TrainError::InvalidGrid("has no cells".into()));
    }
    if !(grid.xmin < grid.xmax && grid.ymin < grid.ymax) {
        return Err(TrainError::InvalidGrid("has an empty extent".into()));
    }
    if grid.xmin < bx0 || grid.ymin < by0 || grid.xmax > bx1 || grid.ymax > by1 {
        return Err(TrainError::InvalidGrid("extends outside the scene".into()));
    }
    grid.points()
        .map(|(x, y)| {
            let loss = match oracle.sample_at(x, y) {
                Some((cov, target)) => Some(model.loss(theta, &cov, &target)?),
                None => None,
            };
            Ok(LossMapCell { x, y, loss })
        })
        .collect()
}
