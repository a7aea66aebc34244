//! Variance-minimizing tuning parameters for the context-aware objective.
//!
//! For plain gradient descent the optimal weight of context `c` is the
//! covariance between centered pseudo-gradients and centered gradients,
//! divided by `(1 + n_c/N_c)` times the pseudo-gradient variance. The
//! estimator replaces the context expectations by Bessel-corrected sample
//! averages over the labeled data of that context and clips into `[0, 1]`.

use log::warn;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use thiserror::Error;

use crate::datasets::{Sample, Teacher};
use crate::model::{Differentiable, ModelError};
use crate::objectives::{ContextData, SemiSupervisedSet};

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("gradient lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("unlabeled count must be positive")]
    NoUnlabeled,
    #[error("population has no finite support for context {0}")]
    Unsupported(usize),
    #[error("pseudo-gradients have zero variance")]
    ZeroVariance,
    #[error("teacher is undefined on the population support")]
    UndefinedTeacher,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Gradients and pseudo-gradients at the labeled samples of one context.
#[derive(Clone, Debug)]
pub struct ContextGradientStats {
    grads: Vec<Vec<f64>>,
    pseudo_grads: Vec<Vec<f64>>,
    unlabeled_count: usize,
}

impl ContextGradientStats {
    pub fn new(
        grads: Vec<Vec<f64>>,
        pseudo_grads: Vec<Vec<f64>>,
        unlabeled_count: usize,
    ) -> Result<Self, TuningError> {
        if grads.len() != pseudo_grads.len() {
            return Err(TuningError::LengthMismatch(grads.len(), pseudo_grads.len()));
        }
        Ok(Self {
            grads,
            pseudo_grads,
            unlabeled_count,
        })
    }

    /// Evaluates per-sample gradients on one context's labeled data.
    pub fn collect<M: Differentiable + ?Sized>(
        model: &M,
        theta: &[f64],
        ctx: &ContextData,
    ) -> Result<Self, TuningError> {
        let mut grads = Vec::with_capacity(ctx.n());
        let mut pseudo_grads = Vec::with_capacity(ctx.n());
        if ctx.labeled_f.len() == ctx.n() {
            for i in 0..ctx.n() {
                grads.push(model.loss_and_grad(theta, &ctx.labeled_x[i], &ctx.labeled_y[i])?.1);
                pseudo_grads
                    .push(model.loss_and_grad(theta, &ctx.labeled_x[i], &ctx.labeled_f[i])?.1);
            }
        }
        Self::new(grads, pseudo_grads, ctx.big_n())
    }

    /// All contexts treated as one.
    pub fn pooled(stats: &[ContextGradientStats]) -> Self {
        Self {
            grads: stats.iter().flat_map(|s| s.grads.iter().cloned()).collect(),
            pseudo_grads: stats
                .iter()
                .flat_map(|s| s.pseudo_grads.iter().cloned())
                .collect(),
            unlabeled_count: stats.iter().map(|s| s.unlabeled_count).sum(),
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.grads.len()
    }

    pub fn unlabeled_count(&self) -> usize {
        self.unlabeled_count
    }

    pub fn grads(&self) -> &[Vec<f64>] {
        &self.grads
    }

    pub fn pseudo_grads(&self) -> &[Vec<f64>] {
        &self.pseudo_grads
    }

    pub fn mean_grad(&self) -> Vec<f64> {
        mean(&self.grads)
    }

    pub fn mean_pseudo_grad(&self) -> Vec<f64> {
        mean(&self.pseudo_grads)
    }

    /// Scales every gradient and pseudo-gradient by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let scale = |v: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            v.iter().map(|g| g.iter().map(|x| x * s).collect()).collect()
        };
        Self {
            grads: scale(&self.grads),
            pseudo_grads: scale(&self.pseudo_grads),
            unlabeled_count: self.unlabeled_count,
        }
    }
}

fn mean(v: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = v.first() else {
        return Vec::new();
    };
    let mut m = vec![0.0; first.len()];
    for g in v {
        for (a, b) in m.iter_mut().zip(g) {
            *a += b;
        }
    }
    let n = v.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Degeneracy {
    TooFewLabeled,
    NoUnlabeled,
    ConstantPseudoGradients,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaEstimate {
    /// Clipped into `[0, 1]`; 0 for degenerate contexts.
    pub value: f64,
    /// Unclipped ratio, when it could be formed.
    pub raw: Option<f64>,
    pub degeneracy: Option<Degeneracy>,
}

impl LambdaEstimate {
    fn degenerate(d: Degeneracy) -> Self {
        Self {
            value: 0.0,
            raw: None,
            degeneracy: Some(d),
        }
    }
}

/// Relative size below which the pseudo-gradient variance counts as zero.
const ZERO_VARIANCE_TOL: f64 = 1e-20;

/// Covariance-over-variance estimate of the optimal pseudo-label weight.
pub fn estimate_lambda(stats: &ContextGradientStats) -> LambdaEstimate {
    let n = stats.labeled_count();
    if n < 2 {
        warn!("tuning estimate: {n} labeled samples in context, using 0");
        return LambdaEstimate::degenerate(Degeneracy::TooFewLabeled);
    }
    if stats.unlabeled_count == 0 {
        warn!("tuning estimate: no unlabeled samples in context, using 0");
        return LambdaEstimate::degenerate(Degeneracy::NoUnlabeled);
    }
    match covariance_ratio(&stats.grads, &stats.pseudo_grads, None) {
        Some((cov, var)) => {
            let denom = (1.0 + n as f64 / stats.unlabeled_count as f64) * var;
            let raw = cov / denom;
            LambdaEstimate {
                value: raw.clamp(0.0, 1.0),
                raw: Some(raw),
                degeneracy: None,
            }
        }
        None => {
            warn!("tuning estimate: constant pseudo-gradients, using 0");
            LambdaEstimate::degenerate(Degeneracy::ConstantPseudoGradients)
        }
    }
}

/// Single tuning value with every context pooled together.
pub fn estimate_lambda_pooled(stats: &[ContextGradientStats]) -> LambdaEstimate {
    estimate_lambda(&ContextGradientStats::pooled(stats))
}

/// Weighted (or, with `weights = None`, Bessel-corrected) covariance of
/// centered pseudo-gradients with centered gradients, and the pseudo-gradient
/// variance. `None` when that variance vanishes.
fn covariance_ratio(
    grads: &[Vec<f64>],
    pseudo: &[Vec<f64>],
    weights: Option<&[f64]>,
) -> Option<(f64, f64)> {
    let n = grads.len();
    let w: Vec<f64> = match weights {
        Some(w) => w.to_vec(),
        None => vec![1.0 / n as f64; n],
    };
    let p = grads[0].len();
    let mut mg = vec![0.0; p];
    let mut mf = vec![0.0; p];
    for i in 0..n {
        for k in 0..p {
            mg[k] += w[i] * grads[i][k];
            mf[k] += w[i] * pseudo[i][k];
        }
    }
    let mut cov = 0.0;
    let mut var = 0.0;
    let mut scale = 0.0;
    for i in 0..n {
        let (mut c, mut v, mut s) = (0.0, 0.0, 0.0);
        for k in 0..p {
            let df = pseudo[i][k] - mf[k];
            c += df * (grads[i][k] - mg[k]);
            v += df * df;
            s += pseudo[i][k] * pseudo[i][k];
        }
        cov += w[i] * c;
        var += w[i] * v;
        scale += w[i] * s;
    }
    if weights.is_none() {
        // both sides carry 1/(n-1); the ratio only needs them consistent
        let bessel = n as f64 / (n as f64 - 1.0);
        cov *= bessel;
        var *= bessel;
    }
    if var <= ZERO_VARIANCE_TOL * scale || var == 0.0 {
        None
    } else {
        Some((cov, var))
    }
}

/// `1 / (1 + n/N)`, the tuning value under which the context-aware objective
/// reduces to the plain doubly-robust one.
pub fn dr_equivalent_lambda(n: usize, big_n: usize) -> Result<f64, TuningError> {
    if big_n == 0 {
        return Err(TuningError::NoUnlabeled);
    }
    Ok(1.0 / (1.0 + n as f64 / big_n as f64))
}

/// Per-context estimates at `theta`.
pub fn estimate_per_context<M: Differentiable + ?Sized>(
    model: &M,
    theta: &[f64],
    set: &SemiSupervisedSet,
) -> Result<Vec<LambdaEstimate>, TuningError> {
    set.contexts()
        .iter()
        .map(|ctx| ContextGradientStats::collect(model, theta, ctx).map(|s| estimate_lambda(&s)))
        .collect()
}

/// The pooled estimate at `theta`, broadcast to every context.
pub fn estimate_pooled<M: Differentiable + ?Sized>(
    model: &M,
    theta: &[f64],
    set: &SemiSupervisedSet,
) -> Result<LambdaEstimate, TuningError> {
    let stats = set
        .contexts()
        .iter()
        .map(|ctx| ContextGradientStats::collect(model, theta, ctx))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(estimate_lambda_pooled(&stats))
}

/// A point of a discrete population with its joint probability `P(x, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportPoint {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub prob: f64,
}

/// Data-generating distribution that can be queried exactly.
pub trait Population {
    fn num_contexts(&self) -> usize;

    /// The support of context `c`, if finite.
    fn finite_support(&self, c: usize) -> Option<&[SupportPoint]>;
}

/// Finite population; probabilities are joint over all contexts and sum to 1.
#[derive(Clone, Debug)]
pub struct FiniteSupport {
    contexts: Vec<Vec<SupportPoint>>,
}

impl FiniteSupport {
    /// Normalizes the given weights into joint probabilities.
    pub fn new(mut contexts: Vec<Vec<SupportPoint>>) -> Self {
        let total: f64 = contexts.iter().flatten().map(|p| p.prob).sum();
        for p in contexts.iter_mut().flatten() {
            p.prob /= total;
        }
        Self { contexts }
    }

    pub fn context_prob(&self, c: usize) -> f64 {
        self.contexts[c].iter().map(|p| p.prob).sum()
    }

    /// Exact population loss `E[loss(theta | X, Y)]`.
    pub fn population_loss<M: Differentiable + ?Sized>(
        &self,
        model: &M,
        theta: &[f64],
    ) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for p in self.contexts.iter().flatten() {
            total += p.prob * model.loss(theta, &p.x, &p.y)?;
        }
        Ok(total)
    }

    /// `count` i.i.d. labeled draws.
    pub fn sample<R: Rng>(&self, rng: &mut R, count: usize) -> Vec<Sample> {
        let flat: Vec<(usize, &SupportPoint)> = self
            .contexts
            .iter()
            .enumerate()
            .flat_map(|(c, pts)| pts.iter().map(move |p| (c, p)))
            .collect();
        let dist = WeightedIndex::new(flat.iter().map(|(_, p)| p.prob)).expect("positive weights");
        (0..count)
            .map(|_| {
                let (c, p) = flat[dist.sample(rng)];
                Sample::labeled(p.x.clone(), c, p.y.clone())
            })
            .collect()
    }
}

impl Population for FiniteSupport {
    fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    fn finite_support(&self, c: usize) -> Option<&[SupportPoint]> {
        self.contexts.get(c).map(Vec::as_slice)
    }
}

/// Optimal tuning value of context `c` computed from exact expectations over
/// a finite population. Unclipped; used as a test oracle.
#[allow(clippy::too_many_arguments)]
pub fn lambda_star_population<P, M, T>(
    population: &P,
    context: usize,
    model: &M,
    theta: &[f64],
    teacher: &T,
    n_c: usize,
    big_n_c: usize,
) -> Result<f64, TuningError>
where
    P: Population + ?Sized,
    M: Differentiable + ?Sized,
    T: Teacher + ?Sized,
{
    if big_n_c == 0 {
        return Err(TuningError::NoUnlabeled);
    }
    let support = population
        .finite_support(context)
        .ok_or(TuningError::Unsupported(context))?;
    let total: f64 = support.iter().map(|p| p.prob).sum();
    let mut grads = Vec::with_capacity(support.len());
    let mut pseudo = Vec::with_capacity(support.len());
    let mut weights = Vec::with_capacity(support.len());
    for p in support {
        let f = teacher
            .pseudo_label(&p.x)
            .ok_or(TuningError::UndefinedTeacher)?;
        grads.push(model.loss_and_grad(theta, &p.x, &p.y)?.1);
        pseudo.push(model.loss_and_grad(theta, &p.x, &f)?.1);
        weights.push(p.prob / total);
    }
    let (cov, var) =
        covariance_ratio(&grads, &pseudo, Some(&weights)).ok_or(TuningError::ZeroVariance)?;
    Ok(cov / ((1.0 + n_c as f64 / big_n_c as f64) * var))
}
