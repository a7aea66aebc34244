//! Training objectives built from per-dataset mean losses.
//!
//! Notation used below, per context `c`: `D_c` labeled pairs `(x, y)`,
//! `D^f_c` the same covariates with teacher labels `f(x)`, and `D~^f_c` the
//! unlabeled covariates with teacher labels. `n_c`, `N_c` are their sizes and
//! `n`, `N` the totals.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{apply_teacher, DataError, StratifiedDataset, Teacher};
use crate::model::{batch_mean_loss_and_grad, Differentiable, ModelError, Term};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),
    #[error("tuning parameter {index} is {value}, outside [0, 1]")]
    InvalidTuning { index: usize, value: f64 },
    #[error("tuning vector has {found} entries for {expected} contexts")]
    TuningLength { expected: usize, found: usize },
    #[error("epoch {epoch} is outside 1..={total}")]
    InvalidEpoch { epoch: usize, total: usize },
    #[error("labeled and unlabeled datasets disagree on the context count ({0} vs {1})")]
    ContextMismatch(usize, usize),
    #[error("objective needs teacher pseudo-labels")]
    MissingPseudoLabels,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "ERM")]
    Erm,
    #[serde(rename = "P-ERM")]
    PseudoErm,
    #[serde(rename = "DR")]
    Dr,
    #[serde(rename = "TDR")]
    Tdr,
    #[serde(rename = "CDR")]
    Cdr,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::Erm,
        ObjectiveKind::PseudoErm,
        ObjectiveKind::Dr,
        ObjectiveKind::Tdr,
        ObjectiveKind::Cdr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Erm => "ERM",
            ObjectiveKind::PseudoErm => "P-ERM",
            ObjectiveKind::Dr => "DR",
            ObjectiveKind::Tdr => "TDR",
            ObjectiveKind::Cdr => "CDR",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s) || (s.eq_ignore_ascii_case("perm") && *k == ObjectiveKind::PseudoErm))
    }

    pub fn uses_teacher(self) -> bool {
        self != ObjectiveKind::Erm
    }

    /// Whether the objective carries labeled bias-correction terms.
    pub fn is_bias_corrected(self) -> bool {
        matches!(self, ObjectiveKind::Dr | ObjectiveKind::Tdr | ObjectiveKind::Cdr)
    }

    /// Whether the objective has tuning parameters estimated from data.
    pub fn is_tuned(self) -> bool {
        matches!(self, ObjectiveKind::Tdr | ObjectiveKind::Cdr)
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningMode {
    /// Re-estimated from labeled gradients while training.
    Estimated,
    /// Held at the given per-context values.
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub curriculum: bool,
    pub tuning: TuningMode,
}

impl ObjectiveSpec {
    /// Defaults used in the experiments: curriculum on for the bias-corrected
    /// objectives, estimated tuning for TDR and CDR.
    pub fn standard(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            curriculum: kind.is_bias_corrected(),
            tuning: TuningMode::Estimated,
        }
    }
}

/// Per-context weights on the pseudo-labeled terms, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TuningVector(Vec<f64>);

impl TuningVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ObjectiveError> {
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ObjectiveError::InvalidTuning { index, value });
        }
        Ok(Self(values))
    }

    /// Clips every entry into `[0, 1]`; NaN becomes 0.
    pub fn clipped(values: Vec<f64>) -> Self {
        Self(
            values
                .into_iter()
                .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
                .collect(),
        )
    }

    pub fn uniform(k: usize, value: f64) -> Result<Self, ObjectiveError> {
        Self::new(vec![value; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Linear ramp `e / E` with `e` counted from 1, so the last epoch uses the
/// unscaled bias correction.
pub fn curriculum_alpha(epoch: usize, total_epochs: usize) -> Result<f64, ObjectiveError> {
    if epoch == 0 || epoch > total_epochs {
        return Err(ObjectiveError::InvalidEpoch {
            epoch,
            total: total_epochs,
        });
    }
    Ok(epoch as f64 / total_epochs as f64)
}

/// One context's data with teacher labels attached.
#[derive(Clone, Debug, Default)]
pub struct ContextData {
    pub labeled_x: Vec<Vec<f64>>,
    pub labeled_y: Vec<Vec<f64>>,
    /// Teacher labels on the labeled covariates; empty without a teacher.
    pub labeled_f: Vec<Vec<f64>>,
    pub unlabeled_x: Vec<Vec<f64>>,
    pub unlabeled_f: Vec<Vec<f64>>,
}

impl ContextData {
    pub fn n(&self) -> usize {
        self.labeled_x.len()
    }

    pub fn big_n(&self) -> usize {
        self.unlabeled_x.len()
    }
}

/// Labeled data, unlabeled data and teacher labels, stratified by context.
#[derive(Clone, Debug)]
pub struct SemiSupervisedSet {
    contexts: Vec<ContextData>,
    has_teacher: bool,
}

impl SemiSupervisedSet {
    pub fn new<T: Teacher + ?Sized>(
        labeled: &StratifiedDataset,
        unlabeled: &StratifiedDataset,
        teacher: &T,
    ) -> Result<Self, ObjectiveError> {
        if labeled.num_contexts() != unlabeled.num_contexts() {
            return Err(ObjectiveError::ContextMismatch(
                labeled.num_contexts(),
                unlabeled.num_contexts(),
            ));
        }
        let lab_view = apply_teacher(teacher, labeled)?;
        let unl_view = apply_teacher(teacher, unlabeled)?;
        let mut lab_f = lab_view.into_labels().into_iter();
        let mut unl_f = unl_view.into_labels().into_iter();
        let mut contexts = Vec::with_capacity(labeled.num_contexts());
        for c in 0..labeled.num_contexts() {
            let (labeled_x, labeled_y) = labeled_pairs(labeled, c)?;
            contexts.push(ContextData {
                labeled_x,
                labeled_y,
                labeled_f: lab_f.next().unwrap_or_default(),
                unlabeled_x: unlabeled.context(c).iter().map(|s| s.x.clone()).collect(),
                unlabeled_f: unl_f.next().unwrap_or_default(),
            });
        }
        Ok(Self {
            contexts,
            has_teacher: true,
        })
    }

    /// Labeled data only; for ERM, which never touches the teacher.
    pub fn supervised(labeled: &StratifiedDataset) -> Result<Self, ObjectiveError> {
        let contexts = (0..labeled.num_contexts())
            .map(|c| {
                let (labeled_x, labeled_y) = labeled_pairs(labeled, c)?;
                Ok(ContextData {
                    labeled_x,
                    labeled_y,
                    ..Default::default()
                })
            })
            .collect::<Result<_, ObjectiveError>>()?;
        Ok(Self {
            contexts,
            has_teacher: false,
        })
    }

    pub fn from_contexts(contexts: Vec<ContextData>) -> Self {
        Self {
            contexts,
            has_teacher: true,
        }
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn context(&self, c: usize) -> &ContextData {
        &self.contexts[c]
    }

    pub fn contexts(&self) -> &[ContextData] {
        &self.contexts
    }

    pub fn has_teacher(&self) -> bool {
        self.has_teacher
    }

    pub fn labeled_count(&self) -> usize {
        self.contexts.iter().map(ContextData::n).sum()
    }

    pub fn unlabeled_count(&self) -> usize {
        self.contexts.iter().map(ContextData::big_n).sum()
    }

    pub fn labeled_counts(&self) -> Vec<usize> {
        self.contexts.iter().map(ContextData::n).collect()
    }

    pub fn unlabeled_counts(&self) -> Vec<usize> {
        self.contexts.iter().map(ContextData::big_n).collect()
    }

    /// `D`, context by context.
    pub fn labeled_pairs(&self) -> Vec<(&[f64], &[f64])> {
        self.contexts
            .iter()
            .flat_map(|c| zip_pairs(&c.labeled_x, &c.labeled_y))
            .collect()
    }

    /// `D^f`, context by context.
    pub fn labeled_pseudo_pairs(&self) -> Vec<(&[f64], &[f64])> {
        self.contexts
            .iter()
            .flat_map(|c| zip_pairs(&c.labeled_x, &c.labeled_f))
            .collect()
    }

    /// `D~^f`, context by context.
    pub fn unlabeled_pseudo_pairs(&self) -> Vec<(&[f64], &[f64])> {
        self.contexts
            .iter()
            .flat_map(|c| zip_pairs(&c.unlabeled_x, &c.unlabeled_f))
            .collect()
    }

    fn require_teacher(&self) -> Result<(), ObjectiveError> {
        if self.has_teacher {
            Ok(())
        } else {
            Err(ObjectiveError::MissingPseudoLabels)
        }
    }
}

fn labeled_pairs(
    d: &StratifiedDataset,
    c: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), ObjectiveError> {
    let mut xs = Vec::with_capacity(d.context_len(c));
    let mut ys = Vec::with_capacity(d.context_len(c));
    for (i, s) in d.context(c).iter().enumerate() {
        let y = s.label().ok_or(DataError::MissingLabel(i))?;
        xs.push(s.x.clone());
        ys.push(y.to_vec());
    }
    Ok((xs, ys))
}

fn zip_pairs<'a>(
    xs: &'a [Vec<f64>],
    ys: &'a [Vec<f64>],
) -> impl Iterator<Item = (&'a [f64], &'a [f64])> {
    xs.iter().zip(ys).map(|(x, y)| (x.as_slice(), y.as_slice()))
}

/// Mean loss over the labeled data.
pub fn erm_objective<M: Differentiable + ?Sized>(
    model: &M,
    theta: &[f64],
    set: &SemiSupervisedSet,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    let d = set.labeled_pairs();
    if d.is_empty() {
        return Err(ObjectiveError::EmptyBatch("no labeled samples"));
    }
    Ok(batch_mean_loss_and_grad(model, theta, &d)?)
}

/// Mean loss over labeled data plus pseudo-labeled unlabeled data.
pub fn p_erm_objective<M: Differentiable + ?Sized>(
    model: &M,
    theta: &[f64],
    set: &SemiSupervisedSet,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    set.require_teacher()?;
    let mut pool = set.labeled_pairs();
    pool.extend(set.unlabeled_pseudo_pairs());
    if pool.is_empty() {
        return Err(ObjectiveError::EmptyBatch("no samples"));
    }
    Ok(batch_mean_loss_and_grad(model, theta, &pool)?)
}

/// Pseudo-label loss on all covariates minus the labeled bias correction
/// `L(D^f) - L(D)`.
pub fn dr_objective<M: Differentiable + ?Sized>(
    model: &M,
    theta: &[f64],
    set: &SemiSupervisedSet,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    set.require_teacher()?;
    let d = set.labeled_pairs();
    if d.is_empty() {
        return Err(ObjectiveError::EmptyBatch("bias correction needs labeled samples"));
    }
    let df = set.labeled_pseudo_pairs();
    let mut all_f = df.clone();
    all_f.extend(set.unlabeled_pseudo_pairs());
    let (v_all, g_all) = batch_mean_loss_and_grad(model, theta, &all_f)?;
    let (v_df, g_df) = batch_mean_loss_and_grad(model, theta, &df)?;
    let (v_d, g_d) = batch_mean_loss_and_grad(model, theta, &d)?;
    let value = v_all - (v_df - v_d);
    let grad = g_all
        .iter()
        .zip(&g_df)
        .zip(&g_d)
        .map(|((a, f), l)| a - (f - l))
        .collect();
    Ok((value, grad))
}

/// Indices selected from one context's labeled and unlabeled lists.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextSelection {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Weighted terms of the context-aware objective
///
/// `sum_c lambda_c N_c/N L(D~^f_c) + alpha (n_c/n L(D_c) - lambda_c n_c/n L(D^f_c))`.
///
/// With `selection`, each component mean is taken over the selected indices
/// while the coefficients keep the full counts. Contexts without unlabeled
/// data drop both pseudo-label terms. A labeled covariate contributes its
/// true-label and pseudo-label terms back to back so batched models evaluate
/// it once.
pub fn cdr_terms<'a>(
    set: &'a SemiSupervisedSet,
    lambda: &TuningVector,
    alpha: f64,
    selection: Option<&[ContextSelection]>,
) -> Result<Vec<Term<'a>>, ObjectiveError> {
    let k = set.num_contexts();
    if lambda.len() != k {
        return Err(ObjectiveError::TuningLength {
            expected: k,
            found: lambda.len(),
        });
    }
    let n = set.labeled_count();
    let big_n = set.unlabeled_count();
    if n == 0 && alpha > 0.0 {
        return Err(ObjectiveError::EmptyBatch("no labeled samples"));
    }
    if n == 0 && big_n == 0 {
        return Err(ObjectiveError::EmptyBatch("no samples"));
    }
    if big_n > 0 {
        set.require_teacher()?;
    }

    let mut terms = Vec::new();
    for (c, ctx) in set.contexts().iter().enumerate() {
        let lam = if ctx.big_n() > 0 { lambda.as_slice()[c] } else { 0.0 };
        let sel = selection.map(|s| &s[c]);

        if lam > 0.0 {
            let coef = lam * ctx.big_n() as f64 / big_n as f64;
            push_component(&mut terms, ctx.big_n(), sel.map(|s| &s.unlabeled[..]), |i, w| Term {
                x: &ctx.unlabeled_x[i],
                y: &ctx.unlabeled_f[i],
                weight: coef * w,
            });
        }

        if alpha > 0.0 && ctx.n() > 0 {
            let share = ctx.n() as f64 / n as f64;
            let idx: Vec<usize> = match sel {
                Some(s) => s.labeled.clone(),
                None => (0..ctx.n()).collect(),
            };
            if idx.is_empty() {
                continue;
            }
            let w = 1.0 / idx.len() as f64;
            for i in idx {
                terms.push(Term {
                    x: &ctx.labeled_x[i],
                    y: &ctx.labeled_y[i],
                    weight: alpha * share * w,
                });
                if lam > 0.0 {
                    terms.push(Term {
                        x: &ctx.labeled_x[i],
                        y: &ctx.labeled_f[i],
                        weight: -alpha * lam * share * w,
                    });
                }
            }
        }
    }
    Ok(terms)
}

fn push_component<'a>(
    terms: &mut Vec<Term<'a>>,
    size: usize,
    selected: Option<&[usize]>,
    make: impl Fn(usize, f64) -> Term<'a>,
) {
    match selected {
        Some(idx) if !idx.is_empty() => {
            let w = 1.0 / idx.len() as f64;
            terms.extend(idx.iter().map(|&i| make(i, w)));
        }
        Some(_) => {}
        None => {
            let w = 1.0 / size as f64;
            terms.extend((0..size).map(|i| make(i, w)));
        }
    }
}

/// Context-aware doubly-robust objective with curriculum weight `alpha` on the
/// labeled terms; `alpha = 1` is the plain objective.
pub fn cdr_objective<M: Differentiable + ?Sized>(
    model: &M,
    theta: &[f64],
    set: &SemiSupervisedSet,
    lambda: &TuningVector,
    alpha: f64,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    let terms = cdr_terms(set, lambda, alpha, None)?;
    if terms.is_empty() {
        return Ok((0.0, vec![0.0; model.num_params()]));
    }
    Ok(model.weighted_loss_and_grad(theta, &terms)?)
}
