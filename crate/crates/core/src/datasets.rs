//! Labeled and unlabeled samples stratified by a discrete context.
//!
//! A [`StratifiedDataset`] keeps one list of samples per context id, in
//! insertion order. Splitting a fully labeled pool into labeled and unlabeled
//! parts masks the labels of the unlabeled part instead of deleting them, so
//! diagnostics can still look at the ground truth of synthetic data.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("sample {index} has context {context}, but only {num_contexts} contexts exist")]
    InvalidContext {
        index: usize,
        context: usize,
        num_contexts: usize,
    },
    #[error("labeled ratio {0} is outside [0, 1]")]
    InvalidRatio(f64),
    #[error("sample {0} has no label but the split requires a fully labeled pool")]
    MissingLabel(usize),
    #[error("teacher is undefined at sample {0}")]
    UndefinedTeacher(usize),
    #[error("covariate dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed dataset file: {0}")]
    Format(String),
}

/// Angle of departure: azimuth in `[-pi, pi)` and elevation in `[0, pi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleTarget {
    pub azimuth: f64,
    pub elevation: f64,
}

impl AngleTarget {
    /// Wraps the azimuth and clamps the elevation into their ranges.
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self {
            azimuth: wrap_angle(azimuth),
            elevation: elevation.clamp(0.0, PI),
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1])
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.azimuth, self.elevation]
    }
}

/// Maps any real angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*pi
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Observed(Vec<f64>),
    /// Ground truth known to the generator but hidden from learners.
    Masked(Vec<f64>),
    Missing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub context: usize,
    label: Label,
}

impl Sample {
    pub fn labeled(x: Vec<f64>, context: usize, y: Vec<f64>) -> Self {
        Self {
            x,
            context,
            label: Label::Observed(y),
        }
    }

    pub fn unlabeled(x: Vec<f64>, context: usize) -> Self {
        Self {
            x,
            context,
            label: Label::Missing,
        }
    }

    /// The label visible to a learner.
    pub fn label(&self) -> Option<&[f64]> {
        match &self.label {
            Label::Observed(y) => Some(y),
            _ => None,
        }
    }

    /// Observed or masked label; only for evaluation and diagnostics.
    pub fn ground_truth(&self) -> Option<&[f64]> {
        match &self.label {
            Label::Observed(y) | Label::Masked(y) => Some(y),
            Label::Missing => None,
        }
    }

    pub fn is_labeled(&self) -> bool {
        matches!(self.label, Label::Observed(_))
    }

    pub fn masked(self) -> Self {
        let label = match self.label {
            Label::Observed(y) => Label::Masked(y),
            other => other,
        };
        Self { label, ..self }
    }
}

/// Samples grouped by context id. Every sample sits in the list of its own
/// context and each list keeps insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct StratifiedDataset {
    strata: Vec<Vec<Sample>>,
}

impl StratifiedDataset {
    pub fn empty(num_contexts: usize) -> Self {
        Self {
            strata: vec![Vec::new(); num_contexts],
        }
    }

    pub fn partition_by_context(
        samples: Vec<Sample>,
        num_contexts: usize,
    ) -> Result<Self, DataError> {
        let mut strata = vec![Vec::new(); num_contexts];
        for (index, s) in samples.into_iter().enumerate() {
            if s.context >= num_contexts {
                return Err(DataError::InvalidContext {
                    index,
                    context: s.context,
                    num_contexts,
                });
            }
            strata[s.context].push(s);
        }
        Ok(Self { strata })
    }

    pub fn num_contexts(&self) -> usize {
        self.strata.len()
    }

    pub fn len(&self) -> usize {
        self.strata.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn context(&self, c: usize) -> &[Sample] {
        &self.strata[c]
    }

    pub fn context_len(&self, c: usize) -> usize {
        self.strata[c].len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.strata.iter().map(Vec::len).collect()
    }

    /// All samples, context by context.
    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.strata.iter().flatten()
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.strata.into_iter().flatten().collect()
    }

    /// Splits a fully labeled pool: `ceil(rho * len)` samples drawn uniformly
    /// without replacement keep their labels, the rest are masked.
    ///
    /// The draw is over the pooled data, so per-context labeled counts are
    /// random and may be zero.
    pub fn split_labeled_unlabeled(
        &self,
        rho: f64,
        seed: u64,
    ) -> Result<(StratifiedDataset, StratifiedDataset), DataError> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(DataError::InvalidRatio(rho));
        }
        if let Some(i) = self.iter().position(|s| !s.is_labeled()) {
            return Err(DataError::MissingLabel(i));
        }
        let total = self.len();
        let n = labeled_count(rho, total);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = vec![false; total];
        for i in index::sample(&mut rng, total, n) {
            keep[i] = true;
        }
        let k = self.num_contexts();
        let mut labeled = Self::empty(k);
        let mut unlabeled = Self::empty(k);
        for (s, keep) in self.iter().zip(keep) {
            if keep {
                labeled.strata[s.context].push(s.clone());
            } else {
                unlabeled.strata[s.context].push(s.clone().masked());
            }
        }
        Ok((labeled, unlabeled))
    }
}

/// `ceil(rho * total)`, ignoring floating noise such as `0.005 * 30000`
/// evaluating a hair above 150.
pub fn labeled_count(rho: f64, total: usize) -> usize {
    let raw = rho * total as f64;
    let nearest = raw.round();
    let n = if (raw - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    (n as usize).min(total)
}

/// A fixed map from covariates to pseudo-labels.
pub trait Teacher: Send + Sync {
    fn pseudo_label(&self, x: &[f64]) -> Option<Vec<f64>>;
}

impl<F> Teacher for F
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn pseudo_label(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(self(x))
    }
}

/// Teacher backed by an explicit table keyed on the exact covariate bits.
#[derive(Clone, Debug, Default)]
pub struct LookupTeacher {
    table: HashMap<Vec<u64>, Vec<f64>>,
}

impl LookupTeacher {
    pub fn insert(&mut self, x: &[f64], y: Vec<f64>) {
        self.table.insert(key(x), y);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Reads a table with header `x_1..x_d,f_1..f_m`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let d = headers.iter().filter(|h| h.starts_with("x_")).count();
        let m = headers.iter().filter(|h| h.starts_with("f_")).count();
        if d == 0 || m == 0 || d + m != headers.len() {
            return Err(DataError::Format(
                "teacher table needs columns x_1..x_d,f_1..f_m".into(),
            ));
        }
        let mut out = Self::default();
        for rec in rdr.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(parse_f64)
                .collect::<Result<Vec<_>, _>>()?;
            out.insert(&vals[..d], vals[d..].to_vec());
        }
        Ok(out)
    }
}

impl Teacher for LookupTeacher {
    fn pseudo_label(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.table.get(&key(x)).cloned()
    }
}

fn key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// A dataset seen through a teacher: `(x, f(x))` pairs in the same
/// stratification. Pseudo-labels are evaluated once at construction.
#[derive(Clone, Debug)]
pub struct PseudoLabeledView<'a> {
    dataset: &'a StratifiedDataset,
    labels: Vec<Vec<Vec<f64>>>,
}

impl<'a> PseudoLabeledView<'a> {
    pub fn new<T: Teacher + ?Sized>(
        teacher: &T,
        dataset: &'a StratifiedDataset,
    ) -> Result<Self, DataError> {
        let mut labels = Vec::with_capacity(dataset.num_contexts());
        let mut flat = 0;
        for c in 0..dataset.num_contexts() {
            let mut ctx = Vec::with_capacity(dataset.context_len(c));
            for s in dataset.context(c) {
                ctx.push(
                    teacher
                        .pseudo_label(&s.x)
                        .ok_or(DataError::UndefinedTeacher(flat))?,
                );
                flat += 1;
            }
            labels.push(ctx);
        }
        Ok(Self { dataset, labels })
    }

    pub fn dataset(&self) -> &StratifiedDataset {
        self.dataset
    }

    pub fn pseudo_labels(&self, c: usize) -> &[Vec<f64>] {
        &self.labels[c]
    }

    pub fn context(&self, c: usize) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.dataset
            .context(c)
            .iter()
            .zip(&self.labels[c])
            .map(|(s, f)| (s.x.as_slice(), f.as_slice()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        (0..self.labels.len()).flat_map(move |c| self.context(c))
    }

    /// Consumes the view, returning the cached pseudo-labels per context.
    pub fn into_labels(self) -> Vec<Vec<Vec<f64>>> {
        self.labels
    }
}

pub fn apply_teacher<'a, T: Teacher + ?Sized>(
    teacher: &T,
    dataset: &'a StratifiedDataset,
) -> Result<PseudoLabeledView<'a>, DataError> {
    PseudoLabeledView::new(teacher, dataset)
}

/// Writes samples as `x_1..x_d,context,labeled,y_1..y_m`. Masked and missing
/// labels are written as empty cells.
pub fn write_csv<'s, W: Write>(
    writer: W,
    samples: impl IntoIterator<Item = &'s Sample>,
    covariate_dim: usize,
    label_dim: usize,
) -> Result<(), DataError> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut header: Vec<String> = (1..=covariate_dim).map(|i| format!("x_{i}")).collect();
    header.push("context".into());
    header.push("labeled".into());
    header.extend((1..=label_dim).map(|i| format!("y_{i}")));
    wtr.write_record(&header)?;
    for s in samples {
        if s.x.len() != covariate_dim {
            return Err(DataError::DimensionMismatch {
                expected: covariate_dim,
                found: s.x.len(),
            });
        }
        let mut row: Vec<String> = s.x.iter().map(|v| format!("{v:?}")).collect();
        row.push(s.context.to_string());
        match s.label() {
            Some(y) => {
                if y.len() != label_dim {
                    return Err(DataError::DimensionMismatch {
                        expected: label_dim,
                        found: y.len(),
                    });
                }
                row.push("1".into());
                row.extend(y.iter().map(|v| format!("{v:?}")));
            }
            None => {
                row.push("0".into());
                row.extend(std::iter::repeat_n(String::new(), label_dim));
            }
        }
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads the format produced by [`write_csv`].
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<Sample>, DataError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let d = headers.iter().take_while(|h| h.starts_with("x_")).count();
    if headers.get(d) != Some("context") || headers.get(d + 1) != Some("labeled") {
        return Err(DataError::Format(
            "expected columns x_1..x_d,context,labeled,y_1..y_m".into(),
        ));
    }
    let m = headers.len() - d - 2;
    if headers.iter().skip(d + 2).any(|h| !h.starts_with("y_")) {
        return Err(DataError::Format("trailing columns must be y_1..y_m".into()));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let x = rec
            .iter()
            .take(d)
            .map(parse_f64)
            .collect::<Result<Vec<_>, _>>()?;
        let context: usize = rec[d]
            .trim()
            .parse()
            .map_err(|_| DataError::Format(format!("row {row}: bad context {:?}", &rec[d])))?;
        let labeled = match rec[d + 1].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(DataError::Format(format!(
                    "row {row}: labeled flag must be 0 or 1, got {other:?}"
                )))
            }
        };
        if labeled {
            let y = rec
                .iter()
                .skip(d + 2)
                .map(parse_f64)
                .collect::<Result<Vec<_>, _>>()?;
            if y.len() != m {
                return Err(DataError::Format(format!("row {row}: short label")));
            }
            out.push(Sample::labeled(x, context, y));
        } else {
            out.push(Sample::unlabeled(x, context));
        }
    }
    Ok(out)
}

fn parse_f64(s: &str) -> Result<f64, DataError> {
    s.trim()
        .parse()
        .map_err(|_| DataError::Format(format!("not a number: {s:?}")))
}
