//! Fourier-feature MLP with hand-written backpropagation.
//!
//! Parameters live in one flat `Vec<f64>`. Each dense layer stores its weight
//! matrix row-major as `[out][in]`, followed by its bias vector; layers are
//! laid out from input to output.
//!
//! Two evaluation paths exist. [`FourierMlp::loss_and_grad`] runs one sample
//! through plain loops; [`Differentiable::weighted_loss_and_grad`] batches
//! rows through matrix products and is what training uses. Tests keep the two
//! in agreement.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{wrap_angle, AngleTarget};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-sample loss on the network output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Sum over outputs of `1 - cos(pred - target)`.
    Angular,
    /// Sum over outputs of `(pred - target)^2`.
    Squared,
}

impl LossKind {
    /// Loss value; writes `d loss / d out` into `dout` when given.
    pub fn eval(self, out: &[f64], y: &[f64], mut dout: Option<&mut [f64]>) -> f64 {
        let mut total = 0.0;
        for k in 0..out.len() {
            let diff = out[k] - y[k];
            let (v, g) = match self {
                LossKind::Angular => (1.0 - diff.cos(), diff.sin()),
                LossKind::Squared => (diff * diff, 2.0 * diff),
            };
            total += v;
            if let Some(d) = dout.as_deref_mut() {
                d[k] = g;
            }
        }
        total
    }

    /// Mean absolute error over outputs; angular errors are wrapped first.
    pub fn abs_error(self, out: &[f64], y: &[f64]) -> f64 {
        let sum: f64 = out
            .iter()
            .zip(y)
            .map(|(o, t)| match self {
                LossKind::Angular => wrap_angle(o - t).abs(),
                LossKind::Squared => (o - t).abs(),
            })
            .sum();
        sum / out.len() as f64
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Angular => "angular",
            LossKind::Squared => "squared",
        }
    }
}

/// `1 - cos` on azimuth plus `1 - cos` on elevation.
pub fn angular_loss(pred: &AngleTarget, target: &AngleTarget) -> f64 {
    (1.0 - (pred.azimuth - target.azimuth).cos()) + (1.0 - (pred.elevation - target.elevation).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Fourier features per coordinate (each yields a cos and a sin).
    pub fourier_features: usize,
    pub sigma: f64,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl Architecture {
    /// 3-D position in, azimuth and elevation out.
    pub fn beamforming() -> Self {
        Self {
            input_dim: 3,
            fourier_features: 20,
            sigma: 20.0,
            hidden: vec![128, 64],
            output_dim: 2,
        }
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.fourier_features * self.input_dim
    }

    /// `(out, in)` for every dense layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.feature_dim()];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    /// Angular frequencies `2 pi sigma^(j/m)` for `j = 0..m`.
    pub fn frequencies(&self) -> Vec<f64> {
        let m = self.fourier_features as f64;
        (0..self.fourier_features)
            .map(|j| 2.0 * PI * self.sigma.powf(j as f64 / m))
            .collect()
    }
}

/// Concatenates `(cos(w_j v), sin(w_j v))` for each coordinate `v`, with
/// `w_j = 2 pi sigma^(j/m)`.
pub fn fourier_features(x: &[f64], m: usize, sigma: f64) -> Vec<f64> {
    let arch = Architecture {
        input_dim: x.len(),
        fourier_features: m,
        sigma,
        hidden: vec![],
        output_dim: 1,
    };
    let mut out = vec![0.0; arch.feature_dim()];
    write_features(x, &arch.frequencies(), &mut out);
    out
}

fn write_features(x: &[f64], freqs: &[f64], out: &mut [f64]) {
    let mut k = 0;
    for &v in x {
        for &w in freqs {
            let (s, c) = (w * v).sin_cos();
            out[k] = c;
            out[k + 1] = s;
            k += 2;
        }
    }
}

/// Weighted loss term `weight * loss(theta | x, y)`.
#[derive(Clone, Copy, Debug)]
pub struct Term<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub weight: f64,
}

/// A parametric predictor with per-sample loss gradients.
pub trait Differentiable: Sync {
    fn num_params(&self) -> usize;

    fn loss_kind(&self) -> LossKind;

    fn predict(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>, ModelError>;

    fn loss_and_grad(&self, theta: &[f64], x: &[f64], y: &[f64])
        -> Result<(f64, Vec<f64>), ModelError>;

    fn loss(&self, theta: &[f64], x: &[f64], y: &[f64]) -> Result<f64, ModelError> {
        let out = self.predict(theta, x)?;
        Ok(self.loss_kind().eval(&out, y, None))
    }

    /// `sum_t w_t * loss(x_t, y_t)` and its gradient.
    fn weighted_loss_and_grad(
        &self,
        theta: &[f64],
        terms: &[Term<'_>],
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let mut value = 0.0;
        let mut grad = vec![0.0; self.num_params()];
        for t in terms {
            let (l, g) = self.loss_and_grad(theta, t.x, t.y)?;
            value += t.weight * l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += t.weight * b;
            }
        }
        Ok((value, grad))
    }
}

/// One gradient per sample.
pub fn per_sample_grads<M: Differentiable + ?Sized>(
    model: &M,
    theta: &[f64],
    samples: &[(&[f64], &[f64])],
) -> Result<Vec<Vec<f64>>, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    samples
        .iter()
        .map(|(x, y)| model.loss_and_grad(theta, x, y).map(|(_, g)| g))
        .collect()
}

/// Mean loss and mean gradient over a batch.
pub fn batch_mean_loss_and_grad<M: Differentiable + ?Sized>(
    model: &M,
    theta: &[f64],
    samples: &[(&[f64], &[f64])],
) -> Result<(f64, Vec<f64>), ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let w = 1.0 / samples.len() as f64;
    let terms: Vec<Term> = samples
        .iter()
        .map(|&(x, y)| Term { x, y, weight: w })
        .collect();
    model.weighted_loss_and_grad(theta, &terms)
}

const CHUNK_ROWS: usize = 512;

/// Fourier feature layer, ReLU hidden layers and a linear output layer.
#[derive(Clone, Debug)]
pub struct FourierMlp {
    arch: Architecture,
    loss: LossKind,
    freqs: Vec<f64>,
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    num_params: usize,
}

impl FourierMlp {
    pub fn new(arch: Architecture, loss: LossKind) -> Self {
        let freqs = arch.frequencies();
        let shapes = arch.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for &(o, i) in &shapes {
            offsets.push(off);
            off += o * i + o;
        }
        Self {
            arch,
            loss,
            freqs,
            shapes,
            offsets,
            num_params: off,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Uniform weights in `+-sqrt(1/fan_in)`, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.num_params];
        for (l, &(o, i)) in self.shapes.iter().enumerate() {
            let bound = (1.0 / i as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let start = self.offsets[l];
            for w in &mut theta[start..start + o * i] {
                *w = dist.sample(&mut rng);
            }
        }
        theta
    }

    pub fn forward_angle(&self, theta: &[f64], x: &[f64]) -> Result<AngleTarget, ModelError> {
        let out = self.predict(theta, x)?;
        Ok(AngleTarget {
            azimuth: out[0],
            elevation: out[1],
        })
    }

    fn weights<'t>(&self, theta: &'t [f64], l: usize) -> (ArrayView2<'t, f64>, ArrayView1<'t, f64>) {
        let (o, i) = self.shapes[l];
        let start = self.offsets[l];
        let w = ArrayView2::from_shape((o, i), &theta[start..start + o * i]).expect("shape");
        let b = ArrayView1::from(&theta[start + o * i..start + o * i + o]);
        (w, b)
    }

    fn weights_mut<'t>(
        &self,
        grad: &'t mut [f64],
        l: usize,
    ) -> (ArrayViewMut2<'t, f64>, ArrayViewMut1<'t, f64>) {
        let (o, i) = self.shapes[l];
        let start = self.offsets[l];
        let (w, b) = grad[start..start + o * i + o].split_at_mut(o * i);
        (
            ArrayViewMut2::from_shape((o, i), w).expect("shape"),
            ArrayViewMut1::from(b),
        )
    }

    fn check_dims(&self, theta: &[f64], x: &[f64]) -> Result<(), ModelError> {
        if theta.len() != self.num_params {
            return Err(ModelError::DimensionMismatch {
                expected: self.num_params,
                found: theta.len(),
            });
        }
        if x.len() != self.arch.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.arch.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Activations of every layer for one sample: features, hidden outputs
    /// after ReLU, then the raw network output.
    fn forward_single(&self, theta: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let mut feats = vec![0.0; self.arch.feature_dim()];
        write_features(x, &self.freqs, &mut feats);
        let mut acts = vec![feats];
        let last = self.shapes.len() - 1;
        for (l, &(o, i)) in self.shapes.iter().enumerate() {
            let start = self.offsets[l];
            let w = &theta[start..start + o * i];
            let b = &theta[start + o * i..start + o * i + o];
            let input = acts.last().unwrap();
            let mut z: Vec<f64> = (0..o)
                .map(|r| {
                    let row = &w[r * i..(r + 1) * i];
                    b[r] + row.iter().zip(input).map(|(a, v)| a * v).sum::<f64>()
                })
                .collect();
            if l != last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    fn weighted_batched(
        &self,
        theta: &[f64],
        terms: &[Term<'_>],
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let mut grad = vec![0.0; self.num_params];
        let mut value = 0.0;

        // consecutive terms sharing a covariate slice share one row
        let mut rows: Vec<(usize, usize)> = Vec::new();
        let mut t = 0;
        while t < terms.len() {
            self.check_dims(theta, terms[t].x)?;
            let mut e = t + 1;
            while e < terms.len() && std::ptr::eq(terms[e].x, terms[t].x) {
                e += 1;
            }
            rows.push((t, e));
            t = e;
        }

        let nl = self.shapes.len();
        let fd = self.arch.feature_dim();
        let od = self.arch.output_dim;
        let mut dout_row = vec![0.0; od];
        for chunk in rows.chunks(CHUNK_ROWS) {
            let r = chunk.len();
            let mut feats = Array2::<f64>::zeros((r, fd));
            for (k, &(t0, _)) in chunk.iter().enumerate() {
                write_features(
                    terms[t0].x,
                    &self.freqs,
                    feats.row_mut(k).as_slice_mut().expect("contiguous"),
                );
            }
            let mut acts: Vec<Array2<f64>> = Vec::with_capacity(nl + 1);
            acts.push(feats);
            for l in 0..nl {
                let (w, b) = self.weights(theta, l);
                let mut z = Array2::<f64>::zeros((r, w.nrows()));
                general_mat_mul(1.0, &acts[l], &w.t(), 0.0, &mut z);
                z += &b;
                if l + 1 != nl {
                    z.mapv_inplace(|v| v.max(0.0));
                }
                acts.push(z);
            }

            let out = &acts[nl];
            if out.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite("network output"));
            }
            let mut delta = Array2::<f64>::zeros((r, od));
            for (k, &(t0, t1)) in chunk.iter().enumerate() {
                let o = out.row(k);
                let o = o.as_slice().expect("contiguous");
                let mut d = delta.row_mut(k);
                for term in &terms[t0..t1] {
                    let l = self.loss.eval(o, term.y, Some(&mut dout_row));
                    value += term.weight * l;
                    for (dv, g) in d.iter_mut().zip(&dout_row) {
                        *dv += term.weight * g;
                    }
                }
            }

            for l in (0..nl).rev() {
                let (w, _) = self.weights(theta, l);
                {
                    let (mut gw, mut gb) = self.weights_mut(&mut grad, l);
                    general_mat_mul(1.0, &delta.t(), &acts[l], 1.0, &mut gw);
                    gb += &delta.sum_axis(Axis(0));
                }
                if l > 0 {
                    let mut prev = Array2::<f64>::zeros((r, w.ncols()));
                    general_mat_mul(1.0, &delta, &w, 0.0, &mut prev);
                    // acts[l] is post-ReLU, so positive entries mark the active units
                    ndarray::Zip::from(&mut prev)
                        .and(&acts[l])
                        .for_each(|d, &a| {
                            if a <= 0.0 {
                                *d = 0.0;
                            }
                        });
                    delta = prev;
                }
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite("gradient"));
        }
        Ok((value, grad))
    }
}

impl Differentiable for FourierMlp {
    fn num_params(&self) -> usize {
        self.num_params
    }

    fn loss_kind(&self) -> LossKind {
        self.loss
    }

    fn predict(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dims(theta, x)?;
        let out = self.forward_single(theta, x).pop().expect("output layer");
        if out.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("network output"));
        }
        Ok(out)
    }

    fn loss_and_grad(
        &self,
        theta: &[f64],
        x: &[f64],
        y: &[f64],
    ) -> Result<(f64, Vec<f64>), ModelError> {
        self.check_dims(theta, x)?;
        let acts = self.forward_single(theta, x);
        let nl = self.shapes.len();
        let out = &acts[nl];
        if out.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("network output"));
        }
        let mut delta = vec![0.0; out.len()];
        let loss = self.loss.eval(out, y, Some(&mut delta));

        let mut grad = vec![0.0; self.num_params];
        for l in (0..nl).rev() {
            let (o, i) = self.shapes[l];
            let start = self.offsets[l];
            let input = &acts[l];
            for r in 0..o {
                let gw = &mut grad[start + r * i..start + (r + 1) * i];
                for (g, a) in gw.iter_mut().zip(input) {
                    *g = delta[r] * a;
                }
                grad[start + o * i + r] = delta[r];
            }
            if l > 0 {
                let w = &theta[start..start + o * i];
                let prev: Vec<f64> = (0..i)
                    .map(|c| {
                        if input[c] <= 0.0 {
                            0.0
                        } else {
                            (0..o).map(|r| delta[r] * w[r * i + c]).sum()
                        }
                    })
                    .collect();
                delta = prev;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite("gradient"));
        }
        Ok((loss, grad))
    }

    fn weighted_loss_and_grad(
        &self,
        theta: &[f64],
        terms: &[Term<'_>],
    ) -> Result<(f64, Vec<f64>), ModelError> {
        self.weighted_batched(theta, terms)
    }
}

/// Predicts `theta` regardless of the covariate.
#[derive(Clone, Debug)]
pub struct ConstantPredictor {
    pub output_dim: usize,
    pub loss: LossKind,
}

impl Differentiable for ConstantPredictor {
    fn num_params(&self) -> usize {
        self.output_dim
    }

    fn loss_kind(&self) -> LossKind {
        self.loss
    }

    fn predict(&self, theta: &[f64], _x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(theta.to_vec())
    }

    fn loss_and_grad(
        &self,
        theta: &[f64],
        _x: &[f64],
        y: &[f64],
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let mut g = vec![0.0; theta.len()];
        let l = self.loss.eval(theta, y, Some(&mut g));
        Ok((l, g))
    }
}

/// Scalar affine model `theta[0] + sum_k theta[k + 1] * x[k]`.
#[derive(Clone, Debug)]
pub struct AffineModel {
    pub input_dim: usize,
    pub loss: LossKind,
}

impl Differentiable for AffineModel {
    fn num_params(&self) -> usize {
        self.input_dim + 1
    }

    fn loss_kind(&self) -> LossKind {
        self.loss
    }

    fn predict(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(vec![theta[0] + theta[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()])
    }

    fn loss_and_grad(
        &self,
        theta: &[f64],
        x: &[f64],
        y: &[f64],
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let out = self.predict(theta, x)?;
        let mut d = [0.0];
        let l = self.loss.eval(&out, y, Some(&mut d));
        let mut g = Vec::with_capacity(theta.len());
        g.push(d[0]);
        g.extend(x.iter().map(|v| d[0] * v));
        Ok((l, g))
    }
}

/// Architecture descriptor plus flat parameters, as stored in checkpoints.
///
/// Checkpoint layout: a UTF-8 text header of `key = value` lines
///
/// ```text
/// cdrlab-checkpoint 1
/// input_dim = 3
/// fourier_features = 20
/// sigma = 20
/// hidden = 128,64
/// output_dim = 2
/// loss = angular
/// params = 23874
/// end
/// ```
///
/// followed immediately by `params` little-endian `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub loss: LossKind,
    pub theta: Vec<f64>,
}

const CHECKPOINT_MAGIC: &str = "cdrlab-checkpoint 1";

impl ModelParams {
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let hidden: Vec<String> = self.arch.hidden.iter().map(usize::to_string).collect();
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "input_dim = {}", self.arch.input_dim)?;
        writeln!(w, "fourier_features = {}", self.arch.fourier_features)?;
        writeln!(w, "sigma = {:?}", self.arch.sigma)?;
        writeln!(w, "hidden = {}", hidden.join(","))?;
        writeln!(w, "output_dim = {}", self.arch.output_dim)?;
        writeln!(w, "loss = {}", self.loss.name())?;
        writeln!(w, "params = {}", self.theta.len())?;
        writeln!(w, "end")?;
        for v in &self.theta {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(bad("missing header"));
        }
        let mut fields = std::collections::HashMap::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("truncated header"));
            }
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            let (k, v) = l.split_once(" = ").ok_or_else(|| bad("bad header line"))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(&format!("missing {k}")));
        let num = |k: &str| -> Result<usize, ModelError> {
            get(k)?.parse().map_err(|_| bad(&format!("bad {k}")))
        };
        let hidden_field = get("hidden")?;
        let hidden = if hidden_field.is_empty() {
            vec![]
        } else {
            hidden_field
                .split(',')
                .map(|h| h.parse().map_err(|_| bad("bad hidden")))
                .collect::<Result<Vec<usize>, _>>()?
        };
        let arch = Architecture {
            input_dim: num("input_dim")?,
            fourier_features: num("fourier_features")?,
            sigma: get("sigma")?.parse().map_err(|_| bad("bad sigma"))?,
            hidden,
            output_dim: num("output_dim")?,
        };
        let loss = match get("loss")?.as_str() {
            "angular" => LossKind::Angular,
            "squared" => LossKind::Squared,
            _ => return Err(bad("unknown loss")),
        };
        let p = num("params")?;
        if p != arch.num_params() {
            return Err(bad("parameter count does not match architecture"));
        }
        let mut bytes = vec![0u8; p * 8];
        r.read_exact(&mut bytes)?;
        let theta = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { arch, loss, theta })
    }

    pub fn network(&self) -> FourierMlp {
        FourierMlp::new(self.arch.clone(), self.loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> FourierMlp {
        FourierMlp::new(
            Architecture {
                input_dim: 2,
                fourier_features: 3,
                sigma: 4.0,
                hidden: vec![6, 5],
                output_dim: 2,
            },
            LossKind::Angular,
        )
    }

    #[test]
    fn features_at_origin_and_quarter_period() {
        let f = fourier_features(&[0.0, 0.0, 0.0], 20, 20.0);
        assert_eq!(f.len(), 120);
        for pair in f.chunks(2) {
            assert_eq!(pair, [1.0, 0.0]);
        }
        let f = fourier_features(&[0.25], 20, 20.0);
        assert!(f[0].abs() < 1e-15);
        assert!((f[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn paper_architecture_size() {
        let a = Architecture::beamforming();
        assert_eq!(a.feature_dim(), 120);
        assert_eq!(a.num_params(), 120 * 128 + 128 + 128 * 64 + 64 + 64 * 2 + 2);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let net = FourierMlp::new(Architecture::beamforming(), LossKind::Angular);
        let theta = vec![0.0; net.num_params()];
        let out = net.forward_angle(&theta, &[0.3, 0.1, 0.2]).unwrap();
        assert_eq!((out.azimuth, out.elevation), (0.0, 0.0));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let net = small();
        let a = net.init_params(3);
        assert_eq!(a, net.init_params(3));
        assert_ne!(a, net.init_params(4));
        let x = [0.2, 0.7];
        assert_eq!(
            net.predict(&a, &x).unwrap(),
            net.predict(&net.init_params(3), &x).unwrap()
        );
        let (o, i) = net.shapes[0];
        let bound = (1.0 / i as f64).sqrt();
        assert!(a[..o * i].iter().all(|w| w.abs() <= bound));
        assert!(a[o * i..o * i + o].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn angular_loss_examples() {
        let t = AngleTarget::new(0.3, 1.0);
        assert_eq!(angular_loss(&t, &t), 0.0);
        let p = AngleTarget { azimuth: 0.3 + PI, elevation: 1.0 };
        assert!((angular_loss(&p, &t) - 2.0).abs() < 1e-12);
        let p = AngleTarget { azimuth: 0.3 + PI / 2.0, elevation: 1.0 + PI / 2.0 };
        assert!((angular_loss(&p, &t) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn angular_loss_is_periodic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = AngleTarget { azimuth: rng.gen_range(-5.0..5.0), elevation: rng.gen_range(-5.0..5.0) };
            let t = AngleTarget { azimuth: rng.gen_range(-4.0..4.0), elevation: rng.gen_range(0.0..3.0) };
            let shifted = AngleTarget { azimuth: p.azimuth + 2.0 * PI, ..p };
            assert!((angular_loss(&shifted, &t) - angular_loss(&p, &t)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_vanishes_at_exact_fit() {
        let net = small();
        let theta = net.init_params(9);
        let x = [0.4, -0.3];
        let y = net.predict(&theta, &x).unwrap();
        let (l, g) = net.loss_and_grad(&theta, &x, &y).unwrap();
        assert_eq!(l, 0.0);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-8);
    }

    #[test]
    fn per_sample_and_batch_paths_agree() {
        let net = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = net.init_params(2);
        let xs: Vec<Vec<f64>> = (0..37).map(|_| vec![rng.gen(), rng.gen()]).collect();
        let ys: Vec<Vec<f64>> = (0..37).map(|_| vec![rng.gen_range(-3.0..3.0), rng.gen()]).collect();
        let samples: Vec<(&[f64], &[f64])> =
            xs.iter().zip(&ys).map(|(x, y)| (x.as_slice(), y.as_slice())).collect();

        let per = per_sample_grads(&net, &theta, &samples).unwrap();
        let (mean_loss, mean_grad) = batch_mean_loss_and_grad(&net, &theta, &samples).unwrap();
        let n = samples.len() as f64;
        let mut loss_sum = 0.0;
        for (x, y) in &samples {
            loss_sum += net.loss(&theta, x, y).unwrap();
        }
        assert!((mean_loss - loss_sum / n).abs() < 1e-12);
        for k in 0..net.num_params() {
            let m: f64 = per.iter().map(|g| g[k]).sum::<f64>() / n;
            assert!((m - mean_grad[k]).abs() < 1e-12, "coordinate {k}");
        }

        let single = per_sample_grads(&net, &theta, &samples[..1]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0], net.loss_and_grad(&theta, samples[0].0, samples[0].1).unwrap().1);
        let (l1, g1) = batch_mean_loss_and_grad(&net, &theta, &samples[..1]).unwrap();
        let (l2, g2) = batch_mean_loss_and_grad(&net, &theta, &[samples[0], samples[0]]).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        assert!(g1.iter().zip(&g2).all(|(a, b)| (a - b).abs() < 1e-15));
        let dup = per_sample_grads(&net, &theta, &[samples[0], samples[0]]).unwrap();
        assert_eq!(dup[0], dup[1]);
        assert!(matches!(
            batch_mean_loss_and_grad(&net, &theta, &[]),
            Err(ModelError::EmptyBatch)
        ));
    }

    #[test]
    fn shared_rows_match_separate_terms() {
        let net = small();
        let theta = net.init_params(8);
        let x = vec![0.1, 0.9];
        let x_copy = x.clone();
        let (y1, y2) = (vec![0.5, 1.0], vec![-1.0, 2.0]);
        let shared = [
            Term { x: &x, y: &y1, weight: 0.7 },
            Term { x: &x, y: &y2, weight: -0.2 },
        ];
        let separate = [
            Term { x: &x, y: &y1, weight: 0.7 },
            Term { x: &x_copy, y: &y2, weight: -0.2 },
        ];
        let (a, ga) = net.weighted_loss_and_grad(&theta, &shared).unwrap();
        let (b, gb) = net.weighted_loss_and_grad(&theta, &separate).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(ga.iter().zip(&gb).all(|(p, q)| (p - q).abs() < 1e-14));
    }

    #[test]
    fn non_finite_is_reported() {
        let net = small();
        let mut theta = net.init_params(1);
        let last = theta.len() - 1;
        theta[last] = f64::NAN;
        assert!(matches!(
            net.predict(&theta, &[0.0, 0.0]),
            Err(ModelError::NonFinite(_))
        ));
        assert!(net.loss_and_grad(&theta, &[0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = small();
        let params = ModelParams {
            arch: net.architecture().clone(),
            loss: LossKind::Angular,
            theta: net.init_params(11),
        };
        let mut buf = Vec::new();
        params.write_checkpoint(&mut buf).unwrap();
        let back = ModelParams::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, params);
        buf.truncate(buf.len() - 3);
        assert!(ModelParams::read_checkpoint(buf.as_slice()).is_err());
    }
}
