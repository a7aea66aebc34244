//! Scalar regression on `[-1, 1]` split into two cities. The teacher is exact
//! in city A and offset by a smooth corruption in city B.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ScenarioError;
use crate::datasets::{Sample, StratifiedDataset, Teacher};

pub const CITY_A: usize = 0;
pub const CITY_B: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyTarget {
    /// Smooth daily-traffic-like profile.
    Traffic,
    /// `y = x`; handy for tests.
    Linear,
}

impl ToyTarget {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ToyTarget::Traffic => (PI * x).sin() + 0.5 * (3.0 * PI * x).cos(),
            ToyTarget::Linear => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    /// City A is `x < boundary`.
    pub boundary: f64,
    pub target: ToyTarget,
    /// Amplitude of the teacher offset in city B.
    pub corruption: f64,
    /// Standard deviation of additive label noise.
    pub noise: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            labeled: 40,
            unlabeled: 2000,
            test: 2000,
            boundary: 0.0,
            target: ToyTarget::Traffic,
            corruption: 1.0,
            noise: 0.0,
        }
    }
}

/// Ground truth and teacher of a toy world.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyWorld {
    pub spec: ToySpec,
}

impl ToyWorld {
    pub fn context(&self, x: f64) -> usize {
        if x < self.spec.boundary {
            CITY_A
        } else {
            CITY_B
        }
    }

    pub fn target(&self, x: f64) -> f64 {
        self.spec.target.eval(x)
    }

    pub fn corruption(&self, x: f64) -> f64 {
        if self.context(x) == CITY_A {
            0.0
        } else {
            self.spec.corruption * (0.6 + 0.4 * (4.0 * PI * x).sin())
        }
    }

    pub fn teacher(&self, x: f64) -> f64 {
        self.target(x) + self.corruption(x)
    }
}

impl Teacher for ToyWorld {
    fn pseudo_label(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![self.teacher(x[0])])
    }
}

#[derive(Clone, Debug)]
pub struct ToyData {
    pub labeled: StratifiedDataset,
    pub unlabeled: StratifiedDataset,
    pub test: StratifiedDataset,
    pub world: ToyWorld,
}

pub fn toy_generate(spec: &ToySpec, seed: u64) -> Result<ToyData, ScenarioError> {
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(ScenarioError::InvalidScene("noise must be non-negative".into()));
    }
    let world = ToyWorld { spec: spec.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).expect("valid deviation");
    let mut draw = |n: usize, labeled: bool| -> Result<StratifiedDataset, ScenarioError> {
        let samples = (0..n)
            .map(|_| {
                let x: f64 = rng.gen_range(-1.0..=1.0);
                let c = world.context(x);
                if labeled {
                    let mut y = world.target(x);
                    if spec.noise > 0.0 {
                        y += noise.sample(&mut rng);
                    }
                    Sample::labeled(vec![x], c, vec![y])
                } else {
                    Sample::unlabeled(vec![x], c)
                }
            })
            .collect();
        Ok(StratifiedDataset::partition_by_context(samples, 2)?)
    };
    let labeled = draw(spec.labeled, true)?;
    let unlabeled = draw(spec.unlabeled, false)?;
    let test = draw(spec.test, true)?;
    Ok(ToyData {
        labeled,
        unlabeled,
        test,
        world,
    })
}
