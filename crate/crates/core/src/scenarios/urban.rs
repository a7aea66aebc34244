//! Planar urban scene: rectangular buildings, one base station, devices in
//! free space. Labels are the departure angles of the strongest propagation
//! path; the teacher always answers with the direct ray.

use std::path::Path as FsPath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{Point, Rect};
use super::ScenarioError;
use crate::datasets::{AngleTarget, Sample, StratifiedDataset, Teacher};
use crate::trainer::SpatialOracle;

pub const LOS: usize = 1;
pub const NLOS: usize = 0;

/// Power loss factor of one specular bounce.
pub const REFLECTION_ATTENUATION: f64 = 0.3;

pub const DEFAULT_TRAIN_SIZE: usize = 30_000;
pub const DEFAULT_TEST_SIZE: usize = 5_975;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UrbanScene {
    /// `[xmin, ymin, xmax, ymax]` in meters.
    pub bounds: Rect,
    pub bs: Point,
    pub bs_height: f64,
    pub device_height: f64,
    pub buildings: Vec<Rect>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PathKind {
    Direct,
    Reflected { building: usize, wall: usize },
}

/// A propagation path from the base station to a device.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagationPath {
    pub kind: PathKind,
    /// The first point the path reaches after the base station.
    pub first_hop: Point,
    /// Unfolded horizontal length.
    pub length: f64,
    pub power: f64,
}

impl UrbanScene {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::InvalidScene(m));
        if !self.bounds.is_valid() {
            return bad("bounds are empty".into());
        }
        for (i, b) in self.buildings.iter().enumerate() {
            if !b.is_valid() {
                return bad(format!("building {i} is empty"));
            }
            if !self.bounds.contains_rect(b) {
                return bad(format!("building {i} extends outside the bounds"));
            }
            if b.contains(self.bs) {
                return bad(format!("base station is inside building {i}"));
            }
        }
        if !self.bounds.contains(self.bs) {
            return bad("base station is outside the bounds".into());
        }
        if !(self.bs_height.is_finite() && self.device_height.is_finite()) {
            return bad("heights must be finite".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let scene: UrbanScene =
            toml::from_str(text).map_err(|e| ScenarioError::InvalidScene(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    pub fn read(path: &FsPath) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// 600 m x 400 m with eleven buildings and an off-center base station;
    /// about half of the free space is out of sight.
    pub fn default_scene() -> Self {
        let r = Rect::new;
        Self {
            bounds: r(0.0, 0.0, 600.0, 400.0),
            bs: Point::new(132.0, 223.0),
            bs_height: 25.0,
            device_height: 1.5,
            buildings: vec![
                r(281.0, 244.0, 314.0, 295.0),
                r(252.0, 23.0, 297.0, 55.0),
                r(82.0, 115.0, 120.0, 190.0),
                r(443.0, 91.0, 477.0, 155.0),
                r(54.0, 44.0, 138.0, 83.0),
                r(500.0, 55.0, 566.0, 87.0),
                r(12.0, 187.0, 50.0, 259.0),
                r(194.0, 202.0, 231.0, 275.0),
                r(341.0, 243.0, 373.0, 298.0),
                r(490.0, 237.0, 530.0, 307.0),
            ],
        }
    }

    /// A random scene with the default extent, 8 to 12 non-overlapping
    /// buildings and an NLOS share of free space between 40% and 60%.
    pub fn random(seed: u64) -> Result<Self, ScenarioError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1000 {
            let scene = Self::random_layout(&mut rng);
            if (0.4..=0.6).contains(&scene.nlos_fraction(2000, rng.gen())?) {
                return Ok(scene);
            }
        }
        Err(ScenarioError::Generation("no layout met the visibility target".into()))
    }

    fn random_layout<R: Rng>(rng: &mut R) -> Self {
        let bounds = Rect::new(0.0, 0.0, 600.0, 400.0);
        let count = rng.gen_range(8..=12);
        let bs = Point::new(rng.gen_range(150.0..260.0), rng.gen_range(120.0..280.0));
        let near_bs = Rect::new(bs.x - 20.0, bs.y - 20.0, bs.x + 20.0, bs.y + 20.0);
        let mut buildings: Vec<Rect> = Vec::with_capacity(count);
        while buildings.len() < count {
            let w = rng.gen_range(30.0..90.0);
            let h = rng.gen_range(30.0..90.0);
            let x = rng.gen_range(10.0..bounds.xmax - 10.0 - w);
            let y = rng.gen_range(10.0..bounds.ymax - 10.0 - h);
            let b = Rect::new(x, y, x + w, y + h);
            let padded = Rect::new(b.xmin - 10.0, b.ymin - 10.0, b.xmax + 10.0, b.ymax + 10.0);
            if !padded.intersects(&near_bs) && buildings.iter().all(|o| !padded.intersects(o)) {
                buildings.push(b);
            }
        }
        Self {
            bounds,
            bs,
            bs_height: 25.0,
            device_height: 1.5,
            buildings,
        }
    }

    pub fn in_free_space(&self, p: Point) -> bool {
        self.bounds.contains(p) && !self.buildings.iter().any(|b| b.contains(p))
    }

    fn check_position(&self, p: Point) -> Result<(), ScenarioError> {
        if self.in_free_space(p) {
            Ok(())
        } else {
            Err(ScenarioError::InvalidPosition { x: p.x, y: p.y })
        }
    }

    fn segment_clear(&self, a: Point, b: Point) -> bool {
        !self.buildings.iter().any(|r| r.blocks_segment(a, b))
    }

    pub fn los_check(&self, device: Point) -> Result<bool, ScenarioError> {
        self.check_position(device)?;
        Ok(self.segment_clear(self.bs, device))
    }

    pub fn context(&self, device: Point) -> Result<usize, ScenarioError> {
        Ok(if self.los_check(device)? { LOS } else { NLOS })
    }

    fn direct_path(&self, device: Point) -> PropagationPath {
        let length = self.bs.dist(device);
        PropagationPath {
            kind: PathKind::Direct,
            first_hop: device,
            length,
            power: 1.0 / length.powi(2),
        }
    }

    /// Every valid single-bounce path found by mirroring the base station in
    /// each building wall.
    pub fn reflection_paths(&self, device: Point) -> Result<Vec<PropagationPath>, ScenarioError> {
        self.check_position(device)?;
        let mut out = Vec::new();
        for (bi, b) in self.buildings.iter().enumerate() {
            for (wi, wall) in b.walls().iter().enumerate() {
                if wall.side(self.bs) <= 0.0 || wall.side(device) <= 0.0 {
                    continue;
                }
                let image = wall.mirror(self.bs);
                let Some(hit) = wall.crossing(image, device) else {
                    continue;
                };
                if !self.segment_clear(self.bs, hit) || !self.segment_clear(hit, device) {
                    continue;
                }
                let length = image.dist(device);
                out.push(PropagationPath {
                    kind: PathKind::Reflected { building: bi, wall: wi },
                    first_hop: hit,
                    length,
                    power: REFLECTION_ATTENUATION / length.powi(2),
                });
            }
        }
        Ok(out)
    }

    /// The path that determines the label: the direct ray in line of sight,
    /// otherwise the strongest reflection, otherwise the direct ray.
    pub fn strongest_path(&self, device: Point) -> Result<PropagationPath, ScenarioError> {
        if self.los_check(device)? {
            return Ok(self.direct_path(device));
        }
        let best = self
            .reflection_paths(device)?
            .into_iter()
            .fold(None::<PropagationPath>, |best, p| match best {
                Some(b) if b.power >= p.power => Some(b),
                _ => Some(p),
            });
        Ok(best.unwrap_or_else(|| self.direct_path(device)))
    }

    /// Azimuth east-zero counter-clockwise in `[-pi, pi)`; elevation is
    /// `pi/2 + atan((h_bs - h_dev) / length)`, so `pi/2` is horizontal and
    /// larger values point downward.
    fn angles(&self, path: &PropagationPath) -> AngleTarget {
        let d = path.first_hop.sub(self.bs);
        let elevation = std::f64::consts::FRAC_PI_2
            + ((self.bs_height - self.device_height) / path.length).atan();
        AngleTarget::new(d.y.atan2(d.x), elevation)
    }

    pub fn ground_truth_aod(&self, device: Point) -> Result<AngleTarget, ScenarioError> {
        Ok(self.angles(&self.strongest_path(device)?))
    }

    /// Direct-ray angles, ignoring every building.
    pub fn teacher_aod(&self, device: Point) -> Result<AngleTarget, ScenarioError> {
        self.check_position(device)?;
        Ok(self.angles(&self.direct_path(device)))
    }

    fn scale(&self) -> f64 {
        self.bounds.width().max(self.bounds.height())
    }

    /// Normalized covariate `(x - xmin, y - ymin, h_dev) / max(width, height)`.
    pub fn covariate(&self, p: Point) -> Vec<f64> {
        let s = self.scale();
        vec![
            (p.x - self.bounds.xmin) / s,
            (p.y - self.bounds.ymin) / s,
            self.device_height / s,
        ]
    }

    pub fn position(&self, covariate: &[f64]) -> Point {
        let s = self.scale();
        Point::new(
            covariate[0] * s + self.bounds.xmin,
            covariate[1] * s + self.bounds.ymin,
        )
    }

    /// Uniform draw from free space by rejection.
    pub fn sample_position<R: Rng>(&self, rng: &mut R) -> Result<Point, ScenarioError> {
        const MAX_ATTEMPTS: usize = 10_000;
        for _ in 0..MAX_ATTEMPTS {
            let p = Point::new(
                rng.gen_range(self.bounds.xmin..self.bounds.xmax),
                rng.gen_range(self.bounds.ymin..self.bounds.ymax),
            );
            if self.in_free_space(p) {
                return Ok(p);
            }
        }
        Err(ScenarioError::Generation(format!(
            "no free position found in {MAX_ATTEMPTS} attempts"
        )))
    }

    /// Fraction of free space without line of sight, by Monte Carlo.
    pub fn nlos_fraction(&self, samples: usize, seed: u64) -> Result<f64, ScenarioError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nlos = 0;
        for _ in 0..samples {
            if !self.los_check(self.sample_position(&mut rng)?)? {
                nlos += 1;
            }
        }
        Ok(nlos as f64 / samples as f64)
    }
}

/// Generated urban datasets, fully labeled, stratified by LOS/NLOS.
#[derive(Clone, Debug)]
pub struct UrbanData {
    pub train: StratifiedDataset,
    pub test: StratifiedDataset,
}

fn urban_sample(scene: &UrbanScene, rng: &mut ChaCha8Rng) -> Result<Sample, ScenarioError> {
    let p = scene.sample_position(rng)?;
    // label the exact point the covariate decodes to, so that the teacher
    // (which sees only the covariate) agrees bit for bit in line of sight
    let x = scene.covariate(p);
    let q = scene.position(&x);
    let q = if scene.in_free_space(q) { q } else { p };
    let y = scene.ground_truth_aod(q)?;
    Ok(Sample::labeled(x, scene.context(q)?, y.to_vec()))
}

pub fn urban_generate(
    scene: &UrbanScene,
    train_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<UrbanData, ScenarioError> {
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Result<StratifiedDataset, ScenarioError> {
        let samples = (0..n)
            .map(|_| urban_sample(scene, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(StratifiedDataset::partition_by_context(samples, 2)?)
    };
    let train = draw(train_size)?;
    let test = draw(test_size)?;
    Ok(UrbanData { train, test })
}

/// Direct-ray teacher operating on normalized covariates.
#[derive(Clone, Debug)]
pub struct UrbanTeacher {
    pub scene: UrbanScene,
}

impl Teacher for UrbanTeacher {
    fn pseudo_label(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.scene
            .teacher_aod(self.scene.position(x))
            .ok()
            .map(AngleTarget::to_vec)
    }
}

impl SpatialOracle for UrbanScene {
    fn bounds(&self) -> [f64; 4] {
        self.bounds.into()
    }

    fn sample_at(&self, x: f64, y: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        let p = Point::new(x, y);
        let truth = self.ground_truth_aod(p).ok()?;
        Some((self.covariate(p), truth.to_vec()))
    }
}
