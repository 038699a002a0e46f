//! Deterministic synthetic motion and feature generation.
//!
//! Poses are sums of sinusoids per axis-angle coordinate. Static features
//! are a fixed linear image of pose and shape plus a per-video constant
//! bias and per-frame noise, so a single frame's feature carries a shift
//! that only temporal context with known parameters can explain away.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::VideoRecord;
use crate::discriminator::{MotionLabel, MotionSample};
use crate::error::{Error, Result};
use crate::kinematics::{fk_joints, project_2d, KinematicModel};
use crate::losses::SupervisionFlags;
use crate::param_vector::{ParamVector, POSE_DIM, SHAPE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionClass {
    Smooth,
    Jerky,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionGenConfig {
    pub seed: u64,
    pub length: usize,
    pub num_joints: usize,
    /// Cycles per frame.
    pub smooth_band: (f64, f64),
    pub jerky_band: (f64, f64),
    /// Total amplitude per coordinate, radians.
    pub amplitude: (f64, f64),
    pub class: MotionClass,
    /// Share of a jerky coordinate's amplitude given to high-band components.
    pub jerk_share: f64,
    /// Shape coefficients are uniform in `[-shape_scale, shape_scale]`.
    pub shape_scale: f64,
    pub camera_scale: (f64, f64),
    pub camera_shift: f64,
}

impl Default for MotionGenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            length: 120,
            num_joints: 14,
            smooth_band: (0.005, 0.05),
            jerky_band: (0.15, 0.4),
            amplitude: (0.1, 0.6),
            class: MotionClass::Smooth,
            jerk_share: 0.35,
            shape_scale: 1.0,
            camera_scale: (0.9, 1.1),
            camera_shift: 0.05,
        }
    }
}

impl MotionGenConfig {
    pub fn validate(&self, model: &KinematicModel) -> Result<()> {
        let band_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi < 0.5;
        if !band_ok(self.smooth_band) || !band_ok(self.jerky_band) {
            return Err(Error::Config("frequency bands must lie in (0, 0.5)".into()));
        }
        let (alo, ahi) = self.amplitude;
        if !(0.0..=ahi).contains(&alo) {
            return Err(Error::Config("amplitude range must satisfy 0 <= low <= high".into()));
        }
        if self.num_joints != model.num_joints() {
            return Err(Error::Config(format!(
                "motion config has {} joints, body model has {}",
                self.num_joints,
                model.num_joints()
            )));
        }
        if self.length == 0 {
            return Err(Error::Config("motion length must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.jerk_share) {
            return Err(Error::Config("jerk share must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    /// Cycles per frame.
    pub frequency: f64,
    pub phase: f64,
}

impl Sinusoid {
    fn at(&self, t: f64) -> f64 {
        self.amplitude * (TAU * self.frequency * t + self.phase).sin()
    }

    /// Bound on the absolute derivative per frame.
    fn rate(&self) -> f64 {
        self.amplitude.abs() * TAU * self.frequency
    }
}

/// Everything needed to reproduce one synthetic video's labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionPlan {
    pub length: usize,
    /// Per joint, per axis-angle coordinate.
    pub components: Vec<[Vec<Sinusoid>; 3]>,
    pub shape: [f64; SHAPE_DIM],
    pub camera: [f64; 3],
}

fn split_amplitude<R: Rng>(rng: &mut R, total: f64, parts: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..parts).map(|_| rng.gen_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| total * v / s).collect()
}

fn draw_components<R: Rng>(rng: &mut R, total: f64, band: (f64, f64), count: usize) -> Vec<Sinusoid> {
    split_amplitude(rng, total, count)
        .into_iter()
        .map(|a| Sinusoid {
            amplitude: a,
            frequency: if band.0 == band.1 {
                band.0
            } else {
                rng.gen_range(band.0..band.1)
            },
            phase: rng.gen_range(0.0..TAU),
        })
        .collect()
}

pub fn plan_motion(cfg: &MotionGenConfig, model: &KinematicModel) -> Result<MotionPlan> {
    cfg.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let articulated = model.articulated_joints();
    let mut components = vec![[Vec::new(), Vec::new(), Vec::new()]; model.num_joints()];
    for &j in &articulated {
        for coord in components[j].iter_mut() {
            let (lo, hi) = cfg.amplitude;
            let total = if lo == hi { lo } else { rng.gen_range(lo..hi) };
            let count = rng.gen_range(2..=4);
            let mut c = match cfg.class {
                MotionClass::Smooth => draw_components(&mut rng, total, cfg.smooth_band, count),
                MotionClass::Jerky => {
                    let mut c = draw_components(&mut rng, total * (1.0 - cfg.jerk_share), cfg.smooth_band, count);
                    let high = rng.gen_range(1..=2);
                    c.extend(draw_components(&mut rng, total * cfg.jerk_share, cfg.jerky_band, high));
                    c
                }
            };
            c.retain(|s| s.amplitude != 0.0);
            *coord = c;
        }
    }
    let mut shape = [0.0; SHAPE_DIM];
    for b in shape.iter_mut() {
        *b = if cfg.shape_scale > 0.0 {
            rng.gen_range(-cfg.shape_scale..=cfg.shape_scale)
        } else {
            0.0
        };
    }
    let (slo, shi) = cfg.camera_scale;
    let s = if slo == shi { slo } else { rng.gen_range(slo..shi) };
    let shift = |rng: &mut ChaCha8Rng| {
        if cfg.camera_shift > 0.0 {
            rng.gen_range(-cfg.camera_shift..=cfg.camera_shift)
        } else {
            0.0
        }
    };
    let camera = [s, shift(&mut rng), shift(&mut rng)];
    Ok(MotionPlan {
        length: cfg.length,
        components,
        shape,
        camera,
    })
}

impl MotionPlan {
    pub fn params_at(&self, t: usize, model: &KinematicModel) -> ParamVector {
        let mut p = ParamVector::zeros();
        p.camera_mut().copy_from_slice(&self.camera);
        p.shape_mut().copy_from_slice(&self.shape);
        let pose = p.pose_mut();
        for (j, coords) in self.components.iter().enumerate() {
            let triple = model.joint_map[j];
            for (c, comps) in coords.iter().enumerate() {
                pose[3 * triple + c] = comps.iter().map(|s| s.at(t as f64)).sum();
            }
        }
        p
    }

    /// Upper bound on any joint's displacement between consecutive frames.
    ///
    /// The rotation rate of an axis-angle curve is at most the speed of the
    /// curve itself; global rates add down the chain and each joint's speed
    /// adds its parent's rate times the bone length.
    pub fn displacement_bound(&self, model: &KinematicModel) -> f64 {
        let n = model.num_joints();
        let mut omega = vec![0.0; n];
        let mut speed = vec![0.0; n];
        for j in 0..n {
            let w = self.components[j]
                .iter()
                .map(|comps| comps.iter().map(Sinusoid::rate).sum::<f64>().powi(2))
                .sum::<f64>()
                .sqrt();
            match model.parents[j] {
                Some(p) => {
                    speed[j] = speed[p] + omega[p] * model.offset(j, &self.shape).norm();
                    omega[j] = omega[p] + w;
                }
                None => omega[j] = w,
            }
        }
        speed.into_iter().fold(0.0, f64::max)
    }
}

/// Labels for a planned motion: parameters, 3D joints and 2D projections.
pub fn generate_motion(cfg: &MotionGenConfig, model: &KinematicModel, id: &str) -> Result<(VideoRecord, MotionPlan)> {
    let plan = plan_motion(cfg, model)?;
    let mut params = Vec::with_capacity(cfg.length);
    let mut j3 = Vec::with_capacity(cfg.length);
    let mut j2 = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        let p = plan.params_at(t, model);
        let x = fk_joints(p.pose(), p.shape(), model)?;
        j2.push(project_2d(&x, p.camera())?);
        j3.push(x);
        params.push(p);
    }
    let record = VideoRecord {
        id: id.to_string(),
        static_feats: Vec::new(),
        gt_params: Some(params),
        gt_joints3d: Some(j3),
        gt_joints2d: j2,
        flags: SupervisionFlags {
            has_3d: true,
            has_smpl: true,
        },
    };
    Ok((record, plan))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSimConfig {
    pub seed: u64,
    pub dim: usize,
    pub noise: f64,
    pub bias: f64,
}

impl Default for FeatureSimConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dim: 64,
            noise: 0.005,
            bias: 0.02,
        }
    }
}

/// Linear feature map shared across a dataset.
#[derive(Debug, Clone)]
pub struct FeatureSimulator {
    pub config: FeatureSimConfig,
    /// `F x 82`, acting on `(pose, shape)`.
    pub map: DMatrix<f64>,
}

impl FeatureSimulator {
    pub fn new(config: FeatureSimConfig) -> Result<Self> {
        if config.dim == 0 || config.noise < 0.0 || config.bias < 0.0 {
            return Err(Error::Config(
                "feature dim must be positive and scales non-negative".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cols = POSE_DIM + SHAPE_DIM;
        let scale = (cols as f64).sqrt().recip();
        let map = DMatrix::from_fn(config.dim, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Ok(Self { config, map })
    }

    /// Per-frame features for a labelled video. `video_seed` drives the
    /// video's bias and noise.
    pub fn simulate(&self, record: &VideoRecord, video_seed: u64) -> Result<Vec<Vec<f64>>> {
        let params = record
            .gt_params
            .as_ref()
            .ok_or_else(|| Error::MissingLabel(format!("video {} has no parameters to simulate from", record.id)))?;
        let f = self.config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ video_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let bias: Vec<f64> = (0..f)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.config.bias * z
            })
            .collect();
        let mut out = Vec::with_capacity(params.len());
        let mut ps = nalgebra::DVector::<f64>::zeros(POSE_DIM + SHAPE_DIM);
        for p in params {
            ps.rows_mut(0, POSE_DIM).copy_from_slice(p.pose());
            ps.rows_mut(POSE_DIM, SHAPE_DIM).copy_from_slice(p.shape());
            let lin = &self.map * &ps;
            out.push(
                (0..f)
                    .map(|i| {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        lin[i] + bias[i] + self.config.noise * eps
                    })
                    .collect(),
            );
        }
        Ok(out)
    }
}

/// Sliding `window`-frame real samples from each configured motion.
pub fn generate_real_pool(
    cfgs: &[MotionGenConfig],
    model: &KinematicModel,
    window: usize,
) -> Result<Vec<MotionSample>> {
    let mut out = Vec::new();
    for (i, cfg) in cfgs.iter().enumerate() {
        let (rec, _) = generate_motion(cfg, model, &format!("real{i}"))?;
        let joints = rec.gt_joints3d.expect("generated with labels");
        out.extend(real_windows(&joints, model.root(), window)?);
    }
    Ok(out)
}

/// Every run of `window` consecutive frames as a real sample.
pub fn real_windows(joints: &[DMatrix<f64>], root: usize, window: usize) -> Result<Vec<MotionSample>> {
    if window == 0 {
        return Err(Error::Config("window must be positive".into()));
    }
    if joints.len() < window {
        return Ok(Vec::new());
    }
    (0..=joints.len() - window)
        .map(|s| MotionSample::from_joints(&joints[s..s + window], root, MotionLabel::Real))
        .collect()
}

/// Sizes and generators for a complete synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDatasetConfig {
    pub seed: u64,
    pub train_3d: usize,
    pub train_2d: usize,
    pub test: usize,
    pub real: usize,
    /// Video lengths are uniform in this inclusive range.
    pub length: (usize, usize),
    pub motion: MotionGenConfig,
    pub features: FeatureSimConfig,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            train_3d: 400,
            train_2d: 400,
            test: 12,
            real: 24,
            length: (60, 120),
            motion: MotionGenConfig::default(),
            features: FeatureSimConfig::default(),
        }
    }
}

/// Generates train (3D and 2D-only), test and real-motion splits. Every
/// video gets its own motion seed; features share one linear map.
pub fn build_dataset(cfg: &SynthDatasetConfig, model: &KinematicModel) -> Result<crate::dataset::Dataset> {
    let (lo, hi) = cfg.length;
    if lo == 0 || lo > hi {
        return Err(Error::Config("video length range must satisfy 0 < low <= high".into()));
    }
    let sim = FeatureSimulator::new(cfg.features.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ds = crate::dataset::Dataset::default();
    let mut counter = 0u64;
    let mut make = |rng: &mut ChaCha8Rng, prefix: &str, i: usize| -> Result<(VideoRecord, u64)> {
        let seed = rng.gen::<u64>();
        counter += 1;
        let mc = MotionGenConfig {
            seed,
            length: rng.gen_range(lo..=hi),
            class: MotionClass::Smooth,
            ..cfg.motion.clone()
        };
        let (rec, _) = generate_motion(&mc, model, &format!("{prefix}{i:04}"))?;
        Ok((rec, seed ^ counter))
    };
    for i in 0..cfg.train_3d {
        let (mut rec, vs) = make(&mut rng, "train3d_", i)?;
        rec.static_feats = sim.simulate(&rec, vs)?;
        let ix = ds.push(rec);
        ds.train_3d.push(ix);
    }
    for i in 0..cfg.train_2d {
        let (mut rec, vs) = make(&mut rng, "train2d_", i)?;
        rec.static_feats = sim.simulate(&rec, vs)?;
        let ix = ds.push(rec.without_3d_labels());
        ds.train_2d.push(ix);
    }
    for i in 0..cfg.test {
        let (mut rec, vs) = make(&mut rng, "test_", i)?;
        rec.static_feats = sim.simulate(&rec, vs)?;
        let ix = ds.push(rec);
        ds.test.push(ix);
    }
    for i in 0..cfg.real {
        let (mut rec, _) = make(&mut rng, "real_", i)?;
        rec.gt_params = None;
        rec.flags = SupervisionFlags {
            has_3d: true,
            has_smpl: false,
        };
        let ix = ds.push(rec);
        ds.real.push(ix);
    }
    Ok(ds)
}
