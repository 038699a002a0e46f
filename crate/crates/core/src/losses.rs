//! Supervision terms: mean-squared 2D/3D/parameter losses, the
//! least-squares adversarial objectives and their gated composition.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kinematics::{fk_backward, fk_forward, project_2d, project_2d_backward, KinematicModel};
use crate::param_vector::{ParamVector, CAMERA_DIM, POSE_DIM, SHAPE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SupervisionFlags {
    pub has_3d: bool,
    pub has_smpl: bool,
}

/// Multipliers on each term. All default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w2d: f64,
    pub w3d: f64,
    pub w_theta: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w2d: 1.0,
            w3d: 1.0,
            w_theta: 1.0,
            w_adv: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2d: f64,
    pub l3d: f64,
    pub l_theta: f64,
    pub l_adv: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the total from the stored terms.
    pub fn recompose(&self, flags: SupervisionFlags, w: &LossWeights) -> f64 {
        let ind = |b: bool| if b { 1.0 } else { 0.0 };
        w.w2d * self.l2d
            + ind(flags.has_3d) * w.w3d * self.l3d
            + ind(flags.has_smpl) * w.w_theta * self.l_theta
            + (1.0 - ind(flags.has_smpl)) * w.w_adv * self.l_adv
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.l2d += other.l2d;
        self.l3d += other.l3d;
        self.l_theta += other.l_theta;
        self.l_adv += other.l_adv;
        self.total += other.total;
    }
}

/// Mean of squared differences over all entries.
pub fn mse(pred: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return shape_err(format!("prediction {:?} vs target {:?}", pred.shape(), gt.shape()));
    }
    if pred.is_empty() {
        return shape_err("empty loss input");
    }
    Ok((pred - gt).norm_squared() / pred.len() as f64)
}

pub fn mse_grad(pred: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if pred.shape() != gt.shape() || pred.is_empty() {
        return shape_err("loss gradient shapes");
    }
    Ok((pred - gt) * (2.0 / pred.len() as f64))
}

pub fn loss_3d(pred: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<f64> {
    if pred.ncols() != 3 {
        return shape_err("3D joints need three columns");
    }
    mse(pred, gt)
}

pub fn loss_2d(pred: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<f64> {
    if pred.ncols() != 2 {
        return shape_err("2D joints need two columns");
    }
    mse(pred, gt)
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Pose and shape terms; the camera is unsupervised.
pub fn loss_smpl(pred: &ParamVector, gt: &ParamVector) -> f64 {
    mean_sq_diff(pred.pose(), gt.pose()) + mean_sq_diff(pred.shape(), gt.shape())
}

pub fn loss_smpl_grad(pred: &ParamVector, gt: &ParamVector) -> ParamVector {
    let mut g = ParamVector::zeros();
    for i in ParamVector::pose_range() {
        g[i] = 2.0 * (pred[i] - gt[i]) / POSE_DIM as f64;
    }
    for i in ParamVector::shape_range() {
        g[i] = 2.0 * (pred[i] - gt[i]) / SHAPE_DIM as f64;
    }
    g
}

pub fn adversarial_loss(score: f64) -> f64 {
    (score - 1.0) * (score - 1.0)
}

pub fn adversarial_loss_grad(score: f64) -> f64 {
    2.0 * (score - 1.0)
}

pub fn discriminator_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::EmptyBatch(
            "discriminator loss needs real and generated scores".into(),
        ));
    }
    let r = real.iter().map(|s| (s - 1.0) * (s - 1.0)).sum::<f64>() / real.len() as f64;
    let f = fake.iter().map(|s| s * s).sum::<f64>() / fake.len() as f64;
    Ok(r + f)
}

/// Gradients with respect to each real and each generated score.
pub fn discriminator_loss_grad(real: &[f64], fake: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::EmptyBatch(
            "discriminator loss needs real and generated scores".into(),
        ));
    }
    let nr = real.len() as f64;
    let nf = fake.len() as f64;
    Ok((
        real.iter().map(|s| 2.0 * (s - 1.0) / nr).collect(),
        fake.iter().map(|s| 2.0 * s / nf).collect(),
    ))
}

/// Component values fed to [`total_loss`]. Terms switched off by the flags
/// may be left out.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub l2d: f64,
    pub l3d: Option<f64>,
    pub l_theta: Option<f64>,
    pub l_adv: Option<f64>,
}

pub fn total_loss(terms: LossTerms, flags: SupervisionFlags, w: &LossWeights) -> Result<LossBreakdown> {
    let need = |v: Option<f64>, on: bool, what: &str| -> Result<f64> {
        match (v, on) {
            (Some(x), _) => Ok(x),
            (None, false) => Ok(0.0),
            (None, true) => Err(Error::MissingLabel(what.into())),
        }
    };
    let mut b = LossBreakdown {
        l2d: terms.l2d,
        l3d: need(terms.l3d, flags.has_3d, "3D joints")?,
        l_theta: need(terms.l_theta, flags.has_smpl, "body parameters")?,
        l_adv: need(terms.l_adv, !flags.has_smpl, "discriminator score")?,
        total: 0.0,
    };
    b.total = b.recompose(flags, w);
    Ok(b)
}

/// Ground truth for one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameTargets<'a> {
    pub joints2d: &'a DMatrix<f64>,
    pub joints3d: Option<&'a DMatrix<f64>>,
    pub params: Option<&'a ParamVector>,
    pub flags: SupervisionFlags,
}

/// Adversarial term for a frame's predicted joints: returns the loss and its
/// gradient with respect to those joints.
pub type AdversarialFn<'a> = dyn Fn(&DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> + 'a;

/// Full per-frame objective for one predicted parameter vector and its
/// gradient with respect to that vector.
pub fn frame_objective(
    pred: &ParamVector,
    targets: &FrameTargets,
    model: &KinematicModel,
    w: &LossWeights,
    adversarial: Option<&AdversarialFn>,
) -> Result<(LossBreakdown, ParamVector)> {
    let flags = targets.flags;
    let (joints, fk_cache) = fk_forward(pred.pose(), pred.shape(), model)?;
    let proj = project_2d(&joints, pred.camera())?;
    let mut terms = LossTerms {
        l2d: loss_2d(&proj, targets.joints2d)?,
        ..Default::default()
    };
    let d_proj = mse_grad(&proj, targets.joints2d)? * w.w2d;
    let (mut d_joints, d_cam) = project_2d_backward(&joints, pred.camera(), &d_proj)?;
    let mut grad = ParamVector::zeros();
    grad.camera_mut().copy_from_slice(&d_cam);

    if flags.has_3d {
        let gt = targets
            .joints3d
            .ok_or_else(|| Error::MissingLabel("3D joints".into()))?;
        terms.l3d = Some(loss_3d(&joints, gt)?);
        d_joints += mse_grad(&joints, gt)? * w.w3d;
    }
    if flags.has_smpl {
        let gt = targets
            .params
            .ok_or_else(|| Error::MissingLabel("body parameters".into()))?;
        terms.l_theta = Some(loss_smpl(pred, gt));
        let g = loss_smpl_grad(pred, gt);
        for i in CAMERA_DIM..g.as_slice().len() {
            grad[i] += w.w_theta * g[i];
        }
    } else if let Some(adv) = adversarial {
        let (l, dj) = adv(&joints)?;
        terms.l_adv = Some(l);
        d_joints += dj * w.w_adv;
    } else {
        // adversarial supervision disabled
        terms.l_adv = Some(0.0);
    }

    let (d_pose, d_shape) = fk_backward(&fk_cache, model, &d_joints)?;
    for (g, d) in grad.pose_mut().iter_mut().zip(&d_pose) {
        *g += d;
    }
    for (g, d) in grad.shape_mut().iter_mut().zip(&d_shape) {
        *g += d;
    }
    Ok((total_loss(terms, flags, w)?, grad))
}
