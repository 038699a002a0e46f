//! Frame-by-frame inference over whole videos and live streams, and the
//! evaluation report built from it.
//!
//! Offline and streaming paths share [`predict_window`] with a batch of
//! one, so both produce identical bits for the same inputs.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::VideoRecord;
use crate::encoder::{batch_windows, build_input_features, Predictor};
use crate::error::{shape_err, Error, Result};
use crate::kinematics::{fk_joints, KinematicModel};
use crate::loader::WarmStartSource;
use crate::metrics::{accel_error, mpjpe, pa_mpjpe, JointSequence};
use crate::param_vector::ParamVector;

const MM_PER_M: f64 = 1000.0;

/// One eval-mode prediction from `T + 1` static features and the `T`
/// parameters of the past frames.
pub fn predict_window(predictor: &Predictor, feats: &[&[f64]], past: &[&ParamVector]) -> Result<ParamVector> {
    let zeros = ParamVector::zeros();
    let slots: Vec<Option<&ParamVector>> = past.iter().map(|p| Some(predictor.slot(p, &zeros))).collect();
    let window = build_input_features(feats, &slots)?;
    let xs = batch_windows(&[window])?;
    let out = predictor.predict_eval(&xs)?;
    let p = ParamVector::from_column(&out, 0);
    if !p.is_finite() {
        return Err(Error::NonFinite("prediction".into()));
    }
    Ok(p)
}

/// Warm-start parameters for the first `past` frames of a video.
pub fn warm_params(video: &VideoRecord, source: WarmStartSource, mean: &ParamVector, past: usize) -> Vec<ParamVector> {
    (0..past)
        .map(|t| match (source, &video.gt_params) {
            (WarmStartSource::GroundTruth, Some(gt)) => gt[t].clone(),
            _ => mean.clone(),
        })
        .collect()
}

/// Predictions for frames `past..len`, each fed the previous `past`
/// parameters (warm start first, then its own outputs).
pub fn predict_video(
    predictor: &Predictor,
    video: &VideoRecord,
    past: usize,
    source: WarmStartSource,
) -> Result<Vec<ParamVector>> {
    if video.len() < past + 1 {
        return Err(Error::TooShort(format!(
            "video {} has {} frames",
            video.id,
            video.len()
        )));
    }
    if video.static_feats.len() != video.len() {
        return Err(Error::MissingLabel(format!(
            "video {} has no static features",
            video.id
        )));
    }
    let mut history = warm_params(video, source, &predictor.mean, past);
    let mut out = Vec::with_capacity(video.len() - past);
    for t in past..video.len() {
        let feats: Vec<&[f64]> = video.static_feats[t - past..=t].iter().map(Vec::as_slice).collect();
        let prev: Vec<&ParamVector> = history[t - past..t].iter().collect();
        let p = predict_window(predictor, &feats, &prev)?;
        history.push(p.clone());
        out.push(p);
    }
    Ok(out)
}

/// Live predictor holding only the last `T + 1` features and `T` parameters.
#[derive(Debug, Clone)]
pub struct StreamingPredictor {
    predictor: Predictor,
    past: usize,
    feats: VecDeque<Vec<f64>>,
    params: VecDeque<ParamVector>,
    frame: usize,
}

impl StreamingPredictor {
    /// `warm` supplies the parameters of the first `T` frames.
    pub fn new(predictor: Predictor, warm: Vec<ParamVector>) -> Result<Self> {
        let past = warm.len();
        if past == 0 {
            return shape_err("streaming needs at least one warm-start frame");
        }
        Ok(Self {
            predictor,
            past,
            feats: VecDeque::with_capacity(past + 1),
            params: warm.into(),
            frame: 0,
        })
    }

    /// Frames received so far.
    pub fn frames_seen(&self) -> usize {
        self.frame
    }

    /// Buffered values, bounded by the window size.
    pub fn buffered(&self) -> (usize, usize) {
        (self.feats.len(), self.params.len())
    }

    /// Consumes the next frame's features; returns its prediction once the
    /// warm-start frames have passed.
    pub fn push(&mut self, feat: Vec<f64>) -> Result<Option<ParamVector>> {
        if feat.len() != self.predictor.config.feature_dim {
            return Err(Error::Record(format!(
                "frame {} has {} features, expected {}",
                self.frame,
                feat.len(),
                self.predictor.config.feature_dim
            )));
        }
        self.feats.push_back(feat);
        if self.feats.len() > self.past + 1 {
            self.feats.pop_front();
        }
        let t = self.frame;
        self.frame += 1;
        if t < self.past {
            return Ok(None);
        }
        let feats: Vec<&[f64]> = self.feats.iter().map(Vec::as_slice).collect();
        let prev: Vec<&ParamVector> = self.params.iter().collect();
        let p = predict_window(&self.predictor, &feats, &prev)?;
        self.params.pop_front();
        self.params.push_back(p.clone());
        Ok(Some(p))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub id: String,
    pub frames: usize,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Frame-weighted means over videos, millimetres.
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub accel: f64,
    pub videos: Vec<VideoMetrics>,
}

pub fn joints_mm(params: &[ParamVector], model: &KinematicModel) -> Result<JointSequence> {
    let frames = params
        .iter()
        .map(|p| Ok(fk_joints(p.pose(), p.shape(), model)? * MM_PER_M))
        .collect::<Result<Vec<DMatrix<f64>>>>()?;
    JointSequence::new(frames, model.root())
}

/// Metrics for one video's predictions on frames `past..len`.
pub fn score_video(
    video: &VideoRecord,
    preds: &[ParamVector],
    past: usize,
    model: &KinematicModel,
) -> Result<VideoMetrics> {
    let gt = video
        .gt_joints3d
        .as_ref()
        .ok_or_else(|| Error::MissingLabel(format!("video {} has no 3D joints to score", video.id)))?;
    if preds.len() + past != video.len() {
        return shape_err("prediction count does not cover the video");
    }
    let gt = JointSequence::new(gt[past..].iter().map(|x| x * MM_PER_M).collect(), model.root())?;
    let pr = joints_mm(preds, model)?;
    Ok(VideoMetrics {
        id: video.id.clone(),
        frames: preds.len(),
        mpjpe: mpjpe(&pr, &gt)?,
        pa_mpjpe: pa_mpjpe(&pr, &gt)?,
        accel: accel_error(&pr, &gt)?,
    })
}

pub fn evaluate(
    predictor: &Predictor,
    model: &KinematicModel,
    videos: &[&VideoRecord],
    past: usize,
    source: WarmStartSource,
) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(Error::EmptyBatch("no videos to evaluate".into()));
    }
    let mut report = EvalReport::default();
    let (mut n, mut na) = (0.0, 0.0);
    for v in videos {
        let preds = predict_video(predictor, v, past, source)?;
        let m = score_video(v, &preds, past, model)?;
        let w = m.frames as f64;
        let wa = (m.frames.saturating_sub(2)) as f64;
        report.mpjpe += w * m.mpjpe;
        report.pa_mpjpe += w * m.pa_mpjpe;
        report.accel += wa * m.accel;
        n += w;
        na += wa;
        report.videos.push(m);
    }
    report.mpjpe /= n;
    report.pa_mpjpe /= n;
    report.accel /= na.max(1.0);
    Ok(report)
}
