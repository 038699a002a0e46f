//! Sequential batch scheduling.
//!
//! Iteration `j` trains on frame `max(j mod H, T)` of every sampled video,
//! so each video is walked front to back and the predictions a window needs
//! for its past frames were written on earlier iterations.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::VideoRecord;
use crate::error::{Error, Result};
use crate::param_vector::ParamVector;

pub fn frame_position(j: u64, h: usize) -> usize {
    (j % h as u64) as usize
}

/// Frame trained at iteration `j`: the schedule position clamped so that a
/// full window of `past` frames precedes it.
pub fn current_frame(j: u64, h: usize, past: usize) -> usize {
    frame_position(j, h).max(past)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaScope {
    PerFrame,
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSource {
    Predicted,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
struct CacheEntry {
    params: ParamVector,
    stamp: u64,
}

/// Latest parameters per `(video, frame)`, stamped with the iteration that
/// wrote them.
#[derive(Debug, Clone, Default)]
pub struct PredictionCache {
    entries: HashMap<(usize, usize), CacheEntry>,
}

impl PredictionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, video: usize, frame: usize, params: ParamVector, stamp: u64) {
        self.entries.insert((video, frame), CacheEntry { params, stamp });
    }

    pub fn get(&self, video: usize, frame: usize) -> Option<&ParamVector> {
        self.entries.get(&(video, frame)).map(|e| &e.params)
    }

    pub fn stamp(&self, video: usize, frame: usize) -> Option<u64> {
        self.entries.get(&(video, frame)).map(|e| e.stamp)
    }

    pub fn require(&self, video: usize, frame: usize, id: &str) -> Result<&ParamVector> {
        self.get(video, frame).ok_or_else(|| Error::CacheMiss {
            video: id.to_string(),
            frame,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// `(video, frame, stamp, params)` sorted by key.
    pub fn entries(&self) -> Vec<(usize, usize, u64, &ParamVector)> {
        let mut out: Vec<_> = self
            .entries
            .iter()
            .map(|(&(v, f), e)| (v, f, e.stamp, &e.params))
            .collect();
        out.sort_by_key(|e| (e.0, e.1));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStartSource {
    GroundTruth,
    Mean,
}

/// Fills frames `0..past` of a video; ground truth falls back to the mean
/// when the video has no parameter labels. Returns the number of entries.
pub fn warm_start(
    cache: &mut PredictionCache,
    video_ix: usize,
    video: &VideoRecord,
    source: WarmStartSource,
    mean: &ParamVector,
    past: usize,
    stamp: u64,
) -> Result<usize> {
    if video.len() < past + 1 {
        return Err(Error::TooShort(format!(
            "video {} has {} frames, warm start needs {}",
            video.id,
            video.len(),
            past + 1
        )));
    }
    for t in 0..past {
        let p = match (source, &video.gt_params) {
            (WarmStartSource::GroundTruth, Some(gt)) => gt[t].clone(),
            _ => mean.clone(),
        };
        cache.write(video_ix, t, p, stamp);
    }
    Ok(past)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoaderConfig {
    /// Past frames per window (`T`); windows hold `T + 1` frames.
    pub past: usize,
    pub max_len: usize,
    pub gamma: f64,
    pub gamma_scope: GammaScope,
    pub batch: usize,
    /// Fraction of each batch drawn from the 3D-labelled pool.
    pub ratio_3d: f64,
    /// Fraction of each pool active during one epoch.
    pub epoch_fraction: f64,
}

impl Default for LoaderConfig {
    fn default() -> Self {
        Self {
            past: 5,
            max_len: 505,
            gamma: 0.9,
            gamma_scope: GammaScope::PerFrame,
            batch: 32,
            ratio_3d: 0.4,
            epoch_fraction: 0.125,
        }
    }
}

impl LoaderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.max_len < self.past + 1 {
            return Err(Error::Config("max video length must be at least T + 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ratio_3d) {
            return Err(Error::Config("3D ratio outside [0, 1]".into()));
        }
        if !(self.epoch_fraction > 0.0 && self.epoch_fraction <= 1.0) {
            return Err(Error::Config("epoch fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-batch quotas `(3D, 2D)`: `round(ratio * B)` 3D samples unless a pool
/// is empty, in which case the other takes the whole batch.
pub fn mix_datasets(batch: usize, has_3d: bool, has_2d: bool, ratio_3d: f64) -> (usize, usize) {
    match (has_3d, has_2d) {
        (true, true) => {
            let q = ((ratio_3d * batch as f64).round() as usize).min(batch);
            (q, batch - q)
        }
        (true, false) => (batch, 0),
        (false, true) => (0, batch),
        (false, false) => (0, 0),
    }
}

/// Uniform subsample without replacement of `ceil(fraction * len)` entries,
/// kept in pool order.
pub fn subsample(pool: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.is_empty() {
        return Vec::new();
    }
    let k = ((fraction * pool.len() as f64).ceil() as usize).clamp(1, pool.len());
    let mut ix = sample(rng, pool.len(), k).into_vec();
    ix.sort_unstable();
    ix.into_iter().map(|i| pool[i]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub video: usize,
    /// Current frame; the window is `frame - T ..= frame`.
    pub frame: usize,
    /// Source for each past frame, oldest first.
    pub sources: Vec<ParamSource>,
}

impl BatchItem {
    pub fn window_start(&self) -> usize {
        self.frame - self.sources.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub iteration: u64,
    pub frame: usize,
    pub items: Vec<BatchItem>,
    pub sampled: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct LoaderState {
    pub config: LoaderConfig,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl LoaderState {
    pub fn new(config: LoaderConfig, rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            iteration: 0,
            rng,
        })
    }

    pub fn current_frame(&self) -> usize {
        current_frame(self.iteration, self.config.max_len, self.config.past)
    }

    fn draw_sources(&mut self, has_gt: bool) -> Vec<ParamSource> {
        let past = self.config.past;
        let gamma = self.config.gamma;
        let pick = |rng: &mut ChaCha8Rng| {
            if rng.gen::<f64>() < gamma {
                ParamSource::Predicted
            } else {
                ParamSource::GroundTruth
            }
        };
        let mut out = match self.config.gamma_scope {
            GammaScope::PerFrame => (0..past).map(|_| pick(&mut self.rng)).collect(),
            GammaScope::PerSample => vec![pick(&mut self.rng); past],
        };
        if !has_gt {
            out.fill(ParamSource::Predicted);
        }
        out
    }

    /// Samples this iteration's batch from the two pools. Videos too short
    /// for the current frame are dropped rather than replaced.
    pub fn assemble_batch(
        &mut self,
        videos: &[VideoRecord],
        pool_3d: &[usize],
        pool_2d: &[usize],
        cache: &PredictionCache,
    ) -> Result<BatchPlan> {
        let (q3, q2) = mix_datasets(
            self.config.batch,
            !pool_3d.is_empty(),
            !pool_2d.is_empty(),
            self.config.ratio_3d,
        );
        if q3 + q2 == 0 {
            return Err(Error::EmptyBatch("both training pools are empty".into()));
        }
        let frame = self.current_frame();
        let mut items = Vec::new();
        let mut dropped = 0;
        for (pool, quota) in [(pool_3d, q3), (pool_2d, q2)] {
            for _ in 0..quota {
                let v = pool[self.rng.gen_range(0..pool.len())];
                let video = &videos[v];
                let sources = self.draw_sources(video.gt_params.is_some());
                if video.len() <= frame {
                    dropped += 1;
                    continue;
                }
                for (k, s) in sources.iter().enumerate() {
                    if *s == ParamSource::Predicted {
                        cache.require(v, frame - self.config.past + k, &video.id)?;
                    }
                }
                items.push(BatchItem {
                    video: v,
                    frame,
                    sources,
                });
            }
        }
        Ok(BatchPlan {
            iteration: self.iteration,
            frame,
            items,
            sampled: q3 + q2,
            dropped,
        })
    }

    pub fn advance(&mut self) {
        self.iteration += 1;
    }
}
