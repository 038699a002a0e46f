//! Alternating predictor / discriminator training over the sequential
//! schedule.

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{Dataset, VideoRecord};
use crate::discriminator::{center_on_root_backward, Discriminator, MotionLabel, MotionSample};
use crate::encoder::{batch_windows, build_input_features, Predictor};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::gcn::GraphSeq;
use crate::kinematics::{fk_joints, KinematicModel};
use crate::loader::{subsample, warm_start, BatchItem, LoaderState, ParamSource, PredictionCache};
use crate::losses::{
    adversarial_loss, adversarial_loss_grad, discriminator_loss, discriminator_loss_grad, frame_objective,
    AdversarialFn, FrameTargets, LossBreakdown,
};
use crate::optim::{Adam, Plateau};
use crate::param_vector::{ParamVector, PARAM_DIM};
use crate::params::Parameters;
use crate::synth::real_windows;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub frame: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
    pub d_loss: Option<f64>,
}

/// Mean of the per-frame parameters over every labelled training frame.
pub fn mean_params(data: &Dataset) -> ParamVector {
    let mut sum = [0.0; PARAM_DIM];
    let mut n = 0usize;
    for &i in &data.train_3d {
        if let Some(ps) = &data.videos[i].gt_params {
            for p in ps {
                for (s, v) in sum.iter_mut().zip(p.as_slice()) {
                    *s += v;
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        // neutral pose with unit camera scale
        let mut p = ParamVector::zeros();
        p[0] = 1.0;
        return p;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    ParamVector::from_slice(&mean).expect("85 values")
}

/// Skeleton window for the discriminator: `frames` joints, root-centred.
fn graph_window(frames: &[DMatrix<f64>], root: usize) -> Result<GraphSeq> {
    Ok(MotionSample::from_joints(frames, root, MotionLabel::Generated)?.skeleton)
}

/// Everything that evolves during training, enough to continue a run
/// exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub predictor: Predictor,
    pub discriminator: Discriminator,
    pub opt_predictor: Adam,
    pub opt_discriminator: Adam,
    pub loader: LoaderState,
    pub rng: ChaCha8Rng,
    pub cache: PredictionCache,
    pub plateau: Plateau,
    pub active_3d: Vec<usize>,
    pub active_2d: Vec<usize>,
}

/// Adversarial term for a predicted frame appended to `past` joint frames:
/// the loss on the discriminator score of the whole window and its gradient
/// with respect to the appended frame's joints.
pub fn adversarial_term<'d>(
    disc: &'d Discriminator,
    past: Vec<DMatrix<f64>>,
    root: usize,
) -> impl Fn(&DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> + 'd {
    move |joints: &DMatrix<f64>| {
        let mut frames = past.clone();
        frames.push(joints.clone());
        let x = graph_window(&frames, root)?;
        let (score, cache) = disc.forward(&x)?;
        let (dx, _) = disc.backward(&cache, adversarial_loss_grad(score))?;
        let nj = joints.nrows();
        let last = dx.rows(past.len() * nj, nj).into_owned();
        Ok((adversarial_loss(score), center_on_root_backward(&last, root)))
    }
}

pub struct Trainer<'a> {
    pub config: RunConfig,
    pub body: KinematicModel,
    pub data: &'a Dataset,
    pub predictor: Predictor,
    pub discriminator: Discriminator,
    pub opt_predictor: Adam,
    pub opt_discriminator: Adam,
    pub loader: LoaderState,
    pub rng: ChaCha8Rng,
    pub cache: PredictionCache,
    pub plateau: Plateau,
    pub history: Vec<IterationLog>,
    pub evals: Vec<(u64, EvalReport)>,
    active_3d: Vec<usize>,
    active_2d: Vec<usize>,
    real: Vec<GraphSeq>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let body = KinematicModel::default_body();
        if data.num_joints() != body.num_joints() {
            return Err(Error::Config(format!(
                "dataset has {} joints, body model {}",
                data.num_joints(),
                body.num_joints()
            )));
        }
        if data.feature_dim() != config.predictor.feature_dim {
            return Err(Error::Config(format!(
                "dataset feature dim {} differs from predictor {}",
                data.feature_dim(),
                config.predictor.feature_dim
            )));
        }
        if data.train_3d.is_empty() && data.train_2d.is_empty() {
            return Err(Error::EmptyBatch("dataset has no training videos".into()));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let predictor = Predictor::new(&mut init_rng, config.predictor.clone(), mean_params(data))?;
        let discriminator = Discriminator::new(&mut init_rng, body.skeleton(), config.discriminator.clone())?;
        let loader_rng = ChaCha8Rng::seed_from_u64(init_rng.gen());
        let rng = ChaCha8Rng::seed_from_u64(init_rng.gen());
        Self::assemble(config, body, data, predictor, discriminator, loader_rng, rng)
    }

    fn assemble(
        config: RunConfig,
        body: KinematicModel,
        data: &'a Dataset,
        predictor: Predictor,
        discriminator: Discriminator,
        loader_rng: ChaCha8Rng,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let window = config.loader.past + 1;
        let mut real = Vec::new();
        for &i in &data.real {
            let joints = data.videos[i]
                .gt_joints3d
                .as_ref()
                .ok_or_else(|| Error::MissingLabel(format!("real video {} has no 3D joints", data.videos[i].id)))?;
            for s in real_windows(joints, body.root(), window)? {
                real.push(s.skeleton);
            }
        }
        if config.train.adversarial && real.is_empty() {
            return Err(Error::Config("adversarial training needs real motion windows".into()));
        }
        let opt_predictor = Adam::new(&predictor.params, config.train.lr_predictor);
        let opt_discriminator = Adam::new(&discriminator.params, config.train.lr_discriminator);
        let plateau = Plateau::new(config.train.plateau_patience, config.train.plateau_factor);
        Ok(Self {
            loader: LoaderState::new(config.loader.clone(), loader_rng)?,
            config,
            body,
            data,
            predictor,
            discriminator,
            opt_predictor,
            opt_discriminator,
            rng,
            cache: PredictionCache::new(),
            plateau,
            history: Vec::new(),
            evals: Vec::new(),
            active_3d: Vec::new(),
            active_2d: Vec::new(),
            real,
        })
    }

    /// Rebuilds a trainer from saved state.
    pub fn resume(config: RunConfig, data: &'a Dataset, state: TrainerState) -> Result<Self> {
        config.validate()?;
        let body = KinematicModel::default_body();
        let TrainerState {
            predictor,
            discriminator,
            opt_predictor,
            opt_discriminator,
            loader,
            rng,
            cache,
            plateau,
            active_3d,
            active_2d,
        } = state;
        for &v in active_3d.iter().chain(active_2d.iter()) {
            if v >= data.videos.len() {
                return Err(Error::Config(format!(
                    "checkpoint refers to video {v} outside the dataset"
                )));
            }
        }
        let mut t = Self::assemble(config, body, data, predictor, discriminator, loader.rng.clone(), rng)?;
        t.opt_predictor = opt_predictor;
        t.opt_discriminator = opt_discriminator;
        t.loader = loader;
        t.cache = cache;
        t.plateau = plateau;
        t.active_3d = active_3d;
        t.active_2d = active_2d;
        Ok(t)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            predictor: self.predictor.clone(),
            discriminator: self.discriminator.clone(),
            opt_predictor: self.opt_predictor.clone(),
            opt_discriminator: self.opt_discriminator.clone(),
            loader: self.loader.clone(),
            rng: self.rng.clone(),
            cache: self.cache.clone(),
            plateau: self.plateau.clone(),
            active_3d: self.active_3d.clone(),
            active_2d: self.active_2d.clone(),
        }
    }

    pub fn past(&self) -> usize {
        self.config.loader.past
    }

    pub fn active(&self) -> (&[usize], &[usize]) {
        (&self.active_3d, &self.active_2d)
    }

    fn usable(&self, pool: &[usize]) -> Vec<usize> {
        pool.iter()
            .copied()
            .filter(|&i| self.data.videos[i].len() > self.past())
            .collect()
    }

    /// Draws the epoch's active videos and warm-starts their cache.
    fn start_epoch(&mut self) -> Result<()> {
        let f = self.config.loader.epoch_fraction;
        let p3 = self.usable(&self.data.train_3d);
        let p2 = self.usable(&self.data.train_2d);
        self.active_3d = subsample(&p3, f, &mut self.rng);
        self.active_2d = subsample(&p2, f, &mut self.rng);
        self.cache.clear();
        let j = self.loader.iteration;
        let past = self.past();
        for &v in self.active_3d.iter().chain(self.active_2d.iter()) {
            warm_start(
                &mut self.cache,
                v,
                &self.data.videos[v],
                self.config.train.warm_start,
                &self.predictor.mean,
                past,
                j,
            )?;
        }
        Ok(())
    }

    fn slot_source<'b>(&'b self, item: &BatchItem, k: usize, zeros: &'b ParamVector) -> Result<&'b ParamVector> {
        let frame = item.window_start() + k;
        let video = &self.data.videos[item.video];
        let p = match item.sources[k] {
            ParamSource::Predicted => self.cache.require(item.video, frame, &video.id)?,
            ParamSource::GroundTruth => &video
                .gt_params
                .as_ref()
                .ok_or_else(|| Error::MissingLabel(format!("video {} has no parameters", video.id)))?[frame],
        };
        Ok(self.predictor.slot(p, zeros))
    }

    fn window_features(&self, item: &BatchItem) -> Result<Vec<DVector<f64>>> {
        let video = &self.data.videos[item.video];
        let s = item.window_start();
        let feats: Vec<&[f64]> = video.static_feats[s..=item.frame].iter().map(Vec::as_slice).collect();
        let zeros = ParamVector::zeros();
        let slots = (0..item.sources.len())
            .map(|k| self.slot_source(item, k, &zeros).map(Some))
            .collect::<Result<Vec<_>>>()?;
        build_input_features(&feats, &slots)
    }

    /// Joints of the frames before `item.frame` from the prediction history.
    fn past_joints(&self, item: &BatchItem) -> Result<Vec<DMatrix<f64>>> {
        let video = &self.data.videos[item.video];
        (item.window_start()..item.frame)
            .map(|f| {
                let p = self.cache.require(item.video, f, &video.id)?;
                fk_joints(p.pose(), p.shape(), &self.body)
            })
            .collect()
    }

    /// One optimisation step: predictor update, discriminator update, then
    /// the cache advance for every active video.
    pub fn step(&mut self) -> Result<IterationLog> {
        let j = self.loader.iteration;
        let h = self.config.loader.max_len as u64;
        if j.is_multiple_of(h) || (self.active_3d.is_empty() && self.active_2d.is_empty()) {
            self.start_epoch()?;
        }
        let plan = self
            .loader
            .assemble_batch(&self.data.videos, &self.active_3d, &self.active_2d, &self.cache)?;
        let mut log = IterationLog {
            iteration: j,
            frame: plan.frame,
            batch: plan.items.len(),
            ..Default::default()
        };
        if !plan.items.is_empty() {
            let fakes = self.predictor_step(&plan.items, &mut log)?;
            if self.config.train.adversarial && !fakes.is_empty() {
                log.d_loss = Some(self.discriminator_step(&fakes)?);
            }
        }
        self.advance_cache(plan.frame, j)?;
        self.loader.advance();
        if self.loader.iteration.is_multiple_of(h) {
            let epoch = self.loader.iteration / h;
            let every = self.config.train.eval_every_epochs as u64;
            if every > 0 && epoch.is_multiple_of(every) && !self.data.test.is_empty() {
                let r = self.evaluate_test()?;
                let k = self.plateau.observe(r.mpjpe);
                if k != 1.0 {
                    self.opt_predictor.lr *= k;
                    self.opt_discriminator.lr *= k;
                    info!(
                        "epoch {epoch}: no improvement, learning rates now {:e} / {:e}",
                        self.opt_predictor.lr, self.opt_discriminator.lr
                    );
                }
                self.evals.push((self.loader.iteration, r));
            }
        }
        if self.config.train.log_every > 0 && j.is_multiple_of(self.config.train.log_every) {
            info!(
                "iter {j} frame {} batch {} loss {:.5} (2d {:.5} 3d {:.5} theta {:.5} adv {:.5}) d {:?}",
                log.frame,
                log.batch,
                log.loss.total,
                log.loss.l2d,
                log.loss.l3d,
                log.loss.l_theta,
                log.loss.l_adv,
                log.d_loss
            );
        }
        self.history.push(log.clone());
        Ok(log)
    }

    /// Returns the generated windows used for the adversarial term.
    fn predictor_step(&mut self, items: &[BatchItem], log: &mut IterationLog) -> Result<Vec<GraphSeq>> {
        let windows = items
            .iter()
            .map(|it| self.window_features(it))
            .collect::<Result<Vec<_>>>()?;
        let xs = batch_windows(&windows)?;
        let fwd = self.predictor.forward_train(&xs)?;
        let n = items.len() as f64;
        let root = self.body.root();
        let adversarial = self.config.train.adversarial;
        let mut d_uni = DMatrix::zeros(PARAM_DIM, items.len());
        let mut d_bi = fwd.bi.as_ref().map(|b| DMatrix::zeros(PARAM_DIM, b.ncols()));
        let mut fakes = Vec::new();
        let mut total = LossBreakdown::default();

        for (b, item) in items.iter().enumerate() {
            let video = &self.data.videos[item.video];
            let t = item.frame;
            let targets = FrameTargets {
                joints2d: &video.gt_joints2d[t],
                joints3d: video.gt_joints3d.as_ref().map(|x| &x[t]),
                params: video.gt_params.as_ref().map(|p| &p[t]),
                flags: video.flags,
            };
            let past = if adversarial && !video.flags.has_smpl {
                Some(self.past_joints(item)?)
            } else {
                None
            };
            let mut branches: Vec<(&DMatrix<f64>, bool)> = vec![(&fwd.uni, false)];
            if let Some(bi) = &fwd.bi {
                branches.push((bi, true));
            }
            for (preds, is_bi) in branches {
                let pred = ParamVector::from_column(preds, b);
                let adv_fn = past
                    .as_ref()
                    .map(|p| adversarial_term(&self.discriminator, p.clone(), root));
                let adv = adv_fn.as_ref().map(|f| f as &AdversarialFn);
                let (lb, grad) = frame_objective(&pred, &targets, &self.body, &self.config.train.weights, adv)?;
                total.add(&lb);
                let dst = if is_bi {
                    d_bi.as_mut().expect("bi branch")
                } else {
                    &mut d_uni
                };
                for (k, g) in grad.as_slice().iter().enumerate() {
                    dst[(k, b)] = g / n;
                }
                if let Some(p) = &past {
                    let mut frames = p.clone();
                    frames.push(fk_joints(pred.pose(), pred.shape(), &self.body)?);
                    fakes.push(graph_window(&frames, root)?);
                }
            }
        }
        for v in [
            &mut total.l2d,
            &mut total.l3d,
            &mut total.l_theta,
            &mut total.l_adv,
            &mut total.total,
        ] {
            *v /= n;
        }
        if !total.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at iteration {}",
                log.iteration
            )));
        }
        log.loss = total;
        let grads = self.predictor.backward_train(&fwd, &d_uni, d_bi.as_ref())?;
        if !grads.all_finite() {
            return Err(Error::NonFinite("predictor gradient".into()));
        }
        self.opt_predictor.update(&mut self.predictor.params, &grads)?;
        Ok(fakes)
    }

    fn discriminator_step(&mut self, fakes: &[GraphSeq]) -> Result<f64> {
        let reals: Vec<GraphSeq> = (0..fakes.len())
            .map(|_| self.real[self.rng.gen_range(0..self.real.len())].clone())
            .collect();
        let disc = &self.discriminator;
        let real_out = reals.iter().map(|x| disc.forward(x)).collect::<Result<Vec<_>>>()?;
        let fake_out = fakes.iter().map(|x| disc.forward(x)).collect::<Result<Vec<_>>>()?;
        let rs: Vec<f64> = real_out.iter().map(|o| o.0).collect();
        let fs: Vec<f64> = fake_out.iter().map(|o| o.0).collect();
        let loss = discriminator_loss(&rs, &fs)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("discriminator loss".into()));
        }
        let (dr, df) = discriminator_loss_grad(&rs, &fs)?;
        let mut grads = disc.params.zeros_like();
        for ((_, c), d) in real_out.iter().zip(&dr).chain(fake_out.iter().zip(&df)) {
            grads.accumulate(&disc.backward(c, *d)?.1);
        }
        self.opt_discriminator.update(&mut self.discriminator.params, &grads)?;
        Ok(loss)
    }

    /// Writes an eval-mode prediction for `frame` of every active video long
    /// enough to contain it, reading past frames from the cache.
    fn advance_cache(&mut self, frame: usize, stamp: u64) -> Result<()> {
        let past = self.past();
        let videos: Vec<usize> = self
            .active_3d
            .iter()
            .chain(self.active_2d.iter())
            .copied()
            .filter(|&v| self.data.videos[v].len() > frame)
            .collect();
        if videos.is_empty() {
            return Ok(());
        }
        let items: Vec<BatchItem> = videos
            .iter()
            .map(|&v| BatchItem {
                video: v,
                frame,
                sources: vec![ParamSource::Predicted; past],
            })
            .collect();
        let windows = items
            .iter()
            .map(|it| self.window_features(it))
            .collect::<Result<Vec<_>>>()?;
        let out = self.predictor.predict_eval(&batch_windows(&windows)?)?;
        for (b, &v) in videos.iter().enumerate() {
            let p = ParamVector::from_column(&out, b);
            if !p.is_finite() {
                return Err(Error::NonFinite(format!(
                    "prediction for video {}",
                    self.data.videos[v].id
                )));
            }
            self.cache.write(v, frame, p, stamp);
        }
        Ok(())
    }

    pub fn evaluate_test(&self) -> Result<EvalReport> {
        let videos: Vec<&VideoRecord> = self.data.test.iter().map(|&i| &self.data.videos[i]).collect();
        evaluate(
            &self.predictor,
            &self.body,
            &videos,
            self.past(),
            self.config.train.warm_start,
        )
    }

    /// Runs until `iterations` steps have been taken in total.
    pub fn run(&mut self, iterations: u64) -> Result<()> {
        while self.loader.iteration < iterations {
            self.step()?;
        }
        Ok(())
    }

    pub fn iteration(&self) -> u64 {
        self.loader.iteration
    }
}
