//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check draws random small instances, contracts the operation's
//! output with a random upstream tensor to get a scalar, and compares the
//! analytic gradient (inputs and parameters together) against central
//! differences. Instances whose ReLU pre-activations sit too close to zero
//! are redrawn, since the difference quotient straddles the kink there.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::encoder::{
    encode, encode_backward, regress, regress_backward, EncoderParams, Predictor, PredictorConfig, RegressorParams,
};
use crate::error::{Error, Result};
use crate::gcn::{
    gcn_block_backward, gcn_block_forward, msg3d_backward, msg3d_forward, msgcn_backward, msgcn_forward, Activation,
    BlockGeometry, GcnBlockParams, GraphSeq, ScaleWeights,
};
use crate::graph::{AdjacencySet, SkeletonGraph};
use crate::gru::{gru_step_backward, gru_step_cached, run_sequence, run_sequence_backward, GruCell};
use crate::kinematics::{fk_backward, fk_forward, fk_joints, project_2d, project_2d_backward, KinematicModel};
use crate::losses::{
    adversarial_loss, adversarial_loss_grad, discriminator_loss, discriminator_loss_grad, frame_objective, loss_2d,
    loss_3d, loss_smpl, loss_smpl_grad, mse_grad, AdversarialFn, FrameTargets, LossWeights, SupervisionFlags,
};
use crate::param_vector::{ParamVector, PARAM_DIM};
use crate::params::Parameters;
use crate::train::adversarial_term;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Tighter bound for the closed-form losses.
    pub loss_tolerance: f64,
    /// Minimum |pre-activation| for an instance to be accepted.
    pub kink_margin: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            step: 1e-5,
            tolerance: 1e-5,
            loss_tolerance: 1e-6,
            kink_margin: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub rejected: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale < 1e-12 {
        return diff;
    }
    diff / scale
}

pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut v = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        v[i] = x[i] + h;
        let up = f(&v)?;
        v[i] = x[i] - h;
        let down = f(&v)?;
        v[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

fn flatten<P: Parameters>(p: &P) -> Vec<f64> {
    p.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
}

fn assign<P: Parameters>(p: &mut P, v: &[f64]) {
    let mut k = 0;
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            *x = v[k];
            k += 1;
        }
    }
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> Result<SkeletonGraph> {
    let edges = (1..n).map(|j| (rng.gen_range(0..j), j)).collect();
    SkeletonGraph::new(n, edges)
}

/// Instance outcome: `None` when the draw sits on a kink.
type Instance = Option<(Vec<f64>, Vec<f64>)>;

/// Variables split as `[input | params]` for closures that rebuild both.
fn split_vars(v: &[f64], n_input: usize) -> (&[f64], &[f64]) {
    v.split_at(n_input)
}

struct Runner {
    cfg: GradcheckConfig,
    rng: ChaCha8Rng,
    results: Vec<CheckResult>,
}

impl Runner {
    fn check(
        &mut self,
        name: &str,
        tolerance: f64,
        mut draw: impl FnMut(&mut ChaCha8Rng, f64, f64) -> Result<Instance>,
    ) -> Result<()> {
        let (mut accepted, mut rejected, mut worst) = (0, 0, 0.0f64);
        let (h, margin) = (self.cfg.step, self.cfg.kink_margin);
        while accepted < self.cfg.instances {
            if rejected > 20 * self.cfg.instances {
                return Err(Error::Degenerate(format!(
                    "{name}: too many instances rejected at ReLU kinks"
                )));
            }
            match draw(&mut self.rng, h, margin)? {
                Some((analytic, numeric)) => {
                    worst = worst.max(relative_error(&analytic, &numeric));
                    accepted += 1;
                }
                None => rejected += 1,
            }
        }
        self.results.push(CheckResult {
            name: name.to_string(),
            instances: accepted,
            rejected,
            max_rel_error: worst,
            tolerance,
            passed: worst < tolerance,
        });
        Ok(())
    }
}

fn min_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()))
}

fn small_disc_config(rng: &mut ChaCha8Rng) -> DiscriminatorConfig {
    DiscriminatorConfig {
        channels: vec![3, rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(2..5)],
        gcn_scales: rng.gen_range(1..4),
        g3d_scales: rng.gen_range(1..3),
        window: 3,
    }
}

fn small_predictor_config(rng: &mut ChaCha8Rng, activation: Activation) -> PredictorConfig {
    PredictorConfig {
        feature_dim: rng.gen_range(2..5),
        hidden: rng.gen_range(2..5),
        regressor_width: rng.gen_range(3..6),
        layers: 2,
        n_iter: 3,
        two_gru: true,
        feedback: true,
        regressor_activation: activation,
    }
}

fn random_params(rng: &mut ChaCha8Rng, scale: f64) -> ParamVector {
    let mut p = ParamVector::zeros();
    for x in p.as_mut_slice() {
        *x = rng.gen_range(-scale..scale);
    }
    p[0] = rng.gen_range(0.8..1.2);
    p
}

pub fn run_all(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut r = Runner {
        cfg: cfg.clone(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        results: Vec::new(),
    };
    let tol = cfg.tolerance;
    let loss_tol = cfg.loss_tolerance;

    r.check("msgcn", tol, |rng, h, margin| {
        let n = rng.gen_range(2..7);
        let adj = AdjacencySet::build(&random_tree(rng, n)?, rng.gen_range(0..4));
        let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x = rand_mat(rng, n, ci);
        let w = ScaleWeights::init(rng, adj.num_scales(), ci, co);
        let up = rand_mat(rng, n, co);
        if min_abs(&msgcn_forward(&x, &adj, &w, Activation::Identity)?) < margin {
            return Ok(None);
        }
        let (dx, dw) = msgcn_backward(&x, &adj, &w, Activation::Relu, &up)?;
        let analytic: Vec<f64> = dx.iter().copied().chain(flatten(&dw)).collect();
        let vars: Vec<f64> = x.iter().copied().chain(flatten(&w)).collect();
        let numeric = numeric_gradient(
            |v| {
                let (xv, wv) = split_vars(v, x.len());
                let mut w2 = w.clone();
                assign(&mut w2, wv);
                let y = msgcn_forward(&DMatrix::from_column_slice(n, ci, xv), &adj, &w2, Activation::Relu)?;
                Ok(y.dot(&up))
            },
            &vars,
            h,
        )?;
        Ok(Some((analytic, numeric)))
    })?;

    r.check("msg3d", tol, |rng, h, margin| {
        let n = rng.gen_range(2..6);
        let frames = rng.gen_range(1..5);
        let adj = AdjacencySet::build(&random_tree(rng, n)?, rng.gen_range(0..3));
        let tiled = adj.tiled(if rng.gen_bool(0.5) { 3 } else { 1 })?;
        let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x = GraphSeq::new(frames, n, rand_mat(rng, frames * n, ci))?;
        let w = ScaleWeights::init(rng, tiled.len(), ci, co);
        let up = rand_mat(rng, frames * n, co);
        if min_abs(msg3d_forward(&x, &tiled, &w, Activation::Identity)?.data()) < margin {
            return Ok(None);
        }
        let (dx, dw) = msg3d_backward(&x, &tiled, &w, Activation::Relu, &up)?;
        let analytic: Vec<f64> = dx.iter().copied().chain(flatten(&dw)).collect();
        let vars: Vec<f64> = x.data().iter().copied().chain(flatten(&w)).collect();
        let numeric = numeric_gradient(
            |v| {
                let (xv, wv) = split_vars(v, x.data().len());
                let mut w2 = w.clone();
                assign(&mut w2, wv);
                let xs = GraphSeq::new(frames, n, DMatrix::from_column_slice(frames * n, ci, xv))?;
                Ok(msg3d_forward(&xs, &tiled, &w2, Activation::Relu)?.data().dot(&up))
            },
            &vars,
            h,
        )?;
        Ok(Some((analytic, numeric)))
    })?;

    r.check("gcn_block", tol, |rng, h, margin| {
        let n = rng.gen_range(2..6);
        let frames = rng.gen_range(1..5);
        let g = random_tree(rng, n)?;
        let geo = BlockGeometry::new(
            &AdjacencySet::build(&g, rng.gen_range(0..4)),
            &AdjacencySet::build(&g, rng.gen_range(0..3)),
            3,
        )?;
        let ci = rng.gen_range(1..4);
        let co = if rng.gen_bool(0.5) { ci } else { rng.gen_range(1..4) };
        let p = GcnBlockParams::init(rng, &geo, ci, co);
        let x = GraphSeq::new(frames, n, rand_mat(rng, frames * n, ci))?;
        let up = rand_mat(rng, frames * n, co);
        let (_, cache) = gcn_block_forward(&x, &geo, &p, Activation::Relu)?;
        if min_abs(&cache.pre_activation) < margin {
            return Ok(None);
        }
        let (dx, dp) = gcn_block_backward(&cache, &geo, &p, Activation::Relu, &up)?;
        let analytic: Vec<f64> = dx.iter().copied().chain(flatten(&dp)).collect();
        let vars: Vec<f64> = x.data().iter().copied().chain(flatten(&p)).collect();
        let numeric = numeric_gradient(
            |v| {
                let (xv, pv) = split_vars(v, x.data().len());
                let mut p2 = p.clone();
                assign(&mut p2, pv);
                let xs = GraphSeq::new(frames, n, DMatrix::from_column_slice(frames * n, ci, xv))?;
                Ok(gcn_block_forward(&xs, &geo, &p2, Activation::Relu)?.0.data().dot(&up))
            },
            &vars,
            h,
        )?;
        Ok(Some((analytic, numeric)))
    })?;

    r.check("discriminator", tol, |rng, h, margin| {
        let n = rng.gen_range(2..6);
        let frames = rng.gen_range(2..5);
        let cfg = small_disc_config(rng);
        let g = random_tree(rng, n)?;
        let d = Discriminator::new(rng, &g, cfg)?;
        let x = GraphSeq::new(frames, n, rand_mat(rng, frames * n, 3))?;
        let up: f64 = rng.gen_range(-1.0..1.0);
        let (_, cache) = d.forward(&x)?;
        if Discriminator::min_abs_pre_activation(&cache) < margin {
            return Ok(None);
        }
        let (dx, dp) = d.backward(&cache, up)?;
        let analytic: Vec<f64> = dx.iter().copied().chain(flatten(&dp)).collect();
        let vars: Vec<f64> = x.data().iter().copied().chain(flatten(&d.params)).collect();
        let numeric = numeric_gradient(
            |v| {
                let (xv, pv) = split_vars(v, x.data().len());
                let mut p2 = d.params.clone();
                assign(&mut p2, pv);
                let xs = GraphSeq::new(frames, n, DMatrix::from_column_slice(frames * n, 3, xv))?;
                Ok(up * d.forward_with(&p2, &xs)?.0)
            },
            &vars,
            h,
        )?;
        Ok(Some((analytic, numeric)))
    })?;

    r.check("gru_step", tol, |rng, h, _| {
        let (din, hd, b) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4));
        let cell = GruCell::init(rng, din, hd);
        let x = rand_mat(rng, din, b);
        let h0 = rand_mat(rng, hd, b);
        let up = rand_mat(rng, hd, b);
        let (_, cache) = gru_step_cached(&x, &h0, &cell)?;
        let (dx, dh, dc) = gru_step_backward(&cache, &cell, &up);
        let analytic: Vec<f64> = dx.iter().chain(dh.iter()).copied().chain(flatten(&dc)).collect();
        let vars: Vec<f64> = x.iter().chain(h0.iter()).copied().chain(flatten(&cell)).collect();
        let numeric = numeric_gradient(
            |v| {
                let (xv, rest) = v.split_at(x.len());
                let (hv, cv) = rest.split_at(h0.len());
                let mut c2 = cell.clone();
                assign(&mut c2, cv);
                let hn = gru_step_cached(
                    &DMatrix::from_column_slice(din, b, xv),
                    &DMatrix::from_column_slice(hd, b, hv),
                    &c2,
                )?
                .0;
                Ok(hn.dot(&up))
            },
            &vars,
            h,
        )?;
        Ok(Some((analytic, numeric)))
    })?;

    r.check("gru_sequence", tol, |rng, h, _| {
        let (din, hd, b, len) = (
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..3),
            rng.gen_range(1..6),
        );
        let cell = GruCell::init(rng, din, hd);
        let xs: Vec<_> = (0..len).map(|_| rand_mat(rng, din, b)).collect();
        let ups: Vec<_> = (0..len).map(|_| rand_mat(rng, hd, b)).collect();
        let (_, caches) = run_sequence(&cell, &xs)?;
        let (dxs, dc) = run_sequence_backward(&cell, &caches, &ups);
        let analytic: Vec<f64> = dxs.iter().flat_map(|m| m.iter().copied()).chain(flatten(&dc)).collect();
        let vars: Vec<f64> = xs
            .iter()
            .flat_map(|m| m.iter().copied())
            .chain(flatten(&cell))
            .collect();
        let numeric = numeric_gradient(
            |v| {
                let (xv, cv) = v.split_at(len * din * b);
                let mut c2 = cell.clone();
                assign(&mut c2, cv);
                let xs2: Vec<_> = xv
                    .chunks(din * b)
                    .map(|c| DMatrix::from_column_slice(din, b, c))
                    .collect();
                let (hs, _) = run_sequence(&c2, &xs2)?;
                Ok(hs.iter().zip(&ups).map(|(a, u)| a.dot(u)).sum())
            },
            &vars,
            h,
        )?;
        Ok(Some((analytic, numeric)))
    })?;

    r.check("encoder", tol, |rng, h, _| {
        let mut cfg = small_predictor_config(rng, Activation::Identity);
        cfg.two_gru = rng.gen_bool(0.7);
        let params = EncoderParams::init(rng, &cfg);
        let (len, b) = (rng.gen_range(1..5), rng.gen_range(1..3));
        let xs: Vec<_> = (0..len).map(|_| rand_mat(rng, cfg.input_dim(), b)).collect();
        let up_u = rand_mat(rng, cfg.hidden, b);
        let up_b = rand_mat(rng, cfg.hidden, b);
        let enc = encode(&xs, &params)?;
        let grads = encode_backward(&enc.cache, &params, Some(&up_u), enc.g_bi.as_ref().map(|_| &up_b));
        let numeric = numeric_gradient(
            |v| {
                let mut p2 = params.clone();
                assign(&mut p2, v);
                let e = encode(&xs, &p2)?;
                Ok(e.g_uni.dot(&up_u) + e.g_bi.map_or(0.0, |g| g.dot(&up_b)))
            },
            &flatten(&params),
            h,
        )?;
        Ok(Some((flatten(&grads), numeric)))
    })?;

    for act in [Activation::Identity, Activation::Relu] {
        let name = match act {
            Activation::Identity => "regressor_identity",
            Activation::Relu => "regressor_relu",
        };
        r.check(name, tol, |rng, h, margin| {
            let (hd, width, b) = (rng.gen_range(1..5), rng.gen_range(2..6), rng.gen_range(1..3));
            let mut params = RegressorParams::init(rng, hd, width);
            // the default init keeps the last layer tiny; widen it so every
            // iteration's feedback path carries signal
            params.w3 = rand_mat(rng, PARAM_DIM, width) * 0.3;
            let mean = random_params(rng, 0.5);
            let g = rand_mat(rng, hd, b);
            let up = rand_mat(rng, PARAM_DIM, b);
            let (_, cache) = regress(&g, &params, &mean, 3, act)?;
            if act == Activation::Relu && cache.min_abs_pre_activation() < margin {
                return Ok(None);
            }
            let (dg, grads) = regress_backward(&cache, &params, &up);
            let analytic: Vec<f64> = dg.iter().copied().chain(flatten(&grads)).collect();
            let vars: Vec<f64> = g.iter().copied().chain(flatten(&params)).collect();
            let numeric = numeric_gradient(
                |v| {
                    let (gv, pv) = split_vars(v, g.len());
                    let mut p2 = params.clone();
                    assign(&mut p2, pv);
                    Ok(regress(&DMatrix::from_column_slice(hd, b, gv), &p2, &mean, 3, act)?
                        .0
                        .dot(&up))
                },
                &vars,
                h,
            )?;
            Ok(Some((analytic, numeric)))
        })?;
    }

    let body = KinematicModel::default_body();
    r.check("fk_joints", tol, |rng, h, _| {
        let mut p = random_params(rng, 1.0);
        // some joints near rest to cover the small-angle branch
        for j in 0..24 {
            if rng.gen_bool(0.3) {
                let s = rng.gen_range(1e-4..0.05);
                for v in &mut p.pose_mut()[3 * j..3 * j + 3] {
                    *v *= s;
                }
            }
        }
        let up = rand_mat(rng, body.num_joints(), 3);
        let (_, cache) = fk_forward(p.pose(), p.shape(), &body)?;
        let (dpose, dshape) = fk_backward(&cache, &body, &up)?;
        let analytic: Vec<f64> = dpose.into_iter().chain(dshape).collect();
        let vars: Vec<f64> = p.pose().iter().chain(p.shape()).copied().collect();
        let numeric = numeric_gradient(
            |v| {
                let (pose, shape) = v.split_at(72);
                Ok(fk_joints(pose, shape, &body)?.dot(&up))
            },
            &vars,
            h,
        )?;
        Ok(Some((analytic, numeric)))
    })?;

    r.check("project_2d", tol, |rng, h, _| {
        let n = rng.gen_range(1..15);
        let j = rand_mat(rng, n, 3);
        let cam = [
            rng.gen_range(0.5..1.5),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
        ];
        let up = rand_mat(rng, n, 2);
        let (dj, dc) = project_2d_backward(&j, &cam, &up)?;
        let analytic: Vec<f64> = dj.iter().copied().chain(dc).collect();
        let vars: Vec<f64> = j.iter().copied().chain(cam).collect();
        let numeric = numeric_gradient(
            |v| {
                let (jv, cv) = v.split_at(n * 3);
                Ok(project_2d(&DMatrix::from_column_slice(n, 3, jv), cv)?.dot(&up))
            },
            &vars,
            h,
        )?;
        Ok(Some((analytic, numeric)))
    })?;

    r.check("loss_3d", loss_tol, |rng, h, _| {
        let n = rng.gen_range(1..15);
        let (p, g) = (rand_mat(rng, n, 3), rand_mat(rng, n, 3));
        let numeric = numeric_gradient(|v| loss_3d(&DMatrix::from_column_slice(n, 3, v), &g), p.as_slice(), h)?;
        Ok(Some((mse_grad(&p, &g)?.as_slice().to_vec(), numeric)))
    })?;

    r.check("loss_2d", loss_tol, |rng, h, _| {
        let n = rng.gen_range(1..15);
        let (p, g) = (rand_mat(rng, n, 2), rand_mat(rng, n, 2));
        let numeric = numeric_gradient(|v| loss_2d(&DMatrix::from_column_slice(n, 2, v), &g), p.as_slice(), h)?;
        Ok(Some((mse_grad(&p, &g)?.as_slice().to_vec(), numeric)))
    })?;

    r.check("loss_smpl", loss_tol, |rng, h, _| {
        let (p, g) = (random_params(rng, 1.0), random_params(rng, 1.0));
        let numeric = numeric_gradient(|v| Ok(loss_smpl(&ParamVector::from_slice(v)?, &g)), p.as_slice(), h)?;
        Ok(Some((loss_smpl_grad(&p, &g).as_slice().to_vec(), numeric)))
    })?;

    r.check("adversarial_loss", loss_tol, |rng, h, _| {
        let s: f64 = rng.gen_range(-2.0..2.0);
        let numeric = numeric_gradient(|v| Ok(adversarial_loss(v[0])), &[s], h)?;
        Ok(Some((vec![adversarial_loss_grad(s)], numeric)))
    })?;

    r.check("discriminator_loss", loss_tol, |rng, h, _| {
        let (nr, nf) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let real: Vec<f64> = (0..nr).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let fake: Vec<f64> = (0..nf).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (dr, df) = discriminator_loss_grad(&real, &fake)?;
        let vars: Vec<f64> = real.iter().chain(&fake).copied().collect();
        let numeric = numeric_gradient(|v| discriminator_loss(&v[..nr], &v[nr..]), &vars, h)?;
        Ok(Some((dr.into_iter().chain(df).collect(), numeric)))
    })?;

    r.check("frame_objective", tol, |rng, h, margin| {
        let pred = random_params(rng, 0.5);
        let gt = random_params(rng, 0.5);
        let n = body.num_joints();
        let j2 = rand_mat(rng, n, 2) * 0.5;
        let j3 = rand_mat(rng, n, 3) * 0.5;
        let flags = SupervisionFlags {
            has_3d: rng.gen_bool(0.5),
            has_smpl: rng.gen_bool(0.5),
        };
        let targets = FrameTargets {
            joints2d: &j2,
            joints3d: Some(&j3),
            params: Some(&gt),
            flags,
        };
        let w = LossWeights {
            w2d: rng.gen_range(0.5..2.0),
            w3d: rng.gen_range(0.5..2.0),
            w_theta: rng.gen_range(0.5..2.0),
            w_adv: rng.gen_range(0.5..2.0),
        };
        let mut cfg = small_disc_config(rng);
        cfg.gcn_scales = 2;
        let disc = Discriminator::new(rng, body.skeleton(), cfg)?;
        let past: Vec<_> = (0..rng.gen_range(1..4)).map(|_| rand_mat(rng, n, 3) * 0.5).collect();
        let adv_fn = adversarial_term(&disc, past.clone(), body.root());
        let adv = Some(&adv_fn as &AdversarialFn);
        if !flags.has_smpl {
            let mut frames = past.clone();
            frames.push(fk_joints(pred.pose(), pred.shape(), &body)?);
            let x = crate::discriminator::MotionSample::from_joints(
                &frames,
                body.root(),
                crate::discriminator::MotionLabel::Generated,
            )?;
            if Discriminator::min_abs_pre_activation(&disc.forward(&x.skeleton)?.1) < margin {
                return Ok(None);
            }
        }
        let (_, grad) = frame_objective(&pred, &targets, &body, &w, adv)?;
        let numeric = numeric_gradient(
            |v| {
                Ok(frame_objective(&ParamVector::from_slice(v)?, &targets, &body, &w, adv)?
                    .0
                    .total)
            },
            pred.as_slice(),
            h,
        )?;
        Ok(Some((grad.as_slice().to_vec(), numeric)))
    })?;

    r.check("predictor", tol, |rng, h, margin| {
        let act = if rng.gen_bool(0.5) {
            Activation::Identity
        } else {
            Activation::Relu
        };
        let mut cfg = small_predictor_config(rng, act);
        cfg.two_gru = rng.gen_bool(0.7);
        let mean = random_params(rng, 0.5);
        let mut p = Predictor::new(rng, cfg.clone(), mean)?;
        p.params.regressor.w3 = rand_mat(rng, PARAM_DIM, cfg.regressor_width) * 0.3;
        let (len, b) = (rng.gen_range(1..4), rng.gen_range(1..3));
        let xs: Vec<_> = (0..len).map(|_| rand_mat(rng, cfg.input_dim(), b)).collect();
        let up_u = rand_mat(rng, PARAM_DIM, b);
        let up_b = rand_mat(rng, PARAM_DIM, b);
        let fwd = p.forward_train(&xs)?;
        if act == Activation::Relu && fwd.min_abs_pre_activation() < margin {
            return Ok(None);
        }
        let grads = p.backward_train(&fwd, &up_u, fwd.bi.as_ref().map(|_| &up_b))?;
        let numeric = numeric_gradient(
            |v| {
                let mut q = p.clone();
                assign(&mut q.params, v);
                let f = q.forward_train(&xs)?;
                Ok(f.uni.dot(&up_u) + f.bi.map_or(0.0, |m| m.dot(&up_b)))
            },
            &flatten(&p.params),
            h,
        )?;
        Ok(Some((flatten(&grads), numeric)))
    })?;

    Ok(GradcheckReport { results: r.results })
}
