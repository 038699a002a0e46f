//! Temporally embedded predictor.
//!
//! Each frame of the `T+1` window is a static feature concatenated with a
//! parameter slot carrying the previous prediction (or label) for that
//! frame, and zeros for the current frame. A uni-directional and a
//! bi-directional recurrent stack encode the window; an iterative regressor
//! maps the current frame's hidden state to body parameters.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::gcn::Activation;
use crate::gru::{run_sequence, run_sequence_backward, GruCell, StepCache};
use crate::param_vector::{ParamVector, PARAM_DIM};
use crate::params::{add_bias, glorot, sum_columns, uniform, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub regressor_width: usize,
    pub layers: usize,
    pub n_iter: usize,
    /// Add the bi-directional stack next to the uni-directional one.
    pub two_gru: bool,
    /// Feed previous parameters into the past frames' slots. When false the
    /// slots are all zeros.
    pub feedback: bool,
    pub regressor_activation: Activation,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            hidden: 128,
            regressor_width: 128,
            layers: 2,
            n_iter: 3,
            two_gru: true,
            feedback: true,
            regressor_activation: Activation::Identity,
        }
    }
}

impl PredictorConfig {
    pub fn input_dim(&self) -> usize {
        self.feature_dim + PARAM_DIM
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.regressor_width == 0 {
            return Err(Error::Config("predictor widths must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("need at least one recurrent layer".into()));
        }
        if self.n_iter == 0 {
            return Err(Error::Config("regressor needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Assembles the `T+1` input vectors for one window.
///
/// `past_params[i]` fills the slot of frame `i`; the final (current) frame's
/// slot is always zero.
pub fn build_input_features(
    static_feats: &[&[f64]],
    past_params: &[Option<&ParamVector>],
) -> Result<Vec<DVector<f64>>> {
    if static_feats.len() != past_params.len() + 1 {
        return shape_err(format!(
            "{} static features for {} past parameter slots",
            static_feats.len(),
            past_params.len()
        ));
    }
    let f = static_feats[0].len();
    let mut out = Vec::with_capacity(static_feats.len());
    for (i, s) in static_feats.iter().enumerate() {
        if s.len() != f {
            return shape_err("static features differ in length");
        }
        let mut v = DVector::zeros(f + PARAM_DIM);
        v.rows_mut(0, f).copy_from_slice(s);
        if i < past_params.len() {
            let p =
                past_params[i].ok_or_else(|| Error::MissingLabel(format!("no parameter source for past frame {i}")))?;
            v.rows_mut(f, PARAM_DIM).copy_from_slice(p.as_slice());
        }
        out.push(v);
    }
    Ok(out)
}

/// Stacks per-sample windows into per-frame `D x B` matrices.
pub fn batch_windows(windows: &[Vec<DVector<f64>>]) -> Result<Vec<DMatrix<f64>>> {
    let Some(first) = windows.first() else {
        return shape_err("no windows to batch");
    };
    let (len, dim) = (first.len(), first[0].len());
    let mut out = vec![DMatrix::zeros(dim, windows.len()); len];
    for (b, w) in windows.iter().enumerate() {
        if w.len() != len {
            return shape_err("windows differ in length");
        }
        for (t, v) in w.iter().enumerate() {
            if v.len() != dim {
                return shape_err("feature vectors differ in length");
            }
            out[t].column_mut(b).copy_from(v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiStack {
    pub fwd: Vec<GruCell>,
    pub bwd: Vec<GruCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub uni: Vec<GruCell>,
    pub bi: Option<BiStack>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &PredictorConfig) -> Self {
        let (d, h) = (cfg.input_dim(), cfg.hidden);
        let uni = (0..cfg.layers)
            .map(|l| GruCell::init(rng, if l == 0 { d } else { h }, h))
            .collect();
        let bi = cfg.two_gru.then(|| {
            let mut fwd = Vec::new();
            let mut bwd = Vec::new();
            for l in 0..cfg.layers {
                let input = if l == 0 { d } else { 2 * h };
                fwd.push(GruCell::init(rng, input, h));
                bwd.push(GruCell::init(rng, input, h));
            }
            BiStack { fwd, bwd }
        });
        Self { uni, bi }
    }

    pub fn hidden(&self) -> usize {
        self.uni[0].hidden()
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out = Vec::new();
        for (l, c) in self.uni.iter().enumerate() {
            out.extend(c.tensors().into_iter().map(|(n, t)| (format!("uni.l{l}.{n}"), t)));
        }
        if let Some(bi) = &self.bi {
            for (l, c) in bi.fwd.iter().enumerate() {
                out.extend(c.tensors().into_iter().map(|(n, t)| (format!("bi.fwd.l{l}.{n}"), t)));
            }
            for (l, c) in bi.bwd.iter().enumerate() {
                out.extend(c.tensors().into_iter().map(|(n, t)| (format!("bi.bwd.l{l}.{n}"), t)));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out = Vec::new();
        for c in &mut self.uni {
            out.extend(c.tensors_mut());
        }
        if let Some(bi) = &mut self.bi {
            for c in &mut bi.fwd {
                out.extend(c.tensors_mut());
            }
            for c in &mut bi.bwd {
                out.extend(c.tensors_mut());
            }
        }
        out
    }
}

pub struct EncodeCache {
    uni: Vec<Vec<StepCache>>,
    bi_fwd: Vec<Vec<StepCache>>,
    bi_bwd: Vec<Vec<StepCache>>,
    len: usize,
    cols: usize,
}

pub struct Encoded {
    pub g_uni: DMatrix<f64>,
    pub g_bi: Option<DMatrix<f64>>,
    pub cache: EncodeCache,
}

fn concat_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

/// Encodes a window given per-frame `D x B` inputs (oldest first). `g_uni`
/// is the uni-directional top state at the last frame; `g_bi` averages the
/// forward and backward top states at the last frame.
pub fn encode(xs: &[DMatrix<f64>], params: &EncoderParams) -> Result<Encoded> {
    if xs.is_empty() {
        return shape_err("empty window");
    }
    let len = xs.len();
    let cols = xs[0].ncols();
    let mut cache = EncodeCache {
        uni: Vec::new(),
        bi_fwd: Vec::new(),
        bi_bwd: Vec::new(),
        len,
        cols,
    };
    let mut layer_in: Vec<DMatrix<f64>> = xs.to_vec();
    for cell in &params.uni {
        let (hs, c) = run_sequence(cell, &layer_in)?;
        cache.uni.push(c);
        layer_in = hs;
    }
    let g_uni = layer_in.pop().expect("non-empty window");

    let g_bi = match &params.bi {
        None => None,
        Some(bi) => {
            let mut layer_in: Vec<DMatrix<f64>> = xs.to_vec();
            let mut top = None;
            for (f, b) in bi.fwd.iter().zip(bi.bwd.iter()) {
                let (hf, cf) = run_sequence(f, &layer_in)?;
                let rev: Vec<_> = layer_in.iter().rev().cloned().collect();
                let (mut hb, cb) = run_sequence(b, &rev)?;
                hb.reverse();
                cache.bi_fwd.push(cf);
                cache.bi_bwd.push(cb);
                top = Some((hf[len - 1].clone(), hb[len - 1].clone()));
                layer_in = hf.iter().zip(hb.iter()).map(|(a, b)| concat_rows(a, b)).collect();
            }
            let (f, b) = top.expect("at least one layer");
            Some((f + b) * 0.5)
        }
    };
    Ok(Encoded { g_uni, g_bi, cache })
}

/// Parameter gradients of the encoder given gradients on its two outputs.
pub fn encode_backward(
    cache: &EncodeCache,
    params: &EncoderParams,
    d_uni: Option<&DMatrix<f64>>,
    d_bi: Option<&DMatrix<f64>>,
) -> EncoderParams {
    let h = params.hidden();
    let (len, cols) = (cache.len, cache.cols);
    let zeros = || vec![DMatrix::zeros(h, cols); len];
    let mut grads = params.zeros_like();

    if let Some(d) = d_uni {
        let mut d_out = zeros();
        d_out[len - 1] = d.clone();
        for l in (0..params.uni.len()).rev() {
            let (dxs, g) = run_sequence_backward(&params.uni[l], &cache.uni[l], &d_out);
            grads.uni[l] = g;
            d_out = dxs;
        }
    }

    if let (Some(d), Some(bi)) = (d_bi, &params.bi) {
        let gbi = grads.bi.as_mut().expect("grads mirror params");
        let half = d * 0.5;
        let mut d_fwd = zeros();
        let mut d_bwd = zeros();
        d_fwd[len - 1] = half.clone();
        d_bwd[len - 1] = half;
        for l in (0..bi.fwd.len()).rev() {
            let (dxf, gf) = run_sequence_backward(&bi.fwd[l], &cache.bi_fwd[l], &d_fwd);
            // backward direction ran on the reversed sequence
            let d_rev: Vec<_> = d_bwd.iter().rev().cloned().collect();
            let (mut dxb, gb) = run_sequence_backward(&bi.bwd[l], &cache.bi_bwd[l], &d_rev);
            dxb.reverse();
            gbi.fwd[l] = gf;
            gbi.bwd[l] = gb;
            if l > 0 {
                for t in 0..len {
                    let s = &dxf[t] + &dxb[t];
                    d_fwd[t] = s.rows(0, h).into_owned();
                    d_bwd[t] = s.rows(h, h).into_owned();
                }
            }
        }
    }
    grads
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    pub w1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub w3: DMatrix<f64>,
    pub b3: DMatrix<f64>,
}

impl RegressorParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, hidden: usize, width: usize) -> Self {
        let input = hidden + PARAM_DIM;
        Self {
            w1: glorot(rng, width, input, input, width),
            b1: DMatrix::zeros(width, 1),
            w2: glorot(rng, width, width, width, width),
            b2: DMatrix::zeros(width, 1),
            // small output layer so an untrained regressor stays near the mean
            w3: uniform(rng, PARAM_DIM, width, 0.01 * (6.0 / (width + PARAM_DIM) as f64).sqrt()),
            b3: DMatrix::zeros(PARAM_DIM, 1),
        }
    }

    pub fn input_hidden(&self) -> usize {
        self.w1.ncols() - PARAM_DIM
    }
}

impl Parameters for RegressorParams {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
            ("w3".into(), &self.w3),
            ("b3".into(), &self.b3),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

struct RegressStep {
    input: DMatrix<f64>,
    a1: DMatrix<f64>,
    h1: DMatrix<f64>,
    a2: DMatrix<f64>,
    h2: DMatrix<f64>,
}

pub struct RegressCache {
    steps: Vec<RegressStep>,
    activation: Activation,
}

impl RegressCache {
    /// Smallest hidden pre-activation magnitude, for kink-aware checks.
    pub fn min_abs_pre_activation(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| s.a1.iter().chain(s.a2.iter()))
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Iterative error feedback from the mean parameters. `g` is `h x B`; the
/// result is `85 x B`.
pub fn regress(
    g: &DMatrix<f64>,
    params: &RegressorParams,
    mean: &ParamVector,
    n_iter: usize,
    activation: Activation,
) -> Result<(DMatrix<f64>, RegressCache)> {
    if n_iter == 0 {
        return shape_err("n_iter must be at least 1");
    }
    if g.nrows() != params.input_hidden() {
        return shape_err(format!(
            "hidden has {} rows, regressor expects {}",
            g.nrows(),
            params.input_hidden()
        ));
    }
    let cols = g.ncols();
    let h = g.nrows();
    let mut theta = DMatrix::from_fn(PARAM_DIM, cols, |i, _| mean[i]);
    let mut steps = Vec::with_capacity(n_iter);
    for _ in 0..n_iter {
        let mut input = DMatrix::zeros(h + PARAM_DIM, cols);
        input.rows_mut(0, h).copy_from(g);
        input.rows_mut(h, PARAM_DIM).copy_from(&theta);
        let mut a1 = &params.w1 * &input;
        add_bias(&mut a1, &params.b1);
        let h1 = activation.apply(&a1);
        let mut a2 = &params.w2 * &h1;
        add_bias(&mut a2, &params.b2);
        let h2 = activation.apply(&a2);
        let mut delta = &params.w3 * &h2;
        add_bias(&mut delta, &params.b3);
        theta += delta;
        steps.push(RegressStep { input, a1, h1, a2, h2 });
    }
    Ok((theta, RegressCache { steps, activation }))
}

/// Returns `(d g, parameter gradients)` for upstream `d theta`.
pub fn regress_backward(
    cache: &RegressCache,
    params: &RegressorParams,
    d_theta: &DMatrix<f64>,
) -> (DMatrix<f64>, RegressorParams) {
    let h = params.input_hidden();
    let mut grads = params.zeros_like();
    let mut d_theta = d_theta.clone();
    let mut dg = DMatrix::zeros(h, d_theta.ncols());
    for s in cache.steps.iter().rev() {
        grads.w3 += &d_theta * s.h2.transpose();
        grads.b3 += sum_columns(&d_theta);
        let dh2 = params.w3.transpose() * &d_theta;
        let da2 = cache.activation.backward(&s.a2, &dh2);
        grads.w2 += &da2 * s.h1.transpose();
        grads.b2 += sum_columns(&da2);
        let dh1 = params.w2.transpose() * &da2;
        let da1 = cache.activation.backward(&s.a1, &dh1);
        grads.w1 += &da1 * s.input.transpose();
        grads.b1 += sum_columns(&da1);
        let d_in = params.w1.transpose() * &da1;
        dg += d_in.rows(0, h);
        d_theta += d_in.rows(h, PARAM_DIM);
    }
    (dg, grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub encoder: EncoderParams,
    pub regressor: RegressorParams,
}

impl Parameters for PredictorParams {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out: Vec<_> = self
            .encoder
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t))
            .collect();
        out.extend(
            self.regressor
                .tensors()
                .into_iter()
                .map(|(n, t)| (format!("regressor.{n}"), t)),
        );
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.regressor.tensors_mut());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Training-mode forward: one prediction per recurrent branch.
pub struct TrainForward {
    pub uni: DMatrix<f64>,
    pub bi: Option<DMatrix<f64>>,
    encoded: EncodeCache,
    uni_cache: RegressCache,
    bi_cache: Option<RegressCache>,
}

impl TrainForward {
    pub fn min_abs_pre_activation(&self) -> f64 {
        let u = self.uni_cache.min_abs_pre_activation();
        self.bi_cache.as_ref().map_or(u, |c| u.min(c.min_abs_pre_activation()))
    }
}

#[derive(Debug, Clone)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub params: PredictorParams,
    pub mean: ParamVector,
}

impl Predictor {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: PredictorConfig, mean: ParamVector) -> Result<Self> {
        config.validate()?;
        let params = PredictorParams {
            encoder: EncoderParams::init(rng, &config),
            regressor: RegressorParams::init(rng, config.hidden, config.regressor_width),
        };
        Ok(Self { config, params, mean })
    }

    /// Checks that `params` has the shapes `config` implies.
    pub fn with_params(config: PredictorConfig, params: PredictorParams, mean: ParamVector) -> Result<Self> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let reference = Self::new(&mut rng, config.clone(), mean.clone())?;
        let a = reference.params.tensors();
        let b = params.tensors();
        if a.len() != b.len() {
            return shape_err("predictor parameter count differs from config");
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return shape_err(format!("predictor parameter {nb} does not match config"));
            }
        }
        Ok(Self { config, params, mean })
    }

    /// Parameter slot contents for a past frame under this config.
    pub fn slot<'a>(&self, source: &'a ParamVector, zeros: &'a ParamVector) -> &'a ParamVector {
        if self.config.feedback {
            source
        } else {
            zeros
        }
    }

    fn check_inputs(&self, xs: &[DMatrix<f64>]) -> Result<()> {
        if xs.is_empty() {
            return shape_err("empty window");
        }
        if xs
            .iter()
            .any(|x| x.nrows() != self.config.input_dim() || x.ncols() != xs[0].ncols())
        {
            return shape_err(format!("window inputs must be {} x B", self.config.input_dim()));
        }
        Ok(())
    }

    /// Eval-mode prediction from the averaged branch states, `85 x B`.
    pub fn predict_eval(&self, xs: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
        self.check_inputs(xs)?;
        let enc = encode(xs, &self.params.encoder)?;
        let g = match &enc.g_bi {
            Some(b) => (&enc.g_uni + b) * 0.5,
            None => enc.g_uni,
        };
        Ok(regress(
            &g,
            &self.params.regressor,
            &self.mean,
            self.config.n_iter,
            self.config.regressor_activation,
        )?
        .0)
    }

    pub fn forward_train(&self, xs: &[DMatrix<f64>]) -> Result<TrainForward> {
        self.check_inputs(xs)?;
        let enc = encode(xs, &self.params.encoder)?;
        let act = self.config.regressor_activation;
        let (uni, uni_cache) = regress(&enc.g_uni, &self.params.regressor, &self.mean, self.config.n_iter, act)?;
        let (bi, bi_cache) = match &enc.g_bi {
            Some(g) => {
                let (t, c) = regress(g, &self.params.regressor, &self.mean, self.config.n_iter, act)?;
                (Some(t), Some(c))
            }
            None => (None, None),
        };
        Ok(TrainForward {
            uni,
            bi,
            encoded: enc.cache,
            uni_cache,
            bi_cache,
        })
    }

    pub fn backward_train(
        &self,
        fwd: &TrainForward,
        d_uni: &DMatrix<f64>,
        d_bi: Option<&DMatrix<f64>>,
    ) -> Result<PredictorParams> {
        if d_uni.shape() != fwd.uni.shape() {
            return shape_err("upstream gradient shape");
        }
        let (dg_uni, mut reg) = regress_backward(&fwd.uni_cache, &self.params.regressor, d_uni);
        let dg_bi = match (&fwd.bi_cache, d_bi) {
            (Some(c), Some(d)) => {
                let (dg, g) = regress_backward(c, &self.params.regressor, d);
                reg.accumulate(&g);
                Some(dg)
            }
            (None, Some(_)) => return shape_err("no bi-directional branch for its gradient"),
            _ => None,
        };
        let enc = encode_backward(&fwd.encoded, &self.params.encoder, Some(&dg_uni), dg_bi.as_ref());
        Ok(PredictorParams {
            encoder: enc,
            regressor: reg,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> PredictorConfig {
        PredictorConfig {
            feature_dim: 4,
            hidden: 5,
            regressor_width: 6,
            layers: 2,
            n_iter: 3,
            two_gru: true,
            feedback: true,
            regressor_activation: Activation::Identity,
        }
    }

    fn rand_window(rng: &mut ChaCha8Rng, len: usize, d: usize, b: usize) -> Vec<DMatrix<f64>> {
        (0..len)
            .map(|_| DMatrix::from_fn(d, b, |_, _| rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn current_slot_is_zero_and_labels_pass_through() {
        let feats: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64; 2048]).collect();
        let refs: Vec<&[f64]> = feats.iter().map(|v| v.as_slice()).collect();
        let mut labels = Vec::new();
        for i in 0..5 {
            let mut p = ParamVector::zeros();
            p[0] = 1.0 + i as f64;
            p[84] = -(i as f64);
            labels.push(p);
        }
        let slots: Vec<_> = labels.iter().map(Some).collect();
        let out = build_input_features(&refs, &slots).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|v| v.len() == 2133));
        assert!(out[5].rows(2048, 85).iter().all(|&v| v == 0.0));
        for i in 0..5 {
            assert_eq!(out[i].rows(2048, 85).as_slice(), labels[i].as_slice());
        }
    }

    #[test]
    fn missing_past_source_is_an_error() {
        let feats = [vec![0.0; 3], vec![0.0; 3]];
        let refs: Vec<&[f64]> = feats.iter().map(|v| v.as_slice()).collect();
        assert!(matches!(
            build_input_features(&refs, &[None]),
            Err(Error::MissingLabel(_))
        ));
    }

    #[test]
    fn zero_cells_encode_to_zero() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = EncoderParams::init(&mut rng, &cfg);
        params.scale(0.0);
        let xs = rand_window(&mut rng, 6, cfg.input_dim(), 2);
        let enc = encode(&xs, &params).unwrap();
        assert_eq!(enc.g_uni.amax(), 0.0);
        assert_eq!(enc.g_bi.unwrap().amax(), 0.0);
    }

    #[test]
    fn encode_matches_unrolled_oracle() {
        let cfg = PredictorConfig {
            layers: 2,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = EncoderParams::init(&mut rng, &cfg);
        let xs = rand_window(&mut rng, 4, cfg.input_dim(), 1);
        let step = |c: &GruCell, x: &DMatrix<f64>, h: &DMatrix<f64>| crate::gru::gru_step(x, h, c).unwrap();
        let unroll = |c: &GruCell, ins: &[DMatrix<f64>]| {
            let mut h = DMatrix::zeros(5, 1);
            let mut out = Vec::new();
            for x in ins {
                h = step(c, x, &h);
                out.push(h.clone());
            }
            out
        };
        let l0 = unroll(&params.uni[0], &xs);
        let l1 = unroll(&params.uni[1], &l0);
        let bi = params.bi.as_ref().unwrap();
        let f0 = unroll(&bi.fwd[0], &xs);
        let rev: Vec<_> = xs.iter().rev().cloned().collect();
        let mut b0 = unroll(&bi.bwd[0], &rev);
        b0.reverse();
        let cat: Vec<_> = f0.iter().zip(&b0).map(|(a, b)| concat_rows(a, b)).collect();
        let f1 = unroll(&bi.fwd[1], &cat);
        let rev: Vec<_> = cat.iter().rev().cloned().collect();
        let b1 = unroll(&bi.bwd[1], &rev);
        // b1[0] is the backward state at the last frame
        let expect_bi = (&f1[3] + &b1[0]) * 0.5;
        let enc = encode(&xs, &params).unwrap();
        assert!((enc.g_uni - &l1[3]).amax() < 1e-15);
        assert!((enc.g_bi.unwrap() - expect_bi).amax() < 1e-15);
    }

    #[test]
    fn zero_output_layer_returns_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = RegressorParams::init(&mut rng, 5, 6);
        params.w3.fill(0.0);
        params.b3.fill(0.0);
        let mut mean = ParamVector::zeros();
        mean[0] = 0.9;
        mean[50] = 0.3;
        let g = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        for n in 1..4 {
            let (t, _) = regress(&g, &params, &mean, n, Activation::Relu).unwrap();
            for c in 0..3 {
                assert_eq!(ParamVector::from_column(&t, c), mean);
            }
        }
    }

    #[test]
    fn regress_matches_unrolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = RegressorParams::init(&mut rng, 5, 6);
        params.w3 = DMatrix::from_fn(85, 6, |_, _| rng.gen_range(-0.2..0.2));
        params.b1 = DMatrix::from_fn(6, 1, |_, _| rng.gen_range(-0.2..0.2));
        let mean = ParamVector::from_slice(&(0..85).map(|i| (i as f64) * 0.01).collect::<Vec<_>>()).unwrap();
        let g = DMatrix::from_fn(5, 1, |_, _| rng.gen_range(-1.0..1.0));
        let mut theta = mean.to_column();
        for _ in 0..3 {
            let mut input = DMatrix::zeros(90, 1);
            input.rows_mut(0, 5).copy_from(&g);
            input.rows_mut(5, 85).copy_from(&theta);
            let h1 = (&params.w1 * input + &params.b1).map(|v| v.max(0.0));
            let h2 = (&params.w2 * h1 + &params.b2).map(|v| v.max(0.0));
            theta += &params.w3 * h2 + &params.b3;
        }
        let (got, _) = regress(&g, &params, &mean, 3, Activation::Relu).unwrap();
        assert_eq!(got.nrows(), 85);
        assert!((got - theta).amax() < 1e-14);
    }

    #[test]
    fn eval_equals_train_branch_when_states_match() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = Predictor::new(&mut rng, cfg.clone(), ParamVector::zeros()).unwrap();
        // identical branches: copy the uni stack into the bi forward stack
        // and zero the backward stack's contribution by matching it too
        let bi = p.params.encoder.bi.as_mut().unwrap();
        bi.fwd[0] = p.params.encoder.uni[0].clone();
        bi.bwd[0] = p.params.encoder.uni[0].clone();
        let h = cfg.hidden;
        for c in [&mut bi.fwd[1], &mut bi.bwd[1]] {
            c.w = DMatrix::zeros(3 * h, 2 * h);
            c.u = p.params.encoder.uni[1].u.clone();
            c.b = p.params.encoder.uni[1].b.clone();
        }
        p.params.encoder.uni[1].w.fill(0.0);
        // all-equal inputs make every direction see the same sequence
        let x = DMatrix::from_fn(cfg.input_dim(), 1, |_, _| rng.gen_range(-1.0..1.0));
        let xs = vec![x.clone(); 1];
        let t = p.forward_train(&xs).unwrap();
        let e = p.predict_eval(&xs).unwrap();
        assert!((&t.uni - t.bi.as_ref().unwrap()).amax() < 1e-15);
        assert!((e - t.uni).amax() < 1e-15);
    }

    #[test]
    fn eval_is_regress_of_average_state() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Predictor::new(&mut rng, cfg.clone(), ParamVector::zeros()).unwrap();
        let xs = rand_window(&mut rng, 6, cfg.input_dim(), 2);
        let enc = encode(&xs, &p.params.encoder).unwrap();
        let g = (&enc.g_uni + enc.g_bi.as_ref().unwrap()) * 0.5;
        let (expect, _) = regress(&g, &p.params.regressor, &p.mean, 3, Activation::Identity).unwrap();
        let got = p.predict_eval(&xs).unwrap();
        assert_eq!(got, expect);
        assert_eq!(p.predict_eval(&xs).unwrap(), got);
        // swapping the branch states leaves the average unchanged
        let swapped = (enc.g_bi.as_ref().unwrap() + &enc.g_uni) * 0.5;
        assert_eq!(swapped, g);
    }

    #[test]
    fn single_gru_has_one_branch() {
        let cfg = PredictorConfig {
            two_gru: false,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Predictor::new(&mut rng, cfg.clone(), ParamVector::zeros()).unwrap();
        let xs = rand_window(&mut rng, 6, cfg.input_dim(), 1);
        let t = p.forward_train(&xs).unwrap();
        assert!(t.bi.is_none());
        assert_eq!(p.predict_eval(&xs).unwrap(), t.uni);
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = Predictor::new(&mut rng, cfg.clone(), ParamVector::zeros()).unwrap();
        let xs = rand_window(&mut rng, 6, cfg.input_dim(), 2);
        let t = p.forward_train(&xs).unwrap();
        let z = DMatrix::zeros(85, 2);
        let g = p.backward_train(&t, &z, Some(&z)).unwrap();
        assert!(g.tensors().iter().all(|(_, t)| t.amax() == 0.0));
    }

    #[test]
    fn with_params_checks_shapes() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Predictor::new(&mut rng, cfg.clone(), ParamVector::zeros()).unwrap();
        assert!(Predictor::with_params(cfg.clone(), p.params.clone(), ParamVector::zeros()).is_ok());
        let other = PredictorConfig { hidden: 7, ..cfg };
        assert!(Predictor::with_params(other, p.params, ParamVector::zeros()).is_err());
    }
}
