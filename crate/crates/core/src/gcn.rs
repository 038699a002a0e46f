//! Multi-scale spatial (MS-GCN) and spatio-temporal (MS-G3D) graph
//! convolutions plus the residual block combining them.
//!
//! Sequences are stored frame-major: frame `t` occupies rows `t*N..(t+1)*N`
//! of a `(frames*N) x C` matrix.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::graph::{AdjacencySet, ScaleOperators, TiledAdjacency};
use crate::params::{glorot, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Identity => z.clone(),
            Activation::Relu => z.map(|v| v.max(0.0)),
        }
    }

    /// Gradient through the activation given the pre-activation `z`.
    pub fn backward(self, z: &DMatrix<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Activation::Identity => dy.clone(),
            Activation::Relu => dy.zip_map(z, |g, v| if v > 0.0 { g } else { 0.0 }),
        }
    }
}

/// `(T+1) x N x C` joint feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSeq {
    frames: usize,
    joints: usize,
    data: DMatrix<f64>,
}

impl GraphSeq {
    pub fn new(frames: usize, joints: usize, data: DMatrix<f64>) -> Result<Self> {
        if frames == 0 || joints == 0 || data.ncols() == 0 {
            return shape_err("graph sequence dimensions must be positive");
        }
        if data.nrows() != frames * joints {
            return shape_err(format!(
                "expected {} rows for {frames} frames x {joints} joints, got {}",
                frames * joints,
                data.nrows()
            ));
        }
        Ok(Self { frames, joints, data })
    }

    pub fn zeros(frames: usize, joints: usize, channels: usize) -> Self {
        Self {
            frames,
            joints,
            data: DMatrix::zeros(frames * joints, channels),
        }
    }

    pub fn from_frames(frames: &[DMatrix<f64>]) -> Result<Self> {
        let Some(first) = frames.first() else {
            return shape_err("no frames");
        };
        let (n, c) = first.shape();
        let mut data = DMatrix::zeros(frames.len() * n, c);
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != (n, c) {
                return shape_err("frames differ in shape");
            }
            data.rows_mut(t * n, n).copy_from(f);
        }
        Self::new(frames.len(), n, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn frame(&self, t: usize) -> DMatrix<f64> {
        self.data.rows(t * self.joints, self.joints).into_owned()
    }

    pub fn get(&self, t: usize, j: usize, c: usize) -> f64 {
        self.data[(t * self.joints + j, c)]
    }
}

/// One weight matrix per adjacency scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleWeights {
    pub weights: Vec<DMatrix<f64>>,
}

impl ScaleWeights {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, scales: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            weights: (0..scales).map(|_| glorot(rng, c_in, c_out, c_in, c_out)).collect(),
        }
    }

    pub fn zeros(scales: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            weights: vec![DMatrix::zeros(c_in, c_out); scales],
        }
    }

    pub fn num_scales(&self) -> usize {
        self.weights.len()
    }

    pub fn c_in(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn c_out(&self) -> usize {
        self.weights[0].ncols()
    }

    fn check(&self, ops: &ScaleOperators, c_in: usize) -> Result<()> {
        if self.weights.is_empty() {
            return shape_err("no scale weights");
        }
        if self.num_scales() != ops.num_scales {
            return shape_err(format!(
                "{} weight scales vs {} adjacency scales",
                self.num_scales(),
                ops.num_scales
            ));
        }
        let (ci, co) = self.weights[0].shape();
        if self.weights.iter().any(|w| w.shape() != (ci, co)) {
            return shape_err("scale weights differ in shape");
        }
        if ci != c_in {
            return shape_err(format!("input has {c_in} channels, weights expect {ci}"));
        }
        Ok(())
    }
}

impl Parameters for ScaleWeights {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        self.weights
            .iter()
            .enumerate()
            .map(|(k, w)| (format!("w{k}"), w))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.weights.iter_mut().collect()
    }
}

/// Column block `t` holds the zero-padded frames `t-half..=t+half` stacked
/// vertically: `(window*N) x (frames*C)`.
fn unfold(x: &DMatrix<f64>, frames: usize, joints: usize, window: usize) -> DMatrix<f64> {
    let c = x.ncols();
    let half = window / 2;
    let mut u = DMatrix::zeros(window * joints, frames * c);
    for t in 0..frames {
        for s in 0..window {
            if let Some(src) = (t + s).checked_sub(half).filter(|&f| f < frames) {
                u.view_mut((s * joints, t * c), (joints, c))
                    .copy_from(&x.rows(src * joints, joints));
            }
        }
    }
    u
}

/// Adjoint of [`unfold`].
fn fold(u: &DMatrix<f64>, frames: usize, joints: usize, window: usize, c: usize) -> DMatrix<f64> {
    let half = window / 2;
    let mut x = DMatrix::zeros(frames * joints, c);
    for t in 0..frames {
        for s in 0..window {
            if let Some(src) = (t + s).checked_sub(half).filter(|&f| f < frames) {
                let mut dst = x.rows_mut(src * joints, joints);
                dst += u.view((s * joints, t * c), (joints, c));
            }
        }
    }
    x
}

/// Per-group summed weights stacked vertically, `(groups*C) x C'`.
fn stacked_weights(ops: &ScaleOperators, weights: &ScaleWeights) -> DMatrix<f64> {
    let (ci, co) = (weights.c_in(), weights.c_out());
    let mut w = DMatrix::zeros(ops.mats.len() * ci, co);
    for (g, members) in ops.groups.iter().enumerate() {
        let mut block = w.rows_mut(g * ci, ci);
        for &k in members {
            block += &weights.weights[k];
        }
    }
    w
}

/// Aggregated neighbourhoods `[A_1 X, ..., A_G X]`, `(frames*N) x (G*C)`.
fn aggregate(ops: &ScaleOperators, x: &DMatrix<f64>, frames: usize, joints: usize, window: usize) -> DMatrix<f64> {
    let c = x.ncols();
    let groups = ops.mats.len();
    let y = &ops.stacked * unfold(x, frames, joints, window);
    let mut h = DMatrix::zeros(frames * joints, groups * c);
    for g in 0..groups {
        for t in 0..frames {
            h.view_mut((t * joints, g * c), (joints, c))
                .copy_from(&y.view((g * joints, t * c), (joints, c)));
        }
    }
    h
}

/// Pre-activation `sum_k A_k * X_window * W_k` where each operator in `ops`
/// has `window * N` columns and reads a zero-padded window centred on the
/// output frame. Also returns the aggregated input for the reverse pass.
fn propagate(
    ops: &ScaleOperators,
    weights: &ScaleWeights,
    x: &DMatrix<f64>,
    frames: usize,
    joints: usize,
    window: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let h = aggregate(ops, x, frames, joints, window);
    (&h * stacked_weights(ops, weights), h)
}

/// Reverse of [`propagate`] given its aggregated input: returns `(dX, dW)`.
fn propagate_backward(
    ops: &ScaleOperators,
    weights: &ScaleWeights,
    h: &DMatrix<f64>,
    dz: &DMatrix<f64>,
    frames: usize,
    joints: usize,
    window: usize,
) -> (DMatrix<f64>, ScaleWeights) {
    let ci = weights.c_in();
    let groups = ops.mats.len();
    let dw_stack = h.transpose() * dz;
    let dh = dz * stacked_weights(ops, weights).transpose();
    let mut dy = DMatrix::zeros(groups * joints, frames * ci);
    for g in 0..groups {
        for t in 0..frames {
            dy.view_mut((g * joints, t * ci), (joints, ci))
                .copy_from(&dh.view((t * joints, g * ci), (joints, ci)));
        }
    }
    let du = ops.stacked.transpose() * dy;
    let mut dw = weights.zeros_like();
    for (g, members) in ops.groups.iter().enumerate() {
        for &k in members {
            dw.weights[k].copy_from(&dw_stack.rows(g * ci, ci));
        }
    }
    (fold(&du, frames, joints, window, ci), dw)
}

/// Spatial multi-scale graph convolution on a single frame (`N x C`).
pub fn msgcn_forward(
    x_t: &DMatrix<f64>,
    adj: &AdjacencySet,
    params: &ScaleWeights,
    activation: Activation,
) -> Result<DMatrix<f64>> {
    let ops = ScaleOperators::spatial(adj);
    if x_t.nrows() != adj.joints() {
        return shape_err(format!("frame has {} joints, adjacency {}", x_t.nrows(), adj.joints()));
    }
    params.check(&ops, x_t.ncols())?;
    let (z, _) = propagate(&ops, params, x_t, 1, adj.joints(), 1);
    Ok(activation.apply(&z))
}

/// Spatio-temporal multi-scale graph convolution over a zero-padded window
/// of `tau` frames; each output frame is the centre block of its window.
pub fn msg3d_forward(
    x: &GraphSeq,
    tiled: &[TiledAdjacency],
    params: &ScaleWeights,
    activation: Activation,
) -> Result<GraphSeq> {
    let Some(first) = tiled.first() else {
        return shape_err("no tiled adjacency");
    };
    let window = first.window;
    if window % 2 == 0 {
        return shape_err(format!("window {window} must be odd"));
    }
    if tiled.iter().any(|t| t.window != window || t.joints != x.joints()) {
        return shape_err("tiled adjacency inconsistent with input");
    }
    let ops = ScaleOperators::temporal(tiled);
    params.check(&ops, x.channels())?;
    let (z, _) = propagate(&ops, params, x.data(), x.frames(), x.joints(), window);
    GraphSeq::new(x.frames(), x.joints(), activation.apply(&z))
}

/// Adjacency operators shared by every block of a network.
#[derive(Debug, Clone)]
pub struct BlockGeometry {
    pub joints: usize,
    pub window: usize,
    pub spatial: ScaleOperators,
    pub temporal: ScaleOperators,
}

impl BlockGeometry {
    pub fn new(spatial: &AdjacencySet, temporal: &AdjacencySet, window: usize) -> Result<Self> {
        if window.is_multiple_of(2) {
            return shape_err(format!("window {window} must be odd"));
        }
        if spatial.joints() != temporal.joints() {
            return shape_err("spatial and temporal adjacency disagree on joint count");
        }
        Ok(Self {
            joints: spatial.joints(),
            window,
            spatial: ScaleOperators::spatial(spatial),
            temporal: ScaleOperators::temporal(&temporal.tiled(window)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnBlockParams {
    pub msgcn: ScaleWeights,
    pub msg3d: ScaleWeights,
    /// `None` means identity residual (requires `C == C'`).
    pub residual: Option<DMatrix<f64>>,
}

impl GcnBlockParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, geo: &BlockGeometry, c_in: usize, c_out: usize) -> Self {
        Self {
            msgcn: ScaleWeights::init(rng, geo.spatial.num_scales, c_in, c_out),
            msg3d: ScaleWeights::init(rng, geo.temporal.num_scales, c_in, c_out),
            residual: (c_in != c_out).then(|| glorot(rng, c_in, c_out, c_in, c_out)),
        }
    }

    pub fn c_in(&self) -> usize {
        self.msgcn.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.msgcn.c_out()
    }
}

impl Parameters for GcnBlockParams {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out: Vec<_> = self
            .msgcn
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("msgcn.{n}"), t))
            .collect();
        out.extend(self.msg3d.tensors().into_iter().map(|(n, t)| (format!("msg3d.{n}"), t)));
        if let Some(r) = &self.residual {
            out.push(("residual".into(), r));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out = self.msgcn.tensors_mut();
        out.extend(self.msg3d.tensors_mut());
        if let Some(r) = &mut self.residual {
            out.push(r);
        }
        out
    }
}

/// Values saved by a block forward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub input: GraphSeq,
    pub pre_activation: DMatrix<f64>,
    spatial_agg: DMatrix<f64>,
    temporal_agg: DMatrix<f64>,
}

pub fn gcn_block_forward(
    x: &GraphSeq,
    geo: &BlockGeometry,
    params: &GcnBlockParams,
    activation: Activation,
) -> Result<(GraphSeq, BlockCache)> {
    if x.joints() != geo.joints {
        return shape_err(format!("input has {} joints, geometry {}", x.joints(), geo.joints));
    }
    params.msgcn.check(&geo.spatial, x.channels())?;
    params.msg3d.check(&geo.temporal, x.channels())?;
    if params.msgcn.c_out() != params.msg3d.c_out() {
        return shape_err("branches disagree on output channels");
    }
    let (f, n) = (x.frames(), x.joints());
    let (mut z, spatial_agg) = propagate(&geo.spatial, &params.msgcn, x.data(), f, n, 1);
    let (z3, temporal_agg) = propagate(&geo.temporal, &params.msg3d, x.data(), f, n, geo.window);
    z += z3;
    match &params.residual {
        Some(p) => {
            if p.shape() != (x.channels(), params.c_out()) {
                return shape_err("residual projection shape");
            }
            z.gemm(1.0, x.data(), p, 1.0);
        }
        None => {
            if x.channels() != params.c_out() {
                return shape_err("identity residual needs C == C'");
            }
            z += x.data();
        }
    }
    let y = GraphSeq::new(f, n, activation.apply(&z))?;
    Ok((
        y,
        BlockCache {
            input: x.clone(),
            pre_activation: z,
            spatial_agg,
            temporal_agg,
        },
    ))
}

/// Returns `(dX, parameter gradients)` for a block given `dY`.
pub fn gcn_block_backward(
    cache: &BlockCache,
    geo: &BlockGeometry,
    params: &GcnBlockParams,
    activation: Activation,
    dy: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, GcnBlockParams)> {
    if dy.shape() != cache.pre_activation.shape() {
        return shape_err("upstream gradient shape differs from forward output");
    }
    let x = cache.input.data();
    let (f, n) = (cache.input.frames(), cache.input.joints());
    let dz = activation.backward(&cache.pre_activation, dy);
    let (mut dx, d_gcn) = propagate_backward(&geo.spatial, &params.msgcn, &cache.spatial_agg, &dz, f, n, 1);
    let (dx3, d_g3d) = propagate_backward(&geo.temporal, &params.msg3d, &cache.temporal_agg, &dz, f, n, geo.window);
    dx += dx3;
    let d_res = match &params.residual {
        Some(p) => {
            dx.gemm(1.0, &dz, &p.transpose(), 1.0);
            Some(x.transpose() * &dz)
        }
        None => {
            dx += &dz;
            None
        }
    };
    Ok((
        dx,
        GcnBlockParams {
            msgcn: d_gcn,
            msg3d: d_g3d,
            residual: d_res,
        },
    ))
}

/// Reverse pass of [`msgcn_forward`] for one frame: `(dX, dW)`.
pub fn msgcn_backward(
    x_t: &DMatrix<f64>,
    adj: &AdjacencySet,
    params: &ScaleWeights,
    activation: Activation,
    dy: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, ScaleWeights)> {
    let ops = ScaleOperators::spatial(adj);
    params.check(&ops, x_t.ncols())?;
    let n = adj.joints();
    let (z, h) = propagate(&ops, params, x_t, 1, n, 1);
    if dy.shape() != z.shape() {
        return shape_err("upstream gradient shape");
    }
    let dz = activation.backward(&z, dy);
    Ok(propagate_backward(&ops, params, &h, &dz, 1, n, 1))
}

/// Reverse pass of [`msg3d_forward`]: `(dX, dW)`.
pub fn msg3d_backward(
    x: &GraphSeq,
    tiled: &[TiledAdjacency],
    params: &ScaleWeights,
    activation: Activation,
    dy: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, ScaleWeights)> {
    let Some(first) = tiled.first() else {
        return shape_err("no tiled adjacency");
    };
    let window = first.window;
    let ops = ScaleOperators::temporal(tiled);
    params.check(&ops, x.channels())?;
    let (z, h) = propagate(&ops, params, x.data(), x.frames(), x.joints(), window);
    if dy.shape() != z.shape() {
        return shape_err("upstream gradient shape");
    }
    let dz = activation.backward(&z, dy);
    Ok(propagate_backward(
        &ops,
        params,
        &h,
        &dz,
        x.frames(),
        x.joints(),
        window,
    ))
}
