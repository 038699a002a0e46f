//! Motion discriminator: three residual GCN blocks, global average pooling
//! over frames and joints, and a linear head producing an unbounded score.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::gcn::{
    gcn_block_backward, gcn_block_forward, Activation, BlockCache, BlockGeometry, GcnBlockParams, GraphSeq,
};
use crate::graph::{AdjacencySet, SkeletonGraph};
use crate::params::{glorot, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Channel progression, input first. Three blocks means four entries.
    pub channels: Vec<usize>,
    pub gcn_scales: usize,
    pub g3d_scales: usize,
    pub window: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: vec![3, 64, 128, 256],
            gcn_scales: 13,
            g3d_scales: 6,
            window: 3,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 {
            return Err(Error::Config(format!(
                "discriminator needs exactly three blocks (4 channel entries), got {}",
                self.channels.len()
            )));
        }
        if self.channels[0] != 3 {
            return Err(Error::Config("discriminator input must be 3D coordinates".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("window {} must be odd", self.window)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub blocks: Vec<GcnBlockParams>,
    /// `1 x C_last`
    pub head_w: DMatrix<f64>,
    /// `1 x 1`
    pub head_b: DMatrix<f64>,
}

impl Parameters for DiscriminatorParams {
    fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionLabel {
    Real,
    Generated,
}

/// Root-centred `(T+1) x N x 3` skeleton window.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSample {
    pub skeleton: GraphSeq,
    pub label: MotionLabel,
}

impl MotionSample {
    /// Builds a sample from per-frame `N x 3` joints, subtracting the root
    /// joint of each frame.
    pub fn from_joints(frames: &[DMatrix<f64>], root: usize, label: MotionLabel) -> Result<Self> {
        let centred: Vec<_> = frames.iter().map(|f| center_on_root(f, root)).collect();
        let skeleton = GraphSeq::from_frames(&centred)?;
        if skeleton.channels() != 3 {
            return shape_err("motion samples carry 3D coordinates");
        }
        Ok(Self { skeleton, label })
    }
}

pub fn center_on_root(joints: &DMatrix<f64>, root: usize) -> DMatrix<f64> {
    let r = joints.row(root).into_owned();
    let mut out = joints.clone();
    for mut row in out.row_iter_mut() {
        row -= &r;
    }
    out
}

/// Gradient of [`center_on_root`] with respect to its input.
pub fn center_on_root_backward(d_out: &DMatrix<f64>, root: usize) -> DMatrix<f64> {
    let mut d_in = d_out.clone();
    let total = d_out.row_sum();
    let mut r = d_in.row_mut(root);
    r -= total;
    d_in
}

/// Mean of each column as a `1 x C` row.
pub fn column_means(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, c| m.column(c).mean())
}

pub struct DiscriminatorCache {
    blocks: Vec<BlockCache>,
    pooled: DMatrix<f64>,
    rows: usize,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub geometry: BlockGeometry,
    pub params: DiscriminatorParams,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, graph: &SkeletonGraph, config: DiscriminatorConfig) -> Result<Self> {
        let geometry = Self::geometry(graph, &config)?;
        let blocks = config
            .channels
            .windows(2)
            .map(|w| GcnBlockParams::init(rng, &geometry, w[0], w[1]))
            .collect();
        let c_last = *config.channels.last().unwrap();
        let params = DiscriminatorParams {
            blocks,
            head_w: glorot(rng, 1, c_last, c_last, 1),
            head_b: DMatrix::zeros(1, 1),
        };
        Ok(Self {
            config,
            geometry,
            params,
        })
    }

    pub fn with_params(
        graph: &SkeletonGraph,
        config: DiscriminatorConfig,
        params: DiscriminatorParams,
    ) -> Result<Self> {
        let geometry = Self::geometry(graph, &config)?;
        if params.blocks.len() != config.channels.len() - 1 {
            return shape_err("block count differs from config");
        }
        for (b, w) in params.blocks.iter().zip(config.channels.windows(2)) {
            if b.c_in() != w[0] || b.c_out() != w[1] {
                return shape_err("block channels differ from config");
            }
            if b.msgcn.num_scales() != geometry.spatial.num_scales
                || b.msg3d.num_scales() != geometry.temporal.num_scales
            {
                return shape_err("block scale count differs from config");
            }
        }
        if params.head_w.shape() != (1, *config.channels.last().unwrap()) || params.head_b.shape() != (1, 1) {
            return shape_err("head shape differs from config");
        }
        Ok(Self {
            config,
            geometry,
            params,
        })
    }

    fn geometry(graph: &SkeletonGraph, config: &DiscriminatorConfig) -> Result<BlockGeometry> {
        config.validate()?;
        let spatial = AdjacencySet::build(graph, config.gcn_scales);
        let temporal = AdjacencySet::build(graph, config.g3d_scales);
        BlockGeometry::new(&spatial, &temporal, config.window)
    }

    pub fn forward(&self, x: &GraphSeq) -> Result<(f64, DiscriminatorCache)> {
        self.forward_with(&self.params, x)
    }

    pub fn forward_with(&self, params: &DiscriminatorParams, x: &GraphSeq) -> Result<(f64, DiscriminatorCache)> {
        if x.channels() != self.config.channels[0] {
            return shape_err(format!(
                "input has {} channels, expected {}",
                x.channels(),
                self.config.channels[0]
            ));
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(params.blocks.len());
        for b in &params.blocks {
            let (y, c) = gcn_block_forward(&h, &self.geometry, b, Activation::Relu)?;
            caches.push(c);
            h = y;
        }
        let rows = h.data().nrows();
        let pooled = column_means(h.data());
        let score = (&params.head_w * pooled.transpose())[(0, 0)] + params.head_b[(0, 0)];
        Ok((
            score,
            DiscriminatorCache {
                blocks: caches,
                pooled,
                rows,
            },
        ))
    }

    pub fn score(&self, sample: &MotionSample) -> Result<f64> {
        Ok(self.forward(&sample.skeleton)?.0)
    }

    /// Returns `(d input, parameter gradients)` for upstream `d score`.
    pub fn backward(&self, cache: &DiscriminatorCache, d_score: f64) -> Result<(DMatrix<f64>, DiscriminatorParams)> {
        self.backward_with(&self.params, cache, d_score)
    }

    pub fn backward_with(
        &self,
        params: &DiscriminatorParams,
        cache: &DiscriminatorCache,
        d_score: f64,
    ) -> Result<(DMatrix<f64>, DiscriminatorParams)> {
        let head_w = &cache.pooled * d_score;
        let head_b = DMatrix::from_element(1, 1, d_score);
        let d_pool = &params.head_w * (d_score / cache.rows as f64);
        let c_last = params.head_w.ncols();
        let mut dy = DMatrix::from_fn(cache.rows, c_last, |_, c| d_pool[(0, c)]);
        let mut blocks = Vec::with_capacity(params.blocks.len());
        for (b, c) in params.blocks.iter().zip(cache.blocks.iter()).rev() {
            let (dx, g) = gcn_block_backward(c, &self.geometry, b, Activation::Relu, &dy)?;
            blocks.push(g);
            dy = dx;
        }
        blocks.reverse();
        Ok((dy, DiscriminatorParams { blocks, head_w, head_b }))
    }

    /// Pre-activations of every block, for kink-aware gradient checks.
    pub fn min_abs_pre_activation(cache: &DiscriminatorCache) -> f64 {
        cache
            .blocks
            .iter()
            .flat_map(|c| c.pre_activation.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}
