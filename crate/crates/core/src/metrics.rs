//! Pose accuracy metrics over joint sequences in millimetres.

use nalgebra::{DMatrix, Matrix3, RowVector3};

use crate::error::{shape_err, Error, Result};

/// Frames of `N x 3` joint positions sharing one root index.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSequence {
    pub frames: Vec<DMatrix<f64>>,
    pub root: usize,
}

impl JointSequence {
    pub fn new(frames: Vec<DMatrix<f64>>, root: usize) -> Result<Self> {
        let Some(first) = frames.first() else {
            return shape_err("joint sequence has no frames");
        };
        let n = first.nrows();
        if root >= n || frames.iter().any(|f| f.shape() != (n, 3)) {
            return shape_err("joint sequence frames must all be N x 3 with a valid root");
        }
        if frames.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("joint sequence".into()));
        }
        Ok(Self { frames, root })
    }

    /// Multiplies every coordinate, e.g. metres to millimetres.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            frames: self.frames.iter().map(|f| f * k).collect(),
            root: self.root,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.frames[0].nrows()
    }
}

fn check_pair(a: &JointSequence, b: &JointSequence) -> Result<()> {
    if a.len() != b.len() || a.joints() != b.joints() || a.root != b.root {
        return shape_err("sequences differ in frames, joints or root");
    }
    Ok(())
}

fn mean_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (0..a.nrows()).map(|j| (a.row(j) - b.row(j)).norm()).sum::<f64>() / a.nrows() as f64
}

fn root_aligned(f: &DMatrix<f64>, root: usize) -> DMatrix<f64> {
    let r = f.row(root).into_owned();
    let mut out = f.clone();
    for mut row in out.row_iter_mut() {
        row -= &r;
    }
    out
}

pub fn mpjpe(pred: &JointSequence, gt: &JointSequence) -> Result<f64> {
    check_pair(pred, gt)?;
    let total: f64 = pred
        .frames
        .iter()
        .zip(&gt.frames)
        .map(|(p, g)| mean_distance(&root_aligned(p, pred.root), &root_aligned(g, gt.root)))
        .sum();
    Ok(total / pred.len() as f64)
}

fn centered(f: &DMatrix<f64>) -> (DMatrix<f64>, RowVector3<f64>) {
    let n = f.nrows() as f64;
    let mean = RowVector3::from_fn(|_, c| f.column(c).sum() / n);
    let mut out = f.clone();
    for mut row in out.row_iter_mut() {
        row -= &mean;
    }
    (out, mean)
}

fn check_spread(c: &DMatrix<f64>) -> Result<()> {
    let cov: Matrix3<f64> = Matrix3::from_fn(|i, j| c.column(i).dot(&c.column(j)));
    let mut sv = cov
        .symmetric_eigenvalues()
        .iter()
        .map(|v| v.max(0.0))
        .collect::<Vec<_>>();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] == 0.0 || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::Degenerate(
            "joint configuration is collinear or collapsed".into(),
        ));
    }
    Ok(())
}

/// Similarity transform of `pred` closest to `gt` in the least-squares
/// sense, applied to `pred`.
pub fn procrustes_align(pred: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if pred.shape() != gt.shape() || pred.ncols() != 3 || pred.nrows() < 3 {
        return shape_err("alignment needs matching N x 3 inputs with N >= 3");
    }
    let (x, _) = centered(pred);
    let (y, my) = centered(gt);
    check_spread(&x)?;
    check_spread(&y)?;
    let m: Matrix3<f64> = Matrix3::from_fn(|i, j| y.column(i).dot(&x.column(j)));
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let s = (svd.singular_values.component_mul(&d.diagonal())).sum() / x.norm_squared();
    let mut out = DMatrix::zeros(pred.nrows(), 3);
    for j in 0..pred.nrows() {
        let p = r * x.row(j).transpose() * s + my.transpose();
        out.row_mut(j).copy_from(&p.transpose());
    }
    Ok(out)
}

pub fn pa_mpjpe(pred: &JointSequence, gt: &JointSequence) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut total = 0.0;
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        total += mean_distance(&procrustes_align(p, g)?, g);
    }
    Ok(total / pred.len() as f64)
}

/// Mean norm of the difference of second differences, per frame squared.
pub fn accel_error(pred: &JointSequence, gt: &JointSequence) -> Result<f64> {
    check_pair(pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::TooShort("acceleration needs at least 3 frames".into()));
    }
    let acc = |s: &JointSequence, t: usize| &s.frames[t + 1] - &s.frames[t] * 2.0 + &s.frames[t - 1];
    let mut total = 0.0;
    for t in 1..pred.len() - 1 {
        total += mean_distance(&acc(pred, t), &acc(gt, t));
    }
    Ok(total / (pred.len() - 2) as f64)
}
