//! Toy kinematic chain standing in for a body model: axis-angle rotations
//! compose down a joint tree, shape coefficients stretch the rest offsets,
//! and a weak-perspective camera projects joints to 2D.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};

use crate::error::{shape_err, Error, Result};
use crate::graph::SkeletonGraph;
use crate::param_vector::{POSE_DIM, SHAPE_DIM};

type ShapeBasis = SMatrix<f64, 3, SHAPE_DIM>;

/// Below this rotation angle the Rodrigues coefficients use their Taylor
/// series; the closed forms of the derivative terms cancel badly near zero.
const SERIES_ANGLE: f64 = 0.1;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `(sin t / t, (1 - cos t) / t^2, d/dt(a)/t, d/dt(b)/t)` for `t = |v|`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    if theta < SERIES_ANGLE {
        let x = theta * theta;
        let a = 1.0 - x / 6.0 * (1.0 - x / 20.0 * (1.0 - x / 42.0 * (1.0 - x / 72.0)));
        let b = 0.5 - x / 24.0 * (1.0 - x / 30.0 * (1.0 - x / 56.0 * (1.0 - x / 90.0)));
        let c = -1.0 / 3.0 + x / 30.0 - x * x / 840.0 + x * x * x / 45360.0 - x * x * x * x / 3991680.0;
        let d = -1.0 / 12.0 + x / 180.0 - x * x / 6720.0 + x * x * x / 453600.0 - x * x * x * x / 47900160.0;
        (a, b, c, d)
    } else {
        let (s, co) = theta.sin_cos();
        let t2 = theta * theta;
        let a = s / theta;
        // 1 - cos t written as 2 sin^2(t/2) to avoid cancellation
        let one_minus_cos = 2.0 * (0.5 * theta).sin().powi(2);
        let b = one_minus_cos / t2;
        let c = (theta * co - s) / (t2 * theta);
        let d = (theta * s - 2.0 * one_minus_cos) / (t2 * t2);
        (a, b, c, d)
    }
}

/// Axis-angle to rotation matrix.
pub fn rodrigues(v: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _, _) = rodrigues_coeffs(v.norm());
    let k = skew(v);
    Matrix3::identity() + k * a + k * k * b
}

/// Partial derivatives of [`rodrigues`] with respect to each component.
pub fn rodrigues_jacobian(v: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let (a, b, c, d) = rodrigues_coeffs(v.norm());
    let k = skew(v);
    let k2 = k * k;
    let mut out = [Matrix3::zeros(); 3];
    for (i, o) in out.iter_mut().enumerate() {
        let e = skew(&Vector3::ith(i, 1.0));
        *o = k * (c * v[i]) + e * a + k2 * (d * v[i]) + (e * k + k * e) * b;
    }
    out
}

#[derive(Debug, Clone)]
pub struct KinematicModel {
    pub names: Vec<String>,
    /// `parents[j] < j` for every non-root joint; joint 0 is the root.
    pub parents: Vec<Option<usize>>,
    pub rest_offsets: Vec<Vector3<f64>>,
    /// Pose triple driving each joint's local rotation.
    pub joint_map: Vec<usize>,
    pub shape_basis: Vec<ShapeBasis>,
    skeleton: SkeletonGraph,
}

impl KinematicModel {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<Vector3<f64>>,
        joint_map: Vec<usize>,
        shape_basis: Vec<ShapeBasis>,
    ) -> Result<Self> {
        let n = parents.len();
        if n == 0 {
            return Err(Error::InvalidGraph("kinematic model needs joints".into()));
        }
        if names.len() != n || rest_offsets.len() != n || joint_map.len() != n || shape_basis.len() != n {
            return shape_err("kinematic model arrays differ in length");
        }
        if parents[0].is_some() {
            return Err(Error::InvalidGraph("joint 0 must be the root".into()));
        }
        let mut edges = Vec::with_capacity(n - 1);
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => edges.push((*p, j)),
                Some(p) => {
                    return Err(Error::InvalidGraph(format!(
                        "joint {j} has parent {p}; parents must precede children"
                    )))
                }
                None => return Err(Error::InvalidGraph(format!("joint {j} is a second root"))),
            }
        }
        let mut used = std::collections::HashSet::new();
        for &m in &joint_map {
            if m >= POSE_DIM / 3 || !used.insert(m) {
                return Err(Error::InvalidGraph(format!("bad pose triple index {m}")));
            }
        }
        if rest_offsets.iter().any(|o| !o.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("rest offsets".into()));
        }
        let skeleton = SkeletonGraph::new(n, edges)?;
        Ok(Self {
            names,
            parents,
            rest_offsets,
            joint_map,
            shape_basis,
            skeleton,
        })
    }

    /// Fourteen-joint tree: pelvis root, spine top carrying both
    /// shoulder-elbow-wrist arms, and hip-knee-ankle legs on the pelvis.
    /// Metres, y up.
    pub fn default_body() -> Self {
        let spec: [(&str, Option<usize>, [f64; 3]); 14] = [
            ("pelvis", None, [0.0, 0.0, 0.0]),
            ("spine", Some(0), [0.0, 0.5, 0.0]),
            ("l_shoulder", Some(1), [0.18, -0.05, 0.0]),
            ("l_elbow", Some(2), [0.28, 0.0, 0.0]),
            ("l_wrist", Some(3), [0.25, 0.0, 0.0]),
            ("r_shoulder", Some(1), [-0.18, -0.05, 0.0]),
            ("r_elbow", Some(5), [-0.28, 0.0, 0.0]),
            ("r_wrist", Some(6), [-0.25, 0.0, 0.0]),
            ("l_hip", Some(0), [0.1, -0.05, 0.0]),
            ("l_knee", Some(8), [0.0, -0.42, 0.0]),
            ("l_ankle", Some(9), [0.0, -0.4, 0.0]),
            ("r_hip", Some(0), [-0.1, -0.05, 0.0]),
            ("r_knee", Some(11), [0.0, -0.42, 0.0]),
            ("r_ankle", Some(12), [0.0, -0.4, 0.0]),
        ];
        let offsets: Vec<Vector3<f64>> = spec.iter().map(|s| Vector3::from(s.2)).collect();
        let basis = offsets
            .iter()
            .enumerate()
            .map(|(j, o)| {
                ShapeBasis::from_fn(|c, b| {
                    let phase = 0.7 * (j + 1) as f64 * (b + 1) as f64;
                    0.1 * o[c] * phase.cos() + 0.01 * (phase + c as f64).sin()
                })
            })
            .collect();
        Self::new(
            spec.iter().map(|s| s.0.to_string()).collect(),
            spec.iter().map(|s| s.1).collect(),
            offsets,
            (0..14).collect(),
            basis,
        )
        .expect("built-in model is a valid tree")
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn skeleton(&self) -> &SkeletonGraph {
        &self.skeleton
    }

    /// Joints with at least one child: only their rotations move joints.
    pub fn articulated_joints(&self) -> Vec<usize> {
        let mut has_child = vec![false; self.num_joints()];
        for p in self.parents.iter().flatten() {
            has_child[*p] = true;
        }
        (0..self.num_joints()).filter(|&j| has_child[j]).collect()
    }

    pub fn offset(&self, j: usize, shape: &[f64]) -> Vector3<f64> {
        self.rest_offsets[j] + self.shape_basis[j] * nalgebra::SVector::<f64, SHAPE_DIM>::from_column_slice(shape)
    }
}

/// Intermediate values of a forward-kinematics pass.
#[derive(Debug, Clone)]
pub struct FkCache {
    pub local: Vec<Matrix3<f64>>,
    pub global: Vec<Matrix3<f64>>,
    pub offsets: Vec<Vector3<f64>>,
    pub axis_angles: Vec<Vector3<f64>>,
}

fn check_pose_shape(pose: &[f64], shape: &[f64]) -> Result<()> {
    if pose.len() != POSE_DIM || shape.len() != SHAPE_DIM {
        return shape_err(format!("pose/shape lengths {} / {}", pose.len(), shape.len()));
    }
    Ok(())
}

/// Joint positions (`N x 3`, metres) with the root at the origin.
pub fn fk_joints(pose: &[f64], shape: &[f64], model: &KinematicModel) -> Result<DMatrix<f64>> {
    Ok(fk_forward(pose, shape, model)?.0)
}

pub fn fk_forward(pose: &[f64], shape: &[f64], model: &KinematicModel) -> Result<(DMatrix<f64>, FkCache)> {
    check_pose_shape(pose, shape)?;
    let n = model.num_joints();
    let mut cache = FkCache {
        local: Vec::with_capacity(n),
        global: Vec::with_capacity(n),
        offsets: Vec::with_capacity(n),
        axis_angles: Vec::with_capacity(n),
    };
    let mut pos = vec![Vector3::zeros(); n];
    for j in 0..n {
        let t = model.joint_map[j];
        let aa = Vector3::new(pose[3 * t], pose[3 * t + 1], pose[3 * t + 2]);
        let r = rodrigues(&aa);
        let o = model.offset(j, shape);
        let g = match model.parents[j] {
            Some(p) => {
                pos[j] = pos[p] + cache.global[p] * o;
                cache.global[p] * r
            }
            None => r,
        };
        cache.local.push(r);
        cache.global.push(g);
        cache.offsets.push(o);
        cache.axis_angles.push(aa);
    }
    let x = DMatrix::from_fn(n, 3, |j, c| pos[j][c]);
    Ok((x, cache))
}

/// Gradients of a scalar with respect to pose and shape, given its
/// gradient `d_joints` (`N x 3`) with respect to the joint positions.
pub fn fk_backward(cache: &FkCache, model: &KinematicModel, d_joints: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = model.num_joints();
    if d_joints.shape() != (n, 3) {
        return shape_err("joint gradient shape");
    }
    let mut dp: Vec<Vector3<f64>> = (0..n)
        .map(|j| Vector3::new(d_joints[(j, 0)], d_joints[(j, 1)], d_joints[(j, 2)]))
        .collect();
    let mut dg = vec![Matrix3::<f64>::zeros(); n];
    let mut d_pose = vec![0.0; POSE_DIM];
    let mut d_shape = nalgebra::SVector::<f64, SHAPE_DIM>::zeros();
    for j in (0..n).rev() {
        let d_local = match model.parents[j] {
            Some(p) => {
                let gp = cache.global[p];
                let dpj = dp[j];
                dp[p] += dpj;
                dg[p] += dpj * cache.offsets[j].transpose();
                d_shape += model.shape_basis[j].transpose() * (gp.transpose() * dpj);
                let dgj = dg[j];
                dg[p] += dgj * cache.local[j].transpose();
                gp.transpose() * dgj
            }
            None => dg[j],
        };
        let jac = rodrigues_jacobian(&cache.axis_angles[j]);
        let t = model.joint_map[j];
        for (i, ji) in jac.iter().enumerate() {
            d_pose[3 * t + i] += d_local.component_mul(ji).sum();
        }
    }
    Ok((d_pose, d_shape.as_slice().to_vec()))
}

/// Weak-perspective projection `s * (x, y) + (tx, ty)`.
pub fn project_2d(joints: &DMatrix<f64>, camera: &[f64]) -> Result<DMatrix<f64>> {
    if joints.ncols() != 3 || camera.len() != 3 {
        return shape_err("projection needs N x 3 joints and a 3-value camera");
    }
    let s = camera[0];
    Ok(DMatrix::from_fn(joints.nrows(), 2, |j, c| {
        s * joints[(j, c)] + camera[1 + c]
    }))
}

/// Returns `(d joints, d camera)` for upstream `d_proj` (`N x 2`).
pub fn project_2d_backward(
    joints: &DMatrix<f64>,
    camera: &[f64],
    d_proj: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, [f64; 3])> {
    if d_proj.shape() != (joints.nrows(), 2) {
        return shape_err("projection gradient shape");
    }
    let s = camera[0];
    let dj = DMatrix::from_fn(joints.nrows(), 3, |j, c| if c < 2 { s * d_proj[(j, c)] } else { 0.0 });
    let mut dc = [0.0; 3];
    for j in 0..joints.nrows() {
        for c in 0..2 {
            dc[0] += d_proj[(j, c)] * joints[(j, c)];
            dc[1 + c] += d_proj[(j, c)];
        }
    }
    Ok((dj, dc))
}
