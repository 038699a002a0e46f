//! Skeleton graphs and their multi-scale hop adjacency family.
//!
//! Scale `k` connects joints exactly `k` hops apart, with self-loops on the
//! diagonal. Each scale is normalized symmetrically by its own degree
//! matrix (self-loops included). The spatio-temporal variant tiles one
//! scale into a `tau x tau` block matrix and normalizes the result with the
//! tiled degree.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected joint graph. Self-loops are implied, never listed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct SkeletonGraph {
    num_joints: usize,
    edges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    num_joints: usize,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<RawGraph> for SkeletonGraph {
    type Error = Error;

    fn try_from(raw: RawGraph) -> Result<Self> {
        SkeletonGraph::new(raw.num_joints, raw.edges.into_iter().map(|[a, b]| (a, b)).collect())
    }
}

impl From<SkeletonGraph> for RawGraph {
    fn from(g: SkeletonGraph) -> Self {
        RawGraph {
            num_joints: g.num_joints,
            edges: g.edges.into_iter().map(|(a, b)| [a, b]).collect(),
        }
    }
}

impl SkeletonGraph {
    pub fn new(num_joints: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if num_joints == 0 {
            return Err(Error::InvalidGraph("graph needs at least one joint".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &edges {
            if a >= num_joints || b >= num_joints {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) out of range for {num_joints} joints"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop edge at joint {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidGraph(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Self { num_joints, edges })
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }

    fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_joints];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }
}

/// All-pairs hop counts. `None` marks an unreachable pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointDistanceMatrix {
    n: usize,
    entries: Vec<Option<usize>>,
}

impl JointDistanceMatrix {
    pub fn num_joints(&self) -> usize {
        self.n
    }

    pub fn get(&self, m: usize, n: usize) -> Option<usize> {
        self.entries[m * self.n + n]
    }

    /// Largest finite hop count.
    pub fn diameter(&self) -> usize {
        self.entries.iter().flatten().copied().max().unwrap_or(0)
    }
}

/// Breadth-first search from every joint.
pub fn hop_distance(graph: &SkeletonGraph) -> JointDistanceMatrix {
    let n = graph.num_joints();
    let adj = graph.neighbors();
    let mut entries = vec![None; n * n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        let row = &mut entries[src * n..(src + 1) * n];
        row[src] = Some(0);
        queue.clear();
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let du = row[u].expect("queued nodes are reached");
            for &v in &adj[u] {
                if row[v].is_none() {
                    row[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
    }
    JointDistanceMatrix { n, entries }
}

/// Binary matrix with 1 where the hop distance is exactly `k` or on the diagonal.
pub fn k_adjacency(dist: &JointDistanceMatrix, k: usize) -> DMatrix<f64> {
    let n = dist.num_joints();
    DMatrix::from_fn(n, n, |m, j| if m == j || dist.get(m, j) == Some(k) { 1.0 } else { 0.0 })
}

/// `D^{-1/2} A D^{-1/2}` with `D` the row-sum degree matrix of `a`.
pub fn normalize_adjacency(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Shape(format!(
            "adjacency must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut inv_sqrt = Vec::with_capacity(a.nrows());
    for (i, row) in a.row_iter().enumerate() {
        let d = row.sum();
        if d <= 0.0 {
            return Err(Error::ZeroDegree(i));
        }
        inv_sqrt.push(1.0 / d.sqrt());
    }
    Ok(DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| {
        inv_sqrt[i] * a[(i, j)] * inv_sqrt[j]
    }))
}

/// Normalized `tau x tau` block tiling of one scale's adjacency.
#[derive(Debug, Clone)]
pub struct TiledAdjacency {
    pub base_scale: usize,
    pub window: usize,
    pub joints: usize,
    pub matrix: DMatrix<f64>,
}

impl TiledAdjacency {
    /// Rows of the centre block, shape `N x (tau*N)`.
    pub fn center_rows(&self) -> DMatrix<f64> {
        let c = self.window / 2;
        self.matrix.rows(c * self.joints, self.joints).into_owned()
    }
}

pub fn tile_adjacency(a_k: &DMatrix<f64>, tau: usize, base_scale: usize) -> Result<TiledAdjacency> {
    if tau == 0 {
        return Err(Error::Shape("window must be at least 1".into()));
    }
    let n = a_k.nrows();
    let tiled = DMatrix::from_fn(tau * n, tau * n, |i, j| a_k[(i % n, j % n)]);
    Ok(TiledAdjacency {
        base_scale,
        window: tau,
        joints: n,
        matrix: normalize_adjacency(&tiled)?,
    })
}

/// Raw and normalized adjacency for scales `0..=max_scale`.
#[derive(Debug, Clone)]
pub struct AdjacencySet {
    pub scales: Vec<DMatrix<f64>>,
    pub normalized: Vec<DMatrix<f64>>,
}

impl AdjacencySet {
    pub fn build(graph: &SkeletonGraph, max_scale: usize) -> Self {
        let dist = hop_distance(graph);
        let scales: Vec<_> = (0..=max_scale).map(|k| k_adjacency(&dist, k)).collect();
        let normalized = scales
            .iter()
            .map(|a| normalize_adjacency(a).expect("unit diagonal gives positive degree"))
            .collect();
        Self { scales, normalized }
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn joints(&self) -> usize {
        self.scales[0].nrows()
    }

    pub fn tiled(&self, tau: usize) -> Result<Vec<TiledAdjacency>> {
        self.scales
            .iter()
            .enumerate()
            .map(|(k, a)| tile_adjacency(a, tau, k))
            .collect()
    }
}

/// Propagation matrices for a multi-scale layer, with scales that share an
/// identical matrix grouped so the product is formed once per group.
#[derive(Debug, Clone)]
pub struct ScaleOperators {
    pub mats: Vec<DMatrix<f64>>,
    /// `groups[g]` lists the scale indices whose matrix equals `mats[g]`.
    pub groups: Vec<Vec<usize>>,
    pub num_scales: usize,
    /// `mats` stacked vertically.
    pub stacked: DMatrix<f64>,
}

impl ScaleOperators {
    pub fn new(per_scale: &[DMatrix<f64>]) -> Self {
        let mut mats: Vec<DMatrix<f64>> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (k, m) in per_scale.iter().enumerate() {
            match mats.iter().position(|x| x == m) {
                Some(g) => groups[g].push(k),
                None => {
                    mats.push(m.clone());
                    groups.push(vec![k]);
                }
            }
        }
        let (r, c) = mats.first().map_or((0, 0), |m| m.shape());
        let mut stacked = DMatrix::zeros(mats.len() * r, c);
        for (g, m) in mats.iter().enumerate() {
            stacked.rows_mut(g * r, r).copy_from(m);
        }
        Self {
            mats,
            groups,
            num_scales: per_scale.len(),
            stacked,
        }
    }

    pub fn spatial(adj: &AdjacencySet) -> Self {
        Self::new(&adj.normalized)
    }

    /// Centre-block rows of each tiled scale.
    pub fn temporal(tiled: &[TiledAdjacency]) -> Self {
        let rows: Vec<_> = tiled.iter().map(|t| t.center_rows()).collect();
        Self::new(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> SkeletonGraph {
        SkeletonGraph::new(3, vec![(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn single_joint_distance_is_zero() {
        let g = SkeletonGraph::new(1, vec![]).unwrap();
        let d = hop_distance(&g);
        assert_eq!(d.get(0, 0), Some(0));
    }

    #[test]
    fn path_distances() {
        let d = hop_distance(&path3());
        assert_eq!(d.get(0, 1), Some(1));
        assert_eq!(d.get(0, 2), Some(2));
        assert_eq!(d.get(2, 0), Some(2));
    }

    #[test]
    fn disconnected_pair_is_unreachable() {
        let d = hop_distance(&SkeletonGraph::new(2, vec![]).unwrap());
        assert_eq!(d.get(0, 1), None);
        assert_eq!(k_adjacency(&d, 0), DMatrix::identity(2, 2));
    }

    #[test]
    fn invalid_graphs_rejected() {
        assert!(SkeletonGraph::new(0, vec![]).is_err());
        assert!(SkeletonGraph::new(2, vec![(0, 2)]).is_err());
        assert!(SkeletonGraph::new(2, vec![(1, 1)]).is_err());
        assert!(SkeletonGraph::new(2, vec![(0, 1), (1, 0)]).is_err());
    }

    #[test]
    fn scale_zero_and_beyond_diameter_are_identity() {
        let d = hop_distance(&path3());
        assert_eq!(k_adjacency(&d, 0), DMatrix::identity(3, 3));
        assert_eq!(k_adjacency(&d, 7), DMatrix::identity(3, 3));
    }

    #[test]
    fn path_scale_two() {
        let a = k_adjacency(&hop_distance(&path3()), 2);
        let mut expect = DMatrix::identity(3, 3);
        expect[(0, 2)] = 1.0;
        expect[(2, 0)] = 1.0;
        assert_eq!(a, expect);
    }

    #[test]
    fn normalize_path_scale_one() {
        let a = k_adjacency(&hop_distance(&path3()), 1);
        let n = normalize_adjacency(&a).unwrap();
        // degrees 2, 3, 2
        assert!((n[(0, 1)] - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((n[(0, 1)] - 0.408_248_290_463_863).abs() < 1e-12);
        assert_eq!(n, n.transpose());
        assert_eq!(
            normalize_adjacency(&DMatrix::identity(4, 4)).unwrap(),
            DMatrix::identity(4, 4)
        );
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let a = DMatrix::zeros(2, 2);
        assert!(matches!(normalize_adjacency(&a), Err(Error::ZeroDegree(0))));
    }

    #[test]
    fn tiling_single_joint() {
        let t = tile_adjacency(&DMatrix::from_element(1, 1, 1.0), 3, 0).unwrap();
        for v in t.matrix.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn tiling_window_one_matches_normalize() {
        let a = k_adjacency(&hop_distance(&path3()), 1);
        let t = tile_adjacency(&a, 1, 1).unwrap();
        assert_eq!(t.matrix, normalize_adjacency(&a).unwrap());
    }

    #[test]
    fn graph_json_roundtrip() {
        let g = SkeletonGraph::from_json_str(r#"{"num_joints": 3, "edges": [[0,1],[1,2]]}"#).unwrap();
        assert_eq!(g, path3());
        assert_eq!(SkeletonGraph::from_json_str(&g.to_json_string()).unwrap(), g);
        assert!(SkeletonGraph::from_json_str(r#"{"num_joints": 2, "edges": [[0,0]]}"#).is_err());
    }

    #[test]
    fn identical_scales_grouped() {
        let adj = AdjacencySet::build(&path3(), 5);
        let ops = ScaleOperators::spatial(&adj);
        // scale 0 and scales 3..=5 are all the identity
        assert_eq!(ops.mats.len(), 3);
        assert_eq!(ops.groups[0], vec![0, 3, 4, 5]);
    }
}
