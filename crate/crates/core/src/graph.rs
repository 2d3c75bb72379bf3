//! Skeleton graphs and the aggregation operators built from them.
//!
//! Two families of multi-scale operators are provided:
//!
//! - polynomial: `Â^k` with `Â = D^-1/2 (A + I) D^-1/2`. Walks that loop back
//!   towards the centre make near vertices dominate the higher powers.
//! - hop-extracted: `D_k^-1/2 Ã_k D_k^-1/2`, where `Ã_k` marks exactly the
//!   pairs at shortest-path distance `k` plus self-loops, so every vertex at a
//!   given distance receives the same weight.
//!
//! [`bias_report`] quantifies the difference between the two.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of joints in the COCO keypoint convention.
pub const COCO_NUM_JOINTS: usize = 17;

/// Bones of the 17-joint COCO skeleton (nose, eyes, ears, shoulders, elbows,
/// wrists, hips, knees, ankles).
pub const COCO_EDGES: [(usize, usize); 18] = [
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

/// Dense square matrix of reals in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {n}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.n + j] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks(self.n.max(1)).map(|r| r.iter().sum()).collect()
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.n, other.n, "matrix sizes differ");
        let n = self.n;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * n..(k + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    /// `self^k` by repeated squaring.
    pub fn pow(&self, mut k: usize) -> Matrix {
        let mut result = Matrix::identity(self.n);
        let mut base = self.clone();
        while k > 0 {
            if k & 1 == 1 {
                result = result.matmul(&base);
            }
            k >>= 1;
            if k > 0 {
                base = base.matmul(&base);
            }
        }
        result
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Square 0/1 matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMatrix {
    n: usize,
    data: Vec<u8>,
}

impl BinaryMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j] != 0
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.data[i * self.n + j] = u8::from(value);
    }

    pub fn to_real(&self) -> Matrix {
        Matrix {
            n: self.n,
            data: self.data.iter().map(|&b| f64::from(b)).collect(),
        }
    }
}

/// Undirected, unweighted skeleton graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkeletonGraph {
    num_vertices: usize,
    edges: Vec<(usize, usize)>,
    adjacency: BinaryMatrix,
}

impl SkeletonGraph {
    /// Builds a graph from an edge list. Duplicate edges collapse; self-loops
    /// and out-of-range indices are rejected.
    pub fn new(num_vertices: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = BinaryMatrix::zeros(num_vertices);
        let mut kept = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= num_vertices || b >= num_vertices {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) out of range for {num_vertices} vertices"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at vertex {a}")));
            }
            if !adjacency.get(a, b) {
                adjacency.set(a, b, true);
                adjacency.set(b, a, true);
                kept.push((a.min(b), a.max(b)));
            }
        }
        Ok(Self {
            num_vertices,
            edges: kept,
            adjacency,
        })
    }

    /// The 17-joint COCO skeleton.
    pub fn coco() -> Self {
        Self::new(COCO_NUM_JOINTS, &COCO_EDGES).expect("static skeleton is valid")
    }

    /// Path graph `0 - 1 - ... - (n-1)`.
    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::new(n, &edges).expect("path graph is valid")
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &BinaryMatrix {
        &self.adjacency
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_vertices).filter(move |&u| self.adjacency.get(v, u))
    }
}

/// Shortest-path hop count between two vertices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Hop {
    Reachable(usize),
    Unreachable,
}

impl Hop {
    pub fn finite(self) -> Option<usize> {
        match self {
            Hop::Reachable(d) => Some(d),
            Hop::Unreachable => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HopDistanceMatrix {
    n: usize,
    dist: Vec<Hop>,
}

impl HopDistanceMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Hop {
        self.dist[i * self.n + j]
    }

    /// Largest finite distance, or `None` if some pair is unreachable.
    pub fn diameter(&self) -> Option<usize> {
        self.dist
            .iter()
            .try_fold(0, |acc, h| h.finite().map(|d| acc.max(d)))
    }
}

/// All-pairs hop distances by one breadth-first search per source vertex.
pub fn hop_distances(graph: &SkeletonGraph) -> HopDistanceMatrix {
    let n = graph.num_vertices();
    let mut dist = vec![Hop::Unreachable; n * n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        let row = &mut dist[src * n..(src + 1) * n];
        row[src] = Hop::Reachable(0);
        queue.clear();
        queue.push_back(src);
        while let Some(v) = queue.pop_front() {
            let Hop::Reachable(d) = row[v] else {
                unreachable!("queued vertices have a distance")
            };
            for u in graph.neighbors(v) {
                if row[u] == Hop::Unreachable {
                    row[u] = Hop::Reachable(d + 1);
                    queue.push_back(u);
                }
            }
        }
    }
    HopDistanceMatrix { n, dist }
}

fn k_adjacency_from(dist: &HopDistanceMatrix, k: usize) -> BinaryMatrix {
    let n = dist.size();
    let mut m = BinaryMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, i == j || dist.get(i, j) == Hop::Reachable(k));
        }
    }
    m
}

/// `Ã_k`: ones where the hop distance is exactly `k`, plus the diagonal.
pub fn k_adjacency(graph: &SkeletonGraph, k: usize) -> BinaryMatrix {
    k_adjacency_from(&hop_distances(graph), k)
}

/// The ordered set `[Ã_0, Ã_1, ..., Ã_K]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HopAdjacencySet {
    matrices: Vec<BinaryMatrix>,
}

impl HopAdjacencySet {
    pub fn new(graph: &SkeletonGraph, max_scale: usize) -> Self {
        let dist = hop_distances(graph);
        Self {
            matrices: (0..=max_scale).map(|k| k_adjacency_from(&dist, k)).collect(),
        }
    }

    pub fn max_scale(&self) -> usize {
        self.matrices.len() - 1
    }

    pub fn matrices(&self) -> &[BinaryMatrix] {
        &self.matrices
    }

    /// `D_k^-1/2 Ã_k D_k^-1/2` for every scale.
    pub fn normalized(&self) -> Vec<Matrix> {
        self.matrices
            .iter()
            .map(|m| sym_normalize(&m.to_real()).expect("unit diagonal gives positive degrees"))
            .collect()
    }
}

/// `D^-1/2 M D^-1/2` with `D` the row sums of `M` itself.
pub fn sym_normalize(matrix: &Matrix) -> Result<Matrix> {
    let n = matrix.size();
    let inv_sqrt: Vec<f64> = matrix
        .row_sums()
        .into_iter()
        .enumerate()
        .map(|(row, d)| {
            if d > 0.0 {
                Ok(1.0 / d.sqrt())
            } else {
                Err(Error::ZeroDegree { row })
            }
        })
        .collect::<Result<_>>()?;
    let mut out = Matrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, inv_sqrt[i] * matrix.get(i, j) * inv_sqrt[j]);
        }
    }
    Ok(out)
}

/// `Â = D^-1/2 (A + I) D^-1/2`.
pub fn normalized_adjacency(graph: &SkeletonGraph) -> Matrix {
    let mut a = graph.adjacency().to_real();
    for i in 0..a.size() {
        a.set(i, i, 1.0);
    }
    sym_normalize(&a).expect("self-loops give positive degrees")
}

/// `Â^k`; `Â^0 = I`.
pub fn polynomial_adjacency(graph: &SkeletonGraph, k: usize) -> Matrix {
    normalized_adjacency(graph).pow(k)
}

/// One row of the weighting-bias diagnostic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub center: usize,
    pub scale: usize,
    /// Mean `Â^k` entry from the centre to vertices one hop away.
    pub poly_mean_d1: f64,
    /// Mean `Â^k` entry from the centre to vertices exactly `k` hops away.
    pub poly_mean_dk: f64,
    pub hop_mean_d1: f64,
    pub hop_mean_dk: f64,
}

impl BiasRow {
    /// Ratio of near to far weight under the polynomial operator.
    pub fn poly_bias_ratio(&self) -> f64 {
        self.poly_mean_d1 / self.poly_mean_dk
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
}

impl BiasReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn rows_for(&self, center: usize) -> impl Iterator<Item = &BiasRow> {
        self.rows.iter().filter(move |r| r.center == center)
    }
}

impl fmt::Display for BiasReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>6} {:>5} {:>14} {:>14} {:>14} {:>14}",
            "center", "scale", "poly_mean_d1", "poly_mean_dk", "hop_mean_d1", "hop_mean_dk"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>6} {:>5} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e}",
                r.center, r.scale, r.poly_mean_d1, r.poly_mean_dk, r.hop_mean_d1, r.hop_mean_dk
            )?;
        }
        Ok(())
    }
}

/// Compares polynomial and hop-extracted weights for every centre vertex and
/// every scale `2..=max_scale`. Scales with no vertex at that distance from a
/// centre are omitted for that centre.
pub fn bias_report(graph: &SkeletonGraph, max_scale: usize) -> Result<BiasReport> {
    if max_scale < 2 {
        return Err(Error::Config(format!(
            "bias report needs max_scale >= 2, got {max_scale}"
        )));
    }
    let n = graph.num_vertices();
    let dist = hop_distances(graph);
    for i in 0..n {
        for j in 0..n {
            if dist.get(i, j) == Hop::Unreachable {
                return Err(Error::DisconnectedGraph { from: i, to: j });
            }
        }
    }
    let a_hat = normalized_adjacency(graph);
    let mut rows = Vec::new();
    let mut poly = a_hat.clone();
    for k in 2..=max_scale {
        poly = poly.matmul(&a_hat);
        let hop = sym_normalize(&k_adjacency_from(&dist, k).to_real())?;
        for center in 0..n {
            let at = |d: usize| -> Vec<usize> {
                (0..n)
                    .filter(|&j| dist.get(center, j) == Hop::Reachable(d))
                    .collect()
            };
            let near = at(1);
            let far = at(k);
            if near.is_empty() || far.is_empty() {
                continue;
            }
            let mean = |m: &Matrix, set: &[usize]| {
                set.iter().map(|&j| m.get(center, j)).sum::<f64>() / set.len() as f64
            };
            rows.push(BiasRow {
                center,
                scale: k,
                poly_mean_d1: mean(&poly, &near),
                poly_mean_dk: mean(&poly, &far),
                hop_mean_d1: mean(&hop, &near),
                hop_mean_dk: mean(&hop, &far),
            });
        }
    }
    Ok(BiasReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> SkeletonGraph {
        SkeletonGraph::path(3)
    }

    #[test]
    fn path_distances() {
        let d = hop_distances(&path3());
        let expect = [[0, 1, 2], [1, 0, 1], [2, 1, 0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d.get(i, j), Hop::Reachable(expect[i][j]));
            }
        }
        assert_eq!(d.diameter(), Some(2));
    }

    #[test]
    fn single_vertex_and_empty_graph() {
        let g = SkeletonGraph::new(1, &[]).unwrap();
        assert_eq!(hop_distances(&g).get(0, 0), Hop::Reachable(0));
        let empty = SkeletonGraph::new(0, &[]).unwrap();
        assert_eq!(hop_distances(&empty).size(), 0);
    }

    #[test]
    fn unreachable_is_a_sentinel() {
        let g = SkeletonGraph::new(3, &[(0, 1)]).unwrap();
        let d = hop_distances(&g);
        assert_eq!(d.get(0, 2), Hop::Unreachable);
        assert_eq!(d.diameter(), None);
        let a2 = k_adjacency(&g, 2);
        assert!(!a2.get(0, 2));
        assert!(a2.get(2, 2));
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(SkeletonGraph::new(2, &[(0, 0)]).is_err());
        assert!(SkeletonGraph::new(2, &[(0, 2)]).is_err());
    }

    #[test]
    fn k0_is_identity_and_k1_is_self_looped_adjacency() {
        let g = SkeletonGraph::coco();
        assert_eq!(k_adjacency(&g, 0), BinaryMatrix::identity(17));
        let a1 = k_adjacency(&g, 1);
        for i in 0..17 {
            for j in 0..17 {
                assert_eq!(a1.get(i, j), i == j || g.adjacency().get(i, j));
            }
        }
    }

    #[test]
    fn path_k2() {
        let a2 = k_adjacency(&path3(), 2);
        let expect = [[1, 0, 1], [0, 1, 0], [1, 0, 1]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(u8::from(a2.get(i, j)), expect[i][j]);
            }
        }
    }

    #[test]
    fn sym_normalize_examples() {
        assert_eq!(sym_normalize(&Matrix::identity(4)).unwrap(), Matrix::identity(4));
        let ones = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let n = sym_normalize(&ones).unwrap();
        for v in n.as_slice() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        let zero_row = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_normalize(&zero_row), Err(Error::ZeroDegree { row: 0 })));
    }

    #[test]
    fn sym_normalize_path_by_hand() {
        // degrees of A + I on 0-1-2 are (2, 3, 2)
        let n = normalized_adjacency(&path3());
        let s6 = 1.0 / 6f64.sqrt();
        let expect = [[0.5, s6, 0.0], [s6, 1.0 / 3.0, s6], [0.0, s6, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((n.get(i, j) - expect[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn polynomial_powers_match_naive_products() {
        let g = path3();
        let a = normalized_adjacency(&g);
        assert_eq!(polynomial_adjacency(&g, 0), Matrix::identity(3));
        assert_eq!(polynomial_adjacency(&g, 1), a);
        let mut naive = Matrix::identity(3);
        for k in 1..=7 {
            naive = naive.matmul(&a);
            assert!(polynomial_adjacency(&g, k).max_abs_diff(&naive) < 1e-12);
        }
    }

    #[test]
    fn bias_report_path5() {
        let report = bias_report(&SkeletonGraph::path(5), 4).unwrap();
        for row in report.rows_for(0) {
            assert!(row.poly_mean_d1 > row.poly_mean_dk, "{row:?}");
            assert_eq!(row.hop_mean_d1, 0.0);
            assert!(row.hop_mean_dk > 0.0);
        }
        let text = report.to_string();
        assert!(text.starts_with("center"));
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert!(json[0].get("poly_mean_dk").is_some());
    }

    #[test]
    fn bias_report_errors() {
        let g = SkeletonGraph::new(3, &[(0, 1)]).unwrap();
        assert!(matches!(bias_report(&g, 2), Err(Error::DisconnectedGraph { .. })));
        assert!(bias_report(&SkeletonGraph::path(3), 1).is_err());
    }

    #[test]
    fn coco_is_connected() {
        assert_eq!(hop_distances(&SkeletonGraph::coco()).diameter(), Some(6));
    }
}
