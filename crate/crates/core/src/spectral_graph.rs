//! Graphs, shift operators and the graph Fourier machinery.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub weight: f64,
}

/// Undirected weighted graph without self loops. Edges are stored with
/// `u < v`, sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    node_count: usize,
    edges: Vec<Edge>,
}

impl Graph {
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::InvalidGraph("graph needs at least one node".into()));
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for e in edges {
            if e.u >= node_count || e.v >= node_count {
                return Err(Error::IndexOutOfRange {
                    index: e.u.max(e.v),
                    size: node_count,
                });
            }
            if e.u == e.v {
                return Err(Error::InvalidGraph(format!("self loop at node {}", e.u)));
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(Error::InvalidGraph(format!(
                    "edge ({}, {}) has non-positive weight {}",
                    e.u, e.v, e.weight
                )));
            }
            let (u, v) = if e.u < e.v { (e.u, e.v) } else { (e.v, e.u) };
            if !seen.insert((u, v)) {
                return Err(Error::InvalidGraph(format!("duplicate edge ({u}, {v})")));
            }
            out.push(Edge { u, v, weight: e.weight });
        }
        out.sort_by_key(|e| (e.u, e.v));
        Ok(Self { node_count, edges: out })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn adjacency(&self) -> Matrix {
        let n = self.node_count;
        let mut w = Matrix::zeros(n, n);
        for e in &self.edges {
            w[(e.u, e.v)] = e.weight;
            w[(e.v, e.u)] = e.weight;
        }
        w
    }

    pub fn is_connected(&self) -> bool {
        let n = self.node_count;
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            adj[e.u].push(e.v);
            adj[e.v].push(e.u);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Combinatorial Laplacian `diag(W 1) - W`.
pub fn laplacian(g: &Graph) -> Matrix {
    let w = g.adjacency();
    let degrees = Vector::from_iterator(w.nrows(), w.row_iter().map(|r| r.sum()));
    Matrix::from_diagonal(&degrees) - w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Binary,
    Gaussian { sigma: f64 },
}

/// k-nearest-neighbour graph, symmetrized by union. Neighbour ranking breaks
/// distance ties by the lower node index.
pub fn build_knn_graph(coords: &[Vec<f64>], k: usize, weighting: Weighting) -> Result<Graph> {
    let n = coords.len();
    if n < 2 || k == 0 || k >= n {
        return Err(Error::BadK { k, n });
    }
    let dim = coords[0].len();
    if coords.iter().any(|c| c.len() != dim) {
        return Err(Error::dims("points have different dimensions"));
    }
    if coords.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    if let Weighting::Gaussian { sigma } = weighting {
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
    }
    let dist2 = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };

    let mut pairs = BTreeSet::new();
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
        for j in (0..n).filter(|&j| j != i) {
            let d = dist2(&coords[i], &coords[j]);
            if d == 0.0 {
                return Err(Error::DuplicatePoints(i.min(j), i.max(j)));
            }
            others.push((d, j));
        }
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            pairs.insert((i.min(j), i.max(j)));
        }
    }

    let edges = pairs.into_iter().map(|(u, v)| {
        let weight = match weighting {
            Weighting::Binary => 1.0,
            Weighting::Gaussian { sigma } => (-dist2(&coords[u], &coords[v]) / (2.0 * sigma * sigma)).exp(),
        };
        Edge { u, v, weight }
    });
    Graph::new(n, edges.collect::<Vec<_>>())
}

/// `rows x cols` 4-neighbour grid with unit weights. Node `(r, c)` has index
/// `r * cols + c`.
pub fn grid_graph(rows: usize, cols: usize) -> Result<Graph> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParameter("grid needs positive dimensions".into()));
    }
    let idx = |r: usize, c: usize| r * cols + c;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push(Edge { u: idx(r, c), v: idx(r, c + 1), weight: 1.0 });
            }
            if r + 1 < rows {
                edges.push(Edge { u: idx(r, c), v: idx(r + 1, c), weight: 1.0 });
            }
        }
    }
    Graph::new(rows * cols, edges)
}

/// Connected random geometric graph in the unit square: nodes within
/// `radius` are joined with unit weight. Resamples until connected.
pub fn random_geometric_graph(n: usize, radius: f64, rng: &mut impl Rng) -> Result<(Graph, Vec<Vec<f64>>)> {
    if n == 0 || radius.is_nan() || radius <= 0.0 {
        return Err(Error::InvalidParameter("need n >= 1 and radius > 0".into()));
    }
    for _ in 0..10_000 {
        let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let d2 = (pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2);
                if d2 <= radius * radius {
                    edges.push(Edge { u: i, v: j, weight: 1.0 });
                }
            }
        }
        let g = Graph::new(n, edges)?;
        if g.is_connected() {
            return Ok((g, pts));
        }
    }
    Err(Error::InvalidParameter(format!("radius {radius} too small to connect {n} nodes")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Laplacian,
    Adjacency,
}

impl ShiftKind {
    pub fn shift(self, g: &Graph) -> Matrix {
        match self {
            ShiftKind::Laplacian => laplacian(g),
            ShiftKind::Adjacency => g.adjacency(),
        }
    }
}

/// Eigenbasis of a graph shift; column `i` of `u` is graph frequency `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    pub u: Matrix,
    pub lambda: Vector,
    pub kind: ShiftKind,
}

impl SpectralBasis {
    pub fn of_graph(g: &Graph, kind: ShiftKind) -> Result<Self> {
        gft_basis(&kind.shift(g), kind)
    }

    pub fn node_count(&self) -> usize {
        self.u.nrows()
    }
}

pub fn gft_basis(shift: &Matrix, kind: ShiftKind) -> Result<SpectralBasis> {
    let eig = numerics::sym_eigendecompose(shift)?;
    Ok(SpectralBasis {
        u: eig.vectors,
        lambda: eig.values,
        kind,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

pub fn transform(basis: &SpectralBasis, x: &Vector, direction: Direction) -> Result<Vector> {
    let n = basis.node_count();
    if x.len() != n {
        return Err(Error::dims(format!("signal has length {}, graph has {n} nodes", x.len())));
    }
    Ok(match direction {
        Direction::Forward => basis.u.tr_mul(x),
        Direction::Inverse => &basis.u * x,
    })
}

fn checked_indices(mut indices: Vec<usize>, size: usize) -> Result<Vec<usize>> {
    indices.sort_unstable();
    if let Some(&bad) = indices.iter().find(|&&i| i >= size) {
        return Err(Error::IndexOutOfRange { index: bad, size });
    }
    if indices.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidIndexSet("repeated index".into()));
    }
    Ok(indices)
}

/// Sorted, distinct, nonempty set of graph frequency indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct FrequencySet(Vec<usize>);

impl FrequencySet {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        let idx = checked_indices(indices, n)?;
        if idx.is_empty() {
            return Err(Error::InvalidIndexSet("frequency set must be nonempty".into()));
        }
        Ok(Self(idx))
    }

    pub fn all(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<usize>> for FrequencySet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v, usize::MAX)
    }
}

impl From<FrequencySet> for Vec<usize> {
    fn from(f: FrequencySet) -> Self {
        f.0
    }
}

/// Sorted, distinct set of node indices; may be empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct VertexSet(Vec<usize>);

impl VertexSet {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        Ok(Self(checked_indices(indices, n)?))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn all(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    /// Set with `i` added.
    pub fn with(&self, i: usize) -> Self {
        let mut v = self.0.clone();
        if let Err(pos) = v.binary_search(&i) {
            v.insert(pos, i);
        }
        Self(v)
    }

    pub fn complement(&self, n: usize) -> Self {
        Self((0..n).filter(|i| !self.contains(*i)).collect())
    }

    /// Largest index plus one, zero when empty.
    pub fn bound(&self) -> usize {
        self.0.last().map_or(0, |&i| i + 1)
    }
}

impl TryFrom<Vec<usize>> for VertexSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v, usize::MAX)
    }
}

impl From<VertexSet> for Vec<usize> {
    fn from(s: VertexSet) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyPolicy {
    Lowest(usize),
    EnergyFraction(f64),
}

/// Picks the band. `reference` holds one signal per row (rows = time).
pub fn select_frequencies(
    basis: &SpectralBasis,
    reference: Option<&Matrix>,
    policy: FrequencyPolicy,
) -> Result<FrequencySet> {
    let n = basis.node_count();
    match policy {
        FrequencyPolicy::Lowest(k) => {
            if k == 0 || k > n {
                return Err(Error::InvalidParameter(format!("lowest({k}) invalid for N = {n}")));
            }
            FrequencySet::new((0..k).collect(), n)
        }
        FrequencyPolicy::EnergyFraction(p) => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidParameter(format!("energy fraction {p} not in (0, 1]")));
            }
            let signals = reference.ok_or(Error::NoReference)?;
            if signals.ncols() != n {
                return Err(Error::dims(format!(
                    "reference signals have {} columns, graph has {n} nodes",
                    signals.ncols()
                )));
            }
            // rows of X U are the GFTs of the rows of X
            let spectra = signals * &basis.u;
            let energy: Vec<f64> = spectra.column_iter().map(|c| c.norm_squared()).collect();
            let total: f64 = energy.iter().sum();
            if total.is_nan() || total <= 0.0 {
                return Err(Error::ZeroEnergy);
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));
            let target = p * total * (1.0 - 1e-12);
            let mut acc = 0.0;
            let mut chosen = Vec::new();
            for i in order {
                chosen.push(i);
                acc += energy[i];
                if acc >= target {
                    break;
                }
            }
            FrequencySet::new(chosen, n)
        }
    }
}

/// `U_F`: the columns of `U` listed in `freqs`.
pub fn band_selector(basis: &SpectralBasis, freqs: &FrequencySet) -> Result<Matrix> {
    let n = basis.node_count();
    if let Some(&bad) = freqs.indices().iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, size: n });
    }
    Ok(basis.u.select_columns(freqs.indices()))
}

/// `C_S = diag(1_S)`.
pub fn vertex_selector(n: usize, set: &VertexSet) -> Result<Matrix> {
    if set.bound() > n {
        return Err(Error::IndexOutOfRange {
            index: set.bound() - 1,
            size: n,
        });
    }
    let mut c = Matrix::zeros(n, n);
    for &i in set.indices() {
        c[(i, i)] = 1.0;
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p2() -> Graph {
        Graph::new(2, [Edge { u: 0, v: 1, weight: 1.0 }]).unwrap()
    }

    #[test]
    fn knn_collinear() {
        let g = build_knn_graph(&[vec![0.0], vec![1.0], vec![3.0]], 1, Weighting::Binary).unwrap();
        let pairs: Vec<_> = g.edges().iter().map(|e| (e.u, e.v, e.weight)).collect();
        assert_eq!(pairs, vec![(0, 1, 1.0), (1, 2, 1.0)]);
    }

    #[test]
    fn knn_full_neighbourhood_is_complete() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let g = build_knn_graph(&pts, 5, Weighting::Binary).unwrap();
        assert_eq!(g.edges().len(), 15);
    }

    #[test]
    fn knn_square_has_no_diagonals() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]];
        let g = build_knn_graph(&pts, 2, Weighting::Binary).unwrap();
        let pairs: Vec<_> = g.edges().iter().map(|e| (e.u, e.v)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 3), (1, 2), (2, 3)]);
    }

    #[test]
    fn knn_errors_and_gaussian_weights() {
        assert!(matches!(
            build_knn_graph(&[vec![0.0], vec![0.0], vec![1.0]], 1, Weighting::Binary),
            Err(Error::DuplicatePoints(0, 1))
        ));
        assert!(matches!(build_knn_graph(&[vec![0.0], vec![1.0]], 2, Weighting::Binary), Err(Error::BadK { .. })));
        let g = build_knn_graph(&[vec![0.0], vec![2.0]], 1, Weighting::Gaussian { sigma: 1.0 }).unwrap();
        assert_relative_eq!(g.edges()[0].weight, (-2.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn graph_validation() {
        assert!(Graph::new(2, [Edge { u: 0, v: 0, weight: 1.0 }]).is_err());
        assert!(Graph::new(2, [Edge { u: 0, v: 1, weight: -1.0 }]).is_err());
        assert!(Graph::new(2, [Edge { u: 0, v: 2, weight: 1.0 }]).is_err());
        let dup = [Edge { u: 0, v: 1, weight: 1.0 }, Edge { u: 1, v: 0, weight: 2.0 }];
        assert!(Graph::new(2, dup).is_err());
    }

    #[test]
    fn laplacian_cases() {
        assert_eq!(laplacian(&p2()), Matrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert_eq!(laplacian(&Graph::new(3, []).unwrap()), Matrix::zeros(3, 3));
        let tri = Graph::new(
            3,
            [(0, 1), (1, 2), (0, 2)].map(|(u, v)| Edge { u, v, weight: 1.0 }),
        )
        .unwrap();
        let l = laplacian(&tri);
        let values = numerics::sym_eigenvalues(&l).unwrap();
        assert_relative_eq!(values[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(values[1], 3.0, epsilon = 1e-12);
        assert_relative_eq!(values[2], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn transform_cases() {
        let b = SpectralBasis::of_graph(&p2(), ShiftKind::Laplacian).unwrap();
        let xh = transform(&b, &Vector::from_vec(vec![1.0, 0.0]), Direction::Forward).unwrap();
        assert_relative_eq!(xh[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_relative_eq!(xh[1], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert!(transform(&b, &Vector::zeros(3), Direction::Forward).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = grid_graph(3, 4).unwrap();
        let b = SpectralBasis::of_graph(&g, ShiftKind::Laplacian).unwrap();
        let x = Vector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let back = transform(&b, &transform(&b, &x, Direction::Forward).unwrap(), Direction::Inverse).unwrap();
        assert!((back - &x).norm() < 1e-10);
        let e3 = transform(&b, &b.u.column(3).into_owned(), Direction::Forward).unwrap();
        let mut unit = Vector::zeros(12);
        unit[3] = 1.0;
        assert!((e3 - unit).norm() < 1e-10);
    }

    #[test]
    fn frequency_policies() {
        let g = grid_graph(2, 5).unwrap();
        let b = SpectralBasis::of_graph(&g, ShiftKind::Laplacian).unwrap();
        let f = select_frequencies(&b, None, FrequencyPolicy::Lowest(3)).unwrap();
        assert_eq!(f.indices(), &[0, 1, 2]);
        let x = crate::numerics::Matrix::from_fn(1, 10, |_, j| b.u[(j, 5)]);
        let f = select_frequencies(&b, Some(&x), FrequencyPolicy::EnergyFraction(0.99)).unwrap();
        assert_eq!(f.indices(), &[5]);

        assert!(matches!(
            select_frequencies(&b, None, FrequencyPolicy::EnergyFraction(0.5)),
            Err(Error::NoReference)
        ));
    }

    #[test]
    fn energy_fraction_cumulative_sum() {
        // identity basis: spectra equal the signals
        let basis = SpectralBasis {
            u: Matrix::identity(4, 4),
            lambda: Vector::from_vec(vec![0.0, 1.0, 2.0, 3.0]),
            kind: ShiftKind::Laplacian,
        };
        let x = Matrix::from_row_slice(1, 4, &[2.0, 3f64.sqrt(), 2f64.sqrt(), 1.0]);
        let f = select_frequencies(&basis, Some(&x), FrequencyPolicy::EnergyFraction(0.7)).unwrap();
        assert_eq!(f.indices(), &[0, 1]);
        let scaled = &x * 37.5;
        let f2 = select_frequencies(&basis, Some(&scaled), FrequencyPolicy::EnergyFraction(0.7)).unwrap();
        assert_eq!(f, f2);
    }

    #[test]
    fn selectors() {
        let b = SpectralBasis::of_graph(&p2(), ShiftKind::Laplacian).unwrap();
        assert_eq!(band_selector(&b, &FrequencySet::all(2)).unwrap(), b.u);
        let col = band_selector(&b, &FrequencySet::new(vec![0], 2).unwrap()).unwrap();
        assert_relative_eq!(col[(0, 0)], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_relative_eq!(col[(1, 0)], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert!(band_selector(&b, &FrequencySet::new(vec![0], 5).unwrap().clone()).is_ok());

        assert_eq!(vertex_selector(3, &VertexSet::empty()).unwrap(), Matrix::zeros(3, 3));
        assert_eq!(vertex_selector(3, &VertexSet::all(3)).unwrap(), Matrix::identity(3, 3));
        let c = vertex_selector(3, &VertexSet::new(vec![1], 3).unwrap()).unwrap();
        assert_eq!(c, Matrix::from_diagonal(&Vector::from_vec(vec![0.0, 1.0, 0.0])));
        assert!(vertex_selector(2, &VertexSet::new(vec![4], 5).unwrap()).is_err());
        assert!(FrequencySet::new(vec![], 3).is_err());
        assert!(VertexSet::new(vec![1, 1], 3).is_err());
    }

    #[test]
    fn grid_laplacian_is_psd() {
        let g = grid_graph(5, 15).unwrap();
        let values = numerics::sym_eigenvalues(&laplacian(&g)).unwrap();
        assert!(values[0] > -1e-9);
        assert!(values[0].abs() < 1e-9);
    }
}
