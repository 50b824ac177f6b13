//! Bipartite user–item graph operators.
//!
//! Node layout is `[users | items]`: user `u` is node `u`, item `i` is node
//! `num_users + i`. Rows are stored in CSR form with columns ascending, so
//! every sparse product is evaluated in a fixed order.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest node count accepted by [`eigen_spectrum`].
pub const DENSE_EIGEN_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// `D^{-1/2} A D^{-1/2}`: weight `1/sqrt(deg(r) deg(c))`.
    Symmetric,
    /// `D^{-1} A`: each row averages its neighbors, weight `1/deg(r)`.
    Mean,
}

/// Degree-normalized adjacency of the user–item graph.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAdj<T> {
    num_users: usize,
    num_items: usize,
    aggregation: Aggregation,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<T>,
    degrees: Vec<usize>,
    edges: Vec<Interaction>,
}

impl<T: Scalar> NormAdj<T> {
    /// Builds the adjacency from undirected user–item edges. Duplicate
    /// edges must already be removed.
    pub fn from_edges(
        num_users: usize,
        num_items: usize,
        edges: Vec<Interaction>,
        aggregation: Aggregation,
    ) -> Self {
        let size = num_users + num_items;
        let mut neighbors = vec![Vec::new(); size];
        for e in &edges {
            neighbors[e.user].push(num_users + e.item);
            neighbors[num_users + e.item].push(e.user);
        }
        let degrees: Vec<usize> = neighbors.iter().map(Vec::len).collect();

        let mut row_ptr = Vec::with_capacity(size + 1);
        let mut cols = Vec::with_capacity(2 * edges.len());
        let mut weights = Vec::with_capacity(2 * edges.len());
        row_ptr.push(0);
        for (r, adj) in neighbors.iter_mut().enumerate() {
            adj.sort_unstable();
            for &c in adj.iter() {
                let w = match aggregation {
                    Aggregation::Symmetric => 1.0 / ((degrees[r] * degrees[c]) as f64).sqrt(),
                    Aggregation::Mean => 1.0 / degrees[r] as f64,
                };
                cols.push(c);
                weights.push(T::of(w));
            }
            row_ptr.push(cols.len());
        }
        Self {
            num_users,
            num_items,
            aggregation,
            row_ptr,
            cols,
            weights,
            degrees,
            edges,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Node count `m + n`.
    pub fn size(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Undirected user–item edges the operator was built from.
    pub fn edges(&self) -> &[Interaction] {
        &self.edges
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Stored entries as `(row, col, weight)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.size()).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.cols[k], self.weights[k]))
        })
    }

    pub fn row(&self, r: usize) -> (&[usize], &[T]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.cols[span.clone()], &self.weights[span])
    }

    /// `self · x` for a dense `(m+n) × k` matrix.
    pub fn spmm(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if x.nrows() != self.size() {
            return Err(Error::Shape(format!(
                "adjacency has {} nodes but matrix has {} rows",
                self.size(),
                x.nrows()
            )));
        }
        let k = x.ncols();
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut out = Array2::<T>::zeros((self.size(), k));
        for (r, mut out_row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let dst = out_row.as_slice_mut().expect("row-major output");
            let (cols, ws) = self.row(r);
            for (&c, &w) in cols.iter().zip(ws) {
                let xr = &src[c * k..(c + 1) * k];
                for (d, &v) in dst.iter_mut().zip(xr) {
                    *d += w * v;
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.size(), self.size()));
        for (r, c, w) in self.entries() {
            a[[r, c]] = w.to_f64_lossy();
        }
        a
    }

    /// Coordinate-format text (1-based indices) for inspection with
    /// Matrix Market tooling.
    pub fn to_matrix_market(&self) -> String {
        let mut s = String::from("%%MatrixMarket matrix coordinate real general\n");
        let _ = writeln!(s, "{} {} {}", self.size(), self.size(), self.nnz());
        for (r, c, w) in self.entries() {
            let _ = writeln!(s, "{} {} {:e}", r + 1, c + 1, w.to_f64_lossy());
        }
        s
    }
}

/// Symmetric-normalized adjacency of the training graph. Isolated nodes
/// keep empty rows.
pub fn build_normalized_adjacency<T: Scalar>(train: &Dataset) -> NormAdj<T> {
    NormAdj::from_edges(
        train.num_users(),
        train.num_items(),
        train.to_vec(),
        Aggregation::Symmetric,
    )
}

/// Row-normalized (mean) adjacency of the training graph.
pub fn build_mean_adjacency<T: Scalar>(train: &Dataset) -> NormAdj<T> {
    NormAdj::from_edges(
        train.num_users(),
        train.num_items(),
        train.to_vec(),
        Aggregation::Mean,
    )
}

/// Layer-averaged propagation `(1/(L+1)) Σ_{l=0..L} Ã^l P0`.
pub fn propagate<T: Scalar>(adj: &NormAdj<T>, p0: ArrayView2<'_, T>, layers: usize) -> Result<Array2<T>> {
    if p0.nrows() != adj.size() {
        return Err(Error::Shape(format!(
            "propagation input has {} rows, graph has {} nodes",
            p0.nrows(),
            adj.size()
        )));
    }
    let mut acc = p0.to_owned();
    let mut cur = p0.to_owned();
    for _ in 0..layers {
        cur = adj.spmm(cur.view())?;
        acc += &cur;
    }
    acc /= T::of_usize(layers + 1);
    Ok(acc)
}

/// Spectral response of layer averaging: `(1/(L+1)) Σ_{l=0..L} λ^l`,
/// with `λ^0 = 1`.
pub fn filter_response<T: Scalar>(layers: usize, lambda: T) -> T {
    let mut power = T::one();
    let mut sum = T::one();
    for _ in 0..layers {
        power *= lambda;
        sum += power;
    }
    sum / T::of_usize(layers + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    EdgeDropout,
    FeatureMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub rho: f64,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn new(kind: AugmentKind, rho: f64, seed: u64) -> Self {
        Self { kind, rho, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "drop probability must lie in [0, 1), got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

pub enum AugmentTarget<'a, T> {
    Graph(&'a NormAdj<T>),
    Features(ArrayView2<'a, T>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AugmentedView<T> {
    Graph(NormAdj<T>),
    Features(Array2<T>),
}

/// Produces one stochastic view. Calling twice with different seeds gives
/// the two views contrasted by SGL.
pub fn augment<T: Scalar>(target: AugmentTarget<'_, T>, spec: &AugmentSpec) -> Result<AugmentedView<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match (spec.kind, target) {
        (AugmentKind::EdgeDropout, AugmentTarget::Graph(adj)) => {
            Ok(AugmentedView::Graph(drop_edges(adj, spec.rho, &mut rng)))
        }
        (AugmentKind::FeatureMask, AugmentTarget::Features(x)) => {
            let mask = feature_mask(x.nrows(), x.ncols(), spec.rho, &mut rng);
            Ok(AugmentedView::Features(&x * &mask))
        }
        (kind, _) => Err(Error::Config(format!(
            "{kind:?} augmentation does not apply to this input"
        ))),
    }
}

/// Keeps each undirected edge with probability `1 − rho`, then
/// renormalizes from the surviving degrees.
pub fn drop_edges<T: Scalar, R: Rng + ?Sized>(adj: &NormAdj<T>, rho: f64, rng: &mut R) -> NormAdj<T> {
    let kept: Vec<Interaction> = adj
        .edges()
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() >= rho)
        .collect();
    NormAdj::from_edges(adj.num_users(), adj.num_items(), kept, adj.aggregation())
}

/// 0/1 mask with each entry zero with probability `rho`.
pub fn feature_mask<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rho: f64, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < rho {
            T::zero()
        } else {
            T::one()
        }
    })
}

/// Dense eigendecomposition, eigenvalues ordered by descending magnitude.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors as columns, aligned with `eigenvalues`.
    pub eigenvectors: Array2<f64>,
}

impl Spectrum {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,eigenvalue\n");
        for (i, l) in self.eigenvalues.iter().enumerate() {
            let _ = writeln!(s, "{i},{l:.17e}");
        }
        s
    }

    /// `U diag(f(λ)) Uᵀ`.
    pub fn apply_filter(&self, f: impl Fn(f64) -> f64) -> Array2<f64> {
        let mut scaled = self.eigenvectors.clone();
        for (mut col, &l) in scaled.axis_iter_mut(Axis(1)).zip(&self.eigenvalues) {
            col *= f(l);
        }
        scaled.dot(&self.eigenvectors.t())
    }
}

pub fn eigen_spectrum<T: Scalar>(adj: &NormAdj<T>) -> Result<Spectrum> {
    eigen_spectrum_with_limit(adj, DENSE_EIGEN_LIMIT)
}

pub fn eigen_spectrum_with_limit<T: Scalar>(adj: &NormAdj<T>, limit: usize) -> Result<Spectrum> {
    let size = adj.size();
    if size > limit {
        return Err(Error::TooLarge { nodes: size, limit });
    }
    let mut dense = DMatrix::<f64>::zeros(size, size);
    for (r, c, w) in adj.entries() {
        dense[(r, c)] = w.to_f64_lossy();
    }
    let eig = dense.symmetric_eigen();
    let mut order: Vec<usize> = (0..size).collect();
    order.sort_by(|&a, &b| {
        let (la, lb) = (eig.eigenvalues[a], eig.eigenvalues[b]);
        lb.abs().total_cmp(&la.abs()).then(lb.total_cmp(&la))
    });
    let eigenvalues = order.iter().map(|&j| eig.eigenvalues[j]).collect();
    let eigenvectors = Array2::from_shape_fn((size, size), |(r, c)| eig.eigenvectors[(r, order[c])]);
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
    })
}

/// Power-iteration estimate of the spectral radius, usable on graphs too
/// large for [`eigen_spectrum`]. Converges from below.
pub fn spectral_radius<T: Scalar>(adj: &NormAdj<T>, iterations: usize, seed: u64) -> Result<f64> {
    let size = adj.size();
    if size == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::<T>::from_shape_simple_fn((size, 1), || T::of(rng.random::<f64>() + 0.5));
    let norm = |v: &Array2<T>| v.iter().map(|a| a.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let current = norm(&x);
        if current == 0.0 {
            return Ok(0.0);
        }
        x /= T::of(current);
        let y = adj.spmm(x.view())?;
        estimate = norm(&y);
        x = y;
    }
    Ok(estimate)
}
