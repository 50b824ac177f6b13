//! The four collaborative-filtering model families, their parameters and
//! forward scoring.

use std::borrow::Cow;
use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{propagate, AugmentKind, NormAdj};
use crate::scalar::Scalar;

/// Hyperparameters of the contrastive graph model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SglConfig {
    pub layers: usize,
    /// Augmentation drop probability.
    pub rho: f64,
    /// Weight of the contrastive term.
    pub gamma: f64,
    /// Softmax temperature.
    pub tau: f64,
    pub augment: AugmentKind,
    /// Include the item-side InfoNCE term next to the user-side one.
    pub item_term: bool,
}

impl Default for SglConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            rho: 0.1,
            gamma: 0.1,
            tau: 0.2,
            augment: AugmentKind::EdgeDropout,
            item_term: true,
        }
    }
}

/// Widths of the NeuMF tower, input layer included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tower {
    /// `[2k, k, k/2]`
    Default,
    Dims(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Bpr,
    NeuMf { tower: Tower },
    LightGcn { layers: usize },
    Sgl(SglConfig),
}

impl ModelKind {
    pub fn neumf() -> Self {
        ModelKind::NeuMf {
            tower: Tower::Default,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Bpr => "bpr",
            ModelKind::NeuMf { .. } => "neumf",
            ModelKind::LightGcn { .. } => "lightgcn",
            ModelKind::Sgl(_) => "sgl",
        }
    }

    pub fn tag(&self) -> VariantTag {
        match self {
            ModelKind::Bpr => VariantTag::Bpr,
            ModelKind::NeuMf { .. } => VariantTag::NeuMf,
            ModelKind::LightGcn { .. } => VariantTag::LightGcn,
            ModelKind::Sgl(_) => VariantTag::Sgl,
        }
    }

    /// Propagation depth for graph models, `None` otherwise.
    pub fn layers(&self) -> Option<usize> {
        match self {
            ModelKind::LightGcn { layers } => Some(*layers),
            ModelKind::Sgl(cfg) => Some(cfg.layers),
            _ => None,
        }
    }

    pub fn is_graph(&self) -> bool {
        self.layers().is_some()
    }

    /// Tower widths for embedding size `k`.
    pub fn tower_dims(&self, k: usize) -> Option<Vec<usize>> {
        match self {
            ModelKind::NeuMf { tower: Tower::Default } => Some(vec![2 * k, k, (k / 2).max(1)]),
            ModelKind::NeuMf {
                tower: Tower::Dims(d),
            } => Some(d.clone()),
            _ => None,
        }
    }

    /// Checks the constraints that training relies on. Scoring alone also
    /// accepts zero-layer graph models.
    pub fn validate(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::Config("embedding size must be at least 1".into()));
        }
        if let Some(layers) = self.layers() {
            if layers == 0 {
                return Err(Error::Config("graph models need at least one layer".into()));
            }
        }
        if let Some(dims) = self.tower_dims(k) {
            if dims.len() < 2 || dims[0] != 2 * k || dims.contains(&0) {
                return Err(Error::Config(format!(
                    "NeuMF tower {dims:?} must start at 2k = {} and have positive widths",
                    2 * k
                )));
            }
        }
        if let ModelKind::Sgl(cfg) = self {
            if !(cfg.gamma >= 0.0) || !(cfg.tau > 0.0) || !(0.0..1.0).contains(&cfg.rho) {
                return Err(Error::Config(format!(
                    "SGL needs gamma >= 0, tau > 0 and rho in [0, 1): {cfg:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum VariantTag {
    Bpr = 0,
    NeuMf = 1,
    LightGcn = 2,
    Sgl = 3,
}

impl VariantTag {
    fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            0 => Self::Bpr,
            1 => Self::NeuMf,
            2 => Self::LightGcn,
            3 => Self::Sgl,
            _ => return None,
        })
    }
}

/// NeuMF tower weights plus the fusion layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    /// `weights[l]` maps width `dims[l]` to `dims[l + 1]`.
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
    /// Linear layer over `[p ⊙ q ‖ h_L]`.
    pub fusion: Array1<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(dims: &[usize], k: usize) -> Self {
        let weights = dims.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect();
        let biases = dims[1..].iter().map(|&d| Array1::zeros(d)).collect();
        let fusion = Array1::zeros(k + dims[dims.len() - 1]);
        Self {
            weights,
            biases,
            fusion,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.weights[0].ncols()];
        d.extend(self.weights.iter().map(|w| w.nrows()));
        d
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            fusion: Array1::zeros(self.fusion.raw_dim()),
        }
    }
}

/// Trainable parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    /// `m × k` user embeddings.
    pub user: Array2<T>,
    /// `n × k` item embeddings.
    pub item: Array2<T>,
    pub mlp: Option<Mlp<T>>,
}

pub type Gradients<T> = Params<T>;

impl<T: Scalar> Params<T> {
    pub fn num_users(&self) -> usize {
        self.user.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item.nrows()
    }

    pub fn dim(&self) -> usize {
        self.user.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            user: Array2::zeros(self.user.raw_dim()),
            item: Array2::zeros(self.item.raw_dim()),
            mlp: self.mlp.as_ref().map(Mlp::zeros_like),
        }
    }

    /// Every tensor as a flat slice, in serialization order.
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = vec![
            self.user.as_slice().expect("row-major"),
            self.item.as_slice().expect("row-major"),
        ];
        if let Some(mlp) = &self.mlp {
            out.extend(mlp.weights.iter().map(|w| w.as_slice().expect("row-major")));
            out.extend(mlp.biases.iter().map(|b| b.as_slice().expect("contiguous")));
            out.push(mlp.fusion.as_slice().expect("contiguous"));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![
            self.user.as_slice_mut().expect("row-major"),
            self.item.as_slice_mut().expect("row-major"),
        ];
        if let Some(mlp) = &mut self.mlp {
            out.extend(mlp.weights.iter_mut().map(|w| w.as_slice_mut().expect("row-major")));
            out.extend(mlp.biases.iter_mut().map(|b| b.as_slice_mut().expect("contiguous")));
            out.push(mlp.fusion.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        let a = self.slices();
        let b = other.slices();
        self.user.dim() == other.user.dim()
            && self.item.dim() == other.item.dim()
            && a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    /// `[user; item]`, the `(m+n) × k` node matrix used by propagation.
    pub fn node_embeddings(&self) -> Array2<T> {
        ndarray::concatenate(Axis(0), &[self.user.view(), self.item.view()]).expect("equal widths")
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Splits an `(m+n) × k` node matrix into user and item blocks.
pub fn split_nodes<T: Scalar>(nodes: Array2<T>, num_users: usize) -> (Array2<T>, Array2<T>) {
    let users = nodes.slice(s![..num_users, ..]).to_owned();
    let items = nodes.slice(s![num_users.., ..]).to_owned();
    (users, items)
}

fn xavier<T: Scalar>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Array2<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || T::of(rng.random_range(-bound..=bound)))
}

/// Embeddings are drawn i.i.d. from `N(0, 0.01 / k)`; NeuMF weights are
/// Xavier-uniform with zero biases.
pub fn init_params<T: Scalar>(kind: &ModelKind, m: usize, n: usize, k: usize, seed: u64) -> Result<Params<T>> {
    if k == 0 {
        return Err(Error::Config("embedding size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.1 / (k as f64).sqrt()).expect("positive std");
    let user = Array2::from_shape_simple_fn((m, k), || T::of(normal.sample(&mut rng)));
    let item = Array2::from_shape_simple_fn((n, k), || T::of(normal.sample(&mut rng)));
    let mlp = match kind.tower_dims(k) {
        Some(dims) => {
            kind.validate(k)?;
            let weights = dims
                .windows(2)
                .map(|w| xavier(w[1], w[0], w[0], w[1], &mut rng))
                .collect();
            let biases = dims[1..].iter().map(|&d| Array1::zeros(d)).collect();
            let width = k + dims[dims.len() - 1];
            let fusion = xavier::<T>(1, width, width, 1, &mut rng).into_shape_with_order(width).expect("1 × width");
            Some(Mlp {
                weights,
                biases,
                fusion,
            })
        }
        None => None,
    };
    Ok(Params { user, item, mlp })
}

/// Intermediate activations of one NeuMF tower pass.
pub(crate) struct TowerTrace<T> {
    /// `h_0 .. h_L`
    pub activations: Vec<Array1<T>>,
}

fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub(crate) fn tower_forward<T: Scalar>(mlp: &Mlp<T>, p: ArrayView1<'_, T>, q: ArrayView1<'_, T>) -> TowerTrace<T> {
    let input = ndarray::concatenate(Axis(0), &[p, q]).expect("vectors");
    let mut activations = vec![input];
    for (w, b) in mlp.weights.iter().zip(&mlp.biases) {
        let z = w.dot(activations.last().expect("input present")) + b;
        activations.push(z.mapv(relu));
    }
    TowerTrace { activations }
}

/// NeuMF score `fusion · [p ⊙ q ‖ MLP([p ‖ q])]`.
pub(crate) fn neumf_score<T: Scalar>(mlp: &Mlp<T>, p: ArrayView1<'_, T>, q: ArrayView1<'_, T>) -> (T, TowerTrace<T>) {
    let k = p.len();
    let trace = tower_forward(mlp, p, q);
    let gmf: T = (0..k).map(|d| mlp.fusion[d] * p[d] * q[d]).sum();
    let top = trace.activations.last().expect("output layer");
    let deep: T = top.iter().zip(mlp.fusion.iter().skip(k)).map(|(&h, &f)| h * f).sum();
    (gmf + deep, trace)
}

/// Accumulates `upstream · ∂score/∂(p, q, mlp)` into the given buffers.
pub(crate) fn neumf_backward<T: Scalar>(
    mlp: &Mlp<T>,
    p: ArrayView1<'_, T>,
    q: ArrayView1<'_, T>,
    trace: &TowerTrace<T>,
    upstream: T,
    grad_p: &mut [T],
    grad_q: &mut [T],
    grad_mlp: &mut Mlp<T>,
) {
    let k = p.len();
    let top = trace.activations.last().expect("output layer");
    for d in 0..k {
        grad_mlp.fusion[d] += upstream * p[d] * q[d];
        grad_p[d] += upstream * mlp.fusion[d] * q[d];
        grad_q[d] += upstream * mlp.fusion[d] * p[d];
    }
    for (j, &h) in top.iter().enumerate() {
        grad_mlp.fusion[k + j] += upstream * h;
    }
    // delta = ∂score/∂h_l, walked from the output layer down.
    let mut delta: Array1<T> = mlp.fusion.slice(s![k..]).mapv(|f| f * upstream);
    for l in (0..mlp.weights.len()).rev() {
        let out = &trace.activations[l + 1];
        // ReLU derivative: active iff the activation is positive.
        let dz: Array1<T> = delta
            .iter()
            .zip(out.iter())
            .map(|(&d, &h)| if h > T::zero() { d } else { T::zero() })
            .collect();
        let input = &trace.activations[l];
        {
            let gw = &mut grad_mlp.weights[l];
            for (r, &dzr) in dz.iter().enumerate() {
                if dzr != T::zero() {
                    gw.row_mut(r).scaled_add(dzr, input);
                }
            }
        }
        grad_mlp.biases[l] += &dz;
        delta = mlp.weights[l].t().dot(&dz);
    }
    for d in 0..k {
        grad_p[d] += delta[d];
        grad_q[d] += delta[k + d];
    }
}

/// Final embeddings plus scoring head, with graph propagation done once.
pub struct Scorer<'a, T: Clone> {
    user: Cow<'a, Array2<T>>,
    item: Cow<'a, Array2<T>>,
    mlp: Option<&'a Mlp<T>>,
    /// Item half of the first tower layer, `n × d1`.
    item_proj: Option<Array2<T>>,
}

/// Checks that graph models received an adjacency over the right universe.
pub(crate) fn require_adj<'b, T: Scalar>(
    kind: &ModelKind,
    params: &Params<T>,
    adj: Option<&'b NormAdj<T>>,
) -> Result<Option<&'b NormAdj<T>>> {
    if !kind.is_graph() {
        return Ok(adj);
    }
    let adj = adj.ok_or_else(|| Error::Config(format!("{} needs a normalized adjacency", kind.name())))?;
    if adj.num_users() != params.num_users() || adj.num_items() != params.num_items() {
        return Err(Error::Shape(format!(
            "adjacency over {}x{} does not match params over {}x{}",
            adj.num_users(),
            adj.num_items(),
            params.num_users(),
            params.num_items()
        )));
    }
    Ok(Some(adj))
}

impl<'a, T: Scalar> Scorer<'a, T> {
    pub fn new(kind: &ModelKind, params: &'a Params<T>, adj: Option<&NormAdj<T>>) -> Result<Self> {
        let adj = require_adj(kind, params, adj)?;
        if params.item.ncols() != params.user.ncols() {
            return Err(Error::Shape("user and item embeddings differ in width".into()));
        }
        let (user, item) = match (kind.layers(), adj) {
            (Some(layers), Some(adj)) => {
                let out = propagate(adj, params.node_embeddings().view(), layers)?;
                let (u, i) = split_nodes(out, params.num_users());
                (Cow::Owned(u), Cow::Owned(i))
            }
            _ => (Cow::Borrowed(&params.user), Cow::Borrowed(&params.item)),
        };
        let mlp = match kind {
            ModelKind::NeuMf { .. } => Some(
                params
                    .mlp
                    .as_ref()
                    .ok_or_else(|| Error::Config("NeuMF params carry no MLP".into()))?,
            ),
            _ => None,
        };
        let item_proj = mlp.map(|m| {
            let k = params.dim();
            item.dot(&m.weights[0].slice(s![.., k..]).t())
        });
        Ok(Self {
            user,
            item,
            mlp,
            item_proj,
        })
    }

    pub fn num_items(&self) -> usize {
        self.item.nrows()
    }

    pub fn user_embeddings(&self) -> &Array2<T> {
        &self.user
    }

    pub fn item_embeddings(&self) -> &Array2<T> {
        &self.item
    }

    pub fn score(&self, u: usize, i: usize) -> T {
        match self.mlp {
            None => self.user.row(u).dot(&self.item.row(i)),
            Some(mlp) => neumf_score(mlp, self.user.row(u), self.item.row(i)).0,
        }
    }

    pub fn score_all_items(&self, u: usize) -> Array1<T> {
        match self.mlp {
            None => self.item.dot(&self.user.row(u)),
            Some(mlp) => self.neumf_all(mlp, u),
        }
    }

    /// Scores for several users at once, one row per user.
    pub fn score_users(&self, users: &[usize]) -> Array2<T> {
        match self.mlp {
            None => {
                let block = self.user.select(Axis(0), users);
                block.dot(&self.item.t())
            }
            Some(mlp) => {
                let mut out = Array2::zeros((users.len(), self.num_items()));
                for (mut row, &u) in out.axis_iter_mut(Axis(0)).zip(users) {
                    row.assign(&self.neumf_all(mlp, u));
                }
                out
            }
        }
    }

    fn neumf_all(&self, mlp: &Mlp<T>, u: usize) -> Array1<T> {
        let k = self.user.ncols();
        let p = self.user.row(u);
        let item_proj = self.item_proj.as_ref().expect("built with the MLP");
        let user_part = mlp.weights[0].slice(s![.., ..k]).dot(&p) + &mlp.biases[0];
        let gmf_weights: Array1<T> = &mlp.fusion.slice(s![..k]) * &p;
        let mut out = Array1::zeros(self.num_items());
        for (i, slot) in out.iter_mut().enumerate() {
            let mut h: Array1<T> = (&user_part + &item_proj.row(i)).mapv(relu);
            for (w, b) in mlp.weights.iter().zip(&mlp.biases).skip(1) {
                h = (w.dot(&h) + b).mapv(relu);
            }
            let deep: T = h.iter().zip(mlp.fusion.iter().skip(k)).map(|(&a, &f)| a * f).sum();
            *slot = gmf_weights.dot(&self.item.row(i)) + deep;
        }
        out
    }
}

pub fn score<T: Scalar>(kind: &ModelKind, params: &Params<T>, adj: Option<&NormAdj<T>>, u: usize, i: usize) -> Result<T> {
    Ok(Scorer::new(kind, params, adj)?.score(u, i))
}

pub fn score_all_items<T: Scalar>(
    kind: &ModelKind,
    params: &Params<T>,
    adj: Option<&NormAdj<T>>,
    u: usize,
) -> Result<Array1<T>> {
    Ok(Scorer::new(kind, params, adj)?.score_all_items(u))
}

const MAGIC: &[u8; 8] = b"CFSCPRM1";

/// Writes the parameter file: magic, `m, n, k` (u64), variant tag (u32),
/// tower length (u32) and widths (u64), then every tensor as little-endian
/// `f64` in row-major order.
pub fn write_params<T: Scalar, W: Write>(kind: &ModelKind, params: &Params<T>, out: &mut W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    for v in [params.num_users(), params.num_items(), params.dim()] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    out.write_all(&(kind.tag() as u32).to_le_bytes())?;
    let dims = params.mlp.as_ref().map(Mlp::dims).unwrap_or_default();
    out.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in &dims {
        out.write_all(&(*d as u64).to_le_bytes())?;
    }
    for slice in params.slices() {
        for x in slice {
            out.write_all(&x.to_f64_lossy().to_le_bytes())?;
        }
    }
    Ok(())
}

fn param_file_error(what: &str) -> Error {
    Error::Parse {
        line: 0,
        message: format!("parameter file: {what}"),
    }
}

fn read_bytes<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    input.read_exact(&mut b).map_err(|e| param_file_error(&e.to_string()))?;
    Ok(b)
}

fn read_u64s<R: Read>(input: &mut R, count: usize) -> Result<Vec<usize>> {
    (0..count)
        .map(|_| read_bytes::<8, _>(input).map(|b| u64::from_le_bytes(b) as usize))
        .collect()
}

pub fn read_params<T: Scalar, R: Read>(input: &mut R) -> Result<(VariantTag, Params<T>)> {
    if &read_bytes::<8, _>(input)? != MAGIC {
        return Err(param_file_error("bad magic"));
    }
    let header = read_u64s(input, 3)?;
    let (m, n, k) = (header[0], header[1], header[2]);
    let tag = VariantTag::from_u32(u32::from_le_bytes(read_bytes(input)?))
        .ok_or_else(|| param_file_error("unknown variant"))?;
    let ndims = u32::from_le_bytes(read_bytes(input)?) as usize;
    let dims = read_u64s(input, ndims)?;
    let mut params = Params {
        user: Array2::zeros((m, k)),
        item: Array2::zeros((n, k)),
        mlp: (!dims.is_empty()).then(|| Mlp::zeros(&dims, k)),
    };
    for slice in params.slices_mut() {
        for x in slice.iter_mut() {
            *x = T::of(f64::from_le_bytes(read_bytes(input)?));
        }
    }
    Ok((tag, params))
}
