//! Ranking and contrastive losses with exact analytic gradients.
//!
//! Gradients are assembled by hand in three stages: loss → scores,
//! scores → final embeddings (dot product or NeuMF head), and final
//! embeddings → parameters. The last stage reuses [`propagate`] because
//! symmetric-normalized propagation is self-adjoint.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{drop_edges, feature_mask, propagate, AugmentKind, NormAdj};
use crate::models::{neumf_backward, neumf_score, require_adj, split_nodes, Gradients, ModelKind, Params, SglConfig};
use crate::scalar::{sigmoid, Scalar};

/// Floor inside the BPR logarithm.
pub const GAMMA_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropMode {
    /// Keep `max(⌊N · save_ratio⌋, 1)` samples per batch.
    Quantile,
    /// Keep samples whose loss is at most (`get_low`) or at least the
    /// threshold; falls back to the single most extreme sample if none
    /// qualify.
    FixedThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropConfig {
    pub save_ratio: f64,
    /// Keep the lowest-loss samples when true, the highest otherwise.
    pub get_low: bool,
    pub mode: DropMode,
}

impl DropConfig {
    pub fn new(save_ratio: f64, get_low: bool) -> Self {
        Self {
            save_ratio,
            get_low,
            mode: DropMode::Quantile,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.save_ratio > 0.0 && self.save_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "save_ratio must lie in (0, 1], got {}",
                self.save_ratio
            )));
        }
        Ok(())
    }

    /// `max(⌊N · save_ratio⌋, 1)`, truncating the floating-point product.
    pub fn keep_count(&self, n: usize) -> usize {
        ((n as f64 * self.save_ratio) as usize).clamp(1, n.max(1))
    }
}

fn check_pair<T>(pos: &[T], neg: &[T]) -> Result<()> {
    if pos.len() != neg.len() {
        return Err(Error::Shape(format!(
            "{} positive scores vs {} negative scores",
            pos.len(),
            neg.len()
        )));
    }
    if pos.is_empty() {
        return Err(Error::UndefinedInput("no samples".into()));
    }
    Ok(())
}

/// `−ln(ε + σ(pos − neg))` per sample.
pub fn per_sample_bpr_losses<T: Scalar>(pos: &[T], neg: &[T]) -> Result<Vec<T>> {
    check_pair(pos, neg)?;
    let eps = T::of(GAMMA_EPS);
    Ok(pos
        .iter()
        .zip(neg)
        .map(|(&p, &n)| -(eps + sigmoid(p - n)).ln())
        .collect())
}

/// Mean of `losses[i]` over `kept` (ascending indices), summed in order.
fn mean_over<T: Scalar>(losses: &[T], kept: &[usize]) -> T {
    let mut sum = T::zero();
    for &i in kept {
        sum += losses[i];
    }
    sum / T::of_usize(kept.len())
}

pub fn bpr_loss<T: Scalar>(pos: &[T], neg: &[T]) -> Result<T> {
    let losses = per_sample_bpr_losses(pos, neg)?;
    let all: Vec<usize> = (0..losses.len()).collect();
    Ok(mean_over(&losses, &all))
}

/// Indices of the retained samples, ascending. Ties in loss are broken by
/// ascending index.
pub fn drop_selection<T: Scalar>(losses: &[T], cfg: &DropConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| {
        let by_loss = losses[a].partial_cmp(&losses[b]).unwrap_or(std::cmp::Ordering::Equal);
        let by_loss = if cfg.get_low { by_loss } else { by_loss.reverse() };
        by_loss.then(a.cmp(&b))
    });
    let keep = match cfg.mode {
        DropMode::Quantile => cfg.keep_count(losses.len()),
        DropMode::FixedThreshold(tau) => {
            let tau = T::of(tau);
            let passing = losses
                .iter()
                .filter(|&&l| if cfg.get_low { l <= tau } else { l >= tau })
                .count();
            passing.max(1)
        }
    };
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

pub fn bpr_drop_loss<T: Scalar>(pos: &[T], neg: &[T], cfg: &DropConfig) -> Result<T> {
    cfg.validate()?;
    let losses = per_sample_bpr_losses(pos, neg)?;
    let kept = drop_selection(&losses, cfg);
    Ok(mean_over(&losses, &kept))
}

/// In-batch InfoNCE over cosine similarities:
/// `−(1/B) Σ_u ln softmax_v(cos(z′_u, z″_v)/τ)[u]`.
pub fn contrastive_loss<T: Scalar>(z1: ArrayView2<'_, T>, z2: ArrayView2<'_, T>, tau: f64) -> Result<T> {
    contrastive_forward(z1, z2, tau).map(|f| f.loss)
}

struct ContrastiveForward<T> {
    loss: T,
    n1: Array2<T>,
    n2: Array2<T>,
    norms1: Array1<T>,
    norms2: Array1<T>,
    softmax: Array2<T>,
}

fn row_normalize<T: Scalar>(z: ArrayView2<'_, T>) -> Result<(Array2<T>, Array1<T>)> {
    let norms: Array1<T> = z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(row) = norms.iter().position(|&n| n == T::zero() || !n.is_finite()) {
        return Err(Error::DegenerateEmbedding { row });
    }
    let mut out = z.to_owned();
    for (mut r, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        r /= n;
    }
    Ok((out, norms))
}

fn contrastive_forward<T: Scalar>(z1: ArrayView2<'_, T>, z2: ArrayView2<'_, T>, tau: f64) -> Result<ContrastiveForward<T>> {
    if z1.dim() != z2.dim() {
        return Err(Error::Shape(format!("views {:?} vs {:?}", z1.dim(), z2.dim())));
    }
    if z1.nrows() == 0 {
        return Err(Error::UndefinedInput("empty contrastive batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (n1, norms1) = row_normalize(z1)?;
    let (n2, norms2) = row_normalize(z2)?;
    let inv_tau = T::of(1.0 / tau);
    let logits = n1.dot(&n2.t()) * inv_tau;
    let b = logits.nrows();
    let mut softmax = Array2::zeros((b, b));
    let mut total = T::zero();
    for (u, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let denom: T = row.iter().map(|&s| (s - max).exp()).sum();
        let log_denom = max + denom.ln();
        total += log_denom - row[u];
        for (v, &s) in row.iter().enumerate() {
            softmax[[u, v]] = (s - max).exp() / denom;
        }
    }
    Ok(ContrastiveForward {
        loss: total / T::of_usize(b),
        n1,
        n2,
        norms1,
        norms2,
        softmax,
    })
}

/// Loss and gradients with respect to both (unnormalized) view matrices.
fn contrastive_with_grad<T: Scalar>(
    z1: ArrayView2<'_, T>,
    z2: ArrayView2<'_, T>,
    tau: f64,
) -> Result<(T, Array2<T>, Array2<T>)> {
    let f = contrastive_forward(z1, z2, tau)?;
    let b = f.softmax.nrows();
    let scale = T::of(1.0 / tau) / T::of_usize(b);
    let mut g = f.softmax.clone();
    for u in 0..b {
        g[[u, u]] -= T::one();
    }
    g *= scale;
    let dn1 = g.dot(&f.n2);
    let dn2 = g.t().dot(&f.n1);
    let back = |dn: Array2<T>, normed: &Array2<T>, norms: &Array1<T>| {
        let mut out = dn;
        for ((mut row, hat), &n) in out.rows_mut().into_iter().zip(normed.rows()).zip(norms.iter()) {
            let radial = row.dot(&hat);
            row.scaled_add(-radial, &hat);
            row /= n;
        }
        out
    };
    let d1 = back(dn1, &f.n1, &f.norms1);
    let d2 = back(dn2, &f.n2, &f.norms2);
    Ok((f.loss, d1, d2))
}

/// One `(user, positive item, negative item)` training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

impl Triple {
    pub fn new(user: usize, pos: usize, neg: usize) -> Self {
        Self { user, pos, neg }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Batch {
    pub triples: Vec<Triple>,
}

impl Batch {
    pub fn new(triples: Vec<Triple>) -> Self {
        Self { triples }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Distinct users, ascending.
    pub fn users(&self) -> Vec<usize> {
        self.triples.iter().map(|t| t.user).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Distinct positive items, ascending.
    pub fn positive_items(&self) -> Vec<usize> {
        self.triples.iter().map(|t| t.pos).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Bpr,
    BprDrop(DropConfig),
    /// BPR plus the weighted contrastive term; SGL models only.
    Sgl,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Bpr => "bpr",
            Objective::BprDrop(_) => "bpr_drop",
            Objective::Sgl => "sgl",
        }
    }
}

/// One stochastic view of the graph used by the contrastive term.
#[derive(Debug, Clone, PartialEq)]
pub enum SglView<T> {
    /// Propagate over an edge-dropped adjacency.
    Graph(NormAdj<T>),
    /// Propagate masked initial embeddings over the main adjacency; the
    /// mask is `(m+n) × k` with 0/1 entries.
    Mask(Array2<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SglViews<T> {
    pub first: SglView<T>,
    pub second: SglView<T>,
}

impl<T: Scalar> SglViews<T> {
    /// Draws the two views for one training epoch.
    pub fn sample(cfg: &SglConfig, adj: &NormAdj<T>, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut one = || match cfg.augment {
            AugmentKind::EdgeDropout => SglView::Graph(drop_edges(adj, cfg.rho, &mut rng)),
            AugmentKind::FeatureMask => SglView::Mask(feature_mask(adj.size(), dim, cfg.rho, &mut rng)),
        };
        let first = one();
        let second = one();
        Self { first, second }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub ranking: T,
    /// Unweighted contrastive sum (user term plus item term).
    pub contrastive: T,
}

/// Everything a loss evaluation needs.
#[derive(Clone, Copy)]
pub struct LossInput<'a, T> {
    pub kind: &'a ModelKind,
    pub params: &'a Params<T>,
    pub adj: Option<&'a NormAdj<T>>,
    pub batch: &'a Batch,
    pub objective: &'a Objective,
    pub views: Option<&'a SglViews<T>>,
}

pub fn loss_value<T: Scalar>(input: &LossInput<'_, T>) -> Result<LossBreakdown<T>> {
    run(input, false).map(|(l, _)| l)
}

/// Exact gradient of the configured loss with respect to every field of
/// the parameters.
pub fn compute_gradients<T: Scalar>(input: &LossInput<'_, T>) -> Result<(LossBreakdown<T>, Gradients<T>)> {
    let (loss, grads) = run(input, true)?;
    Ok((loss, grads.expect("requested")))
}

/// `bpr_loss` on propagated scores plus `γ` times the contrastive terms.
pub fn sgl_total_loss<T: Scalar>(
    batch: &Batch,
    params: &Params<T>,
    adj: &NormAdj<T>,
    views: &SglViews<T>,
    cfg: &SglConfig,
) -> Result<T> {
    let kind = ModelKind::Sgl(*cfg);
    loss_value(&LossInput {
        kind: &kind,
        params,
        adj: Some(adj),
        batch,
        objective: &Objective::Sgl,
        views: Some(views),
    })
    .map(|l| l.total)
}

/// Agreement between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// `‖g − g_fd‖₂ / max(‖g‖₂, ‖g_fd‖₂)`, or 0 when both vanish.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub scalars: usize,
}

/// Perturbs every parameter by `±step` and compares the resulting loss
/// slope with [`compute_gradients`].
pub fn gradient_check(input: &LossInput<'_, f64>, step: f64) -> Result<GradientCheck> {
    let (_, analytic) = compute_gradients(input)?;
    let mut probe = input.params.clone();
    let mut diff_sq = 0.0;
    let mut analytic_sq = 0.0;
    let mut numeric_sq = 0.0;
    let mut max_abs_error = 0.0f64;
    let mut scalars = 0;
    let tensors = analytic.slices().len();
    for t in 0..tensors {
        let len = analytic.slices()[t].len();
        for i in 0..len {
            let original = probe.slices()[t][i];
            let at = |x: f64, probe: &mut Params<f64>| -> Result<f64> {
                probe.slices_mut()[t][i] = x;
                loss_value(&LossInput { params: probe, ..*input }).map(|l| l.total)
            };
            let hi = at(original + step, &mut probe)?;
            let lo = at(original - step, &mut probe)?;
            probe.slices_mut()[t][i] = original;
            let numeric = (hi - lo) / (2.0 * step);
            let exact = analytic.slices()[t][i];
            diff_sq += (exact - numeric).powi(2);
            analytic_sq += exact * exact;
            numeric_sq += numeric * numeric;
            max_abs_error = max_abs_error.max((exact - numeric).abs());
            scalars += 1;
        }
    }
    let scale = analytic_sq.max(numeric_sq).sqrt();
    Ok(GradientCheck {
        relative_error: if scale == 0.0 { 0.0 } else { diff_sq.sqrt() / scale },
        max_abs_error,
        scalars,
    })
}

fn ensure_finite<T: Scalar>(what: &str, values: impl IntoIterator<Item = T>) -> Result<()> {
    for (idx, v) in values.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{what} (entry {idx} = {v})")));
        }
    }
    Ok(())
}

fn view_embeddings<T: Scalar>(view: &SglView<T>, adj: &NormAdj<T>, nodes: &Array2<T>, layers: usize) -> Result<Array2<T>> {
    match view {
        SglView::Graph(g) => propagate(g, nodes.view(), layers),
        SglView::Mask(mask) => {
            if mask.dim() != nodes.dim() {
                return Err(Error::Shape(format!(
                    "feature mask {:?} vs embeddings {:?}",
                    mask.dim(),
                    nodes.dim()
                )));
            }
            propagate(adj, (nodes * mask).view(), layers)
        }
    }
}

fn view_backward<T: Scalar>(view: &SglView<T>, adj: &NormAdj<T>, upstream: &Array2<T>, layers: usize) -> Result<Array2<T>> {
    match view {
        SglView::Graph(g) => propagate(g, upstream.view(), layers),
        SglView::Mask(mask) => Ok(propagate(adj, upstream.view(), layers)? * mask),
    }
}

fn run<T: Scalar>(input: &LossInput<'_, T>, want_grad: bool) -> Result<(LossBreakdown<T>, Option<Gradients<T>>)> {
    let LossInput {
        kind,
        params,
        adj,
        batch,
        objective,
        views,
    } = *input;
    if batch.is_empty() {
        return Err(Error::UndefinedInput("empty batch".into()));
    }
    let (m, n) = (params.num_users(), params.num_items());
    if let Some(t) = batch.triples.iter().find(|t| t.user >= m || t.pos >= n || t.neg >= n) {
        return Err(Error::Shape(format!("triple {t:?} outside {m}x{n}")));
    }
    let adj = require_adj(kind, params, adj)?;
    let sgl_cfg = match (objective, kind) {
        (Objective::Sgl, ModelKind::Sgl(cfg)) => Some(*cfg),
        (Objective::Sgl, other) => {
            return Err(Error::Config(format!(
                "the sgl objective needs an SGL model, got {}",
                other.name()
            )))
        }
        _ => None,
    };
    if let Objective::BprDrop(cfg) = objective {
        cfg.validate()?;
    }

    // Stage 1: final embeddings.
    let nodes = kind.is_graph().then(|| params.node_embeddings());
    let (emb_user, emb_item) = match (kind.layers(), adj, &nodes) {
        (Some(layers), Some(adj), Some(nodes)) => split_nodes(propagate(adj, nodes.view(), layers)?, m),
        _ => (params.user.clone(), params.item.clone()),
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

    // Stage 2: scores and the ranking loss.
    let b = batch.len();
    let mut pos = Vec::with_capacity(b);
    let mut neg = Vec::with_capacity(b);
    let mut traces = Vec::new();
    for t in &batch.triples {
        let p = emb_user.row(t.user);
        match mlp {
            None => {
                pos.push(p.dot(&emb_item.row(t.pos)));
                neg.push(p.dot(&emb_item.row(t.neg)));
            }
            Some(mlp) => {
                let (sp, tp) = neumf_score(mlp, p, emb_item.row(t.pos));
                let (sn, tn) = neumf_score(mlp, p, emb_item.row(t.neg));
                pos.push(sp);
                neg.push(sn);
                if want_grad {
                    traces.push((tp, tn));
                }
            }
        }
    }
    ensure_finite("scores", pos.iter().chain(&neg).copied())?;
    let losses = per_sample_bpr_losses(&pos, &neg)?;
    let kept = match objective {
        Objective::BprDrop(cfg) => drop_selection(&losses, cfg),
        _ => (0..b).collect(),
    };
    let ranking = mean_over(&losses, &kept);

    // Contrastive views.
    let mut contrastive = T::zero();
    let mut view_grads: Option<(Array2<T>, Array2<T>)> = None;
    if let Some(cfg) = sgl_cfg {
        let views = views.ok_or_else(|| Error::Config("the sgl objective needs augmented views".into()))?;
        let (adj, nodes) = (adj.expect("graph model"), nodes.as_ref().expect("graph model"));
        let z1 = view_embeddings(&views.first, adj, nodes, cfg.layers)?;
        let z2 = view_embeddings(&views.second, adj, nodes, cfg.layers)?;
        let mut groups = vec![batch.users()];
        if cfg.item_term {
            groups.push(batch.positive_items().into_iter().map(|i| m + i).collect());
        }
        let mut d1 = Array2::zeros(z1.raw_dim());
        let mut d2 = Array2::zeros(z2.raw_dim());
        for rows in &groups {
            let a = z1.select(Axis(0), rows);
            let c = z2.select(Axis(0), rows);
            if want_grad {
                let (loss, ga, gc) = contrastive_with_grad(a.view(), c.view(), cfg.tau)?;
                contrastive += loss;
                for (k, &r) in rows.iter().enumerate() {
                    d1.row_mut(r).scaled_add(T::of(cfg.gamma), &ga.row(k));
                    d2.row_mut(r).scaled_add(T::of(cfg.gamma), &gc.row(k));
                }
            } else {
                contrastive += contrastive_loss(a.view(), c.view(), cfg.tau)?;
            }
        }
        if want_grad {
            view_grads = Some((d1, d2));
        }
    }
    let gamma = sgl_cfg.map(|c| T::of(c.gamma)).unwrap_or_else(T::zero);
    let total = ranking + gamma * contrastive;
    ensure_finite("loss", [total])?;
    let breakdown = LossBreakdown {
        total,
        ranking,
        contrastive,
    };
    if !want_grad {
        return Ok((breakdown, None));
    }

    // Stage 3: backward through the head.
    let eps = T::of(GAMMA_EPS);
    let weight = T::one() / T::of_usize(kept.len());
    let k = params.dim();
    let mut grad_user = Array2::<T>::zeros((m, k));
    let mut grad_item = Array2::<T>::zeros((n, k));
    let mut grads = Params {
        user: Array2::zeros((0, k)),
        item: Array2::zeros((0, k)),
        mlp: params.mlp.as_ref().map(|m| m.zeros_like()),
    };
    for &idx in &kept {
        let t = batch.triples[idx];
        let s = sigmoid(pos[idx] - neg[idx]);
        // d/dx of −ln(ε + σ(x)).
        let dl = -(s * (T::one() - s)) / (eps + s) * weight;
        match mlp {
            None => {
                let p = emb_user.row(t.user);
                grad_user.row_mut(t.user).scaled_add(dl, &(&emb_item.row(t.pos) - &emb_item.row(t.neg)));
                grad_item.row_mut(t.pos).scaled_add(dl, &p);
                grad_item.row_mut(t.neg).scaled_add(-dl, &p);
            }
            Some(mlp) => {
                let grad_mlp = grads.mlp.as_mut().expect("NeuMF gradient buffer");
                let (tp, tn) = &traces[idx];
                for (item, trace, up) in [(t.pos, tp, dl), (t.neg, tn, -dl)] {
                    let mut gp = vec![T::zero(); k];
                    let mut gq = vec![T::zero(); k];
                    neumf_backward(mlp, emb_user.row(t.user), emb_item.row(item), trace, up, &mut gp, &mut gq, grad_mlp);
                    for d in 0..k {
                        grad_user[[t.user, d]] += gp[d];
                        grad_item[[item, d]] += gq[d];
                    }
                }
            }
        }
    }

    // Stage 4: back through propagation.
    match (kind.layers(), adj) {
        (Some(layers), Some(adj)) => {
            let upstream = ndarray::concatenate(Axis(0), &[grad_user.view(), grad_item.view()]).expect("equal widths");
            let mut d_nodes = propagate(adj, upstream.view(), layers)?;
            if let (Some((d1, d2)), Some(views)) = (view_grads, views) {
                d_nodes += &view_backward(&views.first, adj, &d1, layers)?;
                d_nodes += &view_backward(&views.second, adj, &d2, layers)?;
            }
            let (gu, gi) = split_nodes(d_nodes, m);
            grads.user = gu;
            grads.item = gi;
        }
        _ => {
            grads.user = grad_user;
            grads.item = grad_item;
        }
    }
    for (i, slice) in grads.slices().iter().enumerate() {
        ensure_finite(&format!("gradient tensor {i}"), slice.iter().copied())?;
    }
    Ok((breakdown, Some(grads)))
}
