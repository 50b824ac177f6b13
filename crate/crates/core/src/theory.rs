//! Numerical checks of the robustness and spectral properties on
//! constructed instances.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{build_mean_adjacency, eigen_spectrum, filter_response, propagate, NormAdj};
use crate::models::{neumf_backward, neumf_score, ModelKind, Params};
use crate::scalar::Scalar;

/// Relative slack on `lhs ≤ rhs`.
pub const BOUND_SLACK: f64 = 1e-9;

/// A measured quantity against its theoretical bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs`, defined as 0 when both are 0.
    pub ratio: f64,
    pub verdict: bool,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str = "lhs,rhs,ratio,verdict";

    pub fn new(lhs: f64, rhs: f64) -> Self {
        let ratio = if lhs == 0.0 && rhs == 0.0 { 0.0 } else { lhs / rhs };
        Self {
            lhs,
            rhs,
            ratio,
            verdict: lhs <= rhs * (1.0 + BOUND_SLACK),
        }
    }

    pub fn to_csv_row(&self) -> String {
        format!("{},{},{},{}", self.lhs, self.rhs, self.ratio, self.verdict)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numeric record")
    }
}

/// `ℓ(θ; x) = ½‖θ − x‖²` with one clean and one noise anchor, so the
/// Hessian is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticInstance {
    pub clean: Vec<f64>,
    pub noise: Vec<f64>,
}

impl QuadraticInstance {
    pub fn new(clean: Vec<f64>, noise: Vec<f64>) -> Result<Self> {
        if clean.len() != noise.len() || clean.is_empty() {
            return Err(Error::Shape(format!(
                "anchors of length {} and {}",
                clean.len(),
                noise.len()
            )));
        }
        Ok(Self { clean, noise })
    }

    pub fn dim(&self) -> usize {
        self.clean.len()
    }

    /// Minimizer of `(1 − δ)·ℓ(θ; clean) + δ·ℓ(θ; noise)`.
    pub fn mixture_minimizer(&self, delta: f64) -> Vec<f64> {
        self.clean
            .iter()
            .zip(&self.noise)
            .map(|(&c, &n)| (1.0 - delta) * c + delta * n)
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared displacement of the noisy minimizer against `δ²‖H⁻¹Δ‖²`.
pub fn verify_perturbation_bound(inst: &QuadraticInstance, delta: f64) -> Result<BoundReport> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::Config(format!("delta must lie in [0, 1), got {delta}")));
    }
    let theta = inst.mixture_minimizer(delta);
    let lhs = sq_dist(&theta, &inst.clean);
    // H = I, so H⁻¹Δ is Δ itself.
    let rhs = delta * delta * sq_dist(&inst.clean, &inst.noise);
    Ok(BoundReport::new(lhs, rhs))
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

/// Largest singular value.
pub fn spectral_norm(a: &Array2<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    to_dmatrix(a).singular_values().iter().copied().fold(0.0, f64::max)
}

/// ReLU after every layer except the last.
pub fn relu_network(weights: &[Array2<f64>], input: &[f64]) -> Vec<f64> {
    let mut h = ndarray::Array1::from(input.to_vec());
    for (l, w) in weights.iter().enumerate() {
        h = w.dot(&h);
        if l + 1 < weights.len() {
            h.mapv_inplace(|x| x.max(0.0));
        }
    }
    h.to_vec()
}

/// Central-difference Jacobian (`out × in`).
pub fn finite_difference_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], step: f64) -> Array2<f64> {
    let out = f(x).len();
    let mut jac = Array2::zeros((out, x.len()));
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        probe[j] = x[j] + step;
        let hi = f(&probe);
        probe[j] = x[j] - step;
        let lo = f(&probe);
        probe[j] = x[j];
        for i in 0..out {
            jac[[i, j]] = (hi[i] - lo[i]) / (2.0 * step);
        }
    }
    jac
}

/// Finite-difference Jacobian norm of a ReLU network against the product
/// of its layer spectral norms.
pub fn jacobian_bound_check(weights: &[Array2<f64>], input: &[f64]) -> Result<BoundReport> {
    if weights.is_empty() {
        return Err(Error::Shape("no layers".into()));
    }
    let mut width = input.len();
    for (l, w) in weights.iter().enumerate() {
        if w.ncols() != width {
            return Err(Error::Shape(format!(
                "layer {l} expects {} inputs, got {width}",
                w.ncols()
            )));
        }
        width = w.nrows();
    }
    let scale = input.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let jac = finite_difference_jacobian(|x| relu_network(weights, x), input, 1e-6 * scale);
    let rhs = weights.iter().map(spectral_norm).product();
    Ok(BoundReport::new(spectral_norm(&jac), rhs))
}

/// Summary of per-pair score sensitivities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensitivityStats {
    pub samples: usize,
    pub mean: f64,
    pub max: f64,
}

/// `‖∂s(u, i)/∂(p_u, q_i)‖₂` for each pair, from the analytic score
/// gradient. Graph models are measured at their propagated embeddings.
pub fn score_sensitivities<T: Scalar>(
    kind: &ModelKind,
    params: &Params<T>,
    adj: Option<&NormAdj<T>>,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let scorer = crate::models::Scorer::new(kind, params, adj)?;
    let (users, items) = (scorer.user_embeddings(), scorer.item_embeddings());
    let k = params.dim();
    let mut out = Vec::with_capacity(pairs.len());
    for &(u, i) in pairs {
        if u >= users.nrows() || i >= items.nrows() {
            return Err(Error::Shape(format!("pair ({u}, {i}) outside the universe")));
        }
        let (p, q) = (users.row(u), items.row(i));
        let norm = match (kind, params.mlp.as_ref()) {
            (ModelKind::NeuMf { .. }, Some(mlp)) => {
                let (_, trace) = neumf_score(mlp, p, q);
                let mut gp = vec![T::zero(); k];
                let mut gq = vec![T::zero(); k];
                let mut scratch = mlp.zeros_like();
                neumf_backward(mlp, p, q, &trace, T::one(), &mut gp, &mut gq, &mut scratch);
                gp.iter().chain(&gq).map(|g| g.to_f64_lossy().powi(2)).sum::<f64>()
            }
            _ => sq_norm(p) + sq_norm(q),
        };
        out.push(norm.sqrt());
    }
    Ok(out)
}

fn sq_norm<T: Scalar>(v: ArrayView1<'_, T>) -> f64 {
    v.iter().map(|x| x.to_f64_lossy().powi(2)).sum()
}

pub fn sensitivity_stats(values: &[f64]) -> SensitivityStats {
    let n = values.len();
    SensitivityStats {
        samples: n,
        mean: if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 },
        max: values.iter().copied().fold(0.0, f64::max),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixupReport {
    /// Max elementwise gap between mean aggregation and the explicit
    /// convex combination of neighbors.
    pub max_deviation: f64,
    /// Max `|Σλ − 1|` over checked nodes.
    pub max_weight_error: f64,
    pub nodes_checked: usize,
    pub isolated_skipped: usize,
}

impl MixupReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numeric record")
    }
}

/// Compares one step of mean aggregation over the interaction graph with
/// `Σ_k λ_k e_k`, `λ_k = 1/|N(v)|`, at every non-isolated node. `nodes` is
/// the `(m+n) × k` stack of user then item embeddings.
pub fn mixup_equivalence_check<T: Scalar>(train: &Dataset, nodes: ArrayView2<'_, T>) -> Result<MixupReport> {
    let m = train.num_users();
    let size = m + train.num_items();
    if nodes.nrows() != size {
        return Err(Error::Shape(format!("{} embedding rows for {size} nodes", nodes.nrows())));
    }
    let adj = build_mean_adjacency::<T>(train);
    let aggregated = adj.spmm(nodes)?;
    let item_users = train.item_users();
    let neighbors = |v: usize| -> Vec<usize> {
        if v < m {
            train.user_items(v).iter().map(|&i| m + i).collect()
        } else {
            item_users[v - m].clone()
        }
    };
    let mut report = MixupReport {
        max_deviation: 0.0,
        max_weight_error: 0.0,
        nodes_checked: 0,
        isolated_skipped: 0,
    };
    let k = nodes.ncols();
    for v in 0..size {
        let nb = neighbors(v);
        if nb.is_empty() {
            report.isolated_skipped += 1;
            continue;
        }
        let lambda = 1.0 / nb.len() as f64;
        let weight_sum: f64 = nb.iter().map(|_| lambda).sum();
        report.max_weight_error = report.max_weight_error.max((weight_sum - 1.0).abs());
        for d in 0..k {
            let mix: f64 = nb.iter().map(|&w| lambda * nodes[[w, d]].to_f64_lossy()).sum();
            let dev = (mix - aggregated[[v, d]].to_f64_lossy()).abs();
            report.max_deviation = report.max_deviation.max(dev);
        }
        report.nodes_checked += 1;
    }
    if report.isolated_skipped > 0 {
        log::warn!("mixup check skipped {} isolated nodes", report.isolated_skipped);
    }
    Ok(report)
}

/// `h(λ)` nondecreasing on an evenly spaced grid of `[0, 1]`.
pub fn low_pass_monotone(layers: usize, grid_points: usize) -> bool {
    let grid: Vec<f64> = (0..grid_points)
        .map(|i| i as f64 / (grid_points.max(2) - 1) as f64)
        .collect();
    grid.windows(2)
        .all(|w| filter_response(layers, w[0]) <= filter_response(layers, w[1]))
}

/// Max elementwise gap between sparse propagation and its spectral form
/// `U h(Λ) Uᵀ P0`.
pub fn spectral_propagation_gap(adj: &NormAdj<f64>, p0: ArrayView2<'_, f64>, layers: usize) -> Result<f64> {
    let direct = propagate(adj, p0, layers)?;
    let spectral = eigen_spectrum(adj)?.apply_filter(|l| filter_response(layers, l)).dot(&p0);
    Ok(direct
        .iter()
        .zip(spectral.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubspaceReport {
    pub r: usize,
    pub residual_norms: Vec<f64>,
    pub epsilon_hat: f64,
}

impl SubspaceReport {
    pub fn mean_residual(&self) -> f64 {
        if self.residual_norms.is_empty() {
            return 0.0;
        }
        self.residual_norms.iter().sum::<f64>() / self.residual_norms.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numeric record")
    }
}

/// Residual of each row of `z` outside the span of the top-`r` right
/// singular vectors of `z_clean` (directions in embedding space).
pub fn subspace_projection_report(z: ArrayView2<'_, f64>, z_clean: ArrayView2<'_, f64>, r: usize) -> Result<SubspaceReport> {
    if z.dim() != z_clean.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", z.dim(), z_clean.dim())));
    }
    let (rows, k) = z.dim();
    if r == 0 || r >= k {
        return Err(Error::Config(format!("rank must lie in [1, {k}), got {r}")));
    }
    let svd = DMatrix::from_fn(rows, k, |i, j| z_clean[[i, j]]).svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let tol = sv.iter().copied().fold(0.0, f64::max) * rows.max(k) as f64 * f64::EPSILON;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    if rank < r {
        return Err(Error::Rank { rank, requested: r });
    }
    let basis: Vec<Vec<f64>> = order[..r]
        .iter()
        .map(|&j| (0..k).map(|c| v_t[(j, c)]).collect())
        .collect();
    let residual_norms: Vec<f64> = z
        .rows()
        .into_iter()
        .map(|row| {
            let mut res = row.to_vec();
            for b in &basis {
                let c: f64 = row.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in res.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
            res.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
        .collect();
    let epsilon_hat = residual_norms.iter().copied().fold(0.0, f64::max);
    Ok(SubspaceReport {
        r,
        residual_norms,
        epsilon_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;
    use crate::models::init_params;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
    }

    #[test]
    fn perturbation_bound_examples() {
        let inst = QuadraticInstance::new(vec![0.0, 0.0], vec![1.0, 0.0]).unwrap();
        let none = verify_perturbation_bound(&inst, 0.0).unwrap();
        assert_eq!((none.lhs, none.ratio), (0.0, 0.0));
        assert!(none.verdict);
        let r = verify_perturbation_bound(&inst, 0.1).unwrap();
        assert!((r.lhs - 0.01).abs() < 1e-15 && (r.rhs - 0.01).abs() < 1e-15);
        assert!((r.ratio - 1.0).abs() < 1e-12 && r.verdict);
        for d in [0.01, 0.02, 0.05] {
            assert!((verify_perturbation_bound(&inst, d).unwrap().ratio - 1.0).abs() < 1e-9);
        }
        assert!(verify_perturbation_bound(&inst, 1.0).is_err());
        assert!(verify_perturbation_bound(&inst, -0.1).is_err());
    }

    #[test]
    fn bound_report_exports() {
        let r = BoundReport::new(1.0, 2.0);
        assert_eq!(r.to_csv_row(), "1,2,0.5,true");
        assert_eq!(r.to_json(), r#"{"lhs":1.0,"rhs":2.0,"ratio":0.5,"verdict":true}"#);
        assert!(!BoundReport::new(2.0 + 1e-6, 2.0).verdict);
        assert!(BoundReport::new(2.0 * (1.0 + 1e-10), 2.0).verdict);
    }

    #[test]
    fn single_linear_layer_is_tight() {
        let w = array![[3.0, 1.0], [0.0, -2.0], [1.0, 1.0]];
        let r = jacobian_bound_check(std::slice::from_ref(&w), &[0.4, -1.2]).unwrap();
        assert!((r.lhs - spectral_norm(&w)).abs() < 1e-8);
        assert!(r.verdict || (r.ratio - 1.0).abs() < 1e-8);
    }

    #[test]
    fn doubled_identities_give_eight() {
        let w = Array2::eye(3) * 2.0;
        let r = jacobian_bound_check(&[w.clone(), w.clone(), w], &[0.5, 1.0, 2.0]).unwrap();
        assert!((r.lhs - 8.0).abs() < 1e-7);
        assert!((r.rhs - 8.0).abs() < 1e-12);
    }

    #[test]
    fn random_networks_respect_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..100 {
            let depth = 1 + trial % 5;
            let mut widths = vec![2 + (trial * 7) % 15];
            for l in 0..depth {
                widths.push(2 + (trial * 3 + l * 5) % 15);
            }
            let weights: Vec<Array2<f64>> = widths.windows(2).map(|w| gaussian(w[1], w[0], 1.0, &mut rng)).collect();
            let x = gaussian(1, widths[0], 1.0, &mut rng).into_raw_vec_and_offset().0;
            let r = jacobian_bound_check(&weights, &x).unwrap();
            assert!(r.verdict, "trial {trial}: {r:?}");
        }
    }

    #[test]
    fn jacobian_shape_errors() {
        let w = Array2::<f64>::zeros((2, 3));
        assert!(matches!(jacobian_bound_check(&[w.clone()], &[1.0]), Err(Error::Shape(_))));
        assert!(jacobian_bound_check(&[w.clone(), w], &[1.0, 1.0, 1.0]).is_err());
        assert!(jacobian_bound_check(&[], &[1.0]).is_err());
    }

    #[test]
    fn sensitivities_for_bpr_and_neumf() {
        let params: Params<f64> = init_params(&ModelKind::Bpr, 3, 4, 4, 1).unwrap();
        let s = score_sensitivities(&ModelKind::Bpr, &params, None, &[(1, 2)]).unwrap();
        let expected = (params.user.row(1).dot(&params.user.row(1)) + params.item.row(2).dot(&params.item.row(2))).sqrt();
        assert!((s[0] - expected).abs() < 1e-14);

        // Analytic NeuMF sensitivity against differences of the score.
        let kind = ModelKind::neumf();
        let params: Params<f64> = init_params(&kind, 3, 4, 4, 2).unwrap();
        let s = score_sensitivities(&kind, &params, None, &[(0, 3)]).unwrap()[0];
        let mlp = params.mlp.as_ref().unwrap();
        let x: Vec<f64> = params.user.row(0).iter().chain(params.item.row(3).iter()).copied().collect();
        let f = |v: &[f64]| {
            let p = ndarray::ArrayView1::from(&v[..4]);
            let q = ndarray::ArrayView1::from(&v[4..]);
            vec![neumf_score(mlp, p, q).0]
        };
        let jac = finite_difference_jacobian(f, &x, 1e-6);
        assert!((spectral_norm(&jac) - s).abs() < 1e-7);
        let stats = sensitivity_stats(&[1.0, 3.0]);
        assert_eq!((stats.mean, stats.max, stats.samples), (2.0, 3.0, 2));
    }

    #[test]
    fn mixup_identity_and_degree_three_weights() {
        let d = Dataset::new(
            3,
            3,
            [(0, 0), (1, 0), (2, 0), (0, 1), (2, 2)].map(|(u, i)| Interaction::new(u, i)),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let nodes = gaussian(6, 5, 1.0, &mut rng);
        let r = mixup_equivalence_check(&d, nodes.view()).unwrap();
        assert!(r.max_deviation <= 1e-12);
        assert!(r.max_weight_error <= 1e-15);
        assert_eq!((r.nodes_checked, r.isolated_skipped), (6, 0));
        // Item 0 has degree 3: mean aggregation row holds weights 1/3.
        let adj = build_mean_adjacency::<f64>(&d);
        let (_, w) = adj.row(3);
        assert_eq!(w.len(), 3);
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-16));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mixup_skips_isolated_nodes() {
        let d = Dataset::new(2, 3, [Interaction::new(0, 0)]).unwrap();
        let r = mixup_equivalence_check(&d, Array2::<f64>::ones((5, 2)).view()).unwrap();
        assert_eq!((r.nodes_checked, r.isolated_skipped), (2, 3));
        assert!(mixup_equivalence_check(&d, Array2::<f64>::ones((4, 2)).view()).is_err());
    }

    #[test]
    fn low_pass_grid() {
        for l in 1..=3 {
            assert!(low_pass_monotone(l, 101));
            assert_eq!(filter_response(l, 1.0f64), 1.0);
        }
    }

    #[test]
    fn self_projection_has_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = gaussian(20, 3, 1.0, &mut rng).dot(&gaussian(3, 6, 1.0, &mut rng));
        let r = subspace_projection_report(z.view(), z.view(), 3).unwrap();
        assert!(r.epsilon_hat < 1e-10);
        assert!(matches!(
            subspace_projection_report(z.view(), z.view(), 4),
            Err(Error::Rank { rank: 3, requested: 4 })
        ));
    }

    #[test]
    fn orthogonal_row_has_unit_residual() {
        let clean = array![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [1.0, 1.0, 0.0]];
        let mut z = clean.clone();
        z.row_mut(1).assign(&array![0.0, 0.0, 1.0]);
        let r = subspace_projection_report(z.view(), clean.view(), 2).unwrap();
        assert!((r.residual_norms[1] - 1.0).abs() < 1e-12);
        assert!(r.residual_norms[0] < 1e-12 && r.residual_norms[2] < 1e-12);
        assert!((r.epsilon_hat - 1.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_noise_residual_follows_chi_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let rows = 4000;
        let sigma = 0.1;
        let clean = gaussian(rows, 2, 1.0, &mut rng).dot(&gaussian(2, 8, 1.0, &mut rng));
        let noisy = &clean + &gaussian(rows, 8, sigma, &mut rng);
        let r = subspace_projection_report(noisy.view(), clean.view(), 2).unwrap();
        // χ_6: mean √2·Γ(7/2)/Γ(3) = 15√π/(8√2), variance 6 − mean².
        let chi_mean = 15.0 * std::f64::consts::PI.sqrt() / (8.0 * 2f64.sqrt());
        let chi_sd = (6.0 - chi_mean * chi_mean).sqrt();
        let se = sigma * chi_sd / (rows as f64).sqrt();
        assert!((r.mean_residual() - sigma * chi_mean).abs() < 3.0 * se, "{}", r.mean_residual());
    }

    #[test]
    fn subspace_input_checks() {
        let z = Array2::<f64>::ones((4, 3));
        assert!(matches!(subspace_projection_report(z.view(), z.view(), 0), Err(Error::Config(_))));
        assert!(subspace_projection_report(z.view(), z.view(), 3).is_err());
        let other = Array2::<f64>::ones((4, 2));
        assert!(matches!(subspace_projection_report(z.view(), other.view(), 1), Err(Error::Shape(_))));
        let json = subspace_projection_report(z.view(), z.view(), 1).unwrap().to_json();
        assert!(json.starts_with(r#"{"r":1,"residual_norms":["#));
    }
}
