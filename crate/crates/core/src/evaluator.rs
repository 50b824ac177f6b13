//! Full-sort top-k evaluation.

use std::cmp::Ordering;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::NormAdj;
use crate::models::{ModelKind, Params, Scorer};
use crate::scalar::Scalar;

/// Users scored per dense block.
const USER_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub k: usize,
    pub ndcg: f64,
    pub users: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "k,ndcg,users";

    pub fn to_csv_row(&self) -> String {
        format!("{},{},{}", self.k, self.ndcg, self.users)
    }
}

fn discount(pos: usize) -> f64 {
    1.0 / ((pos + 2) as f64).log2()
}

/// Binary-relevance NDCG of `ranking` truncated at `k`.
pub fn ndcg_at_k(ranking: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if relevant.is_empty() {
        return Err(Error::UndefinedInput("no relevant items".into()));
    }
    let mut rel = relevant.to_vec();
    rel.sort_unstable();
    rel.dedup();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, item)| rel.binary_search(item).is_ok())
        .map(|(pos, _)| discount(pos))
        .sum();
    let idcg: f64 = (0..k.min(rel.len())).map(discount).sum();
    Ok(dcg / idcg)
}

/// Higher score first, then lower index.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// The `k` best items of one score row; masked entries must already be −∞.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    let k = k.min(keyed.len());
    if k == 0 {
        return Vec::new();
    }
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, rank_order);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(rank_order);
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Mean NDCG@k over users with at least one `target` positive. Items the
/// user has in any of `masks` are excluded from ranking, unless they are
/// also target positives.
pub fn evaluate<T: Scalar>(
    kind: &ModelKind,
    params: &Params<T>,
    adj: Option<&NormAdj<T>>,
    masks: &[&Dataset],
    target: &Dataset,
    k: usize,
) -> Result<MetricReport> {
    let scorer = Scorer::new(kind, params, adj)?;
    evaluate_with(&scorer, masks, target, k)
}

/// [`evaluate`] with an existing scorer.
pub fn evaluate_with<T: Scalar>(
    scorer: &Scorer<'_, T>,
    masks: &[&Dataset],
    target: &Dataset,
    k: usize,
) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let n = scorer.num_items();
    if target.num_items() > n || target.num_users() > scorer.user_embeddings().nrows() {
        return Err(Error::Shape(format!(
            "target over {}x{} exceeds the model universe",
            target.num_users(),
            target.num_items()
        )));
    }
    let users: Vec<usize> = (0..target.num_users())
        .filter(|&u| !target.user_items(u).is_empty())
        .collect();
    if users.is_empty() {
        return Err(Error::UndefinedInput("no user has a target positive".into()));
    }
    let mut total = 0.0;
    for chunk in users.chunks(USER_CHUNK) {
        let block = scorer.score_users(chunk);
        for (row, &u) in block.rows().into_iter().zip(chunk) {
            let relevant = target.user_items(u);
            let mut scores: Vec<f64> = row.iter().map(|s| s.to_f64_lossy()).collect();
            if let Some(i) = scores.iter().position(|s| s.is_nan()) {
                return Err(Error::NonFinite(format!("score of user {u}, item {i}")));
            }
            for mask in masks {
                if u >= mask.num_users() {
                    continue;
                }
                for &i in mask.user_items(u) {
                    if i < n && relevant.binary_search(&i).is_err() {
                        scores[i] = f64::NEG_INFINITY;
                    }
                }
            }
            total += ndcg_at_k(&top_k(&scores, k), relevant, k)?;
        }
    }
    Ok(MetricReport {
        k,
        ndcg: total / users.len() as f64,
        users: users.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;
    use ndarray::Array2;

    fn ds(m: usize, n: usize, pairs: &[(usize, usize)]) -> Dataset {
        Dataset::new(m, n, pairs.iter().map(|&(u, i)| Interaction::new(u, i))).unwrap()
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[4, 1, 2], &[4], 20).unwrap(), 1.0);
        let second = ndcg_at_k(&[1, 4, 2], &[4], 20).unwrap();
        assert!((second - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((second - 0.63093).abs() < 1e-5);
        let ranking: Vec<usize> = (0..30).collect();
        assert_eq!(ndcg_at_k(&ranking, &[20], 20).unwrap(), 0.0);
        assert!(matches!(ndcg_at_k(&ranking, &[], 20), Err(Error::UndefinedInput(_))));
    }

    #[test]
    fn ideal_dcg_caps_at_k() {
        let ranking: Vec<usize> = (0..10).collect();
        let relevant: Vec<usize> = (0..10).collect();
        assert_eq!(ndcg_at_k(&ranking, &relevant, 3).unwrap(), 1.0);
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k(&[0.0, 1.0, 1.0, 0.5, 1.0], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.0; 4], 10), vec![0, 1, 2, 3]);
        assert_eq!(top_k(&[f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY], 3), vec![1, 0, 2]);
    }

    fn frozen(user: Array2<f64>, item: Array2<f64>) -> Params<f64> {
        Params { user, item, mlp: None }
    }

    #[test]
    fn oracle_scorer_is_perfect() {
        let test = ds(2, 4, &[(0, 2), (1, 0), (1, 3)]);
        // One-hot items, users carry their test indicator.
        let item = Array2::from_shape_fn((4, 4), |(i, j)| (i == j) as u8 as f64);
        let user = Array2::from_shape_fn((2, 4), |(u, j)| test.contains(u, j) as u8 as f64);
        let r = evaluate(&ModelKind::Bpr, &frozen(user, item), None, &[], &test, 20).unwrap();
        assert_eq!(r.ndcg, 1.0);
        assert_eq!(r.users, 2);
    }

    #[test]
    fn uniform_zero_scores_rank_by_index() {
        let test = ds(1, 3, &[(0, 2)]);
        let p = frozen(Array2::zeros((1, 2)), Array2::zeros((3, 2)));
        let r = evaluate(&ModelKind::Bpr, &p, None, &[], &test, 20).unwrap();
        assert!((r.ndcg - 0.5).abs() < 1e-15);
        let train = ds(1, 3, &[(0, 0)]);
        let r = evaluate(&ModelKind::Bpr, &p, None, &[&train], &test, 20).unwrap();
        assert!((r.ndcg - 1.0 / 3f64.log2()).abs() < 1e-15);
    }

    #[test]
    fn users_without_targets_are_skipped() {
        let test = ds(3, 3, &[(1, 1)]);
        let p = frozen(Array2::ones((3, 1)), Array2::ones((3, 1)));
        let r = evaluate(&ModelKind::Bpr, &p, None, &[], &test, 1).unwrap();
        assert_eq!(r.users, 1);
        assert_eq!(r.ndcg, 0.0);
        let none = Dataset::empty(3, 3);
        assert!(evaluate(&ModelKind::Bpr, &p, None, &[], &none, 1).is_err());
    }

    #[test]
    fn masked_items_never_rank() {
        let train = ds(1, 4, &[(0, 0), (0, 1)]);
        let test = ds(1, 4, &[(0, 3)]);
        // Item scores 4, 3, 2, 1: the masked pair would otherwise lead.
        let item = Array2::from_shape_vec((4, 1), vec![4.0, 3.0, 2.0, 1.0]).unwrap();
        let p = frozen(Array2::ones((1, 1)), item);
        let r = evaluate(&ModelKind::Bpr, &p, None, &[&train], &test, 2).unwrap();
        assert!((r.ndcg - 1.0 / 3f64.log2()).abs() < 1e-15);
    }

    #[test]
    fn csv_row() {
        let r = MetricReport { k: 20, ndcg: 0.25, users: 7 };
        assert_eq!(MetricReport::CSV_HEADER, "k,ndcg,users");
        assert_eq!(r.to_csv_row(), "20,0.25,7");
    }
}
