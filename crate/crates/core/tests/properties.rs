use std::collections::BTreeSet;

use cfscale::data::{inject_noise, noise_count, sample_negative, split, split_sizes, NoiseSpec, SplitSpec};
use cfscale::evaluator::{evaluate, ndcg_at_k};
use cfscale::graph::{augment, build_normalized_adjacency, spectral_radius, AugmentKind, AugmentSpec, AugmentTarget, AugmentedView};
use cfscale::models::{score, score_all_items, ModelKind, Params};
use cfscale::objectives::{bpr_drop_loss, bpr_loss, contrastive_loss, DropConfig};
use cfscale::{Dataset, Interaction};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(max_users: usize, max_items: usize) -> impl Strategy<Value = Dataset> {
    (1..=max_users, 1..=max_items)
        .prop_flat_map(|(m, n)| (Just(m), Just(n), proptest::collection::vec(any::<bool>(), m * n)))
        .prop_map(|(m, n, mask)| {
            let pairs = mask
                .iter()
                .enumerate()
                .filter(|(_, &on)| on)
                .map(|(idx, _)| Interaction::new(idx / n, idx % n));
            Dataset::new(m, n, pairs).unwrap()
        })
}

fn pair_set(d: &Dataset) -> BTreeSet<(usize, usize)> {
    d.interactions().map(|x| (x.user, x.item)).collect()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_partition(d in dataset(8, 10), seed in any::<u64>()) {
        prop_assume!(d.len() >= 3);
        let spec = SplitSpec::new(0.8, 0.1, 0.1, seed);
        let (tr, va, te) = split(&d, &spec).unwrap();
        let (a, b, c) = (pair_set(&tr), pair_set(&va), pair_set(&te));
        prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        let all: BTreeSet<_> = a.union(&b).chain(c.iter()).copied().collect();
        prop_assert_eq!(all, pair_set(&d));
        let sizes = split_sizes(d.len(), &spec);
        prop_assert_eq!((tr.len(), va.len(), te.len()), sizes);
        let again = split(&d, &spec).unwrap();
        prop_assert_eq!(again, (tr, va, te));
    }

    #[test]
    fn negatives_are_never_positive(d in dataset(6, 8), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for u in 0..d.num_users() {
            if d.user_items(u).len() == d.num_items() {
                prop_assert!(sample_negative(&d, u, &mut rng).is_err());
                continue;
            }
            for _ in 0..20 {
                let j = sample_negative(&d, u, &mut rng).unwrap();
                prop_assert!(j < d.num_items() && !d.contains(u, j));
            }
        }
    }

    #[test]
    fn noise_size_and_freshness(d in dataset(8, 12), delta in 0.0f64..0.4, seed in any::<u64>()) {
        prop_assume!(!d.is_empty());
        let want = noise_count(d.len(), delta).unwrap();
        let free = d.num_users() * d.num_items() - d.len();
        match inject_noise(&d, &NoiseSpec::new(delta, seed)) {
            Ok(noisy) => {
                prop_assert_eq!(noisy.len(), d.len() + want);
                let orig = pair_set(&d);
                prop_assert!(orig.is_subset(&pair_set(&noisy)));
                prop_assert_eq!(noisy, inject_noise(&d, &NoiseSpec::new(delta, seed)).unwrap());
            }
            Err(_) => prop_assert!(want > free),
        }
    }

    #[test]
    fn adjacency_is_symmetric_with_unit_radius(d in dataset(8, 8), rho in 0.0f64..0.9, seed in any::<u64>()) {
        let adj = build_normalized_adjacency::<f64>(&d);
        let entries: BTreeSet<_> = adj.entries().map(|(r, c, w)| (r, c, w.to_bits())).collect();
        let swapped: BTreeSet<_> = adj.entries().map(|(r, c, w)| (c, r, w.to_bits())).collect();
        prop_assert_eq!(entries, swapped);
        prop_assert!(spectral_radius(&adj, 100, seed).unwrap() <= 1.0 + 1e-8);
        let view = augment(AugmentTarget::Graph(&adj), &AugmentSpec::new(AugmentKind::EdgeDropout, rho, seed)).unwrap();
        let AugmentedView::Graph(dropped) = view else { panic!("graph view expected") };
        prop_assert!(dropped.nnz() <= adj.nnz());
        prop_assert!(spectral_radius(&dropped, 100, seed).unwrap() <= 1.0 + 1e-8);
    }

    #[test]
    fn drop_loss_never_exceeds_mean(scores in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40), ratio in 0.01f64..=1.0) {
        let (pos, neg): (Vec<f64>, Vec<f64>) = scores.into_iter().unzip();
        let full = bpr_loss(&pos, &neg).unwrap();
        let low = bpr_drop_loss(&pos, &neg, &DropConfig::new(ratio, true)).unwrap();
        let high = bpr_drop_loss(&pos, &neg, &DropConfig::new(ratio, false)).unwrap();
        prop_assert!(low <= full * (1.0 + 1e-12));
        prop_assert!(high >= full * (1.0 - 1e-12));
    }

    #[test]
    fn contrastive_nonnegative_and_scale_invariant(z in matrix(5, 3), scales in proptest::collection::vec(0.1f64..10.0, 5), tau in 0.1f64..2.0) {
        prop_assume!(z.rows().into_iter().all(|r| r.dot(&r) > 1e-6));
        let l = contrastive_loss(z.view(), z.view(), tau).unwrap();
        prop_assert!(l >= -1e-12);
        let mut scaled = z.clone();
        for (mut row, s) in scaled.rows_mut().into_iter().zip(&scales) {
            row *= *s;
        }
        let ls = contrastive_loss(scaled.view(), z.view(), tau).unwrap();
        prop_assert!((l - ls).abs() <= 1e-9 * (1.0 + l.abs()));
    }

    #[test]
    fn score_all_matches_pointwise(d in dataset(5, 6), seed in any::<u64>(), which in 0usize..4) {
        let kinds = [ModelKind::Bpr, ModelKind::neumf(), ModelKind::LightGcn { layers: 2 }, ModelKind::Sgl(Default::default())];
        let kind = &kinds[which];
        let p: Params<f64> = cfscale::init_params(kind, d.num_users(), d.num_items(), 4, seed).unwrap();
        let adj = build_normalized_adjacency::<f64>(&d);
        let adj = kind.is_graph().then_some(&adj);
        for u in 0..d.num_users() {
            let all = score_all_items(kind, &p, adj, u).unwrap();
            for i in 0..d.num_items() {
                let s = score(kind, &p, adj, u, i).unwrap();
                prop_assert!(s.is_finite());
                prop_assert!((all[i] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn evaluation_masks_and_bounds(users in matrix(4, 3), items in matrix(6, 3), mask_bits in proptest::collection::vec(any::<bool>(), 24), target_bits in proptest::collection::vec(any::<bool>(), 24)) {
        let pairs = |bits: &[bool]| bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| Interaction::new(i / 6, i % 6)).collect::<Vec<_>>();
        let target = Dataset::new(4, 6, pairs(&target_bits)).unwrap();
        let mask_only: Vec<_> = pairs(&mask_bits).into_iter().filter(|x| !target.contains(x.user, x.item)).collect();
        let mask = Dataset::new(4, 6, mask_only).unwrap();
        prop_assume!(!target.is_empty());
        let p = Params { user: users, item: items, mlp: None };
        let r = evaluate(&ModelKind::Bpr, &p, None, &[&mask], &target, 3).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.ndcg));
        // Masked items are pushed below every unmasked one, so they only
        // reach the top-k when fewer than k items remain.
        for u in 0..4 {
            if target.user_items(u).is_empty() { continue; }
            let scores = score_all_items(&ModelKind::Bpr, &p, None, u).unwrap();
            let mut s: Vec<f64> = scores.to_vec();
            for &i in mask.user_items(u) { s[i] = f64::NEG_INFINITY; }
            let top = cfscale::evaluator::top_k(&s, 3);
            let unmasked = 6 - mask.user_items(u).len();
            for (pos, &i) in top.iter().enumerate() {
                prop_assert!(pos >= unmasked || !mask.contains(u, i));
            }
        }
    }

    #[test]
    fn raising_a_positive_never_hurts(scores in proptest::collection::vec(-3.0f64..3.0, 8), rel in 0usize..8, bump in 0.0f64..4.0, k in 1usize..8) {
        let rank = |s: &[f64]| cfscale::evaluator::top_k(s, s.len());
        let before = ndcg_at_k(&rank(&scores), &[rel], k).unwrap();
        let mut raised = scores.clone();
        raised[rel] += bump;
        let after = ndcg_at_k(&rank(&raised), &[rel], k).unwrap();
        prop_assert!(after >= before);
    }
}
