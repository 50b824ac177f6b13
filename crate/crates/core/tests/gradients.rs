use cfscale::graph::{build_normalized_adjacency, AugmentKind};
use cfscale::models::{init_params, ModelKind, Params, SglConfig};
use cfscale::objectives::{gradient_check, Batch, DropConfig, LossInput, Objective, SglViews, Triple};
use cfscale::{Dataset, Interaction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const USERS: usize = 5;
const ITEMS: usize = 5;
const DIM: usize = 4;

struct Instance {
    train: Dataset,
    batch: Batch,
}

/// Random 5×5 instance where every user has a positive and a negative.
fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for u in 0..USERS {
        let count = rng.random_range(1..ITEMS);
        let mut items: Vec<usize> = (0..ITEMS).collect();
        for _ in 0..ITEMS - count {
            items.remove(rng.random_range(0..items.len()));
        }
        pairs.extend(items.into_iter().map(|i| Interaction::new(u, i)));
    }
    let train = Dataset::new(USERS, ITEMS, pairs).unwrap();
    let triples = train
        .interactions()
        .take(8)
        .map(|x| {
            let negs: Vec<usize> = (0..ITEMS).filter(|&i| !train.contains(x.user, i)).collect();
            Triple::new(x.user, x.item, negs[rng.random_range(0..negs.len())])
        })
        .collect();
    Instance {
        train,
        batch: Batch::new(triples),
    }
}

fn params(kind: &ModelKind, seed: u64) -> Params<f64> {
    let mut p: Params<f64> = init_params(kind, USERS, ITEMS, DIM, seed).unwrap();
    // Move embeddings out of the near-zero regime so every term matters.
    p.user.mapv_inplace(|x| x * 15.0);
    p.item.mapv_inplace(|x| x * 15.0);
    if let Some(mlp) = p.mlp.as_mut() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for b in &mut mlp.biases {
            b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
    }
    p
}

fn check(kind: &ModelKind, objective: Objective, augment: Option<AugmentKind>) {
    for seed in 0..10 {
        let inst = instance(seed);
        let adj = build_normalized_adjacency::<f64>(&inst.train);
        let p = params(kind, seed + 100);
        let views = match (kind, augment) {
            (ModelKind::Sgl(cfg), Some(a)) => Some(SglViews::sample(
                &SglConfig { augment: a, ..*cfg },
                &adj,
                DIM,
                seed + 7,
            )),
            _ => None,
        };
        let input = LossInput {
            kind,
            params: &p,
            adj: kind.is_graph().then_some(&adj),
            batch: &inst.batch,
            objective: &objective,
            views: views.as_ref(),
        };
        let report = gradient_check(&input, 1e-6).unwrap();
        assert!(
            report.relative_error <= 1e-5,
            "{} / {} seed {seed}: {report:?}",
            kind.name(),
            objective.name()
        );
    }
}

fn sgl() -> ModelKind {
    ModelKind::Sgl(SglConfig {
        layers: 2,
        rho: 0.3,
        gamma: 0.5,
        tau: 0.5,
        ..SglConfig::default()
    })
}

fn drop() -> Objective {
    Objective::BprDrop(DropConfig::new(0.6, true))
}

#[test]
fn bpr_gradients() {
    check(&ModelKind::Bpr, Objective::Bpr, None);
    check(&ModelKind::Bpr, drop(), None);
    check(&ModelKind::Bpr, Objective::BprDrop(DropConfig::new(0.5, false)), None);
}

#[test]
fn neumf_gradients() {
    check(&ModelKind::neumf(), Objective::Bpr, None);
    check(&ModelKind::neumf(), drop(), None);
}

#[test]
fn lightgcn_gradients() {
    for layers in [1, 3] {
        check(&ModelKind::LightGcn { layers }, Objective::Bpr, None);
        check(&ModelKind::LightGcn { layers }, drop(), None);
    }
}

#[test]
fn sgl_gradients() {
    check(&sgl(), Objective::Bpr, None);
    check(&sgl(), drop(), None);
    check(&sgl(), Objective::Sgl, Some(AugmentKind::EdgeDropout));
    check(&sgl(), Objective::Sgl, Some(AugmentKind::FeatureMask));
    let users_only = match sgl() {
        ModelKind::Sgl(c) => ModelKind::Sgl(SglConfig { item_term: false, ..c }),
        _ => unreachable!(),
    };
    check(&users_only, Objective::Sgl, Some(AugmentKind::EdgeDropout));
}
