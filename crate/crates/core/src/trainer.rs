//! Mini-batch Adam training with early stopping on validation NDCG.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_negative, Dataset};
use crate::error::{Error, Result};
use crate::evaluator::evaluate;
use crate::graph::build_normalized_adjacency;
use crate::models::{init_params, Gradients, ModelKind, Params};
use crate::objectives::{compute_gradients, Batch, LossInput, Objective, SglViews, Triple};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Params<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Parameters are untouched when the
/// gradient has a non-finite entry.
pub fn adam_step<T: Scalar>(params: &mut Params<T>, grads: &Gradients<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(Error::Shape("gradient or optimizer state does not match params".into()));
    }
    for (idx, g) in grads.slices().iter().enumerate() {
        if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient tensor {idx}, entry {pos}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let step = T::of(lr / (1.0 - state.beta1.powi(t)));
    let root_bc2 = T::of((1.0 - state.beta2.powi(t)).sqrt());
    let eps = T::of(state.eps);
    let tensors = params
        .slices_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(state.m.slices_mut().into_iter().zip(state.v.slices_mut()));
    for ((theta, g), (m, v)) in tensors {
        for (((x, &g), m), v) in theta.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            *x -= step * *m / (v.sqrt() / root_bc2 + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub k_eval: usize,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 2048,
            max_epochs: 300,
            patience: 10,
            seed: 0,
            k_eval: 20,
            objective: Objective::Bpr,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.k_eval == 0 {
            return Err(Error::Config("k_eval must be at least 1".into()));
        }
        if let Objective::BprDrop(d) = &self.objective {
            d.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ndcg: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,valid_ndcg";

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|e| &self.epochs[e - 1])
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.valid_ndcg);
        }
        out
    }
}

/// Trains a fresh model of width `dim`, initialized from `cfg.seed`.
pub fn train<T: Scalar>(
    kind: &ModelKind,
    train: &Dataset,
    valid: &Dataset,
    dim: usize,
    cfg: &TrainConfig,
) -> Result<(Params<T>, TrainHistory)> {
    kind.validate(dim)?;
    let params = init_params(kind, train.num_users(), train.num_items(), dim, cfg.seed)?;
    train_from(kind, train, valid, params, cfg)
}

/// Trains from the given initial parameters and returns the snapshot of
/// the best validation epoch.
pub fn train_from<T: Scalar>(
    kind: &ModelKind,
    train: &Dataset,
    valid: &Dataset,
    mut params: Params<T>,
    cfg: &TrainConfig,
) -> Result<(Params<T>, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if valid.num_users() != train.num_users() || valid.num_items() != train.num_items() {
        return Err(Error::Shape("train and valid universes differ".into()));
    }
    let mut history = TrainHistory::default();
    if cfg.max_epochs == 0 {
        return Ok((params, history));
    }
    let sgl = match (&cfg.objective, kind) {
        (Objective::Sgl, ModelKind::Sgl(c)) => Some(*c),
        (Objective::Sgl, other) => {
            return Err(Error::Config(format!("the sgl objective needs an SGL model, got {}", other.name())))
        }
        _ => None,
    };
    let adj = kind.is_graph().then(|| build_normalized_adjacency::<T>(train));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = AdamState::new(&params);
    let mut order = train.to_vec();
    let mut best: Option<(f64, Params<T>)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let views = match (&sgl, &adj) {
            (Some(c), Some(a)) => Some(SglViews::sample(c, a, params.dim(), rng.random())),
            _ => None,
        };
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let triples = chunk
                .iter()
                .map(|x| Ok(Triple::new(x.user, x.item, sample_negative(train, x.user, &mut rng)?)))
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::new(triples);
            let (loss, grads) = compute_gradients(&LossInput {
                kind,
                params: &params,
                adj: adj.as_ref(),
                batch: &batch,
                objective: &cfg.objective,
                views: views.as_ref(),
            })?;
            adam_step(&mut params, &grads, &mut state, cfg.lr)?;
            loss_sum += loss.total.to_f64_lossy();
            batches += 1;
        }
        let report = evaluate(kind, &params, adj.as_ref(), &[train], valid, cfg.k_eval)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            valid_ndcg: report.ndcg,
        };
        log::debug!(
            "epoch {epoch}: loss {:.6}, valid ndcg@{} {:.6}",
            record.train_loss,
            cfg.k_eval,
            record.valid_ndcg
        );
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(b, _)| report.ndcg > *b) {
            best = Some((report.ndcg, params.clone()));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((best_params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;
    use crate::objectives::DropConfig;

    fn diagonal() -> Dataset {
        Dataset::new(2, 2, [Interaction::new(0, 0), Interaction::new(1, 1)]).unwrap()
    }

    fn scalar_params(x: f64) -> Params<f64> {
        Params {
            user: ndarray::Array2::from_elem((1, 1), x),
            item: ndarray::Array2::zeros((0, 1)),
            mlp: None,
        }
    }

    #[test]
    fn first_adam_step_is_minus_lr() {
        let mut p = scalar_params(0.0);
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &scalar_params(1.0), &mut state, 0.001).unwrap();
        assert_eq!(state.t, 1);
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p.user[[0, 0]] - expected).abs() < 1e-18);
        let first = p.user[[0, 0]];
        adam_step(&mut p, &scalar_params(1.0), &mut state, 0.001).unwrap();
        assert!(p.user[[0, 0]] < first);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_params(0.7);
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &scalar_params(0.0), &mut state, 0.001).unwrap();
        assert_eq!(p.user[[0, 0]], 0.7);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar_params(0.7);
        let mut state = AdamState::new(&p);
        let err = adam_step(&mut p, &scalar_params(f64::INFINITY), &mut state, 0.001).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(state.t, 0);
        assert_eq!(p.user[[0, 0]], 0.7);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let d = diagonal();
        let cfg = TrainConfig {
            max_epochs: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let (p, h) = train::<f64>(&ModelKind::Bpr, &d, &d, 4, &cfg).unwrap();
        assert_eq!(p, init_params(&ModelKind::Bpr, 2, 2, 4, 3).unwrap());
        assert!(h.epochs.is_empty());
        assert_eq!(h.best_epoch, None);
    }

    #[test]
    fn frozen_run_stops_after_patience() {
        let d = diagonal();
        let cfg = TrainConfig {
            lr: 0.0,
            patience: 1,
            ..TrainConfig::default()
        };
        let (_, h) = train::<f64>(&ModelKind::Bpr, &d, &d, 4, &cfg).unwrap();
        assert_eq!(h.epochs.len(), 2);
        assert!(h.stopped_early);
        assert_eq!(h.best_epoch, Some(1));
    }

    #[test]
    fn separable_instance_is_solved() {
        let d = diagonal();
        let cfg = TrainConfig {
            max_epochs: 200,
            seed: 11,
            k_eval: 1,
            ..TrainConfig::default()
        };
        let (p, h) = train::<f64>(&ModelKind::Bpr, &d, &d, 4, &cfg).unwrap();
        let r = evaluate(&ModelKind::Bpr, &p, None, &[&d], &d, 1).unwrap();
        assert_eq!(r.ndcg, 1.0);
        assert_eq!(h.best().unwrap().valid_ndcg, r.ndcg);
    }

    #[test]
    fn loss_decreases_on_separable_instance() {
        let d = diagonal();
        for kind in [ModelKind::Bpr, ModelKind::LightGcn { layers: 2 }, ModelKind::neumf()] {
            let cfg = TrainConfig {
                max_epochs: 10,
                patience: 100,
                seed: 5,
                ..TrainConfig::default()
            };
            let (_, h) = train::<f64>(&kind, &d, &d, 4, &cfg).unwrap();
            assert_eq!(h.epochs.len(), 10);
            for w in h.epochs.windows(2) {
                assert!(w[1].train_loss < w[0].train_loss, "{}: {:?}", kind.name(), h.epochs);
            }
        }
    }

    fn small() -> Dataset {
        let pairs = (0..12).flat_map(|u| (0..15).filter(move |i| (u * 7 + i * 3) % 5 < 2).map(move |i| Interaction::new(u, i)));
        Dataset::new(12, 15, pairs).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let d = small();
        let kinds = [
            (ModelKind::Bpr, Objective::BprDrop(DropConfig::new(0.8, true))),
            (ModelKind::Sgl(Default::default()), Objective::Sgl),
        ];
        for (kind, objective) in kinds {
            let cfg = TrainConfig {
                max_epochs: 6,
                batch_size: 16,
                patience: 3,
                seed: 9,
                objective,
                ..TrainConfig::default()
            };
            let (p1, h1) = train::<f64>(&kind, &d, &d, 8, &cfg).unwrap();
            let (p2, h2) = train::<f64>(&kind, &d, &d, 8, &cfg).unwrap();
            assert_eq!(h1, h2);
            assert_eq!(p1, p2);
        }
    }

    #[test]
    fn returned_params_match_best_epoch() {
        let d = small();
        let valid = Dataset::new(12, 15, (0..12).map(|u| Interaction::new(u, (u * 4 + 1) % 15))).unwrap();
        let cfg = TrainConfig {
            max_epochs: 15,
            batch_size: 8,
            lr: 0.05,
            patience: 15,
            seed: 2,
            ..TrainConfig::default()
        };
        let (p, h) = train::<f64>(&ModelKind::Bpr, &d, &valid, 4, &cfg).unwrap();
        let r = evaluate(&ModelKind::Bpr, &p, None, &[&d], &valid, 20).unwrap();
        let best = h.best().unwrap();
        assert_eq!(r.ndcg, best.valid_ndcg);
        assert!(h.epochs.iter().all(|e| e.valid_ndcg <= best.valid_ndcg));
    }

    #[test]
    fn sgl_objective_on_plain_model_is_rejected() {
        let d = diagonal();
        let cfg = TrainConfig {
            objective: Objective::Sgl,
            ..TrainConfig::default()
        };
        assert!(matches!(train::<f64>(&ModelKind::Bpr, &d, &d, 4, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn history_csv() {
        let h = TrainHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                valid_ndcg: 0.25,
            }],
            best_epoch: Some(1),
            stopped_early: false,
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,valid_ndcg\n1,0.5,0.25\n");
    }
}
