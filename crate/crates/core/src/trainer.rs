//! Local mini-batch SGD with an optional proximal pull toward an anchor.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss, loss_and_grad, ModelConfig};
use crate::params::{l2_sq_distance, ParameterSet};
use crate::seed;
use crate::synth::PhantomStudy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Proximal coefficient; only used when an anchor is supplied.
    pub mu: f64,
    /// Shuffling seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_round: 3,
            batch_size: 4,
            learning_rate: 0.2,
            mu: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Twenty local epochs per round.
    pub fn long_rounds() -> Self {
        Self {
            epochs_per_round: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_round == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs_per_round and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be finite and positive",
                self.learning_rate
            )));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(Error::InvalidConfig(format!("mu {} must be >= 0", self.mu)));
        }
        Ok(())
    }
}

/// `(mu / 2) * ||params - anchor||^2`.
pub fn prox_penalty(params: &ParameterSet, anchor: &ParameterSet, mu: f64) -> Result<f64> {
    Ok(0.5 * mu * l2_sq_distance(params, anchor)?)
}

/// Value of [`total_loss_and_grad`] without computing the gradient.
pub fn total_loss(
    params: &ParameterSet,
    batch: &[&PhantomStudy],
    model: &ModelConfig,
    cfg: &TrainConfig,
    anchor: Option<&ParameterSet>,
) -> Result<f64> {
    let base = loss(params, batch, model)?;
    match anchor {
        Some(anchor) if cfg.mu != 0.0 => Ok(base + prox_penalty(params, anchor, cfg.mu)?),
        _ => Ok(base),
    }
}

/// Base loss plus the proximal term when `anchor` is given and `mu > 0`.
pub fn total_loss_and_grad(
    params: &ParameterSet,
    batch: &[&PhantomStudy],
    model: &ModelConfig,
    cfg: &TrainConfig,
    anchor: Option<&ParameterSet>,
) -> Result<(f64, ParameterSet)> {
    let (loss, grad) = loss_and_grad(params, batch, model)?;
    match anchor {
        Some(anchor) if cfg.mu != 0.0 => {
            let penalty = prox_penalty(params, anchor, cfg.mu)?;
            let values = grad
                .values()
                .iter()
                .zip(params.values().iter().zip(anchor.values()))
                .map(|(g, (p, a))| g + cfg.mu * (p - a))
                .collect();
            Ok((loss + penalty, grad.with_values(values)?))
        }
        _ => Ok((loss, grad)),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    /// Total loss of every mini-batch, evaluated before its update.
    pub step_losses: Vec<f64>,
}

pub fn train_local(
    start: &ParameterSet,
    data: &[PhantomStudy],
    model: &ModelConfig,
    cfg: &TrainConfig,
    anchor: Option<&ParameterSet>,
) -> Result<ParameterSet> {
    train_local_traced(start, data, model, cfg, anchor).map(|o| o.params)
}

/// Runs `epochs_per_round` epochs of plain SGD. Each epoch visits the data
/// in a fresh permutation drawn from a stream seeded with `cfg.seed`.
pub fn train_local_traced(
    start: &ParameterSet,
    data: &[PhantomStudy],
    model: &ModelConfig,
    cfg: &TrainConfig,
    anchor: Option<&ParameterSet>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(anchor) = anchor {
        if !anchor.is_compatible(start) {
            return Err(Error::LayoutMismatch("anchor does not match start".into()));
        }
    }
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut params = start.values().to_vec();
    let mut current = start.clone();
    let mut step_losses = Vec::new();
    for _ in 0..cfg.epochs_per_round {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PhantomStudy> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grad) = total_loss_and_grad(&current, &batch, model, cfg, anchor)?;
            step_losses.push(loss);
            for (p, g) in params.iter_mut().zip(grad.values()) {
                *p -= cfg.learning_rate * g;
            }
            current = start
                .with_values(params.clone())
                .map_err(|e| Error::InvalidParams(format!("training diverged: {e}")))?;
        }
    }
    Ok(TrainOutcome {
        params: current,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::synth::{default_federation, generate_center};

    fn data() -> Vec<PhantomStudy> {
        let p = default_federation()
            .into_iter()
            .find(|p| p.center_id == 13)
            .unwrap();
        generate_center(&p).unwrap().train
    }

    fn set(v: &[f64]) -> ParameterSet {
        ParameterSet::new(vec![vec![v.len()]], v.to_vec()).unwrap()
    }

    #[test]
    fn prox_penalty_examples() {
        let a = set(&[0.4, -2.0]);
        assert_eq!(prox_penalty(&a, &a, 3.0).unwrap(), 0.0);
        assert_eq!(prox_penalty(&a, &set(&[9.0, 9.0]), 0.0).unwrap(), 0.0);
        assert_eq!(
            prox_penalty(&set(&[1.0, 1.0]), &set(&[0.0, 0.0]), 2.0).unwrap(),
            2.0
        );
        assert!(prox_penalty(&a, &set(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn total_loss_matches_total_loss_and_grad() {
        let model = ModelConfig::default();
        let params = init_params(&model, 5).unwrap();
        let anchor = init_params(&model, 6).unwrap();
        let d = data();
        let batch: Vec<&PhantomStudy> = d.iter().take(2).collect();
        let cfg = TrainConfig {
            mu: 0.3,
            ..TrainConfig::default()
        };
        for a in [None, Some(&anchor)] {
            let with_grad = total_loss_and_grad(&params, &batch, &model, &cfg, a)
                .unwrap()
                .0;
            assert_eq!(
                total_loss(&params, &batch, &model, &cfg, a).unwrap(),
                with_grad
            );
        }
    }

    #[test]
    fn zero_mu_anchor_is_inert() {
        let model = ModelConfig::default();
        let start = init_params(&model, 1).unwrap();
        let anchor = init_params(&model, 2).unwrap();
        let cfg = TrainConfig {
            mu: 0.0,
            epochs_per_round: 1,
            ..TrainConfig::default()
        };
        let d = data();
        let a = train_local(&start, &d, &model, &cfg, Some(&anchor)).unwrap();
        let b = train_local(&start, &d, &model, &cfg, None).unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn vanishing_learning_rate_keeps_start() {
        let model = ModelConfig::default();
        let start = init_params(&model, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-300,
            epochs_per_round: 1,
            ..TrainConfig::default()
        };
        let out = train_local(&start, &data(), &model, &cfg, None).unwrap();
        // zero-initialised biases pick up steps of order 1e-300; weights are untouched
        for (a, b) in out.values().iter().zip(start.values()) {
            assert!((a - b).abs() < 1e-290);
            if *b != 0.0 {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn strong_proximal_pull_stays_near_anchor() {
        let model = ModelConfig::default();
        let start = init_params(&model, 4).unwrap();
        let d = data();
        let free = TrainConfig {
            mu: 0.0,
            epochs_per_round: 1,
            ..TrainConfig::default()
        };
        // lr * mu must stay below 2 for the proximal step to be stable
        let pulled = TrainConfig {
            mu: 1e6,
            learning_rate: 1e-6,
            epochs_per_round: 1,
            ..free.clone()
        };
        let a = train_local(&start, &d, &model, &free, Some(&start)).unwrap();
        let b = train_local(&start, &d, &model, &pulled, Some(&start)).unwrap();
        let da = l2_sq_distance(&a, &start).unwrap();
        let db = l2_sq_distance(&b, &start).unwrap();
        assert!(db <= da, "{db} > {da}");
        assert!(db < 1e-6, "{db}");
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let model = ModelConfig::default();
        let start = init_params(&model, 8).unwrap();
        let cfg = TrainConfig {
            seed: 31,
            ..TrainConfig::default()
        };
        let d = data();
        let a = train_local_traced(&start, &d, &model, &cfg, None).unwrap();
        let b = train_local_traced(&start, &d, &model, &cfg, None).unwrap();
        assert_eq!(a.params.digest(), b.params.digest());
        assert!(a.step_losses.iter().all(|l| l.is_finite()));
        assert_eq!(
            a.step_losses.len(),
            cfg.epochs_per_round * d.len().div_ceil(cfg.batch_size)
        );
    }

    #[test]
    fn errors() {
        let model = ModelConfig::default();
        let start = init_params(&model, 8).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_local(&start, &[], &model, &cfg, None),
            Err(Error::EmptyDataset)
        ));
        let foreign = set(&[1.0]);
        assert!(matches!(
            train_local(&start, &data(), &model, &cfg, Some(&foreign)),
            Err(Error::LayoutMismatch(_))
        ));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..cfg
        };
        assert!(train_local(&start, &data(), &model, &bad, None).is_err());
    }
}
