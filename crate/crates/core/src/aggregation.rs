//! Server-side fusion: per-client weights kappa(i) and the weighted model sum.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{weighted_sum, ParameterSet};

pub const DEFAULT_BETA: f64 = 0.999;
pub const DEFAULT_MU: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum AggregationRule {
    /// Weight proportional to dataset size.
    FedAvg,
    /// Equal weights.
    VanillaAvg,
    /// Effective-number weighting `(1 - beta) / (1 - beta^n)`.
    #[serde(rename = "beta")]
    BetaWeighting { beta: f64 },
    /// `exp(n_i) / sum_j exp(n_j)`.
    Softmax,
    /// FedAvg weights; clients add a proximal term with coefficient `mu`.
    FedProx { mu: f64 },
}

impl AggregationRule {
    pub const NAMES: [&'static str; 5] = ["fedavg", "vanillaavg", "beta", "softmax", "fedprox"];

    /// The five rules with default hyperparameters, in canonical order.
    pub fn all_defaults() -> [AggregationRule; 5] {
        [
            Self::FedAvg,
            Self::VanillaAvg,
            Self::BetaWeighting { beta: DEFAULT_BETA },
            Self::Softmax,
            Self::FedProx { mu: DEFAULT_MU },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::FedAvg => "fedavg",
            Self::VanillaAvg => "vanillaavg",
            Self::BetaWeighting { .. } => "beta",
            Self::Softmax => "softmax",
            Self::FedProx { .. } => "fedprox",
        }
    }

    /// Proximal coefficient applied during local training, if any.
    pub fn proximal_mu(&self) -> Option<f64> {
        match self {
            Self::FedProx { mu } => Some(*mu),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::BetaWeighting { beta } if !(0.0..1.0).contains(&beta) => Err(
                Error::InvalidAggregation(format!("beta {beta} outside [0, 1)")),
            ),
            Self::FedProx { mu } if !(mu.is_finite() && mu >= 0.0) => {
                Err(Error::InvalidAggregation(format!("mu {mu} must be >= 0")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AggregationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BetaWeighting { beta } => write!(f, "beta:{beta}"),
            Self::FedProx { mu } => write!(f, "fedprox:{mu}"),
            other => f.write_str(other.name()),
        }
    }
}

/// Parses `fedavg`, `vanillaavg`, `softmax`, `beta[:B]` or `fedprox[:MU]`.
impl FromStr for AggregationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let number = |default: f64| -> Result<f64> {
            arg.map_or(Ok(default), |a| {
                a.parse()
                    .map_err(|_| Error::InvalidAggregation(format!("bad parameter in {s:?}")))
            })
        };
        let rule = match name.to_ascii_lowercase().as_str() {
            "fedavg" => Self::FedAvg,
            "vanillaavg" => Self::VanillaAvg,
            "softmax" => Self::Softmax,
            "beta" => Self::BetaWeighting {
                beta: number(DEFAULT_BETA)?,
            },
            "fedprox" => Self::FedProx {
                mu: number(DEFAULT_MU)?,
            },
            _ => {
                return Err(Error::InvalidAggregation(format!(
                    "unknown rule {s:?}; expected one of {:?}",
                    Self::NAMES
                )))
            }
        };
        if arg.is_some() && matches!(rule, Self::FedAvg | Self::VanillaAvg | Self::Softmax) {
            return Err(Error::InvalidAggregation(format!(
                "{name} takes no parameter"
            )));
        }
        rule.validate()?;
        Ok(rule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaWeights {
    pub weights: Vec<f64>,
}

fn normalized(raw: Vec<f64>) -> KappaWeights {
    let total: f64 = raw.iter().sum();
    KappaWeights {
        weights: raw.into_iter().map(|w| w / total).collect(),
    }
}

pub fn compute_kappa(rule: &AggregationRule, sizes: &[usize]) -> Result<KappaWeights> {
    rule.validate()?;
    if sizes.is_empty() {
        return Err(Error::InvalidAggregation("no clients".into()));
    }
    if !matches!(rule, AggregationRule::VanillaAvg) && sizes.contains(&0) {
        return Err(Error::InvalidAggregation(format!(
            "rule {} needs every client size >= 1, got {sizes:?}",
            rule.name()
        )));
    }
    let n = sizes.len();
    Ok(match *rule {
        AggregationRule::FedAvg | AggregationRule::FedProx { .. } => {
            normalized(sizes.iter().map(|&s| s as f64).collect())
        }
        AggregationRule::VanillaAvg => KappaWeights {
            weights: vec![1.0 / n as f64; n],
        },
        AggregationRule::BetaWeighting { beta } => {
            let ln_beta = beta.ln();
            // 1 - beta^n computed as -expm1(n ln beta)
            normalized(
                sizes
                    .iter()
                    .map(|&s| (1.0 - beta) / -(s as f64 * ln_beta).exp_m1())
                    .collect(),
            )
        }
        AggregationRule::Softmax => {
            let max = *sizes.iter().max().unwrap() as f64;
            normalized(sizes.iter().map(|&s| (s as f64 - max).exp()).collect())
        }
    })
}

/// Fuses client models with the rule's kappa weights over `sizes`.
pub fn aggregate(
    rule: &AggregationRule,
    models: &[ParameterSet],
    sizes: &[usize],
) -> Result<ParameterSet> {
    if models.len() != sizes.len() {
        return Err(Error::InvalidAggregation(format!(
            "{} models but {} sizes",
            models.len(),
            sizes.len()
        )));
    }
    let kappa = compute_kappa(rule, sizes)?;
    weighted_sum(models, &kappa.weights)
}
