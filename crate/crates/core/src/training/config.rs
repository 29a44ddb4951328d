use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{BaselineConfig, BaselineKind};
use crate::forward_model::ForwardConfig;
use crate::inverse_model::InverseConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Cnn1d,
    Lstm,
    GnnMlp,
    Gat,
    WgnInverse,
    WgnCoupled,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        Self::Cnn1d,
        Self::Lstm,
        Self::GnnMlp,
        Self::Gat,
        Self::WgnInverse,
        Self::WgnCoupled,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cnn1d => "cnn1d",
            Self::Lstm => "lstm",
            Self::GnnMlp => "gnn-mlp",
            Self::Gat => "gat",
            Self::WgnInverse => "wgn-inverse",
            Self::WgnCoupled => "wgn-coupled",
        }
    }

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Self::Cnn1d => Some(BaselineKind::Cnn1d),
            Self::Lstm => Some(BaselineKind::Lstm),
            Self::GnnMlp => Some(BaselineKind::GnnMlp),
            Self::Gat => Some(BaselineKind::Gat),
            Self::WgnInverse | Self::WgnCoupled => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage1: StageSpec,
    pub stage2: StageSpec,
    pub stage3: StageSpec,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub grad_clip: f64,
}

impl StagePlan {
    pub fn reference() -> Self {
        Self {
            stage1: StageSpec { epochs: 150, lr: 1e-4 },
            stage2: StageSpec { epochs: 150, lr: 1e-4 },
            stage3: StageSpec { epochs: 600, lr: 1e-5 },
            batch_size: 8,
            plateau_factor: 0.8,
            plateau_patience: 20,
            grad_clip: 5.0,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1.epochs + self.stage2.epochs + self.stage3.epochs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingConfig {
    pub lambda_max: f64,
    pub warmup: usize,
    pub ramp: usize,
    pub mu: f64,
    pub alpha: f64,
    pub eps_weight: f64,
    pub eps_grad: f64,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            lambda_max: 3.0,
            warmup: 40,
            ramp: 100,
            mu: 1.0,
            alpha: 0.1,
            eps_weight: 0.01,
            eps_grad: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Reference,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Self::Reference),
            "desk" => Ok(Self::Desk),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

/// Full resolved training configuration of one model kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub preset: Preset,
    pub plan: StagePlan,
    pub coupling: CouplingConfig,
    pub inverse: InverseConfig,
    pub forward: ForwardConfig,
    pub baseline: BaselineConfig,
}

impl TrainConfig {
    /// Architecture and protocol of the reference configuration.
    pub fn reference(model: ModelKind, bins: usize) -> Self {
        Self {
            model,
            preset: Preset::Reference,
            plan: StagePlan::reference(),
            coupling: CouplingConfig::default(),
            inverse: InverseConfig::reference(bins),
            forward: ForwardConfig::reference(),
            baseline: BaselineConfig::reference(),
        }
    }

    /// Reduced widths and a shorter, faster schedule for laptop-scale runs
    /// on the synthetic store.
    pub fn desk(model: ModelKind, bins: usize) -> Self {
        Self {
            model,
            preset: Preset::Desk,
            plan: StagePlan {
                stage1: StageSpec { epochs: 150, lr: 2e-3 },
                stage2: StageSpec { epochs: 300, lr: 1e-3 },
                stage3: StageSpec { epochs: 150, lr: 5e-4 },
                batch_size: 8,
                plateau_factor: 0.8,
                plateau_patience: 20,
                grad_clip: 5.0,
            },
            coupling: CouplingConfig {
                warmup: 20,
                ramp: 50,
                ..CouplingConfig::default()
            },
            inverse: InverseConfig {
                bins,
                token_hidden: 16,
                context_dim: 16,
                hidden: 32,
                heads: 4,
                layers: 4,
                dropout: 0.0,
            },
            forward: ForwardConfig { hidden: 32, layers: 3 },
            baseline: BaselineConfig {
                cnn_channels: vec![8, 16, 16, 32, 32],
                lstm_hidden: 16,
                lstm_layers: 2,
                lstm_dropout: 0.3,
                graph_hidden: 32,
                gat_heads: 4,
                graph_layers: 4,
                gat_dropout: 0.0,
            },
        }
    }

    pub fn preset(preset: Preset, model: ModelKind, bins: usize) -> Self {
        match preset {
            Preset::Reference => Self::reference(model, bins),
            Preset::Desk => Self::desk(model, bins),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.plan;
        for (name, s) in [("stage1", p.stage1), ("stage2", p.stage2), ("stage3", p.stage3)] {
            if !(s.lr > 0.0) {
                return Err(Error::Config(format!("{name} learning rate must be positive")));
            }
        }
        if p.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let c = &self.coupling;
        let values = [c.lambda_max, c.mu, c.alpha, c.eps_weight, c.eps_grad];
        if values.iter().any(|v| !(*v >= 0.0)) || !(c.eps_weight > 0.0) {
            return Err(Error::Config("coupling weights must be non-negative (ε_weight positive)".into()));
        }
        if self.model == ModelKind::WgnCoupled && c.warmup >= p.stage3.epochs && p.stage3.epochs > 0 {
            return Err(Error::Config(format!(
                "warm-up {} must be shorter than stage III ({} epochs)",
                c.warmup, p.stage3.epochs
            )));
        }
        self.inverse.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_plan_totals_900_epochs() {
        let c = TrainConfig::reference(ModelKind::WgnCoupled, 256);
        assert_eq!(c.plan.total_epochs(), 900);
        c.validate().unwrap();
        assert_eq!(c.inverse.hidden / c.inverse.heads * c.inverse.heads, 256);
    }

    #[test]
    fn model_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
    }

    #[test]
    fn warmup_longer_than_stage3_rejected() {
        let mut c = TrainConfig::desk(ModelKind::WgnCoupled, 8);
        c.coupling.warmup = c.plan.stage3.epochs;
        assert!(c.validate().is_err());
    }
}
