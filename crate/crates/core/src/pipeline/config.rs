//! Training configuration, read from TOML with one section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub conv1: usize,
    pub conv2: usize,
    pub embed: usize,
    pub predictor_hidden: usize,
    /// Latent domain count; defaults to the number of source domains.
    pub domains: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv1: 8,
            conv2: 16,
            embed: 64,
            predictor_hidden: 64,
            domains: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
        }
    }
}

/// Step schedule: `lr` until `decay_epoch`, then `lr·decay`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub decay_epoch: usize,
    pub decay: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Share of the training split used to pretrain the domain predictor.
    pub pretrain_fraction: f64,
    /// Weight of the batch balancing penalty once collapse is detected.
    pub balance_weight: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            decay_epoch: 20,
            decay: 0.1,
            pretrain_epochs: 30,
            pretrain_lr: 0.05,
            pretrain_fraction: 0.5,
            balance_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr: f64,
    pub decay_epoch: usize,
    pub decay: f64,
    /// Keep training the domain predictor instead of freezing assignments.
    pub refine_predictor: bool,
    /// Re-initialize encoder and classifier instead of continuing from stage 1.
    pub restart: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            decay_epoch: 20,
            decay: 0.1,
            refine_predictor: false,
            restart: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub tau: f64,
    pub rho: f64,
    pub delta: f64,
    pub eps: f64,
    pub normalize_prototypes: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            gamma: 0.1,
            tau: 0.5,
            rho: 0.7,
            delta: 0.5,
            eps: 1e-5,
            normalize_prototypes: true,
        }
    }
}

/// Which components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    pub sdnorm: bool,
    pub protogr: bool,
    pub protoccl: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self::FULL
    }
}

impl Switches {
    pub const FULL: Self = Self {
        sdnorm: true,
        protogr: true,
        protoccl: true,
    };
    pub const NONE: Self = Self {
        sdnorm: false,
        protogr: false,
        protoccl: false,
    };

    pub fn uses_prototypes(&self) -> bool {
        self.protogr || self.protoccl
    }

    pub fn count(&self) -> usize {
        [self.sdnorm, self.protogr, self.protoccl]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// All eight combinations: none, singles, pairs, full.
    pub fn grid() -> Vec<Self> {
        let mut all: Vec<Self> = (0..8u8)
            .map(|b| Self {
                sdnorm: b & 1 != 0,
                protogr: b & 2 != 0,
                protoccl: b & 4 != 0,
            })
            .collect();
        all.sort_by_key(|s| (s.count(), !s.sdnorm, !s.protogr, !s.protoccl));
        all
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.sdnorm, "sdnorm"),
            (self.protogr, "protogr"),
            (self.protoccl, "protoccl"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|&(_, n)| n)
        .collect();
        if parts.is_empty() {
            "deepall".to_string()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seeds: Seeds,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub loss: LossConfig,
    pub switches: Switches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seeds(pub Vec<u64>);

impl Default for Seeds {
    fn default() -> Self {
        Self(vec![0, 1, 2])
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.loss.lambda < 0.0 || self.loss.gamma < 0.0 {
            return bad(format!(
                "loss weights must be nonnegative, got λ={} γ={}",
                self.loss.lambda, self.loss.gamma
            ));
        }
        if self.loss.tau <= 0.0 {
            return bad(format!(
                "temperature must be positive, got {}",
                self.loss.tau
            ));
        }
        if !(self.loss.rho > 0.0 && self.loss.rho < 1.0) {
            return bad(format!(
                "prototype decay must lie in (0, 1), got {}",
                self.loss.rho
            ));
        }
        if self.loss.eps <= 0.0 {
            return bad(format!("eps must be positive, got {}", self.loss.eps));
        }
        if self.optim.batch_size < 2 {
            return bad(format!(
                "batch size must be at least 2, got {}",
                self.optim.batch_size
            ));
        }
        if !(self.stage1.pretrain_fraction > 0.0 && self.stage1.pretrain_fraction <= 1.0) {
            return bad(format!(
                "pretrain fraction must lie in (0, 1], got {}",
                self.stage1.pretrain_fraction
            ));
        }
        if self.seeds.0.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.model.domains == Some(0) {
            return bad("latent domain count must be positive".into());
        }
        Ok(())
    }

    pub fn lr_stage1(&self, epoch: usize) -> f64 {
        step_lr(
            self.stage1.lr,
            self.stage1.decay_epoch,
            self.stage1.decay,
            epoch,
        )
    }

    pub fn lr_stage2(&self, epoch: usize) -> f64 {
        step_lr(
            self.stage2.lr,
            self.stage2.decay_epoch,
            self.stage2.decay,
            epoch,
        )
    }
}

fn step_lr(lr: f64, decay_epoch: usize, decay: f64, epoch: usize) -> f64 {
    if epoch >= decay_epoch {
        lr * decay
    } else {
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = TrainConfig::from_toml(
            "seeds = [7]\n[stage2]\nepochs = 3\n[switches]\nprotogr = false\n",
        )
        .unwrap();
        assert_eq!(cfg.seeds.0, vec![7]);
        assert_eq!(cfg.stage2.epochs, 3);
        assert_eq!(cfg.stage2.lr, 0.05);
        assert!(cfg.switches.sdnorm && !cfg.switches.protogr);
        assert!(TrainConfig::from_toml("[loss]\nlambda = -1.0\n").is_err());
        assert!(TrainConfig::from_toml("[stage9]\n").is_err());
    }

    #[test]
    fn grid_has_eight_distinct_rows() {
        let g = Switches::grid();
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], Switches::NONE);
        assert_eq!(g[7], Switches::FULL);
        assert_eq!(g[1].label(), "sdnorm");
        assert_eq!(step_lr(0.05, 20, 0.1, 20), 0.05 * 0.1);
    }
}
