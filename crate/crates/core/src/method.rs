//! The registered training methods and how each maps onto a regime,
//! a strategy and an optional parameter expansion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, LORA_TARGETS, W1, W_OUT};
use crate::strategies::{AgemConfig, ErConfig, EwcConfig, InvariantObjective, Strategy, WindowConfig};
use crate::train::{BaselineVariant, Expansion};

pub const METHOD_NAMES: [&str; 12] = [
    "baseline-full",
    "baseline-old",
    "baseline-recent",
    "ift",
    "ewc",
    "er",
    "agem",
    "lora",
    "adapter",
    "coral",
    "irm",
    "groupdro",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            targets: vec![W1.into(), W_OUT.into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub reduction: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { reduction: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoralConfig {
    pub lambda: f64,
    pub window: WindowConfig,
}

impl Default for CoralConfig {
    fn default() -> Self {
        CoralConfig {
            lambda: 0.001,
            window: WindowConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrmConfig {
    pub lambda: f64,
    pub window: WindowConfig,
}

impl Default for IrmConfig {
    fn default() -> Self {
        IrmConfig {
            lambda: 1.0,
            window: WindowConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupDroConfig {
    pub eta: f64,
    /// Multiplier of the reweighted domain loss; 0 disables the objective.
    pub weight: f64,
    pub window: WindowConfig,
}

impl Default for GroupDroConfig {
    fn default() -> Self {
        GroupDroConfig {
            eta: 0.01,
            weight: 1.0,
            window: WindowConfig::default(),
        }
    }
}

/// A method with its hyperparameters, tagged by its registered name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum MethodSpec {
    BaselineFull,
    BaselineOld,
    BaselineRecent,
    Ift,
    Ewc(EwcConfig),
    Er(ErConfig),
    Agem(AgemConfig),
    Lora(LoraConfig),
    Adapter(AdapterConfig),
    Coral(CoralConfig),
    Irm(IrmConfig),
    #[serde(rename = "groupdro")]
    GroupDro(GroupDroConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Baseline(BaselineVariant),
    Incremental,
}

impl MethodSpec {
    /// The method with default hyperparameters.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "baseline-full" => MethodSpec::BaselineFull,
            "baseline-old" => MethodSpec::BaselineOld,
            "baseline-recent" => MethodSpec::BaselineRecent,
            "ift" => MethodSpec::Ift,
            "ewc" => MethodSpec::Ewc(EwcConfig::default()),
            "er" => MethodSpec::Er(ErConfig::default()),
            "agem" => MethodSpec::Agem(AgemConfig::default()),
            "lora" => MethodSpec::Lora(LoraConfig::default()),
            "adapter" => MethodSpec::Adapter(AdapterConfig::default()),
            "coral" => MethodSpec::Coral(CoralConfig::default()),
            "irm" => MethodSpec::Irm(IrmConfig::default()),
            "groupdro" => MethodSpec::GroupDro(GroupDroConfig::default()),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown method `{other}` (expected one of {})",
                    METHOD_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::BaselineFull => "baseline-full",
            MethodSpec::BaselineOld => "baseline-old",
            MethodSpec::BaselineRecent => "baseline-recent",
            MethodSpec::Ift => "ift",
            MethodSpec::Ewc(_) => "ewc",
            MethodSpec::Er(_) => "er",
            MethodSpec::Agem(_) => "agem",
            MethodSpec::Lora(_) => "lora",
            MethodSpec::Adapter(_) => "adapter",
            MethodSpec::Coral(_) => "coral",
            MethodSpec::Irm(_) => "irm",
            MethodSpec::GroupDro(_) => "groupdro",
        }
    }

    pub fn regime(&self) -> Regime {
        match self {
            MethodSpec::BaselineFull => Regime::Baseline(BaselineVariant::Full),
            MethodSpec::BaselineOld => Regime::Baseline(BaselineVariant::Old),
            MethodSpec::BaselineRecent => Regime::Baseline(BaselineVariant::Recent),
            _ => Regime::Incremental,
        }
    }

    /// Checks hyperparameter ranges.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("{}: {msg}", self.name())));
        let check_window = |w: &WindowConfig| {
            if w.window_len < 1 || w.domains_per_window < 1 || w.batch_size == Some(0) {
                bad("window_len, domains_per_window and batch_size must be >= 1".into())
            } else {
                Ok(())
            }
        };
        match self {
            MethodSpec::Ewc(c) if c.lambda < 0.0 || c.gamma < 0.0 => bad("lambda and gamma must be >= 0".into()),
            MethodSpec::Er(c) if c.replay_every < 1 => bad("replay_every must be >= 1".into()),
            MethodSpec::Er(c) if !(0.0..=1.0).contains(&c.fraction) => bad("fraction must lie in [0, 1]".into()),
            MethodSpec::Er(c) if c.capacity == Some(0) || c.batch_size == Some(0) => {
                bad("capacity and batch_size must be >= 1 when set".into())
            }
            MethodSpec::Agem(c) if c.batch_size == Some(0) => bad("batch_size must be >= 1 when set".into()),
            MethodSpec::Lora(c) => {
                if c.rank < 1 || c.targets.is_empty() {
                    return bad("rank must be >= 1 and targets non-empty".into());
                }
                for t in &c.targets {
                    if !LORA_TARGETS.contains(&t.as_str()) {
                        return bad(format!("`{t}` is not a LoRA target ({})", LORA_TARGETS.join(", ")));
                    }
                }
                Ok(())
            }
            MethodSpec::Adapter(c) if c.reduction < 1 => bad("reduction must be >= 1".into()),
            MethodSpec::Coral(c) if c.lambda < 0.0 => bad("lambda must be >= 0".into()),
            MethodSpec::Coral(c) => check_window(&c.window),
            MethodSpec::Irm(c) if c.lambda < 0.0 => bad("lambda must be >= 0".into()),
            MethodSpec::Irm(c) => check_window(&c.window),
            MethodSpec::GroupDro(c) if c.eta < 0.0 || c.weight < 0.0 => bad("eta and weight must be >= 0".into()),
            MethodSpec::GroupDro(c) => check_window(&c.window),
            _ => Ok(()),
        }
    }

    pub fn strategy(&self, seed: u64) -> Option<Strategy> {
        match self {
            MethodSpec::Ewc(c) => Some(Strategy::ewc(c)),
            MethodSpec::Er(c) => Some(Strategy::replay(c, seed)),
            MethodSpec::Agem(c) => Some(Strategy::agem(c, seed)),
            MethodSpec::Coral(c) => Some(Strategy::invariant(
                InvariantObjective::Coral { lambda: c.lambda },
                &c.window,
                seed,
            )),
            MethodSpec::Irm(c) => Some(Strategy::invariant(
                InvariantObjective::Irm { lambda: c.lambda },
                &c.window,
                seed,
            )),
            MethodSpec::GroupDro(c) => Some(Strategy::invariant(
                InvariantObjective::GroupDro {
                    eta: c.eta,
                    weight: c.weight,
                },
                &c.window,
                seed,
            )),
            _ => None,
        }
    }

    /// The expansion to attach after the first period. A LoRA rank larger
    /// than the smallest dimension of a target is capped at that dimension.
    pub fn expansion(&self, model: &ModelConfig) -> Expansion {
        match self {
            MethodSpec::Lora(c) => Expansion::Lora {
                rank: effective_lora_rank(c, model),
                alpha: c.alpha,
                targets: c.targets.clone(),
            },
            MethodSpec::Adapter(c) => Expansion::Adapter {
                reduction: c.reduction,
            },
            _ => Expansion::None,
        }
    }
}

/// `rank` capped by the smallest dimension over all targets.
pub fn effective_lora_rank(config: &LoraConfig, model: &ModelConfig) -> usize {
    let dims = |t: &str| -> usize {
        match t {
            "embedding" => model.vocab_size.min(model.embed_dim),
            "w1" => model.embed_dim.min(model.hidden_dim),
            _ => model.n_labels.min(model.hidden_dim),
        }
    };
    config
        .targets
        .iter()
        .map(|t| dims(t))
        .fold(config.rank, usize::min)
        .max(1)
}
