//! Model and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Scaled dot-product attention over point embeddings.
    #[default]
    DotProduct,
    /// Negative Wasserstein-2 attention over diagonal Gaussian embeddings.
    Stochastic,
}

/// How raw attention scores are refined before the outer softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    #[default]
    None,
    Simp,
    Value,
    Add,
    Stoc,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::None,
        Mechanism::Simp,
        Mechanism::Value,
        Mechanism::Add,
        Mechanism::Stoc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::Simp => "simp",
            Mechanism::Value => "value",
            Mechanism::Add => "add",
            Mechanism::Stoc => "stoc",
        }
    }

    /// Whether the mechanism can run on `backbone`.
    pub fn supports(self, backbone: Backbone) -> bool {
        self != Mechanism::Stoc || backbone == Backbone::Stochastic
    }

    /// Refinement matrices per head per layer, each `n × n`.
    pub fn matrices(self) -> &'static [&'static str] {
        match self {
            Mechanism::None => &[],
            Mechanism::Simp | Mechanism::Add => &["WRQ", "WRK"],
            Mechanism::Value => &["WRQ", "WRK", "WRV"],
            Mechanism::Stoc => &["Wmu_R", "Wsigma_R"],
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Divisor applied to refined inner products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineScale {
    /// `1/√d` with `d` the embedding dimension.
    #[default]
    SqrtD,
    /// `1/√n` with `n` the sequence length the inner product spans.
    SqrtN,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub mechanism: Mechanism,
    /// Embedding dimension.
    pub d: usize,
    /// Maximum sequence length.
    pub n: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub l2_weight: f64,
    pub seed: u64,
    pub refine_scale: RefineScale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::DotProduct,
            mechanism: Mechanism::None,
            d: 64,
            n: 50,
            heads: 1,
            layers: 2,
            dropout: 0.2,
            learning_rate: 1e-3,
            l2_weight: 0.0,
            seed: 42,
            refine_scale: RefineScale::SqrtD,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::config("d, heads and layers must be positive"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if self.n < 2 {
            return Err(Error::config(format!("n = {} must be at least 2", self.n)));
        }
        if !self.mechanism.supports(self.backbone) {
            return Err(Error::config(
                "mechanism `stoc` requires the stochastic backbone",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return Err(Error::config("l2_weight must be non-negative"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }

    /// Number of refinement parameters this configuration adds.
    pub fn refinement_parameter_count(&self) -> usize {
        self.layers * self.heads * self.mechanism.matrices().len() * self.n * self.n
    }
}

/// Ranking candidates used during evaluation.
///
/// Written as `full` or `sampled:K` in configuration files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RankingMode {
    /// Every item the user has not interacted with, plus the target.
    #[default]
    Full,
    /// The target plus this many uniformly drawn negatives.
    Sampled(usize),
}

impl std::fmt::Display for RankingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RankingMode::Full => f.write_str("full"),
            RankingMode::Sampled(k) => write!(f, "sampled:{k}"),
        }
    }
}

impl std::str::FromStr for RankingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(RankingMode::Full);
        }
        s.strip_prefix("sampled:")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k > 0)
            .map(RankingMode::Sampled)
            .ok_or_else(|| Error::config(format!("ranking mode `{s}`: expected `full` or `sampled:K`")))
    }
}

impl TryFrom<String> for RankingMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RankingMode> for String {
    fn from(m: RankingMode) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub num_negatives: usize,
    pub max_epochs: usize,
    /// Epochs without strict improvement of validation NDCG@5 before stopping.
    pub patience: usize,
    pub valid_mode: RankingMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            num_negatives: 1,
            max_epochs: 200,
            patience: 20,
            valid_mode: RankingMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.num_negatives == 0 || self.max_epochs == 0 {
            return Err(Error::config(
                "batch_size, num_negatives and max_epochs must be positive",
            ));
        }
        if matches!(self.valid_mode, RankingMode::Sampled(0)) {
            return Err(Error::config("sampled ranking needs at least one negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn invariants_are_enforced() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            matches!(c.validate(), Err(Error::Config(_)))
        };
        assert!(bad(|c| c.heads = 3));
        assert!(bad(|c| c.n = 1));
        assert!(bad(|c| c.mechanism = Mechanism::Stoc));
        assert!(bad(|c| c.dropout = 1.0));
        let mut ok = ModelConfig::default();
        ok.backbone = Backbone::Stochastic;
        ok.mechanism = Mechanism::Stoc;
        ok.validate().unwrap();
    }

    #[test]
    fn parameter_counts() {
        let mut c = ModelConfig {
            n: 20,
            layers: 1,
            heads: 1,
            mechanism: Mechanism::Simp,
            ..ModelConfig::default()
        };
        assert_eq!(c.refinement_parameter_count(), 800);
        c.mechanism = Mechanism::None;
        assert_eq!(c.refinement_parameter_count(), 0);
        c.mechanism = Mechanism::Value;
        c.layers = 2;
        c.heads = 2;
        assert_eq!(c.refinement_parameter_count(), 4800);
    }

    #[test]
    fn ranking_mode_parses() {
        assert_eq!("full".parse::<RankingMode>().unwrap(), RankingMode::Full);
        assert_eq!(
            "sampled:100".parse::<RankingMode>().unwrap(),
            RankingMode::Sampled(100)
        );
        assert!("sampled:0".parse::<RankingMode>().is_err());
        assert!("top".parse::<RankingMode>().is_err());
        assert_eq!(RankingMode::Sampled(7).to_string(), "sampled:7");
        let json = serde_json::to_string(&RankingMode::Sampled(7)).unwrap();
        assert_eq!(json, "\"sampled:7\"");
        assert_eq!(serde_json::from_str::<RankingMode>(&json).unwrap(), RankingMode::Sampled(7));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"dd": 3}"#);
        assert!(err.is_err());
        let c: ModelConfig = serde_json::from_str(r#"{"mechanism": "simp"}"#).unwrap();
        assert_eq!(c.mechanism, Mechanism::Simp);
        assert_eq!(c.d, 64);
    }
}
