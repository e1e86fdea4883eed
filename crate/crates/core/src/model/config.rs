use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the rate bound the prior models: entropy coding of the codes alone, or
/// Slepian-Wolf coding with the decoder's side information.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Marginal,
    Conditional,
}

impl PriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::Marginal => "marginal",
            PriorKind::Conditional => "conditional",
        }
    }

    pub fn other(self) -> Self {
        match self {
            PriorKind::Marginal => PriorKind::Conditional,
            PriorKind::Conditional => PriorKind::Marginal,
        }
    }
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal" => Ok(PriorKind::Marginal),
            "conditional" => Ok(PriorKind::Conditional),
            other => Err(Error::config(
                "prior_kind",
                format!("expected `marginal` or `conditional`, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of refinement stages `K`.
    pub stages: usize,
    /// Alphabet size `M` of every stage.
    pub alphabet: usize,
    /// Stacked RNN depth.
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Units per RNN layer.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    pub prior_kind: PriorKind,
}

fn default_layers() -> usize {
    2
}

fn default_hidden() -> usize {
    100
}

fn default_slope() -> f64 {
    0.01
}

impl ModelConfig {
    pub fn new(stages: usize, alphabet: usize, prior_kind: PriorKind) -> Self {
        Self {
            stages,
            alphabet,
            layers: default_layers(),
            hidden: default_hidden(),
            leaky_slope: default_slope(),
            prior_kind,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(Error::config("stages", "must be at least 1"));
        }
        if self.alphabet < 2 {
            return Err(Error::config("alphabet", "must be at least 2"));
        }
        if self.layers < 1 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if self.hidden < 1 {
            return Err(Error::config("hidden", "must be at least 1"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// `K log2 M`, the rate of sending every code uncompressed.
    pub fn max_total_rate(&self) -> f64 {
        self.stages as f64 * (self.alphabet as f64).log2()
    }
}
