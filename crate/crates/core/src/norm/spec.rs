use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compression::{CompressionKind, CompressionParams};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[serde(alias = "layernorm")]
    LayerNorm,
    #[serde(alias = "rmsnorm")]
    RmsNorm,
    #[serde(alias = "batchnorm")]
    BatchNorm,
    #[serde(alias = "normalnorm")]
    NormalNorm,
    #[serde(alias = "ibnorm")]
    IbNorm,
}

/// Placement of compression relative to standardization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    #[default]
    CompressThenStandardize,
    StandardizeThenCompress,
}

/// Compression settings carried by an IBNorm spec; the group size is fixed
/// when the layer is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compression {
    pub kind: CompressionKind,
    pub lambda: f64,
}

impl Compression {
    pub fn params(&self, group_size: usize) -> Result<CompressionParams> {
        CompressionParams::new(self.kind, self.lambda, group_size)
    }
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_true() -> bool {
    true
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

/// Declarative description of a normalization layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSpec {
    pub kind: NormKind,
    #[serde(default)]
    pub compression: Option<Compression>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_true")]
    pub affine: bool,
    #[serde(default)]
    pub order: NormOrder,
    /// Additive noise factor (NormalNorm only).
    #[serde(default)]
    pub noise_factor: f64,
    /// Fixed power-transform exponent (NormalNorm only); estimated from the
    /// data when absent.
    #[serde(default)]
    pub power_lambda: Option<f64>,
    /// Running-statistics momentum (BatchNorm only).
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

impl NormSpec {
    fn base(kind: NormKind) -> Self {
        Self {
            kind,
            compression: None,
            epsilon: DEFAULT_EPSILON,
            affine: true,
            order: NormOrder::CompressThenStandardize,
            noise_factor: 0.0,
            power_lambda: None,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn layer_norm() -> Self {
        Self::base(NormKind::LayerNorm)
    }

    pub fn rms_norm() -> Self {
        Self::base(NormKind::RmsNorm)
    }

    pub fn batch_norm() -> Self {
        Self::base(NormKind::BatchNorm)
    }

    pub fn normal_norm(noise_factor: f64) -> Self {
        Self {
            noise_factor,
            ..Self::base(NormKind::NormalNorm)
        }
    }

    pub fn ib_norm(kind: CompressionKind, lambda: f64) -> Self {
        Self {
            compression: Some(Compression { kind, lambda }),
            ..Self::base(NormKind::IbNorm)
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_affine(mut self, affine: bool) -> Self {
        self.affine = affine;
        self
    }

    pub fn with_order(mut self, order: NormOrder) -> Self {
        self.order = order;
        self
    }

    pub fn with_power_lambda(mut self, lambda: Option<f64>) -> Self {
        self.power_lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        match (self.kind, &self.compression) {
            (NormKind::IbNorm, None) => {
                return Err(Error::Config("ibnorm requires compression settings".into()))
            }
            (NormKind::IbNorm, Some(c)) => {
                if !(c.lambda > 0.0) || !c.lambda.is_finite() {
                    return Err(Error::Config(format!("compression strength must be positive, got {}", c.lambda)));
                }
            }
            (other, Some(_)) => {
                return Err(Error::Config(format!("compression is only valid for ibnorm, not {other:?}")))
            }
            _ => {}
        }
        if self.order == NormOrder::StandardizeThenCompress && self.kind != NormKind::IbNorm {
            return Err(Error::Config("standardize-then-compress order requires ibnorm".into()));
        }
        if !(self.noise_factor >= 0.0) {
            return Err(Error::Config(format!("noise factor must be nonnegative, got {}", self.noise_factor)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1], got {}", self.momentum)));
        }
        if let Some(l) = self.power_lambda {
            if !l.is_finite() {
                return Err(Error::Config("fixed power exponent must be finite".into()));
            }
        }
        Ok(())
    }

    /// Short label such as `layernorm`, `ibnorm-l4`, `ibnorm-t4*`.
    pub fn label(&self) -> String {
        let mut s = match self.kind {
            NormKind::LayerNorm => "layernorm".to_string(),
            NormKind::RmsNorm => "rmsnorm".to_string(),
            NormKind::BatchNorm => "batchnorm".to_string(),
            NormKind::NormalNorm => "normalnorm".to_string(),
            NormKind::IbNorm => match self.compression {
                Some(c) => format!("ibnorm-{}{}", c.kind.to_string().to_lowercase(), c.lambda),
                None => "ibnorm".to_string(),
            },
        };
        if self.order == NormOrder::StandardizeThenCompress {
            s.push('*');
        }
        if !self.affine {
            s.push_str("**");
        }
        s
    }
}

impl fmt::Display for NormSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Parses a norm name as used on the command line: `layernorm`, `rmsnorm`,
/// `batchnorm`, `normalnorm`, `ibnorm-s`, `ibnorm-l`, `ibnorm-t`. IBNorm names
/// get `lambda = 4` until overridden.
impl FromStr for NormSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let spec = match lower.as_str() {
            "layernorm" | "layer_norm" | "ln" => Self::layer_norm(),
            "rmsnorm" | "rms_norm" | "rms" => Self::rms_norm(),
            "batchnorm" | "batch_norm" | "bn" => Self::batch_norm(),
            "normalnorm" | "normal_norm" => Self::normal_norm(0.0),
            other => match other.strip_prefix("ibnorm-").or_else(|| other.strip_prefix("ibnorm_")) {
                Some(kind) => Self::ib_norm(kind.parse()?, 4.0),
                None => return Err(Error::Config(format!("unknown normalization `{s}`"))),
            },
        };
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compression_iff_ibnorm() {
        assert!(NormSpec::ib_norm(CompressionKind::L, 4.0).validate().is_ok());
        let mut bad = NormSpec::layer_norm();
        bad.compression = Some(Compression {
            kind: CompressionKind::S,
            lambda: 2.0,
        });
        assert!(bad.validate().is_err());
        let mut missing = NormSpec::ib_norm(CompressionKind::S, 3.0);
        missing.compression = None;
        assert!(matches!(missing.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn star_order_only_for_ibnorm() {
        let s = NormSpec::layer_norm().with_order(NormOrder::StandardizeThenCompress);
        assert!(s.validate().is_err());
        let s = NormSpec::ib_norm(CompressionKind::T, 4.0).with_order(NormOrder::StandardizeThenCompress);
        assert!(s.validate().is_ok());
        assert_eq!(s.label(), "ibnorm-t4*");
    }

    #[test]
    fn epsilon_must_be_positive() {
        assert!(NormSpec::layer_norm().with_epsilon(0.0).validate().is_err());
    }

    #[test]
    fn parse_cli_names() {
        let s: NormSpec = "ibnorm-l".parse().unwrap();
        assert_eq!(s.compression.unwrap().kind, CompressionKind::L);
        assert_eq!("layernorm".parse::<NormSpec>().unwrap(), NormSpec::layer_norm());
        assert!("groupnorm".parse::<NormSpec>().is_err());
    }

    #[test]
    fn serde_defaults() {
        let s: NormSpec = serde_json::from_str(r#"{"kind":"ibnorm","compression":{"kind":"T","lambda":4.0}}"#).unwrap();
        assert_eq!(s, NormSpec::ib_norm(CompressionKind::T, 4.0));
    }
}
