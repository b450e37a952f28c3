use std::fmt;
use std::str::FromStr;

use crate::context::infer::DEFAULT_EMA_LAMBDA;
use crate::error::{Error, Result};

/// Number of sampled patches appended in the in-context baseline.
pub const DEFAULT_CONTEXT_PATCHES: usize = 256;

/// Names accepted by [`ContextKind::from_str`].
pub const KIND_NAMES: &[&str] = &[
    "none",
    "mean",
    "mean_linear",
    "mean_linear_detach",
    "layerwise_mean_linear_detach",
    "deep_sets",
    "deep_sets_detach",
    "oracle",
    "ema",
    "in_context_patches",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Inference {
    None,
    /// Append `k` patch tokens sampled from the group's members.
    InContextPatches { k: usize },
    /// One trainable token per training group.
    Oracle,
    Mean,
    MeanLinear { detach: bool },
    DeepSets { detach: bool },
    /// Exponential moving average of batch means, then the linear head.
    Ema { lambda: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextKind {
    pub inference: Inference,
    /// Re-infer the token from every layer's hidden patch tokens.
    pub layerwise: bool,
}

impl ContextKind {
    pub fn new(inference: Inference, layerwise: bool) -> Result<Self> {
        let kind = Self {
            inference,
            layerwise,
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn none() -> Self {
        Self {
            inference: Inference::None,
            layerwise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layerwise && !self.is_pooled() {
            return Err(Error::Config(format!(
                "layerwise conditioning needs a mean or deep-sets kind, not {self}"
            )));
        }
        match self.inference {
            Inference::Ema { lambda } if !(lambda > 0.0 && lambda < 1.0) => Err(Error::Config(
                format!("ema lambda must lie in (0, 1), got {lambda}"),
            )),
            Inference::InContextPatches { k: 0 } => {
                Err(Error::Config("in-context patch count must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Kinds that infer the token from the batch (and so handle unseen groups).
    pub fn is_amortized(&self) -> bool {
        !matches!(self.inference, Inference::None | Inference::Oracle)
    }

    /// Kinds that pool patch tokens into a single context token per layer.
    pub fn is_pooled(&self) -> bool {
        matches!(
            self.inference,
            Inference::Mean | Inference::MeanLinear { .. } | Inference::DeepSets { .. }
        )
    }

    pub fn has_context_slot(&self) -> bool {
        !matches!(
            self.inference,
            Inference::None | Inference::InContextPatches { .. }
        )
    }

    pub fn uses_linear_heads(&self) -> bool {
        matches!(
            self.inference,
            Inference::MeanLinear { .. } | Inference::Ema { .. }
        )
    }

    pub fn with_ema_lambda(mut self, lambda: f64) -> Self {
        if let Inference::Ema { .. } = self.inference {
            self.inference = Inference::Ema { lambda };
        }
        self
    }

    pub fn with_context_patches(mut self, k: usize) -> Self {
        if let Inference::InContextPatches { .. } = self.inference {
            self.inference = Inference::InContextPatches { k };
        }
        self
    }
}

impl fmt::Display for ContextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.inference {
            Inference::None => "none",
            Inference::InContextPatches { .. } => "in_context_patches",
            Inference::Oracle => "oracle",
            Inference::Mean => "mean",
            Inference::MeanLinear { detach: false } => "mean_linear",
            Inference::MeanLinear { detach: true } => "mean_linear_detach",
            Inference::DeepSets { detach: false } => "deep_sets",
            Inference::DeepSets { detach: true } => "deep_sets_detach",
            Inference::Ema { .. } => "ema",
        };
        if self.layerwise {
            write!(f, "layerwise_{base}")
        } else {
            f.write_str(base)
        }
    }
}

impl FromStr for ContextKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (layerwise, base) = match s.strip_prefix("layerwise_") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let inference = match base {
            "none" => Inference::None,
            "in_context_patches" => Inference::InContextPatches {
                k: DEFAULT_CONTEXT_PATCHES,
            },
            "oracle" => Inference::Oracle,
            "mean" => Inference::Mean,
            "mean_linear" => Inference::MeanLinear { detach: false },
            "mean_linear_detach" => Inference::MeanLinear { detach: true },
            "deep_sets" => Inference::DeepSets { detach: false },
            "deep_sets_detach" => Inference::DeepSets { detach: true },
            "ema" => Inference::Ema {
                lambda: DEFAULT_EMA_LAMBDA,
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown context kind {s:?}; expected one of {}",
                    KIND_NAMES.join(", ")
                )))
            }
        };
        Self::new(inference, layerwise)
    }
}
