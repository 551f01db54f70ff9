use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{AnnotationKind, Schema};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Shared block, gated branches, branch, harmonization and fused losses.
    #[default]
    CoLabel,
    /// CoLabel topology trained with the fused loss only.
    FusionOnly,
    /// One input block per branch instead of a shared one.
    MultiInput,
    /// CoLabel with the attention gates replaced by identities.
    NoAtt,
    /// One backbone feeding parallel color, type, make and model heads.
    #[serde(rename = "SMBL")]
    Smbl,
    /// CoLabel plus per-make model heads selected by the make branch.
    #[serde(alias = "2SC")]
    TwoStageCascade,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Self::CoLabel, Self::FusionOnly, Self::MultiInput, Self::NoAtt, Self::Smbl, Self::TwoStageCascade];

    pub fn name(self) -> &'static str {
        match self {
            Self::CoLabel => "CoLabel",
            Self::FusionOnly => "FusionOnly",
            Self::MultiInput => "MultiInput",
            Self::NoAtt => "NoAtt",
            Self::Smbl => "SMBL",
            Self::TwoStageCascade => "TwoStageCascade",
        }
    }

    pub fn has_attention(self) -> bool {
        self != Self::NoAtt
    }

    pub fn shared_block(self) -> bool {
        self != Self::MultiInput
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let alias = match lower.as_str() {
            "2sc" | "cascade" => Some(Self::TwoStageCascade),
            _ => None,
        };
        alias
            .or_else(|| Self::ALL.into_iter().find(|v| v.name().to_ascii_lowercase() == lower))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Branch kinds in fusion concatenation order.
    pub branches: Vec<AnnotationKind>,
    pub shared_width: usize,
    pub branch_widths: [usize; 2],
    pub feature_dim: usize,
    /// Channel reduction inside attention gates.
    pub reduction: usize,
    pub variant: Variant,
    pub image_size: usize,
    pub schema: Schema,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            branches: AnnotationKind::INTERPRETABLE.to_vec(),
            shared_width: 16,
            branch_widths: [32, 64],
            feature_dim: 64,
            reduction: 4,
            variant: Variant::CoLabel,
            image_size: 32,
            schema: Schema::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.branches.is_empty() {
            return Err(Error::Config("model needs at least one branch".into()));
        }
        if self.branches.contains(&AnnotationKind::Model) {
            return Err(Error::Config("the model class is predicted by the fusion head, not a branch".into()));
        }
        let mut seen = self.branches.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.branches.len() {
            return Err(Error::Config("duplicate branch kinds".into()));
        }
        if !self.image_size.is_multiple_of(4) || self.image_size < 8 {
            return Err(Error::Config(format!("image size {} must be a multiple of 4, at least 8", self.image_size)));
        }
        if [self.shared_width, self.branch_widths[0], self.branch_widths[1], self.feature_dim, self.reduction].contains(&0) {
            return Err(Error::Config("widths, feature dim and reduction must be positive".into()));
        }
        Ok(())
    }

    /// Number of classes of the head for `kind`.
    pub fn classes(&self, kind: AnnotationKind) -> usize {
        self.schema.cardinality(kind)
    }

    /// Width of the fused feature `x_F`.
    pub fn fusion_dim(&self) -> usize {
        if self.variant == Variant::Smbl {
            self.feature_dim
        } else {
            self.branches.len() * self.feature_dim
        }
    }
}
