//! Synthetic vehicle domain: color, body type, make emblem and trim variant
//! rendered into small RGB images, with per-dataset partial annotation.

mod dataset;
mod jpeg;
mod kb;
mod render;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use dataset::{
    generate_dataset, generate_datasets, load_dataset, save_dataset, DataRecord, Dataset, DatasetConfig,
    DomainStyle, GenerationConfig, Visibility,
};
pub use jpeg::{jpeg_roundtrip, psnr};
pub use kb::KnowledgeBase;
pub use render::{base_color, hue_of, render_vehicle, render_vehicle_with_info, PixelBox, RenderInfo, VehicleSpec, MAX_MAKES, MAX_TYPES, MAX_VARIANTS};

/// Cardinalities of every annotation kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub colors: usize,
    pub types: usize,
    pub makes: usize,
    pub variants: usize,
}

impl Default for Schema {
    fn default() -> Self {
        Self { colors: 6, types: 4, makes: 8, variants: 3 }
    }
}

impl Schema {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("colors", self.colors, usize::MAX),
            ("types", self.types, MAX_TYPES),
            ("makes", self.makes, MAX_MAKES),
            ("variants", self.variants, MAX_VARIANTS),
        ];
        for (name, value, max) in checks {
            if value == 0 || value > max {
                return Err(Error::Config(format!("schema.{name} = {value} (supported: 1..={max})")));
            }
        }
        Ok(())
    }

    /// Number of model classes.
    pub fn models(&self) -> usize {
        self.makes * self.types * self.variants
    }

    pub fn cardinality(&self, kind: AnnotationKind) -> usize {
        match kind {
            AnnotationKind::Color => self.colors,
            AnnotationKind::Type => self.types,
            AnnotationKind::Make => self.makes,
            AnnotationKind::Model => self.models(),
        }
    }

    /// The catalog bijection `(make, type, variant) → model`.
    pub fn model_id(&self, make: usize, body_type: usize, variant: usize) -> usize {
        (make * self.types + body_type) * self.variants + variant
    }

    /// Inverse of [`Schema::model_id`]: `(make, type, variant)`.
    pub fn decode_model(&self, model: usize) -> (usize, usize, usize) {
        let variant = model % self.variants;
        let rest = model / self.variants;
        (rest / self.types, rest % self.types, variant)
    }
}

/// Annotation kinds carried by a record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    Color,
    Type,
    Make,
    Model,
}

impl AnnotationKind {
    pub const ALL: [AnnotationKind; 4] = [Self::Color, Self::Type, Self::Make, Self::Model];
    /// The kinds predicted by dedicated branches, in fixed branch order.
    pub const INTERPRETABLE: [AnnotationKind; 3] = [Self::Color, Self::Type, Self::Make];

    pub fn name(self) -> &'static str {
        match self {
            Self::Color => "color",
            Self::Type => "type",
            Self::Make => "make",
            Self::Model => "model",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AnnotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnnotationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

/// Optional class index per annotation kind; `None` is a blank annotation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Labels([Option<usize>; 4]);

impl Labels {
    pub fn get(&self, kind: AnnotationKind) -> Option<usize> {
        self.0[kind.slot()]
    }

    pub fn set(&mut self, kind: AnnotationKind, value: Option<usize>) {
        self.0[kind.slot()] = value;
    }

    pub fn with(mut self, kind: AnnotationKind, value: Option<usize>) -> Self {
        self.set(kind, value);
        self
    }

    /// Fully populated labels for a rendered spec.
    pub fn of_spec(spec: &VehicleSpec, schema: &Schema) -> Self {
        Self([
            Some(spec.color),
            Some(spec.body_type),
            Some(spec.make),
            Some(schema.model_id(spec.make, spec.body_type, spec.variant)),
        ])
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        for kind in AnnotationKind::ALL {
            if let Some(v) = self.get(kind) {
                let limit = schema.cardinality(kind);
                if v >= limit {
                    return Err(Error::OutOfRange { what: kind.name(), id: v, limit });
                }
            }
        }
        Ok(())
    }
}

impl Serialize for Labels {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, Option<usize>> = AnnotationKind::ALL.iter().map(|k| (k.name(), self.get(*k))).collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Labels {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, Option<usize>>::deserialize(d)?;
        let mut labels = Labels::default();
        for (name, value) in map {
            let kind = name.parse::<AnnotationKind>().map_err(serde::de::Error::custom)?;
            labels.set(kind, value);
        }
        Ok(labels)
    }
}
