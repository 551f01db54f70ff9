use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Schema;
use crate::error::{Error, Result};

/// Catalog knowledge: which make and body type every model belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    entries: BTreeMap<usize, (usize, usize)>,
}

impl KnowledgeBase {
    /// The table induced by the schema's model bijection.
    pub fn from_catalog(schema: &Schema) -> Self {
        let entries = (0..schema.models())
            .map(|m| {
                let (make, body_type, _) = schema.decode_model(m);
                (m, (make, body_type))
            })
            .collect();
        Self { entries }
    }

    pub fn from_entries(entries: BTreeMap<usize, (usize, usize)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyKnowledgeBase);
        }
        Ok(Self { entries })
    }

    /// `(make, type)` of a model.
    pub fn lookup(&self, model: usize) -> Option<(usize, usize)> {
        self.entries.get(&model).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn models(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    /// Models consistent with a `(make, type)` pair, ascending.
    pub fn consistent_models(&self, make: usize, body_type: usize) -> Vec<usize> {
        self.entries.iter().filter(|(_, &v)| v == (make, body_type)).map(|(&m, _)| m).collect()
    }

    /// Models of one make, ascending.
    pub fn models_of_make(&self, make: usize) -> Vec<usize> {
        self.entries.iter().filter(|(_, &(mk, _))| mk == make).map(|(&m, _)| m).collect()
    }
}
