//! Synthetic corpus generation, sequence files, normalization and the seam
//! for external datasets.

pub mod io;
pub mod norm;
pub mod synthetic;

use std::path::Path;
use std::sync::OnceLock;

use crate::body::BodyProxy;
use crate::error::Result;
use crate::registry::Registry;
use crate::shape::ObjectShape;
use crate::types::HoiSequence;

/// An interaction sequence with the object's canonical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub seq: HoiSequence,
    pub shape: ObjectShape,
}

/// Converts an external recording layout into clips.
pub trait DatasetAdapter: Send + Sync {
    fn load(&self, root: &Path, body: &BodyProxy) -> Result<Vec<Clip>>;
}

/// Registered dataset adapters. None ship with the library.
pub fn dataset_adapters() -> &'static Registry<dyn DatasetAdapter> {
    static REGISTRY: OnceLock<Registry<dyn DatasetAdapter>> = OnceLock::new();
    REGISTRY.get_or_init(|| Registry::new("dataset adapter"))
}
