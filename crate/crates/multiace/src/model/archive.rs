//! Model archives: a versioned, self-describing JSON document holding the
//! specification, element table, normalization state and every weight
//! block with named shapes. Floating-point values survive the round trip
//! exactly (shortest-representation encoding).

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{MaceError, Result};
use crate::graph::ElementTable;
use crate::model::{Model, ModelArch, ModelSpec, NormalizationState, Params};

pub const ARCHIVE_FORMAT: &str = "multiace-model";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveDoc {
    format: String,
    version: u32,
    spec: ModelSpec,
    elements: ElementTable,
    normalization: NormalizationState,
    avg_neighbors: f64,
    params: Params,
}

pub fn to_json(model: &Model) -> Result<String> {
    let doc = ArchiveDoc {
        format: ARCHIVE_FORMAT.to_string(),
        version: ARCHIVE_VERSION,
        spec: model.arch.spec.clone(),
        elements: model.elements.clone(),
        normalization: model.norm.clone(),
        avg_neighbors: model.avg_neighbors,
        params: model.params.clone(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| MaceError::config(e.to_string()))
}

pub fn from_json(text: &str) -> Result<Model> {
    let doc: ArchiveDoc =
        serde_json::from_str(text).map_err(|e| MaceError::parse(0, e.to_string()))?;
    if doc.format != ARCHIVE_FORMAT {
        return Err(MaceError::data(format!(
            "not a model archive (format field '{}')",
            doc.format
        )));
    }
    if doc.version != ARCHIVE_VERSION {
        return Err(MaceError::data(format!(
            "unsupported archive version {} (supported: {})",
            doc.version, ARCHIVE_VERSION
        )));
    }
    let arch = Arc::new(ModelArch::new(doc.spec, &doc.elements)?);
    // validate congruence of the stored blocks with the architecture
    if doc.params.blocks.len() != arch.blocks.len() {
        return Err(MaceError::data(format!(
            "archive has {} parameter blocks, architecture expects {}",
            doc.params.blocks.len(),
            arch.blocks.len()
        )));
    }
    for (stored, expected) in doc.params.blocks.iter().zip(&arch.blocks) {
        if stored.name != expected.name || stored.values.len() != expected.len() {
            return Err(MaceError::data(format!(
                "parameter block mismatch: archive has '{}' ({} values), expected '{}' ({})",
                stored.name,
                stored.values.len(),
                expected.name,
                expected.len()
            )));
        }
    }
    Ok(Model {
        arch,
        elements: doc.elements,
        params: doc.params,
        norm: doc.normalization,
        avg_neighbors: doc.avg_neighbors,
    })
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    #[test]
    fn round_trip_preserves_everything() {
        let table = ElementTable::new(vec!["H".into(), "C".into()]).unwrap();
        let mut model = Model::new(ModelSpec::botnet(2, 3, 1, 4.5), table, 11).unwrap();
        model.avg_neighbors = 3.7;
        let json = to_json(&model).unwrap();
        let back = from_json(&json).unwrap();
        assert_eq!(model.params, back.params);
        assert_eq!(model.elements, back.elements);
        assert_eq!(model.norm, back.norm);
        assert_eq!(model.avg_neighbors, back.avg_neighbors);
        assert_eq!(model.arch.spec, back.arch.spec);
    }

    #[test]
    fn rejects_foreign_documents() {
        assert!(from_json("{\"format\": \"something-else\"}").is_err());
        assert!(from_json("not json at all").is_err());
    }
}
