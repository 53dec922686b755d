//! JSON checkpoints of a performer, its concept bank and optionally a
//! trained explainer. Floats are written in shortest round-trip form and
//! parsed exactly, so a reload reproduces outputs bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ExplainError, Result};
use crate::models::{CaseTag, ConceptBank, ExplainerModel, PerformerModel};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub mode: CaseTag,
    pub performer: PerformerModel,
    pub concepts: ConceptBank,
    pub explainer: Option<ExplainerModel>,
    pub rng_seed: u64,
}

impl Checkpoint {
    pub fn new(
        performer: PerformerModel,
        concepts: ConceptBank,
        explainer: Option<ExplainerModel>,
        rng_seed: u64,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            mode: concepts.mode(),
            performer,
            concepts,
            explainer,
            rng_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        self.concepts.validate()?;
        if self.concepts.mode() != self.mode {
            return Err(ExplainError::ModeMismatch(format!(
                "checkpoint mode {} but concept bank is {}",
                self.mode,
                self.concepts.mode()
            )));
        }
        if let Some(e) = &self.explainer {
            if e.n_concepts() != self.concepts.len() {
                return Err(ExplainError::LengthMismatch {
                    what: "explainer outputs vs concepts",
                    expected: self.concepts.len(),
                    got: e.n_concepts(),
                });
            }
        }
        Ok(())
    }
}

pub fn save_model(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(checkpoint).map_err(|e| ExplainError::json(path, e))?;
    std::fs::write(path, text).map_err(|e| ExplainError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| ExplainError::io(path, e))?;
    parse_checkpoint(&text).map_err(|e| match e {
        ExplainError::Json { source, .. } => ExplainError::json(path, source),
        other => other,
    })
}

/// Parses checkpoint text, checking the format version before the body.
pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ExplainError::json("<checkpoint>", e))?;
    let version = value
        .get("format_version")
        .ok_or_else(|| ExplainError::Config("checkpoint is missing field `format_version`".into()))?
        .as_u64()
        .ok_or_else(|| ExplainError::Config("`format_version` must be an integer".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(ExplainError::Version {
            found: version.try_into().unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let ckpt: Checkpoint =
        serde_json::from_value(value).map_err(|e| ExplainError::json("<checkpoint>", e))?;
    ckpt.validate()?;
    Ok(ckpt)
}
