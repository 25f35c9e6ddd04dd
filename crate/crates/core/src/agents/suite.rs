use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backend::MockScript;
use super::taa::KeyValues;
use super::{AgentError, Result};
use crate::predictor::Mode;

/// Cases in the shipped agent fixture suite.
pub const FIXTURE_SUITE_LEN: usize = 20;

/// One scripted requirement with its reference answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureCase {
    pub id: String,
    pub requirement: String,
    /// Manager answers to clarification questions, in order.
    #[serde(default)]
    pub answers: Vec<String>,
    /// Key fields the task analysis should end with.
    pub reference: KeyValues,
    /// Reference plan text for similarity scoring.
    pub reference_plan: String,
    pub expected_mode: Mode,
    pub expected_questions: usize,
    pub script: MockScript,
}

pub fn load_suite(path: &Path) -> Result<Vec<FixtureCase>> {
    let text = std::fs::read_to_string(path).map_err(|source| AgentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let cases: Vec<FixtureCase> = serde_json::from_str(&text).map_err(|e| AgentError::BadFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if cases.is_empty() {
        return Err(AgentError::BadFile {
            path: path.to_path_buf(),
            reason: "suite is empty".into(),
        });
    }
    Ok(cases)
}
