//! Requirement-to-plan agents.
//!
//! Three roles share one chat backend: the task analysis agent turns a
//! manager's free-text requirement into a [`StructuredTask`] (asking for
//! missing details), the solution planning agent runs a think/act/observe
//! loop with tools to produce a [`Plan`], and the completeness assessment
//! agent checks the plan against the task and emits a [`Command`] for the
//! predictor. [`run_workflow`] wires them together with a bounded
//! plan/assess loop.
//!
//! Agents ask for JSON replies; [`extract_json`] pulls the first balanced
//! object out of whatever prose surrounds it.

mod backend;
mod caa;
mod json;
mod spa;
mod suite;
mod taa;
mod tools;
mod trace;
mod workflow;

pub use backend::{BackendConfig, BackendKind, ChatBackend, HttpChat, MockBackend, MockScript, API_KEY_ENV, LLM_URL_ENV};
pub use caa::{check_plan, run_caa, Assessment, Status};
pub use json::{extract_json, validate_command, validate_task_reply, Command, COMMAND_VERSION};
pub use spa::{rule_mode, run_spa, Plan, SpaOutcome, SpaPolicy, StopRule};
pub use suite::{load_suite, FixtureCase, FIXTURE_SUITE_LEN};
pub use taa::{run_taa, DataFormat, KeyField, KeyValues, Responder, ScriptedResponder, StructuredTask, TaaOutcome};
pub use tools::{
    assess_blurriness, box_blur3, semantic_similarity, tier_for_accuracy, BlurReport, BlurrinessTool, ModelRegistry,
    ModelSpec, RegistryEntry, RetrievalStub, SimilarityScorer, TokenF1, Tool, ToolFinding, ToolRegistry,
    DEFAULT_BLUR_THRESHOLD,
};
pub use trace::{Action, ReActStep, ReActTrace};
pub use workflow::{run_workflow, WorkflowConfig, WorkflowOutcome};

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("requirement is empty")]
    EmptyRequirement,
    #[error("text is empty")]
    EmptyText,
    #[error("frame has no interior pixels")]
    EmptyFrame,
    #[error("invalid backend config: {0}")]
    InvalidBackend(String),
    #[error("invalid agent settings: {0}")]
    InvalidSettings(String),
    #[error("request to {endpoint} timed out after {seconds}s")]
    Timeout { endpoint: String, seconds: f64 },
    #[error("chat endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("chat request failed: {0}")]
    Transport(String),
    #[error("unexpected chat response: {0}")]
    BadResponse(String),
    #[error("mock script has no reply {step} for {role}")]
    ScriptExhausted { role: AgentRole, step: usize },
    #[error("{role} reply is malformed: {reason}")]
    MalformedReply { role: AgentRole, reason: String },
    #[error("{path}: {reason}")]
    BadFile { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AgentError>;

/// The three agent roles; mock scripts are keyed by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Taa,
    Spa,
    Caa,
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentRole::Taa => "taa",
            AgentRole::Spa => "spa",
            AgentRole::Caa => "caa",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: ChatRole,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

/// Versioned system prompts, one per role.
pub mod prompts {
    pub const TAA: &str = include_str!("../../prompts/taa.txt");
    pub const SPA: &str = include_str!("../../prompts/spa.txt");
    pub const CAA: &str = include_str!("../../prompts/caa.txt");
}
