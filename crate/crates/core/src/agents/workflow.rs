use std::fmt;

use super::caa::{run_caa, Assessment};
use super::spa::{run_spa, Plan, SpaOutcome, SpaPolicy};
use super::taa::{run_taa, Responder, StructuredTask, TaaOutcome};
use super::tools::{ModelRegistry, SimilarityScorer, TokenF1, ToolRegistry, DEFAULT_BLUR_THRESHOLD};
use super::trace::ReActTrace;
use super::{AgentError, ChatBackend, Result};

pub struct WorkflowConfig {
    /// Maximum plan/assess rounds.
    pub c_max: usize,
    /// Maximum clarification questions.
    pub clarification_budget: usize,
    pub spa_policy: SpaPolicy,
    /// Horizon written into commands when the dataset does not state one.
    pub horizon: usize,
    pub tools: ToolRegistry,
    pub registry: ModelRegistry,
    pub scorer: Box<dyn SimilarityScorer>,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            c_max: 5,
            clarification_budget: 5,
            spa_policy: SpaPolicy::fixed(2),
            horizon: 5,
            tools: ToolRegistry::standard(DEFAULT_BLUR_THRESHOLD),
            registry: ModelRegistry::standard("models"),
            scorer: Box::new(TokenF1),
        }
    }
}

impl fmt::Debug for WorkflowConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WorkflowConfig")
            .field("c_max", &self.c_max)
            .field("clarification_budget", &self.clarification_budget)
            .field("spa_policy", &self.spa_policy)
            .field("horizon", &self.horizon)
            .field("tools", &self.tools)
            .field("registry_entries", &self.registry.entries.len())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct WorkflowOutcome {
    pub task: StructuredTask,
    pub plan: Plan,
    pub assessment: Assessment,
    /// Plan/assess rounds run.
    pub iterations: usize,
    pub taa: TaaOutcome,
    pub spa: Vec<SpaOutcome>,
    pub caa: Vec<ReActTrace>,
}

impl WorkflowOutcome {
    pub fn resolved(&self) -> bool {
        self.assessment.is_resolved()
    }

    /// Every trace in execution order.
    pub fn traces(&self) -> Vec<&ReActTrace> {
        let mut out = vec![&self.taa.trace];
        for (s, c) in self.spa.iter().zip(&self.caa) {
            out.push(&s.trace);
            out.push(c);
        }
        out
    }
}

/// Task analysis, then plan/assess rounds until the plan is accepted or
/// `cfg.c_max` rounds have run. Each round's feedback is handed to the next
/// planning round.
pub fn run_workflow(
    backend: &mut dyn ChatBackend,
    requirement: &str,
    responder: &mut dyn Responder,
    cfg: &WorkflowConfig,
) -> Result<WorkflowOutcome> {
    if cfg.c_max == 0 {
        return Err(AgentError::InvalidSettings("C_max must be at least 1".into()));
    }
    cfg.spa_policy.validate()?;
    let taa = run_taa(backend, requirement, responder, cfg.clarification_budget)?;
    if taa.exhausted {
        log::warn!("planning with incomplete task; missing {:?}", taa.task.missing_fields);
    }
    let task = taa.task.clone();
    let mut spa = Vec::new();
    let mut caa = Vec::new();
    let mut feedback: Option<String> = None;
    let mut last = None;
    for c in 1..=cfg.c_max {
        let s = run_spa(backend, &task, feedback.as_deref(), cfg)?;
        let (a, trace) = run_caa(backend, &s.plan, &task, cfg)?;
        log::info!("validation round {c}: {:?} {}", a.status, a.feedback);
        let done = a.is_resolved();
        feedback = Some(a.feedback.clone());
        last = Some((s.plan.clone(), a));
        spa.push(s);
        caa.push(trace);
        if done {
            break;
        }
    }
    let (plan, assessment) = last.expect("c_max >= 1");
    Ok(WorkflowOutcome {
        task,
        plan,
        assessment,
        iterations: spa.len(),
        taa,
        spa,
        caa,
    })
}
