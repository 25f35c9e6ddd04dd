use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AgentRole, Message};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub name: String,
    #[serde(default)]
    pub input: Value,
}

impl Action {
    pub fn new(name: &str, input: Value) -> Self {
        Self {
            name: name.to_string(),
            input,
        }
    }
}

/// One think/act/observe cycle: the reasoning and action chosen at step
/// `t`, and the observation that action produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReActStep {
    pub reasoning: String,
    pub action: Action,
    pub observation: String,
}

/// Append-only record of an agent run. The context the agent sees before
/// step `t` (1-based) is the prompt followed by every earlier step's
/// reasoning, action and observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReActTrace {
    role: AgentRole,
    prompt: Vec<Message>,
    steps: Vec<ReActStep>,
    result: Option<String>,
}

impl ReActTrace {
    pub fn new(role: AgentRole, prompt: Vec<Message>) -> Self {
        Self {
            role,
            prompt,
            steps: Vec::new(),
            result: None,
        }
    }

    pub fn role(&self) -> AgentRole {
        self.role
    }

    pub fn prompt(&self) -> &[Message] {
        &self.prompt
    }

    pub fn steps(&self) -> &[ReActStep] {
        &self.steps
    }

    pub fn result(&self) -> Option<&str> {
        self.result.as_deref()
    }

    pub fn push(&mut self, step: ReActStep) {
        self.steps.push(step);
    }

    pub fn finish(&mut self, result: String) {
        self.result = Some(result);
    }

    /// Context before step `t` (1-based); `t` is clamped to
    /// `1..=steps + 1`.
    pub fn history(&self, t: usize) -> Vec<Message> {
        let upto = t.clamp(1, self.steps.len() + 1) - 1;
        let mut out = self.prompt.clone();
        for s in &self.steps[..upto] {
            let turn = json!({"thought": s.reasoning, "action": s.action.name, "input": s.action.input});
            out.push(Message::assistant(turn.to_string()));
            out.push(Message::user(format!("Observation: {}", s.observation)));
        }
        out
    }

    /// Context for the next step.
    pub fn context(&self) -> Vec<Message> {
        self.history(self.steps.len() + 1)
    }
}
