use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::json::extract_json;
use super::taa::{DataFormat, StructuredTask};
use super::tools::{tier_for_accuracy, BlurrinessTool, ModelSpec, ToolFinding};
use super::trace::{Action, ReActStep, ReActTrace};
use super::workflow::WorkflowConfig;
use super::{prompts, AgentError, AgentRole, ChatBackend, Message, Result};
use crate::predictor::Mode;

/// Accuracy assumed when the task gives none.
const DEFAULT_ACCURACY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Exactly this many iterations.
    Fixed(usize),
    /// Stop once a draft's similarity to the reference reaches this value.
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaPolicy {
    pub stop: StopRule,
    /// Reference answer; required by `Threshold`, optional otherwise (drafts
    /// are then scored for reporting only).
    pub reference: Option<String>,
    /// Hard cap on iterations under `Threshold`.
    pub max_iterations: usize,
}

impl SpaPolicy {
    pub fn fixed(k: usize) -> Self {
        Self {
            stop: StopRule::Fixed(k),
            reference: None,
            max_iterations: k,
        }
    }

    pub fn threshold(s: f64, reference: impl Into<String>) -> Self {
        Self {
            stop: StopRule::Threshold(s),
            reference: Some(reference.into()),
            max_iterations: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AgentError::InvalidSettings(m));
        match self.stop {
            StopRule::Fixed(0) => bad("fixed iteration count must be at least 1".into()),
            StopRule::Threshold(s) if !(0.0..=1.0).contains(&s) => bad(format!("threshold {s} outside [0, 1]")),
            StopRule::Threshold(_) if self.reference.as_deref().is_none_or(|r| r.trim().is_empty()) => {
                bad("threshold policy needs a reference answer".into())
            }
            StopRule::Threshold(_) if self.max_iterations == 0 => bad("iteration cap must be at least 1".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub mode: Mode,
    pub model_config: ModelSpec,
    pub checkpoint: String,
    pub tool_findings: Vec<ToolFinding>,
    pub rationale: String,
}

#[derive(Debug, Clone)]
pub struct SpaOutcome {
    pub plan: Plan,
    pub trace: ReActTrace,
    /// `(iteration, similarity)` for every scored draft.
    pub similarity: Vec<(usize, f64)>,
    /// No usable draft was produced; the plan was derived from rules.
    pub degraded: bool,
}

/// The mode the data supports: hybrid data falls back to numeric input when
/// any blurriness finding flags the frames.
pub fn rule_mode(format: Option<DataFormat>, findings: &[ToolFinding]) -> Option<Mode> {
    let format = format?;
    if format == DataFormat::Hybrid && findings.iter().any(|f| f.blurry() == Some(true)) {
        return Some(Mode::Numeric);
    }
    Some(format.mode())
}

fn tier(task: &StructuredTask) -> ModelSpec {
    tier_for_accuracy(task.values.accuracy_requirement.unwrap_or(DEFAULT_ACCURACY)).1
}

struct Planner<'a> {
    task: &'a StructuredTask,
    cfg: &'a WorkflowConfig,
    findings: Vec<ToolFinding>,
    draft: Option<Plan>,
    similarity: Vec<(usize, f64)>,
}

impl Planner<'_> {
    fn registry_checkpoint(&self, mode: Mode, model: &ModelSpec) -> Option<String> {
        self.cfg.registry.lookup(mode, model).map(|e| e.checkpoint.clone())
    }

    fn call_tool(&mut self, input: &Value) -> String {
        let name = input.get("tool").and_then(Value::as_str).unwrap_or_default();
        let arg = match input.get("input").and_then(Value::as_str) {
            Some(a) => a.to_string(),
            None if name == BlurrinessTool::NAME => self.task.values.data_location.clone().unwrap_or_default(),
            None => String::new(),
        };
        let finding = self.cfg.tools.call(name, &arg);
        let obs = format!("{} -> {}", finding.tool, finding.result);
        self.findings.push(finding);
        obs
    }

    fn lookup(&self, input: &Value) -> String {
        let mode = input
            .get("mode")
            .and_then(Value::as_str)
            .and_then(|m| m.parse().ok())
            .or(self.draft.as_ref().map(|d| d.mode))
            .or_else(|| rule_mode(self.task.values.data_format, &self.findings))
            .unwrap_or(Mode::Multi);
        let model = tier(self.task);
        match self.cfg.registry.lookup(mode, &model) {
            Some(e) => format!("registered model {} at {}", e.name, e.checkpoint),
            None => format!("no registered {mode} model with {model:?}"),
        }
    }

    /// Records a draft; returns the observation and the draft's similarity.
    fn draft(&mut self, input: &Value, iteration: usize) -> (String, Option<f64>) {
        let mode = match input.get("mode").and_then(Value::as_str).map(str::parse::<Mode>) {
            Some(Ok(m)) => m,
            Some(Err(e)) => return (format!("draft rejected: {e}"), None),
            None => return ("draft rejected: no mode".into(), None),
        };
        let model = match input.get("model") {
            Some(m) => match serde_json::from_value::<ModelSpec>(m.clone()) {
                Ok(m) => m,
                Err(e) => return (format!("draft rejected: model: {e}"), None),
            },
            None => tier(self.task),
        };
        let checkpoint = input
            .get("checkpoint")
            .and_then(Value::as_str)
            .map(str::to_string)
            .or_else(|| self.registry_checkpoint(mode, &model))
            .unwrap_or_default();
        let rationale = input.get("rationale").and_then(Value::as_str).unwrap_or_default().to_string();
        let sim = self
            .cfg
            .spa_policy
            .reference
            .as_deref()
            .map(|r| self.cfg.scorer.score(&rationale, r).unwrap_or(0.0));
        let mut obs = format!(
            "draft {iteration} recorded: mode {mode}, blocks {}/{}, heads {}, decoder {}, checkpoint {:?}",
            model.numeric_blocks, model.image_blocks, model.attn_heads, model.decoder_layers, checkpoint
        );
        if let Some(s) = sim {
            obs.push_str(&format!("; similarity to reference {s:.3}"));
            self.similarity.push((iteration, s));
        }
        self.draft = Some(Plan {
            mode,
            model_config: model,
            checkpoint,
            tool_findings: Vec::new(),
            rationale,
        });
        (obs, sim)
    }
}

/// Think/act/observe planning. Actions: `call_tool`, `lookup_registry`,
/// `draft_plan`, `finalize`. The loop length is governed by
/// `cfg.spa_policy`; the blurriness rule is enforced on the final plan.
pub fn run_spa(
    backend: &mut dyn ChatBackend,
    task: &StructuredTask,
    feedback: Option<&str>,
    cfg: &WorkflowConfig,
) -> Result<SpaOutcome> {
    let policy = &cfg.spa_policy;
    policy.validate()?;
    let task_json = serde_json::to_string_pretty(task).expect("task serializes");
    let stop = match policy.stop {
        StopRule::Fixed(k) => format!("Run exactly {k} iterations."),
        StopRule::Threshold(s) => format!("Iterate until your plan rationale reaches similarity {s} with the reference."),
    };
    let prompt = vec![
        Message::system(prompts::SPA),
        Message::user(format!(
            "Task:\n{task_json}\n\nAssessment feedback:\n{}\n\nTools:\n{}\n\n{stop}",
            feedback.filter(|f| !f.trim().is_empty()).unwrap_or("none"),
            cfg.tools.describe()
        )),
    ];
    let mut trace = ReActTrace::new(AgentRole::Spa, prompt);
    let mut p = Planner {
        task,
        cfg,
        findings: Vec::new(),
        draft: None,
        similarity: Vec::new(),
    };
    let cap = match policy.stop {
        StopRule::Fixed(k) => k,
        StopRule::Threshold(_) => policy.max_iterations,
    };
    for iteration in 1..=cap {
        let reply = backend.complete(AgentRole::Spa, &trace.context())?;
        let parsed = extract_json(&reply).and_then(|v| {
            let name = v.get("action")?.as_str()?.to_string();
            let thought = v.get("thought").and_then(Value::as_str).unwrap_or_default().to_string();
            Some((thought, name, v.get("input").cloned().unwrap_or(Value::Null)))
        });
        let Some((thought, name, input)) = parsed else {
            trace.push(ReActStep {
                reasoning: String::new(),
                action: Action::new("invalid", Value::Null),
                observation: "could not parse a {\"thought\", \"action\", \"input\"} object; try again".into(),
            });
            continue;
        };
        let mut sim = None;
        let observation = match name.as_str() {
            "call_tool" => p.call_tool(&input),
            "lookup_registry" => p.lookup(&input),
            "draft_plan" => {
                let (o, s) = p.draft(&input, iteration);
                sim = s;
                o
            }
            "finalize" => {
                let mut o = if input.get("mode").is_some() {
                    let (o, s) = p.draft(&input, iteration);
                    sim = s;
                    o
                } else {
                    "finalize requested".to_string()
                };
                if iteration < cap && matches!(policy.stop, StopRule::Fixed(_)) {
                    o.push_str("; iterations remain, keep refining");
                }
                o
            }
            other => format!("unknown action {other:?}"),
        };
        trace.push(ReActStep {
            reasoning: thought,
            action: Action::new(&name, input),
            observation,
        });
        if let (StopRule::Threshold(s), Some(v)) = (policy.stop, sim) {
            if v >= s {
                break;
            }
        }
    }

    let degraded = p.draft.is_none();
    let mut plan = p.draft.take().unwrap_or_else(|| {
        let mode = rule_mode(task.values.data_format, &p.findings).unwrap_or(Mode::Multi);
        let model = tier(task);
        Plan {
            mode,
            checkpoint: p.registry_checkpoint(mode, &model).unwrap_or_default(),
            model_config: model,
            tool_findings: Vec::new(),
            rationale: "rule-based plan: no draft was produced".into(),
        }
    });

    // Hybrid data must have its frames checked before the mode is final.
    if task.values.data_format == Some(DataFormat::Hybrid) && !p.findings.iter().any(|f| f.blurry().is_some()) {
        if let Some(loc) = task.values.data_location.clone() {
            p.findings.push(cfg.tools.call(BlurrinessTool::NAME, &loc));
        }
    }
    if rule_mode(task.values.data_format, &p.findings) == Some(Mode::Numeric) && plan.mode != Mode::Numeric {
        let from_registry = p.registry_checkpoint(plan.mode, &plan.model_config) == Some(plan.checkpoint.clone());
        plan.mode = Mode::Numeric;
        if from_registry {
            plan.checkpoint = p.registry_checkpoint(plan.mode, &plan.model_config).unwrap_or_default();
        }
        plan.rationale
            .push_str(" Frames are too blurry to use; numeric data is the sole model input.");
    }
    plan.tool_findings = p.findings;
    trace.finish(serde_json::to_string(&plan).expect("plan serializes"));
    Ok(SpaOutcome {
        plan,
        trace,
        similarity: p.similarity,
        degraded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{KeyValues, MockBackend, MockScript};
    use serde_json::json;

    fn task(format: DataFormat) -> StructuredTask {
        StructuredTask::new(
            "Predict beams".into(),
            KeyValues {
                num_uavs: Some(1),
                data_location: Some("/nonexistent/data".into()),
                data_format: Some(format),
                data_labels: Some("beam index".into()),
                accuracy_requirement: Some(0.9),
            },
        )
    }

    fn backend(replies: Vec<Value>) -> MockBackend {
        let mut script = MockScript::default();
        script.replies.insert(AgentRole::Spa, replies);
        MockBackend::new(script)
    }

    fn draft(mode: &str, rationale: &str) -> Value {
        json!({"thought": "draft", "action": "draft_plan", "input": {"mode": mode, "rationale": rationale}})
    }

    #[test]
    fn fixed_two_iterations() {
        let mut b = backend(vec![
            json!({"thought": "need a checkpoint", "action": "lookup_registry", "input": {"mode": "numeric"}}),
            draft("numeric", "numeric only"),
            draft("image", "never reached"),
        ]);
        let mut cfg = WorkflowConfig::default();
        cfg.spa_policy = SpaPolicy::fixed(2);
        let out = run_spa(&mut b, &task(DataFormat::Numeric), None, &cfg).unwrap();
        assert_eq!(out.trace.steps().len(), 2);
        assert!(out.trace.result().is_some());
        assert_eq!(out.plan.mode, Mode::Numeric);
        assert_eq!(out.plan.checkpoint, "models/numeric-medium");
        assert!(!out.degraded);
        assert_eq!(b.consumed(AgentRole::Spa), 2);
    }

    #[test]
    fn threshold_stops_when_reached() {
        let reference = "a b c d e f g h i j";
        let mut b = backend(vec![
            draft("numeric", "a b c d e f x y z w"),
            draft("numeric", "a b c d e f g x y z"),
            draft("numeric", "a b c d e f g h x y"),
            draft("numeric", "a b c d e f g h i j"),
        ]);
        let mut cfg = WorkflowConfig::default();
        cfg.spa_policy = SpaPolicy::threshold(0.75, reference);
        let out = run_spa(&mut b, &task(DataFormat::Numeric), None, &cfg).unwrap();
        assert_eq!(out.trace.steps().len(), 3);
        let sims: Vec<f64> = out.similarity.iter().map(|s| s.1).collect();
        assert_eq!(out.similarity.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3]);
        for (got, want) in sims.iter().zip([0.6, 0.7, 0.8]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn unparseable_steps_and_fallback() {
        let mut b = backend(vec![json!("hmm"), json!({"thought": "?", "action": "dance"})]);
        let mut cfg = WorkflowConfig::default();
        cfg.spa_policy = SpaPolicy::fixed(2);
        let out = run_spa(&mut b, &task(DataFormat::Image), Some("fix it"), &cfg).unwrap();
        assert!(out.degraded);
        assert_eq!(out.plan.mode, Mode::Image);
        assert_eq!(out.trace.steps()[0].action.name, "invalid");
        assert!(b.calls[0].1[1].content.contains("fix it"));
    }

    #[test]
    fn policy_validation() {
        assert!(SpaPolicy::fixed(0).validate().is_err());
        let mut p = SpaPolicy::threshold(0.75, "x");
        assert!(p.validate().is_ok());
        p.reference = None;
        assert!(p.validate().is_err());
        assert!(SpaPolicy::threshold(1.5, "x").validate().is_err());
    }

    #[test]
    fn rule_mode_table() {
        let blurry = ToolFinding {
            tool: "blurriness".into(),
            input: "x".into(),
            result: r#"{"score":3.0,"is_blurry":true}"#.into(),
            ok: true,
        };
        assert_eq!(rule_mode(Some(DataFormat::Hybrid), &[]), Some(Mode::Multi));
        assert_eq!(rule_mode(Some(DataFormat::Hybrid), &[blurry.clone()]), Some(Mode::Numeric));
        assert_eq!(rule_mode(Some(DataFormat::Image), &[blurry]), Some(Mode::Image));
        assert_eq!(rule_mode(None, &[]), None);
    }
}
