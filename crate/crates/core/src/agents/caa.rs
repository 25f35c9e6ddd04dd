use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::json::{extract_json, Command, COMMAND_VERSION};
use super::spa::{rule_mode, Plan};
use super::taa::StructuredTask;
use super::tools::tier_for_accuracy;
use super::trace::{Action, ReActStep, ReActTrace};
use super::workflow::WorkflowConfig;
use super::{prompts, AgentRole, ChatBackend, Message, Result};
use crate::scenario::DatasetMeta;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Resolved,
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub status: Status,
    pub feedback: String,
    /// Present exactly when resolved.
    pub command: Option<Command>,
}

impl Assessment {
    pub fn is_resolved(&self) -> bool {
        self.status == Status::Resolved
    }
}

/// Every way `plan` fails to cover `task`; empty when it covers all of it.
pub fn check_plan(plan: &Plan, task: &StructuredTask) -> Vec<String> {
    let mut issues: Vec<String> = task
        .missing_fields
        .iter()
        .map(|k| format!("task is missing the {}", k.label()))
        .collect();
    if let Some(format) = task.values.data_format {
        let expected = rule_mode(Some(format), &plan.tool_findings).expect("format is set");
        if plan.mode != expected {
            let fmt = serde_json::to_value(format).expect("format serializes");
            issues.push(format!(
                "mode mismatch: plan uses {} but {} data calls for {expected}",
                plan.mode,
                fmt.as_str().unwrap_or_default()
            ));
        }
    }
    if let Some(acc) = task.values.accuracy_requirement {
        let (tier, spec) = tier_for_accuracy(acc);
        if plan.model_config != spec {
            issues.push(format!("model config does not match the {tier} tier required for accuracy {acc}"));
        }
    }
    if let Err(e) = plan.model_config.validate() {
        issues.push(e);
    }
    if plan.checkpoint.trim().is_empty() {
        issues.push("plan names no checkpoint".into());
    }
    issues
}

/// Horizon recorded in a dataset directory's `meta.json`, if readable.
fn dataset_horizon(location: &str) -> Option<usize> {
    let text = std::fs::read_to_string(Path::new(location).join("meta.json")).ok()?;
    serde_json::from_str::<DatasetMeta>(&text).ok().map(|m| m.horizon)
}

/// Checks `plan` against `task`. The backend's verdict can reject a plan
/// the rubric accepts, never the reverse.
pub fn run_caa(
    backend: &mut dyn ChatBackend,
    plan: &Plan,
    task: &StructuredTask,
    cfg: &WorkflowConfig,
) -> Result<(Assessment, ReActTrace)> {
    let prompt = vec![
        Message::system(prompts::CAA),
        Message::user(format!(
            "Task:\n{}\n\nPlan:\n{}",
            serde_json::to_string_pretty(task).expect("task serializes"),
            serde_json::to_string_pretty(plan).expect("plan serializes")
        )),
    ];
    let mut trace = ReActTrace::new(AgentRole::Caa, prompt);
    let reply = backend.complete(AgentRole::Caa, &trace.context())?;
    let verdict = extract_json(&reply);
    let field = |k: &str| verdict.as_ref().and_then(|v| v.get(k)).and_then(Value::as_str);
    let thought = field("thought").unwrap_or_default().to_string();
    let llm_ok = field("status") == Some("resolved");
    let llm_feedback = match (field("status"), field("feedback")) {
        (Some("resolved" | "unresolved"), f) => f.unwrap_or_default().trim().to_string(),
        _ => "assessment reply malformed: expected {\"status\", \"feedback\"}".to_string(),
    };

    let issues = check_plan(plan, task);
    let resolved = llm_ok && issues.is_empty();
    let assessment = if resolved {
        let dataset = task.values.data_location.clone().unwrap_or_default();
        Assessment {
            status: Status::Resolved,
            feedback: if llm_feedback.is_empty() {
                "plan addresses every task field".into()
            } else {
                llm_feedback.clone()
            },
            command: Some(Command {
                version: COMMAND_VERSION,
                mode: plan.mode,
                model: plan.model_config,
                checkpoint: plan.checkpoint.clone(),
                horizon: dataset_horizon(&dataset).unwrap_or(cfg.horizon),
                dataset,
            }),
        }
    } else {
        let mut items = issues.clone();
        if !llm_feedback.is_empty() && !llm_ok {
            items.push(llm_feedback.clone());
        }
        if items.is_empty() {
            items.push("reviewer rejected the plan without giving reasons".into());
        }
        Assessment {
            status: Status::Unresolved,
            feedback: items.join("; "),
            command: None,
        }
    };
    let rubric = if issues.is_empty() {
        "rubric: all task fields covered".to_string()
    } else {
        format!("rubric: {}", issues.join("; "))
    };
    trace.push(ReActStep {
        reasoning: thought,
        action: Action::new("assess", json!({"status": field("status"), "feedback": llm_feedback})),
        observation: rubric,
    });
    trace.finish(serde_json::to_string(&assessment).expect("assessment serializes"));
    Ok((assessment, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{tier_for_accuracy, validate_command, DataFormat, KeyValues, MockBackend, MockScript};
    use crate::predictor::Mode;

    fn task(format: DataFormat) -> StructuredTask {
        StructuredTask::new(
            "Predict beams".into(),
            KeyValues {
                num_uavs: Some(3),
                data_location: Some("data/d1".into()),
                data_format: Some(format),
                data_labels: Some("beam index".into()),
                accuracy_requirement: Some(0.95),
            },
        )
    }

    fn plan(mode: Mode) -> Plan {
        Plan {
            mode,
            model_config: tier_for_accuracy(0.95).1,
            checkpoint: format!("models/{mode}-large"),
            tool_findings: Vec::new(),
            rationale: String::new(),
        }
    }

    fn assess(reply: Value, plan: &Plan, task: &StructuredTask) -> Assessment {
        let mut script = MockScript::default();
        script.replies.insert(AgentRole::Caa, vec![reply]);
        let mut b = MockBackend::new(script);
        run_caa(&mut b, plan, task, &WorkflowConfig::default()).unwrap().0
    }

    #[test]
    fn matching_plan_resolves_with_valid_command() {
        let a = assess(
            json!({"status": "resolved", "feedback": "ok"}),
            &plan(Mode::Numeric),
            &task(DataFormat::Numeric),
        );
        assert!(a.is_resolved());
        let cmd = a.command.unwrap();
        let v = serde_json::to_value(&cmd).unwrap();
        assert_eq!(validate_command(&v).unwrap(), cmd);
        assert_eq!(cmd.horizon, 5);
        assert_eq!(cmd.dataset, "data/d1");
    }

    #[test]
    fn mode_mismatch_is_unresolved() {
        let a = assess(
            json!({"status": "resolved", "feedback": ""}),
            &plan(Mode::Image),
            &task(DataFormat::Numeric),
        );
        assert_eq!(a.status, Status::Unresolved);
        assert!(a.feedback.contains("mode mismatch"), "{}", a.feedback);
        assert!(a.command.is_none());
    }

    #[test]
    fn reviewer_can_reject_and_malformed_rejects() {
        let a = assess(
            json!({"status": "unresolved", "feedback": "explain the latency budget"}),
            &plan(Mode::Multi),
            &task(DataFormat::Hybrid),
        );
        assert_eq!(a.feedback, "explain the latency budget");
        let a = assess(json!("looks good to me"), &plan(Mode::Multi), &task(DataFormat::Hybrid));
        assert!(!a.is_resolved() && a.feedback.contains("malformed"));
        let a = assess(json!({"status": "unresolved"}), &plan(Mode::Multi), &task(DataFormat::Hybrid));
        assert!(!a.feedback.is_empty());
    }

    #[test]
    fn rubric_items() {
        let mut t = task(DataFormat::Hybrid);
        t.values.accuracy_requirement = None;
        t.missing_fields = t.values.missing();
        let mut p = plan(Mode::Multi);
        p.checkpoint.clear();
        let issues = check_plan(&p, &t);
        assert_eq!(issues.len(), 2, "{issues:?}");
        assert!(issues[0].contains("accuracy requirement"));
    }
}
