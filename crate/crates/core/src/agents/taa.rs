use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::json::{extract_json, validate_task_reply};
use super::trace::{Action, ReActStep, ReActTrace};
use super::{prompts, AgentError, AgentRole, ChatBackend, Message, Result};
use crate::predictor::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Numeric,
    Image,
    Hybrid,
}

impl DataFormat {
    /// The predictor mode that uses exactly this data.
    pub fn mode(self) -> Mode {
        match self {
            DataFormat::Numeric => Mode::Numeric,
            DataFormat::Image => Mode::Image,
            DataFormat::Hybrid => Mode::Multi,
        }
    }
}

/// The five facts a requirement must pin down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyField {
    NumUavs,
    DataLocation,
    DataFormat,
    DataLabels,
    AccuracyRequirement,
}

impl KeyField {
    pub const ALL: [KeyField; 5] = [
        KeyField::NumUavs,
        KeyField::DataLocation,
        KeyField::DataFormat,
        KeyField::DataLabels,
        KeyField::AccuracyRequirement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KeyField::NumUavs => "num_uavs",
            KeyField::DataLocation => "data_location",
            KeyField::DataFormat => "data_format",
            KeyField::DataLabels => "data_labels",
            KeyField::AccuracyRequirement => "accuracy_requirement",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            KeyField::NumUavs => "number of UAVs",
            KeyField::DataLocation => "data location",
            KeyField::DataFormat => "data format",
            KeyField::DataLabels => "data labels",
            KeyField::AccuracyRequirement => "accuracy requirement",
        }
    }
}

impl fmt::Display for KeyField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KeyField {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        KeyField::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown field {s:?}"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyValues {
    pub num_uavs: Option<u64>,
    pub data_location: Option<String>,
    pub data_format: Option<DataFormat>,
    pub data_labels: Option<String>,
    pub accuracy_requirement: Option<f64>,
}

fn norm(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl KeyValues {
    pub fn missing(&self) -> Vec<KeyField> {
        KeyField::ALL.into_iter().filter(|&k| !self.is_set(k)).collect()
    }

    pub fn is_set(&self, k: KeyField) -> bool {
        match k {
            KeyField::NumUavs => self.num_uavs.is_some(),
            KeyField::DataLocation => self.data_location.is_some(),
            KeyField::DataFormat => self.data_format.is_some(),
            KeyField::DataLabels => self.data_labels.is_some(),
            KeyField::AccuracyRequirement => self.accuracy_requirement.is_some(),
        }
    }

    /// Normalized equality of one field: strings compare case- and
    /// whitespace-insensitively, numbers to 1e-9.
    pub fn field_matches(&self, other: &KeyValues, k: KeyField) -> bool {
        let s = |a: &Option<String>, b: &Option<String>| a.as_deref().map(norm) == b.as_deref().map(norm);
        match k {
            KeyField::NumUavs => self.num_uavs == other.num_uavs,
            KeyField::DataLocation => s(&self.data_location, &other.data_location),
            KeyField::DataFormat => self.data_format == other.data_format,
            KeyField::DataLabels => s(&self.data_labels, &other.data_labels),
            KeyField::AccuracyRequirement => match (self.accuracy_requirement, other.accuracy_requirement) {
                (Some(a), Some(b)) => (a - b).abs() < 1e-9,
                (a, b) => a.is_none() && b.is_none(),
            },
        }
    }

    pub fn correct_fields(&self, reference: &KeyValues) -> usize {
        KeyField::ALL.into_iter().filter(|&k| self.field_matches(reference, k)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredTask {
    pub rewritten_requirement: String,
    #[serde(flatten)]
    pub values: KeyValues,
    /// Always exactly the unset key fields.
    pub missing_fields: Vec<KeyField>,
}

impl StructuredTask {
    pub fn new(rewritten_requirement: String, values: KeyValues) -> Self {
        let missing_fields = values.missing();
        Self {
            rewritten_requirement,
            values,
            missing_fields,
        }
    }

    /// Parses a schema-valid reply. The reply's own `missing_fields` is
    /// ignored and recomputed from the null fields.
    pub fn from_reply(v: &Value) -> std::result::Result<Self, String> {
        validate_task_reply(v)?;
        let str_field = |k: &str| v[k].as_str().map(str::to_string);
        let values = KeyValues {
            num_uavs: v["num_uavs"].as_u64(),
            data_location: str_field("data_location"),
            data_format: v["data_format"].as_str().map(|f| match f {
                "numeric" => DataFormat::Numeric,
                "image" => DataFormat::Image,
                _ => DataFormat::Hybrid,
            }),
            data_labels: str_field("data_labels"),
            accuracy_requirement: v["accuracy_requirement"].as_f64(),
        };
        let text = v["rewritten_requirement"].as_str().unwrap_or_default().trim().to_string();
        Ok(Self::new(text, values))
    }

    pub fn is_complete(&self) -> bool {
        self.missing_fields.is_empty()
    }
}

/// Answers clarification questions on behalf of the manager.
pub trait Responder {
    fn respond(&mut self, question: &str) -> Result<String>;
}

impl<F: FnMut(&str) -> String> Responder for F {
    fn respond(&mut self, question: &str) -> Result<String> {
        Ok(self(question))
    }
}

/// Replays canned answers in order, then answers with nothing. Records
/// every question asked.
#[derive(Debug, Clone, Default)]
pub struct ScriptedResponder {
    answers: VecDeque<String>,
    pub asked: Vec<String>,
}

impl ScriptedResponder {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(answers: I) -> Self {
        Self {
            answers: answers.into_iter().map(Into::into).collect(),
            asked: Vec::new(),
        }
    }
}

impl Responder for ScriptedResponder {
    fn respond(&mut self, question: &str) -> Result<String> {
        self.asked.push(question.to_string());
        Ok(self.answers.pop_front().unwrap_or_default())
    }
}

#[derive(Debug, Clone)]
pub struct TaaOutcome {
    pub task: StructuredTask,
    pub trace: ReActTrace,
    pub questions: Vec<String>,
    /// Raw backend replies, one per step.
    pub replies: Vec<String>,
    /// The clarification budget ran out with fields still missing.
    pub exhausted: bool,
}

fn question_for(missing: &[KeyField], suggested: Option<&str>) -> String {
    let labels: Vec<&str> = missing.iter().map(|k| k.label()).collect();
    match suggested.map(str::trim).filter(|q| !q.is_empty()) {
        Some(q) => format!("{q} (missing: {})", labels.join(", ")),
        None => format!("Please provide the {}.", labels.join(", ")),
    }
}

/// Rewrites `requirement` into a structured task, asking `responder` for
/// missing key fields at most `budget` times.
pub fn run_taa(
    backend: &mut dyn ChatBackend,
    requirement: &str,
    responder: &mut dyn Responder,
    budget: usize,
) -> Result<TaaOutcome> {
    if requirement.trim().is_empty() {
        return Err(AgentError::EmptyRequirement);
    }
    let prompt = vec![
        Message::system(prompts::TAA),
        Message::user(format!("Requirement:\n{}", requirement.trim())),
    ];
    let mut trace = ReActTrace::new(AgentRole::Taa, prompt);
    let mut questions = Vec::new();
    let mut replies = Vec::new();
    loop {
        let reply = backend.complete(AgentRole::Taa, &trace.context())?;
        let malformed = |reason: String| AgentError::MalformedReply {
            role: AgentRole::Taa,
            reason,
        };
        let v = extract_json(&reply).ok_or_else(|| malformed("no JSON object".into()))?;
        let mut task = StructuredTask::from_reply(&v).map_err(malformed)?;
        replies.push(reply);
        if task.rewritten_requirement.is_empty() {
            task.rewritten_requirement = requirement.trim().to_string();
        }
        let thought = v.get("thought").and_then(Value::as_str).unwrap_or_default().to_string();
        let task_json = serde_json::to_value(&task).expect("task serializes");

        if task.is_complete() || questions.len() >= budget {
            let exhausted = !task.is_complete();
            let (name, observation) = if exhausted {
                ("stop", "clarification budget exhausted")
            } else {
                ("finish", "all key fields present")
            };
            trace.push(ReActStep {
                reasoning: thought,
                action: Action::new(name, task_json.clone()),
                observation: observation.into(),
            });
            trace.finish(task_json.to_string());
            return Ok(TaaOutcome {
                task,
                trace,
                questions,
                replies,
                exhausted,
            });
        }

        let q = question_for(&task.missing_fields, v.get("question").and_then(Value::as_str));
        let answer = responder.respond(&q)?;
        log::info!("clarification {}: {q} -> {answer}", questions.len() + 1);
        trace.push(ReActStep {
            reasoning: thought,
            action: Action::new("ask", json!({"question": q, "missing": task.missing_fields})),
            observation: format!("Manager: {}", answer.trim()),
        });
        questions.push(q);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{MockBackend, MockScript};

    fn reply(location: Value, question: Option<&str>) -> Value {
        let mut v = json!({
            "thought": "check the five fields",
            "rewritten_requirement": "Predict beams for 2 UAVs from hybrid data.",
            "num_uavs": 2,
            "data_location": location,
            "data_format": "hybrid",
            "data_labels": "optimal beam index",
            "accuracy_requirement": 0.9,
            "missing_fields": []
        });
        if let Some(q) = question {
            v["question"] = json!(q);
        }
        v
    }

    fn backend(replies: Vec<Value>) -> MockBackend {
        let mut script = MockScript::default();
        script.replies.insert(AgentRole::Taa, replies);
        MockBackend::new(script)
    }

    #[test]
    fn complete_requirement_single_pass() {
        let mut b = backend(vec![reply(json!("/data/run1"), None)]);
        let mut r = ScriptedResponder::default();
        let out = run_taa(&mut b, "two UAVs, hybrid data in /data/run1, ...", &mut r, 5).unwrap();
        assert!(out.task.missing_fields.is_empty());
        assert!(out.questions.is_empty() && r.asked.is_empty());
        assert_eq!(out.trace.steps().len(), 1);
        assert!(!out.exhausted);
    }

    #[test]
    fn missing_location_asks_once() {
        let mut b = backend(vec![
            reply(Value::Null, Some("Where is the data stored?")),
            reply(json!("/data/run1"), None),
        ]);
        let mut r = ScriptedResponder::new(["It is in /data/run1"]);
        let out = run_taa(&mut b, "two UAVs, hybrid data", &mut r, 5).unwrap();
        assert_eq!(r.asked.len(), 1);
        assert!(r.asked[0].contains("data location"));
        assert_eq!(out.task.values.data_location.as_deref(), Some("/data/run1"));
        // The second call saw the answer.
        let last = &b.calls[1].1;
        assert!(last.last().unwrap().content.contains("/data/run1"));
    }

    #[test]
    fn budget_and_errors() {
        let mut b = backend(vec![reply(Value::Null, None); 4]);
        let mut r = ScriptedResponder::default();
        let out = run_taa(&mut b, "something vague", &mut r, 3).unwrap();
        assert!(out.exhausted);
        assert_eq!(out.questions.len(), 3);
        assert_eq!(out.task.missing_fields, vec![KeyField::DataLocation]);

        let mut r = ScriptedResponder::default();
        assert!(matches!(run_taa(&mut b, "  ", &mut r, 3), Err(AgentError::EmptyRequirement)));
        let mut bad = backend(vec![json!("I think it is fine")]);
        assert!(matches!(
            run_taa(&mut bad, "x", &mut r, 3),
            Err(AgentError::MalformedReply { role: AgentRole::Taa, .. })
        ));
    }

    #[test]
    fn missing_fields_follow_nulls() {
        let mut v = reply(Value::Null, None);
        v["missing_fields"] = json!(["num_uavs"]);
        v["accuracy_requirement"] = Value::Null;
        let t = StructuredTask::from_reply(&v).unwrap();
        assert_eq!(t.missing_fields, vec![KeyField::DataLocation, KeyField::AccuracyRequirement]);
        let a = KeyValues {
            data_location: Some(" /Data/Run1 ".into()),
            accuracy_requirement: Some(0.9),
            ..KeyValues::default()
        };
        let b = KeyValues {
            data_location: Some("/data/run1".into()),
            accuracy_requirement: Some(0.9 + 1e-12),
            ..KeyValues::default()
        };
        assert_eq!(a.correct_fields(&b), 5);
    }
}
