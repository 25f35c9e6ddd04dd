use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::tools::ModelSpec;
use super::{AgentError, Result};
use crate::predictor::Mode;

pub const COMMAND_VERSION: u32 = 1;

/// First balanced `{...}` in `text` that parses as JSON. Braces inside
/// string literals are skipped; candidates that fail to parse are passed
/// over.
pub fn extract_json(text: &str) -> Option<Value> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        let mut end = None;
        for (i, &c) in bytes.iter().enumerate().skip(open) {
            if in_str {
                match c {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match c {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        let Some(end) = end else { return None };
        if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(&text[open..=end]) {
            return Some(v);
        }
        start = open + 1;
    }
    None
}

fn check_keys(obj: &Map<String, Value>, required: &[&str], optional: &[&str]) -> std::result::Result<(), String> {
    for k in required {
        if !obj.contains_key(*k) {
            return Err(format!("missing key {k:?}"));
        }
    }
    if let Some(k) = obj.keys().find(|k| !required.contains(&k.as_str()) && !optional.contains(&k.as_str())) {
        return Err(format!("unexpected key {k:?}"));
    }
    Ok(())
}

fn nullable<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key).filter(|v| !v.is_null())
}

/// Schema check for a task-analysis reply:
///
/// ```text
/// {"rewritten_requirement": str, "num_uavs": int>=1|null,
///  "data_location": str|null, "data_format": "numeric"|"image"|"hybrid"|null,
///  "data_labels": str|null, "accuracy_requirement": number in [0,1]|null,
///  "missing_fields": [field name...], "thought"?: str, "question"?: str}
/// ```
pub fn validate_task_reply(v: &Value) -> std::result::Result<(), String> {
    let obj = v.as_object().ok_or("reply is not a JSON object")?;
    check_keys(
        obj,
        &[
            "rewritten_requirement",
            "num_uavs",
            "data_location",
            "data_format",
            "data_labels",
            "accuracy_requirement",
            "missing_fields",
        ],
        &["thought", "question"],
    )?;
    match obj["rewritten_requirement"].as_str() {
        Some(s) if !s.trim().is_empty() => {}
        _ => return Err("rewritten_requirement must be a non-empty string".into()),
    }
    if let Some(n) = nullable(obj, "num_uavs") {
        if n.as_u64().is_none_or(|n| n == 0) {
            return Err("num_uavs must be a positive integer or null".into());
        }
    }
    for key in ["data_location", "data_labels"] {
        if nullable(obj, key).is_some_and(|s| !s.is_string()) {
            return Err(format!("{key} must be a string or null"));
        }
    }
    if let Some(f) = nullable(obj, "data_format") {
        if !matches!(f.as_str(), Some("numeric" | "image" | "hybrid")) {
            return Err("data_format must be numeric, image, hybrid or null".into());
        }
    }
    if let Some(a) = nullable(obj, "accuracy_requirement") {
        if a.as_f64().is_none_or(|a| !(0.0..=1.0).contains(&a)) {
            return Err("accuracy_requirement must be a number in [0, 1] or null".into());
        }
    }
    let fields = obj["missing_fields"].as_array().ok_or("missing_fields must be an array")?;
    for f in fields {
        if f.as_str().and_then(|s| s.parse::<super::KeyField>().ok()).is_none() {
            return Err(format!("unknown missing field {f}"));
        }
    }
    for key in ["thought", "question"] {
        if obj.get(key).is_some_and(|s| !s.is_string()) {
            return Err(format!("{key} must be a string"));
        }
    }
    Ok(())
}

/// The JSON command that activates the predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Command {
    pub version: u32,
    pub mode: Mode,
    pub model: ModelSpec,
    pub checkpoint: String,
    pub dataset: String,
    pub horizon: usize,
}

impl Command {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("command serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| AgentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let v: Value = serde_json::from_str(&text).map_err(|e| AgentError::BadFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        validate_command(&v).map_err(|reason| AgentError::BadFile {
            path: path.to_path_buf(),
            reason,
        })
    }
}

pub fn validate_command(v: &Value) -> std::result::Result<Command, String> {
    let cmd: Command = serde_json::from_value(v.clone()).map_err(|e| e.to_string())?;
    if cmd.version != COMMAND_VERSION {
        return Err(format!("unsupported command version {}", cmd.version));
    }
    cmd.model.validate()?;
    if cmd.checkpoint.trim().is_empty() {
        return Err("checkpoint is empty".into());
    }
    if cmd.dataset.trim().is_empty() {
        return Err("dataset is empty".into());
    }
    if cmd.horizon == 0 {
        return Err("horizon must be at least 1".into());
    }
    Ok(cmd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn extracts_first_balanced_object() {
        let text = "Sure! Here you go:\n```json\n{\"a\": \"}{\", \"b\": {\"c\": 1}}\n```\nand {\"d\": 2}";
        assert_eq!(extract_json(text), Some(json!({"a": "}{", "b": {"c": 1}})));
        assert_eq!(extract_json("{not json} then {\"ok\": true}"), Some(json!({"ok": true})));
        assert_eq!(extract_json("no braces"), None);
        assert_eq!(extract_json("{\"open\": 1"), None);
        assert_eq!(extract_json(r#"{"s": "quote \" brace }"}"#), Some(json!({"s": "quote \" brace }"})));
    }

    fn task() -> Value {
        json!({
            "rewritten_requirement": "Predict beams for 2 UAVs.",
            "num_uavs": 2,
            "data_location": "/data/a",
            "data_format": "hybrid",
            "data_labels": "beam index",
            "accuracy_requirement": 0.9,
            "missing_fields": []
        })
    }

    #[test]
    fn task_schema() {
        assert!(validate_task_reply(&task()).is_ok());
        let mut t = task();
        t["data_location"] = Value::Null;
        t["missing_fields"] = json!(["data_location"]);
        assert!(validate_task_reply(&t).is_ok());
        for (key, bad) in [
            ("num_uavs", json!(0)),
            ("data_format", json!("video")),
            ("accuracy_requirement", json!(90)),
            ("missing_fields", json!(["colour"])),
            ("rewritten_requirement", json!("")),
        ] {
            let mut t = task();
            t[key] = bad;
            assert!(validate_task_reply(&t).is_err(), "{key}");
        }
        let mut t = task();
        t.as_object_mut().unwrap().remove("data_labels");
        assert!(validate_task_reply(&t).is_err());
        t = task();
        t["extra"] = json!(1);
        assert!(validate_task_reply(&t).is_err());
    }

    #[test]
    fn command_schema() {
        let good = json!({"version":1,"mode":"multi","model":{"numeric_blocks":2,"image_blocks":2,"attn_heads":2,"decoder_layers":2},
            "checkpoint":"models/multi-medium","dataset":"data/d1","horizon":5});
        let cmd = validate_command(&good).unwrap();
        assert_eq!(cmd.mode, Mode::Multi);
        let round: Value = serde_json::from_str(&cmd.to_json()).unwrap();
        assert_eq!(round, good);
        for patch in [
            json!({"version": 2}),
            json!({"mode": "video"}),
            json!({"horizon": 0}),
            json!({"checkpoint": ""}),
            json!({"model": {"numeric_blocks":0,"image_blocks":2,"attn_heads":2,"decoder_layers":2}}),
            json!({"extra": true}),
        ] {
            let mut v = good.clone();
            for (k, x) in patch.as_object().unwrap() {
                v[k] = x.clone();
            }
            assert!(validate_command(&v).is_err(), "{patch}");
        }
    }
}
