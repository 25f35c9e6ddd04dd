use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::agents::{extract_json, KeyField, KeyValues, StructuredTask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCaseResult {
    pub case_id: String,
    pub format_ok: bool,
    /// Key fields matching the reference, out of 5.
    pub fields_correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEvalReport {
    pub format_accuracy: f64,
    /// Mean over cases of the fraction of key fields correct.
    pub parameter_accuracy: f64,
    pub per_case: Vec<AgentCaseResult>,
    /// Mean draft similarity at each planning iteration.
    pub similarity_by_iteration: Vec<(usize, f64)>,
}

/// Scores task-analysis replies against reference key fields. A reply is
/// well-formed when it contains a schema-valid JSON object; malformed
/// replies score no fields.
pub fn agent_accuracy(
    outputs: &[String],
    references: &[(String, KeyValues)],
    similarity_curves: &[Vec<(usize, f64)>],
) -> Result<AgentEvalReport, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::EmptySlice);
    }
    if outputs.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            rows: outputs.len(),
            labels: references.len(),
        });
    }
    let per_case: Vec<AgentCaseResult> = outputs
        .iter()
        .zip(references)
        .map(|(out, (id, reference))| {
            let task = extract_json(out).and_then(|v| StructuredTask::from_reply(&v).ok());
            AgentCaseResult {
                case_id: id.clone(),
                format_ok: task.is_some(),
                fields_correct: task.map_or(0, |t| t.values.correct_fields(reference)),
            }
        })
        .collect();
    let n = per_case.len() as f64;
    let fields = KeyField::ALL.len() as f64;
    Ok(AgentEvalReport {
        format_accuracy: per_case.iter().filter(|c| c.format_ok).count() as f64 / n,
        parameter_accuracy: per_case.iter().map(|c| c.fields_correct as f64 / fields).sum::<f64>() / n,
        per_case,
        similarity_by_iteration: mean_curve(similarity_curves),
    })
}

fn mean_curve(curves: &[Vec<(usize, f64)>]) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(it, s) in curves.iter().flatten() {
        let e = acc.entry(it).or_default();
        e.0 += s;
        e.1 += 1;
    }
    acc.into_iter().map(|(it, (s, n))| (it, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::DataFormat;
    use serde_json::json;

    fn reference() -> KeyValues {
        KeyValues {
            num_uavs: Some(2),
            data_location: Some("/data/a".into()),
            data_format: Some(DataFormat::Hybrid),
            data_labels: Some("beam index".into()),
            accuracy_requirement: Some(0.9),
        }
    }

    fn reply(uavs: u64) -> String {
        format!(
            "Here it is: {}",
            json!({"rewritten_requirement": "r", "num_uavs": uavs, "data_location": "/data/a", "data_format": "hybrid",
                   "data_labels": "Beam Index", "accuracy_requirement": 0.9, "missing_fields": []})
        )
    }

    #[test]
    fn perfect_and_malformed() {
        let refs: Vec<_> = (0..20).map(|i| (format!("c{i}"), reference())).collect();
        let mut outs: Vec<String> = (0..20).map(|_| reply(2)).collect();
        let r = agent_accuracy(&outs, &refs, &[]).unwrap();
        assert_eq!((r.format_accuracy, r.parameter_accuracy), (1.0, 1.0));
        outs[7] = "{\"rewritten_requirement\": ".into();
        let r = agent_accuracy(&outs, &refs, &[]).unwrap();
        assert_eq!(r.format_accuracy, 0.95);
        assert_eq!(r.per_case.len(), 20);
        assert!(!r.per_case[7].format_ok);
    }

    #[test]
    fn partial_fields() {
        let refs = vec![("a".to_string(), reference())];
        let r = agent_accuracy(&[reply(3)], &refs, &[]).unwrap();
        assert_eq!(r.per_case[0].fields_correct, 4);
        assert!((r.parameter_accuracy - 0.8).abs() < 1e-15);
        assert!(agent_accuracy(&[], &[], &[]).is_err());
    }

    #[test]
    fn curves_average_per_iteration() {
        let r = agent_accuracy(
            &[reply(2)],
            &[("a".into(), reference())],
            &[vec![(1, 0.5), (2, 0.7)], vec![(1, 0.7)]],
        )
        .unwrap();
        assert_eq!(r.similarity_by_iteration.len(), 2);
        assert!((r.similarity_by_iteration[0].1 - 0.6).abs() < 1e-15);
        assert_eq!(r.similarity_by_iteration[1], (2, 0.7));
    }
}
