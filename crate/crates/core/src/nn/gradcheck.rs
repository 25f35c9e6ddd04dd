use super::{Graph, ParameterSet, Result, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Entries probed per parameter, spread evenly; `usize::MAX` for all.
    pub max_entries_per_param: usize,
    /// Denominator floor, so entries where both gradients are ~0 compare by
    /// absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_param: usize::MAX,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric gradient at the worst entry.
    pub worst_values: (f64, f64),
    pub entries_checked: usize,
}

/// Compares backward-pass gradients of the scalar built by `loss` against
/// central differences, for every trainable parameter.
///
/// `loss` must be deterministic: it is re-run twice per probed entry.
pub fn grad_check<F>(params: &mut ParameterSet<f64>, opts: &GradCheckOptions, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParameterSet<f64>) -> Result<Var>,
{
    params.zero_grad();
    let mut g = Graph::new();
    let root = loss(&mut g, params)?;
    g.backward_into(root, params);
    drop(g);
    let eval = |ps: &ParameterSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let root = loss(&mut g, ps)?;
        Ok(g.value(root).data().iter().sum())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        entries_checked: 0,
    };
    for id in 0..params.len() {
        if !params.by_id(id).trainable {
            continue;
        }
        let n = params.by_id(id).value.numel();
        let probes = n.min(opts.max_entries_per_param.max(1));
        for j in 0..probes {
            let i = if probes == n { j } else { j * n / probes };
            let analytic = params.by_id(id).grad[i];
            let orig = params.by_id(id).value.data()[i];
            params.by_id_mut(id).value.data_mut()[i] = orig + opts.step;
            let plus = eval(params)?;
            params.by_id_mut(id).value.data_mut()[i] = orig - opts.step;
            let minus = eval(params)?;
            params.by_id_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), i));
                report.worst_values = (analytic, numeric);
            }
        }
    }
    params.zero_grad();
    Ok(report)
}
