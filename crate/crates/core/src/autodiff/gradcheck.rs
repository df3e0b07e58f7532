//! Central finite differences against reverse-mode gradients.
//!
//! An entry is *non-comparable* when the `+h` or `-h` evaluation lands on a
//! different side of any relu kink than the base point (the relu activation
//! patterns differ). The hinge is built from a relu, so a hinge sitting
//! exactly at its margin is caught by the same rule. Non-comparable entries
//! are reported but excluded from the error statistics.

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct EntryCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub comparable: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub compared: usize,
    pub excluded: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    /// Combines reports from several checks into one summary.
    pub fn merge(reports: impl IntoIterator<Item = GradCheckReport>, tolerance: f64) -> Self {
        let entries: Vec<EntryCheck> = reports.into_iter().flat_map(|r| r.entries).collect();
        summarize(entries, tolerance)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn summarize(entries: Vec<EntryCheck>, tolerance: f64) -> GradCheckReport {
    let compared: Vec<f64> = entries.iter().filter(|e| e.comparable).map(|e| e.rel_error).collect();
    let max_rel_error = compared.iter().copied().fold(0.0, f64::max);
    let mean_rel_error = if compared.is_empty() {
        0.0
    } else {
        compared.iter().sum::<f64>() / compared.len() as f64
    };
    let excluded = entries.len() - compared.len();
    GradCheckReport {
        max_rel_error,
        mean_rel_error,
        compared: compared.len(),
        excluded,
        tolerance,
        entries,
    }
}

/// Checks the gradient of `loss_fn` with respect to every entry of `params`.
///
/// `loss_fn` receives a fresh graph and one node per parameter and must return
/// a scalar node; it is called `1 + 2 * numel` times and must be
/// deterministic. `params` are restored before returning.
pub fn finite_diff_check<F>(params: &mut [Tensor], step: f64, tolerance: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.variable(p)).collect();
    let root = loss_fn(&mut graph, &vars)?;
    let base_pattern = graph.relu_pattern();
    graph.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| graph.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    drop(graph);

    let mut evaluate = |params: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.constant(p)).collect();
        let root = loss_fn(&mut g, &vars)?;
        Ok((g.scalar(root), g.relu_pattern()))
    };

    let mut entries = Vec::new();
    for p in 0..params.len() {
        for j in 0..params[p].len() {
            let original = params[p].data()[j];
            params[p].data_mut()[j] = original + step;
            let plus = evaluate(params);
            params[p].data_mut()[j] = original - step;
            let minus = evaluate(params);
            params[p].data_mut()[j] = original;
            let ((f_plus, pat_plus), (f_minus, pat_minus)) = (plus?, minus?);
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[p][j];
            entries.push(EntryCheck {
                param: p,
                index: j,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
                comparable: pat_plus == base_pattern && pat_minus == base_pattern,
            });
        }
    }
    Ok(summarize(entries, tolerance))
}
