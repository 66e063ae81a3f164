//! Central finite-difference checks for graph-built functions (64-bit only).

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Denominator floor for relative error; gradients smaller than this are
/// compared absolutely. Central differences of an O(1) loss at h = 1e-5 carry
/// roundoff near 1e-10, so the floor keeps exactly-zero gradients (biases in
/// front of shift-invariant ops) from reading as 1e-4 relative errors.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one check: worst relative error and where it happened.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, slot: usize, entry: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            if e >= self.max_rel_err {
                self.worst = Some((slot, entry, analytic, numeric));
            }
        }
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).get(0, 0)
}

/// Checks d f / d inputs for a scalar function built from leaf inputs.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(scalar_of(&g, loss))
    };

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (slot, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let orig = input.data()[e];
            work[slot].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[slot].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[slot].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(slot, e, analytic[slot].data()[e], numeric);
        }
    }
    Ok(report)
}

/// Checks d f / d params at the listed `(param, flat entry)` positions.
pub fn check_params<F>(store: &ParamStore<f64>, entries: &[(ParamId, usize)], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &analytic_store)?;
    g.backward_into(loss, &mut analytic_store)?;

    let mut work = store.clone();
    let mut report = GradReport::default();
    for &(id, e) in entries {
        let orig = work.value(id).data()[e];
        work.get_mut(id).value.data_mut()[e] = orig + h;
        let mut g = Graph::new();
        let l = f(&mut g, &work)?;
        let plus = scalar_of(&g, l);
        work.get_mut(id).value.data_mut()[e] = orig - h;
        let mut g = Graph::new();
        let l = f(&mut g, &work)?;
        let minus = scalar_of(&g, l);
        work.get_mut(id).value.data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        report.record(id.index(), e, analytic_store.grad(id).data()[e], numeric);
    }
    Ok(report)
}

/// Every entry of every parameter.
pub fn all_entries(store: &ParamStore<f64>) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |e| (id, e)))
        .collect()
}
