//! Finite-difference gradient checking.
//!
//! Analytic gradients from one backward pass are compared against f64
//! central differences with step `h = 1e-5`, element by element, over every
//! parameter the builder's loss can reach.

use super::{Graph, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter name, element index, analytic, numeric) of the worst
    /// relative error.
    pub worst: Option<(String, usize, f64, f64)>,
    pub max_rel_err: f64,
    pub n_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floor so near-zero gradient pairs compare on
/// absolute terms instead of blowing up.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Check `d loss / d theta` for every element of every parameter in `store`.
///
/// `build` must construct the same loss each call (it is re-run for every
/// perturbed evaluation, so any randomness must be captured beforehand).
pub fn gradient_check<F>(store: &mut ParamStore<f64>, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>) -> NodeId,
{
    let analytic: Vec<Option<Tensor<f64>>> = {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.backward(loss);
        g.take_param_grads()
    };

    let eval = |store: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.value(loss).item()
    };

    let h = 1e-5;
    let mut report = GradCheckReport { worst: None, max_rel_err: 0.0, n_checked: 0 };
    for pid in 0..store.len() {
        let id = super::ParamId(pid);
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let lp = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let lm = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[pid].as_ref().map_or(0.0, |t| t.data()[i]);
            let e = rel_err(a, numeric);
            report.n_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((store.get(id).name.clone(), i, a, numeric));
            }
        }
    }
    report
}
