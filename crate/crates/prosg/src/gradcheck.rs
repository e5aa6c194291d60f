//! Central-difference gradient checking (64-bit only).
//!
//! The independent oracle for every backward rule in the crate: a graph
//! builder is evaluated at `p ± eps` per coordinate and compared against
//! the gradients produced by [`Graph::backward`].

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::NamedParams;

#[derive(Debug, Clone)]
pub struct GradReport {
    /// (param name, max relative error over its coordinates)
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Relative error with a floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare backward() gradients of `build`'s scalar root against
/// central finite differences for every coordinate of `params`.
///
/// `build` must re-read the current param values on every call (graph
/// param leaves snapshot data, so rebuilding suffices).
pub fn grad_check(
    build: &mut dyn FnMut(&mut Graph<f64>) -> Result<NodeId>,
    params: &NamedParams<f64>,
    eps: f64,
) -> Result<GradReport> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::precondition(format!(
            "grad_check eps {eps} outside [1e-6, 1e-4]"
        )));
    }
    for (_, p) in params {
        p.borrow_mut().zero_grad();
    }
    let mut g = Graph::new();
    let root = build(&mut g)?;
    let f0 = g.value(root)[0];
    if !f0.is_finite() {
        return Err(Error::precondition(format!("grad_check: f(p) = {f0}")));
    }
    g.backward(root)?;

    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| {
            let t = p.borrow();
            t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    for (pi, (name, p)) in params.iter().enumerate() {
        let n = p.borrow().len();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = p.borrow().data()[i];
            p.borrow_mut().data_mut()[i] = orig + eps;
            let fp = {
                let mut g = Graph::new();
                let root = build(&mut g)?;
                g.value(root)[0]
            };
            p.borrow_mut().data_mut()[i] = orig - eps;
            let fm = {
                let mut g = Graph::new();
                let root = build(&mut g)?;
                g.value(root)[0]
            };
            p.borrow_mut().data_mut()[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::precondition(format!(
                    "grad_check: non-finite perturbed value for {name}[{i}]"
                )));
            }
            let fd = (fp - fm) / (2.0 * eps);
            let e = rel_err(analytic[pi][i], fd);
            if e > worst {
                worst = e;
            }
        }
        if worst > max_rel {
            max_rel = worst;
        }
        per_param.push((name.clone(), worst));
    }
    Ok(GradReport {
        per_param,
        max_rel_err: max_rel,
    })
}
