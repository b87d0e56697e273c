//! Central finite-difference checks for analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Outcome of comparing analytic and numeric gradients of one parameter.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)`; the floor keeps all-zero
    /// gradients from dividing by zero.
    pub fn rel_err(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / na.max(nn).max(1e-10)
    }
}

/// Checks every parameter of `store` against central differences of the
/// scalar returned by `loss`. The closure must be a pure function of the
/// parameter values.
pub fn check_params<F, E>(store: &ParamStore<f64>, h: f64, loss: F) -> Result<Vec<GradCheck>, E>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, E>,
    E: From<crate::error::NumError>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64, E> {
        let mut g = Graph::new(s);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut out = Vec::new();
    let mut work = store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let mut numeric = Vec::with_capacity(n);
        for k in 0..n {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        out.push(GradCheck {
            name: store.name(id).to_string(),
            analytic: analytic.param_or_zeros(id, store).to_f64_vec(),
            numeric,
        });
    }
    Ok(out)
}

/// Largest relative error over all parameters.
pub fn max_rel_err(checks: &[GradCheck]) -> f64 {
    checks.iter().map(GradCheck::rel_err).fold(0.0, f64::max)
}

/// Convenience: single-parameter store from a tensor.
pub fn store_of(tensors: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in tensors {
        s.add(*n, t.clone()).expect("unique names");
    }
    s
}
