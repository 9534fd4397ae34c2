//! Central-difference gradient verification.

use crate::error::{contract, Result};
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tape::{Graph, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-parameter relative error.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub per_param: Vec<(String, f64)>,
}

/// Compares tape gradients of `f` against central differences with step `h`.
///
/// For each trainable parameter tensor the error is
/// `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖ + 1e-12)` with Euclidean
/// norms over the tensor's elements; the maximum over parameters is reported.
pub fn grad_check<T, F>(store: &ParamStore<T>, f: F, h: T) -> Result<GradCheckReport>
where
    T: Real,
    F: for<'g> Fn(&'g Graph<T>, &ParamStore<T>) -> Result<Var<'g, T>>,
{
    let hf = h.as_f64();
    if !(1e-6..=1e-3).contains(&hf) {
        return Err(contract(format!("grad_check step {hf} outside [1e-6, 1e-3]")));
    }
    let mut analytic = store.clone();
    analytic.zero_grad();
    {
        let g = Graph::new();
        let loss = f(&g, &analytic)?;
        g.backward(loss)?.accumulate(&mut analytic)?;
    }
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let g = Graph::no_grad();
        Ok(f(&g, s)?.item().as_f64())
    };

    let mut probe = store.clone();
    let mut per_param = Vec::new();
    for idx in 0..store.len() {
        let p = store.by_index(idx);
        if !p.tensor.requires_grad() {
            continue;
        }
        let grad = analytic.by_index(idx).tensor.grad().map(<[T]>::to_vec);
        let (mut diff2, mut an2, mut num2) = (0.0, 0.0, 0.0);
        for e in 0..p.tensor.numel() {
            let orig = p.tensor.data()[e];
            probe.by_index_mut(idx).tensor.data_mut()[e] = orig + h;
            let up = eval(&probe)?;
            probe.by_index_mut(idx).tensor.data_mut()[e] = orig - h;
            let down = eval(&probe)?;
            probe.by_index_mut(idx).tensor.data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * hf);
            let a = grad.as_ref().map_or(0.0, |g| g[e].as_f64());
            diff2 += (a - numeric).powi(2);
            an2 += a * a;
            num2 += numeric * numeric;
        }
        let rel = diff2.sqrt() / (an2.sqrt() + num2.sqrt() + 1e-12);
        per_param.push((p.name.clone(), rel));
    }
    let (worst_param, max_rel_error) = per_param
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    Ok(GradCheckReport {
        max_rel_error,
        worst_param,
        per_param,
    })
}
