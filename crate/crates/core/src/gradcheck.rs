//! Central finite-difference checking of reverse-mode adjoints.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Analytic/numeric derivative pairs for every input element.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub pairs: Vec<(f64, f64)>,
}

impl GradCheckReport {
    /// Largest relative disagreement, ignoring pairs whose absolute
    /// difference is within `abs_floor`.
    pub fn worst_relative(&self, abs_floor: f64) -> f64 {
        self.pairs
            .iter()
            .map(|&(a, n)| {
                let diff = (a - n).abs();
                if diff <= abs_floor {
                    0.0
                } else {
                    diff / a.abs().max(n.abs())
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, rel_tol: f64, abs_floor: f64) -> bool {
        self.worst_relative(abs_floor) < rel_tol
    }
}

/// Compares the adjoints of a scalar-valued `f` with central differences of
/// step `step`. `f` rebuilds the expression from fresh leaves every call.
pub fn gradcheck<T, F>(inputs: &[Tensor<T>], step: f64, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item().as_f64())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            let h = T::lit(step);
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::Contract(format!(
                    "non-finite finite difference at input {i} element {j}"
                )));
            }
            report.pairs.push((analytic[i].data()[j].as_f64(), numeric));
        }
    }
    Ok(report)
}
