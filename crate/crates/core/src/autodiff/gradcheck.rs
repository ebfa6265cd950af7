//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it is
//! independent of every backward rule it checks.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` per input.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn eval_scalar<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Compares the tape gradient of the scalar built by `build` against central
/// differences with the given `step`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut est = vec![0.0; inputs[i].len()];
        for (j, e) in est.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval_scalar(&work, &build)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval_scalar(&work, &build)?;
            work[i].data_mut()[j] = orig;
            *e = (plus - minus) / (2.0 * step);
        }
        numeric.push(Tensor::new(inputs[i].shape().to_vec(), est)?);
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff: f64 = a.data().iter().zip(n.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let na: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn: f64 = n.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = na.max(nn);
            if scale == 0.0 {
                0.0
            } else {
                diff / scale
            }
        })
        .collect();
    Ok(GradCheckReport { rel_errors, analytic, numeric })
}
