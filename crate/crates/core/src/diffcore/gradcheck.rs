//! Central-difference verification of analytic gradients (64-bit only).

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    /// Largest `|analytic - numeric|` over all coordinates.
    pub max_abs_error: f64,
    /// Input number followed by the unravelled coordinate inside it.
    pub worst_coordinate: Vec<usize>,
    pub coordinates_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn unravel(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for (slot, &d) in idx.iter_mut().zip(dims).rev() {
        *slot = flat % d;
        flat /= d;
    }
    idx
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)
}

fn scalar_of(g: &Graph<f64>, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck needs a scalar output, got dims {:?}",
            v.dims()
        )));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of the scalar function `f` with central
/// differences at every coordinate of every input.
pub fn gradcheck<F>(op_name: &str, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coordinate: Vec::new(),
        coordinates_checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[which].len()]);
        for i in 0..inputs[which].len() {
            let x = inputs[which].data()[i];
            let h = 1e-5 * x.abs().max(1.0);
            probe[which].data_mut()[i] = x + h;
            let up = evaluate(&f, &probe)?;
            probe[which].data_mut()[i] = x - h;
            let down = evaluate(&f, &probe)?;
            probe[which].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            report.coordinates_checked += 1;
            report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
            if err > report.max_rel_error || report.worst_coordinate.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                let mut coord = vec![which];
                coord.extend(unravel(i, inputs[which].dims()));
                report.worst_coordinate = coord;
            }
        }
    }
    Ok(report)
}
