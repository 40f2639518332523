use crate::error::Result;
use crate::linalg::Matrix;

use super::{Tape, Var};

/// Worst disagreement between reverse-mode and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input index and linear entry index of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Compares the gradient of a scalar function of several matrix inputs with
/// central differences of step `h`.
///
/// The per-entry error is `|a − n| / max(|a|, |n|, 1e-6 · max(1, ‖∇‖∞))`, so
/// entries that are negligible next to the largest gradient component are not
/// judged on relative error alone.
pub fn grad_check<F>(f: F, point: &[Matrix], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |inputs: &[Matrix]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let analytic: Vec<Matrix> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = point.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out);
        vars.iter().map(|v| grads.wrt(*v)).collect()
    };

    let mut numeric = Vec::with_capacity(point.len());
    let mut shifted = point.to_vec();
    for (i, m) in point.iter().enumerate() {
        let mut g = Matrix::zeros(m.nrows(), m.ncols());
        for k in 0..m.len() {
            shifted[i][k] = m[k] + h;
            let up = eval(&shifted)?;
            shifted[i][k] = m[k] - h;
            let down = eval(&shifted)?;
            shifted[i][k] = m[k];
            g[k] = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }

    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .flat_map(|m| m.iter())
        .fold(0.0_f64, |acc, x| acc.max(x.abs()));
    let floor = 1e-6 * scale.max(1.0);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for k in 0..a.len() {
            let denom = a[k].abs().max(n[k].abs()).max(floor);
            let err = (a[k] - n[k]).abs() / denom;
            report.entries_checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = (i, k);
                report.analytic = a[k];
                report.numeric = n[k];
            }
        }
    }
    Ok(report)
}
