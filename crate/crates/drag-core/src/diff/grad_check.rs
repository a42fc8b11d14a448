//! Central-difference verification of tape gradients.
//!
//! The checker never looks at how the analytic gradients were produced; it
//! only re-evaluates the scalar objective with each parameter entry nudged by
//! `+step` and `-step`. Disagreements are collected into a report rather than
//! thrown, so a caller can print every offending tensor at once.

use serde::Serialize;

use super::matrix::Matrix;
use super::tape::DiffError;

/// Floor for the relative-error denominator, so near-zero gradient pairs do
/// not divide by near-zero.
const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    /// One line per tensor plus a summary line, worst tensors first.
    pub fn summary(&self) -> String {
        let mut by_err: Vec<&TensorCheck> = self.tensors.iter().collect();
        by_err.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
        let mut out = String::new();
        for t in by_err {
            out.push_str(&format!(
                "{:<40} max rel {:>12.4e}  mean rel {:>12.4e}  max abs {:>12.4e}\n",
                t.name, t.max_rel_err, t.mean_rel_err, t.max_abs_err
            ));
        }
        out.push_str(&format!(
            "overall: max rel {:.4e}, mean rel {:.4e} across {} tensors\n",
            self.max_rel_err,
            self.mean_rel_err,
            self.tensors.len()
        ));
        out
    }
}

/// Compares analytic gradients against `(f(x + h) - f(x - h)) / 2h` for every
/// entry of every parameter tensor.
///
/// `eval` must recompute the scalar objective from scratch for the parameter
/// values it is handed; `analytic` holds one gradient per parameter, in the
/// same order. The relative error of a pair `(fd, an)` is
/// `|fd - an| / max(|fd| + |an|, 1e-8)`, which treats an exact 0-vs-0 match
/// as zero error.
pub fn grad_check<F>(
    mut eval: F,
    params: &[(String, Matrix)],
    analytic: &[Matrix],
    step: f64,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&[(String, Matrix)]) -> Result<f64, DiffError>,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    assert!(step > 0.0, "step must be positive");
    let mut work: Vec<(String, Matrix)> = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    let mut global_max = 0.0f64;
    let mut global_sum = 0.0f64;
    let mut global_count = 0usize;

    for t in 0..params.len() {
        let an = &analytic[t];
        assert_eq!(
            an.shape(),
            params[t].1.shape(),
            "gradient shape mismatch for {}",
            params[t].0
        );
        let mut max_rel = 0.0f64;
        let mut sum_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        let n = params[t].1.len();
        for e in 0..n {
            let orig = work[t].1.data()[e];
            work[t].1.data_mut()[e] = orig + step;
            let f_plus = eval(&work)?;
            work[t].1.data_mut()[e] = orig - step;
            let f_minus = eval(&work)?;
            work[t].1.data_mut()[e] = orig;

            let fd = (f_plus - f_minus) / (2.0 * step);
            let an_e = an.data()[e];
            let abs = (fd - an_e).abs();
            let rel = abs / (fd.abs() + an_e.abs()).max(REL_ERR_FLOOR);
            max_rel = max_rel.max(rel);
            sum_rel += rel;
            max_abs = max_abs.max(abs);
        }
        global_max = global_max.max(max_rel);
        global_sum += sum_rel;
        global_count += n;
        tensors.push(TensorCheck {
            name: params[t].0.clone(),
            max_rel_err: max_rel,
            mean_rel_err: if n == 0 { 0.0 } else { sum_rel / n as f64 },
            max_abs_err: max_abs,
        });
    }

    Ok(GradCheckReport {
        tensors,
        max_rel_err: global_max,
        mean_rel_err: if global_count == 0 { 0.0 } else { global_sum / global_count as f64 },
    })
}
