use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, element by element over every tensor in `params`.
///
/// Returns the largest `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    Ok(grad_check_report(f, params, eps)?.max_rel)
}

/// Worst elementwise disagreement between reverse-mode and central
/// differences, relative and absolute.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel: f64,
    pub max_abs: f64,
}

/// Like [`grad_check`], also reporting the largest absolute difference.
pub fn grad_check_report<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars);
        if let Some(op) = tape.non_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    let mut worst_abs = 0.0f64;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let ad = analytic.map_or(0.0, |g| g[k]);
            let rel = (ad - numeric).abs() / (ad.abs() + numeric.abs()).max(1e-8);
            if !rel.is_finite() {
                return Err(Error::NonFinite(format!("grad_check at param {pi}[{k}]")));
            }
            worst = worst.max(rel);
            worst_abs = worst_abs.max((ad - numeric).abs());
        }
    }
    Ok(GradCheckReport {
        max_rel: worst,
        max_abs: worst_abs,
    })
}
