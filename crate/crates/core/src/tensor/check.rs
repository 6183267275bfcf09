use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error. Central differences at
/// [`FD_STEP`] carry ~1e-10 absolute round-off, so gradients below this
/// magnitude are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst coordinate (`name[index]` or `x[index]`).
    pub worst: String,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} coords, max rel err {:.3e} at {} (tol {:.0e}): {}",
            self.checked,
            self.max_rel_error,
            self.worst,
            self.tol,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.scalar(out))
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
///
/// `f` must be deterministic; two evaluations at `x` that differ in any bit
/// are reported as an error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let base = eval(&f, x)?;
    if eval(&f, x)?.to_bits() != base.to_bits() {
        return Err(Error::Gradient("function is not deterministic".into()));
    }

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().requiring_grad());
    let out = f(&mut tape, v)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("finite_diff_check", "function must be scalar"));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst = (0.0, 0);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let e = rel_error(analytic[i], numeric);
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst: format!("x[{}]", worst.1),
        checked: x.len(),
        tol,
        passed: worst.0 < tol,
    })
}

/// Gradient check over every trainable parameter in `store`.
///
/// Parameters are perturbed in place and restored afterwards.
pub fn finite_diff_check_params<F>(store: &mut ParamStore, f: F, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        Ok(tape.scalar(out))
    };
    let base = eval(store)?;
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(Error::Gradient("function is not deterministic".into()));
    }

    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward(out)?;
    let grads: Vec<(crate::params::ParamId, Vec<f64>)> = tape
        .param_grads()
        .into_iter()
        .map(|(id, g)| (id, g.to_vec()))
        .collect();
    let grad_of = |id| grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g);

    let mut worst = (0.0, String::from("-"));
    let mut checked = 0;
    for id in store.ids() {
        if !store.get(id).requires_grad() {
            continue;
        }
        let n = store.get(id).len();
        for i in 0..n {
            let analytic = grad_of(id).map_or(0.0, |g| g[i]);
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * FD_STEP);
            let e = rel_error(analytic, numeric);
            if e > worst.0 || e.is_nan() {
                worst = (e, format!("{}[{i}]", store.name(id)));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst: worst.1,
        checked,
        tol,
        passed: worst.0 < tol,
    })
}
