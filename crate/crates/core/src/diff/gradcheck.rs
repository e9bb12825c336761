//! Central-finite-difference verification of tape gradients.

use super::{DiffError, ParamStore, Tape, Var};

/// Options for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Denominator floor: components whose analytic and numeric gradients are
    /// both below this magnitude cannot be resolved by finite differences and
    /// compare against the floor instead.
    pub denom_floor: f64,
    /// Check only every n-th component of each parameter (1 = all).
    pub stride: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            denom_floor: 1e-4,
            stride: 1,
        }
    }
}

/// Per-parameter outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for p in &self.per_param {
            s.push_str(&format!(
                "{:<40} max_rel_err {: <12.3e} ({} components)\n",
                p.name, p.max_rel_err, p.checked
            ));
        }
        s.push_str(&format!(
            "overall max_rel_err {:.3e} tolerance {:.1e} -> {}\n",
            self.max_rel_err,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        s
    }
}

/// Compare tape gradients of a scalar loss against central differences.
///
/// `build` must construct the loss from the given store onto the given tape;
/// it is called many times and must be deterministic (two evaluations at the
/// same parameters must agree bitwise, otherwise the check errors out).
pub fn grad_check<F>(
    store: &mut ParamStore,
    opts: &GradCheckOptions,
    mut build: F,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, DiffError>,
{
    let eval = |store: &ParamStore, build: &mut F| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store)?;
        Ok(tape.value(loss).scalar_value())
    };

    // Determinism gate.
    let l0 = eval(store, &mut build)?;
    let l1 = eval(store, &mut build)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(DiffError::NonDeterministic { a: l0, b: l1 });
    }

    // Analytic gradients from one backward pass.
    store.zero_grads();
    {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store)?;
        tape.backward(loss, store)?;
    }
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let analytic: Vec<Vec<f64>> = names
        .iter()
        .map(|n| store.grad(n).unwrap().data().to_vec())
        .collect();
    store.zero_grads();

    let h = opts.step;
    let stride = opts.stride.max(1);
    let mut per_param = Vec::with_capacity(names.len());
    let mut overall: f64 = 0.0;
    for (name, grads) in names.iter().zip(analytic.iter()) {
        let mut max_rel: f64 = 0.0;
        let mut checked = 0;
        for i in (0..grads.len()).step_by(stride) {
            let orig = store.value(name)?.data()[i];
            store.value_mut(name)?.data_mut()[i] = orig + h;
            let lp = eval(store, &mut build)?;
            store.value_mut(name)?.data_mut()[i] = orig - h;
            let lm = eval(store, &mut build)?;
            store.value_mut(name)?.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let g = grads[i];
            let denom = g.abs().max(fd.abs()).max(opts.denom_floor);
            let rel = (fd - g).abs() / denom;
            max_rel = max_rel.max(rel);
            checked += 1;
        }
        overall = overall.max(max_rel);
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: max_rel,
            checked,
        });
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: overall,
        tolerance: opts.tolerance,
        passed: overall < opts.tolerance,
    })
}
