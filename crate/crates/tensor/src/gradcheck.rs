//! Central-difference gradient oracle.

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that coordinates
    /// whose true gradient is zero compare on an absolute scale.
    pub floor: f64,
    /// If set, at most this many evenly spaced coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-4,
            tolerance: 1e-3,
            floor: 1e-6,
            max_coords_per_param: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn scalar(loss: &Var) -> Result<f64> {
    loss.value().item()
}

/// Compares the tape gradient of `f` with central differences for every
/// trainable parameter in `store`. Parameter values are restored bit-exactly
/// afterwards; gradient buffers hold the analytic gradient.
pub fn grad_check<F>(store: &mut ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> { scalar(&f(&Tape::new(), store)?) };
    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::Oracle(format!(
            "function is not deterministic: {first} then {second}"
        )));
    }

    store.zero_grad();
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    tape.backward(&loss, store)?;
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        passed: true,
    };
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen()).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let grad = store.grad(id).expect("backward allocates grads").data().to_vec();
        for i in coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.h;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = orig - opts.h;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.h);
            let err = relative_error(grad[i], numeric, opts.floor);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((store.get(id).name.clone(), i));
                report.analytic = grad[i];
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_err < opts.tolerance;
    Ok(report)
}
