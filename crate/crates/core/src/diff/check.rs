//! Central finite-difference gradient oracle.

use ndarray::Array2;

use super::tape::{DiffError, Tape, TensorId};

/// Relative error between two gradient estimates, floored so near-zero
/// gradients are compared absolutely.
pub fn grad_rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare the tape gradient of a scalar-valued tensor function against
/// central finite differences `(f(x + h e_k) - f(x - h e_k)) / 2h` for every
/// coordinate of `x`. Returns the maximum relative error.
///
/// `f` must rebuild the computation from scratch on the tape it is given;
/// the probe input is registered as the only differentiable leaf.
pub fn finite_difference_check<F>(f: F, x: &Array2<f64>, h: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId, DiffError>,
{
    assert!(h > 0.0, "step size must be positive");
    let mut tape = Tape::new();
    let xid = tape.param(x.clone());
    let loss = f(&mut tape, xid)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xid).expect("input is differentiable").clone();

    let eval = |probe: &Array2<f64>| -> Result<f64, DiffError> {
        let mut t = Tape::new();
        let id = t.constant(probe.clone());
        let out = f(&mut t, id)?;
        if t.shape(out) != (1, 1) {
            return Err(DiffError::NonScalarLoss(t.shape(out)));
        }
        Ok(t.value(out)[[0, 0]])
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            let orig = probe[[r, c]];
            probe[[r, c]] = orig + h;
            let plus = eval(&probe)?;
            probe[[r, c]] = orig - h;
            let minus = eval(&probe)?;
            probe[[r, c]] = orig;
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max(grad_rel_error(analytic[[r, c]], fd));
        }
    }
    Ok(worst)
}
