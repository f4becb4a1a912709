//! Dense tensor arithmetic with reverse-mode differentiation, plus the
//! finite-difference oracle, Adam, checkpoints, and sparse adjacency support.

mod adam;
mod check;
pub mod checkpoint;
mod sparse;
mod tape;

pub use adam::{adam_step, AdamParams, AdamState};
pub use check::{finite_difference_check, grad_rel_error};
pub use sparse::SparseMatrix;
pub use tape::{BnBatchStat, DiffError, Tape, TensorId};

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn matmul_identity_is_identity() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let i = t.constant(Array2::eye(2));
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c), &array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn relu_subgradients() {
        let mut t = Tape::new();
        let x = t.param(array![[-1.0, 2.0]]);
        let y = t.relu(x).unwrap();
        let s = t.reduce_sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &array![[0.0, 1.0]]);
    }

    #[test]
    fn fanout_accumulates_additively() {
        // y = x * x + x: dy/dx = 2x + 1.
        let mut t = Tape::new();
        let x = t.param(array![[3.0]]);
        let sq = t.mul(x, x).unwrap();
        let y = t.add(sq, x).unwrap();
        let s = t.reduce_sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap()[[0, 0]], 7.0);
    }

    #[test]
    fn detached_tensors_never_accumulate_gradient() {
        let mut t = Tape::new();
        let x = t.param(array![[1.0, 2.0]]);
        let c = t.constant(array![[5.0, 5.0]]);
        let y = t.mul(x, c).unwrap();
        let s = t.reduce_sum(y).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap(), &array![[5.0, 5.0]]);
    }

    #[test]
    fn non_finite_forward_is_a_tagged_fault() {
        let mut t = Tape::new();
        let x = t.constant(array![[710.0]]);
        assert!(matches!(t.exp(x), Err(DiffError::NumericFault { .. })));
        let z = t.constant(array![[0.0]]);
        assert!(matches!(t.log(z), Err(DiffError::NumericFault { .. })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3)));
        let b = t.constant(Array2::zeros((2, 3)));
        assert!(matches!(t.matmul(a, b), Err(DiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_linearity() {
        // grad of (a*f + b*g) equals a*grad f + b*grad g.
        let x0 = array![[0.3, -0.7], [1.2, 0.4]];
        let grad_of = |wa: f64, wb: f64| -> Array2<f64> {
            let mut t = Tape::new();
            let x = t.param(x0.clone());
            let e = t.exp(x).unwrap();
            let f = t.reduce_sum(e).unwrap();
            let m = t.mul(x, x).unwrap();
            let g = t.reduce_sum(m).unwrap();
            let fa = t.scale(f, wa).unwrap();
            let gb = t.scale(g, wb).unwrap();
            let loss = t.add(fa, gb).unwrap();
            t.backward(loss).unwrap();
            t.grad(x).unwrap().clone()
        };
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        let combined = grad_of(2.5, -1.5);
        let expect = &gf * 2.5 + &gg * (-1.5);
        for (a, b) in combined.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_values_are_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.constant(Array2::from_shape_fn((4, 4), |(i, j)| ((i * 7 + j * 3) as f64).sin()));
            let y = t.row_softmax(x).unwrap();
            let z = t.matmul_nt(y, y).unwrap();
            t.value(z).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
