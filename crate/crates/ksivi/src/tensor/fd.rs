//! Finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the reverse-mode gradient of a scalar function against central
/// finite differences.
///
/// `f` builds the scalar on a tape from a 1xd leaf. Returns the maximum over
/// coordinates of `|g_ad - g_fd| / (|g_fd| + 1e-8)`.
pub fn finite_diff_check(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    point: &[f64],
    step: f64,
) -> Result<f64> {
    let eval = |coords: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(coords));
        let root = f(&mut tape, x)?;
        let v = tape.value(root);
        if !v.is_scalar() {
            let (rows, cols) = v.shape();
            return Err(Error::NonScalarRoot { rows, cols });
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::NonFinite("finite_diff_check evaluation"));
        }
        Ok(y)
    };

    // Reverse-mode gradient at the point.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::row(point));
    let root = f(&mut tape, x)?;
    let grads = tape.backward(root)?;
    let g_ad = grads
        .get(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);
    if g_ad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("finite_diff_check gradient"));
    }

    let mut worst: f64 = 0.0;
    let mut perturbed = point.to_vec();
    for i in 0..point.len() {
        perturbed[i] = point[i] + step;
        let plus = eval(&perturbed)?;
        perturbed[i] = point[i] - step;
        let minus = eval(&perturbed)?;
        perturbed[i] = point[i];
        let g_fd = (plus - minus) / (2.0 * step);
        let rel = (g_ad[i] - g_fd).abs() / (g_fd.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_gradient_matches() {
        // f(x) = x^3 at x = 2: analytic derivative 12.
        let err = finite_diff_check(
            |tape, x| {
                let p = tape.pow_const(x, 3.0);
                Ok(tape.sum_all(p))
            },
            &[2.0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = finite_diff_check(
            |tape, x| {
                let z = tape.scale(x, 0.0);
                Ok(tape.sum_all(z))
            },
            &[0.7, -0.1],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn every_primitive_passes_fd_on_random_tensors() {
        // One composite touching each differentiable primitive.
        let point: Vec<f64> = (0..6).map(|i| 0.37 + 0.21 * i as f64).collect();
        let err = finite_diff_check(
            |tape, x| {
                let w = tape.constant(Tensor::new(6, 3, (0..18).map(|i| (i as f64) * 0.1 - 0.7).collect()));
                let m = tape.matmul(x, w); // 1x3
                let shifted = tape.add_scalar(m, 2.5); // keep ln/pow in-domain
                let r = tape.relu(shifted);
                let r_small = tape.scale(r, 0.05);
                let e = tape.exp(r_small);
                let l = tape.ln(shifted);
                let p = tape.pow_const(shifted, 1.7);
                let d = tape.div(e, shifted);
                let s = tape.add(l, p);
                let t = tape.mul(s, d);
                let b = tape.broadcast_row(t, 4); // 4x3
                let rows = tape.sum_rows(b); // 4x1
                let cols = tape.sum_cols(b); // 1x3
                let r1 = tape.sum_all(rows);
                let r2 = tape.sum_all(cols);
                let both = tape.add(r1, r2);
                let bs = tape.broadcast_scalar(both, 2, 2);
                Ok(tape.sum_all(bs))
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }
}
