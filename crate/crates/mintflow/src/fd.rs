//! Central finite-difference Jacobians for audits and test oracles.

use crate::error::{Error, Result};
use crate::masks::Orientation;
use crate::tensor::Tensor4;

/// Dense Jacobian of `f` at a single-element batch `x` by central
/// differences: `J[row][col] = d f(x)[row] / d x[col]` over the flat
/// channel-major raster ordering.
pub fn fd_jacobian(
    f: impl Fn(&Tensor4) -> Result<Tensor4>,
    x: &Tensor4,
    eps: f64,
) -> Result<Vec<Vec<f64>>> {
    if x.n() != 1 {
        return Err(Error::InvalidArg("fd_jacobian expects a single-element batch".into()));
    }
    let d = x.dims_per_element();
    if d > 4096 {
        return Err(Error::InvalidArg(format!("fd_jacobian dimension {d} exceeds the 4096 guard")));
    }
    let mut jac = vec![vec![0.0; d]; d];
    let mut xp = x.clone();
    for col in 0..d {
        let orig = x.data()[col];
        xp.data_mut()[col] = orig + eps;
        let fp = f(&xp)?;
        xp.data_mut()[col] = orig - eps;
        let fm = f(&xp)?;
        xp.data_mut()[col] = orig;
        for row in 0..d {
            jac[row][col] = (fp.data()[row] - fm.data()[row]) / (2.0 * eps);
        }
    }
    Ok(jac)
}

/// Largest magnitude on the wrong side of the diagonal for the given
/// orientation (0 for an exactly triangular matrix).
pub fn max_offside(jac: &[Vec<f64>], o: Orientation) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in jac.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let offending = match o {
                Orientation::Lower => j > i,
                Orientation::Upper => j < i,
            };
            if offending {
                worst = worst.max(v.abs());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor;

    #[test]
    fn jacobian_of_linear_map_is_exact() {
        let x = Tensor4::from_fn(1, 1, 2, 2, |_, _, y, xx| (y + xx) as f64 * 0.3 - 0.2);
        let jac = fd_jacobian(|t| Ok(tensor::scale(t, 2.5)), &x, 1e-6).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 2.5 } else { 0.0 };
                assert!((jac[i][j] - want).abs() < 1e-9);
            }
        }
        assert!(max_offside(&jac, Orientation::Lower) < 1e-9);
    }
}
