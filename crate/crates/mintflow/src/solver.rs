//! Inversion of triangular-Jacobian maps.
//!
//! The workhorse is a diagonally preconditioned fixed-point iteration
//! `x <- x - alpha * (f(x) - z) / diag(J_f(x))`, locally convergent for
//! `0 < alpha < 2` (at the fixed point the iteration matrix has `1 - alpha`
//! as its only eigenvalue). A per-coordinate bisection solver provides an
//! independent ground truth: it visits each of the `D` flat coordinates once
//! in triangular order, which is exactly the sequential cost the fixed-point
//! method avoids.

use crate::error::{Error, Result};
use crate::masks::Orientation;
use crate::mint::MintParams;
use crate::tensor::Tensor4;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;

/// Step size, iteration cap and convergence threshold for the fixed-point
/// iteration.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub alpha: f64,
    pub max_iters: usize,
    /// Normalized-L2 threshold `||f(x)-z||^2 / D`.
    pub tol: f64,
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { alpha: 1.0, max_iters: 120, tol: 1e-8, record_trace: false }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArg(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArg("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArg(format!("tol must be > 0, got {}", self.tol)));
        }
        Ok(())
    }

    /// The local-convergence guarantee only covers `0 < alpha < 2`; larger
    /// steps are permitted but flagged in the result.
    pub fn alpha_guaranteed(&self) -> bool {
        self.alpha > 0.0 && self.alpha < 2.0
    }
}

/// Outcome of one fixed-point inversion.
#[derive(Clone, Debug)]
pub struct InversionResult {
    pub x: Tensor4,
    /// Update steps actually applied.
    pub iterations_used: usize,
    /// `||f(x)-z||^2 / D` at the returned iterate.
    pub final_error: f64,
    /// Per-iteration errors (index 0 is the error at `x0`) when requested.
    pub trace: Option<Vec<f64>>,
    /// Set when `alpha` lies outside the `(0, 2)` guarantee window.
    pub alpha_unguaranteed: bool,
}

/// Mean squared difference per coordinate, the reconstruction-error metric
/// used throughout (for batches this averages over all elements).
pub fn normalized_l2(a: &Tensor4, b: &Tensor4) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let ss: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    ss / a.len() as f64
}

/// Invert `f` at `z` by fixed-point iteration with diagonal preconditioning.
///
/// Stops after `cfg.max_iters` updates or as soon as the normalized error
/// drops to `cfg.tol`, whichever comes first. A non-finite iterate or a
/// non-positive Jacobian diagonal aborts with a divergence error naming the
/// iteration.
pub fn invert_fixed_point(
    f: impl Fn(&Tensor4) -> Result<Tensor4>,
    jd: impl Fn(&Tensor4) -> Result<Tensor4>,
    z: &Tensor4,
    x0: &Tensor4,
    cfg: &SolverConfig,
) -> Result<InversionResult> {
    cfg.validate()?;
    if x0.shape() != z.shape() {
        return Err(Error::ShapeMismatch {
            context: "invert_fixed_point",
            expected: z.shape_str(),
            got: x0.shape_str(),
        });
    }
    let mut x = x0.clone();
    let mut trace = cfg.record_trace.then(Vec::new);

    for it in 0..=cfg.max_iters {
        let fx = f(&x)?;
        let err = normalized_l2(&fx, z);
        if !err.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                detail: "non-finite residual".into(),
            });
        }
        if let Some(t) = trace.as_mut() {
            t.push(err);
        }
        if err <= cfg.tol || it == cfg.max_iters {
            return Ok(InversionResult {
                x,
                iterations_used: it,
                final_error: err,
                trace,
                alpha_unguaranteed: !cfg.alpha_guaranteed(),
            });
        }
        let j = jd(&x)?;
        for (i, &jv) in j.data().iter().enumerate() {
            if !(jv > 0.0) || !jv.is_finite() {
                return Err(Error::Divergence {
                    iteration: it,
                    detail: format!("Jacobian diagonal entry {i} is {jv}"),
                });
            }
            let step = cfg.alpha * (fx.data()[i] - z.data()[i]) / jv;
            x.data_mut()[i] -= step;
        }
        if !x.all_finite() {
            return Err(Error::Divergence {
                iteration: it + 1,
                detail: "non-finite iterate".into(),
            });
        }
    }
    unreachable!("loop always returns");
}

/// Result of the sequential per-coordinate inversion.
#[derive(Clone, Debug)]
pub struct SequentialInversion {
    pub x: Tensor4,
    /// Coordinate solves performed; exactly `n * D` by construction.
    pub coords_solved: usize,
    /// `max |f(x) - z|` over all coordinates at the solution.
    pub max_residual: f64,
}

/// Invert a triangular monotone map by solving one flat coordinate at a time
/// with bracketed bisection, in ascending flat order for lower orientation
/// and descending for upper.
///
/// This is the `O(D)` autoregressive baseline and test oracle: robust (no
/// smoothness assumptions beyond monotonicity of each coordinate in itself)
/// but sequential by nature. Per-coordinate bisection runs to an interval
/// width of 1e-12. Batch elements are solved independently; `f` must map
/// batch elements independently, as every layer here does.
pub fn invert_sequential_oracle(
    f: impl Fn(&Tensor4) -> Result<Tensor4>,
    z: &Tensor4,
    orientation: Orientation,
) -> Result<SequentialInversion> {
    const MAX_DOUBLINGS: usize = 60;
    const X_TOL: f64 = 1e-12;

    let d = z.dims_per_element();
    let mut x = Tensor4::zeros(z.n(), z.c(), z.h(), z.w());
    let mut coords_solved = 0usize;

    let order: Vec<usize> = match orientation {
        Orientation::Lower => (0..d).collect(),
        Orientation::Upper => (0..d).rev().collect(),
    };

    for bn in 0..z.n() {
        for &coord in &order {
            let flat = bn * d + coord;
            let target = z.data()[flat];
            let residual = |v: f64, x: &mut Tensor4| -> Result<f64> {
                x.data_mut()[flat] = v;
                Ok(f(x)?.data()[flat] - target)
            };

            let v0 = x.data()[flat];
            let g0 = residual(v0, &mut x)?;
            if g0 == 0.0 {
                coords_solved += 1;
                continue;
            }

            // Expand a bracket around the current value.
            let mut step = 0.5 * (1.0 + v0.abs());
            let mut lo = v0 - step;
            let mut hi = v0 + step;
            let mut glo = residual(lo, &mut x)?;
            let mut ghi = residual(hi, &mut x)?;
            let mut doublings = 0;
            while glo * ghi > 0.0 {
                doublings += 1;
                if doublings > MAX_DOUBLINGS {
                    return Err(Error::BracketFailed { coord: flat, doublings });
                }
                step *= 2.0;
                lo = v0 - step;
                hi = v0 + step;
                glo = residual(lo, &mut x)?;
                ghi = residual(hi, &mut x)?;
            }
            // Orient so that the residual is increasing from lo to hi.
            if glo > ghi {
                std::mem::swap(&mut lo, &mut hi);
            }

            while (hi - lo).abs() > X_TOL {
                let mid = 0.5 * (lo + hi);
                if mid == lo || mid == hi {
                    break;
                }
                let gm = residual(mid, &mut x)?;
                if gm < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let root = 0.5 * (lo + hi);
            residual(root, &mut x)?;
            coords_solved += 1;
        }
    }

    let fx = f(&x)?;
    let max_residual = fx
        .data()
        .iter()
        .zip(z.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(SequentialInversion { x, coords_solved, max_residual })
}

/// One row of a step-size probe.
#[derive(Clone, Debug)]
pub struct ProbeRow {
    pub alpha: f64,
    /// First iteration at which the normalized error reached `tol`, if any.
    pub iterations_to_tol: Option<usize>,
    pub final_error: f64,
    /// Normalized error per iteration, starting at the error of `x0`.
    pub trace: Vec<f64>,
}

/// Run the fixed-point iteration on one layer for a grid of step sizes and
/// report the error traces. Divergence is recorded (infinite final error),
/// not raised. The target is `z = f(x_true)` for a standard-normal `x_true`,
/// so `z` is always in range, and the iteration starts at `x0 = z (.) 1/t`.
pub fn convergence_probe(
    layer: &MintParams,
    shape: (usize, usize, usize, usize),
    alphas: &[f64],
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    let (n, c, h, w) = shape;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let x_true = Tensor4::from_fn(n, c, h, w, |_, _, _, _| StandardNormal.sample(&mut rng));
    let compiled = layer.compiled()?;
    let z = compiled.forward(&x_true)?;
    let x0 = layer.default_x0(&z)?;

    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = SolverConfig {
            alpha,
            max_iters,
            tol,
            record_trace: true,
        };
        match invert_fixed_point(|x| compiled.forward(x), |x| compiled.jac_diag(x), &z, &x0, &cfg) {
            Ok(res) => {
                let trace = res.trace.unwrap_or_default();
                let iterations_to_tol = trace.iter().position(|&e| e <= tol);
                rows.push(ProbeRow {
                    alpha,
                    iterations_to_tol,
                    final_error: res.final_error,
                    trace,
                });
            }
            Err(Error::Divergence { iteration, .. }) => rows.push(ProbeRow {
                alpha,
                iterations_to_tol: None,
                final_error: f64::INFINITY,
                trace: vec![f64::INFINITY; iteration.max(1)],
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

/// Emit probe rows as CSV `(alpha, iter, error)`.
pub fn write_probe_csv(mut out: impl Write, rows: &[ProbeRow]) -> Result<()> {
    writeln!(out, "alpha,iter,error")?;
    for row in rows {
        for (it, err) in row.trace.iter().enumerate() {
            writeln!(out, "{},{},{:e}", row.alpha, it, err)?;
        }
    }
    Ok(())
}

/// Geometric mean of the per-iteration error contraction in the late stage of
/// a trace: ratios `sqrt(e_{t+1}/e_t)` over consecutive entries that sit well
/// inside the numerically trustworthy band, averaged over at most the last
/// ten such pairs.
pub fn late_stage_ratio(trace: &[f64]) -> Option<f64> {
    let mut ratios = Vec::new();
    for pair in trace.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a > 1e-24 && a < 1e-3 && b > 1e-24 && b < 1e-3 {
            ratios.push((b / a).sqrt());
        }
    }
    if ratios.is_empty() {
        return None;
    }
    let tail = &ratios[ratios.len().saturating_sub(10)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}
