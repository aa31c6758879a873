//! Cross-module oracle tests: finite-difference Jacobians and dense
//! determinants against the analytic paths, and the composition rules that
//! justify stacking triangular layers in the first place.

mod common;

use common::*;
use mintflow::autodiff::{grad_check, Activation};
use mintflow::flow::{self, Block, FlowModel};
use mintflow::masks::Orientation;
use mintflow::tensor::{self, Tensor4};

/// Sum plus composition of lower-triangular layers stays lower triangular.
#[test]
fn composition_rules_preserve_triangularity() {
    let mut r = rng(101);
    let f1 = random_layer(&mut r, 2, 2, 3, Orientation::Lower, 0.3);
    let f2 = random_layer(&mut r, 2, 2, 3, Orientation::Lower, 0.3);
    let c1 = f1.compiled().unwrap();
    let c2 = f2.compiled().unwrap();
    let x = random_tensor(&mut r, 1, 2, 4, 4);
    let (lam, mu) = (0.7, -1.3);

    let jac_sum = fd_jacobian(
        |t| {
            let a = c1.forward(t)?;
            let b = c2.forward(t)?;
            tensor::add(&tensor::scale(&a, lam), &tensor::scale(&b, mu))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(max_offside(&jac_sum, Orientation::Lower) < 1e-6);

    let jac_comp = fd_jacobian(|t| c2.forward(&c1.forward(t)?), &x, 1e-6).unwrap();
    assert!(max_offside(&jac_comp, Orientation::Lower) < 1e-6);
}

/// The sum of per-layer log-determinants equals the log-determinant of the
/// dense Jacobian of the whole model, squeeze included (stacking rule).
#[test]
fn whole_model_log_det_matches_dense_jacobian() {
    let mut r = rng(103);
    let model = FlowModel::new(
        (1, 4, 4),
        vec![
            init_pair(&mut r, 1, 2, 3),
            Block::Squeeze { k: 2 },
            init_pair(&mut r, 4, 2, 3),
        ],
        preprocess_default(),
    )
    .unwrap();
    let x = random_tensor(&mut r, 1, 1, 4, 4);
    let (_, logdet) = flow::forward(&model, &x).unwrap();

    let jac = fd_jacobian(
        |t| {
            let (z, _) = flow::forward(&model, t)?;
            // Flatten the latent back onto the input layout for the oracle.
            z.reshaped(1, t.c(), t.h(), t.w())
        },
        &x,
        1e-6,
    )
    .unwrap();
    let want = log_abs_det(&jac);
    assert!(
        (logdet[0] - want).abs() < 1e-4,
        "analytic {} vs dense {}",
        logdet[0],
        want
    );
}

/// One layer's log-prob change is exactly the base-density change plus the
/// dense-Jacobian log-determinant.
#[test]
fn log_prob_decomposes_per_layer() {
    let mut r = rng(107);
    let model = stack_model(&mut r, 1, 4, 2, 1);
    let x = random_tensor(&mut r, 1, 1, 4, 4);
    let (z, logdet) = flow::forward(&model, &x).unwrap();
    let lp = flow::log_prob(&model, &x).unwrap()[0];
    assert!((lp - (flow::base_log_prob(&z)[0] + logdet[0])).abs() < 1e-12);

    let jac = fd_jacobian(|t| Ok(flow::forward(&model, t)?.0), &x, 1e-6).unwrap();
    assert!((logdet[0] - log_abs_det(&jac)).abs() < 1e-4);
}

/// Gradient of the log-det term alone (the path that exercises h'') against
/// finite differences.
#[test]
fn log_det_gradient_matches_finite_differences() {
    let mut r = rng(109);
    let layer = random_layer(&mut r, 2, 2, 3, Orientation::Lower, 0.3);
    let y = random_tensor(&mut r, 1, 2, 4, 4);
    let layout = [(2, Orientation::Lower, Activation::Elu)];
    let params = layer_tensors(&layer);

    let err = grad_check(
        |tape, ids| {
            let values: Vec<Tensor4> = ids
                .iter()
                .map(|&id| tape.value(id).cloned())
                .collect::<mintflow::Result<_>>()?;
            let p = layer_from_tensors(&values, layout[0].0, layout[0].1, layout[0].2)?;
            let nodes = mint_nodes(ids);
            let xn = tape.constant(y.clone());
            let out = mintflow::mint::build_tape(tape, &p, &nodes, xn)?;
            tape.scale(out.log_det_sum, -1.0)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-3, "max relative error {err}");
}

/// Tanh layers satisfy the same diagonal formula as ELU layers.
#[test]
fn tanh_layer_jacobian_diagonal_checks_out() {
    let mut r = rng(113);
    let mut init = mintflow::mint::MintInit::new(2, 2, 3, Orientation::Lower);
    init.activation = Activation::Tanh;
    init.weight_scale = 0.4;
    let layer = mintflow::mint::MintParams::init(&init, &mut r).unwrap();
    let compiled = layer.compiled().unwrap();
    let x = random_tensor(&mut r, 1, 2, 3, 3);
    let analytic = compiled.jac_diag(&x).unwrap();
    let jac = fd_jacobian(|t| compiled.forward(t), &x, 1e-6).unwrap();
    for (i, row) in jac.iter().enumerate() {
        assert!((row[i] - analytic.data()[i]).abs() < 1e-6);
    }
    assert!(max_offside(&jac, Orientation::Lower) < 1e-6);
}
