//! Shared oracle helpers for the integration suites: random layer builders,
//! finite-difference Jacobians (re-exported from the crate) and a dense
//! determinant backed by nalgebra's LU, independent of the analytic
//! log-determinant path it checks.

#![allow(dead_code)]

use mintflow::autodiff::{Activation, NodeId, Tape};
use mintflow::flow::{Block, FlowModel, PreprocessConfig};
use mintflow::masks::Orientation;
use mintflow::mint::{MintInit, MintNodes, MintParams};
use mintflow::tensor::{ConvWeight, Tensor4};
use mintflow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use mintflow::fd::{fd_jacobian, max_offside};

/// `log|det|` of a dense matrix via LU decomposition.
pub fn log_abs_det(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let dm = nalgebra::DMatrix::from_fn(n, n, |r, c| m[r][c]);
    dm.lu().determinant().abs().ln()
}

pub fn det(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let dm = nalgebra::DMatrix::from_fn(n, n, |r, c| m[r][c]);
    dm.lu().determinant()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    Tensor4::from_fn(n, c, h, w, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// Near-identity layer from the standard initializer.
pub fn init_layer(rng: &mut ChaCha8Rng, c: usize, k: usize, r: usize, o: Orientation) -> MintParams {
    MintParams::init(&MintInit::new(c, k, r, o), rng).unwrap()
}

/// Fully randomized layer: scaled weights plus random biases and log-scales.
pub fn random_layer(
    rng: &mut ChaCha8Rng,
    c: usize,
    k: usize,
    r: usize,
    o: Orientation,
    weight_scale: f64,
) -> MintParams {
    let mut init = MintInit::new(c, k, r, o);
    init.weight_scale = weight_scale;
    let mut p = MintParams::init(&init, rng).unwrap();
    for b in p.b1.iter_mut().chain(&mut p.b2).chain(&mut p.b3) {
        *b = rng.random_range(-0.3..0.3);
    }
    for t in p.log_t.iter_mut() {
        *t = rng.random_range(-0.5..0.5);
    }
    p
}

/// A lower/upper pair sharing `(C, K, R)`.
pub fn init_pair(rng: &mut ChaCha8Rng, c: usize, k: usize, r: usize) -> Block {
    Block::PairedMint {
        lower: init_layer(rng, c, k, r, Orientation::Lower),
        upper: init_layer(rng, c, k, r, Orientation::Upper),
    }
}

/// A pair of fully randomized layers (weights, biases, log-scales).
pub fn random_pair(rng: &mut ChaCha8Rng, c: usize, k: usize, r: usize, scale: f64) -> Block {
    Block::PairedMint {
        lower: random_layer(rng, c, k, r, Orientation::Lower, scale),
        upper: random_layer(rng, c, k, r, Orientation::Upper, scale),
    }
}

/// Push every center same-channel weight at least `min_mag` away from zero,
/// keeping its sign. Finite differences across the sign-fix boundary are
/// invalid, so gradient-check fixtures use this.
pub fn harden_center_diags(p: &mut MintParams, min_mag: f64) {
    let (c, k) = (p.channels(), p.k_groups());
    let ctr = p.kernel() / 2;
    let bump = |v: &mut f64| {
        if v.abs() < min_mag {
            *v = if *v < 0.0 { -min_mag } else { min_mag };
        }
    };
    for j in 0..k {
        for ch in 0..c {
            bump(p.w1.at_mut(j * c + ch, ch, ctr, ctr));
            bump(p.w3.at_mut(ch, j * c + ch, ctr, ctr));
        }
    }
    for i in 0..k {
        for j in 0..k {
            for ch in 0..c {
                bump(p.w2.at_mut(i * c + ch, j * c + ch, ctr, ctr));
            }
        }
    }
}

/// Smallest pre-activation magnitude of a layer at `x` (distance from the
/// ELU kink), over both nonlinearities.
pub fn min_preactivation(p: &MintParams, x: &Tensor4) -> f64 {
    let m1 = mintflow::masks::grouped_mask(p.channels(), p.k_groups(), 1, p.kernel(), p.orientation())
        .unwrap();
    let m2 = mintflow::masks::grouped_mask(
        p.channels(),
        p.k_groups(),
        p.k_groups(),
        p.kernel(),
        p.orientation(),
    )
    .unwrap();
    let pad = p.kernel() / 2;
    let u1 = mintflow::tensor::conv2d(x, &m1.apply(&p.w1).unwrap(), Some(&p.b1), pad).unwrap();
    let a1 = u1.map(|u| p.activation().h(u));
    let u2 = mintflow::tensor::conv2d(&a1, &m2.apply(&p.effective_w2()).unwrap(), Some(&p.b2), pad)
        .unwrap();
    u1.data()
        .iter()
        .chain(u2.data())
        .map(|v| v.abs())
        .fold(f64::INFINITY, f64::min)
}

pub fn preprocess_default() -> PreprocessConfig {
    PreprocessConfig { lambda: 0.05, levels: 256 }
}

/// Rebuild a [`MintParams`] from seven tensors in canonical order
/// (w1, w2, w3, b1, b2, b3, log_t), as stored on tape leaves.
pub fn layer_from_tensors(
    tensors: &[Tensor4],
    k: usize,
    o: Orientation,
    act: Activation,
) -> Result<MintParams> {
    MintParams::new(
        ConvWeight::from_tensor(&tensors[0])?,
        ConvWeight::from_tensor(&tensors[1])?,
        ConvWeight::from_tensor(&tensors[2])?,
        tensors[3].data().to_vec(),
        tensors[4].data().to_vec(),
        tensors[5].data().to_vec(),
        tensors[6].data().to_vec(),
        k,
        o,
        act,
    )
}

pub fn mint_nodes(ids: &[NodeId]) -> MintNodes {
    MintNodes {
        w1: ids[0],
        w2: ids[1],
        w3: ids[2],
        b1: ids[3],
        b2: ids[4],
        b3: ids[5],
        log_t: ids[6],
    }
}

/// Build the differentiable NLL core `(0.5*||z||^2 - sum log-dets) / n` for a
/// stack of Mint layers whose parameters come from the given tape leaves
/// (seven per layer). Sign factors are recomputed from the leaf values so
/// finite-difference probes see the same straight-through constants.
pub fn nll_core_from_leaves(
    tape: &mut Tape,
    ids: &[NodeId],
    layout: &[(usize, Orientation, Activation)],
    y: &Tensor4,
) -> Result<NodeId> {
    let mut cur = tape.constant(y.clone());
    let mut logdet: Option<NodeId> = None;
    for (li, &(k, o, act)) in layout.iter().enumerate() {
        let slice = &ids[li * 7..(li + 1) * 7];
        let values: Vec<Tensor4> = slice
            .iter()
            .map(|&id| tape.value(id).cloned())
            .collect::<Result<_>>()?;
        let params = layer_from_tensors(&values, k, o, act)?;
        let nodes = mint_nodes(slice);
        let out = mintflow::mint::build_tape(tape, &params, &nodes, cur)?;
        cur = out.y;
        logdet = Some(match logdet {
            Some(acc) => tape.add(acc, out.log_det_sum)?,
            None => out.log_det_sum,
        });
    }
    let zsq = tape.mul(cur, cur)?;
    let half = tape.sum_all(zsq)?;
    let half = tape.scale(half, 0.5)?;
    let diff = tape.sub(half, logdet.expect("at least one layer"))?;
    tape.scale(diff, 1.0 / y.n() as f64)
}

/// Leaf tensors of a layer in canonical order.
pub fn layer_tensors(p: &MintParams) -> Vec<Tensor4> {
    vec![
        p.w1.as_tensor(),
        p.w2.as_tensor(),
        p.w3.as_tensor(),
        Tensor4::from_channel_vec(&p.b1),
        Tensor4::from_channel_vec(&p.b2),
        Tensor4::from_channel_vec(&p.b3),
        Tensor4::from_channel_vec(&p.log_t),
    ]
}

/// A model of `pairs` paired layers at one channel width (no squeeze).
pub fn stack_model(rng: &mut ChaCha8Rng, c: usize, hw: usize, k: usize, pairs: usize) -> FlowModel {
    let blocks = (0..pairs).map(|_| init_pair(rng, c, k, 3)).collect();
    FlowModel::new((c, hw, hw), blocks, preprocess_default()).unwrap()
}
