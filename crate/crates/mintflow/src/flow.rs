//! Normalizing flow assembled from paired Mint layers and squeeze reshapes.
//!
//! The forward direction maps preprocessed images to latents while summing
//! the exact per-layer log-determinants; the base density is a standard
//! normal over the final latent shape, so the log-likelihood is
//! `log pi(z) + sum log|det J|` with no estimation anywhere. Squeezes are
//! coordinate permutations and contribute exactly zero.
//!
//! Pixel data enters through uniform dequantization and a logit transform:
//! `s = lambda + (1 - 2*lambda) * (raw + u) / levels`, `y = logit(s)`, whose
//! exact log-Jacobian is charged to the model so bits-per-dimension values
//! follow the usual convention for uniformly dequantized images.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::masks::Orientation;
use crate::mint::{self, MintNodes, MintParams};
use crate::solver::{self, SolverConfig};
use crate::tensor::{self, Tensor4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use crate::tensor::{squeeze, unsqueeze};

const LN_2PI: f64 = 1.8378770664093453;

/// One stage of the flow.
#[derive(Clone, Debug)]
pub enum Block {
    /// Two Mint layers, lower-orientation first, so the pair's Jacobian is
    /// not triangular and masked-conv blind spots cancel.
    PairedMint { lower: MintParams, upper: MintParams },
    /// Space-to-depth reshape; invertible with identity Jacobian.
    Squeeze { k: usize },
}

/// Dequantization / logit settings.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Logit margin in `(0, 0.5)`: 1e-6 suits near-binary data, 0.05 noisy
    /// natural-image-like data.
    pub lambda: f64,
    /// Pixel quantization levels (256 for 8-bit images).
    pub levels: u32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { lambda: 0.05, levels: 256 }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 0.5) {
            return Err(Error::InvalidArg(format!(
                "lambda must lie in (0, 0.5), got {}",
                self.lambda
            )));
        }
        if self.levels < 2 {
            return Err(Error::InvalidArg("levels must be >= 2".into()));
        }
        Ok(())
    }
}

/// Ordered blocks plus input shape and preprocessing settings.
#[derive(Clone, Debug)]
pub struct FlowModel {
    blocks: Vec<Block>,
    input_shape: (usize, usize, usize),
    preprocess: PreprocessConfig,
}

impl FlowModel {
    /// Validates pair structure and shape bookkeeping: paired layers share
    /// `(C, K, R)` with opposite orientations, squeezes divide the running
    /// spatial dims, and the latent dimension equals the input dimension.
    pub fn new(
        input_shape: (usize, usize, usize),
        blocks: Vec<Block>,
        preprocess: PreprocessConfig,
    ) -> Result<Self> {
        preprocess.validate()?;
        let (mut c, mut h, mut w) = input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArg("input shape must be nonzero".into()));
        }
        for (bi, block) in blocks.iter().enumerate() {
            match block {
                Block::PairedMint { lower, upper } => {
                    if lower.orientation() != Orientation::Lower
                        || upper.orientation() != Orientation::Upper
                    {
                        return Err(Error::InvalidArg(format!(
                            "block {bi}: pair must be lower-then-upper"
                        )));
                    }
                    let same = lower.channels() == upper.channels()
                        && lower.k_groups() == upper.k_groups()
                        && lower.kernel() == upper.kernel();
                    if !same {
                        return Err(Error::InvalidArg(format!(
                            "block {bi}: paired layers must share (C, K, R)"
                        )));
                    }
                    if lower.channels() != c {
                        return Err(Error::ShapeMismatch {
                            context: "FlowModel::new",
                            expected: format!("{c} channels at block {bi}"),
                            got: format!("{}", lower.channels()),
                        });
                    }
                }
                Block::Squeeze { k } => {
                    if *k < 2 || h % k != 0 || w % k != 0 {
                        return Err(Error::InvalidArg(format!(
                            "block {bi}: squeeze factor {k} does not divide {h}x{w}"
                        )));
                    }
                    c *= k * k;
                    h /= k;
                    w /= k;
                }
            }
        }
        Ok(Self { blocks, input_shape, preprocess })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        self.preprocess
    }

    /// Input (= latent) dimension count.
    pub fn dims(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let (mut c, mut h, mut w) = self.input_shape;
        for block in &self.blocks {
            if let Block::Squeeze { k } = block {
                c *= k * k;
                h /= k;
                w /= k;
            }
        }
        (c, h, w)
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if (x.c(), x.h(), x.w()) != (c, h, w) {
            return Err(Error::ShapeMismatch {
                context: "FlowModel input",
                expected: format!("(_,{c},{h},{w})"),
                got: x.shape_str(),
            });
        }
        Ok(())
    }

    /// Stable `(name, data)` listing of every learnable tensor, used by the
    /// optimizer and the checkpoint format.
    pub fn param_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            if let Block::PairedMint { lower, upper } = block {
                for (side, layer) in [("lower", lower), ("upper", upper)] {
                    for (name, data) in layer.tensors() {
                        out.push((format!("block{bi}.{side}.{name}"), data));
                    }
                }
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            if let Block::PairedMint { lower, upper } = block {
                for (side, layer) in [("lower", lower), ("upper", upper)] {
                    for (name, data) in layer.tensors_mut() {
                        out.push((format!("block{bi}.{side}.{name}"), data));
                    }
                }
            }
        }
        out
    }
}

/// Dequantize and logit-transform a batch of raw pixels with explicit noise.
/// Returns the transformed tensor and the per-element log-Jacobian.
pub fn preprocess_with_noise(
    raw: &Tensor4,
    noise: &Tensor4,
    cfg: &PreprocessConfig,
) -> Result<(Tensor4, Vec<f64>)> {
    cfg.validate()?;
    if raw.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            context: "preprocess noise",
            expected: raw.shape_str(),
            got: noise.shape_str(),
        });
    }
    let levels = cfg.levels as f64;
    let lam = cfg.lambda;
    let mut y = Tensor4::zeros(raw.n(), raw.c(), raw.h(), raw.w());
    let d = raw.dims_per_element();
    let mut logdet = vec![0.0; raw.n()];
    for (i, (&p, &u)) in raw.data().iter().zip(noise.data()).enumerate() {
        if !(0.0..=(levels - 1.0)).contains(&p) {
            return Err(Error::InvalidArg(format!(
                "pixel value {p} outside [0, {}]",
                levels - 1.0
            )));
        }
        if !(0.0..1.0).contains(&u) {
            return Err(Error::InvalidArg(format!("dequantization noise {u} outside [0,1)")));
        }
        let s = lam + (1.0 - 2.0 * lam) * (p + u) / levels;
        y.data_mut()[i] = s.ln() - (1.0 - s).ln();
        logdet[i / d] += (1.0 - 2.0 * lam).ln() - levels.ln() - s.ln() - (1.0 - s).ln();
    }
    Ok((y, logdet))
}

/// Uniform-dequantization preprocessing with noise drawn from `rng`.
pub fn preprocess(
    raw: &Tensor4,
    cfg: &PreprocessConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor4, Vec<f64>)> {
    let noise = Tensor4::from_fn(raw.n(), raw.c(), raw.h(), raw.w(), |_, _, _, _| {
        rng.random_range(0.0..1.0)
    });
    preprocess_with_noise(raw, &noise, cfg)
}

/// Exact inverse of the logit chain back to dequantized pixel values
/// `raw + u` in `[0, levels)`. No clamping here.
pub fn inverse_preprocess(y: &Tensor4, cfg: &PreprocessConfig) -> Tensor4 {
    let levels = cfg.levels as f64;
    let lam = cfg.lambda;
    y.map(|v| {
        let s = 1.0 / (1.0 + (-v).exp());
        (s - lam) / (1.0 - 2.0 * lam) * levels
    })
}

/// Standard-normal log-density per batch element.
pub fn base_log_prob(z: &Tensor4) -> Vec<f64> {
    let d = z.dims_per_element() as f64;
    let sq = tensor::sum_per_element(&z.map(|v| v * v));
    sq.iter().map(|&s| -0.5 * d * LN_2PI - 0.5 * s).collect()
}

/// Run the blocks forward; returns the latent and the per-element sum of the
/// Mint-layer log-determinants (squeezes contribute exactly zero).
pub fn forward(model: &FlowModel, x: &Tensor4) -> Result<(Tensor4, Vec<f64>)> {
    model.check_input(x)?;
    let mut cur = x.clone();
    let mut logdet = vec![0.0; x.n()];
    for block in &model.blocks {
        match block {
            Block::PairedMint { lower, upper } => {
                for layer in [lower, upper] {
                    let compiled = layer.compiled()?;
                    let ld = compiled.log_det(&cur)?;
                    cur = compiled.forward(&cur)?;
                    for (acc, v) in logdet.iter_mut().zip(ld) {
                        *acc += v;
                    }
                }
            }
            Block::Squeeze { k } => {
                cur = tensor::squeeze(&cur, *k)?;
            }
        }
    }
    Ok((cur, logdet))
}

/// Exact log-likelihood of preprocessed inputs, one value per batch element.
pub fn log_prob(model: &FlowModel, x: &Tensor4) -> Result<Vec<f64>> {
    let (z, logdet) = forward(model, x)?;
    Ok(base_log_prob(&z)
        .iter()
        .zip(&logdet)
        .map(|(b, l)| b + l)
        .collect())
}

/// Aggregate iteration statistics from a whole-model inversion.
#[derive(Clone, Copy, Debug, Default)]
pub struct InvertStats {
    /// Largest per-layer iteration count used.
    pub max_iterations: usize,
    /// Largest per-layer final normalized error.
    pub max_final_error: f64,
}

/// Invert the whole flow at `z` by inverting blocks in reverse order (upper
/// layer first within a pair). Divergence errors carry the block index.
pub fn invert(model: &FlowModel, z: &Tensor4, cfg: &SolverConfig) -> Result<(Tensor4, InvertStats)> {
    let mut cur = z.clone();
    let mut stats = InvertStats::default();
    for (bi, block) in model.blocks.iter().enumerate().rev() {
        match block {
            Block::Squeeze { k } => {
                cur = tensor::unsqueeze(&cur, *k)?;
            }
            Block::PairedMint { lower, upper } => {
                for (side, layer) in [("upper", upper), ("lower", lower)] {
                    let compiled = layer.compiled()?;
                    let x0 = layer.default_x0(&cur)?;
                    let res = solver::invert_fixed_point(
                        |x| compiled.forward(x),
                        |x| compiled.jac_diag(x),
                        &cur,
                        &x0,
                        cfg,
                    )
                    .map_err(|e| match e {
                        Error::Divergence { iteration, detail } => Error::Divergence {
                            iteration,
                            detail: format!("block {bi} ({side}): {detail}"),
                        },
                        other => other,
                    })?;
                    stats.max_iterations = stats.max_iterations.max(res.iterations_used);
                    stats.max_final_error = stats.max_final_error.max(res.final_error);
                    cur = res.x;
                }
            }
        }
    }
    Ok((cur, stats))
}

/// Bits per dimension on a raw pixel batch, charging the model for the full
/// dequantization + logit pipeline.
pub fn bpd(model: &FlowModel, raw: &Tensor4, rng: &mut impl Rng) -> Result<f64> {
    if raw.n() == 0 {
        return Err(Error::InvalidArg("bpd of an empty batch".into()));
    }
    let (y, logdet_pre) = preprocess(raw, &model.preprocess, rng)?;
    let lp = log_prob(model, &y)?;
    let d = raw.dims_per_element() as f64;
    let total: f64 = lp.iter().zip(&logdet_pre).map(|(a, b)| a + b).sum();
    Ok(-total / (raw.n() as f64 * d * std::f64::consts::LN_2))
}

/// Drawn samples in pixel space.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Dequantized pixel values clamped to `[0, 255]`.
    pub pixels: Tensor4,
    /// Fraction of coordinates that fell outside the valid pixel range
    /// before clamping (reported, not hidden).
    pub clipped_fraction: f64,
    pub stats: InvertStats,
}

/// Draw `n` samples: `z ~ N(0, I)` at the latent shape, invert every block,
/// then undo the logit/dequantization map.
pub fn sample(
    model: &FlowModel,
    n: usize,
    cfg: &SolverConfig,
    rng: &mut impl Rng,
) -> Result<SampleOutput> {
    let (c, h, w) = model.latent_shape();
    let z = Tensor4::from_fn(n, c, h, w, |_, _, _, _| StandardNormal.sample(rng));
    let (y, stats) = invert(model, &z, cfg)?;
    let v = inverse_preprocess(&y, &model.preprocess);
    let max = model.preprocess.levels as f64 - 1.0;
    let clipped = v.data().iter().filter(|&&p| p < 0.0 || p > max).count();
    let pixels = v.map(|p| p.clamp(0.0, max));
    Ok(SampleOutput {
        pixels,
        clipped_fraction: clipped as f64 / v.len().max(1) as f64,
        stats,
    })
}

/// Latent-space interpolation between four data points on a `grid_n x grid_n`
/// grid of angles `(phi, phi')` in `[0, pi/2]`:
///
/// `z = cos(phi)(cos(phi')z1 + sin(phi')z2) + sin(phi)(cos(phi')z3 + sin(phi')z4)`
///
/// with `phi` varying along rows and `phi'` along columns, so the corners
/// reproduce the four inputs. Returns decoded pixel-space images in row-major
/// grid order.
pub fn interpolate(
    model: &FlowModel,
    corners: [&Tensor4; 4],
    grid_n: usize,
    cfg: &SolverConfig,
    noise_seed: u64,
) -> Result<SampleOutput> {
    if grid_n < 2 {
        return Err(Error::InvalidArg("interpolation grid needs grid_n >= 2".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(noise_seed);
    use rand::SeedableRng;
    let mut latents = Vec::with_capacity(4);
    for x in corners {
        if x.n() != 1 {
            return Err(Error::InvalidArg("each interpolation corner is one image".into()));
        }
        let (y, _) = preprocess(x, &model.preprocess, &mut rng)?;
        let (z, _) = forward(model, &y)?;
        latents.push(z);
    }
    let (c, h, w) = model.latent_shape();
    let d = c * h * w;
    let mut grid = Tensor4::zeros(grid_n * grid_n, c, h, w);
    for row in 0..grid_n {
        let phi = row as f64 * std::f64::consts::FRAC_PI_2 / (grid_n - 1) as f64;
        for col in 0..grid_n {
            let phi2 = col as f64 * std::f64::consts::FRAC_PI_2 / (grid_n - 1) as f64;
            let coef = [
                phi.cos() * phi2.cos(),
                phi.cos() * phi2.sin(),
                phi.sin() * phi2.cos(),
                phi.sin() * phi2.sin(),
            ];
            let base = (row * grid_n + col) * d;
            for i in 0..d {
                grid.data_mut()[base + i] = coef
                    .iter()
                    .zip(&latents)
                    .map(|(k, z)| k * z.data()[i])
                    .sum();
            }
        }
    }
    let (y, stats) = invert(model, &grid, cfg)?;
    let v = inverse_preprocess(&y, &model.preprocess);
    let max = model.preprocess.levels as f64 - 1.0;
    let clipped = v.data().iter().filter(|&&p| p < 0.0 || p > max).count();
    Ok(SampleOutput {
        pixels: v.map(|p| p.clamp(0.0, max)),
        clipped_fraction: clipped as f64 / v.len().max(1) as f64,
        stats,
    })
}

/// Tape-side mirror of the block list.
pub enum BlockNodes {
    Pair { lower: MintNodes, upper: MintNodes },
    Squeeze,
}

/// Register every learnable tensor as a tape leaf, in `param_tensors` order.
pub fn register(tape: &mut Tape, model: &FlowModel) -> Vec<BlockNodes> {
    model
        .blocks
        .iter()
        .map(|block| match block {
            Block::PairedMint { lower, upper } => BlockNodes::Pair {
                lower: mint::register(tape, lower),
                upper: mint::register(tape, upper),
            },
            Block::Squeeze { .. } => BlockNodes::Squeeze,
        })
        .collect()
}

/// Leaf ids in the same order as [`FlowModel::param_tensors`].
pub fn leaf_ids(nodes: &[BlockNodes]) -> Vec<NodeId> {
    let mut out = Vec::new();
    for block in nodes {
        if let BlockNodes::Pair { lower, upper } = block {
            out.extend(lower.in_order());
            out.extend(upper.in_order());
        }
    }
    out
}

/// Build the whole-model forward pass on a tape; returns the latent node and
/// the batch-summed log-determinant node.
pub fn build_tape(
    tape: &mut Tape,
    model: &FlowModel,
    nodes: &[BlockNodes],
    x: NodeId,
) -> Result<(NodeId, NodeId)> {
    let mut cur = x;
    let mut logdet: Option<NodeId> = None;
    for (block, bnodes) in model.blocks.iter().zip(nodes) {
        match (block, bnodes) {
            (Block::PairedMint { lower, upper }, BlockNodes::Pair { lower: ln, upper: un }) => {
                for (layer, layer_nodes) in [(lower, ln), (upper, un)] {
                    let out = mint::build_tape(tape, layer, layer_nodes, cur)?;
                    cur = out.y;
                    logdet = Some(match logdet {
                        Some(acc) => tape.add(acc, out.log_det_sum)?,
                        None => out.log_det_sum,
                    });
                }
            }
            (Block::Squeeze { k }, BlockNodes::Squeeze) => {
                cur = tape.squeeze(cur, *k)?;
            }
            _ => unreachable!("nodes built from the same block list"),
        }
    }
    let logdet = match logdet {
        Some(id) => id,
        None => tape.constant(Tensor4::zeros(1, 1, 1, 1)),
    };
    Ok((cur, logdet))
}

/// Negative log-likelihood objective on the tape, averaged over the batch:
/// `(0.5*||z||^2 - sum log-dets) / n`. The additive normal-constant and the
/// preprocessing log-Jacobian carry no parameters and are added outside.
pub fn build_nll_objective(
    tape: &mut Tape,
    model: &FlowModel,
    nodes: &[BlockNodes],
    x: NodeId,
) -> Result<NodeId> {
    let n = tape.value(x)?.n() as f64;
    let (z, logdet) = build_tape(tape, model, nodes, x)?;
    let zsq = tape.mul(z, z)?;
    let half_sq = tape.sum_all(zsq)?;
    let half_sq = tape.scale(half_sq, 0.5)?;
    let diff = tape.sub(half_sq, logdet)?;
    tape.scale(diff, 1.0 / n)
}

/// Constant part of the mean NLL left off the tape by
/// [`build_nll_objective`]: `D/2 * ln(2*pi)` per element minus the mean
/// preprocessing log-Jacobian.
pub fn nll_constant(model: &FlowModel, logdet_pre: &[f64]) -> f64 {
    let d = model.dims() as f64;
    let mean_pre: f64 = logdet_pre.iter().sum::<f64>() / logdet_pre.len().max(1) as f64;
    0.5 * d * LN_2PI - mean_pre
}
