//! Maximum-likelihood training: AMSGrad steps, cosine learning-rate decay,
//! metric logging, and the checkpoint format (a JSON manifest plus one raw
//! little-endian f64 file per tensor).
//!
//! Training is deterministic given the seed: batches and dequantization noise
//! for step `s` come from a ChaCha stream keyed by `(seed, s)`, so resuming
//! from a checkpoint at a step boundary reproduces the uninterrupted
//! trajectory bit for bit.

use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::flow::{self, Block, FlowModel, PreprocessConfig};
use crate::masks::Orientation;
use crate::mint::MintParams;
use crate::tensor::{ConvWeight, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FORMAT: &str = "mintflow-checkpoint-v1";

/// AMSGrad moments for every learnable tensor, in `param_tensors` order.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub step: u64,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    tensors: Vec<MomentBuf>,
}

#[derive(Clone, Debug)]
struct MomentBuf {
    m: Vec<f64>,
    v: Vec<f64>,
    v_hat: Vec<f64>,
}

impl OptimState {
    /// Fresh state with the usual AMSGrad defaults (beta1 0.9, beta2 0.999,
    /// eps 1e-8) and no bias correction.
    pub fn new(model: &FlowModel, lr0: f64) -> Self {
        let tensors = model
            .param_tensors()
            .iter()
            .map(|(_, data)| MomentBuf {
                m: vec![0.0; data.len()],
                v: vec![0.0; data.len()],
                v_hat: vec![0.0; data.len()],
            })
            .collect();
        Self { step: 0, lr0, beta1: 0.9, beta2: 0.999, eps: 1e-8, tensors }
    }

    /// Max second moments are nondecreasing and dominate the second moments.
    pub fn invariants_hold(&self) -> bool {
        self.tensors.iter().all(|t| {
            t.v.iter().zip(&t.v_hat).all(|(v, vh)| *vh >= *v && *v >= 0.0)
        })
    }
}

/// One AMSGrad update over every tensor:
/// `m <- b1*m + (1-b1)*g`, `v <- b2*v + (1-b2)*g^2`, `vh <- max(vh, v)`,
/// `theta <- theta - lr * m / (sqrt(vh) + eps)`.
///
/// Rejects the step (params untouched) if any gradient entry is non-finite.
pub fn amsgrad_step(
    params: &mut [(String, &mut [f64])],
    grads: &[Vec<f64>],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.tensors.len() {
        return Err(Error::ShapeMismatch {
            context: "amsgrad_step",
            expected: format!("{} tensors", state.tensors.len()),
            got: format!("{} params / {} grads", params.len(), grads.len()),
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch {
                context: "amsgrad_step",
                expected: format!("{} entries for {name}", p.len()),
                got: format!("{}", g.len()),
            });
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: format!("gradient of {name}") });
        }
    }
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (buf, ((_, p), g)) in state.tensors.iter_mut().zip(params.iter_mut().zip(grads)) {
        for i in 0..g.len() {
            buf.m[i] = b1 * buf.m[i] + (1.0 - b1) * g[i];
            buf.v[i] = b2 * buf.v[i] + (1.0 - b2) * g[i] * g[i];
            buf.v_hat[i] = buf.v_hat[i].max(buf.v[i]);
            p[i] -= lr * buf.m[i] / (buf.v_hat[i].sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// Cosine decay: `lr = 0.5 * lr0 * (1 + cos(pi * t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if t > total {
        return Err(Error::InvalidArg(format!("schedule step {t} > total {total}")));
    }
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Eval cadence in steps; 0 disables held-out evaluation.
    pub eval_every: usize,
    /// Optional global-norm gradient clip, off by default.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            lr0: 0.001,
            schedule: Schedule::Cosine,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArg("steps and batch_size must be >= 1".into()));
        }
        if !(self.lr0 >= 0.0) {
            return Err(Error::InvalidArg(format!("lr0 must be >= 0, got {}", self.lr0)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub bpd_train: f64,
    pub bpd_eval: Option<f64>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub history: Vec<MetricsRow>,
    pub final_checkpoint: Option<PathBuf>,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_EA17u64
}

fn batch_from(images: &Tensor4, rng: &mut ChaCha8Rng, batch_size: usize) -> Tensor4 {
    let d = images.dims_per_element();
    let (_, c, h, w) = images.shape();
    let mut data = Vec::with_capacity(batch_size * d);
    for _ in 0..batch_size {
        let i = rng.random_range(0..images.n());
        data.extend_from_slice(&images.data()[i * d..(i + 1) * d]);
    }
    Tensor4::new(batch_size, c, h, w, data).expect("batch layout")
}

/// One gradient computation: loss value plus flat gradients in
/// `param_tensors` order.
fn loss_and_grads(model: &FlowModel, batch: &Tensor4, rng: &mut ChaCha8Rng) -> Result<(f64, Vec<Vec<f64>>)> {
    let (y, logdet_pre) = flow::preprocess(batch, &model.preprocess_config(), rng)?;
    let mut tape = crate::autodiff::Tape::new();
    let xn = tape.constant(y);
    let nodes = flow::register(&mut tape, model);
    let obj = flow::build_nll_objective(&mut tape, model, &nodes, xn)?;
    let loss = tape.scalar_value(obj)? + flow::nll_constant(model, &logdet_pre);
    let mut grads_by_leaf = tape.backward(obj)?;
    let grads = flow::leaf_ids(&nodes)
        .into_iter()
        .map(|id| match grads_by_leaf.take(id) {
            Some(t) => t.into_data(),
            None => vec![0.0; tape.value(id).map(|v| v.len()).unwrap_or(0)],
        })
        .collect();
    Ok((loss, grads))
}

/// Run maximum-likelihood training from a fresh optimizer.
pub fn train_loop(
    model: &mut FlowModel,
    dataset: &crate::data::Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    let mut optim = OptimState::new(model, cfg.lr0);
    run_loop(model, &mut optim, 0, dataset, cfg, out_dir)
}

/// Continue training from a loaded optimizer state and step boundary.
pub fn train_loop_resumed(
    model: &mut FlowModel,
    optim: &mut OptimState,
    start_step: usize,
    dataset: &crate::data::Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    run_loop(model, optim, start_step, dataset, cfg, out_dir)
}

fn run_loop(
    model: &mut FlowModel,
    optim: &mut OptimState,
    start_step: usize,
    dataset: &crate::data::Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let train_images = dataset.train_images();
    if train_images.n() == 0 {
        return Err(Error::InvalidArg("dataset has no training images".into()));
    }
    let test_images = dataset.test_images();
    let eval_images = if test_images.n() > 0 { &test_images } else { &train_images };
    let dims = model.dims() as f64;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut metrics = out_dir
        .map(|dir| -> Result<std::fs::File> {
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "step,lr,loss,bpd_train,bpd_eval")?;
            Ok(f)
        })
        .transpose()?;

    let mut history = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;

    for step in start_step..cfg.steps {
        let lr = match cfg.schedule {
            Schedule::Cosine => cosine_lr(step, cfg.steps, cfg.lr0)?,
            Schedule::Constant => cfg.lr0,
        };
        let mut rng = step_rng(cfg.seed, step);
        let batch = batch_from(&train_images, &mut rng, cfg.batch_size);
        let (loss, mut grads) = loss_and_grads(model, &batch, &mut rng)?;

        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: match &last_checkpoint {
                    Some(p) => format!(
                        "loss at step {step}; last good checkpoint retained at {}",
                        p.display()
                    ),
                    None => format!("loss at step {step}; no checkpoint written yet"),
                },
            });
        }

        if let Some(clip) = cfg.clip_norm {
            let norm: f64 = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let k = clip / norm;
                for g in &mut grads {
                    for v in g.iter_mut() {
                        *v *= k;
                    }
                }
            }
        }

        let mut params = model.param_tensors_mut();
        amsgrad_step(&mut params, &grads, optim, lr)?;
        drop(params);

        let done = step + 1;
        let bpd_eval = if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.steps) {
            let mut erng = ChaCha8Rng::seed_from_u64(eval_seed(cfg.seed));
            Some(flow::bpd(model, eval_images, &mut erng)?)
        } else {
            None
        };

        let row = MetricsRow {
            step: done,
            lr,
            loss,
            bpd_train: loss / (dims * std::f64::consts::LN_2),
            bpd_eval,
        };
        if let Some(f) = metrics.as_mut() {
            writeln!(
                f,
                "{},{:.12e},{:.12e},{:.12e},{}",
                row.step,
                row.lr,
                row.loss,
                row.bpd_train,
                row.bpd_eval.map_or(String::new(), |b| format!("{b:.12e}")),
            )?;
        }
        history.push(row);

        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                let path = dir.join(format!("ckpt-step{done}"));
                save_checkpoint(model, Some(optim), done, cfg.seed, &path)?;
                last_checkpoint = Some(path);
            }
        }
    }

    let final_checkpoint = if let Some(dir) = out_dir {
        let path = dir.join("ckpt-final");
        save_checkpoint(model, Some(optim), cfg.steps, cfg.seed, &path)?;
        Some(path)
    } else {
        None
    };

    Ok(TrainReport { history, final_checkpoint })
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    format: String,
    model: ModelManifest,
    params: Vec<TensorEntry>,
    optim: Option<OptimManifest>,
    meta: MetaManifest,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelManifest {
    input_shape: (usize, usize, usize),
    preprocess: PreprocessConfig,
    blocks: Vec<BlockManifest>,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum BlockManifest {
    PairedMint {
        channels: usize,
        k_groups: usize,
        kernel: usize,
        activation: Activation,
    },
    Squeeze { k: usize },
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct OptimManifest {
    step: u64,
    lr0: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    tensors: Vec<TensorEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct MetaManifest {
    train_step: usize,
    seed: u64,
}

/// Checkpoint metadata needed to resume.
#[derive(Clone, Copy, Debug)]
pub struct CheckpointMeta {
    pub train_step: usize,
    pub seed: u64,
}

fn zero_layer(channels: usize, k: usize, r: usize, o: Orientation, act: Activation) -> Result<MintParams> {
    MintParams::new(
        ConvWeight::zeros(k * channels, channels, r)?,
        ConvWeight::zeros(k * channels, k * channels, r)?,
        ConvWeight::zeros(channels, k * channels, r)?,
        vec![0.0; k * channels],
        vec![0.0; k * channels],
        vec![0.0; channels],
        vec![0.0; channels],
        k,
        o,
        act,
    )
}

fn model_manifest(model: &FlowModel) -> ModelManifest {
    let blocks = model
        .blocks()
        .iter()
        .map(|b| match b {
            Block::PairedMint { lower, .. } => BlockManifest::PairedMint {
                channels: lower.channels(),
                k_groups: lower.k_groups(),
                kernel: lower.kernel(),
                activation: lower.activation(),
            },
            Block::Squeeze { k } => BlockManifest::Squeeze { k: *k },
        })
        .collect();
    ModelManifest {
        input_shape: model.input_shape(),
        preprocess: model.preprocess_config(),
        blocks,
    }
}

fn param_shapes(model: &FlowModel) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (bi, block) in model.blocks().iter().enumerate() {
        if let Block::PairedMint { lower, upper } = block {
            for (side, layer) in [("lower", lower), ("upper", upper)] {
                let (c, k, r) = (layer.channels(), layer.k_groups(), layer.kernel());
                let shapes: [(&str, Vec<usize>); 7] = [
                    ("w1", vec![k * c, c, r, r]),
                    ("w2", vec![k * c, k * c, r, r]),
                    ("w3", vec![c, k * c, r, r]),
                    ("b1", vec![k * c]),
                    ("b2", vec![k * c]),
                    ("b3", vec![c]),
                    ("log_t", vec![c]),
                ];
                for (name, shape) in shapes {
                    out.push((format!("block{bi}.{side}.{name}"), shape));
                }
            }
        }
    }
    out
}

fn write_f64_file(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_f64_file(path: &Path, name: &str, expected_len: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|_| Error::CheckpointMissingTensor {
        name: name.to_string(),
    })?;
    if bytes.len() != expected_len * 8 {
        return Err(Error::CheckpointShape {
            name: name.to_string(),
            expected: format!("{expected_len} f64 values"),
            got: format!("{} bytes", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Write model (and optionally optimizer) state to a checkpoint directory.
pub fn save_checkpoint(
    model: &FlowModel,
    optim: Option<&OptimState>,
    train_step: usize,
    seed: u64,
    path: &Path,
) -> Result<()> {
    std::fs::create_dir_all(path)?;
    let shapes = param_shapes(model);
    let mut params = Vec::new();
    for ((name, data), (sname, shape)) in model.param_tensors().iter().zip(&shapes) {
        debug_assert_eq!(name, sname);
        let file = format!("{name}.bin");
        write_f64_file(&path.join(&file), data)?;
        params.push(TensorEntry { name: name.clone(), shape: shape.clone(), file });
    }

    let optim_manifest = match optim {
        None => None,
        Some(state) => {
            let mut tensors = Vec::new();
            for ((name, _), buf) in model.param_tensors().iter().zip(&state.tensors) {
                for (suffix, data) in [("m", &buf.m), ("v", &buf.v), ("vhat", &buf.v_hat)] {
                    let tname = format!("{name}.{suffix}");
                    let file = format!("{tname}.bin");
                    write_f64_file(&path.join(&file), data)?;
                    tensors.push(TensorEntry {
                        name: tname,
                        shape: vec![data.len()],
                        file,
                    });
                }
            }
            Some(OptimManifest {
                step: state.step,
                lr0: state.lr0,
                beta1: state.beta1,
                beta2: state.beta2,
                eps: state.eps,
                tensors,
            })
        }
    };

    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        model: model_manifest(model),
        params,
        optim: optim_manifest,
        meta: MetaManifest { train_step, seed },
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(path.join("manifest.json"), json)?;
    Ok(())
}

/// Load a checkpoint directory back into a model, optimizer state and meta.
pub fn load_checkpoint(path: &Path) -> Result<(FlowModel, Option<OptimState>, CheckpointMeta)> {
    let manifest_path = path.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("manifest parse: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::CheckpointVersion {
            got: manifest.format,
            expected: CHECKPOINT_FORMAT.to_string(),
        });
    }

    let mut blocks = Vec::new();
    for bm in &manifest.model.blocks {
        match bm {
            BlockManifest::PairedMint { channels, k_groups, kernel, activation } => {
                blocks.push(Block::PairedMint {
                    lower: zero_layer(*channels, *k_groups, *kernel, Orientation::Lower, *activation)?,
                    upper: zero_layer(*channels, *k_groups, *kernel, Orientation::Upper, *activation)?,
                });
            }
            BlockManifest::Squeeze { k } => blocks.push(Block::Squeeze { k: *k }),
        }
    }
    let mut model = FlowModel::new(manifest.model.input_shape, blocks, manifest.model.preprocess)?;

    let expected = param_shapes(&model);
    let mut params = model.param_tensors_mut();
    for (name, shape) in &expected {
        let entry = manifest
            .params
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::CheckpointMissingTensor { name: name.clone() })?;
        if &entry.shape != shape {
            return Err(Error::CheckpointShape {
                name: name.clone(),
                expected: format!("{shape:?}"),
                got: format!("{:?}", entry.shape),
            });
        }
        let slot = params
            .iter_mut()
            .find(|(n, _)| n == name)
            .expect("param_shapes matches param_tensors");
        let data = read_f64_file(&path.join(&entry.file), name, slot.1.len())?;
        slot.1.copy_from_slice(&data);
    }
    drop(params);

    let optim = match &manifest.optim {
        None => None,
        Some(om) => {
            let mut state = OptimState::new(&model, om.lr0);
            state.step = om.step;
            state.beta1 = om.beta1;
            state.beta2 = om.beta2;
            state.eps = om.eps;
            for ((name, _), buf) in model.param_tensors().iter().zip(state.tensors.iter_mut()) {
                for (suffix, data) in [
                    ("m", &mut buf.m),
                    ("v", &mut buf.v),
                    ("vhat", &mut buf.v_hat),
                ] {
                    let tname = format!("{name}.{suffix}");
                    let entry = om
                        .tensors
                        .iter()
                        .find(|e| e.name == tname)
                        .ok_or_else(|| Error::CheckpointMissingTensor { name: tname.clone() })?;
                    let read = read_f64_file(&path.join(&entry.file), &tname, data.len())?;
                    data.copy_from_slice(&read);
                }
            }
            Some(state)
        }
    };

    let meta = CheckpointMeta {
        train_step: manifest.meta.train_step,
        seed: manifest.meta.seed,
    };
    Ok((model, optim, meta))
}
