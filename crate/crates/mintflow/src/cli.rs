//! Command implementations behind the `mintflow` binary: training,
//! evaluation, sampling, inversion and Jacobian audits, and interpolation
//! grids. Every command reads a JSON run config (flags override fields),
//! writes its artifacts under the output directory, and drops a
//! `summary.json` with the outcome.

use crate::autodiff::Activation;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::fd;
use crate::flow::{self, Block, FlowModel, PreprocessConfig};
use crate::imageio;
use crate::masks::Orientation;
use crate::mint::{MintInit, MintParams};
use crate::solver::{self, SolverConfig};
use crate::tensor::Tensor4;
use crate::train::{self, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub k_groups: usize,
    pub kernel: usize,
    /// Paired-Mint counts per stage; stages are separated by squeezes.
    pub pairs_per_stage: Vec<usize>,
    pub squeeze_factor: usize,
    pub activation: Activation,
    pub weight_scale: f64,
    pub lambda: f64,
    pub levels: u32,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            channels: 1,
            height: 8,
            width: 8,
            k_groups: 3,
            kernel: 3,
            pairs_per_stage: vec![1, 2],
            squeeze_factor: 2,
            activation: Activation::Elu,
            weight_scale: 0.05,
            lambda: 0.05,
            levels: 256,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// One of `bars`, `uniform`, `idx`.
    pub source: String,
    pub path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    /// Synthetic image count.
    pub count: usize,
    /// Synthetic image side length.
    pub size: usize,
    /// Block-average factor applied after loading (1 = none).
    pub downsample: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "bars".into(),
            path: None,
            labels_path: None,
            count: 512,
            size: 8,
            downsample: 1,
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub alpha: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Step-size grid for `invert-audit`.
    pub audit_alphas: Vec<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            max_iters: 120,
            tol: 1e-8,
            audit_alphas: vec![0.5, 1.0, 1.5, 2.0],
        }
    }
}

impl SolverSection {
    pub fn to_config(&self) -> SolverConfig {
        SolverConfig {
            alpha: self.alpha,
            max_iters: self.max_iters,
            tol: self.tol,
            record_trace: false,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub sample_count: usize,
    pub grid_cols: usize,
    pub interp_grid: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            sample_count: 16,
            grid_cols: 4,
            interp_grid: 8,
        }
    }
}

/// Full run configuration: JSON file sections plus flag overrides.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainConfig,
    pub solver: SolverSection,
    pub output: OutputSection,
}

/// Flag-level overrides; flags win over config-file values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub iters: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
        let mut cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
        };
        if let Some(seed) = ov.seed {
            cfg.train.seed = seed;
            cfg.data.seed = seed;
        }
        if let Some(out) = &ov.out {
            cfg.output.dir = out.clone();
        }
        if let Some(alpha) = ov.alpha {
            cfg.solver.alpha = alpha;
        }
        if let Some(iters) = ov.iters {
            cfg.solver.max_iters = iters;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.channels == 0 || m.height == 0 || m.width == 0 {
            return Err(Error::Config("model dims must be nonzero".into()));
        }
        if m.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", m.kernel)));
        }
        if m.pairs_per_stage.is_empty() {
            return Err(Error::Config("pairs_per_stage must not be empty".into()));
        }
        if m.squeeze_factor < 2 && m.pairs_per_stage.len() > 1 {
            return Err(Error::Config("squeeze_factor must be >= 2".into()));
        }
        if !(m.lambda > 0.0 && m.lambda < 0.5) {
            return Err(Error::Config(format!("lambda must lie in (0,0.5), got {}", m.lambda)));
        }
        match self.data.source.as_str() {
            "bars" | "uniform" => {}
            "idx" => {
                if self.data.path.is_none() {
                    return Err(Error::Config("idx source needs data.path".into()));
                }
            }
            other => return Err(Error::Config(format!("unknown data source {other:?}"))),
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must lie in (0,1]".into()));
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        let sc = self.solver.to_config();
        sc.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Construct a fresh model per the config's model section, seeded by the
/// train seed so whole runs are reproducible from the config alone.
pub fn build_model(cfg: &RunConfig) -> Result<FlowModel> {
    let m = &cfg.model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut blocks = Vec::new();
    let mut c = m.channels;
    let (mut h, mut w) = (m.height, m.width);
    for (stage, &pairs) in m.pairs_per_stage.iter().enumerate() {
        if stage > 0 {
            let k = m.squeeze_factor;
            if h % k != 0 || w % k != 0 {
                return Err(Error::Config(format!(
                    "squeeze factor {k} does not divide {h}x{w} at stage {stage}"
                )));
            }
            blocks.push(Block::Squeeze { k });
            c *= k * k;
            h /= k;
            w /= k;
        }
        for _ in 0..pairs {
            let mut init = MintInit::new(c, m.k_groups, m.kernel, Orientation::Lower);
            init.activation = m.activation;
            init.weight_scale = m.weight_scale;
            let lower = MintParams::init(&init, &mut rng)?;
            init.orientation = Orientation::Upper;
            let upper = MintParams::init(&init, &mut rng)?;
            blocks.push(Block::PairedMint { lower, upper });
        }
    }
    FlowModel::new(
        (m.channels, m.height, m.width),
        blocks,
        PreprocessConfig { lambda: m.lambda, levels: m.levels },
    )
}

/// Load or synthesize the dataset named by the config's data section.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let mut ds = match d.source.as_str() {
        "bars" => data::synth_bars(d.count, d.size, &mut rng)?,
        "uniform" => data::synth_uniform(d.count, d.size, &mut rng)?,
        "idx" => data::load_idx(
            d.path.as_deref().expect("validated"),
            d.labels_path.as_deref(),
        )?,
        other => return Err(Error::Config(format!("unknown data source {other:?}"))),
    };
    if d.downsample > 1 {
        ds = data::downsample(&ds, d.downsample)?;
    }
    ds.assign_split(d.train_fraction, d.seed);
    Ok(ds)
}

fn write_summary(out_dir: &Path, value: &serde_json::Value) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("summary.json");
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "{}", serde_json::to_string_pretty(value).expect("json"))?;
    Ok(path)
}

fn check_data_model_agree(model: &FlowModel, ds: &Dataset) -> Result<()> {
    let (c, h, w) = model.input_shape();
    let got = ds.images.shape();
    if (got.1, got.2, got.3) != (c, h, w) {
        return Err(Error::Config(format!(
            "data images ({},{},{}) do not match model input ({c},{h},{w})",
            got.1, got.2, got.3
        )));
    }
    Ok(())
}

/// `train`: fit the configured model on the configured data and leave
/// metrics, checkpoints and a summary in the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<serde_json::Value> {
    let mut model = build_model(cfg)?;
    let ds = load_data(cfg)?;
    check_data_model_agree(&model, &ds)?;
    let report = train::train_loop(&mut model, &ds, &cfg.train, Some(&cfg.output.dir))?;
    let last = report.history.last();
    let summary = json!({
        "command": "train",
        "status": "ok",
        "steps": cfg.train.steps,
        "final_loss": last.map(|r| r.loss),
        "final_bpd_train": last.map(|r| r.bpd_train),
        "final_bpd_eval": last.and_then(|r| r.bpd_eval),
        "checkpoint": report.final_checkpoint,
        "metrics": cfg.output.dir.join("metrics.csv"),
    });
    write_summary(&cfg.output.dir, &summary)?;
    Ok(summary)
}

/// `eval`: bits per dimension of a checkpointed model on held-out data.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<serde_json::Value> {
    let (model, _, meta) = train::load_checkpoint(checkpoint)?;
    let ds = load_data(cfg)?;
    check_data_model_agree(&model, &ds)?;
    let test = ds.test_images();
    let images = if test.n() > 0 { test } else { ds.train_images() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let bpd = flow::bpd(&model, &images, &mut rng)?;
    let summary = json!({
        "command": "eval",
        "status": "ok",
        "checkpoint": checkpoint,
        "trained_steps": meta.train_step,
        "images": images.n(),
        "bpd": bpd,
    });
    write_summary(&cfg.output.dir, &summary)?;
    Ok(summary)
}

/// `sample`: draw images from a checkpointed model by fixed-point inversion
/// and write them as one tiled PGM/PPM grid.
pub fn cmd_sample(cfg: &RunConfig, checkpoint: &Path, n: usize) -> Result<serde_json::Value> {
    let (model, _, _) = train::load_checkpoint(checkpoint)?;
    let solver_cfg = cfg.solver.to_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let out = flow::sample(&model, n, &solver_cfg, &mut rng)?;
    std::fs::create_dir_all(&cfg.output.dir)?;
    let ext = if model.input_shape().0 == 3 { "ppm" } else { "pgm" };
    let grid_path = cfg
        .output
        .dir
        .join(format!("samples_n{n}_seed{}.{ext}", cfg.train.seed));
    imageio::write_image_grid(&grid_path, &out.pixels, cfg.output.grid_cols)?;
    let summary = json!({
        "command": "sample",
        "status": "ok",
        "checkpoint": checkpoint,
        "count": n,
        "alpha": solver_cfg.alpha,
        "max_layer_iterations": out.stats.max_iterations,
        "max_layer_error": out.stats.max_final_error,
        "clipped_fraction": out.clipped_fraction,
        "grid": grid_path,
    });
    write_summary(&cfg.output.dir, &summary)?;
    Ok(summary)
}

struct AlphaAudit {
    alpha: f64,
    reconstruction_error: f64,
    max_layer_iterations: usize,
    trace: Vec<f64>,
}

fn audit_one_alpha(
    model: &FlowModel,
    y: &Tensor4,
    z: &Tensor4,
    alpha: f64,
    max_iters: usize,
    tol: f64,
) -> Result<AlphaAudit> {
    // Invert block by block, recording every layer's error trace; the audit
    // trace reports the worst per-layer error at each iteration index.
    let mut cur = z.clone();
    let mut traces: Vec<Vec<f64>> = Vec::new();
    let mut max_layer_iterations = 0;
    let cfg = SolverConfig { alpha, max_iters, tol, record_trace: true };
    let mut diverged = false;
    'blocks: for block in model.blocks().iter().rev() {
        match block {
            Block::Squeeze { k } => cur = flow::unsqueeze(&cur, *k)?,
            Block::PairedMint { lower, upper } => {
                for layer in [upper, lower] {
                    let compiled = layer.compiled()?;
                    let x0 = layer.default_x0(&cur)?;
                    match solver::invert_fixed_point(
                        |x| compiled.forward(x),
                        |x| compiled.jac_diag(x),
                        &cur,
                        &x0,
                        &cfg,
                    ) {
                        Ok(res) => {
                            max_layer_iterations = max_layer_iterations.max(res.iterations_used);
                            traces.push(res.trace.unwrap_or_default());
                            cur = res.x;
                        }
                        Err(Error::Divergence { iteration, .. }) => {
                            diverged = true;
                            traces.push(vec![f64::INFINITY; iteration + 1]);
                            break 'blocks;
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
    }
    let reconstruction_error = if diverged {
        f64::INFINITY
    } else {
        solver::normalized_l2(&cur, y)
    };
    let len = traces.iter().map(Vec::len).max().unwrap_or(0);
    let trace = (0..len)
        .map(|i| {
            traces
                .iter()
                .map(|t| *t.get(i).or(t.last()).unwrap_or(&0.0))
                .fold(0.0f64, f64::max)
        })
        .collect();
    Ok(AlphaAudit { alpha, reconstruction_error, max_layer_iterations, trace })
}

/// `invert-audit`: encode a held-out batch, invert it back under a grid of
/// step sizes, and report per-iteration worst-layer error traces. With
/// `refine`, a second 0.05-spaced grid runs around the best coarse step.
/// Passes when the best step reconstructs to 1e-6 within the iteration cap.
pub fn cmd_invert_audit(cfg: &RunConfig, checkpoint: &Path, refine: bool) -> Result<serde_json::Value> {
    let (model, _, _) = train::load_checkpoint(checkpoint)?;
    let ds = load_data(cfg)?;
    check_data_model_agree(&model, &ds)?;
    let test = ds.test_images();
    let pool = if test.n() > 0 { test } else { ds.train_images() };
    let take = pool.n().min(16);
    let (_, c, h, w) = pool.shape();
    let batch = Tensor4::new(take, c, h, w, pool.data()[..take * c * h * w].to_vec())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let (y, _) = flow::preprocess(&batch, &model.preprocess_config(), &mut rng)?;
    let (z, _) = flow::forward(&model, &y)?;

    let mut audits = Vec::new();
    for &alpha in &cfg.solver.audit_alphas {
        audits.push(audit_one_alpha(&model, &y, &z, alpha, cfg.solver.max_iters, cfg.solver.tol)?);
    }
    let best_of = |a: &[AlphaAudit]| -> usize {
        let mut best = 0;
        for (i, row) in a.iter().enumerate() {
            let better = (row.reconstruction_error, row.max_layer_iterations)
                < (a[best].reconstruction_error, a[best].max_layer_iterations);
            if better {
                best = i;
            }
        }
        best
    };
    let mut best = best_of(&audits);

    if refine && audits[best].reconstruction_error.is_finite() {
        let center = audits[best].alpha;
        let mut fine = Vec::new();
        let mut a = (center - 0.25).max(0.05);
        while a <= center + 0.25 + 1e-9 {
            fine.push((a * 100.0).round() / 100.0);
            a += 0.05;
        }
        for alpha in fine {
            if !audits.iter().any(|r| (r.alpha - alpha).abs() < 1e-9) {
                audits.push(audit_one_alpha(
                    &model,
                    &y,
                    &z,
                    alpha,
                    cfg.solver.max_iters,
                    cfg.solver.tol,
                )?);
            }
        }
        best = best_of(&audits);
    }

    std::fs::create_dir_all(&cfg.output.dir)?;
    let csv_path = cfg.output.dir.join("audit_invert.csv");
    {
        let mut f = std::fs::File::create(&csv_path)?;
        writeln!(f, "alpha,iter,error")?;
        for row in &audits {
            for (it, err) in row.trace.iter().enumerate() {
                writeln!(f, "{},{},{:e}", row.alpha, it, err)?;
            }
        }
    }

    let threshold = 1e-6;
    let passed = audits[best].reconstruction_error < threshold;
    let summary = json!({
        "command": "invert-audit",
        "status": if passed { "ok" } else { "failed" },
        "checkpoint": checkpoint,
        "images": take,
        "alphas": audits.iter().map(|r| r.alpha).collect::<Vec<_>>(),
        "best_alpha": audits[best].alpha,
        "best_reconstruction_error": audits[best].reconstruction_error,
        "best_max_layer_iterations": audits[best].max_layer_iterations,
        "threshold": threshold,
        "refined": refine,
        "csv": csv_path,
    });
    write_summary(&cfg.output.dir, &summary)?;
    if !passed {
        return Err(Error::AuditFailed(format!(
            "best alpha {} reconstructs to {:.3e} (threshold {threshold:.0e})",
            audits[best].alpha, audits[best].reconstruction_error
        )));
    }
    Ok(summary)
}

/// `jacobian-audit`: on a fresh model from the config, compare every layer's
/// analytic Jacobian diagonal against a dense finite-difference Jacobian and
/// check triangularity. Passes when the worst diagonal error is below 1e-5.
pub fn cmd_jacobian_audit(cfg: &RunConfig) -> Result<serde_json::Value> {
    let model = build_model(cfg)?;
    let d = model.dims();
    if d > 512 {
        return Err(Error::Config(format!(
            "jacobian-audit needs a small model (dims {d} > 512)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xA0D1);
    let mut rows = Vec::new();
    let mut worst_diag = 0.0f64;
    let mut worst_offside = 0.0f64;

    // Walk the blocks, tracking the running shape so each layer is audited
    // at its own input shape.
    let (mut c, mut h, mut w) = model.input_shape();
    for (bi, block) in model.blocks().iter().enumerate() {
        match block {
            Block::Squeeze { k } => {
                c *= k * k;
                h /= k;
                w /= k;
            }
            Block::PairedMint { lower, upper } => {
                for (side, layer) in [("lower", lower), ("upper", upper)] {
                    let x = Tensor4::from_fn(1, c, h, w, |_, _, _, _| {
                        rand_distr::StandardNormal.sample(&mut rng)
                    });
                    let compiled = layer.compiled()?;
                    let analytic = compiled.jac_diag(&x)?;
                    let jac = fd::fd_jacobian(|t| compiled.forward(t), &x, 1e-6)?;
                    let mut diag_err = 0.0f64;
                    for (i, row) in jac.iter().enumerate() {
                        diag_err = diag_err.max((row[i] - analytic.data()[i]).abs());
                    }
                    let offside = fd::max_offside(&jac, layer.orientation());
                    worst_diag = worst_diag.max(diag_err);
                    worst_offside = worst_offside.max(offside);
                    rows.push((format!("block{bi}.{side}"), diag_err, offside));
                }
            }
        }
    }

    std::fs::create_dir_all(&cfg.output.dir)?;
    let csv_path = cfg.output.dir.join("audit_jacobian.csv");
    {
        let mut f = std::fs::File::create(&csv_path)?;
        writeln!(f, "layer,max_diag_error,max_offside")?;
        for (name, diag, off) in &rows {
            writeln!(f, "{name},{diag:e},{off:e}")?;
        }
    }

    let threshold = 1e-5;
    let passed = worst_diag < threshold && worst_offside < 1e-6;
    let summary = json!({
        "command": "jacobian-audit",
        "status": if passed { "ok" } else { "failed" },
        "layers": rows.len(),
        "max_diag_error": worst_diag,
        "max_offside": worst_offside,
        "diag_threshold": threshold,
        "offside_threshold": 1e-6,
        "csv": csv_path,
    });
    write_summary(&cfg.output.dir, &summary)?;
    if !passed {
        return Err(Error::AuditFailed(format!(
            "jacobian audit: max diag error {worst_diag:.3e}, max offside {worst_offside:.3e}"
        )));
    }
    Ok(summary)
}

/// `interpolate`: latent-space grid between four dataset images, decoded by
/// fixed-point inversion and written as one tiled image.
pub fn cmd_interpolate(
    cfg: &RunConfig,
    checkpoint: &Path,
    indices: [usize; 4],
) -> Result<serde_json::Value> {
    let (model, _, _) = train::load_checkpoint(checkpoint)?;
    let ds = load_data(cfg)?;
    check_data_model_agree(&model, &ds)?;
    let (_, c, h, w) = ds.images.shape();
    let d = c * h * w;
    let mut corners = Vec::new();
    for &i in &indices {
        if i >= ds.images.n() {
            return Err(Error::Config(format!(
                "image index {i} out of range for {} images",
                ds.images.n()
            )));
        }
        corners.push(Tensor4::new(1, c, h, w, ds.images.data()[i * d..(i + 1) * d].to_vec())?);
    }
    let solver_cfg = cfg.solver.to_config();
    let grid_n = cfg.output.interp_grid;
    let noise_seed = cfg.train.seed;
    let out = flow::interpolate(
        &model,
        [&corners[0], &corners[1], &corners[2], &corners[3]],
        grid_n,
        &solver_cfg,
        noise_seed,
    )?;

    // Corner reconstruction error against the same dequantized originals.
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut corner_err = 0.0f64;
    for (slot, corner) in [(0, 0), (grid_n - 1, 1), (grid_n * (grid_n - 1), 2), (grid_n * grid_n - 1, 3)]
    {
        let noise = Tensor4::from_fn(1, c, h, w, |_, _, _, _| {
            rand::Rng::random_range(&mut rng, 0.0..1.0)
        });
        let dequant = crate::tensor::add(&corners[corner], &noise)?;
        let got = &out.pixels.data()[slot * d..(slot + 1) * d];
        let err: f64 = got
            .iter()
            .zip(dequant.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / d as f64;
        corner_err = corner_err.max(err);
    }

    std::fs::create_dir_all(&cfg.output.dir)?;
    let ext = if c == 3 { "ppm" } else { "pgm" };
    let grid_path = cfg.output.dir.join(format!("interp_grid{grid_n}.{ext}"));
    imageio::write_image_grid(&grid_path, &out.pixels, grid_n)?;
    let summary = json!({
        "command": "interpolate",
        "status": "ok",
        "checkpoint": checkpoint,
        "indices": indices,
        "grid_n": grid_n,
        "max_corner_error": corner_err,
        "max_layer_iterations": out.stats.max_iterations,
        "grid": grid_path,
    });
    write_summary(&cfg.output.dir, &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_config_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"model": {"chanels": 1}}"#).unwrap();
        match RunConfig::load(Some(&path), &Overrides::default()) {
            Err(Error::Config(msg)) => assert!(msg.contains("chanels"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"train": {"seed": 1}, "solver": {"alpha": 1.0}}"#).unwrap();
        let ov = Overrides {
            seed: Some(9),
            alpha: Some(1.5),
            iters: Some(60),
            out: Some(PathBuf::from("elsewhere")),
        };
        let cfg = RunConfig::load(Some(&path), &ov).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.solver.alpha, 1.5);
        assert_eq!(cfg.solver.max_iters, 60);
        assert_eq!(cfg.output.dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.model.kernel = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.source = "nope".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.lambda = 0.7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn build_model_tracks_squeeze_shapes() {
        let cfg = RunConfig::default(); // stages [1, 2], squeeze 2, 8x8 input
        let model = build_model(&cfg).unwrap();
        assert_eq!(model.input_shape(), (1, 8, 8));
        assert_eq!(model.latent_shape(), (4, 4, 4));
        assert_eq!(model.blocks().len(), 4); // pair, squeeze, pair, pair
    }

    #[test]
    fn exit_codes_by_class() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Io(std::io::Error::other("x")).exit_code(), 3);
        assert_eq!(
            Error::Divergence { iteration: 3, detail: "d".into() }.exit_code(),
            4
        );
        assert_eq!(Error::AuditFailed("x".into()).exit_code(), 5);
    }
}
