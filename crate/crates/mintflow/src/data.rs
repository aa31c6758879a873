//! Dataset ingestion and synthesis: IDX image files, block-average
//! downsampling, and a synthetic structured-image generator for fast tests
//! and training demos. No download logic; paths are always user-supplied.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images with integral pixel values in `[0, 255]` plus split tags.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Option<Vec<u8>>,
    /// Marks each image as training or held-out data.
    pub split: Vec<Split>,
    pub source: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Deterministic split assignment: the first `round(fraction * n)` images
    /// of a seeded shuffle become training data.
    pub fn assign_split(&mut self, train_fraction: f64, seed: u64) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let n_train = ((n as f64) * train_fraction).round() as usize;
        self.split = vec![Split::Test; n];
        for &i in order.iter().take(n_train) {
            self.split[i] = Split::Train;
        }
    }

    fn gather(&self, which: Split) -> Tensor4 {
        let idx: Vec<usize> = self
            .split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == which)
            .map(|(i, _)| i)
            .collect();
        let (_, c, h, w) = self.images.shape();
        let d = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(&self.images.data()[i * d..(i + 1) * d]);
        }
        Tensor4::new(idx.len(), c, h, w, data).expect("gather preserves layout")
    }

    pub fn train_images(&self) -> Tensor4 {
        self.gather(Split::Train)
    }

    pub fn test_images(&self) -> Tensor4 {
        self.gather(Split::Test)
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, total: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::IdxTruncated { needed: end, got: total });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Parse an IDX image file (and optionally its labels) into a dataset of
/// shape `(n, 1, h, w)`. All images start tagged as training data.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut bytes)?;
    let total = bytes.len();

    let magic = read_be_u32(&bytes, 0, total)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxBadMagic { got: magic, expected: IDX_IMAGES_MAGIC });
    }
    let n = read_be_u32(&bytes, 4, total)? as usize;
    let h = read_be_u32(&bytes, 8, total)? as usize;
    let w = read_be_u32(&bytes, 12, total)? as usize;
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(Error::IdxTruncated { needed: need, got: total });
    }
    let data: Vec<f64> = bytes[16..need].iter().map(|&b| b as f64).collect();
    let images = Tensor4::new(n, 1, h, w, data)?;

    let labels = match labels_path {
        None => None,
        Some(path) => {
            let mut lb = Vec::new();
            std::fs::File::open(path)?.read_to_end(&mut lb)?;
            let lt = lb.len();
            let magic = read_be_u32(&lb, 0, lt)?;
            if magic != IDX_LABELS_MAGIC {
                return Err(Error::IdxBadMagic { got: magic, expected: IDX_LABELS_MAGIC });
            }
            let ln = read_be_u32(&lb, 4, lt)? as usize;
            if ln != n {
                return Err(Error::IdxDimMismatch {
                    detail: format!("{n} images but {ln} labels"),
                });
            }
            if lb.len() < 8 + ln {
                return Err(Error::IdxTruncated { needed: 8 + ln, got: lt });
            }
            Some(lb[8..8 + ln].to_vec())
        }
    };

    Ok(Dataset {
        split: vec![Split::Train; images.n()],
        images,
        labels,
        source: images_path.display().to_string(),
    })
}

/// Write images back out in IDX format (test fixtures, roundtrip checks).
pub fn write_idx(path: &Path, images: &Tensor4) -> Result<()> {
    if images.c() != 1 {
        return Err(Error::InvalidArg("IDX images are single-channel".into()));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(images.n() as u32).to_be_bytes())?;
    f.write_all(&(images.h() as u32).to_be_bytes())?;
    f.write_all(&(images.w() as u32).to_be_bytes())?;
    let bytes: Vec<u8> = images
        .data()
        .iter()
        .map(|&v| v.clamp(0.0, 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Block-average pooling followed by half-up rounding to integer pixels.
pub fn downsample(ds: &Dataset, factor: usize) -> Result<Dataset> {
    let (n, c, h, w) = ds.images.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArg(format!(
            "downsample factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    let mut out = Tensor4::zeros(n, c, oh, ow);
    for bn in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += ds.images.at(bn, ch, y * factor + dy, x * factor + dx);
                        }
                    }
                    // Round half up so fixtures are bit-stable.
                    *out.at_mut(bn, ch, y, x) = (acc / area + 0.5).floor();
                }
            }
        }
    }
    Ok(Dataset {
        images: out,
        labels: ds.labels.clone(),
        split: ds.split.clone(),
        source: format!("{} (downsampled x{factor})", ds.source),
    })
}

/// Synthetic images with 1-3 bright horizontal/vertical bars on a dark
/// background plus mild noise; a low-entropy family a small flow can fit.
pub fn synth_bars(n: usize, size: usize, rng: &mut impl Rng) -> Result<Dataset> {
    if size < 4 {
        return Err(Error::InvalidArg(format!("synth_bars needs size >= 4, got {size}")));
    }
    let mut images = Tensor4::zeros(n, 1, size, size);
    for bn in 0..n {
        let background = rng.random_range(5.0..25.0);
        for y in 0..size {
            for x in 0..size {
                *images.at_mut(bn, 0, y, x) = background;
            }
        }
        let bars = rng.random_range(1..=3usize);
        for _ in 0..bars {
            let bright = rng.random_range(180.0..250.0);
            let pos = rng.random_range(0..size);
            let horizontal = rng.random_bool(0.5);
            for i in 0..size {
                let (y, x) = if horizontal { (pos, i) } else { (i, pos) };
                *images.at_mut(bn, 0, y, x) = bright;
            }
        }
        for y in 0..size {
            for x in 0..size {
                let noisy = images.at(bn, 0, y, x) + rng.random_range(-4.0..4.0);
                *images.at_mut(bn, 0, y, x) = noisy.clamp(0.0, 255.0).round();
            }
        }
    }
    Ok(Dataset {
        images,
        labels: None,
        split: vec![Split::Train; n],
        source: "synth_bars".into(),
    })
}

/// Uniform pixel noise in `[0, 255]`, the contrast dataset for bpd sanity
/// comparisons.
pub fn synth_uniform(n: usize, size: usize, rng: &mut impl Rng) -> Result<Dataset> {
    let images = Tensor4::from_fn(n, 1, size, size, |_, _, _, _| {
        rng.random_range(0..256) as f64
    });
    Ok(Dataset {
        images,
        labels: None,
        split: vec![Split::Train; n],
        source: "synth_uniform".into(),
    })
}
