//! Dense rank-4 tensors and the CPU kernels everything else builds on.
//!
//! Layout is fixed globally: row-major `(n, c, h, w)` with 64-bit floats, so
//! "flatten" means the same thing in every module (channel-major, then raster
//! scan within a channel). Convolutions are same-shape cross-correlations with
//! zero padding of `r/2`; there is no stride support (subsampling is done by
//! the squeeze reshape).

use crate::error::{Error, Result};

/// Dense rank-4 array `(batch, channel, height, width)` of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch {
                context: "Tensor4::new",
                expected: format!("{} values for ({n},{c},{h},{w})", n * c * h * w),
                got: format!("{}", data.len()),
            });
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, v: f64) -> Self {
        Self { n, c, h, w, data: vec![v; n * c * h * w] }
    }

    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(n * c * h * w);
        for bn in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(bn, ch, y, x));
                    }
                }
            }
        }
        Self { n, c, h, w, data }
    }

    /// A `(1, len, 1, 1)` tensor, the canonical carrier for per-channel vectors.
    pub fn from_channel_vec(v: &[f64]) -> Self {
        Self { n: 1, c: v.len(), h: 1, w: 1, data: v.to_vec() }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn shape_str(&self) -> String {
        format!("({},{},{},{})", self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per batch element (`c*h*w`), the `D` of normalized errors.
    pub fn dims_per_element(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.idx(n, c, y, x);
        &mut self.data[i]
    }

    pub fn same_shape(&self, other: &Tensor4) -> bool {
        self.shape() == other.shape()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Reinterpret the flat data under a new shape of equal length.
    pub fn reshaped(&self, n: usize, c: usize, h: usize, w: usize) -> Result<Tensor4> {
        Tensor4::new(n, c, h, w, self.data.clone())
    }
}

/// Convolution weights `(c_out, c_in, r, r)` with odd kernel size.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeight {
    c_out: usize,
    c_in: usize,
    r: usize,
    data: Vec<f64>,
}

impl ConvWeight {
    pub fn new(c_out: usize, c_in: usize, r: usize, data: Vec<f64>) -> Result<Self> {
        if r % 2 == 0 {
            return Err(Error::InvalidArg(format!("kernel size must be odd, got {r}")));
        }
        if c_out == 0 || c_in == 0 {
            return Err(Error::InvalidArg("conv weight needs c_out, c_in >= 1".into()));
        }
        if data.len() != c_out * c_in * r * r {
            return Err(Error::ShapeMismatch {
                context: "ConvWeight::new",
                expected: format!("{} values for ({c_out},{c_in},{r},{r})", c_out * c_in * r * r),
                got: format!("{}", data.len()),
            });
        }
        Ok(Self { c_out, c_in, r, data })
    }

    pub fn zeros(c_out: usize, c_in: usize, r: usize) -> Result<Self> {
        Self::new(c_out, c_in, r, vec![0.0; c_out * c_in * r * r])
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }
    pub fn c_in(&self) -> usize {
        self.c_in
    }
    pub fn r(&self) -> usize {
        self.r
    }

    /// Center kernel index `r/2`.
    pub fn center(&self) -> usize {
        self.r / 2
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, co: usize, ci: usize, m: usize, n: usize) -> usize {
        ((co * self.c_in + ci) * self.r + m) * self.r + n
    }

    #[inline]
    pub fn at(&self, co: usize, ci: usize, m: usize, n: usize) -> f64 {
        self.data[self.idx(co, ci, m, n)]
    }

    #[inline]
    pub fn at_mut(&mut self, co: usize, ci: usize, m: usize, n: usize) -> &mut f64 {
        let i = self.idx(co, ci, m, n);
        &mut self.data[i]
    }

    /// View the weights as a `(c_out, c_in, r, r)` tensor (shared layout).
    pub fn as_tensor(&self) -> Tensor4 {
        Tensor4 {
            n: self.c_out,
            c: self.c_in,
            h: self.r,
            w: self.r,
            data: self.data.clone(),
        }
    }

    /// Inverse of [`ConvWeight::as_tensor`].
    pub fn from_tensor(t: &Tensor4) -> Result<Self> {
        if t.h() != t.w() {
            return Err(Error::ShapeMismatch {
                context: "ConvWeight::from_tensor",
                expected: "square kernel dims".into(),
                got: t.shape_str(),
            });
        }
        Self::new(t.n(), t.c(), t.h(), t.data().to_vec())
    }
}

fn check_same_shape(context: &'static str, a: &Tensor4, b: &Tensor4) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            context,
            expected: a.shape_str(),
            got: b.shape_str(),
        });
    }
    Ok(())
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    check_same_shape("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor4 { data, ..*a })
}

pub fn sub(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    check_same_shape("sub", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(Tensor4 { data, ..*a })
}

pub fn mul(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    check_same_shape("mul", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor4 { data, ..*a })
}

pub fn scale(a: &Tensor4, k: f64) -> Tensor4 {
    a.map(|v| k * v)
}

/// Add a per-channel vector (broadcast over batch and pixels).
pub fn add_channel(x: &Tensor4, v: &[f64]) -> Result<Tensor4> {
    if v.len() != x.c {
        return Err(Error::ShapeMismatch {
            context: "add_channel",
            expected: format!("{} channels", x.c),
            got: format!("{}", v.len()),
        });
    }
    let mut out = x.clone();
    let hw = x.h * x.w;
    for n in 0..x.n {
        for c in 0..x.c {
            let base = (n * x.c + c) * hw;
            for i in 0..hw {
                out.data[base + i] += v[c];
            }
        }
    }
    Ok(out)
}

/// Multiply by a per-channel vector (broadcast over batch and pixels).
pub fn mul_channel(x: &Tensor4, v: &[f64]) -> Result<Tensor4> {
    if v.len() != x.c {
        return Err(Error::ShapeMismatch {
            context: "mul_channel",
            expected: format!("{} channels", x.c),
            got: format!("{}", v.len()),
        });
    }
    let mut out = x.clone();
    let hw = x.h * x.w;
    for n in 0..x.n {
        for c in 0..x.c {
            let base = (n * x.c + c) * hw;
            for i in 0..hw {
                out.data[base + i] *= v[c];
            }
        }
    }
    Ok(out)
}

/// Per-channel sums over batch and pixels (the backward of the broadcasts).
pub fn sum_channels(x: &Tensor4) -> Vec<f64> {
    let mut out = vec![0.0; x.c];
    let hw = x.h * x.w;
    for n in 0..x.n {
        for c in 0..x.c {
            let base = (n * x.c + c) * hw;
            for i in 0..hw {
                out[c] += x.data[base + i];
            }
        }
    }
    out
}

pub fn sum_all(x: &Tensor4) -> f64 {
    x.data.iter().sum()
}

/// Per-batch-element sums, length `n`.
pub fn sum_per_element(x: &Tensor4) -> Vec<f64> {
    let d = x.dims_per_element();
    (0..x.n).map(|n| x.data[n * d..(n + 1) * d].iter().sum()).collect()
}

/// Sum over a subset of axes (0..4); reduced axes keep size 1.
pub fn reduce_sum(x: &Tensor4, axes: &[usize]) -> Result<Tensor4> {
    for &a in axes {
        if a >= 4 {
            return Err(Error::InvalidArg(format!("reduce_sum axis {a} out of range")));
        }
    }
    let keep = |a: usize| !axes.contains(&a);
    let (on, oc, oh, ow) = (
        if keep(0) { x.n } else { 1 },
        if keep(1) { x.c } else { 1 },
        if keep(2) { x.h } else { 1 },
        if keep(3) { x.w } else { 1 },
    );
    let mut out = Tensor4::zeros(on, oc, oh, ow);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let i = out.idx(
                        if keep(0) { n } else { 0 },
                        if keep(1) { c } else { 0 },
                        if keep(2) { y } else { 0 },
                        if keep(3) { xx } else { 0 },
                    );
                    out.data[i] += x.at(n, c, y, xx);
                }
            }
        }
    }
    Ok(out)
}

/// Same-shape 2D cross-correlation with zero padding.
///
/// `out(n,co,y,x) = bias(co) + sum_{ci,a,b} w(co,ci,a,b) * x(n,ci,y+a-pad,x+b-pad)`
/// with out-of-range reads treated as zero. Requires `pad == r/2` so the
/// output shape equals the input shape.
pub fn conv2d(x: &Tensor4, w: &ConvWeight, bias: Option<&[f64]>, pad: usize) -> Result<Tensor4> {
    if x.c != w.c_in {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            expected: format!("input with {} channels for weight ({},{},{},{})", w.c_in, w.c_out, w.c_in, w.r, w.r),
            got: x.shape_str(),
        });
    }
    if pad != w.r / 2 {
        return Err(Error::InvalidArg(format!(
            "conv2d requires pad == r/2 ({}), got {pad}",
            w.r / 2
        )));
    }
    if let Some(b) = bias {
        if b.len() != w.c_out {
            return Err(Error::ShapeMismatch {
                context: "conv2d bias",
                expected: format!("{} entries", w.c_out),
                got: format!("{}", b.len()),
            });
        }
    }
    let r = w.r;
    let mut out = Tensor4::zeros(x.n, w.c_out, x.h, x.w);
    for n in 0..x.n {
        for co in 0..w.c_out {
            let b = bias.map_or(0.0, |b| b[co]);
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut acc = b;
                    for ci in 0..w.c_in {
                        for a in 0..r {
                            let yy = y as isize + a as isize - pad as isize;
                            if yy < 0 || yy >= x.h as isize {
                                continue;
                            }
                            for bb in 0..r {
                                let xs = xx as isize + bb as isize - pad as isize;
                                if xs < 0 || xs >= x.w as isize {
                                    continue;
                                }
                                acc += w.at(co, ci, a, bb) * x.at(n, ci, yy as usize, xs as usize);
                            }
                        }
                    }
                    *out.at_mut(n, co, y, xx) = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `conv2d` w.r.t. its input: correlate `grad_out` with the
/// spatially flipped, channel-transposed kernel.
pub fn conv2d_grad_input(w: &ConvWeight, grad_out: &Tensor4, pad: usize) -> Result<Tensor4> {
    let r = w.r;
    let mut wt = ConvWeight::zeros(w.c_in, w.c_out, r)?;
    for co in 0..w.c_out {
        for ci in 0..w.c_in {
            for a in 0..r {
                for b in 0..r {
                    *wt.at_mut(ci, co, r - 1 - a, r - 1 - b) = w.at(co, ci, a, b);
                }
            }
        }
    }
    conv2d(grad_out, &wt, None, pad)
}

/// Gradient of `conv2d` w.r.t. its weights.
pub fn conv2d_grad_weight(x: &Tensor4, grad_out: &Tensor4, r: usize, pad: usize) -> Result<ConvWeight> {
    if x.n != grad_out.n() || x.h != grad_out.h() || x.w != grad_out.w() {
        return Err(Error::ShapeMismatch {
            context: "conv2d_grad_weight",
            expected: x.shape_str(),
            got: grad_out.shape_str(),
        });
    }
    let mut gw = ConvWeight::zeros(grad_out.c(), x.c, r)?;
    for n in 0..x.n {
        for co in 0..grad_out.c() {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let g = grad_out.at(n, co, y, xx);
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..x.c {
                        for a in 0..r {
                            let yy = y as isize + a as isize - pad as isize;
                            if yy < 0 || yy >= x.h as isize {
                                continue;
                            }
                            for b in 0..r {
                                let xs = xx as isize + b as isize - pad as isize;
                                if xs < 0 || xs >= x.w as isize {
                                    continue;
                                }
                                *gw.at_mut(co, ci, a, b) += g * x.at(n, ci, yy as usize, xs as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gw)
}

/// Per-output-channel bias gradient: sums of `grad_out` over batch and pixels.
pub fn conv2d_grad_bias(grad_out: &Tensor4) -> Vec<f64> {
    sum_channels(grad_out)
}

/// Gather flat indices into a `(1, len, 1, 1)` tensor.
pub fn gather_flat(x: &Tensor4, idx: &[usize]) -> Result<Tensor4> {
    let mut data = Vec::with_capacity(idx.len());
    for &i in idx {
        if i >= x.len() {
            return Err(Error::InvalidArg(format!(
                "gather index {i} out of range for {} elements",
                x.len()
            )));
        }
        data.push(x.data[i]);
    }
    Ok(Tensor4 { n: 1, c: idx.len(), h: 1, w: 1, data })
}

/// Scatter-add `vals` into a zero tensor of shape `like` at flat indices.
pub fn scatter_add_flat(like: &Tensor4, idx: &[usize], vals: &Tensor4) -> Result<Tensor4> {
    if vals.len() != idx.len() {
        return Err(Error::ShapeMismatch {
            context: "scatter_add_flat",
            expected: format!("{} values", idx.len()),
            got: format!("{}", vals.len()),
        });
    }
    let mut out = Tensor4::zeros(like.n, like.c, like.h, like.w);
    for (&i, &v) in idx.iter().zip(vals.data()) {
        out.data[i] += v;
    }
    Ok(out)
}

/// Channel slice `[start, start+len)`.
pub fn slice_channels(x: &Tensor4, start: usize, len: usize) -> Result<Tensor4> {
    if start + len > x.c {
        return Err(Error::InvalidArg(format!(
            "channel slice {start}..{} out of range for {} channels",
            start + len,
            x.c
        )));
    }
    let hw = x.h * x.w;
    let mut data = Vec::with_capacity(x.n * len * hw);
    for n in 0..x.n {
        let base = (n * x.c + start) * hw;
        data.extend_from_slice(&x.data[base..base + len * hw]);
    }
    Ok(Tensor4 { n: x.n, c: len, h: x.h, w: x.w, data })
}

/// Embed a channel slice back into a zero tensor with `c_total` channels.
pub fn pad_channels(x: &Tensor4, start: usize, c_total: usize) -> Result<Tensor4> {
    if start + x.c > c_total {
        return Err(Error::InvalidArg(format!(
            "cannot place {} channels at offset {start} in {c_total}",
            x.c
        )));
    }
    let hw = x.h * x.w;
    let mut out = Tensor4::zeros(x.n, c_total, x.h, x.w);
    for n in 0..x.n {
        let src = n * x.c * hw;
        let dst = (n * c_total + start) * hw;
        out.data[dst..dst + x.c * hw].copy_from_slice(&x.data[src..src + x.c * hw]);
    }
    Ok(out)
}

/// Tile the channel block `k` times: `(n, c, h, w) -> (n, k*c, h, w)`.
pub fn group_repeat(x: &Tensor4, k: usize) -> Result<Tensor4> {
    if k == 0 {
        return Err(Error::InvalidArg("group_repeat needs k >= 1".into()));
    }
    let hw = x.h * x.w;
    let mut data = Vec::with_capacity(x.n * k * x.c * hw);
    for n in 0..x.n {
        let base = n * x.c * hw;
        for _ in 0..k {
            data.extend_from_slice(&x.data[base..base + x.c * hw]);
        }
    }
    Ok(Tensor4 { n: x.n, c: k * x.c, h: x.h, w: x.w, data })
}

/// Sum `k` channel groups: `(n, k*c, h, w) -> (n, c, h, w)` with
/// `out(c) = sum_g in(g*c_out + c)`.
pub fn group_sum(x: &Tensor4, k: usize) -> Result<Tensor4> {
    if k == 0 || x.c % k != 0 {
        return Err(Error::InvalidArg(format!(
            "group_sum: {} channels not divisible into {k} groups",
            x.c
        )));
    }
    let cg = x.c / k;
    let hw = x.h * x.w;
    let mut out = Tensor4::zeros(x.n, cg, x.h, x.w);
    for n in 0..x.n {
        for g in 0..k {
            for c in 0..cg {
                let src = (n * x.c + g * cg + c) * hw;
                let dst = (n * cg + c) * hw;
                for i in 0..hw {
                    out.data[dst + i] += x.data[src + i];
                }
            }
        }
    }
    Ok(out)
}

/// Space-to-depth: `(n, c, h, w) -> (n, c*k*k, h/k, w/k)` with sub-pixel
/// channel order `(c, dy, dx)`. A pure permutation of coordinates.
pub fn squeeze(x: &Tensor4, k: usize) -> Result<Tensor4> {
    if k == 0 || x.h % k != 0 || x.w % k != 0 {
        return Err(Error::InvalidArg(format!(
            "squeeze factor {k} does not divide spatial dims {}x{}",
            x.h, x.w
        )));
    }
    let (oh, ow) = (x.h / k, x.w / k);
    let mut out = Tensor4::zeros(x.n, x.c * k * k, oh, ow);
    for n in 0..x.n {
        for c in 0..x.c {
            for dy in 0..k {
                for dx in 0..k {
                    let oc = (c * k + dy) * k + dx;
                    for y in 0..oh {
                        for xx in 0..ow {
                            *out.at_mut(n, oc, y, xx) = x.at(n, c, y * k + dy, xx * k + dx);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`squeeze`].
pub fn unsqueeze(x: &Tensor4, k: usize) -> Result<Tensor4> {
    if k == 0 || x.c % (k * k) != 0 {
        return Err(Error::InvalidArg(format!(
            "unsqueeze factor {k} does not divide {} channels",
            x.c
        )));
    }
    let oc = x.c / (k * k);
    let mut out = Tensor4::zeros(x.n, oc, x.h * k, x.w * k);
    for n in 0..x.n {
        for c in 0..oc {
            for dy in 0..k {
                for dx in 0..k {
                    let ic = (c * k + dy) * k + dx;
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            *out.at_mut(n, c, y * k + dy, xx * k + dx) = x.at(n, ic, y, xx);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        Tensor4::from_fn(n, c, h, w, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_weight(rng: &mut ChaCha8Rng, co: usize, ci: usize, r: usize) -> ConvWeight {
        let data = (0..co * ci * r * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        ConvWeight::new(co, ci, r, data).unwrap()
    }

    /// Dense matrix of the conv operator under channel-major raster flattening.
    fn dense_conv_matrix(w: &ConvWeight, h: usize, wd: usize) -> Vec<Vec<f64>> {
        let pad = w.r() / 2;
        let (rows, cols) = (w.c_out() * h * wd, w.c_in() * h * wd);
        let mut m = vec![vec![0.0; cols]; rows];
        for co in 0..w.c_out() {
            for y in 0..h {
                for x in 0..wd {
                    let row = (co * h + y) * wd + x;
                    for ci in 0..w.c_in() {
                        for a in 0..w.r() {
                            for b in 0..w.r() {
                                let yy = y as isize + a as isize - pad as isize;
                                let xx = x as isize + b as isize - pad as isize;
                                if yy < 0 || yy >= h as isize || xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                let col = (ci * h + yy as usize) * wd + xx as usize;
                                m[row][col] += w.at(co, ci, a, b);
                            }
                        }
                    }
                }
            }
        }
        m
    }

    #[test]
    fn conv_ones_window() {
        let x = Tensor4::full(1, 1, 2, 2, 1.0);
        let w = ConvWeight::new(1, 1, 3, vec![1.0; 9]).unwrap();
        let out = conv2d(&x, &w, None, 1).unwrap();
        assert_eq!(out.shape(), (1, 1, 2, 2));
        for &v in out.data() {
            assert_eq!(v, 4.0);
        }
    }

    #[test]
    fn conv_zero_weights_gives_bias() {
        let x = Tensor4::from_fn(1, 2, 3, 3, |_, c, y, x| (c + y + x) as f64);
        let w = ConvWeight::zeros(3, 2, 3).unwrap();
        let out = conv2d(&x, &w, Some(&[1.0, -2.0, 0.5]), 1).unwrap();
        for co in 0..3 {
            for y in 0..3 {
                for xx in 0..3 {
                    assert_eq!(out.at(0, co, y, xx), [1.0, -2.0, 0.5][co]);
                }
            }
        }
    }

    #[test]
    fn conv_matches_dense_operator() {
        // Exhaustive small sweep, including non-square channel counts.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=2usize {
            for ci in 1..=3usize {
                for co in 1..=3usize {
                    for (h, wd) in [(2, 2), (3, 4), (4, 4)] {
                        for r in [1usize, 3] {
                            let x = random_tensor(&mut rng, n, ci, h, wd);
                            let w = random_weight(&mut rng, co, ci, r);
                            let out = conv2d(&x, &w, None, r / 2).unwrap();
                            let m = dense_conv_matrix(&w, h, wd);
                            for bn in 0..n {
                                let xf: Vec<f64> =
                                    x.data()[bn * ci * h * wd..(bn + 1) * ci * h * wd].to_vec();
                                for (row, mrow) in m.iter().enumerate() {
                                    let want: f64 =
                                        mrow.iter().zip(&xf).map(|(a, b)| a * b).sum();
                                    let got = out.data()[bn * co * h * wd + row];
                                    assert!(
                                        (want - got).abs() < 1e-12,
                                        "mismatch at n={bn} row={row}: {want} vs {got}"
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let x = Tensor4::zeros(1, 2, 4, 4);
        let w = ConvWeight::zeros(1, 3, 3).unwrap();
        let err = conv2d(&x, &w, None, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3") && msg.contains("(1,2,4,4)"), "{msg}");
    }

    proptest! {
        #[test]
        fn conv_is_linear(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, 1, 2, 4, 4);
            let y = random_tensor(&mut rng, 1, 2, 4, 4);
            let w = random_weight(&mut rng, 2, 2, 3);
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let lhs = conv2d(&add(&scale(&x, a), &scale(&y, b)).unwrap(), &w, None, 1).unwrap();
            let rhs = add(
                &scale(&conv2d(&x, &w, None, 1).unwrap(), a),
                &scale(&conv2d(&y, &w, None, 1).unwrap(), b),
            )
            .unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }

        #[test]
        fn squeeze_roundtrip_is_identity(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, 2, 3, 4, 4);
            let s = squeeze(&x, 2).unwrap();
            prop_assert_eq!(s.shape(), (2, 12, 2, 2));
            let back = unsqueeze(&s, 2).unwrap();
            prop_assert_eq!(back, x);
        }
    }

    #[test]
    fn squeeze_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 1, 1, 4, 4);
        let s = squeeze(&x, 2).unwrap();
        assert_eq!(s.shape(), (1, 4, 2, 2));
        assert!((sum_all(&x) - sum_all(&s)).abs() < 1e-12);
        let mut a = x.data().to_vec();
        let mut b = s.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn elementwise_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, 2, 1, 2, 2);
        let ones = Tensor4::full(2, 1, 2, 2, 1.0);
        assert_eq!(mul(&x, &ones).unwrap(), x);
        assert_eq!(sum_all(&Tensor4::full(2, 1, 2, 2, 1.0)), 8.0);
        let elu = |v: f64| if v > 0.0 { v } else { v.exp() - 1.0 };
        let y = Tensor4::full(1, 1, 1, 1, -1.0).map(elu);
        assert!((y.data()[0] - (-0.6321205588285577)).abs() < 1e-15);
    }

    #[test]
    fn reduce_sum_axes() {
        let x = Tensor4::full(2, 1, 2, 2, 1.0);
        let all = reduce_sum(&x, &[0, 1, 2, 3]).unwrap();
        assert_eq!(all.shape(), (1, 1, 1, 1));
        assert_eq!(all.data()[0], 8.0);
        let per_n = reduce_sum(&x, &[1, 2, 3]).unwrap();
        assert_eq!(per_n.shape(), (2, 1, 1, 1));
        assert_eq!(per_n.data(), &[4.0, 4.0]);
    }

    #[test]
    fn conv_grad_input_matches_dense_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, wd) = (3, 4);
        let w = random_weight(&mut rng, 2, 3, 3);
        let g = random_tensor(&mut rng, 1, 2, h, wd);
        let gx = conv2d_grad_input(&w, &g, 1).unwrap();
        let m = dense_conv_matrix(&w, h, wd);
        // grad_x = M^T grad_out
        for ci in 0..3 {
            for y in 0..h {
                for x in 0..wd {
                    let col = (ci * h + y) * wd + x;
                    let want: f64 = (0..2 * h * wd).map(|row| m[row][col] * g.data()[row]).sum();
                    let got = gx.at(0, ci, y, x);
                    assert!((want - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn group_ops_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, 2, 2, 2, 2);
        let rep = group_repeat(&x, 3).unwrap();
        assert_eq!(rep.shape(), (2, 6, 2, 2));
        let summed = group_sum(&rep, 3).unwrap();
        for (a, b) in summed.data().iter().zip(x.data()) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_and_pad_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_tensor(&mut rng, 2, 4, 2, 2);
        let s = slice_channels(&x, 1, 2).unwrap();
        assert_eq!(s.shape(), (2, 2, 2, 2));
        assert_eq!(s.at(1, 0, 1, 1), x.at(1, 1, 1, 1));
        let p = pad_channels(&s, 1, 4).unwrap();
        assert_eq!(p.at(1, 1, 1, 1), x.at(1, 1, 1, 1));
        assert_eq!(p.at(1, 0, 1, 1), 0.0);
        assert_eq!(p.at(1, 3, 0, 0), 0.0);
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_tensor(&mut rng, 1, 2, 2, 2);
        let idx = [0usize, 3, 5];
        let g = gather_flat(&x, &idx).unwrap();
        assert_eq!(g.shape(), (1, 3, 1, 1));
        let back = scatter_add_flat(&x, &idx, &g).unwrap();
        for (i, &v) in back.data().iter().enumerate() {
            let want = if idx.contains(&i) { x.data()[i] } else { 0.0 };
            assert_eq!(v, want);
        }
    }
}
