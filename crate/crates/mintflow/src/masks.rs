//! Binary masks that make convolutions triangular.
//!
//! Under the global flattening convention (flat index `c*H*W + y*W + x`,
//! channel-major then raster scan) a convolution whose weights are zeroed by
//! these masks has a triangular dense operator: for the lower orientation an
//! output coordinate only reads input coordinates at or before it in flat
//! order. The upper orientation is the point reflection of the lower mask in
//! both channel and kernel indices, so the center same-channel tap is kept by
//! both and the diagonal of the operator is the same center weight either way.

use crate::error::{Error, Result};
use crate::tensor::ConvWeight;

/// Whether a layer's Jacobian is lower or upper triangular.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Lower,
    Upper,
}

impl Orientation {
    pub fn flipped(self) -> Orientation {
        match self {
            Orientation::Lower => Orientation::Upper,
            Orientation::Upper => Orientation::Lower,
        }
    }
}

/// 0/1 mask with conv-weight shape `(c_out, c_in, r, r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    c_out: usize,
    c_in: usize,
    r: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn c_out(&self) -> usize {
        self.c_out
    }
    pub fn c_in(&self) -> usize {
        self.c_in
    }
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, m: usize, n: usize) -> f64 {
        self.data[((i * self.c_in + j) * self.r + m) * self.r + n]
    }

    /// Elementwise product with weights of the same shape.
    pub fn apply(&self, w: &ConvWeight) -> Result<ConvWeight> {
        if w.c_out() != self.c_out || w.c_in() != self.c_in || w.r() != self.r {
            return Err(Error::ShapeMismatch {
                context: "Mask::apply",
                expected: format!("({},{},{},{})", self.c_out, self.c_in, self.r, self.r),
                got: format!("({},{},{},{})", w.c_out(), w.c_in(), w.r(), w.r()),
            });
        }
        let data = w.data().iter().zip(&self.data).map(|(a, b)| a * b).collect();
        ConvWeight::new(self.c_out, self.c_in, self.r, data)
    }
}

fn lower_entry(i: usize, j: usize, m: usize, n: usize, ctr: usize) -> f64 {
    let masked = i < j || (i == j && m > ctr) || (i == j && m == ctr && n > ctr);
    if masked {
        0.0
    } else {
        1.0
    }
}

fn upper_entry(i: usize, j: usize, m: usize, n: usize, ctr: usize) -> f64 {
    let masked = i > j || (i == j && m < ctr) || (i == j && m == ctr && n < ctr);
    if masked {
        0.0
    } else {
        1.0
    }
}

/// Square `(c, c, r, r)` mask for one channel block.
pub fn base_mask(c: usize, r: usize, o: Orientation) -> Result<Mask> {
    if r % 2 == 0 {
        return Err(Error::InvalidArg(format!("mask kernel size must be odd, got {r}")));
    }
    if c == 0 {
        return Err(Error::InvalidArg("mask needs at least one channel".into()));
    }
    let ctr = r / 2;
    let mut data = Vec::with_capacity(c * c * r * r);
    for i in 0..c {
        for j in 0..c {
            for m in 0..r {
                for n in 0..r {
                    data.push(match o {
                        Orientation::Lower => lower_entry(i, j, m, n, ctr),
                        Orientation::Upper => upper_entry(i, j, m, n, ctr),
                    });
                }
            }
        }
    }
    Ok(Mask { c_out: c, c_in: c, r, data })
}

/// Block replication of [`base_mask`]: shape `(g_out*c, g_in*c, r, r)` where
/// every `(a, b)` group block carries a copy of the base mask.
pub fn grouped_mask(c: usize, g_out: usize, g_in: usize, r: usize, o: Orientation) -> Result<Mask> {
    if g_out == 0 || g_in == 0 {
        return Err(Error::InvalidArg("grouped mask needs g_out, g_in >= 1".into()));
    }
    let base = base_mask(c, r, o)?;
    let (co, ci) = (g_out * c, g_in * c);
    let mut data = vec![0.0; co * ci * r * r];
    for a in 0..g_out {
        for b in 0..g_in {
            for i in 0..c {
                for j in 0..c {
                    for m in 0..r {
                        for n in 0..r {
                            let idx = (((a * c + i) * ci + (b * c + j)) * r + m) * r + n;
                            data[idx] = base.at(i, j, m, n);
                        }
                    }
                }
            }
        }
    }
    Ok(Mask { c_out: co, c_in: ci, r, data })
}

/// Dense matrix of the conv operator under the flat ordering
/// `index = c*H*W + y*W + x`. Row-major, dims
/// `(c_out*h*w) x (c_in*h*w)`.
pub fn dense_operator(w: &ConvWeight, h: usize, wd: usize) -> Result<Vec<Vec<f64>>> {
    let rows = w.c_out() * h * wd;
    let cols = w.c_in() * h * wd;
    if rows > 4096 || cols > 4096 {
        return Err(Error::InvalidArg(format!(
            "dense operator {rows}x{cols} exceeds the 4096 guard"
        )));
    }
    let pad = w.r() / 2;
    let r = w.r();
    let mut m = vec![vec![0.0; cols]; rows];
    for co in 0..w.c_out() {
        for y in 0..h {
            for x in 0..wd {
                let row = (co * h + y) * wd + x;
                for ci in 0..w.c_in() {
                    for a in 0..r {
                        let yy = y as isize + a as isize - pad as isize;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for b in 0..r {
                            let xx = x as isize + b as isize - pad as isize;
                            if xx < 0 || xx >= wd as isize {
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
    Ok(m)
}

/// Whether `matrix` (square) is triangular with the given orientation,
/// treating entries as exact zeros.
pub fn matrix_is_triangular(m: &[Vec<f64>], o: Orientation) -> bool {
    let n = m.len();
    for (i, row) in m.iter().enumerate() {
        debug_assert_eq!(row.len(), n);
        for (j, &v) in row.iter().enumerate() {
            let offending = match o {
                Orientation::Lower => j > i,
                Orientation::Upper => j < i,
            };
            if offending && v != 0.0 {
                return false;
            }
        }
    }
    true
}

/// Builds the dense operator of the masked convolution and reports whether it
/// is triangular in orientation `o`. Square operators only.
pub fn triangularity_oracle(
    w: &ConvWeight,
    mask: &Mask,
    o: Orientation,
    h: usize,
    wd: usize,
) -> Result<bool> {
    if w.c_out() != w.c_in() {
        return Err(Error::InvalidArg(format!(
            "triangularity oracle needs a square operator, got c_out={} c_in={}",
            w.c_out(),
            w.c_in()
        )));
    }
    let masked = mask.apply(w)?;
    let m = dense_operator(&masked, h, wd)?;
    Ok(matrix_is_triangular(&m, o))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_weight(rng: &mut ChaCha8Rng, co: usize, ci: usize, r: usize) -> ConvWeight {
        let data = (0..co * ci * r * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        ConvWeight::new(co, ci, r, data).unwrap()
    }

    #[test]
    fn lower_single_channel_slab() {
        let m = base_mask(1, 3, Orientation::Lower).unwrap();
        let want = [[1.0, 1.0, 1.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
        for (row, wr) in want.iter().enumerate() {
            for (col, &v) in wr.iter().enumerate() {
                assert_eq!(m.at(0, 0, row, col), v, "at ({row},{col})");
            }
        }
    }

    #[test]
    fn upper_single_channel_slab() {
        let m = base_mask(1, 3, Orientation::Upper).unwrap();
        let want = [[0.0, 0.0, 0.0], [0.0, 1.0, 1.0], [1.0, 1.0, 1.0]];
        for (row, wr) in want.iter().enumerate() {
            for (col, &v) in wr.iter().enumerate() {
                assert_eq!(m.at(0, 0, row, col), v);
            }
        }
    }

    #[test]
    fn r1_mask_is_channel_triangle() {
        let m = base_mask(2, 1, Orientation::Lower).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i >= j { 1.0 } else { 0.0 };
                assert_eq!(m.at(i, j, 0, 0), want);
            }
        }
    }

    #[test]
    fn upper_is_point_reflection_of_lower() {
        for c in 1..=3usize {
            for r in [1usize, 3] {
                let lo = base_mask(c, r, Orientation::Lower).unwrap();
                let up = base_mask(c, r, Orientation::Upper).unwrap();
                for i in 0..c {
                    for j in 0..c {
                        for m in 0..r {
                            for n in 0..r {
                                assert_eq!(
                                    up.at(i, j, m, n),
                                    lo.at(c - 1 - i, c - 1 - j, r - 1 - m, r - 1 - n)
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn center_tap_always_kept() {
        for o in [Orientation::Lower, Orientation::Upper] {
            for c in 1..=3usize {
                for r in [1usize, 3, 5] {
                    let m = base_mask(c, r, o).unwrap();
                    for i in 0..c {
                        assert_eq!(m.at(i, i, r / 2, r / 2), 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(base_mask(1, 2, Orientation::Lower).is_err());
        assert!(grouped_mask(1, 1, 1, 4, Orientation::Lower).is_err());
        assert!(grouped_mask(1, 0, 1, 3, Orientation::Lower).is_err());
    }

    #[test]
    fn grouped_mask_replicates_base() {
        let g = grouped_mask(1, 2, 2, 3, Orientation::Lower).unwrap();
        assert_eq!((g.c_out(), g.c_in()), (2, 2));
        let want = [[1.0, 1.0, 1.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
        for i in 0..2 {
            for j in 0..2 {
                for (m, wr) in want.iter().enumerate() {
                    for (n, &v) in wr.iter().enumerate() {
                        assert_eq!(g.at(i, j, m, n), v);
                    }
                }
            }
        }
        // K copies along output groups for the first conv's shape.
        let k = 3;
        let (c, r) = (2, 3);
        let m1 = grouped_mask(c, k, 1, r, Orientation::Lower).unwrap();
        assert_eq!((m1.c_out(), m1.c_in()), (k * c, c));
        let base = base_mask(c, r, Orientation::Lower).unwrap();
        for a in 0..k {
            for i in 0..c {
                for j in 0..c {
                    for m in 0..r {
                        for n in 0..r {
                            assert_eq!(m1.at(a * c + i, j, m, n), base.at(i, j, m, n));
                        }
                    }
                }
            }
        }
        assert_eq!(grouped_mask(2, 1, 1, 3, Orientation::Upper).unwrap(),
                   base_mask(2, 3, Orientation::Upper).unwrap());
    }

    #[test]
    fn masked_weights_are_triangular_both_orientations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for o in [Orientation::Lower, Orientation::Upper] {
            for c in 1..=3usize {
                for r in [1usize, 3] {
                    for (h, wd) in [(2, 2), (4, 4), (3, 4)] {
                        let w = random_weight(&mut rng, c, c, r);
                        let m = base_mask(c, r, o).unwrap();
                        assert!(
                            triangularity_oracle(&w, &m, o, h, wd).unwrap(),
                            "c={c} r={r} {h}x{wd} {o:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn unmasked_weights_are_not_triangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let all_ones = Mask {
            c_out: 2,
            c_in: 2,
            r: 3,
            data: vec![1.0; 2 * 2 * 9],
        };
        let w = random_weight(&mut rng, 2, 2, 3);
        assert!(!triangularity_oracle(&w, &all_ones, Orientation::Lower, 4, 4).unwrap());
    }

    #[test]
    fn zero_weights_are_trivially_triangular() {
        let w = ConvWeight::zeros(2, 2, 3).unwrap();
        let m = base_mask(2, 3, Orientation::Lower).unwrap();
        assert!(triangularity_oracle(&w, &m, Orientation::Lower, 4, 4).unwrap());
        assert!(triangularity_oracle(&w, &m, Orientation::Upper, 4, 4).unwrap());
    }

    #[test]
    fn operator_diagonal_is_center_weight_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for o in [Orientation::Lower, Orientation::Upper] {
            let (c, r, h, wd) = (3, 3, 4, 4);
            let w = random_weight(&mut rng, c, c, r);
            let mask = base_mask(c, r, o).unwrap();
            let masked = mask.apply(&w).unwrap();
            let m = dense_operator(&masked, h, wd).unwrap();
            for ch in 0..c {
                for p in 0..h * wd {
                    let flat = ch * h * wd + p;
                    assert!(
                        (m[flat][flat] - masked.at(ch, ch, r / 2, r / 2)).abs() < 1e-15,
                        "diagonal not the center tap at channel {ch}, pixel {p}"
                    );
                }
            }
        }
    }

    #[test]
    fn oversize_operator_rejected() {
        let w = ConvWeight::zeros(1, 1, 3).unwrap();
        assert!(dense_operator(&w, 80, 80).is_err());
    }
}
