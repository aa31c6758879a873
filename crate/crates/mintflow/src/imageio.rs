//! Binary PGM/PPM output for sample and interpolation grids. Plain formats,
//! no image-library dependency.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use std::io::Write;
use std::path::Path;

/// Tile a batch `(n, c, h, w)` into a single `(1, c, rows*h, cols*w)` image,
/// row-major, padding unused cells with zeros.
pub fn tile_grid(images: &Tensor4, cols: usize) -> Result<Tensor4> {
    if images.n() == 0 || cols == 0 {
        return Err(Error::InvalidArg("empty grid".into()));
    }
    let rows = images.n().div_ceil(cols);
    let (_, c, h, w) = images.shape();
    let mut out = Tensor4::zeros(1, c, rows * h, cols * w);
    for i in 0..images.n() {
        let (r, col) = (i / cols, i % cols);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(0, ch, r * h + y, col * w + x) = images.at(i, ch, y, x);
                }
            }
        }
    }
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

/// 8-bit binary PGM (P5) from a single grayscale image.
pub fn write_pgm(mut out: impl Write, img: &Tensor4) -> Result<()> {
    if img.n() != 1 || img.c() != 1 {
        return Err(Error::InvalidArg(format!(
            "PGM wants shape (1,1,h,w), got {}",
            img.shape_str()
        )));
    }
    write!(out, "P5\n{} {}\n255\n", img.w(), img.h())?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// 8-bit binary PPM (P6) from a single 3-channel image.
pub fn write_ppm(mut out: impl Write, img: &Tensor4) -> Result<()> {
    if img.n() != 1 || img.c() != 3 {
        return Err(Error::InvalidArg(format!(
            "PPM wants shape (1,3,h,w), got {}",
            img.shape_str()
        )));
    }
    write!(out, "P6\n{} {}\n255\n", img.w(), img.h())?;
    let mut bytes = Vec::with_capacity(3 * img.h() * img.w());
    for y in 0..img.h() {
        for x in 0..img.w() {
            for ch in 0..3 {
                bytes.push(to_byte(img.at(0, ch, y, x)));
            }
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

/// Write a sample batch as one tiled PGM (c = 1) or PPM (c = 3) file.
pub fn write_image_grid(path: &Path, images: &Tensor4, cols: usize) -> Result<()> {
    let grid = tile_grid(images, cols)?;
    let file = std::fs::File::create(path)?;
    match grid.c() {
        1 => write_pgm(file, &grid),
        3 => write_ppm(file, &grid),
        c => Err(Error::InvalidArg(format!("no grid format for {c} channels"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_payload() {
        let img = Tensor4::from_fn(1, 1, 2, 3, |_, _, y, x| (y * 3 + x) as f64 * 50.0);
        let mut buf = Vec::new();
        write_pgm(&mut buf, &img).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&buf[buf.len() - 6..], &[0, 50, 100, 150, 200, 250]);
    }

    #[test]
    fn ppm_interleaves_channels() {
        let img = Tensor4::from_fn(1, 3, 1, 2, |_, c, _, x| (c * 10 + x) as f64);
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).unwrap();
        assert!(buf.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&buf[buf.len() - 6..], &[0, 10, 20, 1, 11, 21]);
    }

    #[test]
    fn grid_tiles_row_major() {
        let imgs = Tensor4::from_fn(3, 1, 2, 2, |n, _, _, _| n as f64);
        let grid = tile_grid(&imgs, 2).unwrap();
        assert_eq!(grid.shape(), (1, 1, 4, 4));
        assert_eq!(grid.at(0, 0, 0, 0), 0.0);
        assert_eq!(grid.at(0, 0, 0, 2), 1.0);
        assert_eq!(grid.at(0, 0, 2, 0), 2.0);
        assert_eq!(grid.at(0, 0, 2, 2), 0.0); // padding
    }
}
