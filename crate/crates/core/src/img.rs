//! Images: linear RGB in `[0, 1]`, bilinear sampling with gradients, and
//! binary PPM / PNG round trips (8-bit at the file boundary, linear values
//! in memory on both sides — no gamma transform anywhere).

use crate::error::{Error, Result};
use std::path::Path;

/// Row-major RGB image, origin top-left, pixel centers at integer + 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `3 * width * height` values in `[0, 1]`.
    pub data: Vec<f64>,
}

impl Image {
    pub fn constant(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let base = 3 * (y * self.width + x);
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let base = 3 * (y * self.width + x);
        self.data[base..base + 3].copy_from_slice(&rgb);
    }

    /// Whether `u` lies in the bilinear-sampling domain
    /// `[0.5, W-0.5] x [0.5, H-0.5]` (full four-pixel support).
    pub fn in_sampling_bounds(&self, u: &[f64; 2]) -> bool {
        u[0] >= 0.5
            && u[0] <= self.width as f64 - 0.5
            && u[1] >= 0.5
            && u[1] <= self.height as f64 - 0.5
    }

    /// Bilinear sample at `u` (pixel coordinates). Out-of-bounds positions are
    /// a contract violation: visibility must filter before sampling.
    pub fn sample_bilinear(&self, u: &[f64; 2]) -> Result<[f64; 3]> {
        if !self.in_sampling_bounds(u) {
            return Err(Error::InvalidInput(format!(
                "sample position ({}, {}) outside the {}x{} sampling domain",
                u[0], u[1], self.width, self.height
            )));
        }
        Ok(self.sample_bilinear_unchecked(u).0)
    }

    /// Bilinear sample plus its Jacobian `∂color/∂u` (3 rows by 2 columns),
    /// which is exact for the piecewise-bilinear reconstruction.
    /// Also reports the integer cell the sample fell in, so callers can detect
    /// cell crossings between two nearby evaluations.
    pub(crate) fn sample_bilinear_unchecked(&self, u: &[f64; 2]) -> ([f64; 3], [[f64; 2]; 3], [usize; 2]) {
        let gx = u[0] - 0.5;
        let gy = u[1] - 0.5;
        let x0 = (gx.floor() as isize).clamp(0, self.width as isize - 2) as usize;
        let y0 = (gy.floor() as isize).clamp(0, self.height as isize - 2) as usize;
        let tx = gx - x0 as f64;
        let ty = gy - y0 as f64;
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x0 + 1, y0);
        let p01 = self.pixel(x0, y0 + 1);
        let p11 = self.pixel(x0 + 1, y0 + 1);
        let mut value = [0.0f64; 3];
        let mut jac = [[0.0f64; 2]; 3];
        for c in 0..3 {
            let a = p00[c] * (1.0 - tx) + p10[c] * tx;
            let b = p01[c] * (1.0 - tx) + p11[c] * tx;
            value[c] = a * (1.0 - ty) + b * ty;
            jac[c][0] = (p10[c] - p00[c]) * (1.0 - ty) + (p11[c] - p01[c]) * ty;
            jac[c][1] = b - a;
        }
        (value, jac, [x0, y0])
    }

    pub fn mean_intensity(&self) -> [f64; 3] {
        let mut sum = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            sum[0] += px[0];
            sum[1] += px[1];
            sum[2] += px[2];
        }
        let n = (self.width * self.height) as f64;
        [sum[0] / n, sum[1] / n, sum[2] / n]
    }

    /// Mean intensity per channel over a pixel rectangle, clipped to bounds.
    pub fn mean_intensity_in_rect(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> [f64; 3] {
        let xa = (x0.floor().max(0.0) as usize).min(self.width - 1);
        let ya = (y0.floor().max(0.0) as usize).min(self.height - 1);
        let xb = (x1.ceil().max(0.0) as usize).min(self.width - 1);
        let yb = (y1.ceil().max(0.0) as usize).min(self.height - 1);
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        for y in ya..=yb {
            for x in xa..=xb {
                let p = self.pixel(x, y);
                for c in 0..3 {
                    sum[c] += p[c];
                }
                n += 1;
            }
        }
        if n == 0 {
            return self.mean_intensity();
        }
        [sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64]
    }

    fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Image { width, height, data }
    }

    /// Write as binary PPM (P6, 8-bit). Values clamp to `[0, 1]` here only.
    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.to_rgb8());
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut fields = Vec::new();
        let mut pos = 0usize;
        // header: magic, width, height, maxval, separated by whitespace/comments
        while fields.len() < 4 && pos < bytes.len() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
        }
        if fields.len() < 4 || fields[0] != "P6" {
            return Err(Error::parse(path, 1, "not a binary P6 PPM file"));
        }
        let width: usize = fields[1].parse().map_err(|_| Error::parse(path, 1, "bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| Error::parse(path, 1, "bad height"))?;
        if fields[3] != "255" {
            return Err(Error::parse(path, 1, "only maxval 255 is supported"));
        }
        pos += 1; // single whitespace after maxval
        let need = 3 * width * height;
        if bytes.len() < pos + need {
            return Err(Error::parse(path, 1, "truncated pixel data"));
        }
        Ok(Image::from_rgb8(width, height, &bytes[pos..pos + need]))
    }

    /// Write as 8-bit RGB PNG. Deterministic bytes for identical content.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = self.to_rgb8();
        image::save_buffer(
            path,
            &buf,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Archive {
            path: path.display().to_string(),
            msg: format!("png write failed: {e}"),
        })
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Archive {
                path: path.display().to_string(),
                msg: format!("png read failed: {e}"),
            })?
            .to_rgb8();
        Ok(Image::from_rgb8(
            img.width() as usize,
            img.height() as usize,
            img.as_raw(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn gradient_image(w: usize, h: usize) -> Image {
        let mut img = Image::constant(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(
                    x,
                    y,
                    [
                        x as f64 / w as f64,
                        y as f64 / h as f64,
                        (x + y) as f64 / (w + h) as f64,
                    ],
                );
            }
        }
        img
    }

    #[test]
    fn sample_at_pixel_center_returns_pixel() {
        let img = gradient_image(8, 8);
        let got = img.sample_bilinear(&[3.5, 2.5]).unwrap();
        assert_eq!(got, img.pixel(3, 2));
    }

    #[test]
    fn sample_midway_averages_neighbors() {
        let img = gradient_image(8, 8);
        let got = img.sample_bilinear(&[4.0, 2.5]).unwrap();
        let a = img.pixel(3, 2);
        let b = img.pixel(4, 2);
        for c in 0..3 {
            assert_abs_diff_eq!(got[c], (a[c] + b[c]) / 2.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn sample_matches_closed_form_bilinear() {
        let mut rng = crate::rng::derive_rng(5, "img-test", 0);
        let mut img = Image::constant(16, 12, [0.0; 3]);
        for y in 0..12 {
            for x in 0..16 {
                img.set_pixel(x, y, [rng.random(), rng.random(), rng.random()]);
            }
        }
        for _ in 0..100 {
            let u = [rng.random_range(0.5..15.5), rng.random_range(0.5..11.5)];
            let got = img.sample_bilinear(&u).unwrap();
            let x0 = (u[0] - 0.5).floor().min(14.0) as usize;
            let y0 = (u[1] - 0.5).floor().min(10.0) as usize;
            let tx = u[0] - 0.5 - x0 as f64;
            let ty = u[1] - 0.5 - y0 as f64;
            for c in 0..3 {
                let expect = img.pixel(x0, y0)[c] * (1.0 - tx) * (1.0 - ty)
                    + img.pixel(x0 + 1, y0)[c] * tx * (1.0 - ty)
                    + img.pixel(x0, y0 + 1)[c] * (1.0 - tx) * ty
                    + img.pixel(x0 + 1, y0 + 1)[c] * tx * ty;
                assert_abs_diff_eq!(got[c], expect, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn out_of_bounds_sampling_is_an_error() {
        let img = gradient_image(8, 8);
        assert!(img.sample_bilinear(&[0.4, 4.0]).is_err());
        assert!(img.sample_bilinear(&[4.0, 7.6]).is_err());
    }

    #[test]
    fn sampling_jacobian_matches_finite_differences() {
        let mut rng = crate::rng::derive_rng(5, "img-test", 1);
        let mut img = Image::constant(10, 10, [0.0; 3]);
        for y in 0..10 {
            for x in 0..10 {
                img.set_pixel(x, y, [rng.random(), rng.random(), rng.random()]);
            }
        }
        let h = 1e-6;
        for _ in 0..50 {
            // keep away from cell boundaries
            let u = [
                (rng.random_range(1i32..9) as f64) + rng.random_range(0.1..0.9),
                (rng.random_range(1i32..9) as f64) + rng.random_range(0.1..0.9),
            ];
            let (_, jac, _) = img.sample_bilinear_unchecked(&u);
            for d in 0..2 {
                let mut up = u;
                let mut um = u;
                up[d] += h;
                um[d] -= h;
                let vp = img.sample_bilinear(&up).unwrap();
                let vm = img.sample_bilinear(&um).unwrap();
                for c in 0..3 {
                    let fd = (vp[c] - vm[c]) / (2.0 * h);
                    assert_abs_diff_eq!(jac[c][d], fd, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn ppm_round_trip_is_lossless_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image(9, 7);
        let path = dir.path().join("t.ppm");
        img.write_ppm(&path).unwrap();
        let back = Image::read_ppm(&path).unwrap();
        assert_eq!(back.width, 9);
        assert_eq!(back.height, 7);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
        // a second write is byte-identical
        let path2 = dir.path().join("t2.ppm");
        back.write_ppm(&path2).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn png_round_trip_matches_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image(12, 5);
        let path = dir.path().join("t.png");
        img.write_png(&path).unwrap();
        let back = Image::read_png(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }
}
