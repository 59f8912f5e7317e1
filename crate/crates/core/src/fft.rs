//! 2-D discrete Fourier transforms on row-major complex grids.
//!
//! Convention: the forward transform is unnormalized and the inverse carries
//! the full `1/(h*w)` factor. The unitary variants split the factor as
//! `1/sqrt(h*w)` on each side; the masked-Fourier measurement operator uses
//! those so that a full mask gives an exact isometry.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::image::Image;

/// Cached transform plans for one grid shape.
pub struct Dft2 {
    pub height: usize,
    pub width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Dft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Dft2 {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    fn transform(&self, buf: &mut [Complex<f64>], inverse: bool) {
        assert_eq!(buf.len(), self.height * self.width);
        let (h, w) = (self.height, self.width);
        let row = if inverse { &self.row_inv } else { &self.row_fwd };
        let col = if inverse { &self.col_inv } else { &self.col_fwd };
        for r in 0..h {
            row.process(&mut buf[r * w..(r + 1) * w]);
        }
        // Columns via transpose, process, transpose back.
        let mut t = vec![Complex::new(0.0, 0.0); h * w];
        for r in 0..h {
            for c in 0..w {
                t[c * h + r] = buf[r * w + c];
            }
        }
        for c in 0..w {
            col.process(&mut t[c * h..(c + 1) * h]);
        }
        for r in 0..h {
            for c in 0..w {
                buf[r * w + c] = t[c * h + r];
            }
        }
    }

    /// Unnormalized forward DFT, in place.
    pub fn forward(&self, buf: &mut [Complex<f64>]) {
        self.transform(buf, false);
    }

    /// Inverse DFT with the full `1/(h*w)` normalization, in place.
    pub fn inverse(&self, buf: &mut [Complex<f64>]) {
        self.transform(buf, true);
        let scale = 1.0 / (self.height * self.width) as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }

    /// Unitary forward DFT (`1/sqrt(h*w)` scaling), in place.
    pub fn forward_unitary(&self, buf: &mut [Complex<f64>]) {
        self.transform(buf, false);
        let scale = 1.0 / ((self.height * self.width) as f64).sqrt();
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }

    /// Unitary inverse DFT, in place. Exact inverse of [`forward_unitary`].
    pub fn inverse_unitary(&self, buf: &mut [Complex<f64>]) {
        self.transform(buf, true);
        let scale = 1.0 / ((self.height * self.width) as f64).sqrt();
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

/// Lift a real image into a complex buffer.
pub fn to_complex(x: &Image) -> Vec<Complex<f64>> {
    x.data.iter().map(|&v| Complex::new(v, 0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unitary_roundtrip_is_identity() {
        let x = Image::from_fn(4, 6, |r, c| (r * 6 + c) as f64 * 0.1 - 1.0);
        let dft = Dft2::new(4, 6);
        let mut buf = to_complex(&x);
        dft.forward_unitary(&mut buf);
        dft.inverse_unitary(&mut buf);
        for (v, orig) in buf.iter().zip(&x.data) {
            assert!((v.re - orig).abs() < 1e-12);
            assert!(v.im.abs() < 1e-12);
        }
    }

    #[test]
    fn forward_of_constant_concentrates_at_dc() {
        let x = Image::constant(4, 4, 2.0);
        let dft = Dft2::new(4, 4);
        let mut buf = to_complex(&x);
        dft.forward(&mut buf);
        assert!((buf[0].re - 32.0).abs() < 1e-12); // 2 * 16, unnormalized
        for v in &buf[1..] {
            assert!(v.norm() < 1e-12);
        }
    }

    #[test]
    fn parseval_under_unitary_transform() {
        let x = Image::from_fn(8, 8, |r, c| ((r * 13 + c * 7) % 5) as f64 - 2.0);
        let dft = Dft2::new(8, 8);
        let mut buf = to_complex(&x);
        dft.forward_unitary(&mut buf);
        let e_freq: f64 = buf.iter().map(|v| v.norm_sqr()).sum();
        let e_space: f64 = x.data.iter().map(|v| v * v).sum();
        assert!((e_freq - e_space).abs() < 1e-10);
    }
}
