//! Single-channel real-valued image on a regular grid, row-major.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    /// Validating constructor: dimensions at least 1x1, data of matching
    /// length, all entries finite.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::InvalidArgument(
                "image dimensions must be at least 1x1".into(),
            ));
        }
        if data.len() != height * width {
            return Err(CoreError::DimensionMismatch(format!(
                "image data length {} != {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("image data".into()));
        }
        Ok(Image { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width] }
    }

    pub fn constant(height: usize, width: usize, v: f64) -> Self {
        Image { height, width, data: vec![v; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Image { height, width, data }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.width + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn dot(&self, other: &Image) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> Image {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    pub fn add(&self, other: &Image) -> Image {
        debug_assert!(self.same_shape(other));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        out
    }

    pub fn sub(&self, other: &Image) -> Image {
        debug_assert!(self.same_shape(other));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        out
    }

    pub fn add_scaled(&mut self, other: &Image, s: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Circular shift by (dr, dc): output(r, c) = input(r - dr, c - dc).
    pub fn shifted(&self, dr: isize, dc: isize) -> Image {
        let h = self.height as isize;
        let w = self.width as isize;
        Image::from_fn(self.height, self.width, |r, c| {
            let sr = (r as isize - dr).rem_euclid(h) as usize;
            let sc = (c as isize - dc).rem_euclid(w) as usize;
            self.get(sr, sc)
        })
    }

    /// Relative change `|new - old| / (|old| + 1e-12)` used as the solver
    /// stopping measure.
    pub fn rel_diff(new: &Image, old: &Image) -> f64 {
        debug_assert!(new.same_shape(old));
        let mut num = 0.0;
        for (a, b) in new.data.iter().zip(&old.data) {
            let d = a - b;
            num += d * d;
        }
        num.sqrt() / (old.norm() + 1e-12)
    }
}
