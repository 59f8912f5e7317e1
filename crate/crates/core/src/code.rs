//! Per-pixel coefficient field: a multi-channel image holding one
//! coefficient vector per pixel, laid out channel-major.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeField {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// data[ch * height * width + r * width + c]
    pub data: Vec<f64>,
}

impl CodeField {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::InvalidArgument(
                "code field dimensions must be at least 1x1".into(),
            ));
        }
        if data.len() != channels * height * width {
            return Err(CoreError::DimensionMismatch(format!(
                "code data length {} != {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("code data".into()));
        }
        Ok(CodeField { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        CodeField { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, ch: usize, r: usize, c: usize) -> usize {
        ch * self.plane() + r * self.width + c
    }

    #[inline]
    pub fn get(&self, ch: usize, r: usize, c: usize) -> f64 {
        self.data[self.idx(ch, r, c)]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, r: usize, c: usize, v: f64) {
        let i = self.idx(ch, r, c);
        self.data[i] = v;
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        &self.data[ch * self.plane()..(ch + 1) * self.plane()]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[ch * p..(ch + 1) * p]
    }

    pub fn channel_image(&self, ch: usize) -> Image {
        Image { height: self.height, width: self.width, data: self.channel(ch).to_vec() }
    }

    /// Coefficient vector at one pixel, across channels.
    pub fn pixel_vector(&self, r: usize, c: usize) -> Vec<f64> {
        let p = self.plane();
        let off = r * self.width + c;
        (0..self.channels).map(|ch| self.data[ch * p + off]).collect()
    }

    pub fn same_shape(&self, other: &CodeField) -> bool {
        self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
    }

    pub fn spatial_match(&self, img: &Image) -> bool {
        self.height == img.height && self.width == img.width
    }

    pub fn dot(&self, other: &CodeField) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> CodeField {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    pub fn add(&self, other: &CodeField) -> CodeField {
        debug_assert!(self.same_shape(other));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        out
    }

    pub fn sub(&self, other: &CodeField) -> CodeField {
        debug_assert!(self.same_shape(other));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        out
    }

    pub fn add_scaled(&mut self, other: &CodeField, s: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn rel_diff(new: &CodeField, old: &CodeField) -> f64 {
        debug_assert!(new.same_shape(old));
        let mut num = 0.0;
        for (a, b) in new.data.iter().zip(&old.data) {
            let d = a - b;
            num += d * d;
        }
        num.sqrt() / (old.norm() + 1e-12)
    }
}
