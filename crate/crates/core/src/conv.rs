//! Circular 2-D convolutions with centered odd-sided kernel stacks.
//!
//! The forward map correlates the image with each kernel, which is exactly
//! the per-pixel inner product between a centered circular patch and the
//! kernel taps. Its transpose scatters code values back onto the image. The
//! two are exact adjoints of each other by construction.

use serde::{Deserialize, Serialize};

use crate::code::CodeField;
use crate::error::{CoreError, Result};
use crate::image::Image;

/// Stack of square filters with a common odd side length.
///
/// Taps are stored row-major per filter; tap `t = (dr + h) * side + (dc + h)`
/// with `h = (side - 1) / 2` multiplies the pixel at circular offset
/// `(dr, dc)` from the output pixel. This matches the flattening order used
/// by patch extraction, so a dictionary atom reinterpreted as a kernel
/// computes `atom^T * patch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelStack {
    pub count: usize,
    pub side: usize,
    pub data: Vec<f64>,
}

impl KernelStack {
    pub fn new(count: usize, side: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 || side % 2 == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "kernel side must be odd and positive, got {side}"
            )));
        }
        if data.len() != count * side * side {
            return Err(CoreError::DimensionMismatch(format!(
                "kernel data length {} != {}x{}^2",
                data.len(),
                count,
                side
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("kernel data".into()));
        }
        Ok(KernelStack { count, side, data })
    }

    pub fn taps(&self, k: usize) -> &[f64] {
        let d = self.side * self.side;
        &self.data[k * d..(k + 1) * d]
    }

    /// Half-width of the kernel.
    #[inline]
    pub fn radius(&self) -> usize {
        (self.side - 1) / 2
    }
}

/// Wrapped index tables: `maps[o][i]` is `(i + o - radius) mod n` for offsets
/// `o in 0..side`. Precomputed so the inner convolution loops stay integer-
/// arithmetic free.
fn wrap_maps(n: usize, side: usize) -> Vec<Vec<usize>> {
    let radius = (side as isize - 1) / 2;
    (0..side as isize)
        .map(|o| {
            (0..n as isize)
                .map(|i| (i + o - radius).rem_euclid(n as isize) as usize)
                .collect()
        })
        .collect()
}

fn check_conv_dims(x: &Image, k: &KernelStack) -> Result<()> {
    if k.side > x.height.min(x.width) {
        return Err(CoreError::DimensionMismatch(format!(
            "kernel side {} exceeds image {}x{}",
            k.side, x.height, x.width
        )));
    }
    Ok(())
}

/// Circular correlation of `x` with every kernel in the stack.
///
/// Output channel `c` at pixel `p` is the sum over taps of the kernel times
/// the circularly indexed image, i.e. the inner product of kernel `c` with
/// the circular patch centered at `p`.
pub fn conv2d_circular(x: &Image, k: &KernelStack) -> Result<CodeField> {
    check_conv_dims(x, k)?;
    let (h, w, side) = (x.height, x.width, k.side);
    let row_map = wrap_maps(h, side);
    let col_map = wrap_maps(w, side);
    let mut out = CodeField::zeros(k.count, h, w);
    for ch in 0..k.count {
        let taps = k.taps(ch);
        let plane = out.channel_mut(ch);
        for r in 0..h {
            for (or, rm) in row_map.iter().enumerate() {
                let src_row = rm[r] * w;
                let tap_row = &taps[or * side..(or + 1) * side];
                let dst = &mut plane[r * w..(r + 1) * w];
                for (oc, &tap) in tap_row.iter().enumerate() {
                    if tap == 0.0 {
                        continue;
                    }
                    let cm = &col_map[oc];
                    for c in 0..w {
                        dst[c] += tap * x.data[src_row + cm[c]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of [`conv2d_circular`]: scatters each code value through the
/// kernel taps back onto the image grid and sums over channels.
pub fn conv2d_transpose_circular(a: &CodeField, k: &KernelStack) -> Result<Image> {
    if a.channels != k.count {
        return Err(CoreError::DimensionMismatch(format!(
            "code has {} channels but kernel stack has {}",
            a.channels, k.count
        )));
    }
    let (h, w, side) = (a.height, a.width, k.side);
    if k.side > h.min(w) {
        return Err(CoreError::DimensionMismatch(format!(
            "kernel side {} exceeds grid {}x{}",
            k.side, h, w
        )));
    }
    let row_map = wrap_maps(h, side);
    let col_map = wrap_maps(w, side);
    let mut out = Image::zeros(h, w);
    for ch in 0..k.count {
        let taps = k.taps(ch);
        let plane = a.channel(ch);
        for r in 0..h {
            let src = &plane[r * w..(r + 1) * w];
            for (or, rm) in row_map.iter().enumerate() {
                let dst_row = rm[r] * w;
                let tap_row = &taps[or * side..(or + 1) * side];
                for (oc, &tap) in tap_row.iter().enumerate() {
                    if tap == 0.0 {
                        continue;
                    }
                    let cm = &col_map[oc];
                    for c in 0..w {
                        out.data[dst_row + cm[c]] += tap * src[c];
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
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::from_fn(h, w, |_, _| rng.random::<f64>() - 0.5)
    }

    fn random_kernels(count: usize, side: usize, rng: &mut ChaCha8Rng) -> KernelStack {
        let data = (0..count * side * side).map(|_| rng.random::<f64>() - 0.5).collect();
        KernelStack::new(count, side, data).unwrap()
    }

    /// Direct O(n*d) double loop with explicit circular index arithmetic,
    /// independent of the table-based implementation.
    fn conv_reference(x: &Image, k: &KernelStack) -> CodeField {
        let rad = k.radius() as isize;
        let (h, w) = (x.height as isize, x.width as isize);
        let mut out = CodeField::zeros(k.count, x.height, x.width);
        for ch in 0..k.count {
            let taps = k.taps(ch);
            for r in 0..h {
                for c in 0..w {
                    let mut s = 0.0;
                    for dr in -rad..=rad {
                        for dc in -rad..=rad {
                            let t = ((dr + rad) * k.side as isize + (dc + rad)) as usize;
                            let rr = (r + dr).rem_euclid(h) as usize;
                            let cc = (c + dc).rem_euclid(w) as usize;
                            s += taps[t] * x.get(rr, cc);
                        }
                    }
                    out.set(ch, r as usize, c as usize, s);
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_kernel_on_constant_image() {
        let x = Image::constant(8, 8, 1.0);
        let k = KernelStack::new(1, 3, vec![1.0; 9]).unwrap();
        let out = conv2d_circular(&x, &k).unwrap();
        for v in &out.data {
            assert_eq!(*v, 9.0);
        }
    }

    #[test]
    fn center_delta_kernel_is_identity() {
        let mut x = Image::zeros(8, 8);
        x.set(0, 0, 1.0);
        let mut taps = vec![0.0; 9];
        taps[4] = 1.0; // center tap
        let k = KernelStack::new(1, 3, taps).unwrap();
        let out = conv2d_circular(&x, &k).unwrap();
        assert_eq!(out.channel_image(0), x);
        // Transpose with the same kernel is also the identity.
        let mut a = CodeField::zeros(1, 8, 8);
        a.set(0, 0, 0, 1.0);
        let img = conv2d_transpose_circular(&a, &k).unwrap();
        assert_eq!(img, x);
    }

    #[test]
    fn matches_bruteforce_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_image(8, 8, &mut rng);
        let k = random_kernels(3, 3, &mut rng);
        let fast = conv2d_circular(&x, &k).unwrap();
        let slow = conv_reference(&x, &k);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn transpose_of_zero_code_is_zero() {
        let a = CodeField::zeros(2, 6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_kernels(2, 3, &mut rng);
        let img = conv2d_transpose_circular(&a, &k).unwrap();
        assert!(img.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adjoint_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for side in [3usize, 5] {
            let x = random_image(8, 8, &mut rng);
            let k = random_kernels(4, side, &mut rng);
            let ax = conv2d_circular(&x, &k).unwrap();
            let y = {
                let data = (0..4 * 64).map(|_| rng.random::<f64>() - 0.5).collect();
                CodeField::new(4, 8, 8, data).unwrap()
            };
            let aty = conv2d_transpose_circular(&y, &k).unwrap();
            let lhs = ax.dot(&y);
            let rhs = x.dot(&aty);
            let scale = x.norm() * y.norm();
            assert!(
                (lhs - rhs).abs() <= 1e-12 * scale.max(1.0),
                "adjoint mismatch {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn rejects_even_or_oversized_kernels() {
        assert!(KernelStack::new(1, 4, vec![0.0; 16]).is_err());
        let x = Image::zeros(3, 3);
        let k = KernelStack::new(1, 5, vec![0.0; 25]).unwrap();
        assert!(conv2d_circular(&x, &k).is_err());
        let a = CodeField::zeros(2, 8, 8);
        let k1 = KernelStack::new(1, 3, vec![0.0; 9]).unwrap();
        assert!(conv2d_transpose_circular(&a, &k1).is_err());
    }
}
