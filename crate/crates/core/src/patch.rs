//! Patch-operator algebra under circular boundary conditions.
//!
//! A patch operator extracts the `side x side` neighborhood centered at each
//! pixel, flattened row-major; with circular padding there are exactly as
//! many patches as pixels. All composite operators built from patch
//! extraction are evaluated as convolutions, never by materializing patches,
//! except in [`extract_patches`] itself which exists for oracles and
//! diagnostics.

use crate::code::CodeField;
use crate::conv::{conv2d_circular, conv2d_transpose_circular, KernelStack};
use crate::dict::Dictionary;
use crate::error::{CoreError, Result};
use crate::fft::{to_complex, Dft2};
use crate::image::Image;
use crate::linalg::Mat;

fn check_side(side: usize, h: usize, w: usize) -> Result<()> {
    if side == 0 || side % 2 == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "patch side must be odd, got {side}"
        )));
    }
    if side > h.min(w) {
        return Err(CoreError::DimensionMismatch(format!(
            "patch side {side} exceeds image {h}x{w}"
        )));
    }
    Ok(())
}

/// Materialize all circular patches as the columns of a `d x n` matrix,
/// pixel `k = r * width + c` in raster order.
pub fn extract_patches(x: &Image, side: usize) -> Result<Mat> {
    check_side(side, x.height, x.width)?;
    let d = side * side;
    let n = x.len();
    let rad = (side as isize - 1) / 2;
    let (h, w) = (x.height as isize, x.width as isize);
    let mut out = Mat::zeros(d, n);
    for r in 0..h {
        for c in 0..w {
            let k = (r * w + c) as usize;
            let mut t = 0usize;
            for dr in -rad..=rad {
                for dc in -rad..=rad {
                    let rr = (r + dr).rem_euclid(h) as usize;
                    let cc = (c + dc).rem_euclid(w) as usize;
                    out[(t, k)] = x.get(rr, cc);
                    t += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Reinterpret dictionary atoms as a kernel stack so that circular
/// convolution computes per-pixel atom/patch inner products.
pub fn kernels_from_dictionary(dict: &Dictionary) -> Result<KernelStack> {
    let side = dict.side();
    let mut data = Vec::with_capacity(dict.patch_dim() * dict.atom_count());
    for j in 0..dict.atom_count() {
        for i in 0..dict.patch_dim() {
            data.push(dict.mat[(i, j)]);
        }
    }
    KernelStack::new(dict.atom_count(), side, data)
}

/// Per-pixel analysis coefficients: channel `p` at pixel `k` is the inner
/// product of atom `p` with the circular patch at `k`.
pub fn analyze(x: &Image, dict: &Dictionary) -> Result<CodeField> {
    let k = kernels_from_dictionary(dict)?;
    conv2d_circular(x, &k)
}

/// Adjoint of [`analyze`]: sum over pixels of patch-placement of `atom * code`.
pub fn synthesize(code: &CodeField, dict: &Dictionary) -> Result<Image> {
    let k = kernels_from_dictionary(dict)?;
    conv2d_transpose_circular(code, &k)
}

/// Apply the projected patch Gram operator
/// `sum_k P_k^T (I - QQ^T) P_k = d*I - W_Q^T W_Q`
/// where `W_Q` is analysis by the orthonormal free dictionary.
pub fn projected_gram_apply(x: &Image, free: &Dictionary, side: usize) -> Result<Image> {
    check_side(side, x.height, x.width)?;
    let d = (side * side) as f64;
    let mut out = x.scaled(d);
    if free.atom_count() > 0 {
        let coeffs = analyze(x, free)?;
        let back = synthesize(&coeffs, free)?;
        out.add_scaled(&back, -1.0);
    }
    Ok(out)
}

/// Eigenvalues (Fourier symbol) of the shift-invariant projected patch Gram
/// operator, as an `h x w` grid. Computed by applying the operator to a
/// delta image and taking the 2-D DFT of the impulse response; the grid
/// maximum is the operator's spectral norm.
pub fn patch_gram_symbol(free: &Dictionary, side: usize, h: usize, w: usize) -> Result<Image> {
    check_side(side, h, w)?;
    let mut delta = Image::zeros(h, w);
    delta.set(0, 0, 1.0);
    let impulse = projected_gram_apply(&delta, free, side)?;
    let dft = Dft2::new(h, w);
    let mut buf = to_complex(&impulse);
    dft.forward(&mut buf);
    // The operator is symmetric and shift-invariant, so the symbol is real;
    // the imaginary residue is floating-point noise.
    let mut data = Vec::with_capacity(h * w);
    for v in &buf {
        debug_assert!(v.im.abs() < 1e-9 * (1.0 + v.re.abs()));
        data.push(v.re);
    }
    Ok(Image { height: h, width: w, data })
}

/// Largest eigenvalue of the projected patch Gram operator on an `h x w` grid.
pub fn patch_gram_norm(free: &Dictionary, side: usize, h: usize, w: usize) -> Result<f64> {
    let symbol = patch_gram_symbol(free, side, h, w)?;
    Ok(symbol.data.iter().cloned().fold(0.0, f64::max))
}

/// Accumulate `sum_k (P_k image) * code_k^T`, a `d x channels` matrix.
///
/// This is the derivative of the analysis/synthesis convolutions with
/// respect to the filter taps, and the workhorse of reverse-mode solver
/// differentiation. Row `t` (patch offset) of the result is the correlation
/// of the image, shifted by that offset, with each code channel.
pub fn patch_code_outer(image: &Image, code: &CodeField, side: usize) -> Result<Mat> {
    check_side(side, image.height, image.width)?;
    if !code.spatial_match(image) {
        return Err(CoreError::DimensionMismatch(
            "code and image grids differ".into(),
        ));
    }
    let d = side * side;
    let rad = (side as isize - 1) / 2;
    let (h, w) = (image.height as isize, image.width as isize);
    let mut out = Mat::zeros(d, code.channels);
    for ch in 0..code.channels {
        let plane = code.channel(ch);
        let mut t = 0usize;
        for dr in -rad..=rad {
            for dc in -rad..=rad {
                let mut s = 0.0;
                for r in 0..h {
                    let rr = (r + dr).rem_euclid(h) as usize;
                    for c in 0..w {
                        let cc = (c + dc).rem_euclid(w) as usize;
                        s += image.get(rr, cc) * plane[(r * w + c) as usize];
                    }
                }
                out[(t, ch)] = s;
                t += 1;
            }
        }
    }
    Ok(out)
}

/// Accumulate `sum_pixels a_k * b_k^T` over per-pixel coefficient vectors,
/// a `channels_a x channels_b` matrix.
pub fn code_code_outer(a: &CodeField, b: &CodeField) -> Result<Mat> {
    if a.height != b.height || a.width != b.width {
        return Err(CoreError::DimensionMismatch(
            "code fields have different grids".into(),
        ));
    }
    let plane = a.plane();
    let mut out = Mat::zeros(a.channels, b.channels);
    for i in 0..a.channels {
        let ai = &a.data[i * plane..(i + 1) * plane];
        for j in 0..b.channels {
            let bj = &b.data[j * plane..(j + 1) * plane];
            let mut s = 0.0;
            for k in 0..plane {
                s += ai[k] * bj[k];
            }
            out[(i, j)] = s;
        }
    }
    Ok(out)
}

/// Apply the per-pixel `channels x channels` matrix to every pixel vector of
/// a code field (a 1x1 convolution).
pub fn pixelwise_matmul(m: &Mat, code: &CodeField) -> Result<CodeField> {
    if m.cols != code.channels {
        return Err(CoreError::DimensionMismatch(format!(
            "matrix {}x{} against {} channels",
            m.rows, m.cols, code.channels
        )));
    }
    let plane = code.plane();
    let mut out = CodeField::zeros(m.rows, code.height, code.width);
    for i in 0..m.rows {
        let dst = out.channel_mut(i);
        for j in 0..code.channels {
            let w = m[(i, j)];
            if w == 0.0 {
                continue;
            }
            let src = &code.data[j * plane..(j + 1) * plane];
            for k in 0..plane {
                dst[k] += w * src[k];
            }
        }
    }
    Ok(out)
}
