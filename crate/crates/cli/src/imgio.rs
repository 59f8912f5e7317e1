//! Image file I/O: 8/16-bit grayscale PNG and PGM readers (color inputs are
//! converted by luminance), an 8-bit PNG writer, and a lossless raw-float
//! container for exact round trips.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use sps_core::image::Image;

const RAW_MAGIC: &[u8; 8] = b"SPSRAW01";

/// Load a grayscale image as values in `[0, 1]`.
///
/// `.sraw` files go through the lossless float container; everything else is
/// decoded by the image library and converted to 16-bit luminance (8-bit
/// values map exactly onto their `v/255` grid).
pub fn load_image(path: &Path) -> Result<Image> {
    if path.extension().map(|e| e == "sraw").unwrap_or(false) {
        return load_raw(path);
    }
    let img = image::open(path)
        .with_context(|| format!("cannot decode {} (supported: PNG, PGM/PNM, sraw)", path.display()))?;
    let gray = img.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data: Vec<f64> = gray.into_raw().iter().map(|&v| v as f64 / 65535.0).collect();
    Ok(Image::new(h, w, data)?)
}

/// Save as 8-bit grayscale PNG; values are clamped to `[0, 1]`.
pub fn save_png8(img: &Image, path: &Path) -> Result<()> {
    let data: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, data)
        .expect("buffer size");
    buf.save(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Save through the lossless raw-float container (bit-exact round trip).
pub fn save_raw(img: &Image, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(16 + img.data.len() * 8);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .with_context(|| format!("cannot open {}", path.display()))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
        bail!("{} is not a raw-float image container", path.display());
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + h * w * 8 {
        bail!("{} has inconsistent payload length", path.display());
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Image::new(h, w, data)?)
}

/// Load every decodable image in a directory, sorted by file name.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read directory {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut out = Vec::new();
    for path in entries {
        match load_image(&path) {
            Ok(img) => out.push((
                path.file_name().unwrap().to_string_lossy().into_owned(),
                img,
            )),
            Err(_) => continue, // non-image files are skipped
        }
    }
    if out.is_empty() {
        bail!("no readable images in {}", dir.display());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("sps_imgio_tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn raw_container_roundtrip_is_bit_exact() {
        let img = Image::from_fn(5, 7, |r, c| ((r * 7 + c) as f64).sin() * 1e3);
        let p = tmp("rt.sraw");
        save_raw(&img, &p).unwrap();
        let back = load_raw(&p).unwrap();
        assert_eq!(img.height, back.height);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // load_image dispatches on the extension.
        let via = load_image(&p).unwrap();
        assert_eq!(via, back);
    }

    #[test]
    fn png8_roundtrip_error_is_within_half_step() {
        let img = Image::from_fn(6, 6, |r, c| (r as f64 * 6.0 + c as f64) / 35.0);
        let p = tmp("rt8.png");
        save_png8(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn sixteen_bit_png_white_is_one() {
        let p = tmp("white16.png");
        let buf =
            image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(3, 2, vec![65535u16; 6])
                .unwrap();
        buf.save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert!(img.data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn pgm_is_supported() {
        let p = tmp("gray.pgm");
        std::fs::write(&p, b"P5\n4 2\n255\n\x00\x40\x80\xff\x10\x20\x30\x40").unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.height, img.width), (2, 4));
        assert!((img.get(0, 3) - 1.0).abs() < 1e-12);
        assert!((img.get(0, 1) - 64.0 / 255.0).abs() < 1e-9);
    }

    #[test]
    fn unsupported_format_is_a_clear_error() {
        let p = tmp("noise.xyz");
        std::fs::write(&p, b"not an image").unwrap();
        let err = load_image(&p).unwrap_err().to_string();
        assert!(err.contains("supported"), "{err}");
    }
}
