//! Conversion between `[3, H, W]` tensors in `[−1, 1]` and 8-bit PNG files,
//! plus atomic file writes.

use std::io::Write;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps a palette byte to the model's value range.
pub fn byte_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit`] with clamping and round-to-nearest.
pub fn unit_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn to_rgb(img: &Tensor) -> Result<RgbImage> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("to_rgb", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([
            unit_to_byte(d[i]),
            unit_to_byte(d[h * w + i]),
            unit_to_byte(d[2 * h * w + i]),
        ])
    }))
}

pub fn from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = byte_to_unit(p.0[c]);
        }
    }
    Tensor::from_vec(vec![3, h, w], data).expect("3·h·w values")
}

/// Rounds an image through its 8-bit representation.
pub fn quantize(img: &Tensor) -> Result<Tensor> {
    Ok(from_rgb(&to_rgb(img)?))
}

fn encode(dynamic: image::DynamicImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory");
    buf.into_inner()
}

pub fn png_bytes(img: &Tensor) -> Result<Vec<u8>> {
    Ok(encode(image::DynamicImage::ImageRgb8(to_rgb(img)?)))
}

/// Grayscale PNG of an `[H, W]` map with values in `[0, 1]`.
pub fn gray_png_bytes(map: &Tensor) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::dim("gray_png", format!("expected [H, W], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let d = map.data();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = d[y as usize * w + x as usize].clamp(0.0, 1.0);
        image::Luma([(v * 255.0).round() as u8])
    });
    Ok(encode(image::DynamicImage::ImageLuma8(img)))
}

pub fn decode_png(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::format(origin, e.to_string()))?;
    Ok(from_rgb(&img.to_rgb8()))
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, path)
}

pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    write_atomic(path, &png_bytes(img)?)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
