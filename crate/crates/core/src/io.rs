//! Atomic file output and PNG conversion.

use std::io::Write as _;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Writes `bytes` to a temporary file next to `path`, then renames it, so
/// that `path` never holds partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Reads an 8- or 16-bit PNG into `[0, 1]`. Gray images give one channel,
/// everything else is converted to RGB.
pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(img.color().channel_count(), 1 | 2);
    if gray {
        let buf = img.into_luma16();
        let data = buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
        ImageTensor::new(1, h, w, data)
    } else {
        let buf = img.into_rgb16();
        let mut out = ImageTensor::zeros(3, h, w);
        for (x, y, p) in buf.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p.0[c] as f64 / 65535.0);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Encodes a 1- or 3-channel image, clamped to `[0, 1]`, as PNG bytes.
pub fn encode_png(img: &ImageTensor, depth: BitDepth) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims();
    let (w32, h32) = (w as u32, h as u32);
    let px = |x: u32, y: u32, ch: usize| img.get(ch, y as usize, x as usize);
    let dynamic = match (c, depth) {
        (1, BitDepth::Eight) => DynamicImage::ImageLuma8(ImageBuffer::from_fn(w32, h32, |x, y| Luma([quantize(px(x, y, 0), 255.0) as u8]))),
        (1, BitDepth::Sixteen) => DynamicImage::ImageLuma16(ImageBuffer::from_fn(w32, h32, |x, y| Luma([quantize(px(x, y, 0), 65535.0) as u16]))),
        (3, BitDepth::Eight) => DynamicImage::ImageRgb8(ImageBuffer::from_fn(w32, h32, |x, y| {
            Rgb(std::array::from_fn(|ch| quantize(px(x, y, ch), 255.0) as u8))
        })),
        (3, BitDepth::Sixteen) => DynamicImage::ImageRgb16(ImageBuffer::from_fn(w32, h32, |x, y| {
            Rgb(std::array::from_fn(|ch| quantize(px(x, y, ch), 65535.0) as u16))
        })),
        _ => return Err(Error::shape(format!("PNG output needs 1 or 3 channels, got {c}"))),
    };
    let mut bytes = Vec::new();
    dynamic
        .write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::Image { path: "<memory>".into(), source: e })?;
    Ok(bytes)
}

pub fn write_png(path: &Path, img: &ImageTensor, depth: BitDepth) -> Result<()> {
    write_atomic(path, &encode_png(img, depth)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize) -> ImageTensor {
        ImageTensor::from_fn(c, 5, 7, |ch, y, x| ((ch * 35 + y * 7 + x) as f64 / 104.0).min(1.0))
    }

    #[test]
    fn sixteen_bit_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let path = dir.path().join(format!("r{c}.png"));
            let img = ramp(c);
            write_png(&path, &img, BitDepth::Sixteen).unwrap();
            let back = read_png(&path).unwrap();
            assert_eq!(back.dims(), img.dims());
            assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn eight_bit_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        let img = ramp(3);
        write_png(&path, &img, BitDepth::Eight).unwrap();
        let back = read_png(&path).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-12);
        let again = encode_png(&back, BitDepth::Eight).unwrap();
        assert_eq!(again, std::fs::read(&path).unwrap());
    }

    #[test]
    fn out_of_range_values_are_clamped() {
        let img = ImageTensor::new(1, 1, 2, vec![-0.5, 1.5]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        write_png(&path, &img, BitDepth::Eight).unwrap();
        assert_eq!(read_png(&path).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn bad_channel_count_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        assert!(write_png(&path, &ImageTensor::zeros(2, 4, 4), BitDepth::Eight).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_png(Path::new("/nonexistent/a.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/a.png"));
    }
}
