//! 8-bit PNG and the lossless `IMGF` raw format.
//!
//! `IMGF` layout, little-endian: magic, u32 version, u32 width, height and
//! channels, then one f32 plane per channel in row-major order.

use std::fs;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use super::ImageBuffer;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"IMGF";
pub const RAW_VERSION: u32 = 1;
const PNG_SIGNATURE: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

/// Reads a PNG (8-bit gray or RGB) or `IMGF` file, chosen by content.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(RAW_MAGIC) {
        decode_raw(path, &bytes)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(path, &bytes)
    } else {
        Err(Error::UnsupportedImage {
            path: path.into(),
            detail: "neither a PNG nor an IMGF file".into(),
        })
    }
}

/// Writes by extension: `.png` quantizes to 8 bits, `.imgf` is lossless.
pub fn save_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => save_png(img, path),
        Some("imgf") => save_raw(img, path),
        _ => Err(Error::InvalidArgument(format!(
            "{}: output extension must be .png or .imgf",
            path.display()
        ))),
    }
}

pub fn save_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    // round half up
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v * 255.0 + 0.5).floor() as u8)
        .collect();
    let color = if img.channels() == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&bytes, img.width() as u32, img.height() as u32, color)
        .map_err(|e| Error::Image {
            path: path.into(),
            detail: e.to_string(),
        })?;
    write_atomic(path, &out)
}

pub fn save_raw(img: &ImageBuffer, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(20 + 4 * img.data().len());
    out.extend_from_slice(RAW_MAGIC);
    for v in [
        RAW_VERSION,
        img.width() as u32,
        img.height() as u32,
        img.channels() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in 0..img.channels() {
        for v in img.plane(c) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<ImageBuffer> {
    let decoded =
        image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image {
            path: path.into(),
            detail: e.to_string(),
        })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw) = match decoded {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        other => {
            return Err(Error::UnsupportedImage {
                path: path.into(),
                detail: format!(
                    "color type {:?}; only 8-bit gray or RGB PNGs are read",
                    other.color()
                ),
            })
        }
    };
    ImageBuffer::new(
        w,
        h,
        channels,
        raw.into_iter().map(|v| v as f32 / 255.0).collect(),
    )
}

fn decode_raw(path: &Path, bytes: &[u8]) -> Result<ImageBuffer> {
    let bad = |detail: String| Error::Image {
        path: path.into(),
        detail,
    };
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 + 4 * i..8 + 4 * i)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("IMGF header truncated".into()))
    };
    let version = word(0)?;
    if version != RAW_VERSION {
        return Err(Error::UnsupportedImage {
            path: path.into(),
            detail: format!("IMGF version {version}, expected {RAW_VERSION}"),
        });
    }
    let (w, h, c) = (word(1)? as usize, word(2)? as usize, word(3)? as usize);
    let n = w * h * c;
    let body = &bytes[20..];
    if body.len() != 4 * n {
        return Err(bad(format!(
            "{w}x{h}x{c} body needs {} bytes, found {}",
            4 * n,
            body.len()
        )));
    }
    let planar: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut data = vec![0.0; n];
    for ch in 0..c {
        for (i, &v) in planar[ch * w * h..(ch + 1) * w * h].iter().enumerate() {
            data[i * c + ch] = v;
        }
    }
    ImageBuffer::new(w, h, c, data).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.imgf");
        let data: Vec<f32> = (0..2 * 3 * 3)
            .map(|i| (i as f32 * 0.0731).fract())
            .collect();
        let img = ImageBuffer::new(2, 3, 3, data).unwrap();
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"IMGF");
        assert_eq!(bytes.len(), 20 + 4 * 18);
    }

    #[test]
    fn png_quantization_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ImageBuffer::new(3, 1, 1, vec![128.0 / 255.0, 0.3, 0.5]).unwrap();
        save_image(&img, &path).unwrap();
        let once = load_image(&path).unwrap();
        assert_eq!(once.data()[0], 128.0 / 255.0);
        // 0.5 * 255 = 127.5 rounds up
        assert_eq!(once.data()[2], 128.0 / 255.0);
        save_image(&once, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), once);
    }

    #[test]
    fn distinct_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let missing = load_image(&dir.path().join("none.png")).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
        let junk = dir.path().join("junk.png");
        fs::write(&junk, b"hello").unwrap();
        assert!(matches!(
            load_image(&junk).unwrap_err(),
            Error::UnsupportedImage { .. }
        ));
        let deep = dir.path().join("deep.png");
        image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(1, 1, vec![1u16, 2, 3])
            .unwrap()
            .save(&deep)
            .unwrap();
        let err = load_image(&deep).unwrap_err();
        assert!(matches!(err, Error::UnsupportedImage { .. }), "{err}");
        let img = ImageBuffer::filled(1, 1, 1, 0.0).unwrap();
        assert!(save_image(&img, &dir.path().join("x.jpg")).is_err());
    }
}
