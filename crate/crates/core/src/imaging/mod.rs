//! Image buffers, file formats, sRGB transfer, EV simulation, dataset
//! indexing and paired augmentation.

mod dataset;
mod io;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use dataset::{
    ev_tag, index_dataset, list_images, parse_ev_tag, DatasetIndex, DatasetRecord, Split, EV_TAGS,
};
pub use io::{load_image, save_image, save_png, save_raw, RAW_MAGIC, RAW_VERSION};

/// Tag written alongside EV-simulated output.
pub const EV_SIM_VERSION: &str = "ev-sim v1";

/// Interleaved (row-major, channel-last) image with values in `[0, 1]`.
/// Three-channel buffers hold sRGB-encoded values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    /// Validates the geometry and clamps values into `[0, 1]`. Non-finite
    /// values are rejected.
    pub fn new(width: usize, height: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || !matches!(channels, 1 | 3) {
            return Err(Error::InvalidArgument(format!(
                "image must be non-empty with 1 or 3 channels, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("image value {i}"),
                value: data[i] as f64,
            });
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, value: &[f32]) {
        let i = (y * self.width + x) * self.channels;
        for (d, &v) in self.data[i..i + self.channels].iter_mut().zip(value) {
            *d = v.clamp(0.0, 1.0);
        }
    }

    /// Values of one channel as a row-major plane.
    pub fn plane(&self, channel: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Rec.601 luma for RGB; gray images are returned as-is.
    pub fn luma(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || x + width > self.width || y + height > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {width}x{height} at ({x}, {y}) exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for row in y..y + height {
            let start = (row * self.width + x) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Self {
            width,
            height,
            channels: c,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width * c) {
            for px in row.chunks_exact(c).rev() {
                data.extend_from_slice(px);
            }
        }
        Self {
            data,
            ..self.clone()
        }
    }

    pub fn flip_vertical(&self) -> Self {
        let data = self
            .data
            .chunks_exact(self.width * self.channels)
            .rev()
            .flatten()
            .copied()
            .collect();
        Self {
            data,
            ..self.clone()
        }
    }

    /// Reflect-pads the bottom and right edges up to the next multiple of
    /// `multiple`. The original occupies the top-left corner.
    pub fn pad_to_multiple(&self, multiple: usize) -> Self {
        let up = |e: usize| e.div_ceil(multiple) * multiple;
        let (w, h) = (up(self.width), up(self.height));
        if (w, h) == (self.width, self.height) {
            return self.clone();
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in 0..h {
            let sy = reflect_index(y, self.height);
            for x in 0..w {
                let sx = reflect_index(x, self.width);
                data.extend_from_slice(self.pixel(sx, sy));
            }
        }
        Self {
            width: w,
            height: h,
            channels: c,
            data,
        }
    }

    /// Grayscale replicated into three channels; RGB is returned as is.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        Self {
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            ..*self
        }
    }
}

/// Mirror index without repeating the edge sample, folding as often as
/// needed; a single-sample axis repeats.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Stacks RGB images of equal size into an `N x 3 x H x W` tensor.
pub fn images_to_tensor<T: Real>(images: &[&ImageBuffer]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images to stack".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.channels != 3 || img.width != w || img.height != h {
            return Err(Error::InvalidArgument(format!(
                "cannot stack {}x{}x{} image with {w}x{h}x3",
                img.width, img.height, img.channels
            )));
        }
        for c in 0..3 {
            data.extend(img.plane(c).into_iter().map(|v| T::lit(v as f64)));
        }
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

/// Item `n` of an `N x C x H x W` tensor as an image, clamped into `[0, 1]`.
pub fn tensor_to_image<T: Real>(t: &Tensor<T>, n: usize) -> Result<ImageBuffer> {
    let (batch, c, h, w) = t.dims4()?;
    if n >= batch || !matches!(c, 1 | 3) {
        return Err(Error::InvalidArgument(format!(
            "cannot take image {n} from tensor {:?}",
            t.shape()
        )));
    }
    let mut data = vec![0.0f32; h * w * c];
    for ch in 0..c {
        for (i, &v) in t.plane(n, ch).iter().enumerate() {
            data[i * c + ch] = v.as_f64() as f32;
        }
    }
    ImageBuffer::new(w, h, c, data)
}

pub fn srgb_decode(v: f32) -> f32 {
    let v = v as f64;
    let lin = if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    };
    lin as f32
}

pub fn srgb_encode(v: f32) -> f32 {
    let v = v as f64;
    let enc = if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    };
    enc as f32
}

pub fn srgb_decode_image(img: &ImageBuffer) -> ImageBuffer {
    img.map(srgb_decode)
}

pub fn srgb_encode_image(img: &ImageBuffer) -> ImageBuffer {
    img.map(srgb_encode)
}

/// Simulated exposure change: the linear-light signal is scaled by `2^ev`
/// and hard-clipped, channel by channel. `ev == 0` returns the input
/// unchanged.
pub fn ev_shift(img: &ImageBuffer, ev: f64) -> Result<ImageBuffer> {
    if !ev.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "EV must be finite, got {ev}"
        )));
    }
    if ev == 0.0 {
        return Ok(img.clone());
    }
    let gain = 2f64.powf(ev) as f32;
    Ok(img.map(|v| srgb_encode((srgb_decode(v) * gain).clamp(0.0, 1.0))))
}

/// The same random `size x size` window from both images.
pub fn random_crop_pair<R: Rng + ?Sized>(
    input: &ImageBuffer,
    target: &ImageBuffer,
    size: usize,
    rng: &mut R,
) -> Result<(ImageBuffer, ImageBuffer)> {
    if (input.width, input.height) != (target.width, target.height) {
        return Err(Error::InvalidArgument(format!(
            "input {}x{} and target {}x{} differ in size",
            input.width, input.height, target.width, target.height
        )));
    }
    if size == 0 || input.width < size || input.height < size {
        return Err(Error::InvalidArgument(format!(
            "cannot take a {size}x{size} crop from a {}x{} image",
            input.width, input.height
        )));
    }
    let x = rng.gen_range(0..=input.width - size);
    let y = rng.gen_range(0..=input.height - size);
    Ok((
        input.crop(x, y, size, size)?,
        target.crop(x, y, size, size)?,
    ))
}

/// Applies the same random horizontal flip to both images.
pub fn random_flip_pair<R: Rng + ?Sized>(
    input: ImageBuffer,
    target: ImageBuffer,
    rng: &mut R,
) -> (ImageBuffer, ImageBuffer) {
    if rng.gen_bool(0.5) {
        (input.flip_horizontal(), target.flip_horizontal())
    } else {
        (input, target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> ImageBuffer {
        let data = (0..w * h * 3)
            .map(|i| i as f32 / (w * h * 3) as f32)
            .collect();
        ImageBuffer::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn construction_clamps_and_validates() {
        let img = ImageBuffer::new(1, 1, 3, vec![-0.5, 0.5, 2.0]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
        assert!(ImageBuffer::new(1, 1, 2, vec![0.0; 2]).is_err());
        assert!(ImageBuffer::new(2, 1, 3, vec![0.0; 3]).is_err());
        assert!(ImageBuffer::new(1, 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn transfer_endpoints_and_midpoint() {
        for f in [srgb_decode, srgb_encode] {
            assert_eq!(f(0.0), 0.0);
            assert!((f(1.0) - 1.0).abs() < 1e-7);
        }
        assert!((srgb_decode(0.5) - 0.21404).abs() < 1e-5);
    }

    #[test]
    fn ev_zero_is_identity_and_clips_bright() {
        let img = ramp(4, 4);
        assert_eq!(ev_shift(&img, 0.0).unwrap(), img);
        let bright = ev_shift(&img, 3.0).unwrap();
        assert_eq!(bright.data().iter().cloned().fold(0.0, f32::max), 1.0);
        assert!(bright.data().windows(2).all(|p| p[0] <= p[1]));
        let gray = ImageBuffer::new(1, 1, 1, vec![0.5]).unwrap();
        let rgb = gray.to_rgb();
        assert_eq!(
            ev_shift(&gray, 1.0).unwrap().to_rgb(),
            ev_shift(&rgb, 1.0).unwrap()
        );
    }

    #[test]
    fn crops_are_aligned_and_seeded() {
        let mut input = ImageBuffer::filled(20, 12, 3, 0.2).unwrap();
        let mut target = ImageBuffer::filled(20, 12, 3, 0.7).unwrap();
        input.set_pixel(9, 5, &[1.0, 0.0, 0.0]);
        target.set_pixel(9, 5, &[0.0, 1.0, 0.0]);
        for seed in 0..20 {
            let (a, b) =
                random_crop_pair(&input, &target, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let (a2, b2) =
                random_crop_pair(&input, &target, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!((&a, &b), (&a2, &b2));
            let hit_a: Vec<usize> = (0..64)
                .filter(|&i| a.pixel(i % 8, i / 8)[0] == 1.0)
                .collect();
            let hit_b: Vec<usize> = (0..64)
                .filter(|&i| b.pixel(i % 8, i / 8)[1] == 1.0)
                .collect();
            assert_eq!(hit_a, hit_b);
        }
        let (a, _) =
            random_crop_pair(&input, &target, 12, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a.height(), 12);
        assert!(random_crop_pair(&input, &target, 13, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp(5, 3);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
        assert_eq!(img.flip_horizontal().pixel(0, 0), img.pixel(4, 0));
    }

    #[test]
    fn padding_reflects_and_crops_back() {
        let img = ramp(5, 3);
        let padded = img.pad_to_multiple(4);
        assert_eq!((padded.width(), padded.height()), (8, 4));
        assert_eq!(padded.pixel(5, 0), img.pixel(3, 0));
        assert_eq!(padded.pixel(0, 3), img.pixel(0, 1));
        assert_eq!(padded.crop(0, 0, 5, 3).unwrap(), img);
    }

    #[test]
    fn tensor_round_trip() {
        let img = ramp(4, 2);
        let t: Tensor<f32> = images_to_tensor(&[&img, &img]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 4]);
        assert_eq!(tensor_to_image(&t, 1).unwrap(), img);
    }
}
