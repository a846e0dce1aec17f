//! Input preparation: normalisation, patch sampling or resizing, 1:1 class
//! rebalancing, and a procedural stand-in dataset.

mod sampler;
mod synth;

use std::path::Path;

use image::{DynamicImage, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::LabeledSample;
use crate::image_tensor::ImageTensor;
use crate::{Error, Result};

pub use sampler::{make_balanced_sampler, BalancedSampler};
pub use synth::{synth_dataset, ArtifactKind, SynthConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    #[default]
    Patched,
    Resized,
}

impl InputMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "patched" => Ok(Self::Patched),
            "resized" => Ok(Self::Resized),
            other => Err(Error::Config(format!(
                "input mode {other:?} is not one of patched, resized"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input_mode: InputMode,
    pub patch_size: usize,
    /// Draw training batches with exactly half live and half spoof samples.
    pub live_spoof_ratio: bool,
    pub seed: u64,
    /// Test-time views per image in patched mode: 1 is a center crop,
    /// more are random patches whose scores are averaged.
    pub eval_patches: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input_mode: InputMode::Patched,
            patch_size: 224,
            live_spoof_ratio: true,
            seed: 0,
            eval_patches: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 32 != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of 32",
                self.patch_size
            )));
        }
        if self.eval_patches == 0 {
            return Err(Error::Config("eval_patches must be at least 1".into()));
        }
        if !self.live_spoof_ratio {
            return Err(Error::Config(
                "live_spoof_ratio is fixed: training batches are always balanced 1:1".into(),
            ));
        }
        Ok(())
    }

    /// Training view of one image.
    pub fn train_view(&self, image: &ImageTensor, rng: &mut impl Rng) -> ImageTensor {
        match self.input_mode {
            InputMode::Patched => sample_patch(image, self.patch_size, rng),
            InputMode::Resized => resize_face(image, self.patch_size),
        }
    }

    /// Test-time views of one image.
    pub fn eval_views(&self, image: &ImageTensor, rng: &mut impl Rng) -> Vec<ImageTensor> {
        match self.input_mode {
            InputMode::Resized => vec![resize_face(image, self.patch_size)],
            InputMode::Patched if self.eval_patches == 1 => {
                vec![center_crop(image, self.patch_size)]
            }
            InputMode::Patched => (0..self.eval_patches)
                .map(|_| sample_patch(image, self.patch_size, rng))
                .collect(),
        }
    }
}

/// SplitMix64 finaliser used to derive independent stream seeds.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `x ↦ x / 127.5 − 1`.
pub fn normalize_rgb(raw: &RgbImage) -> ImageTensor {
    let (w, h) = raw.dimensions();
    let data = raw.as_raw().iter().map(|&p| p as f32 / 127.5 - 1.0).collect();
    ImageTensor::new(h as usize, w as usize, 3, data).expect("rgb buffer is h*w*3")
}

/// Accepts 8-bit RGB only.
pub fn normalize_image(raw: &DynamicImage) -> Result<ImageTensor> {
    match raw {
        DynamicImage::ImageRgb8(rgb) => Ok(normalize_rgb(rgb)),
        other => Err(Error::Shape(format!(
            "expected a 3-channel 8-bit image, got {:?} ({} channels)",
            other.color(),
            other.color().channel_count()
        ))),
    }
}

/// `x ↦ round((x + 1) · 127.5)`, clamped to `0..=255`.
pub fn to_pixel(x: f32) -> u8 {
    ((x as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Inverse of [`normalize_rgb`] for 3-channel images.
pub fn denormalize(image: &ImageTensor) -> Result<RgbImage> {
    if image.channels != 3 {
        return Err(Error::Shape(format!(
            "cannot write a {}-channel image as RGB",
            image.channels
        )));
    }
    let buf = image.data.iter().map(|&x| to_pixel(x)).collect();
    Ok(RgbImage::from_raw(image.width as u32, image.height as u32, buf)
        .expect("buffer length matches dimensions"))
}

/// Reads an image file, applies the optional crop and normalises it.
pub fn load_sample(sample: &LabeledSample) -> Result<ImageTensor> {
    load_image(&sample.image_path, sample.crop_box.map(|b| (b.x, b.y, b.width, b.height)))
}

pub fn load_image(path: &Path, crop: Option<(u32, u32, u32, u32)>) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let img = match crop {
        Some((x, y, w, h)) => img.crop_imm(x, y, w, h),
        None => img,
    };
    normalize_image(&img).map_err(|e| match e {
        Error::Shape(m) => Error::Shape(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let (ih, iw, c) = (image.height, image.width, image.channels);
    if (ih, iw) == (out_h, out_w) {
        return image.clone();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, ih);
    let xs = taps(out_w, iw);
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = image.at(y0, x0, ch) * (1.0 - fx) + image.at(y0, x1, ch) * fx;
                let bot = image.at(y1, x0, ch) * (1.0 - fx) + image.at(y1, x1, ch) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    ImageTensor::new(out_h, out_w, c, data).expect("resize output shape")
}

pub fn resize_face(image: &ImageTensor, size: usize) -> ImageTensor {
    resize_bilinear(image, size, size)
}

/// Upscales so the short side is at least `size`, preserving aspect ratio.
fn ensure_min_side(image: &ImageTensor, size: usize) -> ImageTensor {
    let short = image.height.min(image.width);
    if short >= size {
        return image.clone();
    }
    let scale = size as f64 / short as f64;
    let h = ((image.height as f64 * scale).round() as usize).max(size);
    let w = ((image.width as f64 * scale).round() as usize).max(size);
    resize_bilinear(image, h, w)
}

fn crop(image: &ImageTensor, y: usize, x: usize, size: usize) -> ImageTensor {
    let c = image.channels;
    let mut data = Vec::with_capacity(size * size * c);
    for row in y..y + size {
        let start = (row * image.width + x) * c;
        data.extend_from_slice(&image.data[start..start + size * c]);
    }
    ImageTensor::new(size, size, c, data).expect("crop shape")
}

/// Uniformly placed `size × size` crop.
pub fn sample_patch(image: &ImageTensor, size: usize, rng: &mut impl Rng) -> ImageTensor {
    let img = ensure_min_side(image, size);
    let y = rng.random_range(0..=img.height - size);
    let x = rng.random_range(0..=img.width - size);
    crop(&img, y, x, size)
}

pub fn center_crop(image: &ImageTensor, size: usize) -> ImageTensor {
    let img = ensure_min_side(image, size);
    crop(&img, (img.height - size) / 2, (img.width - size) / 2, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalisation_endpoints() {
        let raw = RgbImage::from_raw(3, 1, vec![0, 0, 0, 255, 255, 255, 128, 128, 128]).unwrap();
        let t = normalize_rgb(&raw);
        assert_eq!(t.at(0, 0, 0), -1.0);
        assert_eq!(t.at(0, 1, 0), 1.0);
        assert!((t.at(0, 2, 0) - (128.0 / 127.5 - 1.0)).abs() < 1e-7);
        assert!((t.at(0, 2, 0) - 0.003_921_6).abs() < 1e-6);
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let gray = DynamicImage::new_luma8(4, 4);
        assert!(matches!(normalize_image(&gray), Err(Error::Shape(_))));
        let rgba = DynamicImage::new_rgba8(4, 4);
        assert!(normalize_image(&rgba).is_err());
    }

    #[test]
    fn cue_pixel_mapping() {
        assert_eq!(to_pixel(0.0), 128);
        assert_eq!(to_pixel(-1.0), 0);
        assert_eq!(to_pixel(1.0), 255);
    }

    proptest! {
        #[test]
        fn normalisation_round_trip(px in prop::collection::vec(any::<u8>(), 12)) {
            let raw = RgbImage::from_raw(2, 2, px.clone()).unwrap();
            let t = normalize_rgb(&raw);
            prop_assert!(t.data.iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert_eq!(denormalize(&t).unwrap().into_raw(), px);
        }
    }

    #[test]
    fn identity_and_constant_resize() {
        let img = ImageTensor::new(4, 4, 3, (0..48).map(|v| v as f32 / 48.0).collect()).unwrap();
        assert_eq!(resize_face(&img, 4), img);
        let flat = ImageTensor::filled(448, 448, 3, 0.3);
        let out = resize_face(&flat, 224);
        assert_eq!(out.shape(), [224, 224, 3]);
        assert!(out.data.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn checkerboard_upsample_weights() {
        // [[0, 1], [1, 0]] at 4×4: source coordinates are -0.25, 0.25, 0.75, 1.25,
        // clamped to [0, 1], so the 1-D weights on the second pixel are 0, 1/4, 3/4, 1.
        let img = ImageTensor::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize_face(&img, 4);
        let w = [0.0f32, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let (wy, wx) = (w[y], w[x]);
                let want = (1.0 - wy) * wx + wy * (1.0 - wx);
                assert!((out.at(y, x, 0) - want).abs() < 1e-6, "({y},{x})");
            }
        }
    }

    #[test]
    fn patches_stay_in_bounds_and_replay() {
        let img = ImageTensor::new(448, 448, 1, (0..448 * 448).map(|v| v as f32).collect())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = sample_patch(&img, 224, &mut rng);
        assert_eq!(p.shape(), [224, 224, 1]);
        let y0 = (p.at(0, 0, 0) as usize) / 448;
        let x0 = (p.at(0, 0, 0) as usize) % 448;
        assert!(y0 + 224 <= 448 && x0 + 224 <= 448);
        assert_eq!(p.at(223, 223, 0) as usize, (y0 + 223) * 448 + x0 + 223);
        let q = sample_patch(&img, 224, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(p, q);
    }

    #[test]
    fn small_images_are_upscaled_first() {
        let img = ImageTensor::filled(200, 300, 3, 0.1);
        let p = sample_patch(&img, 224, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(p.shape(), [224, 224, 3]);
        assert_eq!(ensure_min_side(&img, 224).shape(), [224, 336, 3]);
        assert_eq!(center_crop(&img, 224).shape(), [224, 224, 3]);
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = PipelineConfig {
            patch_size: 100,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
