//! Procedural live/spoof images with known artifact signals.
//!
//! Live images are smooth low-frequency textures with a soft elliptical
//! "face". A spoof image is a fresh live-style base with one artifact added,
//! so the only systematic difference between the classes is the artifact.

use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mix_seed;
use crate::datamodel::{write_manifest, AttackType, DatasetManifest, Label, LabeledSample, Split};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Moire,
    ColorCast,
    Banding,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 3] = [Self::Moire, Self::ColorCast, Self::Banding];

    pub fn name(self) -> &'static str {
        match self {
            Self::Moire => "moire",
            Self::ColorCast => "color_cast",
            Self::Banding => "banding",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown artifact {s:?}; valid names: {}",
                    Self::ALL.map(Self::name).join(", ")
                ))
            })
    }

    pub fn attack_type(self) -> AttackType {
        AttackType::new(self.name()).expect("artifact names are valid tags")
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Images per class.
    pub count: usize,
    pub image_size: usize,
    pub artifact_types: Vec<ArtifactKind>,
    pub artifact_strength: f64,
    pub seed: u64,
    /// Train/dev/test fractions by generation index.
    pub split_fractions: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 100,
            image_size: 96,
            artifact_types: vec![ArtifactKind::Moire, ArtifactKind::ColorCast],
            artifact_strength: 1.0,
            seed: 0,
            split_fractions: [0.6, 0.2, 0.2],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synthetic count must be at least 1".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "synthetic image_size {} is below 8 pixels",
                self.image_size
            )));
        }
        if self.artifact_types.is_empty() {
            return Err(Error::Config("at least one artifact type is required".into()));
        }
        if !(self.artifact_strength > 0.0 && self.artifact_strength <= 1.0) {
            return Err(Error::Config(format!(
                "artifact_strength {} must lie in (0, 1]",
                self.artifact_strength
            )));
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split fractions {:?} must be non-negative and sum to 1",
                self.split_fractions
            )));
        }
        Ok(())
    }

    fn split_of(&self, index: usize) -> Split {
        let n = self.count as f64;
        let train_end = (self.split_fractions[0] * n).round() as usize;
        let dev_end = ((self.split_fractions[0] + self.split_fractions[1]) * n).round() as usize;
        if index < train_end {
            Split::Train
        } else if index < dev_end {
            Split::Dev
        } else {
            Split::Test
        }
    }
}

const LIVE_STREAM: u64 = 1;
const SPOOF_STREAM: u64 = 2;

/// Floating-point RGB canvas in 8-bit units.
struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn to_image(&self) -> RgbImage {
        let s = self.size as u32;
        RgbImage::from_fn(s, s, |x, y| {
            let p = self.px[y as usize * self.size + x as usize];
            image::Rgb(p.map(|v| v.round().clamp(0.0, 255.0) as u8))
        })
    }
}

fn live_base(size: usize, rng: &mut ChaCha8Rng) -> Canvas {
    let s = size as f64;
    let gray = rng.random_range(70.0..180.0);
    let bg: [f64; 3] = std::array::from_fn(|_| gray + rng.random_range(-8.0..8.0));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..TAU);
            let freq = rng.random_range(0.5..2.0) / s;
            (theta.cos() * freq, theta.sin() * freq, rng.random_range(0.0..TAU), rng.random_range(5.0..20.0))
        })
        .collect();
    let cx = s * rng.random_range(0.44..0.56);
    let cy = s * rng.random_range(0.44..0.56);
    let ax = s * rng.random_range(0.25..0.32);
    let ay = s * rng.random_range(0.32..0.40);
    let red = rng.random_range(150.0..215.0);
    let skin = [
        red,
        red * rng.random_range(0.72..0.84),
        red * rng.random_range(0.58..0.70),
    ];
    let shade_dir = rng.random_range(0.0..TAU);
    let noise = Normal::new(0.0, 1.5).expect("valid sigma");

    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let field: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (TAU * (kx * xf + ky * yf) + ph).sin())
                .sum();
            let r = (((xf - cx) / ax).powi(2) + ((yf - cy) / ay).powi(2)).sqrt();
            let alpha = ((1.0 - r) / 0.08).clamp(0.0, 1.0);
            let shade =
                1.0 + 0.08 * ((xf - cx) / ax * shade_dir.cos() + (yf - cy) / ay * shade_dir.sin());
            let mut p = [0.0; 3];
            for c in 0..3 {
                let back = bg[c] + field;
                let face = skin[c] * shade + 0.3 * field;
                p[c] = (1.0 - alpha) * back + alpha * face + noise.sample(rng);
            }
            px.push(p);
        }
    }
    Canvas { size, px }
}

fn apply_artifact(canvas: &mut Canvas, kind: ArtifactKind, strength: f64, rng: &mut ChaCha8Rng) {
    let size = canvas.size;
    match kind {
        ArtifactKind::Moire => {
            // two slightly detuned fine gratings beat against each other
            let amp = 30.0 * strength;
            let theta = rng.random_range(0.0..TAU);
            let period = rng.random_range(3.0..5.0);
            let detune = rng.random_range(0.06..0.15);
            let (ph1, ph2) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
            let k1 = (theta.cos() / period, theta.sin() / period);
            let t2 = theta + detune;
            let p2 = period * 1.04;
            let k2 = (t2.cos() / p2, t2.sin() / p2);
            for y in 0..size {
                for x in 0..size {
                    let (xf, yf) = (x as f64, y as f64);
                    let v = (TAU * (k1.0 * xf + k1.1 * yf) + ph1).sin()
                        + (TAU * (k2.0 * xf + k2.1 * yf) + ph2).sin();
                    for c in &mut canvas.px[y * size + x] {
                        *c += amp * 0.5 * v;
                    }
                }
            }
        }
        ArtifactKind::ColorCast => {
            let up = rng.random_range(0..3);
            let down = (up + rng.random_range(1..3)) % 3;
            let mag = 45.0 * strength * rng.random_range(0.85..1.15);
            let mut shift = [0.0; 3];
            shift[up] = mag;
            shift[down] = -0.6 * mag;
            for p in &mut canvas.px {
                for c in 0..3 {
                    p[c] += shift[c];
                }
            }
        }
        ArtifactKind::Banding => {
            let amp = 25.0 * strength;
            let period = rng.random_range(6..13);
            let offset = rng.random_range(0..period);
            for y in 0..size {
                let sign = if ((y + offset) % period) * 2 < period { 1.0 } else { -1.0 };
                for p in &mut canvas.px[y * size..(y + 1) * size] {
                    for c in p.iter_mut() {
                        *c += amp * sign;
                    }
                }
            }
        }
    }
}

/// Writes `count` live and `count` spoof PNGs plus `manifest.jsonl` under
/// `out_dir`. Spoof `i` carries artifact `artifact_types[i % len]`.
pub fn synth_dataset(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    config.validate()?;
    let out = out_dir.as_ref();
    for sub in ["live", "spoof"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut samples = Vec::with_capacity(2 * config.count);
    for i in 0..config.count {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, LIVE_STREAM, i as u64));
        let img = live_base(config.image_size, &mut rng).to_image();
        let path = out.join(format!("live/{i:05}.png"));
        img.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        samples.push(LabeledSample {
            image_path: path,
            label: Label::Live,
            attack_type: AttackType::live(),
            subject_id: format!("live-{i:05}"),
            split: config.split_of(i),
            crop_box: None,
            video_id: None,
        });
    }
    for i in 0..config.count {
        let kind = config.artifact_types[i % config.artifact_types.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, SPOOF_STREAM, i as u64));
        let mut canvas = live_base(config.image_size, &mut rng);
        apply_artifact(&mut canvas, kind, config.artifact_strength, &mut rng);
        let path = out.join(format!("spoof/{}_{i:05}.png", kind.name()));
        canvas.to_image().save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        samples.push(LabeledSample {
            image_path: path,
            label: Label::Spoof,
            attack_type: kind.attack_type(),
            subject_id: format!("spoof-{i:05}"),
            split: config.split_of(i),
            crop_box: None,
            video_id: None,
        });
    }
    let manifest = DatasetManifest::new(out, samples)?;
    write_manifest(&manifest, out.join("manifest.jsonl"))?;
    Ok(manifest)
}
