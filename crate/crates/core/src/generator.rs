//! Spoof cue generator: a ResNet-18 style encoder and a five-stage residual
//! decoder with multi-scale skip connections.
//!
//! Resolution ladder for an `H×W` input (default widths in brackets):
//!
//! | stage | output | skip into |
//! |-------|--------|-----------|
//! | stem conv 7×7/2 + BN + ReLU | H/2 \[64\] | D4 |
//! | max-pool 3×3/2 + layer1 (E2) | H/4 \[64\] | D3 |
//! | layer2 (E3) | H/8 \[128\] | D2 |
//! | layer3 (E4) | H/16 \[256\] | D1 |
//! | layer4 (E5) | H/32 \[512\] | - |
//! | D1..D4 | H/16 .. H/2 \[256, 128, 64, 64\] | |
//! | D5 + 3×3 head + Tanh | H \[64 → 3\] | |

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::TensorArchive;
use crate::nn::{BasicBlock, BatchNorm2d, Conv2d, DecoderBlock, MaxPool2d, Module, Relu, Tanh, VisitFn};
use crate::nn::join;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Generator layers whose globally pooled activations feed the metric loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TapLayer {
    E5,
    D1,
    D2,
    D3,
    D4,
    /// The cue map itself.
    SC,
}

impl TapLayer {
    pub const ALL: [TapLayer; 6] = [
        TapLayer::E5,
        TapLayer::D1,
        TapLayer::D2,
        TapLayer::D3,
        TapLayer::D4,
        TapLayer::SC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TapLayer::E5 => "E5",
            TapLayer::D1 => "D1",
            TapLayer::D2 => "D2",
            TapLayer::D3 => "D3",
            TapLayer::D4 => "D4",
            TapLayer::SC => "SC",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown tap layer {s:?} (expected E5, D1-D4 or SC)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub input_size: usize,
    /// Stem plus the four encoder stages.
    pub encoder_widths: [usize; 5],
    /// D1 through D5.
    pub decoder_widths: [usize; 5],
    pub use_pretrained_encoder: bool,
    #[serde(default)]
    pub pretrained_path: Option<PathBuf>,
    pub tap_layers: Vec<TapLayer>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            encoder_widths: [64, 64, 128, 256, 512],
            decoder_widths: [256, 128, 64, 64, 64],
            use_pretrained_encoder: false,
            pretrained_path: None,
            tap_layers: vec![TapLayer::E5, TapLayer::D1, TapLayer::D2, TapLayer::D3, TapLayer::D4],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "generator input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::Config("tap_layers must not be empty".into()));
        }
        let mut seen = self.tap_layers.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tap_layers.len() {
            return Err(Error::Config("tap_layers contains duplicates".into()));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.use_pretrained_encoder && self.pretrained_path.is_none() {
            return Err(Error::Config(
                "use_pretrained_encoder requires pretrained_path".into(),
            ));
        }
        Ok(())
    }

    pub fn tap_width(&self, tap: TapLayer) -> usize {
        match tap {
            TapLayer::E5 => self.encoder_widths[4],
            TapLayer::D1 => self.decoder_widths[0],
            TapLayer::D2 => self.decoder_widths[1],
            TapLayer::D3 => self.decoder_widths[2],
            TapLayer::D4 => self.decoder_widths[3],
            TapLayer::SC => 3,
        }
    }
}

/// Pooled (unnormalised) feature vectors, one list per tap layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTapSet<T> {
    pub taps: Vec<(TapLayer, Vec<Vec<T>>)>,
}

impl<T> FeatureTapSet<T> {
    pub fn get(&self, tap: TapLayer) -> Option<&[Vec<T>]> {
        self.taps.iter().find(|(t, _)| *t == tap).map(|(_, v)| v.as_slice())
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput<T> {
    /// `[N, 3, H, W]`, entries in `[-1, 1]`.
    pub cue: Tensor<T>,
    pub taps: FeatureTapSet<T>,
}

struct Stage<T> {
    blocks: Vec<BasicBlock<T>>,
}

impl<T: Scalar> Stage<T> {
    fn new(in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            blocks: vec![
                BasicBlock::new(in_c, out_c, stride, rng),
                BasicBlock::new(out_c, out_c, 1, rng),
            ],
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = self.blocks[0].infer(x);
        for b in &self.blocks[1..] {
            h = b.infer(&h);
        }
        h
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = self.blocks[0].forward(x);
        for b in &mut self.blocks[1..] {
            h = b.forward(&h);
        }
        h
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        g
    }

    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Intermediate activations of one pass, in ladder order.
struct Activations<T> {
    e5: Tensor<T>,
    d: [Tensor<T>; 5],
    cue: Tensor<T>,
}

pub struct Generator<T> {
    pub config: GeneratorConfig,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stem_relu: Relu<T>,
    pool: MaxPool2d,
    layers: [Stage<T>; 4],
    decoder: [DecoderBlock<T>; 5],
    head: Conv2d<T>,
    tanh: Tanh<T>,
    tap_shapes: Vec<(TapLayer, [usize; 4])>,
}

impl<T: Scalar> Generator<T> {
    /// Builds a generator with deterministic initialisation from `seed` and,
    /// when configured, loads encoder weights from a pretrained archive.
    pub fn build(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.encoder_widths;
        let d = config.decoder_widths;
        let stem_conv = Conv2d::square(3, e[0], 7, 2, 3, false, &mut rng);
        let layers = [
            Stage::new(e[0], e[1], 1, &mut rng),
            Stage::new(e[1], e[2], 2, &mut rng),
            Stage::new(e[2], e[3], 2, &mut rng),
            Stage::new(e[3], e[4], 2, &mut rng),
        ];
        let decoder = [
            DecoderBlock::new(e[4], e[3], d[0], &mut rng),
            DecoderBlock::new(d[0], e[2], d[1], &mut rng),
            DecoderBlock::new(d[1], e[1], d[2], &mut rng),
            DecoderBlock::new(d[2], e[0], d[3], &mut rng),
            DecoderBlock::new(d[3], 0, d[4], &mut rng),
        ];
        let head = Conv2d::square(d[4], 3, 3, 1, 1, true, &mut rng);
        let mut gen = Self {
            config: config.clone(),
            stem_conv,
            stem_bn: BatchNorm2d::new(e[0]),
            stem_relu: Relu::new(),
            pool: MaxPool2d::new(3, 2, 1),
            layers,
            decoder,
            head,
            tanh: Tanh::new(),
            tap_shapes: Vec::new(),
        };
        if config.use_pretrained_encoder {
            let path = config.pretrained_path.as_ref().expect("validated");
            let archive = TensorArchive::read(path)?;
            gen.load_encoder(&archive, path)?;
        }
        Ok(gen)
    }

    /// Copies every `encoder.*` tensor from `archive`; all must be present
    /// with matching shapes.
    pub fn load_encoder(&mut self, archive: &TensorArchive, path: &std::path::Path) -> Result<()> {
        let mut failure = None;
        self.visit_encoder(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            match archive.get::<T>(name) {
                Some((shape, values)) if shape == p.shape.as_slice() => p.value = values,
                Some((shape, _)) => {
                    failure = Some(format!(
                        "tensor {name}: shape {shape:?} does not match expected {:?}",
                        p.shape
                    ))
                }
                None => failure = Some(format!("missing tensor {name}")),
            }
        });
        match failure {
            Some(msg) => Err(Error::checkpoint(path, msg)),
            None => Ok(()),
        }
    }

    fn visit_encoder(&mut self, f: &mut VisitFn<'_, T>) {
        self.stem_conv.visit("encoder.conv1", f);
        self.stem_bn.visit("encoder.bn1", f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit(&format!("encoder.layer{}", i + 1), f);
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != 3 {
            return Err(Error::Shape(format!("generator expects 3 channels, got {}", x.c)));
        }
        if x.n == 0 || x.h == 0 || x.w == 0 || x.h % 32 != 0 || x.w % 32 != 0 {
            return Err(Error::Shape(format!(
                "generator input {}x{} must be a non-empty multiple of 32",
                x.h, x.w
            )));
        }
        Ok(())
    }

    fn run_infer(&self, x: &Tensor<T>) -> Activations<T> {
        let stem = self
            .stem_relu
            .infer(&self.stem_bn.infer(&self.stem_conv.infer(x)));
        let e2 = self.layers[0].infer(&self.pool.infer(&stem));
        let e3 = self.layers[1].infer(&e2);
        let e4 = self.layers[2].infer(&e3);
        let e5 = self.layers[3].infer(&e4);
        let d1 = self.decoder[0].infer(&e5, Some(&e4));
        let d2 = self.decoder[1].infer(&d1, Some(&e3));
        let d3 = self.decoder[2].infer(&d2, Some(&e2));
        let d4 = self.decoder[3].infer(&d3, Some(&stem));
        let d5 = self.decoder[4].infer(&d4, None);
        let cue = self.tanh.infer(&self.head.infer(&d5));
        Activations {
            e5,
            d: [d1, d2, d3, d4, d5],
            cue,
        }
    }

    fn run_forward(&mut self, x: &Tensor<T>) -> Activations<T> {
        let h = self.stem_conv.forward(x);
        let h = self.stem_bn.forward(&h);
        let stem = self.stem_relu.forward(&h);
        let p = self.pool.forward(&stem);
        let e2 = self.layers[0].forward(&p);
        let e3 = self.layers[1].forward(&e2);
        let e4 = self.layers[2].forward(&e3);
        let e5 = self.layers[3].forward(&e4);
        let d1 = self.decoder[0].forward(&e5, Some(&e4));
        let d2 = self.decoder[1].forward(&d1, Some(&e3));
        let d3 = self.decoder[2].forward(&d2, Some(&e2));
        let d4 = self.decoder[3].forward(&d3, Some(&stem));
        let d5 = self.decoder[4].forward(&d4, None);
        let h = self.head.forward(&d5);
        let cue = self.tanh.forward(&h);
        Activations {
            e5,
            d: [d1, d2, d3, d4, d5],
            cue,
        }
    }

    fn tap_tensor<'a>(acts: &'a Activations<T>, tap: TapLayer) -> &'a Tensor<T> {
        match tap {
            TapLayer::E5 => &acts.e5,
            TapLayer::D1 => &acts.d[0],
            TapLayer::D2 => &acts.d[1],
            TapLayer::D3 => &acts.d[2],
            TapLayer::D4 => &acts.d[3],
            TapLayer::SC => &acts.cue,
        }
    }

    fn collect(acts: Activations<T>, taps: &[TapLayer]) -> GeneratorOutput<T> {
        let taps = taps
            .iter()
            .map(|&t| (t, Self::tap_tensor(&acts, t).global_avg_pool()))
            .collect();
        GeneratorOutput {
            cue: acts.cue,
            taps: FeatureTapSet { taps },
        }
    }

    /// Inference pass (running batch-norm statistics) returning the configured taps.
    pub fn generate(&self, images: &Tensor<T>) -> Result<GeneratorOutput<T>> {
        self.generate_with_taps(images, &self.config.tap_layers)
    }

    pub fn generate_with_taps(&self, images: &Tensor<T>, taps: &[TapLayer]) -> Result<GeneratorOutput<T>> {
        self.check_input(images)?;
        Ok(Self::collect(self.run_infer(images), taps))
    }

    /// Training pass: batch statistics, activations cached for [`Generator::backward`].
    pub fn forward(&mut self, images: &Tensor<T>) -> Result<GeneratorOutput<T>> {
        self.check_input(images)?;
        let acts = self.run_forward(images);
        self.tap_shapes = self
            .config
            .tap_layers
            .iter()
            .map(|&t| (t, Self::tap_tensor(&acts, t).shape()))
            .collect();
        let taps = self.config.tap_layers.clone();
        Ok(Self::collect(acts, &taps))
    }

    fn tap_grad(&self, tap: TapLayer, grads: &FeatureTapSet<T>) -> Option<Tensor<T>> {
        let g = grads.get(tap)?;
        let [n, c, h, w] = self
            .tap_shapes
            .iter()
            .find(|(t, _)| *t == tap)
            .map(|(_, s)| *s)
            .expect("gradient supplied for a layer that was not tapped");
        let mut t = Tensor::zeros(n, c, h, w);
        t.add_global_avg_pool_grad(g);
        Some(t)
    }

    fn add_tap(&self, d: &mut Tensor<T>, tap: TapLayer, grads: &FeatureTapSet<T>) {
        if let Some(g) = self.tap_grad(tap, grads) {
            d.add_assign(&g);
        }
    }

    /// Back-propagates `d_cue` plus per-tap gradients of the pooled vectors.
    /// Parameter gradients accumulate; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, d_cue: &Tensor<T>, d_taps: &FeatureTapSet<T>) -> Tensor<T> {
        let mut g = d_cue.clone();
        self.add_tap(&mut g, TapLayer::SC, d_taps);
        let g = self.tanh.backward(&g);
        let g = self.head.backward(&g);
        let (mut g, _) = self.decoder[4].backward(&g);
        self.add_tap(&mut g, TapLayer::D4, d_taps);
        let (mut g, d_stem_skip) = self.decoder[3].backward(&g);
        self.add_tap(&mut g, TapLayer::D3, d_taps);
        let (mut g, d_e2_skip) = self.decoder[2].backward(&g);
        self.add_tap(&mut g, TapLayer::D2, d_taps);
        let (mut g, d_e3_skip) = self.decoder[1].backward(&g);
        self.add_tap(&mut g, TapLayer::D1, d_taps);
        let (mut g, d_e4_skip) = self.decoder[0].backward(&g);
        self.add_tap(&mut g, TapLayer::E5, d_taps);

        let mut g = self.layers[3].backward(&g);
        g.add_assign(&d_e4_skip.expect("D1 has a skip"));
        let mut g = self.layers[2].backward(&g);
        g.add_assign(&d_e3_skip.expect("D2 has a skip"));
        let mut g = self.layers[1].backward(&g);
        g.add_assign(&d_e2_skip.expect("D3 has a skip"));
        let g = self.layers[0].backward(&g);
        let mut g = self.pool.backward(&g);
        g.add_assign(&d_stem_skip.expect("D4 has a skip"));
        let g = self.stem_relu.backward(&g);
        let g = self.stem_bn.backward(&g);
        self.stem_conv.backward(&g)
    }

    /// SHA-256 over every parameter and buffer (names, shapes and values).
    pub fn parameter_hash(&mut self) -> String {
        let mut hasher = Sha256::new();
        self.visit("", &mut |name, p| {
            hasher.update(name.as_bytes());
            for s in &p.shape {
                hasher.update((*s as u64).to_le_bytes());
            }
            hasher.update(T::to_le_bytes_vec(&p.value));
        });
        hex::encode(hasher.finalize())
    }
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>) {
        let mut prefixed = |name: &str, p: &mut crate::nn::Param<T>| f(&join(prefix, name), p);
        self.visit_encoder(&mut prefixed);
        for (i, d) in self.decoder.iter_mut().enumerate() {
            d.visit(&format!("decoder.d{}", i + 1), &mut prefixed);
        }
        self.head.visit("decoder.head", &mut prefixed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            input_size: 32,
            encoder_widths: [4, 4, 8, 8, 8],
            decoder_widths: [8, 8, 4, 4, 4],
            tap_layers: TapLayer::ALL.to_vec(),
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = GeneratorConfig::default();
        assert!(c.validate().is_ok());
        c.input_size = 100;
        assert!(c.validate().is_err());
        c.input_size = 64;
        c.tap_layers.clear();
        assert!(c.validate().is_err());
        c.tap_layers = vec![TapLayer::E5, TapLayer::E5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_non_multiple_of_32() {
        let g = Generator::<f32>::build(&tiny(), 1).unwrap();
        let x = Tensor::zeros(1, 3, 48, 48);
        assert!(matches!(g.generate(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn tap_widths_follow_config() {
        let g = Generator::<f32>::build(&tiny(), 1).unwrap();
        let out = g.generate(&Tensor::filled(2, 3, 64, 64, 0.1)).unwrap();
        for (tap, vecs) in &out.taps.taps {
            assert_eq!(vecs.len(), 2);
            assert!(vecs.iter().all(|v| v.len() == tiny().tap_width(*tap)));
        }
        assert_eq!(out.cue.shape(), [2, 3, 64, 64]);
    }

    #[test]
    fn parse_tap_names() {
        assert_eq!(TapLayer::parse("d4").unwrap(), TapLayer::D4);
        assert!(TapLayer::parse("D9").is_err());
    }
}
