//! Auxiliary classifier fed with the overlay `S = I + C` during training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image_tensor::{CueMap, ImageTensor};
use crate::nn::{join, BatchNorm2d, Conv2d, Linear, Module, Relu, VisitFn};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// Image plus cue map.
    Overlay,
    /// The cue map alone (ablation).
    CueOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub input_mode: ClassifierInput,
    pub backbone_widths: [usize; 4],
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_mode: ClassifierInput::Overlay,
            backbone_widths: [32, 64, 128, 256],
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_widths.contains(&0) {
            return Err(Error::Config("classifier widths must be positive".into()));
        }
        Ok(())
    }
}

/// `S = I + C`, unclamped, so values range over `[-2, 2]`.
pub fn overlay(image: &ImageTensor, cue: &CueMap) -> Result<ImageTensor> {
    if image.shape() != cue.image().shape() {
        return Err(Error::Shape(format!(
            "overlay of {:?} image with {:?} cue map",
            image.shape(),
            cue.image().shape()
        )));
    }
    let data = image
        .data
        .iter()
        .zip(cue.values())
        .map(|(i, c)| i + c)
        .collect();
    ImageTensor::new(image.height, image.width, image.channels, data)
}

/// Batched overlay on NCHW tensors.
pub fn overlay_batch<T: Scalar>(images: &Tensor<T>, cues: &Tensor<T>) -> Result<Tensor<T>> {
    if !images.same_shape(cues) {
        return Err(Error::Shape(format!(
            "overlay of {:?} images with {:?} cue maps",
            images.shape(),
            cues.shape()
        )));
    }
    Ok(images.add(cues))
}

struct ConvStage<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu<T>,
}

/// Four strided 3×3 conv stages, global average pooling and a single logit.
pub struct Classifier<T> {
    pub config: ClassifierConfig,
    stages: Vec<ConvStage<T>>,
    pub head: Linear<T>,
    pooled_shape: Option<[usize; 4]>,
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Classifier<T> {
    pub fn build(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_c = 3;
        let mut stages = Vec::new();
        for &w in &config.backbone_widths {
            stages.push(ConvStage {
                conv: Conv2d::square(in_c, w, 3, 2, 1, false, &mut rng),
                bn: BatchNorm2d::new(w),
                relu: Relu::new(),
            });
            in_c = w;
        }
        Ok(Self {
            config: config.clone(),
            stages,
            head: Linear::new(in_c, 1, &mut rng),
            pooled_shape: None,
        })
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != 3 || x.n == 0 || x.h == 0 || x.w == 0 {
            return Err(Error::Shape(format!(
                "classifier expects a non-empty batch of 3-channel inputs, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn pool(h: &Tensor<T>) -> Tensor<T> {
        let data = h.global_avg_pool().concat();
        Tensor::from_vec(h.n, h.c, 1, 1, data)
    }

    /// Logits with inference statistics.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.check(x)?;
        let mut h = x.clone();
        for s in &self.stages {
            h = s.relu.infer(&s.bn.infer(&s.conv.infer(&h)));
        }
        Ok(self.head.infer(&Self::pool(&h)).data)
    }

    /// Probabilities `q ∈ (0, 1)`, one per sample.
    pub fn classify(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }

    /// Training pass returning logits; caches for [`Classifier::backward`].
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.check(x)?;
        let mut h = x.clone();
        for s in &mut self.stages {
            let a = s.conv.forward(&h);
            let a = s.bn.forward(&a);
            h = s.relu.forward(&a);
        }
        self.pooled_shape = Some(h.shape());
        Ok(self.head.forward(&Self::pool(&h)).data)
    }

    /// Takes `dL/dlogit` per sample, returns `dL/dinput`.
    pub fn backward(&mut self, d_logits: &[T]) -> Tensor<T> {
        let [n, c, h, w] = self.pooled_shape.take().expect("classifier backward without forward");
        let dy = Tensor::from_vec(n, 1, 1, 1, d_logits.to_vec());
        let dpooled = self.head.backward(&dy);
        let grads: Vec<Vec<T>> = (0..n).map(|i| dpooled.sample(i).to_vec()).collect();
        let mut g = Tensor::zeros(n, c, h, w);
        g.add_global_avg_pool_grad(&grads);
        for s in self.stages.iter_mut().rev() {
            let a = s.relu.backward(&g);
            let a = s.bn.backward(&a);
            g = s.conv.backward(&a);
        }
        g
    }
}

impl<T: Scalar> Module<T> for Classifier<T> {
    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.conv.visit(&join(prefix, &format!("stage{i}.conv")), f);
            s.bn.visit(&join(prefix, &format!("stage{i}.bn")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}
