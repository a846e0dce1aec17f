use rand::Rng;

use super::layers::{upsample_nearest2x, upsample_nearest2x_backward};
use super::{join, BatchNorm2d, Conv2d, Module, Padding, Relu, VisitFn};
use crate::tensor::{Scalar, Tensor};

/// ResNet basic block: two 3×3 convolutions with a projection shortcut
/// whenever the stride or width changes.
pub struct BasicBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    downsample: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    relu_out: Relu<T>,
}

impl<T: Scalar> BasicBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, stride: usize, rng: &mut R) -> Self {
        let downsample = (stride != 1 || in_c != out_c).then(|| {
            (
                Conv2d::square(in_c, out_c, 1, stride, 0, false, rng),
                BatchNorm2d::new(out_c),
            )
        });
        Self {
            conv1: Conv2d::square(in_c, out_c, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(out_c),
            relu1: Relu::new(),
            conv2: Conv2d::square(out_c, out_c, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(out_c),
            downsample,
            relu_out: Relu::new(),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.relu1.infer(&self.bn1.infer(&self.conv1.infer(x)));
        let mut h = self.bn2.infer(&self.conv2.infer(&h));
        match &self.downsample {
            Some((c, b)) => h.add_assign(&b.infer(&c.infer(x))),
            None => h.add_assign(x),
        }
        self.relu_out.infer(&h)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.conv1.forward(x);
        let h = self.bn1.forward(&h);
        let h = self.relu1.forward(&h);
        let h = self.conv2.forward(&h);
        let mut h = self.bn2.forward(&h);
        match &mut self.downsample {
            Some((c, b)) => {
                let s = c.forward(x);
                h.add_assign(&b.forward(&s));
            }
            None => h.add_assign(x),
        }
        self.relu_out.forward(&h)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.relu_out.backward(dy);
        let mut dx = match &mut self.downsample {
            Some((c, b)) => c.backward(&b.backward(&d)),
            None => d.clone(),
        };
        let g = self.bn2.backward(&d);
        let g = self.conv2.backward(&g);
        let g = self.relu1.backward(&g);
        let g = self.bn1.backward(&g);
        dx.add_assign(&self.conv1.backward(&g));
        dx
    }
}

impl<T: Scalar> Module<T> for BasicBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((c, b)) = &mut self.downsample {
            c.visit(&join(prefix, "downsample.0"), f);
            b.visit(&join(prefix, "downsample.1"), f);
        }
    }
}

/// Decoder stage: nearest 2× upsampling, a 2×2 convolution, optional
/// concatenation with an encoder feature, then a residual unit
/// `[3×3 conv, BN, ReLU, 3×3 conv, BN] + 1×1 conv shortcut`.
pub struct DecoderBlock<T> {
    pub in_c: usize,
    pub skip_c: usize,
    pub out_c: usize,
    up_conv: Conv2d<T>,
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    shortcut: Conv2d<T>,
    relu_out: Relu<T>,
}

impl<T: Scalar> DecoderBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_c: usize, skip_c: usize, out_c: usize, rng: &mut R) -> Self {
        let cat_c = out_c + skip_c;
        Self {
            in_c,
            skip_c,
            out_c,
            up_conv: Conv2d::new(in_c, out_c, 2, 2, 1, Padding::trailing(1), true, rng),
            conv1: Conv2d::square(cat_c, out_c, 3, 1, 1, false, rng),
            bn1: BatchNorm2d::new(out_c),
            relu1: Relu::new(),
            conv2: Conv2d::square(out_c, out_c, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(out_c),
            shortcut: Conv2d::square(cat_c, out_c, 1, 1, 0, true, rng),
            relu_out: Relu::new(),
        }
    }

    fn merge(&self, up: Tensor<T>, skip: Option<&Tensor<T>>) -> Tensor<T> {
        match (skip, self.skip_c) {
            (Some(s), c) if c > 0 => {
                assert_eq!(s.c, c, "decoder: skip width mismatch");
                Tensor::concat_channels(&up, s)
            }
            (None, 0) => up,
            _ => panic!("decoder: skip connection presence does not match configuration"),
        }
    }

    pub fn infer(&self, x: &Tensor<T>, skip: Option<&Tensor<T>>) -> Tensor<T> {
        let up = self.up_conv.infer(&upsample_nearest2x(x));
        let cat = self.merge(up, skip);
        let h = self.relu1.infer(&self.bn1.infer(&self.conv1.infer(&cat)));
        let mut h = self.bn2.infer(&self.conv2.infer(&h));
        h.add_assign(&self.shortcut.infer(&cat));
        self.relu_out.infer(&h)
    }

    pub fn forward(&mut self, x: &Tensor<T>, skip: Option<&Tensor<T>>) -> Tensor<T> {
        let up = self.up_conv.forward(&upsample_nearest2x(x));
        let cat = self.merge(up, skip);
        let h = self.conv1.forward(&cat);
        let h = self.bn1.forward(&h);
        let h = self.relu1.forward(&h);
        let h = self.conv2.forward(&h);
        let mut h = self.bn2.forward(&h);
        h.add_assign(&self.shortcut.forward(&cat));
        self.relu_out.forward(&h)
    }

    /// Returns `(d input, d skip)`.
    pub fn backward(&mut self, dy: &Tensor<T>) -> (Tensor<T>, Option<Tensor<T>>) {
        let d = self.relu_out.backward(dy);
        let mut dcat = self.shortcut.backward(&d);
        let g = self.bn2.backward(&d);
        let g = self.conv2.backward(&g);
        let g = self.relu1.backward(&g);
        let g = self.bn1.backward(&g);
        dcat.add_assign(&self.conv1.backward(&g));
        let (dup, dskip) = if self.skip_c > 0 {
            let (a, b) = dcat.split_channels(self.out_c);
            (a, Some(b))
        } else {
            (dcat, None)
        };
        let dx = upsample_nearest2x_backward(&self.up_conv.backward(&dup));
        (dx, dskip)
    }
}

impl<T: Scalar> Module<T> for DecoderBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>) {
        self.up_conv.visit(&join(prefix, "up_conv"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.shortcut.visit(&join(prefix, "shortcut"), f);
    }
}
