use rand::Rng;

use super::{join, Module, Param, VisitFn};
use crate::tensor::{lit, Scalar, Tensor};

/// Zero padding applied on each border before a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Padding {
    pub const fn same(p: usize) -> Self {
        Self {
            top: p,
            left: p,
            bottom: p,
            right: p,
        }
    }

    /// Extra row and column on the bottom/right only, which keeps the
    /// spatial size of an even 2×2 kernel.
    pub const fn trailing(p: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            bottom: p,
            right: p,
        }
    }
}

/// 2-D convolution lowered to im2col + gemm one sample at a time.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
    /// `[out_c, in_c * kh * kw]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: Padding,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kh * kw;
        Self {
            in_c,
            out_c,
            kh,
            kw,
            stride,
            pad,
            weight: Param::he_normal(&[out_c, in_c, kh, kw], fan_in, rng),
            bias: bias.then(|| Param::zeros(&[out_c])),
            cache: None,
        }
    }

    pub fn square<R: Rng + ?Sized>(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::new(in_c, out_c, k, k, stride, Padding::same(pad), bias, rng)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ph = h + self.pad.top + self.pad.bottom;
        let pw = w + self.pad.left + self.pad.right;
        assert!(
            ph >= self.kh && pw >= self.kw,
            "conv input {h}x{w} smaller than kernel"
        );
        (
            (ph - self.kh) / self.stride + 1,
            (pw - self.kw) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == Padding::same(0)
    }

    /// Output columns `ox` whose input column `ox * stride + k - pad` lies in `[0, len)`.
    fn valid_range(&self, k: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if pad > k { (pad - k).div_ceil(s) } else { 0 };
        let hi = if len + pad > k {
            ((len + pad - k).div_ceil(s)).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let ohw = oh * ow;
        let s = self.stride;
        for ci in 0..self.in_c {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..self.kh {
                let (oy0, oy1) = self.valid_range(ky, self.pad.top, h, oh);
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    let (ox0, ox1) = self.valid_range(kx, self.pad.left, w, ow);
                    for oy in 0..oh {
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if oy < oy0 || oy >= oy1 || ox0 >= ox1 {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let iy = oy * s + ky - self.pad.top;
                        let srow = &src[iy * w..(iy + 1) * w];
                        line[..ox0].iter_mut().for_each(|v| *v = T::zero());
                        line[ox1..].iter_mut().for_each(|v| *v = T::zero());
                        let ix0 = ox0 * s + kx - self.pad.left;
                        if s == 1 {
                            line[ox0..ox1].copy_from_slice(&srow[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for (j, v) in line[ox0..ox1].iter_mut().enumerate() {
                                *v = srow[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let ohw = oh * ow;
        let s = self.stride;
        for ci in 0..self.in_c {
            let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..self.kh {
                let (oy0, oy1) = self.valid_range(ky, self.pad.top, h, oh);
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    let (ox0, ox1) = self.valid_range(kx, self.pad.left, w, ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let ix0 = ox0 * s + kx - self.pad.left;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - self.pad.top;
                        let drow = &mut dst[iy * w..(iy + 1) * w];
                        let line = &src[oy * ow + ox0..oy * ow + ox1];
                        for (j, v) in line.iter().enumerate() {
                            drow[ix0 + j * s] += *v;
                        }
                    }
                }
            }
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.in_c, "conv: expected {} input channels", self.in_c);
        let (oh, ow) = self.output_hw(x.h, x.w);
        let ohw = oh * ow;
        let ikk = self.in_c * self.kh * self.kw;
        let mut out = Tensor::zeros(x.n, self.out_c, oh, ow);
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); ikk * ohw]
        };
        for i in 0..x.n {
            let cols_ref: &[T] = if self.is_pointwise() {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), x.h, x.w, oh, ow, &mut cols);
                &cols
            };
            let dst = out.sample_mut(i);
            if let Some(b) = &self.bias {
                for (oc, chunk) in dst.chunks_exact_mut(ohw).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = b.value[oc]);
                }
            }
            let beta = if self.bias.is_some() { T::one() } else { T::zero() };
            T::gemm(
                self.out_c,
                ikk,
                ohw,
                T::one(),
                &self.weight.value,
                ikk,
                1,
                cols_ref,
                ohw,
                1,
                beta,
                dst,
                ohw,
                1,
            );
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let out = self.infer(x);
        self.cache = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.take().expect("conv backward without forward");
        let (oh, ow) = self.output_hw(x.h, x.w);
        assert_eq!(dy.shape(), [x.n, self.out_c, oh, ow], "conv: bad upstream shape");
        let ohw = oh * ow;
        let ikk = self.in_c * self.kh * self.kw;
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let pointwise = self.is_pointwise();
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); ikk * ohw]
        };
        let mut dcols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); ikk * ohw]
        };
        for i in 0..x.n {
            let g = dy.sample(i);
            if let Some(b) = &mut self.bias {
                for (oc, chunk) in g.chunks_exact(ohw).enumerate() {
                    b.grad[oc] += chunk.iter().copied().sum::<T>();
                }
            }
            let cols_ref: &[T] = if pointwise {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), x.h, x.w, oh, ow, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            T::gemm(
                self.out_c,
                ohw,
                ikk,
                T::one(),
                g,
                ohw,
                1,
                cols_ref,
                1,
                ohw,
                T::one(),
                &mut self.weight.grad,
                ikk,
                1,
            );
            // dcols = Wᵀ · dY
            let target: &mut [T] = if pointwise {
                dx.sample_mut(i)
            } else {
                &mut dcols
            };
            T::gemm(
                ikk,
                self.out_c,
                ohw,
                T::one(),
                &self.weight.value,
                1,
                ikk,
                g,
                ohw,
                1,
                T::zero(),
                target,
                ohw,
                1,
            );
            if !pointwise {
                self.col2im(&dcols, x.h, x.w, oh, ow, dx.sample_mut(i));
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

/// Batch normalisation over `(N, H, W)` per channel.
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: Param::zeros(&[channels]).buffer(),
            running_var: Param::filled(&[channels], T::one()).buffer(),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn channel_iter<'a>(x: &'a Tensor<T>, c: usize) -> impl Iterator<Item = &'a T> + 'a {
        let plane = x.plane();
        let stride = x.sample_len();
        (0..x.n).flat_map(move |i| x.data[i * stride + c * plane..i * stride + (c + 1) * plane].iter())
    }

    fn apply(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T], xhat: Option<&mut Tensor<T>>) -> Tensor<T> {
        let plane = x.plane();
        let mut out = x.clone();
        let mut xhat = xhat;
        for i in 0..x.n {
            for c in 0..self.channels {
                let range = i * x.sample_len() + c * plane..i * x.sample_len() + (c + 1) * plane;
                let g = self.gamma.value[c];
                let b = self.beta.value[c];
                for idx in range {
                    let h = (x.data[idx] - mean[c]) * inv_std[c];
                    if let Some(xh) = xhat.as_deref_mut() {
                        xh.data[idx] = h;
                    }
                    out.data[idx] = g * h + b;
                }
            }
        }
        out
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.channels, "batchnorm: channel mismatch");
        let eps = lit::<T>(self.eps);
        let inv_std: Vec<T> = self
            .running_var
            .value
            .iter()
            .map(|v| T::one() / (*v + eps).sqrt())
            .collect();
        self.apply(x, &self.running_mean.value, &inv_std, None)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.channels, "batchnorm: channel mismatch");
        let m = x.n * x.plane();
        let mf = lit::<T>(m as f64);
        let eps = lit::<T>(self.eps);
        let mut mean = vec![T::zero(); self.channels];
        let mut var = vec![T::zero(); self.channels];
        for c in 0..self.channels {
            let mu = Self::channel_iter(x, c).copied().sum::<T>() / mf;
            let v = Self::channel_iter(x, c).map(|v| (*v - mu) * (*v - mu)).sum::<T>() / mf;
            mean[c] = mu;
            var[c] = v;
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
        let out = self.apply(x, &mean, &inv_std, Some(&mut xhat));

        let mom = lit::<T>(self.momentum);
        let unbias = if m > 1 {
            mf / lit::<T>((m - 1) as f64)
        } else {
            T::one()
        };
        for c in 0..self.channels {
            let rm = &mut self.running_mean.value[c];
            *rm = (T::one() - mom) * *rm + mom * mean[c];
            let rv = &mut self.running_var.value[c];
            *rv = (T::one() - mom) * *rv + mom * var[c] * unbias;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let BnCache { xhat, inv_std } = self.cache.take().expect("batchnorm backward without forward");
        assert!(dy.same_shape(&xhat));
        let plane = dy.plane();
        let stride = dy.sample_len();
        let mf = lit::<T>((dy.n * plane) as f64);
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for c in 0..self.channels {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..dy.n {
                let r = i * stride + c * plane..i * stride + (c + 1) * plane;
                for idx in r {
                    sum_dy += dy.data[idx];
                    sum_dy_xhat += dy.data[idx] * xhat.data[idx];
                }
            }
            self.gamma.grad[c] += sum_dy_xhat;
            self.beta.grad[c] += sum_dy;
            let k = self.gamma.value[c] * inv_std[c] / mf;
            for i in 0..dy.n {
                let r = i * stride + c * plane..i * stride + (c + 1) * plane;
                for idx in r {
                    dx.data[idx] = k * (mf * dy.data[idx] - sum_dy - xhat.data[idx] * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Default)]
pub struct Relu<T> {
    out: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { out: None }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.out = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.out.take().expect("relu backward without forward");
        let mut dx = dy.clone();
        for (g, v) in dx.data.iter_mut().zip(&y.data) {
            if *v <= T::zero() {
                *g = T::zero();
            }
        }
        dx
    }
}

#[derive(Default)]
pub struct Tanh<T> {
    out: Option<Tensor<T>>,
}

impl<T: Scalar> Tanh<T> {
    pub fn new() -> Self {
        Self { out: None }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = v.tanh());
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.out = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.out.take().expect("tanh backward without forward");
        let mut dx = dy.clone();
        for (g, v) in dx.data.iter_mut().zip(&y.data) {
            *g *= T::one() - *v * *v;
        }
        dx
    }
}

/// Max pooling with a square window; padded cells never win.
pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            k,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn run<T: Scalar>(&self, x: &Tensor<T>, argmax: Option<&mut Vec<usize>>) -> Tensor<T> {
        let (oh, ow) = self.output_hw(x.h, x.w);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        let mut argmax = argmax;
        if let Some(a) = argmax.as_deref_mut() {
            a.clear();
            a.reserve(out.data.len());
        }
        for nc in 0..x.n * x.c {
            let base = nc * x.plane();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * x.w + ix as usize;
                            // strict comparison: ties go to the first cell in scan order
                            if x.data[idx] > best || best_idx == usize::MAX {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.data[nc * oh * ow + oy * ow + ox] = best;
                    if let Some(a) = argmax.as_deref_mut() {
                        a.push(best_idx);
                    }
                }
            }
        }
        out
    }

    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, None)
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut argmax = Vec::new();
        let out = self.run(x, Some(&mut argmax));
        self.cache = Some((argmax, x.shape()));
        out
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (argmax, [n, c, h, w]) = self.cache.take().expect("maxpool backward without forward");
        assert_eq!(argmax.len(), dy.data.len());
        let mut dx = Tensor::zeros(n, c, h, w);
        for (g, idx) in dy.data.iter().zip(&argmax) {
            dx.data[*idx] += *g;
        }
        dx
    }
}

pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.plane()..(nc + 1) * x.plane()];
        let dst = &mut out.data[nc * oh * ow..(nc + 1) * oh * ow];
        for y in 0..oh {
            let srow = &src[(y / 2) * x.w..(y / 2 + 1) * x.w];
            for (xx, v) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *v = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    assert!(dy.h % 2 == 0 && dy.w % 2 == 0);
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.plane()..(nc + 1) * dy.plane()];
        let dst = &mut dx.data[nc * h * w..(nc + 1) * h * w];
        for y in 0..dy.h {
            for x in 0..dy.w {
                dst[(y / 2) * w + x / 2] += src[y * dy.w + x];
            }
        }
    }
    dx
}

/// Affine map on `[N, in, 1, 1]` tensors.
pub struct Linear<T> {
    pub in_f: usize,
    pub out_f: usize,
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_f: usize, out_f: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_f as f64).sqrt();
        Self {
            in_f,
            out_f,
            weight: Param::uniform(&[out_f, in_f], bound, rng),
            bias: Param::zeros(&[out_f]),
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.sample_len(), self.in_f, "linear: input width mismatch");
        let mut out = Tensor::zeros(x.n, self.out_f, 1, 1);
        for i in 0..x.n {
            out.sample_mut(i).copy_from_slice(&self.bias.value);
        }
        T::gemm(
            x.n,
            self.in_f,
            self.out_f,
            T::one(),
            &x.data,
            self.in_f,
            1,
            &self.weight.value,
            1,
            self.in_f,
            T::one(),
            &mut out.data,
            self.out_f,
            1,
        );
        out
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let out = self.infer(x);
        self.cache = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.take().expect("linear backward without forward");
        for i in 0..dy.n {
            for (b, g) in self.bias.grad.iter_mut().zip(dy.sample(i)) {
                *b += *g;
            }
        }
        // dW[out, in] += dYᵀ · X
        T::gemm(
            self.out_f,
            dy.n,
            self.in_f,
            T::one(),
            &dy.data,
            1,
            self.out_f,
            &x.data,
            self.in_f,
            1,
            T::one(),
            &mut self.weight.grad,
            self.in_f,
            1,
        );
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        T::gemm(
            dy.n,
            self.out_f,
            self.in_f,
            T::one(),
            &dy.data,
            self.out_f,
            1,
            &self.weight.value,
            self.in_f,
            1,
            T::zero(),
            &mut dx.data,
            self.in_f,
            1,
        );
        dx
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
