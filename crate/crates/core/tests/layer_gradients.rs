//! Finite-difference checks of every layer's backward pass in double precision.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spoofcue::classifier::{Classifier, ClassifierConfig};
use spoofcue::nn::{BasicBlock, BatchNorm2d, Conv2d, DecoderBlock, Linear, MaxPool2d, Module, Padding, Tanh, VisitFn};
use spoofcue::tensor::Tensor;

use common::rel_err;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

struct NoParams;

impl Module<f64> for NoParams {
    fn visit(&mut self, _: &str, _: &mut VisitFn<'_, f64>) {}
}

/// Checks input and parameter gradients of `L = <f(x), r>` for a random `r`.
fn check<M: Module<f64>>(
    m: &mut M,
    x: &Tensor<f64>,
    fwd: impl Fn(&mut M, &Tensor<f64>) -> Tensor<f64>,
    bwd: impl Fn(&mut M, &Tensor<f64>) -> Tensor<f64>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let y = fwd(m, x);
    let r = random(&mut rng, y.n, y.c, y.h, y.w);
    m.zero_grad();
    let dx = bwd(m, &r);
    assert_eq!(dx.shape(), x.shape());

    let loss = |m: &mut M, x: &Tensor<f64>| dot(&fwd(m, x), &r);

    let mut num = Vec::with_capacity(x.data.len());
    for i in 0..x.data.len() {
        let mut xp = x.clone();
        xp.data[i] += H;
        let up = loss(m, &xp);
        xp.data[i] -= 2.0 * H;
        let down = loss(m, &xp);
        num.push((up - down) / (2.0 * H));
    }
    let e = rel_err(&dx.data, &num);
    assert!(e < TOL, "input gradient relative error {e:e}");

    let mut names = Vec::new();
    m.visit("", &mut |n, p| {
        if p.trainable {
            names.push((n.to_string(), p.grad.clone()));
        }
    });
    for (name, grad) in names {
        let mut num = Vec::with_capacity(grad.len());
        for i in 0..grad.len() {
            let shift = |m: &mut M, d: f64| {
                m.visit("", &mut |n, p| {
                    if n == name {
                        p.value[i] += d;
                    }
                })
            };
            shift(m, H);
            let up = loss(m, x);
            shift(m, -2.0 * H);
            let down = loss(m, x);
            shift(m, H);
            num.push((up - down) / (2.0 * H));
        }
        let e = rel_err(&grad, &num);
        assert!(e < TOL, "{name}: relative error {e:e}");
    }
}

#[test]
fn conv_strided_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut conv = Conv2d::<f64>::square(3, 4, 3, 2, 1, true, &mut rng);
    let x = random(&mut rng, 2, 3, 7, 6);
    check(&mut conv, &x, |m, x| m.forward(x), |m, dy| m.backward(dy));
}

#[test]
fn conv_asymmetric_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut conv = Conv2d::<f64>::new(2, 3, 2, 2, 1, Padding::trailing(1), true, &mut rng);
    let x = random(&mut rng, 2, 2, 4, 5);
    check(&mut conv, &x, |m, x| m.forward(x), |m, dy| m.backward(dy));
}

#[test]
fn batchnorm_training_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bn = BatchNorm2d::<f64>::new(3);
    bn.visit("", &mut |n, p| {
        if n == "weight" || n == "bias" {
            for v in p.value.iter_mut() {
                *v = rng.random_range(0.5..1.5);
            }
        }
    });
    let x = random(&mut rng, 3, 3, 4, 4);
    check(&mut bn, &x, |m, x| m.forward(x), |m, dy| m.backward(dy));
}

#[test]
fn maxpool_and_tanh() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, 2, 2, 7, 7);
    let pool = std::cell::RefCell::new(MaxPool2d::new(3, 2, 1));
    check(
        &mut NoParams,
        &x,
        |_, x| pool.borrow_mut().forward(x),
        |_, dy| pool.borrow_mut().backward(dy),
    );
    let tanh = std::cell::RefCell::new(Tanh::<f64>::new());
    check(
        &mut NoParams,
        &x,
        |_, x| tanh.borrow_mut().forward(x),
        |_, dy| tanh.borrow_mut().backward(dy),
    );
}

#[test]
fn linear_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut fc = Linear::<f64>::new(6, 3, &mut rng);
    let x = random(&mut rng, 4, 6, 1, 1);
    check(&mut fc, &x, |m, x| m.forward(x), |m, dy| m.backward(dy));
}

#[test]
fn residual_block_with_downsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut block = BasicBlock::<f64>::new(3, 4, 2, &mut rng);
    let x = random(&mut rng, 2, 3, 6, 6);
    check(&mut block, &x, |m, x| m.forward(x), |m, dy| m.backward(dy));
}

#[test]
fn decoder_block_with_and_without_skip() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut plain = DecoderBlock::<f64>::new(4, 0, 3, &mut rng);
    let x = random(&mut rng, 2, 4, 3, 3);
    check(&mut plain, &x, |m, x| m.forward(x, None), |m, dy| m.backward(dy).0);

    let mut skipped = DecoderBlock::<f64>::new(4, 2, 3, &mut rng);
    let skip = random(&mut rng, 2, 2, 6, 6);
    check(
        &mut skipped,
        &x,
        |m, x| m.forward(x, Some(&skip)),
        |m, dy| m.backward(dy).0,
    );
    // gradient with respect to the skip input
    check(
        &mut skipped,
        &skip,
        |m, s| m.forward(&x, Some(s)),
        |m, dy| m.backward(dy).1.expect("skip gradient"),
    );
}

#[test]
fn classifier_logits_on_16px_input() {
    let cfg = ClassifierConfig {
        backbone_widths: [4, 8, 8, 8],
        ..Default::default()
    };
    let mut cls = Classifier::<f64>::build(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, 3, 3, 16, 16);
    check(
        &mut cls,
        &x,
        |m, x| Tensor::from_vec(x.n, 1, 1, 1, m.forward(x).unwrap()),
        |m, dy| m.backward(&dy.data),
    );
}
