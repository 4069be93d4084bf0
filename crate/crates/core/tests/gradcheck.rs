//! Finite-difference verification of the layer backward passes on toy models
//! (cross-entropy end to end; the unlearning losses have their own checks in
//! the acceptance suite).

mod common;

use common::{fd_input_grad, fd_param_grad, random_batch, rel_err, rel_err4};
use fedunlearn::nn::layers::{BatchNorm2d, BnMode, Layer, MaxPool2d, ResidualBlock};
use fedunlearn::nn::ops::cross_entropy_mean;
use fedunlearn::nn::{init, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv_layer(rng: &mut ChaCha8Rng, i: usize, o: usize, k: usize, pad: usize) -> Layer<f64> {
    Layer::Conv2d(fedunlearn::nn::layers::Conv2d {
        weight: init::conv_weight(rng, o, i, k, k),
        bias: init::bias(rng, o, i * k * k),
        stride: 1,
        pad,
    })
}

fn linear_layer(rng: &mut ChaCha8Rng, i: usize, o: usize) -> Layer<f64> {
    Layer::Linear(fedunlearn::nn::layers::Linear {
        weight: init::linear_weight(rng, o, i),
        bias: init::bias(rng, o, i),
    })
}

/// conv-relu-pool-conv-relu-flatten-linear, 129 parameters.
fn toy_cnn(seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv_layer(&mut rng, 1, 2, 3, 0),
        Layer::ReLU,
        Layer::MaxPool2d(MaxPool2d { k: 2, stride: 2 }),
        conv_layer(&mut rng, 2, 3, 3, 0),
        Layer::ReLU,
        Layer::Flatten,
        linear_layer(&mut rng, 12, 4),
    ];
    Model::custom(4, (1, 10, 10), layers, 3, 3)
}

/// stem conv-bn-relu, one residual block, gap, linear; exercises batch norm
/// in both modes and the shortcut path.
fn toy_resnet(seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = ResidualBlock {
        path: vec![
            conv_layer(&mut rng, 4, 4, 3, 1),
            Layer::BatchNorm2d(BatchNorm2d::new(4)),
            Layer::ReLU,
            conv_layer(&mut rng, 4, 4, 3, 1),
            Layer::BatchNorm2d(BatchNorm2d::new(4)),
        ],
        shortcut: vec![],
    };
    let layers = vec![
        conv_layer(&mut rng, 1, 4, 3, 1),
        Layer::BatchNorm2d(BatchNorm2d::new(4)),
        Layer::ReLU,
        Layer::Residual(block),
        Layer::GlobalAvgPool,
        linear_layer(&mut rng, 4, 3),
    ];
    Model::custom(3, (1, 8, 8), layers, 3, 4)
}

/// residual block with a projection shortcut (stride 2, channel change).
fn toy_resnet_projection(seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = ResidualBlock {
        path: vec![
            Layer::Conv2d(fedunlearn::nn::layers::Conv2d {
                weight: init::conv_weight(&mut rng, 4, 2, 3, 3),
                bias: init::bias(&mut rng, 4, 2 * 9),
                stride: 2,
                pad: 1,
            }),
            Layer::BatchNorm2d(BatchNorm2d::new(4)),
            Layer::ReLU,
            conv_layer(&mut rng, 4, 4, 3, 1),
            Layer::BatchNorm2d(BatchNorm2d::new(4)),
        ],
        shortcut: vec![
            Layer::Conv2d(fedunlearn::nn::layers::Conv2d {
                weight: init::conv_weight(&mut rng, 4, 2, 1, 1),
                bias: init::bias(&mut rng, 4, 2),
                stride: 2,
                pad: 0,
            }),
            Layer::BatchNorm2d(BatchNorm2d::new(4)),
        ],
    };
    let layers = vec![
        conv_layer(&mut rng, 1, 2, 3, 1),
        Layer::ReLU,
        Layer::Residual(block),
        Layer::GlobalAvgPool,
        linear_layer(&mut rng, 4, 3),
    ];
    Model::custom(3, (1, 8, 8), layers, 2, 4)
}

fn ce_loss(model: &mut Model<f64>, x: &ndarray::Array4<f64>, labels: &[usize], mode: BnMode) -> f64 {
    let tape = model.forward_tape(x, mode).unwrap();
    cross_entropy_mean(&tape.logits, labels).0
}

#[test]
fn toy_cnn_param_grad_matches_fd() {
    let mut model = toy_cnn(3);
    let x = random_batch(&model, 3, 17);
    let labels = vec![0usize, 2, 3];
    let tape = model.forward_tape(&x, BnMode::Frozen).unwrap();
    let (_, dlogits) = cross_entropy_mean(&tape.logits, &labels);
    let analytic = model.param_grad(&tape, &dlogits);
    let fd = fd_param_grad(
        &mut model,
        &mut |m| ce_loss(m, &x, &labels, BnMode::Frozen),
        1e-6,
    );
    assert!(
        rel_err(&analytic, &fd) < 1e-4,
        "rel err {}",
        rel_err(&analytic, &fd)
    );
}

#[test]
fn toy_cnn_input_grad_matches_fd() {
    let mut model = toy_cnn(5);
    let x = random_batch(&model, 2, 23);
    let labels = vec![1usize, 3];
    let tape = model.forward_tape(&x, BnMode::Frozen).unwrap();
    let (_, dlogits) = cross_entropy_mean(&tape.logits, &labels);
    let analytic = model.input_grad(&tape, &dlogits);
    let mut model2 = toy_cnn(5);
    let fd = fd_input_grad(
        &x,
        &mut |xp| ce_loss(&mut model2, xp, &labels, BnMode::Frozen),
        1e-6,
    );
    assert!(
        rel_err4(&analytic, &fd) < 1e-4,
        "rel err {}",
        rel_err4(&analytic, &fd)
    );
}

#[test]
fn resnet_toy_param_grad_matches_fd_frozen_and_train() {
    for mode in [BnMode::Frozen, BnMode::Train] {
        let mut model = toy_resnet(11);
        let x = random_batch(&model, 4, 31);
        let labels = vec![0usize, 1, 2, 0];
        let tape = model.forward_tape(&x, mode).unwrap();
        let (_, dlogits) = cross_entropy_mean(&tape.logits, &labels);
        let analytic = model.param_grad(&tape, &dlogits);
        // rebuild so running-stat updates from the tape pass don't shift the
        // frozen-mode loss surface
        let mut fresh = toy_resnet(11);
        let fd = fd_param_grad(&mut fresh, &mut |m| ce_loss(m, &x, &labels, mode), 1e-6);
        let e = rel_err(&analytic, &fd);
        assert!(e < 1e-4, "mode {mode:?}: rel err {e}");
    }
}

#[test]
fn projection_shortcut_grads_match_fd() {
    let mut model = toy_resnet_projection(7);
    let x = random_batch(&model, 3, 41);
    let labels = vec![2usize, 0, 1];
    let tape = model.forward_tape(&x, BnMode::Frozen).unwrap();
    let (_, dlogits) = cross_entropy_mean(&tape.logits, &labels);
    let analytic = model.param_grad(&tape, &dlogits);
    let mut fresh = toy_resnet_projection(7);
    let fd = fd_param_grad(
        &mut fresh,
        &mut |m| ce_loss(m, &x, &labels, BnMode::Frozen),
        1e-6,
    );
    let e = rel_err(&analytic, &fd);
    assert!(e < 1e-4, "rel err {e}");

    let dx = model.input_grad(&tape, &dlogits);
    let mut fresh = toy_resnet_projection(7);
    let fdx = fd_input_grad(
        &x,
        &mut |xp| ce_loss(&mut fresh, xp, &labels, BnMode::Frozen),
        1e-6,
    );
    let e = rel_err4(&dx, &fdx);
    assert!(e < 1e-4, "input rel err {e}");
}
