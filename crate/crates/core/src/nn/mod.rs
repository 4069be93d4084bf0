//! Differentiable classifiers with flat parameter access and a declared
//! final-conv feature tap.

pub mod ckpt;
pub mod init;
pub mod layers;
pub mod ops;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use layers::{
    Act, BatchNorm2d, BnMode, Conv2d, Layer, LayerCache, Linear, MaxPool2d, NamedTensor,
    ResidualBlock,
};
use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Supported classifier architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Lenet5,
    Resnet32,
    Resnet56,
    /// Hand-assembled layer stack (see [`Model::custom`]); not constructible
    /// through [`build_model`].
    Custom,
}

impl Arch {
    pub fn parse(name: &str) -> Result<Arch> {
        match name {
            "lenet5" => Ok(Arch::Lenet5),
            "resnet32" => Ok(Arch::Resnet32),
            "resnet56" => Ok(Arch::Resnet56),
            other => Err(Error::argument(format!("unknown architecture `{other}`"))),
        }
    }

    /// Canonical input shape (channels, height, width).
    pub fn default_input(&self) -> (usize, usize, usize) {
        match self {
            Arch::Lenet5 | Arch::Custom => (1, 28, 28),
            Arch::Resnet32 | Arch::Resnet56 => (3, 32, 32),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::Lenet5 => "lenet5",
            Arch::Resnet32 => "resnet32",
            Arch::Resnet56 => "resnet56",
            Arch::Custom => "custom",
        }
    }
}

/// Flat parameter vector of one model, tagged with its architecture so that
/// aggregation can reject mixed inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F: Scalar> {
    pub arch: Arch,
    pub num_classes: usize,
    pub flat: Array1<F>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// SHA-256 over the little-endian bytes; used for freeze/no-mutation checks.
    pub fn content_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut bytes = Vec::with_capacity(self.flat.len() * F::BYTES);
        for &v in self.flat.iter() {
            v.write_le(&mut bytes);
        }
        Sha256::digest(&bytes).into()
    }
}

/// Logits plus the captured final-conv feature maps for one batch.
#[derive(Clone, Debug)]
pub struct ForwardOutput<F: Scalar> {
    pub logits: Array2<F>,
    /// `[batch, C, H, W]` output of the declared final convolutional stage.
    pub final_conv_features: Array4<F>,
}

/// Per-pass caches needed by the backward walk.
pub struct Tape<F: Scalar> {
    caches: Vec<LayerCache<F>>,
    pub logits: Array2<F>,
    pub final_conv_features: Array4<F>,
}

#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    pub arch: Arch,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    layers: Vec<Layer<F>>,
    /// Index of the layer whose output is the final-conv feature map.
    tap: usize,
    tap_channels: usize,
    param_count: usize,
}

/// Build a model with freshly initialized parameters (deterministic per seed).
pub fn build_model<F: Scalar>(arch: Arch, num_classes: usize, seed: u64) -> Result<Model<F>> {
    build_model_with_input(arch, num_classes, arch.default_input(), seed)
}

/// As [`build_model`] but with an explicit input shape (the fully connected
/// stage is sized from the conv arithmetic).
pub fn build_model_with_input<F: Scalar>(
    arch: Arch,
    num_classes: usize,
    input_shape: (usize, usize, usize),
    seed: u64,
) -> Result<Model<F>> {
    if num_classes < 2 {
        return Err(Error::argument(format!(
            "num_classes must be at least 2, got {num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (layers, tap, tap_channels) = match arch {
        Arch::Lenet5 => lenet5(&mut rng, num_classes, input_shape)?,
        Arch::Resnet32 => resnet(&mut rng, num_classes, input_shape, 5)?,
        Arch::Resnet56 => resnet(&mut rng, num_classes, input_shape, 9)?,
        Arch::Custom => {
            return Err(Error::argument(
                "custom models are assembled via Model::custom".to_string(),
            ))
        }
    };
    let param_count = layers.iter().map(Layer::param_count).sum();
    Ok(Model {
        arch,
        num_classes,
        input_shape,
        layers,
        tap,
        tap_channels,
        param_count,
    })
}

fn conv<F: Scalar>(
    rng: &mut ChaCha8Rng,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Layer<F> {
    Layer::Conv2d(Conv2d {
        weight: init::conv_weight(rng, out_ch, in_ch, k, k),
        bias: init::bias(rng, out_ch, in_ch * k * k),
        stride,
        pad,
    })
}

fn linear<F: Scalar>(rng: &mut ChaCha8Rng, in_f: usize, out_f: usize) -> Layer<F> {
    Layer::Linear(Linear {
        weight: init::linear_weight(rng, out_f, in_f),
        bias: init::bias(rng, out_f, in_f),
    })
}

/// 2 conv, 2 max-pool, 2 fully connected layers; the second conv is the
/// feature tap.
fn lenet5<F: Scalar>(
    rng: &mut ChaCha8Rng,
    num_classes: usize,
    (c, h, w): (usize, usize, usize),
) -> Result<(Vec<Layer<F>>, usize, usize)> {
    let stage = |v: usize, what: &str| {
        if v < 5 {
            Err(Error::argument(format!(
                "input too small for lenet5 at {what}"
            )))
        } else {
            Ok(v - 4)
        }
    };
    let h1 = stage(h, "conv1")? / 2;
    let w1 = stage(w, "conv1")? / 2;
    let h2 = stage(h1, "conv2")? / 2;
    let w2 = stage(w1, "conv2")? / 2;
    let flat = 16 * h2 * w2;
    if flat == 0 {
        return Err(Error::argument("input too small for lenet5".to_string()));
    }
    let layers = vec![
        conv(rng, c, 6, 5, 1, 0),
        Layer::ReLU,
        Layer::MaxPool2d(MaxPool2d { k: 2, stride: 2 }),
        conv(rng, 6, 16, 5, 1, 0),
        Layer::ReLU,
        Layer::MaxPool2d(MaxPool2d { k: 2, stride: 2 }),
        Layer::Flatten,
        linear(rng, flat, 120),
        Layer::ReLU,
        linear(rng, 120, num_classes),
    ];
    Ok((layers, 3, 16))
}

fn basic_block<F: Scalar>(
    rng: &mut ChaCha8Rng,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
) -> Layer<F> {
    let path = vec![
        conv(rng, in_ch, out_ch, 3, stride, 1),
        Layer::BatchNorm2d(BatchNorm2d::new(out_ch)),
        Layer::ReLU,
        conv(rng, out_ch, out_ch, 3, 1, 1),
        Layer::BatchNorm2d(BatchNorm2d::new(out_ch)),
    ];
    let shortcut = if stride != 1 || in_ch != out_ch {
        vec![
            conv(rng, in_ch, out_ch, 1, stride, 0),
            Layer::BatchNorm2d(BatchNorm2d::new(out_ch)),
        ]
    } else {
        Vec::new()
    };
    Layer::Residual(ResidualBlock { path, shortcut })
}

/// CIFAR-style ResNet with 6n+2 weighted layers (n = blocks per stage).
/// The output of the last residual block is the feature tap.
fn resnet<F: Scalar>(
    rng: &mut ChaCha8Rng,
    num_classes: usize,
    (c, _h, _w): (usize, usize, usize),
    n: usize,
) -> Result<(Vec<Layer<F>>, usize, usize)> {
    let mut layers: Vec<Layer<F>> = vec![
        conv(rng, c, 16, 3, 1, 1),
        Layer::BatchNorm2d(BatchNorm2d::new(16)),
        Layer::ReLU,
    ];
    for _ in 0..n {
        layers.push(basic_block(rng, 16, 16, 1));
    }
    layers.push(basic_block(rng, 16, 32, 2));
    for _ in 1..n {
        layers.push(basic_block(rng, 32, 32, 1));
    }
    layers.push(basic_block(rng, 32, 64, 2));
    for _ in 1..n {
        layers.push(basic_block(rng, 64, 64, 1));
    }
    let tap = layers.len() - 1;
    layers.push(Layer::GlobalAvgPool);
    layers.push(linear(rng, 64, num_classes));
    Ok((layers, tap, 64))
}

impl<F: Scalar> Model<F> {
    /// Assemble a model from an explicit layer stack. `tap` is the index of
    /// the layer whose output acts as the final-conv feature map.
    pub fn custom(
        num_classes: usize,
        input_shape: (usize, usize, usize),
        layers: Vec<Layer<F>>,
        tap: usize,
        tap_channels: usize,
    ) -> Model<F> {
        assert!(tap < layers.len(), "tap index out of range");
        let param_count = layers.iter().map(Layer::param_count).sum();
        Model {
            arch: Arch::Custom,
            num_classes,
            input_shape,
            layers,
            tap,
            tap_channels,
            param_count,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn final_conv_channels(&self) -> usize {
        self.tap_channels
    }

    fn check_batch(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != self.input_shape {
            return Err(Error::argument(format!(
                "batch shape ({c},{h},{w}) does not match model input {:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Inference-mode logits (frozen batch-norm statistics, no caches).
    pub fn predict(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.check_batch(x)?;
        let mut act = Act::T4(x.clone());
        for layer in &self.layers {
            act = layer.infer(act);
        }
        Ok(act.t2())
    }

    /// Inference-mode forward returning logits and the final-conv features.
    pub fn forward(&self, x: &Array4<F>) -> Result<ForwardOutput<F>> {
        self.check_batch(x)?;
        let mut act = Act::T4(x.clone());
        let mut features = None;
        for (i, layer) in self.layers.iter().enumerate() {
            act = layer.infer(act);
            if i == self.tap {
                features = Some(act.t4_ref().clone());
            }
        }
        Ok(ForwardOutput {
            logits: act.t2(),
            final_conv_features: features.expect("tap index within layer range"),
        })
    }

    /// Forward pass recording per-layer caches for a subsequent backward walk.
    pub fn forward_tape(&mut self, x: &Array4<F>, mode: BnMode) -> Result<Tape<F>> {
        self.check_batch(x)?;
        let mut act = Act::T4(x.clone());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut features = None;
        let tap = self.tap;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (next, cache) = layer.forward(act, mode);
            caches.push(cache);
            act = next;
            if i == tap {
                features = Some(act.t4_ref().clone());
            }
        }
        Ok(Tape {
            caches,
            logits: act.t2(),
            final_conv_features: features.expect("tap index within layer range"),
        })
    }

    fn layer_grad_offsets(&self) -> Vec<(usize, usize)> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut pos = 0;
        for layer in &self.layers {
            let n = layer.param_count();
            offsets.push((pos, n));
            pos += n;
        }
        offsets
    }

    /// Backward from a logits gradient. Returns the flat parameter gradient
    /// (when `want_param_grad`) and the input gradient (when `want_input_grad`).
    pub fn backward(
        &self,
        tape: &Tape<F>,
        d_logits: &Array2<F>,
        want_param_grad: bool,
        want_input_grad: bool,
    ) -> (Option<Array1<F>>, Option<Array4<F>>) {
        let mut flat = if want_param_grad {
            Some(vec![F::zero(); self.param_count])
        } else {
            None
        };
        let offsets = self.layer_grad_offsets();
        let mut act = Act::T2(d_logits.clone());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let want_dx = i > 0 || want_input_grad;
            let pg = flat.as_deref_mut().map(|f: &mut [F]| {
                let (start, len) = offsets[i];
                &mut f[start..start + len]
            });
            match layer.backward(&tape.caches[i], act, pg, want_dx) {
                Some(next) => act = next,
                None => return (flat.map(Array1::from_vec), None),
            }
        }
        let d_input = if want_input_grad { Some(act.t4()) } else { None };
        (flat.map(Array1::from_vec), d_input)
    }

    /// Convenience: parameter gradient only.
    pub fn param_grad(&self, tape: &Tape<F>, d_logits: &Array2<F>) -> Array1<F> {
        self.backward(tape, d_logits, true, false)
            .0
            .expect("param grad requested")
    }

    /// Convenience: input gradient only (model parameters untouched).
    pub fn input_grad(&self, tape: &Tape<F>, d_logits: &Array2<F>) -> Array4<F> {
        self.backward(tape, d_logits, false, true)
            .1
            .expect("input grad requested")
    }

    /// Backward starting from a gradient on the final-conv feature maps.
    /// Layers after the tap receive zero gradient.
    pub fn backward_from_features(&self, tape: &Tape<F>, d_features: &Array4<F>) -> Array1<F> {
        let mut flat = vec![F::zero(); self.param_count];
        let offsets = self.layer_grad_offsets();
        let mut act = Act::T4(d_features.clone());
        for i in (0..=self.tap).rev() {
            let (start, len) = offsets[i];
            let pg = &mut flat[start..start + len];
            match self.layers[i].backward(&tape.caches[i], act, Some(pg), i > 0) {
                Some(next) => act = next,
                None => break,
            }
        }
        Array1::from_vec(flat)
    }

    /// Copy out the flat parameter vector (flatten).
    pub fn params(&self) -> ModelParams<F> {
        let mut flat = Vec::with_capacity(self.param_count);
        for layer in &self.layers {
            layer.write_params(&mut flat);
        }
        ModelParams {
            arch: self.arch,
            num_classes: self.num_classes,
            flat: Array1::from_vec(flat),
        }
    }

    /// Write a flat parameter vector back into the layer tensors (unflatten).
    pub fn set_params(&mut self, params: &ModelParams<F>) -> Result<()> {
        if params.arch != self.arch || params.num_classes != self.num_classes {
            return Err(Error::ArchMismatch(format!(
                "cannot load {}/{} params into {}/{} model",
                params.arch.name(),
                params.num_classes,
                self.arch.name(),
                self.num_classes
            )));
        }
        self.set_flat(&params.flat)
    }

    /// As [`Model::set_params`] but from a bare vector of the right length.
    pub fn set_flat(&mut self, flat: &Array1<F>) -> Result<()> {
        if flat.len() != self.param_count {
            return Err(Error::ArchMismatch(format!(
                "parameter vector has {} entries, model has {}",
                flat.len(),
                self.param_count
            )));
        }
        let src = flat.as_slice().expect("flat params must be contiguous");
        let mut pos = 0;
        for layer in &mut self.layers {
            layer.read_params(src, &mut pos);
        }
        debug_assert_eq!(pos, self.param_count);
        Ok(())
    }

    /// Clone this model and install the given parameters.
    pub fn with_params(&self, params: &ModelParams<F>) -> Result<Model<F>> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    /// All named state tensors (parameters and batch-norm running statistics).
    pub fn state_tensors(&self) -> Vec<NamedTensor<F>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.named_state(&format!("l{i}"), &mut out);
        }
        out
    }

    pub fn load_state_tensors(&mut self, tensors: &[NamedTensor<F>]) -> Result<()> {
        let map: std::collections::HashMap<String, NamedTensor<F>> = tensors
            .iter()
            .map(|t| (t.name.clone(), t.clone()))
            .collect();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer
                .load_named_state(&format!("l{i}"), &map)
                .map_err(Error::ArchMismatch)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use rand::Rng;

    fn random_batch(model: &Model<f64>, n: usize, seed: u64) -> Array4<f64> {
        let (c, h, w) = model.input_shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((n, c, h, w), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn lenet_logit_width_matches_classes() {
        let model = build_model::<f64>(Arch::Lenet5, 10, 7).unwrap();
        let x = random_batch(&model, 3, 1);
        let out = model.forward(&x).unwrap();
        assert_eq!(out.logits.dim(), (3, 10));
        assert_eq!(out.final_conv_features.dim(), (3, 16, 8, 8));
    }

    #[test]
    fn unknown_arch_rejected() {
        assert!(Arch::parse("vgg16").is_err());
        assert!(build_model::<f32>(Arch::Lenet5, 1, 0).is_err());
    }

    #[test]
    fn resnet32_has_32_weighted_layers() {
        let model = build_model::<f32>(Arch::Resnet32, 10, 0).unwrap();
        // count conv + linear layers, following the residual structure
        fn weighted(layer: &Layer<f32>) -> usize {
            match layer {
                Layer::Conv2d(_) | Layer::Linear(_) => 1,
                Layer::Residual(r) => {
                    // projection shortcuts are not counted in the 6n+2 scheme
                    r.path.iter().map(weighted).sum::<usize>()
                }
                _ => 0,
            }
        }
        let n: usize = model.layers.iter().map(weighted).sum();
        assert_eq!(n, 32);
        let m56 = build_model::<f32>(Arch::Resnet56, 100, 0).unwrap();
        let n56: usize = m56.layers.iter().map(weighted).sum();
        assert_eq!(n56, 56);
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let mut model = build_model::<f64>(Arch::Lenet5, 10, 3).unwrap();
        let p = model.params();
        assert_eq!(p.len(), model.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let random = ModelParams {
            arch: p.arch,
            num_classes: p.num_classes,
            flat: Array1::from_shape_simple_fn(p.len(), || rng.random_range(-1.0..1.0)),
        };
        model.set_params(&random).unwrap();
        assert_eq!(model.params(), random);
    }

    #[test]
    fn zero_final_layer_gives_zero_logits() {
        let mut model = build_model::<f64>(Arch::Lenet5, 10, 3).unwrap();
        let mut p = model.params();
        let n = p.len();
        // final linear layer occupies the trailing 120*10 + 10 entries
        for v in p.flat.slice_mut(ndarray::s![n - 1210..]).iter_mut() {
            *v = 0.0;
        }
        model.set_params(&p).unwrap();
        let x = random_batch(&model, 2, 5);
        let logits = model.predict(&x).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let probs = ops::softmax_rows(&logits, 1.0);
        assert!(probs.iter().all(|&v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn identical_samples_identical_logits() {
        let model = build_model::<f64>(Arch::Lenet5, 10, 9).unwrap();
        let one = random_batch(&model, 1, 2);
        let mut two = Array4::zeros((2, 1, 28, 28));
        two.index_axis_mut(Axis(0), 0).assign(&one.index_axis(Axis(0), 0));
        two.index_axis_mut(Axis(0), 1).assign(&one.index_axis(Axis(0), 0));
        let logits = model.predict(&two).unwrap();
        let a = logits.index_axis(Axis(0), 0);
        let b = logits.index_axis(Axis(0), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn batch_shape_mismatch_rejected() {
        let model = build_model::<f64>(Arch::Lenet5, 10, 9).unwrap();
        let bad = Array4::<f64>::zeros((2, 3, 28, 28));
        assert!(model.predict(&bad).is_err());
    }

    #[test]
    fn param_count_stable_across_passes() {
        let mut model = build_model::<f64>(Arch::Lenet5, 10, 9).unwrap();
        let p0 = model.param_count();
        let x = random_batch(&model, 2, 5);
        let tape = model.forward_tape(&x, BnMode::Frozen).unwrap();
        let d = Array2::from_elem((2, 10), 0.1);
        let g = model.param_grad(&tape, &d);
        assert_eq!(g.len(), p0);
        assert_eq!(model.param_count(), p0);
        assert_eq!(model.params().len(), p0);
    }

    #[test]
    fn resnet_forward_and_backward_shapes() {
        let mut model = build_model::<f32>(Arch::Resnet32, 10, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array4::from_shape_simple_fn((2, 3, 32, 32), || rng.random_range(-1.0f32..1.0));
        let tape = model.forward_tape(&x, BnMode::Train).unwrap();
        assert_eq!(tape.logits.dim(), (2, 10));
        assert_eq!(tape.final_conv_features.dim(), (2, 64, 8, 8));
        let d = Array2::from_elem((2, 10), 0.05f32);
        let (g, dx) = model.backward(&tape, &d, true, true);
        assert_eq!(g.unwrap().len(), model.param_count());
        assert_eq!(dx.unwrap().dim(), (2, 3, 32, 32));
    }
}
