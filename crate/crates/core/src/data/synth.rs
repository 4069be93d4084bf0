//! Procedurally generated image-classification data.
//!
//! Each class owns a fixed smooth prototype (Gaussian blobs plus sinusoid
//! gratings drawn from a class-seeded RNG); each sample is a shifted,
//! amplitude-jittered, noise-corrupted copy. Every sample is generated from
//! its own counter-derived RNG, so datasets are reproducible element-wise and
//! independent of generation order.

use super::{Dataset, DatasetManifest, DatasetName};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// (channels, height, width)
    pub shape: (usize, usize, usize),
    pub train_size: usize,
    pub test_size: usize,
    /// Per-pixel Gaussian noise. Larger values make samples individually
    /// memorizable, which is what the membership-inference overfit runs need.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 10,
            shape: (1, 28, 28),
            train_size: 5000,
            test_size: 1000,
            noise_sigma: 0.35,
            seed: 7,
        }
    }
}

fn mix(seed: u64, tag: u64, i: u64) -> u64 {
    // splitmix64 over the packed inputs
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(i.wrapping_add(1).wrapping_mul(0x94d049bb133111eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

struct Prototype {
    // one plane per channel
    planes: Vec<Vec<f64>>,
}

fn class_prototype(spec: &SynthSpec, class: usize) -> Prototype {
    let (c, h, w) = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0xC1A55, class as u64));
    let mut planes = Vec::with_capacity(c);
    for _ in 0..c {
        let mut plane = vec![0.0f64; h * w];
        // three blobs
        for _ in 0..3 {
            let cy = rng.random_range(0.15..0.85) * h as f64;
            let cx = rng.random_range(0.15..0.85) * w as f64;
            let sy = rng.random_range(0.08..0.22) * h as f64;
            let sx = rng.random_range(0.08..0.22) * w as f64;
            let amp = rng.random_range(0.6..1.2);
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 - cy) / sy;
                    let dx = (x as f64 - cx) / sx;
                    plane[y * w + x] += amp * (-0.5 * (dy * dy + dx * dx)).exp();
                }
            }
        }
        // two gratings
        for _ in 0..2 {
            let fy = rng.random_range(-3.0..3.0) / h as f64;
            let fx = rng.random_range(-3.0..3.0) / w as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.15..0.4);
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] += amp
                        * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + phase).sin();
                }
            }
        }
        planes.push(plane);
    }
    Prototype { planes }
}

fn render_sample(
    spec: &SynthSpec,
    proto: &Prototype,
    split_tag: u64,
    index: u64,
    out: &mut [f64],
) {
    let (c, h, w) = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, split_tag, index));
    let dy = rng.random_range(-3i64..=3);
    let dx = rng.random_range(-3i64..=3);
    let scale = rng.random_range(0.85..1.15);
    for ci in 0..c {
        let plane = &proto.planes[ci];
        let base = ci * h * w;
        for y in 0..h {
            let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
            for x in 0..w {
                let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
                let noise: f64 = StandardNormal.sample(&mut rng);
                out[base + y * w + x] = scale * plane[sy * w + sx] + spec.noise_sigma * noise;
            }
        }
    }
}

/// Generate train and test sets plus a manifest. Deterministic per spec.
pub fn generate<F: Scalar>(spec: &SynthSpec) -> Result<(Dataset<F>, Dataset<F>, DatasetManifest)> {
    if spec.num_classes < 2 {
        return Err(Error::argument("synthetic data needs at least 2 classes"));
    }
    if spec.train_size == 0 || spec.test_size == 0 {
        return Err(Error::argument("synthetic split sizes must be positive"));
    }
    let (c, h, w) = spec.shape;
    let per = c * h * w;
    let protos: Vec<Prototype> = (0..spec.num_classes)
        .map(|k| class_prototype(spec, k))
        .collect();

    let render_split = |tag: u64, n: usize| -> (Vec<f64>, Vec<usize>) {
        let mut pixels = vec![0.0f64; n * per];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.num_classes;
            labels.push(class);
            render_sample(spec, &protos[class], tag, i as u64, &mut pixels[i * per..(i + 1) * per]);
        }
        (pixels, labels)
    };
    let (train_px, train_labels) = render_split(0x7124, spec.train_size);
    let (test_px, test_labels) = render_split(0x7e57, spec.test_size);

    // per-channel standardization with training statistics
    let mut mean = vec![0.0f64; c];
    let mut std = vec![0.0f64; c];
    let plane = h * w;
    for ci in 0..c {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for ni in 0..spec.train_size {
            let base = ni * per + ci * plane;
            for &v in &train_px[base..base + plane] {
                sum += v;
                sum_sq += v * v;
            }
        }
        let n = (spec.train_size * plane) as f64;
        mean[ci] = sum / n;
        std[ci] = ((sum_sq / n - mean[ci] * mean[ci]).max(1e-12)).sqrt();
    }
    let build = |pixels: Vec<f64>, labels: Vec<usize>| {
        let n = labels.len();
        let mut images = Array4::<F>::zeros((n, c, h, w));
        let out = images.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let base = ni * per + ci * plane;
                for k in 0..plane {
                    out[base + k] = F::cast((pixels[base + k] - mean[ci]) / std[ci]);
                }
            }
        }
        Dataset { images, labels }
    };
    let manifest = DatasetManifest {
        name: DatasetName::Synthetic,
        input_shape: spec.shape,
        num_classes: spec.num_classes,
        train_size: spec.train_size,
        test_size: spec.test_size,
    };
    Ok((build(train_px, train_labels), build(test_px, test_labels), manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec {
            train_size: 40,
            test_size: 20,
            ..SynthSpec::default()
        };
        let (a_train, a_test, _) = generate::<f32>(&spec).unwrap();
        let (b_train, b_test, _) = generate::<f32>(&spec).unwrap();
        assert_eq!(a_train.labels, b_train.labels);
        assert_eq!(a_train.images, b_train.images);
        assert_eq!(a_test.images, b_test.images);
    }

    #[test]
    fn train_and_test_differ() {
        let spec = SynthSpec {
            train_size: 20,
            test_size: 20,
            ..SynthSpec::default()
        };
        let (train, test, manifest) = generate::<f32>(&spec).unwrap();
        assert_eq!(manifest.num_classes, 10);
        assert_eq!(train.labels[..10], test.labels[..10]); // same balanced labeling
        assert_ne!(train.images, test.images); // different draws
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut spec = SynthSpec::default();
        spec.num_classes = 1;
        assert!(generate::<f32>(&spec).is_err());
        let mut spec = SynthSpec::default();
        spec.train_size = 0;
        assert!(generate::<f32>(&spec).is_err());
    }
}
