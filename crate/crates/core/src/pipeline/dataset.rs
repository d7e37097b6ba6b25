//! Synthetic dataset generation.
//!
//! Three kinds: `task_n` (inputs are noise images, targets are a frozen
//! random net's outputs — the task's complexity order is that net's ReLU
//! count), `blobs` (class-mean patterns plus noise, linearly separable),
//! and `rings` (Gaussian bumps placed on class-indexed radii, requiring a
//! nonlinear decision rule). Everything is a pure function of the spec.

use crate::error::{FcxError, Result};
use crate::tensor::Tensor;
use crate::zoo::build_task_net;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    TaskN { n: usize, task_seed: u64, output_shape: Vec<usize> },
    Blobs { classes: usize, spread: f64 },
    Rings { classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_test: usize,
    pub input_shape: Vec<usize>,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn classes(&self) -> Option<usize> {
        match &self.kind {
            DatasetKind::Blobs { classes, .. } | DatasetKind::Rings { classes } => Some(*classes),
            DatasetKind::TaskN { .. } => None,
        }
    }
}

/// Ground truth carried by a dataset.
#[derive(Debug, Clone)]
pub enum Targets {
    Labels { train: Vec<usize>, test: Vec<usize>, classes: usize },
    Tensors { train: Tensor, test: Tensor },
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train_x: Tensor,
    pub test_x: Tensor,
    pub targets: Targets,
}

impl Dataset {
    pub fn train_task_targets(&self) -> crate::attribution::TaskTargets {
        match &self.targets {
            Targets::Labels { train, .. } => {
                crate::attribution::TaskTargets::Labels(train.clone())
            }
            Targets::Tensors { train, .. } => crate::attribution::TaskTargets::Tensors(train.clone()),
        }
    }

    pub fn test_task_targets(&self) -> crate::attribution::TaskTargets {
        match &self.targets {
            Targets::Labels { test, .. } => crate::attribution::TaskTargets::Labels(test.clone()),
            Targets::Tensors { test, .. } => crate::attribution::TaskTargets::Tensors(test.clone()),
        }
    }
}

fn noise_images(rng: &mut ChaCha20Rng, n: usize, shape: &[usize]) -> Result<Tensor> {
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n * per);
    for _ in 0..n * per {
        data.push(StandardNormal.sample(rng));
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Tensor::from_vec(&full, data)
}

fn render_bump(img: &mut [f64], h: usize, w: usize, cy: f64, cx: f64, sigma: f64) {
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            img[y * w + x] += (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

/// Deterministic train/test generation; the two splits are drawn from
/// disjoint sections of one seeded stream.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.n_train == 0 || spec.n_test == 0 {
        return Err(FcxError::EmptyInput("dataset sizes must be >= 1"));
    }
    if spec.input_shape.len() != 3 {
        return Err(FcxError::InvalidShape(format!(
            "dataset input shape must be [c,h,w], got {:?}",
            spec.input_shape
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let (c, h, w) = (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
    match &spec.kind {
        DatasetKind::TaskN { n, task_seed, output_shape } => {
            let net = build_task_net(*n, *task_seed, &spec.input_shape, output_shape)?;
            let train_x = noise_images(&mut rng, spec.n_train, &spec.input_shape)?;
            let test_x = noise_images(&mut rng, spec.n_test, &spec.input_shape)?;
            let train_y = net.forward(&train_x)?;
            let test_y = net.forward(&test_x)?;
            Ok(Dataset {
                spec: spec.clone(),
                train_x,
                test_x,
                targets: Targets::Tensors { train: train_y, test: test_y },
            })
        }
        DatasetKind::Blobs { classes, spread } => {
            if *classes < 2 {
                return Err(FcxError::InvalidShape("blobs needs >= 2 classes".into()));
            }
            let per: usize = spec.input_shape.iter().product();
            let patterns: Vec<Vec<f64>> = (0..*classes)
                .map(|_| (0..per).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let mut make = |count: usize| -> Result<(Tensor, Vec<usize>)> {
                let mut data = Vec::with_capacity(count * per);
                let mut labels = Vec::with_capacity(count);
                for i in 0..count {
                    let cls = i % classes;
                    for j in 0..per {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        data.push(patterns[cls][j] + spread * noise);
                    }
                    labels.push(cls);
                }
                let mut full = vec![count];
                full.extend_from_slice(&spec.input_shape);
                Ok((Tensor::from_vec(&full, data)?, labels))
            };
            let (train_x, train_l) = make(spec.n_train)?;
            let (test_x, test_l) = make(spec.n_test)?;
            Ok(Dataset {
                spec: spec.clone(),
                train_x,
                test_x,
                targets: Targets::Labels { train: train_l, test: test_l, classes: *classes },
            })
        }
        DatasetKind::Rings { classes } => {
            if *classes < 2 {
                return Err(FcxError::InvalidShape("rings needs >= 2 classes".into()));
            }
            if c != 1 {
                return Err(FcxError::InvalidShape("rings renders single-channel images".into()));
            }
            let r_max = (h.min(w) as f64) / 2.0 - 2.0;
            let mut make = |count: usize| -> Result<(Tensor, Vec<usize>)> {
                let mut data = Vec::with_capacity(count * h * w);
                let mut labels = Vec::with_capacity(count);
                for i in 0..count {
                    let cls = i % classes;
                    let radius = (cls + 1) as f64 / *classes as f64 * r_max;
                    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let jitter: f64 = rng.gen_range(-0.3..0.3);
                    let cy = h as f64 / 2.0 + (radius + jitter) * theta.sin();
                    let cx = w as f64 / 2.0 + (radius + jitter) * theta.cos();
                    let mut img = vec![0.0; h * w];
                    render_bump(&mut img, h, w, cy, cx, 1.0);
                    for v in img.iter_mut() {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        *v += 0.02 * noise;
                    }
                    data.extend_from_slice(&img);
                    labels.push(cls);
                }
                let mut full = vec![count];
                full.extend_from_slice(&spec.input_shape);
                Ok((Tensor::from_vec(&full, data)?, labels))
            };
            let (train_x, train_l) = make(spec.n_train)?;
            let (test_x, test_l) = make(spec.n_test)?;
            Ok(Dataset {
                spec: spec.clone(),
                train_x,
                test_x,
                targets: Targets::Labels { train: train_l, test: test_l, classes: *classes },
            })
        }
    }
}
