use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Image, ToyModel};
use super::{RegressorError, Result};
use crate::geometry::{random_rotation, random_unit_vector, DirectionalPose, GeometryError, Pose};
use crate::pipeline::{ProviderError, RelativePoseProvider};
use crate::synthetic::derive_seed;

/// Two images and the ground-truth `relative_pose(pose₁, pose₂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub image1: Image,
    pub image2: Image,
    pub relative: Pose,
}

/// Seeded textured image: a per-channel linear gradient with a few discs and
/// rectangles painted over it. Values lie in `[-0.5, 0.5]`.
pub fn procedural_image(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Array3::zeros((height, width, 3));
    let (h, w) = (height.max(1) as f64, width.max(1) as f64);
    for ch in 0..3 {
        let base: f64 = rng.random_range(0.2..0.8);
        let gy: f64 = rng.random_range(-0.3..0.3);
        let gx: f64 = rng.random_range(-0.3..0.3);
        for y in 0..height {
            for x in 0..width {
                img[(y, x, ch)] = base + gy * (y as f64 / h - 0.5) + gx * (x as f64 / w - 0.5);
            }
        }
    }
    for _ in 0..4 {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random());
        let cy = rng.random_range(0.0..h);
        let cx = rng.random_range(0.0..w);
        let ry = rng.random_range(0.1..0.35) * h;
        let rx = rng.random_range(0.1..0.35) * w;
        let disc = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disc {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for (ch, c) in color.iter().enumerate() {
                        img[(y, x, ch)] = *c;
                    }
                }
            }
        }
    }
    img.mapv_inplace(|v: f64| v.clamp(0.0, 1.0) - 0.5);
    img
}

/// `n` pairs of procedural images with uniformly random relative rotations
/// and translations of length in `[0.5, 2)`.
pub fn synthetic_pairs(n: usize, height: usize, width: usize, seed: u64) -> Vec<TrainingPair> {
    (0..n as u64)
        .map(|i| {
            let s = derive_seed(seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let rotation = random_rotation(&mut rng);
            let t = random_unit_vector(&mut rng) * rng.random_range(0.5..2.0);
            TrainingPair {
                image1: procedural_image(height, width, derive_seed(s, 1)),
                image2: procedural_image(height, width, derive_seed(s, 2)),
                relative: Pose::new(rotation, t),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(learning_rate: f64, n: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

/// Mean batch loss recorded before each update, plus once after the last.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss_r: f64,
    pub loss_t: f64,
}

impl TraceRow {
    pub fn total(&self) -> f64 {
        self.loss_r + self.loss_t
    }
}

/// Runs `steps` Adam updates on the mean batch loss and returns `steps + 1`
/// trace rows.
pub fn train_toy(
    model: &mut ToyModel,
    batch: &[TrainingPair],
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<TraceRow>> {
    if !(learning_rate.is_finite() && learning_rate >= 0.0) {
        return Err(RegressorError::InvalidLearningRate(learning_rate));
    }
    let mut adam = Adam::new(learning_rate, model.parameter_count());
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let evaluated = if step < steps {
            model.batch_loss_grad(batch).map(|(l, g)| (l, Some(g)))
        } else {
            model.batch_loss(batch).map(|l| (l, None))
        };
        let (loss, grad) = match evaluated {
            Err(RegressorError::Geometry(GeometryError::NonFinite)) => {
                return Err(RegressorError::NonFiniteLoss { step })
            }
            other => other?,
        };
        if !loss.total().is_finite() {
            return Err(RegressorError::NonFiniteLoss { step });
        }
        trace.push(TraceRow {
            step,
            loss_r: loss.rotation,
            loss_t: loss.translation,
        });
        if step % 100 == 0 {
            log::debug!(
                "step {step}: loss_R {:.6} loss_t {:.6}",
                loss.rotation,
                loss.translation
            );
        }
        if let Some(g) = grad {
            adam.step(model.parameters_mut(), &g);
        }
    }
    Ok(trace)
}

pub fn write_trace_csv(trace: &[TraceRow], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss_R,loss_t")?;
    for row in trace {
        writeln!(out, "{},{},{}", row.step, row.loss_r, row.loss_t)?;
    }
    out.flush()
}

/// Relative poses predicted by a toy model from images keyed by id.
pub struct ToyModelProvider<'a> {
    pub model: &'a ToyModel,
    pub images: &'a HashMap<String, Image>,
}

impl RelativePoseProvider for ToyModelProvider<'_> {
    fn relative_pose(&self, query_id: &str, db_id: &str) -> Result<DirectionalPose, ProviderError> {
        let missing = || ProviderError::Missing {
            query: query_id.to_owned(),
            database: db_id.to_owned(),
        };
        let q = self.images.get(query_id).ok_or_else(missing)?;
        let d = self.images.get(db_id).ok_or_else(missing)?;
        self.model
            .forward_pair(q, d)
            .map(|(p, _)| p.pose)
            .map_err(|e| ProviderError::Failed(e.to_string()))
    }
}
