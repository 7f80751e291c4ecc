//! Training problems for the simulator.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{fill_normal, stream, StreamTag};
use crate::sdelab::{project, sharpness, ManifoldProblem, DEFAULT_TOL};
use crate::{Error, Result};

/// A loss over a dataset of examples addressed by index.
pub trait Problem: Send + Sync {
    fn dim(&self) -> usize;

    /// Number of examples, or `None` for an unbounded stream of fresh ones.
    fn dataset_size(&self) -> Option<u64>;

    /// Starting parameters; may depend on the run seed.
    fn init_params(&self, seed: u64) -> Vec<f64>;

    /// Loss used for reporting (population loss where available).
    fn loss(&self, params: &[f64]) -> f64;

    /// Mean gradient over the examples in `batch`, written into `out`.
    fn grad(&self, params: &[f64], batch: &[u64], out: &mut [f64]);

    /// Top Hessian eigenvalue where the problem can compute it.
    fn sharpness(&self, _params: &[f64]) -> Option<f64> {
        None
    }
}

fn mean_example_noise(seed: u64, batch: &[u64], z: &mut [f64]) {
    z.fill(0.0);
    let mut buf = vec![0.0; z.len()];
    for &i in batch {
        fill_normal(&mut stream(seed, 0, StreamTag::ExampleNoise, i), &mut buf);
        for (a, b) in z.iter_mut().zip(&buf) {
            *a += b;
        }
    }
    let n = batch.len() as f64;
    z.iter_mut().for_each(|v| *v /= n);
}

/// `L(θ) = ½ Σ a_i (θ_i − θ*_i)²`; example `j` adds `σ ⊙ z_j` to the gradient,
/// with `z_j` a fixed standard normal vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyQuadratic {
    pub curvature: Vec<f64>,
    pub target: Vec<f64>,
    pub noise_std: Vec<f64>,
    pub init: Vec<f64>,
    pub dataset_size: Option<u64>,
    pub data_seed: u64,
}

impl NoisyQuadratic {
    pub fn new(
        curvature: Vec<f64>,
        target: Vec<f64>,
        noise_std: Vec<f64>,
        init: Vec<f64>,
        dataset_size: Option<u64>,
        data_seed: u64,
    ) -> Result<Self> {
        let d = curvature.len();
        if d == 0 {
            return Err(Error::param("curvature", "needs at least one coordinate"));
        }
        crate::error::check_shape("target", d, target.len())?;
        crate::error::check_shape("noise_std", d, noise_std.len())?;
        crate::error::check_shape("init", d, init.len())?;
        if curvature.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::param("curvature", "entries must be nonnegative"));
        }
        if noise_std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::param("noise_std", "entries must be nonnegative"));
        }
        Ok(NoisyQuadratic {
            curvature,
            target,
            noise_std,
            init,
            dataset_size,
            data_seed,
        })
    }
}

impl Problem for NoisyQuadratic {
    fn dim(&self) -> usize {
        self.curvature.len()
    }

    fn dataset_size(&self) -> Option<u64> {
        self.dataset_size
    }

    fn init_params(&self, _seed: u64) -> Vec<f64> {
        self.init.clone()
    }

    fn loss(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(&self.target)
            .zip(&self.curvature)
            .map(|((x, t), a)| a * (x - t).powi(2))
            .sum::<f64>()
    }

    fn grad(&self, p: &[f64], batch: &[u64], out: &mut [f64]) {
        mean_example_noise(self.data_seed, batch, out);
        for i in 0..p.len() {
            out[i] = self.curvature[i] * (p[i] - self.target[i]) + self.noise_std[i] * out[i];
        }
    }

    fn sharpness(&self, _p: &[f64]) -> Option<f64> {
        self.curvature.iter().copied().reduce(f64::max)
    }
}

/// Adapts a [`ManifoldProblem`] to training: example `j` contributes
/// `∇L(θ) + Σ(θ)^{1/2} z_j`. Reported sharpness is taken at Φ(θ).
pub struct NoisyManifold {
    pub problem: Box<dyn ManifoldProblem>,
    pub init: Vec<f64>,
    pub dataset_size: Option<u64>,
    pub data_seed: u64,
}

impl NoisyManifold {
    pub fn new(
        problem: Box<dyn ManifoldProblem>,
        init: Vec<f64>,
        dataset_size: Option<u64>,
        data_seed: u64,
    ) -> Result<Self> {
        crate::error::check_shape("init", problem.dim(), init.len())?;
        Ok(NoisyManifold {
            problem,
            init,
            dataset_size,
            data_seed,
        })
    }
}

impl std::fmt::Debug for NoisyManifold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NoisyManifold")
            .field("dim", &self.problem.dim())
            .field("init", &self.init)
            .field("dataset_size", &self.dataset_size)
            .finish()
    }
}

impl Problem for NoisyManifold {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn dataset_size(&self) -> Option<u64> {
        self.dataset_size
    }

    fn init_params(&self, _seed: u64) -> Vec<f64> {
        self.init.clone()
    }

    fn loss(&self, p: &[f64]) -> f64 {
        self.problem.loss(p)
    }

    fn grad(&self, p: &[f64], batch: &[u64], out: &mut [f64]) {
        let mut z = vec![0.0; p.len()];
        mean_example_noise(self.data_seed, batch, &mut z);
        self.problem.grad(p, out);
        self.problem.add_noise(p, &z, out);
    }

    fn sharpness(&self, p: &[f64]) -> Option<f64> {
        let zeta = project(self.problem.as_ref(), p, DEFAULT_TOL).into_option()?;
        sharpness(self.problem.as_ref(), &zeta).ok()
    }
}

/// One-hidden-layer tanh network with softmax cross-entropy on a synthetic
/// mixture of isotropic Gaussians whose means sit evenly on a circle.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureMlp {
    hidden: usize,
    classes: usize,
    inputs: Vec<[f64; 2]>,
    labels: Vec<usize>,
}

impl GaussianMixtureMlp {
    pub fn new(
        classes: usize,
        hidden: usize,
        dataset_size: u64,
        radius: f64,
        spread: f64,
        data_seed: u64,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::param("classes", "need at least two"));
        }
        if hidden == 0 {
            return Err(Error::param("hidden", "need at least one unit"));
        }
        if dataset_size == 0 {
            return Err(Error::param("dataset_size", "dataset is empty"));
        }
        let mut inputs = Vec::with_capacity(dataset_size as usize);
        let mut labels = Vec::with_capacity(dataset_size as usize);
        for i in 0..dataset_size {
            let c = (i % classes as u64) as usize;
            let angle = std::f64::consts::TAU * c as f64 / classes as f64;
            let mut rng = stream(data_seed, 0, StreamTag::Dataset, i);
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            inputs.push([
                radius * angle.cos() + spread * dx,
                radius * angle.sin() + spread * dy,
            ]);
            labels.push(c);
        }
        Ok(GaussianMixtureMlp {
            hidden,
            classes,
            inputs,
            labels,
        })
    }

    // Layout: W1 (hidden×2), b1 (hidden), W2 (classes×hidden), b2 (classes).
    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = 2 * self.hidden;
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.classes * self.hidden;
        (w1, b1, w2)
    }

    // Loss of one example; accumulates its gradient into `out` when given.
    fn example(
        &self,
        p: &[f64],
        i: usize,
        out: Option<&mut [f64]>,
        act: &mut [f64],
        logits: &mut [f64],
    ) -> f64 {
        let (o_b1, o_w2, o_b2) = self.offsets();
        let x = self.inputs[i];
        for j in 0..self.hidden {
            act[j] = (p[2 * j] * x[0] + p[2 * j + 1] * x[1] + p[o_b1 + j]).tanh();
        }
        for c in 0..self.classes {
            logits[c] = p[o_b2 + c]
                + (0..self.hidden)
                    .map(|j| p[o_w2 + c * self.hidden + j] * act[j])
                    .sum::<f64>();
        }
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        let label = self.labels[i];
        let loss = norm.ln() + top - logits[label];
        if let Some(g) = out {
            for c in 0..self.classes {
                let prob = (logits[c] - top).exp() / norm;
                let dl = prob - if c == label { 1.0 } else { 0.0 };
                g[o_b2 + c] += dl;
                for j in 0..self.hidden {
                    g[o_w2 + c * self.hidden + j] += dl * act[j];
                }
                logits[c] = dl;
            }
            for j in 0..self.hidden {
                let back: f64 = (0..self.classes)
                    .map(|c| logits[c] * p[o_w2 + c * self.hidden + j])
                    .sum();
                let pre = back * (1.0 - act[j] * act[j]);
                g[2 * j] += pre * x[0];
                g[2 * j + 1] += pre * x[1];
                g[o_b1 + j] += pre;
            }
        }
        loss
    }
}

impl Problem for GaussianMixtureMlp {
    fn dim(&self) -> usize {
        self.offsets().2 + self.classes
    }

    fn dataset_size(&self) -> Option<u64> {
        Some(self.inputs.len() as u64)
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        let mut rng = stream(seed, 0, StreamTag::Init, 0);
        let (o_b1, o_w2, o_b2) = self.offsets();
        let scale1: f64 = (1.0f64 / 2.0).sqrt();
        let scale2: f64 = (1.0 / self.hidden as f64).sqrt();
        for v in &mut p[..o_b1] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = scale1 * z;
        }
        for v in &mut p[o_w2..o_b2] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = scale2 * z;
        }
        p
    }

    fn loss(&self, p: &[f64]) -> f64 {
        let mut act = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.classes];
        let total: f64 = (0..self.inputs.len())
            .map(|i| self.example(p, i, None, &mut act, &mut logits))
            .sum();
        total / self.inputs.len() as f64
    }

    fn grad(&self, p: &[f64], batch: &[u64], out: &mut [f64]) {
        out.fill(0.0);
        let mut act = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.classes];
        for &i in batch {
            self.example(p, i as usize, Some(out), &mut act, &mut logits);
        }
        let n = batch.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
    }
}
