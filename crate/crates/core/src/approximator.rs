//! Minimal multilayer perceptron with analytic reverse-mode gradients.
//!
//! Parameters live in one flat vector. For every layer, in order, the flat
//! vector holds the weight matrix (shape `n_out x n_in`, row-major, so
//! `w[o * n_in + i]` connects input `i` to output `o`) followed by the
//! `n_out` biases. Hidden layers use `tanh`; the output layer is affine.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ApproxError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("tape was recorded for a different network")]
    StaleTape,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ApproxError>;

/// Weights and biases of a feed-forward network, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layer_sizes: Vec<usize>,
    pub flat: Vec<f64>,
}

/// Activations cached by one forward pass. Consumed by [`ParamSet::backward`].
#[derive(Debug, Clone)]
pub struct GradientTape {
    layer_sizes: Vec<usize>,
    /// `acts[0]` is the input, `acts[k]` the output of layer `k`.
    acts: Vec<Vec<f64>>,
}

impl GradientTape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl ParamSet {
    /// Glorot-uniform weights, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(layer_sizes, &mut rng)
    }

    pub fn init_with<R: Rng>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_shape(layer_sizes)?;
        let mut flat = Vec::with_capacity(param_count(layer_sizes));
        for w in layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            flat.extend((0..n_in * n_out).map(|_| rng.gen_range(-limit..=limit)));
            flat.extend(std::iter::repeat(0.0).take(n_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            flat,
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        Self::check_shape(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            flat: vec![0.0; param_count(layer_sizes)],
        })
    }

    pub fn from_flat(layer_sizes: &[usize], flat: Vec<f64>) -> Result<Self> {
        Self::check_shape(layer_sizes)?;
        let expected = param_count(layer_sizes);
        if flat.len() != expected {
            return Err(ApproxError::ShapeMismatch {
                expected,
                actual: flat.len(),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(ApproxError::InvalidShape("non-finite parameter".into()));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            flat,
        })
    }

    fn check_shape(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 {
            return Err(ApproxError::InvalidShape(
                "need at least an input and an output size".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(ApproxError::InvalidShape("layer size 0".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// Offsets of `(weights, biases)` for layer `k`.
    pub fn layer_offsets(&self, k: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.layer_sizes.windows(2).take(k) {
            off += w[0] * w[1] + w[1];
        }
        let (n_in, n_out) = (self.layer_sizes[k], self.layer_sizes[k + 1]);
        (off, off + n_in * n_out)
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, GradientTape)> {
        if input.len() != self.input_dim() {
            return Err(ApproxError::ShapeMismatch {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let mut acts = Vec::with_capacity(self.layer_sizes.len());
        acts.push(input.to_vec());
        let last = self.n_layers() - 1;
        let mut off = 0;
        for k in 0..self.n_layers() {
            let (n_in, n_out) = (self.layer_sizes[k], self.layer_sizes[k + 1]);
            let w = &self.flat[off..off + n_in * n_out];
            let b = &self.flat[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let x = &acts[k];
            let mut y: Vec<f64> = b.to_vec();
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *yo += dot(row, x);
            }
            if k != last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
        }
        let out = acts.last().unwrap().clone();
        Ok((
            out,
            GradientTape {
                layer_sizes: self.layer_sizes.clone(),
                acts,
            },
        ))
    }

    /// Output only, no tape.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(ApproxError::ShapeMismatch {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let last = self.n_layers() - 1;
        let mut x = input.to_vec();
        let mut off = 0;
        for k in 0..self.n_layers() {
            let (n_in, n_out) = (self.layer_sizes[k], self.layer_sizes[k + 1]);
            let w = &self.flat[off..off + n_in * n_out];
            let mut y = self.flat[off + n_in * n_out..off + n_in * n_out + n_out].to_vec();
            off += n_in * n_out + n_out;
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *yo += dot(row, &x);
            }
            if k != last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            x = y;
        }
        Ok(x)
    }

    /// Gradient of `output . output_grad` with respect to `flat`.
    pub fn backward(&self, tape: GradientTape, output_grad: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.flat.len()];
        self.backward_accumulate(tape, output_grad, &mut grad)?;
        Ok(grad)
    }

    /// Adds the parameter gradient into `grad` and returns the gradient with
    /// respect to the network input.
    pub fn backward_accumulate(
        &self,
        tape: GradientTape,
        output_grad: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        if tape.layer_sizes != self.layer_sizes || tape.acts.len() != self.layer_sizes.len() {
            return Err(ApproxError::StaleTape);
        }
        if output_grad.len() != self.output_dim() {
            return Err(ApproxError::ShapeMismatch {
                expected: self.output_dim(),
                actual: output_grad.len(),
            });
        }
        if grad.len() != self.flat.len() {
            return Err(ApproxError::ShapeMismatch {
                expected: self.flat.len(),
                actual: grad.len(),
            });
        }
        let last = self.n_layers() - 1;
        // delta: gradient w.r.t. the pre-activation of the current layer
        let mut delta = output_grad.to_vec();
        for k in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.layer_sizes[k], self.layer_sizes[k + 1]);
            if k != last {
                for (d, y) in delta.iter_mut().zip(&tape.acts[k + 1]) {
                    *d *= 1.0 - y * y;
                }
            }
            let (w_off, b_off) = self.layer_offsets(k);
            let x = &tape.acts[k];
            for o in 0..n_out {
                let d = delta[o];
                grad[b_off + o] += d;
                if d != 0.0 {
                    let g_row = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                    for (g, xi) in g_row.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            let w = &self.flat[w_off..w_off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += d * wi;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    pub fn sgd_step(&self, grad: &[f64], lr: f64) -> Result<ParamSet> {
        let mut next = self.clone();
        next.sgd_step_in_place(grad, lr)?;
        Ok(next)
    }

    pub fn sgd_step_in_place(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.flat.len() {
            return Err(ApproxError::ShapeMismatch {
                expected: self.flat.len(),
                actual: grad.len(),
            });
        }
        for (p, g) in self.flat.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        Ok(())
    }

    /// Hard copy used for target networks.
    pub fn copy_to_target(&self) -> ParamSet {
        self.clone()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string(self).map_err(|e| ApproxError::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| ApproxError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let text = fs::read_to_string(path).map_err(|e| ApproxError::Checkpoint(e.to_string()))?;
        let raw: ParamSet =
            serde_json::from_str(&text).map_err(|e| ApproxError::Checkpoint(e.to_string()))?;
        ParamSet::from_flat(&raw.layer_sizes, raw.flat)
    }
}

/// Four-lane dot product; fixed summation order keeps results reproducible
/// while letting the compiler vectorise.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn biases_start_at_zero() {
        let p = ParamSet::init(&[2, 2], 11).unwrap();
        let (_, b) = p.layer_offsets(0);
        assert_eq!(&p.flat[b..], &[0.0, 0.0]);
        assert_eq!(p.len(), 6);
    }

    #[test]
    fn init_is_seeded() {
        let a = ParamSet::init(&[3, 5, 2], 42).unwrap();
        let b = ParamSet::init(&[3, 5, 2], 42).unwrap();
        let c = ParamSet::init(&[3, 5, 2], 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_bad_shapes() {
        assert!(matches!(
            ParamSet::init(&[3], 0),
            Err(ApproxError::InvalidShape(_))
        ));
        assert!(matches!(
            ParamSet::init(&[3, 0, 1], 0),
            Err(ApproxError::InvalidShape(_))
        ));
    }

    #[test]
    fn init_weight_mean_near_zero() {
        let mut sum = 0.0;
        let mut n = 0usize;
        for seed in 0..10_000u64 {
            let p = ParamSet::init(&[64, 64], seed).unwrap();
            let (_, b) = p.layer_offsets(0);
            sum += p.flat[..b].iter().sum::<f64>();
            n += b;
        }
        assert!((sum / n as f64).abs() < 0.01);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = ParamSet::zeros(&[3, 4, 2]).unwrap();
        let (out, _) = p.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn single_layer_identity_embedding() {
        // [3, 2]: output = first two inputs
        let mut p = ParamSet::zeros(&[3, 2]).unwrap();
        p.flat[0] = 1.0;
        p.flat[4] = 1.0;
        let (out, _) = p.forward(&[0.3, -0.7, 9.0]).unwrap();
        assert_eq!(out, vec![0.3, -0.7]);
        // [2, 3]: output = input padded with zero
        let mut q = ParamSet::zeros(&[2, 3]).unwrap();
        q.flat[0] = 1.0;
        q.flat[3] = 1.0;
        let (out, _) = q.forward(&[0.3, -0.7]).unwrap();
        assert_eq!(out, vec![0.3, -0.7, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let p = ParamSet::zeros(&[3, 2]).unwrap();
        assert_eq!(
            p.forward(&[1.0]).unwrap_err(),
            ApproxError::ShapeMismatch {
                expected: 3,
                actual: 1
            }
        );
    }

    #[test]
    fn predict_matches_forward() {
        let p = ParamSet::init(&[3, 7, 5, 2], 3).unwrap();
        let x = [0.1, 0.9, -0.4];
        assert_eq!(p.predict(&x).unwrap(), p.forward(&x).unwrap().0);
    }

    #[test]
    fn zero_output_grad_gives_zero_grad() {
        let p = ParamSet::init(&[3, 4, 2], 1).unwrap();
        let (_, tape) = p.forward(&[0.2, 0.1, -0.3]).unwrap();
        let g = p.backward(tape, &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn final_bias_gradient_is_one_for_sum() {
        let p = ParamSet::init(&[3, 4, 2], 1).unwrap();
        let (_, tape) = p.forward(&[0.2, 0.1, -0.3]).unwrap();
        let g = p.backward(tape, &[1.0, 1.0]).unwrap();
        let (_, b) = p.layer_offsets(1);
        assert_eq!(&g[b..], &[1.0, 1.0]);
    }

    #[test]
    fn tape_from_other_network_is_stale() {
        let p = ParamSet::init(&[3, 4, 2], 1).unwrap();
        let q = ParamSet::init(&[3, 5, 2], 1).unwrap();
        let (_, tape) = q.forward(&[0.0; 3]).unwrap();
        assert_eq!(
            p.backward(tape, &[1.0, 0.0]).unwrap_err(),
            ApproxError::StaleTape
        );
    }

    #[test]
    fn sgd_edge_cases() {
        let p = ParamSet::init(&[2, 3, 1], 5).unwrap();
        let g: Vec<f64> = (0..p.len()).map(|i| i as f64).collect();
        assert_eq!(p.sgd_step(&g, 0.0).unwrap(), p);
        let zeroed = p.sgd_step(&p.flat, 1.0).unwrap();
        assert!(zeroed.flat.iter().all(|v| *v == 0.0));
        assert!(matches!(
            p.sgd_step(&[1.0], 0.1),
            Err(ApproxError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sgd_converges_on_bowl() {
        // f(theta) = |theta|^2, gradient 2 theta
        let mut p = ParamSet::init(&[4, 4], 9).unwrap();
        for (i, v) in p.flat.iter_mut().enumerate() {
            *v += i as f64 * 0.1;
        }
        let mut prev = f64::INFINITY;
        for _ in 0..200 {
            let g: Vec<f64> = p.flat.iter().map(|v| 2.0 * v).collect();
            p.sgd_step_in_place(&g, 0.1).unwrap();
            let f: f64 = p.flat.iter().map(|v| v * v).sum();
            assert!(f < prev || f == 0.0);
            prev = f;
        }
        assert!(prev.sqrt() < 1e-6);
    }

    #[test]
    fn target_copy_is_deep() {
        let mut online = ParamSet::init(&[2, 3, 1], 2).unwrap();
        let target = online.copy_to_target();
        let x = [0.5, -0.5];
        assert_eq!(online.predict(&x).unwrap(), target.predict(&x).unwrap());
        online.flat[0] += 1.0;
        assert_ne!(online.flat[0], target.flat[0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let p = ParamSet::init(&[3, 8, 2], 77).unwrap();
        p.save(&path).unwrap();
        assert_eq!(ParamSet::load(&path).unwrap(), p);
    }
}
