//! Monotone mixing network.
//!
//! Per-agent utilities `q` are combined with state-conditioned weights:
//!
//! ```text
//! hidden = elu(|W1(s)| q + b1(s))
//! Q_mix  = |w2(s)| . hidden + b2(s)
//! ```
//!
//! The absolute value on every weight produced by the hypernetworks keeps
//! `dQ_mix / dq_i >= 0` for all agents and states.

use serde::{Deserialize, Serialize};

use crate::approximator::{GradientTape, ParamSet};

use super::AlgoError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerParams {
    pub n_agents: usize,
    pub embed: usize,
    /// state -> `embed * n_agents` raw weights, row `e` holds agent weights.
    pub hyper_w1: ParamSet,
    /// state -> `embed`
    pub hyper_b1: ParamSet,
    /// state -> `embed` raw weights
    pub hyper_w2: ParamSet,
    /// state -> 1
    pub hyper_b2: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerGrad {
    pub hyper_w1: Vec<f64>,
    pub hyper_b1: Vec<f64>,
    pub hyper_w2: Vec<f64>,
    pub hyper_b2: Vec<f64>,
}

impl MixerGrad {
    pub fn scale(&mut self, k: f64) {
        for g in self
            .hyper_w1
            .iter_mut()
            .chain(&mut self.hyper_b1)
            .chain(&mut self.hyper_w2)
            .chain(&mut self.hyper_b2)
        {
            *g *= k;
        }
    }
}

pub struct MixerTape {
    q: Vec<f64>,
    w1_raw: Vec<f64>,
    w2_raw: Vec<f64>,
    z: Vec<f64>,
    hidden: Vec<f64>,
    tapes: [GradientTape; 4],
}

fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

fn elu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl MixerParams {
    /// Single-layer hypernetworks for the weights and `b1`; a two-layer
    /// hypernetwork (`state -> embed -> 1`) for `b2`.
    pub fn new(
        n_agents: usize,
        state_dim: usize,
        embed: usize,
        seed: u64,
    ) -> Result<Self, AlgoError> {
        if n_agents == 0 || embed == 0 {
            return Err(AlgoError::Shape(
                "mixer needs agents and an embedding".into(),
            ));
        }
        Ok(Self {
            n_agents,
            embed,
            hyper_w1: ParamSet::init(&[state_dim, embed * n_agents], seed)?,
            hyper_b1: ParamSet::init(&[state_dim, embed], seed.wrapping_add(1))?,
            hyper_w2: ParamSet::init(&[state_dim, embed], seed.wrapping_add(2))?,
            hyper_b2: ParamSet::init(&[state_dim, embed, 1], seed.wrapping_add(3))?,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.hyper_w1.input_dim()
    }

    pub fn zero_grad(&self) -> MixerGrad {
        MixerGrad {
            hyper_w1: vec![0.0; self.hyper_w1.len()],
            hyper_b1: vec![0.0; self.hyper_b1.len()],
            hyper_w2: vec![0.0; self.hyper_w2.len()],
            hyper_b2: vec![0.0; self.hyper_b2.len()],
        }
    }

    fn check(&self, q: &[f64], state: &[f64]) -> Result<(), AlgoError> {
        if q.len() != self.n_agents {
            return Err(AlgoError::LengthMismatch {
                expected: self.n_agents,
                actual: q.len(),
            });
        }
        if state.len() != self.state_dim() {
            return Err(AlgoError::LengthMismatch {
                expected: self.state_dim(),
                actual: state.len(),
            });
        }
        Ok(())
    }

    pub fn mix(&self, q_agents: &[f64], state: &[f64]) -> Result<f64, AlgoError> {
        Ok(self.forward(q_agents, state)?.0)
    }

    pub fn forward(&self, q: &[f64], state: &[f64]) -> Result<(f64, MixerTape), AlgoError> {
        self.check(q, state)?;
        let (w1_raw, t_w1) = self.hyper_w1.forward(state)?;
        let (b1, t_b1) = self.hyper_b1.forward(state)?;
        let (w2_raw, t_w2) = self.hyper_w2.forward(state)?;
        let (b2, t_b2) = self.hyper_b2.forward(state)?;
        let n = self.n_agents;
        let z: Vec<f64> = (0..self.embed)
            .map(|e| {
                let row = &w1_raw[e * n..(e + 1) * n];
                row.iter().zip(q).map(|(w, qi)| w.abs() * qi).sum::<f64>() + b1[e]
            })
            .collect();
        let hidden: Vec<f64> = z.iter().map(|&v| elu(v)).collect();
        let out = hidden
            .iter()
            .zip(&w2_raw)
            .map(|(h, w)| w.abs() * h)
            .sum::<f64>()
            + b2[0];
        Ok((
            out,
            MixerTape {
                q: q.to_vec(),
                w1_raw,
                w2_raw,
                z,
                hidden,
                tapes: [t_w1, t_b1, t_w2, t_b2],
            },
        ))
    }

    /// Accumulates `d_out * dQ_mix/dparams` into `grad`; returns
    /// `d_out * dQ_mix/dq`.
    pub fn backward_accumulate(
        &self,
        tape: MixerTape,
        d_out: f64,
        grad: &mut MixerGrad,
    ) -> Result<Vec<f64>, AlgoError> {
        let n = self.n_agents;
        let MixerTape {
            q,
            w1_raw,
            w2_raw,
            z,
            hidden,
            tapes: [t_w1, t_b1, t_w2, t_b2],
        } = tape;
        let d_w2_raw: Vec<f64> = hidden
            .iter()
            .zip(&w2_raw)
            .map(|(h, w)| d_out * h * sign(*w))
            .collect();
        let dz: Vec<f64> = z
            .iter()
            .zip(&w2_raw)
            .map(|(zv, w)| d_out * w.abs() * elu_grad(*zv))
            .collect();
        let mut d_w1_raw = vec![0.0; n * self.embed];
        let mut dq = vec![0.0; n];
        for e in 0..self.embed {
            for i in 0..n {
                let w = w1_raw[e * n + i];
                d_w1_raw[e * n + i] = dz[e] * q[i] * sign(w);
                dq[i] += dz[e] * w.abs();
            }
        }
        self.hyper_w1
            .backward_accumulate(t_w1, &d_w1_raw, &mut grad.hyper_w1)?;
        self.hyper_b1
            .backward_accumulate(t_b1, &dz, &mut grad.hyper_b1)?;
        self.hyper_w2
            .backward_accumulate(t_w2, &d_w2_raw, &mut grad.hyper_w2)?;
        self.hyper_b2
            .backward_accumulate(t_b2, &[d_out], &mut grad.hyper_b2)?;
        Ok(dq)
    }

    pub fn sgd_step_in_place(&mut self, grad: &MixerGrad, lr: f64) -> Result<(), AlgoError> {
        self.hyper_w1.sgd_step_in_place(&grad.hyper_w1, lr)?;
        self.hyper_b1.sgd_step_in_place(&grad.hyper_b1, lr)?;
        self.hyper_w2.sgd_step_in_place(&grad.hyper_w2, lr)?;
        self.hyper_b2.sgd_step_in_place(&grad.hyper_b2, lr)?;
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        [
            &self.hyper_w1,
            &self.hyper_b1,
            &self.hyper_w2,
            &self.hyper_b2,
        ]
        .iter()
        .flat_map(|p| p.flat.iter().copied())
        .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut rest = flat;
        for p in [
            &mut self.hyper_w1,
            &mut self.hyper_b1,
            &mut self.hyper_w2,
            &mut self.hyper_b2,
        ] {
            let (head, tail) = rest.split_at(p.len());
            p.flat.copy_from_slice(head);
            rest = tail;
        }
    }
}

impl MixerGrad {
    pub fn flat(&self) -> Vec<f64> {
        [
            &self.hyper_w1,
            &self.hyper_b1,
            &self.hyper_w2,
            &self.hyper_b2,
        ]
        .iter()
        .flat_map(|g| g.iter().copied())
        .collect()
    }
}
