//! Dueling Q-network: shared trunk, scalar state value, per-action advantage,
//! aggregated as `q[i] = v + a[i] - mean(a)`.

use serde::{Deserialize, Serialize};

use crate::approximator::{GradientTape, ParamSet};

use super::AlgoError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuelingHead {
    /// `[input, h1, .., hk]`; its (affine) output is squashed with tanh.
    pub trunk: ParamSet,
    /// `[hk, 1]`
    pub value: ParamSet,
    /// `[hk, n_actions]`
    pub advantage: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DuelingOutput {
    pub q: Vec<f64>,
    pub v: f64,
    pub a: Vec<f64>,
}

pub struct DuelingTape {
    trunk: GradientTape,
    features: Vec<f64>,
    value: GradientTape,
    advantage: GradientTape,
}

/// Gradients in the same layout as the three sub-networks.
#[derive(Debug, Clone, PartialEq)]
pub struct DuelingGrad {
    pub trunk: Vec<f64>,
    pub value: Vec<f64>,
    pub advantage: Vec<f64>,
}

impl DuelingGrad {
    pub fn scale(&mut self, k: f64) {
        for g in self
            .trunk
            .iter_mut()
            .chain(self.value.iter_mut())
            .chain(self.advantage.iter_mut())
        {
            *g *= k;
        }
    }
}

fn aggregate(v: f64, a: &[f64]) -> Vec<f64> {
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    a.iter().map(|ai| v + ai - mean).collect()
}

impl DuelingHead {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        n_actions: usize,
        seed: u64,
    ) -> Result<Self, AlgoError> {
        if hidden.is_empty() {
            return Err(AlgoError::Shape(
                "dueling trunk needs a hidden layer".into(),
            ));
        }
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        let width = *hidden.last().unwrap();
        Ok(Self {
            trunk: ParamSet::init(&sizes, seed)?,
            value: ParamSet::init(&[width, 1], seed.wrapping_add(1))?,
            advantage: ParamSet::init(&[width, n_actions], seed.wrapping_add(2))?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn n_actions(&self) -> usize {
        self.advantage.output_dim()
    }

    pub fn zero_grad(&self) -> DuelingGrad {
        DuelingGrad {
            trunk: vec![0.0; self.trunk.len()],
            value: vec![0.0; self.value.len()],
            advantage: vec![0.0; self.advantage.len()],
        }
    }

    pub fn forward(&self, state: &[f64]) -> Result<(DuelingOutput, DuelingTape), AlgoError> {
        let (pre, trunk) = self.trunk.forward(state)?;
        let features: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let (v, value) = self.value.forward(&features)?;
        let (a, advantage) = self.advantage.forward(&features)?;
        let q = aggregate(v[0], &a);
        Ok((
            DuelingOutput { q, v: v[0], a },
            DuelingTape {
                trunk,
                features,
                value,
                advantage,
            },
        ))
    }

    /// `(q, v, a)` for one state.
    pub fn dueling_q(&self, state: &[f64]) -> Result<DuelingOutput, AlgoError> {
        let features: Vec<f64> = self
            .trunk
            .predict(state)?
            .iter()
            .map(|v| v.tanh())
            .collect();
        let v = self.value.predict(&features)?[0];
        let a = self.advantage.predict(&features)?;
        Ok(DuelingOutput {
            q: aggregate(v, &a),
            v,
            a,
        })
    }

    pub fn q_values(&self, state: &[f64]) -> Result<Vec<f64>, AlgoError> {
        Ok(self.dueling_q(state)?.q)
    }

    /// Accumulates the gradient of `q . dq` into `grad`; returns the input
    /// gradient.
    pub fn backward_accumulate(
        &self,
        tape: DuelingTape,
        dq: &[f64],
        grad: &mut DuelingGrad,
    ) -> Result<Vec<f64>, AlgoError> {
        let n = self.n_actions();
        if dq.len() != n {
            return Err(AlgoError::LengthMismatch {
                expected: n,
                actual: dq.len(),
            });
        }
        let dv = dq.iter().sum::<f64>();
        let mean_dq = dv / n as f64;
        let da: Vec<f64> = dq.iter().map(|g| g - mean_dq).collect();
        let f_from_v = self
            .value
            .backward_accumulate(tape.value, &[dv], &mut grad.value)?;
        let f_from_a =
            self.advantage
                .backward_accumulate(tape.advantage, &da, &mut grad.advantage)?;
        let d_pre: Vec<f64> = tape
            .features
            .iter()
            .zip(f_from_v.iter().zip(&f_from_a))
            .map(|(f, (gv, ga))| (gv + ga) * (1.0 - f * f))
            .collect();
        Ok(self
            .trunk
            .backward_accumulate(tape.trunk, &d_pre, &mut grad.trunk)?)
    }

    pub fn sgd_step_in_place(&mut self, grad: &DuelingGrad, lr: f64) -> Result<(), AlgoError> {
        self.trunk.sgd_step_in_place(&grad.trunk, lr)?;
        self.value.sgd_step_in_place(&grad.value, lr)?;
        self.advantage.sgd_step_in_place(&grad.advantage, lr)?;
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.trunk.flat.clone();
        v.extend_from_slice(&self.value.flat);
        v.extend_from_slice(&self.advantage.flat);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let (t, rest) = flat.split_at(self.trunk.len());
        let (v, a) = rest.split_at(self.value.len());
        self.trunk.flat.copy_from_slice(t);
        self.value.flat.copy_from_slice(v);
        self.advantage.flat.copy_from_slice(a);
    }
}

impl DuelingGrad {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.trunk.clone();
        v.extend_from_slice(&self.value);
        v.extend_from_slice(&self.advantage);
        v
    }
}
