//! Bootstrap targets and action selection.

use rand::Rng;

use super::AlgoError;

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// One-step Q-learning target `r + gamma * max q_next`, masked on terminal.
pub fn dqn_target(r: f64, gamma: f64, q_next: &[f64], done: bool) -> Result<f64, AlgoError> {
    let best = argmax(q_next).ok_or(AlgoError::EmptyActionSet)?;
    if done {
        return Ok(r);
    }
    Ok(r + gamma * q_next[best])
}

/// Double-Q target: the online values pick the action, the target values
/// score it.
pub fn ddqn_target(
    r: f64,
    gamma: f64,
    q_next_online: &[f64],
    q_next_target: &[f64],
    done: bool,
) -> Result<f64, AlgoError> {
    if q_next_online.len() != q_next_target.len() {
        return Err(AlgoError::LengthMismatch {
            expected: q_next_online.len(),
            actual: q_next_target.len(),
        });
    }
    let pick = argmax(q_next_online).ok_or(AlgoError::EmptyActionSet)?;
    if done {
        return Ok(r);
    }
    Ok(r + gamma * q_next_target[pick])
}

pub fn epsilon_greedy<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    assert!(!q.is_empty(), "epsilon_greedy on an empty action set");
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        argmax(q).unwrap()
    }
}

/// Linear annealing from `start` to `end` over `steps` environment steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

impl EpsilonSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if self.steps == 0 || step >= self.steps {
            return self.end;
        }
        let frac = step as f64 / self.steps as f64;
        self.start + (self.end - self.start) * frac
    }
}
