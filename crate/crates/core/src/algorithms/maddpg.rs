//! Centralized critics and decentralized actors.
//!
//! Critic `i` scores the joint observation `X` together with every agent's
//! action, each given as a probability vector (one-hot for logged actions).
//! Actors map their local observation slice of `X` to such a vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::ParamSet;

use super::dueling::DuelingHead;
use super::replay::Transition;
use super::targets::{argmax, ddqn_target};
use super::AlgoError;

/// Shape of the joint observation and action spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointLayout {
    pub n_agents: usize,
    pub obs_len: usize,
    pub n_actions: usize,
}

impl JointLayout {
    pub fn joint_obs_len(&self) -> usize {
        self.n_agents * self.obs_len
    }

    pub fn local<'a>(&self, x: &'a [f64], i: usize) -> &'a [f64] {
        &x[i * self.obs_len..(i + 1) * self.obs_len]
    }

    pub fn one_hot(&self, a: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_actions];
        v[a] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyHead {
    /// Action-probability vector.
    Softmax,
    /// Raw network output.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub params: ParamSet,
    pub head: PolicyHead,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Actor {
    pub fn new(layer_sizes: &[usize], head: PolicyHead, seed: u64) -> Result<Self, AlgoError> {
        Ok(Self {
            params: ParamSet::init(layer_sizes, seed)?,
            head,
        })
    }

    pub fn policy(&self, obs: &[f64]) -> Result<Vec<f64>, AlgoError> {
        let out = self.params.predict(obs)?;
        Ok(self.apply_head(out))
    }

    fn apply_head(&self, out: Vec<f64>) -> Vec<f64> {
        match self.head {
            PolicyHead::Softmax => softmax(&out),
            PolicyHead::Linear => out,
        }
    }

    /// Pulls `dJ/d(policy output)` back through the head to the raw output.
    fn head_backward(&self, policy: &[f64], grad: &[f64]) -> Vec<f64> {
        match self.head {
            PolicyHead::Softmax => {
                let dot: f64 = policy.iter().zip(grad).map(|(p, g)| p * g).sum();
                policy
                    .iter()
                    .zip(grad)
                    .map(|(p, g)| p * (g - dot))
                    .collect()
            }
            PolicyHead::Linear => grad.to_vec(),
        }
    }

    /// Draws an action index from the softmax policy.
    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<usize, AlgoError> {
        let p = self.policy(obs)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return Ok(i);
            }
        }
        Ok(p.len() - 1)
    }

    pub fn greedy(&self, obs: &[f64]) -> Result<usize, AlgoError> {
        Ok(argmax(&self.policy(obs)?).unwrap_or(0))
    }
}

/// A centralized action-value function `Q_i(X, a_1..a_N)`.
pub trait JointCritic {
    /// Returns `Q_i` and its gradient with respect to the `a_i` slot.
    fn value_and_action_grad(
        &self,
        x: &[f64],
        actions: &[Vec<f64>],
        i: usize,
    ) -> Result<(f64, Vec<f64>), AlgoError>;
}

/// Plain MLP critic over `[X, a_1, .., a_N]` with a scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCritic {
    pub params: ParamSet,
    pub layout: JointLayout,
}

impl MlpCritic {
    fn input(&self, x: &[f64], actions: &[Vec<f64>]) -> Vec<f64> {
        let mut v = x.to_vec();
        for a in actions {
            v.extend_from_slice(a);
        }
        v
    }

    pub fn value(&self, x: &[f64], actions: &[Vec<f64>]) -> Result<f64, AlgoError> {
        Ok(self.params.predict(&self.input(x, actions))?[0])
    }
}

impl JointCritic for MlpCritic {
    fn value_and_action_grad(
        &self,
        x: &[f64],
        actions: &[Vec<f64>],
        i: usize,
    ) -> Result<(f64, Vec<f64>), AlgoError> {
        let (out, tape) = self.params.forward(&self.input(x, actions))?;
        let mut scratch = vec![0.0; self.params.len()];
        let dx = self
            .params
            .backward_accumulate(tape, &[1.0], &mut scratch)?;
        let start = x.len() + i * self.layout.n_actions;
        Ok((out[0], dx[start..start + self.layout.n_actions].to_vec()))
    }
}

/// Critic for agent `agent` with a dueling head over that agent's own
/// actions: the trunk sees `[X, a_j for j != agent]`, and
/// `Q(X, a_1..a_N) = a_agent . q(X, a_-agent)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuelingCritic {
    pub head: DuelingHead,
    pub agent: usize,
    pub layout: JointLayout,
}

impl DuelingCritic {
    pub fn new(
        layout: JointLayout,
        agent: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self, AlgoError> {
        let input = layout.joint_obs_len() + (layout.n_agents - 1) * layout.n_actions;
        Ok(Self {
            head: DuelingHead::new(input, hidden, layout.n_actions, seed)?,
            agent,
            layout,
        })
    }

    pub fn input(&self, x: &[f64], others: impl IntoIterator<Item = Vec<f64>>) -> Vec<f64> {
        let mut v = x.to_vec();
        for a in others {
            v.extend(a);
        }
        v
    }

    fn input_from_probs(&self, x: &[f64], actions: &[Vec<f64>]) -> Vec<f64> {
        self.input(
            x,
            actions
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != self.agent)
                .map(|(_, a)| a.clone()),
        )
    }

    fn input_from_indices(&self, x: &[f64], actions: &[usize]) -> Vec<f64> {
        self.input(
            x,
            actions
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != self.agent)
                .map(|(_, &a)| self.layout.one_hot(a)),
        )
    }

    /// Own-action values given the other agents' logged actions.
    pub fn q_values(&self, x: &[f64], actions: &[usize]) -> Result<Vec<f64>, AlgoError> {
        self.head.q_values(&self.input_from_indices(x, actions))
    }
}

impl JointCritic for DuelingCritic {
    fn value_and_action_grad(
        &self,
        x: &[f64],
        actions: &[Vec<f64>],
        i: usize,
    ) -> Result<(f64, Vec<f64>), AlgoError> {
        if i != self.agent {
            return Err(AlgoError::Shape(format!(
                "critic for agent {} queried for agent {i}",
                self.agent
            )));
        }
        let q = self.head.q_values(&self.input_from_probs(x, actions))?;
        let value = q.iter().zip(&actions[i]).map(|(q, a)| q * a).sum();
        Ok((value, q))
    }
}

/// Batch-mean gradient of `J(theta_i) = E[Q_i(X, .., mu_i(o_i), ..)]` with
/// respect to actor `i`'s parameters. Other agents' actions come from the
/// batch as one-hot vectors. The result is an ascent direction.
pub fn maddpg_actor_grad(
    actor: &Actor,
    critic: &dyn JointCritic,
    batch: &[Transition],
    i: usize,
    layout: &JointLayout,
) -> Result<Vec<f64>, AlgoError> {
    if batch.is_empty() {
        return Err(AlgoError::EmptyBatch);
    }
    let mut grad = vec![0.0; actor.params.len()];
    for t in batch {
        let obs = layout.local(&t.x, i);
        let (out, tape) = actor.params.forward(obs)?;
        let policy = actor.apply_head(out);
        let actions: Vec<Vec<f64>> = t
            .actions
            .iter()
            .enumerate()
            .map(|(j, &a)| {
                if j == i {
                    policy.clone()
                } else {
                    layout.one_hot(a)
                }
            })
            .collect();
        let (_, d_action) = critic.value_and_action_grad(&t.x, &actions, i)?;
        let d_out = actor.head_backward(&policy, &d_action);
        actor.params.backward_accumulate(tape, &d_out, &mut grad)?;
    }
    let m = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    Ok(grad)
}

/// Batch-mean gradient of the softmax policy entropy `H(pi_i(o_i))`, an
/// ascent direction. Added to the actor step it keeps the policy from
/// saturating, where the softmax Jacobian (and so the critic's pull) vanishes.
/// Zero for a linear head.
pub fn entropy_grad(
    actor: &Actor,
    batch: &[Transition],
    i: usize,
    layout: &JointLayout,
) -> Result<Vec<f64>, AlgoError> {
    if batch.is_empty() {
        return Err(AlgoError::EmptyBatch);
    }
    let mut grad = vec![0.0; actor.params.len()];
    if actor.head == PolicyHead::Linear {
        return Ok(grad);
    }
    for t in batch {
        let (out, tape) = actor.params.forward(layout.local(&t.x, i))?;
        let p = softmax(&out);
        let log_p: Vec<f64> = p
            .iter()
            .map(|pk| if *pk > 0.0 { pk.ln() } else { 0.0 })
            .collect();
        let h: f64 = -p.iter().zip(&log_p).map(|(pk, lk)| pk * lk).sum::<f64>();
        // dH/dz_k = -p_k (ln p_k + H)
        let d_out: Vec<f64> = p
            .iter()
            .zip(&log_p)
            .map(|(pk, lk)| -pk * (lk + h))
            .collect();
        actor.params.backward_accumulate(tape, &d_out, &mut grad)?;
    }
    let m = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    Ok(grad)
}

/// Moves actor parameters along an ascent direction.
pub fn actor_ascent_step(actor: &mut Actor, grad: &[f64], lr: f64) -> Result<(), AlgoError> {
    actor.params.sgd_step_in_place(grad, -lr)?;
    Ok(())
}

/// Networks frozen for bootstrapping.
pub struct TargetNets<'a> {
    pub critic: &'a DuelingCritic,
    pub actors: &'a [Actor],
}

/// One SGD step on the squared error between `Q_i(X, a)` and the double-Q
/// target `r_i + gamma * Q'_i(X', a'_-i, argmax_a Q_i(X', a'_-i, a))`, where
/// `a'_j` is target actor `j`'s greedy action at `o'_j`. Returns the mean
/// loss measured before the step.
pub fn critic_update(
    critic: &mut DuelingCritic,
    targets: &TargetNets<'_>,
    batch: &[Transition],
    gamma: f64,
    lr: f64,
) -> Result<f64, AlgoError> {
    if batch.is_empty() {
        return Err(AlgoError::EmptyBatch);
    }
    let layout = critic.layout;
    let i = critic.agent;
    let m = batch.len() as f64;
    let mut grad = critic.head.zero_grad();
    let mut loss = 0.0;
    for t in batch {
        let y = if t.done {
            t.rewards[i]
        } else {
            let next_actions: Vec<usize> = (0..layout.n_agents)
                .map(|j| {
                    if j == i {
                        Ok(0)
                    } else {
                        targets.actors[j].greedy(layout.local(&t.x_next, j))
                    }
                })
                .collect::<Result<_, _>>()?;
            let next_input = critic.input_from_indices(&t.x_next, &next_actions);
            let online = critic.head.q_values(&next_input)?;
            let target = targets.critic.head.q_values(&next_input)?;
            ddqn_target(t.rewards[i], gamma, &online, &target, false)?
        };
        let (out, tape) = critic
            .head
            .forward(&critic.input_from_indices(&t.x, &t.actions))?;
        let err = out.q[t.actions[i]] - y;
        loss += err * err;
        let mut dq = vec![0.0; layout.n_actions];
        dq[t.actions[i]] = 2.0 * err / m;
        critic.head.backward_accumulate(tape, &dq, &mut grad)?;
    }
    critic.head.sgd_step_in_place(&grad, lr)?;
    Ok(loss / m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> JointLayout {
        JointLayout {
            n_agents: 2,
            obs_len: 3,
            n_actions: 4,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, layout: &JointLayout) -> Vec<Transition> {
        (0..n)
            .map(|_| Transition {
                x: (0..layout.joint_obs_len())
                    .map(|_| rng.gen_range(0.0..1.0))
                    .collect(),
                actions: (0..layout.n_agents)
                    .map(|_| rng.gen_range(0..layout.n_actions))
                    .collect(),
                rewards: (0..layout.n_agents)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
                x_next: (0..layout.joint_obs_len())
                    .map(|_| rng.gen_range(0.0..1.0))
                    .collect(),
                done: rng.gen_bool(0.2),
            })
            .collect()
    }

    #[test]
    fn critic_blind_to_own_action_gives_zero_gradient() {
        let l = layout();
        let mut critic = MlpCritic {
            params: ParamSet::init(&[l.joint_obs_len() + 2 * l.n_actions, 6, 1], 3).unwrap(),
            layout: l,
        };
        // zero first-layer weights on the a_0 slot
        let n_in = critic.params.layer_sizes[0];
        for o in 0..6 {
            for k in 0..l.n_actions {
                critic.params.flat[o * n_in + l.joint_obs_len() + k] = 0.0;
            }
        }
        let actor = Actor::new(&[3, 5, 4], PolicyHead::Softmax, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_batch(&mut rng, 4, &l);
        let g = maddpg_actor_grad(&actor, &critic, &batch, 0, &l).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_batch_rejected() {
        let l = layout();
        let actor = Actor::new(&[3, 4], PolicyHead::Softmax, 1).unwrap();
        let critic = DuelingCritic::new(l, 0, &[4], 0).unwrap();
        assert_eq!(
            maddpg_actor_grad(&actor, &critic, &[], 0, &l).unwrap_err(),
            AlgoError::EmptyBatch
        );
        let mut c = critic.clone();
        let actors = [actor.clone(), actor];
        let tn = TargetNets {
            critic: &critic,
            actors: &actors,
        };
        assert_eq!(
            critic_update(&mut c, &tn, &[], 0.9, 0.1).unwrap_err(),
            AlgoError::EmptyBatch
        );
    }

    #[test]
    fn dueling_critic_action_gradient_is_q() {
        let l = layout();
        let critic = DuelingCritic::new(l, 1, &[5], 8).unwrap();
        let x = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let probs = vec![vec![0.0, 1.0, 0.0, 0.0], vec![0.1, 0.2, 0.3, 0.4]];
        let (v, g) = critic.value_and_action_grad(&x, &probs, 1).unwrap();
        let q = critic.q_values(&x, &[1, 0]).unwrap();
        assert_eq!(g, q);
        let expected: f64 = q.iter().zip(&probs[1]).map(|(a, b)| a * b).sum();
        assert!((v - expected).abs() < 1e-15);
        assert!(critic.value_and_action_grad(&x, &probs, 0).is_err());
    }

    #[test]
    fn perfect_targets_leave_critic_unchanged() {
        let l = layout();
        let critic = DuelingCritic::new(l, 0, &[5], 2).unwrap();
        let actors = [
            Actor::new(&[3, 4], PolicyHead::Softmax, 1).unwrap(),
            Actor::new(&[3, 4], PolicyHead::Softmax, 2).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut batch = random_batch(&mut rng, 6, &l);
        for t in &mut batch {
            t.done = true;
            t.rewards[0] = critic.q_values(&t.x, &t.actions).unwrap()[t.actions[0]];
        }
        let mut c = critic.clone();
        let tn = TargetNets {
            critic: &critic,
            actors: &actors,
        };
        let loss = critic_update(&mut c, &tn, &batch, 0.95, 0.05).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(c, critic);
    }

    #[test]
    fn zero_gamma_regresses_on_reward() {
        let l = layout();
        let critic = DuelingCritic::new(l, 1, &[5], 4).unwrap();
        let actors = [
            Actor::new(&[3, 4], PolicyHead::Softmax, 1).unwrap(),
            Actor::new(&[3, 4], PolicyHead::Softmax, 2).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(&mut rng, 8, &l);
        let expected: f64 = batch
            .iter()
            .map(|t| {
                let q = critic.q_values(&t.x, &t.actions).unwrap()[t.actions[1]];
                (q - t.rewards[1]).powi(2)
            })
            .sum::<f64>()
            / 8.0;
        let mut c = critic.clone();
        let tn = TargetNets {
            critic: &critic,
            actors: &actors,
        };
        let loss = critic_update(&mut c, &tn, &batch, 0.0, 0.05).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }
}
