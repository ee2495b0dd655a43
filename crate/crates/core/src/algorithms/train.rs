//! Training loop shared by all learners.
//!
//! The loop alternates environment interaction through an [`EnvDriver`],
//! replay insertion, gradient updates, and periodic hard target syncs, and
//! records one learning-curve row per episode.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::ParamSet;
use crate::environment::{self, EnvironmentSpec, GridAction, GridState};

use super::dueling::DuelingHead;
use super::maddpg::{
    actor_ascent_step, critic_update, entropy_grad, maddpg_actor_grad, Actor, DuelingCritic,
    JointLayout, PolicyHead, TargetNets,
};
use super::mixer::MixerParams;
use super::replay::{ReplayBuffer, Transition};
use super::targets::{argmax, ddqn_target, dqn_target, epsilon_greedy, EpsilonSchedule};
use super::AlgoError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Dqn,
    Ddqn,
    D3maddpg,
    MixedCritic,
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dqn" => Ok(Algorithm::Dqn),
            "ddqn" => Ok(Algorithm::Ddqn),
            "d3maddpg" => Ok(Algorithm::D3maddpg),
            "mixed-critic" => Ok(Algorithm::MixedCritic),
            other => Err(format!("unknown algorithm `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_steps: u64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Hard target sync period, in gradient updates.
    pub target_sync: u64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    /// Weight of the policy-entropy bonus in the actor step.
    pub entropy_coef: f64,
    pub hidden: Vec<usize>,
    /// Independent learners only: dueling head instead of a plain MLP.
    pub dueling: bool,
    /// Environment steps between gradient updates.
    pub train_every: u64,
    pub mixer_embed: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_steps: 5_000,
            buffer_capacity: 10_000,
            batch_size: 32,
            target_sync: 100,
            critic_lr: 0.05,
            actor_lr: 2.0,
            entropy_coef: 0.01,
            hidden: vec![64, 64],
            dueling: true,
            train_every: 1,
            mixer_embed: 16,
        }
    }
}

impl Hyperparams {
    pub fn schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            start: self.epsilon_start,
            end: self.epsilon_end,
            steps: self.epsilon_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub hyper: Hyperparams,
    pub episodes: u64,
    pub seed: u64,
    pub n_agents: usize,
    pub env: EnvironmentSpec,
    /// Reuse one target layout (the run seed) for every episode.
    pub fixed_layout: bool,
    /// Stop after this many environment steps, even mid-episode.
    pub max_env_steps: Option<u64>,
}

/// Seed for the environment reset of `episode`.
pub fn episode_seed(seed: u64, episode: u64, fixed_layout: bool) -> u64 {
    if fixed_layout {
        return seed;
    }
    // splitmix64 finalizer over (seed, episode)
    let mut z = seed ^ episode.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observations: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Episode over, for any reason.
    pub done: bool,
    /// Episode over because the task was completed. A time-limit cut is not
    /// terminal, so learners keep bootstrapping through it.
    pub terminal: bool,
}

/// Source of experience for the training loop.
pub trait EnvDriver {
    fn reset(&mut self, episode: u64) -> Result<Vec<Vec<f64>>, AlgoError>;
    fn step(&mut self, actions: &[usize]) -> Result<StepResult, AlgoError>;
}

/// Steps an in-process environment directly.
pub struct DirectDriver {
    spec: EnvironmentSpec,
    n_agents: usize,
    seed: u64,
    fixed_layout: bool,
    state: Option<GridState>,
}

impl DirectDriver {
    pub fn new(spec: EnvironmentSpec, n_agents: usize, seed: u64, fixed_layout: bool) -> Self {
        Self {
            spec,
            n_agents,
            seed,
            fixed_layout,
            state: None,
        }
    }

    pub fn state(&self) -> Option<&GridState> {
        self.state.as_ref()
    }
}

impl EnvDriver for DirectDriver {
    fn reset(&mut self, episode: u64) -> Result<Vec<Vec<f64>>, AlgoError> {
        let seed = episode_seed(self.seed, episode, self.fixed_layout);
        let (state, obs) = environment::reset(&self.spec, self.n_agents, seed)?;
        self.state = Some(state);
        Ok(obs)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, AlgoError> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| AlgoError::Driver("step before reset".into()))?;
        let moves = to_grid_actions(actions)?;
        let out = environment::step(&self.spec, state, &moves)?;
        let observations = environment::observe_all(&self.spec, &out.state);
        let terminal = out.state.all_visited();
        self.state = Some(out.state);
        Ok(StepResult {
            observations,
            rewards: out.rewards,
            done: out.done,
            terminal,
        })
    }
}

pub fn to_grid_actions(actions: &[usize]) -> Result<Vec<GridAction>, AlgoError> {
    actions
        .iter()
        .map(|&a| GridAction::from_index(a).ok_or_else(|| AlgoError::Driver(format!("action {a}"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub episode: u64,
    pub team_return: f64,
    pub epsilon: f64,
    /// Mean update loss over the episode; `None` when no update ran.
    pub loss: Option<f64>,
}

pub const CURVE_HEADER: &str = "episode,team_return,epsilon,loss";

pub fn curve_to_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        let loss = r.loss.map(|l| format!("{l:?}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:?},{:?},{}",
            r.episode, r.team_return, r.epsilon, loss
        );
    }
    out
}

/// Q-network for the independent learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QNet {
    Dueling(DuelingHead),
    Plain(ParamSet),
}

impl QNet {
    fn new(
        input: usize,
        hidden: &[usize],
        n_actions: usize,
        dueling: bool,
        seed: u64,
    ) -> Result<Self, AlgoError> {
        if dueling {
            Ok(QNet::Dueling(DuelingHead::new(
                input, hidden, n_actions, seed,
            )?))
        } else {
            let mut sizes = vec![input];
            sizes.extend_from_slice(hidden);
            sizes.push(n_actions);
            Ok(QNet::Plain(ParamSet::init(&sizes, seed)?))
        }
    }

    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>, AlgoError> {
        match self {
            QNet::Dueling(h) => h.q_values(obs),
            QNet::Plain(p) => Ok(p.predict(obs)?),
        }
    }

    /// Squared-error step toward `y` on `q[action]`: accumulates the gradient
    /// of `(q[action] - y)^2 / m` into `grad` and returns the squared error.
    fn accumulate_td(
        &self,
        obs: &[f64],
        action: usize,
        y: f64,
        m: f64,
        grad: &mut [f64],
    ) -> Result<f64, AlgoError> {
        let mut dq = vec![0.0; self.n_actions()];
        match self {
            QNet::Dueling(h) => {
                let (out, tape) = h.forward(obs)?;
                let err = out.q[action] - y;
                dq[action] = 2.0 * err / m;
                let (t_len, v_len) = (h.trunk.len(), h.value.len());
                let mut g = h.zero_grad();
                h.backward_accumulate(tape, &dq, &mut g)?;
                let (gt, rest) = grad.split_at_mut(t_len);
                let (gv, ga) = rest.split_at_mut(v_len);
                for (acc, v) in gt.iter_mut().zip(&g.trunk) {
                    *acc += v;
                }
                for (acc, v) in gv.iter_mut().zip(&g.value) {
                    *acc += v;
                }
                for (acc, v) in ga.iter_mut().zip(&g.advantage) {
                    *acc += v;
                }
                Ok(err * err)
            }
            QNet::Plain(p) => {
                let (out, tape) = p.forward(obs)?;
                let err = out[action] - y;
                dq[action] = 2.0 * err / m;
                p.backward_accumulate(tape, &dq, grad)?;
                Ok(err * err)
            }
        }
    }

    fn n_actions(&self) -> usize {
        match self {
            QNet::Dueling(h) => h.n_actions(),
            QNet::Plain(p) => p.output_dim(),
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        match self {
            QNet::Dueling(h) => h.flat_params(),
            QNet::Plain(p) => p.flat.clone(),
        }
    }

    fn apply(&mut self, grad: &[f64], lr: f64) {
        match self {
            QNet::Dueling(h) => {
                let mut flat = h.flat_params();
                for (p, g) in flat.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
                h.set_flat_params(&flat);
            }
            QNet::Plain(p) => {
                for (w, g) in p.flat.iter_mut().zip(grad) {
                    *w -= lr * g;
                }
            }
        }
    }
}

/// A trainable population of agents.
pub trait Learner {
    /// Exploratory joint action.
    fn act(
        &self,
        obs: &[Vec<f64>],
        epsilon: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>, AlgoError>;
    /// Deterministic joint action.
    fn greedy(&self, obs: &[Vec<f64>]) -> Result<Vec<usize>, AlgoError>;
    /// Per-agent action preferences behind [`Learner::greedy`]: Q-values for
    /// value learners, action probabilities for actors.
    fn preferences(&self, obs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, AlgoError>;
    /// One gradient step on a sampled batch; returns the loss.
    fn update(&mut self, batch: &[Transition]) -> Result<f64, AlgoError>;
    fn sync_targets(&mut self);
    fn save(&self, dir: &Path) -> Result<(), AlgoError>;
    /// All trainable parameters, concatenated.
    fn snapshot(&self) -> Vec<f64>;
    /// All target parameters, concatenated.
    fn target_snapshot(&self) -> Vec<f64>;
}

pub struct IndependentQ {
    pub layout: JointLayout,
    pub nets: Vec<QNet>,
    pub targets: Vec<QNet>,
    pub double: bool,
    gamma: f64,
    lr: f64,
}

impl IndependentQ {
    pub fn new(
        layout: JointLayout,
        hyper: &Hyperparams,
        double: bool,
        seed: u64,
    ) -> Result<Self, AlgoError> {
        let nets: Vec<QNet> = (0..layout.n_agents)
            .map(|i| {
                QNet::new(
                    layout.obs_len,
                    &hyper.hidden,
                    layout.n_actions,
                    hyper.dueling,
                    seed.wrapping_add(100 * i as u64),
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            layout,
            targets: nets.clone(),
            nets,
            double,
            gamma: hyper.gamma,
            lr: hyper.critic_lr,
        })
    }
}

impl Learner for IndependentQ {
    fn act(
        &self,
        obs: &[Vec<f64>],
        epsilon: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>, AlgoError> {
        self.nets
            .iter()
            .zip(obs)
            .map(|(net, o)| Ok(epsilon_greedy(&net.q_values(o)?, epsilon, rng)))
            .collect()
    }

    fn greedy(&self, obs: &[Vec<f64>]) -> Result<Vec<usize>, AlgoError> {
        self.act(obs, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn preferences(&self, obs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, AlgoError> {
        self.nets
            .iter()
            .zip(obs)
            .map(|(n, o)| n.q_values(o))
            .collect()
    }

    fn update(&mut self, batch: &[Transition]) -> Result<f64, AlgoError> {
        if batch.is_empty() {
            return Err(AlgoError::EmptyBatch);
        }
        let m = batch.len() as f64;
        let mut total = 0.0;
        for i in 0..self.layout.n_agents {
            let net = &self.nets[i];
            let mut grad = vec![0.0; net.flat_params().len()];
            for t in batch {
                let next = self.layout.local(&t.x_next, i);
                let y = if t.done {
                    t.rewards[i]
                } else if self.double {
                    ddqn_target(
                        t.rewards[i],
                        self.gamma,
                        &net.q_values(next)?,
                        &self.targets[i].q_values(next)?,
                        false,
                    )?
                } else {
                    dqn_target(
                        t.rewards[i],
                        self.gamma,
                        &self.targets[i].q_values(next)?,
                        false,
                    )?
                };
                let obs = self.layout.local(&t.x, i);
                total += net.accumulate_td(obs, t.actions[i], y, m, &mut grad)? / m;
            }
            self.nets[i].apply(&grad, self.lr);
        }
        Ok(total / self.layout.n_agents as f64)
    }

    fn sync_targets(&mut self) {
        self.targets = self.nets.clone();
    }

    fn save(&self, dir: &Path) -> Result<(), AlgoError> {
        for (i, net) in self.nets.iter().enumerate() {
            write_json(&dir.join(format!("critic_{i}.json")), net)?;
        }
        Ok(())
    }

    fn snapshot(&self) -> Vec<f64> {
        self.nets.iter().flat_map(|n| n.flat_params()).collect()
    }

    fn target_snapshot(&self) -> Vec<f64> {
        self.targets.iter().flat_map(|n| n.flat_params()).collect()
    }
}

/// Decentralized softmax actors with per-agent centralized dueling critics,
/// bootstrapped through the double-Q split against target copies of both.
pub struct D3Maddpg {
    pub layout: JointLayout,
    pub actors: Vec<Actor>,
    pub critics: Vec<DuelingCritic>,
    pub target_actors: Vec<Actor>,
    pub target_critics: Vec<DuelingCritic>,
    gamma: f64,
    critic_lr: f64,
    actor_lr: f64,
    entropy_coef: f64,
}

impl D3Maddpg {
    pub fn new(layout: JointLayout, hyper: &Hyperparams, seed: u64) -> Result<Self, AlgoError> {
        let mut actor_sizes = vec![layout.obs_len];
        actor_sizes.extend_from_slice(&hyper.hidden);
        actor_sizes.push(layout.n_actions);
        let actors: Vec<Actor> = (0..layout.n_agents)
            .map(|i| {
                Actor::new(
                    &actor_sizes,
                    PolicyHead::Softmax,
                    seed.wrapping_add(100 * i as u64),
                )
            })
            .collect::<Result<_, _>>()?;
        let critics: Vec<DuelingCritic> = (0..layout.n_agents)
            .map(|i| {
                DuelingCritic::new(
                    layout,
                    i,
                    &hyper.hidden,
                    seed.wrapping_add(100 * i as u64 + 50),
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            layout,
            target_actors: actors.clone(),
            target_critics: critics.clone(),
            actors,
            critics,
            gamma: hyper.gamma,
            critic_lr: hyper.critic_lr,
            actor_lr: hyper.actor_lr,
            entropy_coef: hyper.entropy_coef,
        })
    }
}

impl Learner for D3Maddpg {
    fn act(
        &self,
        obs: &[Vec<f64>],
        epsilon: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>, AlgoError> {
        self.actors
            .iter()
            .zip(obs)
            .map(|(actor, o)| {
                if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
                    Ok(rng.gen_range(0..self.layout.n_actions))
                } else {
                    actor.sample(o, rng)
                }
            })
            .collect()
    }

    fn greedy(&self, obs: &[Vec<f64>]) -> Result<Vec<usize>, AlgoError> {
        self.actors
            .iter()
            .zip(obs)
            .map(|(a, o)| a.greedy(o))
            .collect()
    }

    fn preferences(&self, obs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, AlgoError> {
        self.actors
            .iter()
            .zip(obs)
            .map(|(a, o)| a.policy(o))
            .collect()
    }

    fn update(&mut self, batch: &[Transition]) -> Result<f64, AlgoError> {
        let mut total = 0.0;
        for i in 0..self.layout.n_agents {
            let targets = TargetNets {
                critic: &self.target_critics[i],
                actors: &self.target_actors,
            };
            total += critic_update(
                &mut self.critics[i],
                &targets,
                batch,
                self.gamma,
                self.critic_lr,
            )?;
            let mut grad =
                maddpg_actor_grad(&self.actors[i], &self.critics[i], batch, i, &self.layout)?;
            if self.entropy_coef != 0.0 {
                let h = entropy_grad(&self.actors[i], batch, i, &self.layout)?;
                for (g, hg) in grad.iter_mut().zip(h) {
                    *g += self.entropy_coef * hg;
                }
            }
            actor_ascent_step(&mut self.actors[i], &grad, self.actor_lr)?;
        }
        Ok(total / self.layout.n_agents as f64)
    }

    fn sync_targets(&mut self) {
        self.target_actors = self.actors.clone();
        self.target_critics = self.critics.clone();
    }

    fn save(&self, dir: &Path) -> Result<(), AlgoError> {
        for (i, a) in self.actors.iter().enumerate() {
            write_json(&dir.join(format!("actor_{i}.json")), &a.params)?;
        }
        for (i, c) in self.critics.iter().enumerate() {
            write_json(&dir.join(format!("critic_{i}.json")), &c.head)?;
        }
        Ok(())
    }

    fn snapshot(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .actors
            .iter()
            .flat_map(|a| a.params.flat.clone())
            .collect();
        v.extend(self.critics.iter().flat_map(|c| c.head.flat_params()));
        v
    }

    fn target_snapshot(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .target_actors
            .iter()
            .flat_map(|a| a.params.flat.clone())
            .collect();
        v.extend(
            self.target_critics
                .iter()
                .flat_map(|c| c.head.flat_params()),
        );
        v
    }
}

/// Per-agent dueling utilities combined by the monotone mixer and trained on
/// the team reward.
pub struct MixedCritic {
    pub layout: JointLayout,
    pub agents: Vec<DuelingHead>,
    pub mixer: MixerParams,
    pub target_agents: Vec<DuelingHead>,
    pub target_mixer: MixerParams,
    gamma: f64,
    lr: f64,
}

impl MixedCritic {
    pub fn new(layout: JointLayout, hyper: &Hyperparams, seed: u64) -> Result<Self, AlgoError> {
        let agents: Vec<DuelingHead> = (0..layout.n_agents)
            .map(|i| {
                DuelingHead::new(
                    layout.obs_len,
                    &hyper.hidden,
                    layout.n_actions,
                    seed.wrapping_add(100 * i as u64),
                )
            })
            .collect::<Result<_, _>>()?;
        let mixer = MixerParams::new(
            layout.n_agents,
            layout.joint_obs_len(),
            hyper.mixer_embed,
            seed.wrapping_add(7_000),
        )?;
        Ok(Self {
            layout,
            target_agents: agents.clone(),
            target_mixer: mixer.clone(),
            agents,
            mixer,
            gamma: hyper.gamma,
            lr: hyper.critic_lr,
        })
    }
}

impl Learner for MixedCritic {
    fn act(
        &self,
        obs: &[Vec<f64>],
        epsilon: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>, AlgoError> {
        self.agents
            .iter()
            .zip(obs)
            .map(|(h, o)| Ok(epsilon_greedy(&h.q_values(o)?, epsilon, rng)))
            .collect()
    }

    fn greedy(&self, obs: &[Vec<f64>]) -> Result<Vec<usize>, AlgoError> {
        self.act(obs, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn preferences(&self, obs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, AlgoError> {
        self.agents
            .iter()
            .zip(obs)
            .map(|(h, o)| h.q_values(o))
            .collect()
    }

    fn update(&mut self, batch: &[Transition]) -> Result<f64, AlgoError> {
        if batch.is_empty() {
            return Err(AlgoError::EmptyBatch);
        }
        let l = self.layout;
        let m = batch.len() as f64;
        let mut agent_grads: Vec<_> = self.agents.iter().map(|h| h.zero_grad()).collect();
        let mut mixer_grad = self.mixer.zero_grad();
        let mut loss = 0.0;
        for t in batch {
            let y = if t.done {
                t.team_reward()
            } else {
                let mut q_next = Vec::with_capacity(l.n_agents);
                for i in 0..l.n_agents {
                    let o = l.local(&t.x_next, i);
                    let pick = argmax(&self.agents[i].q_values(o)?).unwrap_or(0);
                    q_next.push(self.target_agents[i].q_values(o)?[pick]);
                }
                t.team_reward() + self.gamma * self.target_mixer.mix(&q_next, &t.x_next)?
            };
            let mut chosen = Vec::with_capacity(l.n_agents);
            let mut tapes = Vec::with_capacity(l.n_agents);
            for i in 0..l.n_agents {
                let (out, tape) = self.agents[i].forward(l.local(&t.x, i))?;
                chosen.push(out.q[t.actions[i]]);
                tapes.push(tape);
            }
            let (q_tot, mix_tape) = self.mixer.forward(&chosen, &t.x)?;
            let err = q_tot - y;
            loss += err * err / m;
            let dq = self
                .mixer
                .backward_accumulate(mix_tape, 2.0 * err / m, &mut mixer_grad)?;
            for (i, tape) in tapes.into_iter().enumerate() {
                let mut d = vec![0.0; l.n_actions];
                d[t.actions[i]] = dq[i];
                self.agents[i].backward_accumulate(tape, &d, &mut agent_grads[i])?;
            }
        }
        for (h, g) in self.agents.iter_mut().zip(&agent_grads) {
            h.sgd_step_in_place(g, self.lr)?;
        }
        self.mixer.sgd_step_in_place(&mixer_grad, self.lr)?;
        Ok(loss)
    }

    fn sync_targets(&mut self) {
        self.target_agents = self.agents.clone();
        self.target_mixer = self.mixer.clone();
    }

    fn save(&self, dir: &Path) -> Result<(), AlgoError> {
        for (i, h) in self.agents.iter().enumerate() {
            write_json(&dir.join(format!("critic_{i}.json")), h)?;
        }
        write_json(&dir.join("mixer.json"), &self.mixer)
    }

    fn snapshot(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.agents.iter().flat_map(|h| h.flat_params()).collect();
        v.extend(self.mixer.flat_params());
        v
    }

    fn target_snapshot(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .target_agents
            .iter()
            .flat_map(|h| h.flat_params())
            .collect();
        v.extend(self.target_mixer.flat_params());
        v
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), AlgoError> {
    let text = serde_json::to_string(value).map_err(|e| AlgoError::Io(e.to_string()))?;
    fs::write(path, text).map_err(|e| AlgoError::Io(format!("{}: {e}", path.display())))
}

pub fn build_learner(
    config: &TrainConfig,
    layout: JointLayout,
) -> Result<Box<dyn Learner>, AlgoError> {
    let seed = config.seed;
    Ok(match config.algorithm {
        Algorithm::Dqn => Box::new(IndependentQ::new(layout, &config.hyper, false, seed)?),
        Algorithm::Ddqn => Box::new(IndependentQ::new(layout, &config.hyper, true, seed)?),
        Algorithm::D3maddpg => Box::new(D3Maddpg::new(layout, &config.hyper, seed)?),
        Algorithm::MixedCritic => Box::new(MixedCritic::new(layout, &config.hyper, seed)?),
    })
}

pub fn layout_for(config: &TrainConfig) -> JointLayout {
    JointLayout {
        n_agents: config.n_agents,
        obs_len: config.env.observation_len(config.n_agents),
        n_actions: GridAction::COUNT,
    }
}

pub struct TrainOutcome {
    pub curve: Vec<CurveRow>,
    pub learner: Box<dyn Learner>,
    pub env_steps: u64,
    pub updates: u64,
}

/// Online training against `driver`.
pub fn train_loop(
    config: &TrainConfig,
    driver: &mut dyn EnvDriver,
) -> Result<TrainOutcome, AlgoError> {
    let layout = layout_for(config);
    let mut learner = build_learner(config, layout)?;
    let hyper = &config.hyper;
    let schedule = hyper.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5_5A5A);
    let mut buffer = ReplayBuffer::new(hyper.buffer_capacity, config.seed.wrapping_add(1));
    let mut curve = Vec::with_capacity(config.episodes.min(100_000) as usize);
    let mut steps = 0u64;
    let mut updates = 0u64;
    for episode in 0..config.episodes {
        let mut obs = driver.reset(episode)?;
        let mut team_return = 0.0;
        let mut loss_sum = 0.0;
        let mut loss_n = 0u64;
        loop {
            let epsilon = schedule.at(steps);
            let actions = learner.act(&obs, epsilon, &mut rng)?;
            let out = driver.step(&actions)?;
            team_return += out.rewards.iter().sum::<f64>();
            buffer.push(Transition {
                x: obs.concat(),
                actions,
                rewards: out.rewards,
                x_next: out.observations.concat(),
                done: out.terminal,
            });
            steps += 1;
            if buffer.len() >= hyper.batch_size && steps % hyper.train_every.max(1) == 0 {
                let batch = buffer.sample(hyper.batch_size);
                loss_sum += learner.update(&batch)?;
                loss_n += 1;
                updates += 1;
                if updates % hyper.target_sync.max(1) == 0 {
                    learner.sync_targets();
                }
            }
            obs = out.observations;
            if out.done || Some(steps) == config.max_env_steps {
                break;
            }
        }
        curve.push(CurveRow {
            episode,
            team_return,
            epsilon: schedule.at(steps),
            loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
        });
        if Some(steps) == config.max_env_steps {
            break;
        }
    }
    Ok(TrainOutcome {
        curve,
        learner,
        env_steps: steps,
        updates,
    })
}

/// Offline training over logged episodes: each episode's transitions are
/// inserted into replay and followed by one update per transition.
pub fn train_offline(
    config: &TrainConfig,
    episodes: &[Vec<Transition>],
) -> Result<TrainOutcome, AlgoError> {
    let layout = layout_for(config);
    for t in episodes.iter().flatten() {
        if t.x.len() != layout.joint_obs_len() || t.actions.len() != layout.n_agents {
            return Err(AlgoError::Shape(
                "dataset does not match the configured layout".into(),
            ));
        }
    }
    let mut learner = build_learner(config, layout)?;
    let hyper = &config.hyper;
    let mut buffer = ReplayBuffer::new(hyper.buffer_capacity, config.seed.wrapping_add(1));
    let mut curve = Vec::new();
    let mut updates = 0u64;
    let mut steps = 0u64;
    for (episode, transitions) in episodes.iter().enumerate().take(config.episodes as usize) {
        let mut loss_sum = 0.0;
        let mut loss_n = 0u64;
        for t in transitions {
            buffer.push(t.clone());
            steps += 1;
            if buffer.len() >= hyper.batch_size.min(buffer.capacity()) {
                let batch = buffer.sample(hyper.batch_size);
                loss_sum += learner.update(&batch)?;
                loss_n += 1;
                updates += 1;
                if updates % hyper.target_sync.max(1) == 0 {
                    learner.sync_targets();
                }
            }
        }
        curve.push(CurveRow {
            episode: episode as u64,
            team_return: transitions.iter().map(Transition::team_reward).sum(),
            epsilon: 0.0,
            loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
        });
    }
    Ok(TrainOutcome {
        curve,
        learner,
        env_steps: steps,
        updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(algorithm: Algorithm, episodes: u64) -> TrainConfig {
        TrainConfig {
            algorithm,
            hyper: Hyperparams {
                hidden: vec![8],
                batch_size: 4,
                epsilon_steps: 50,
                target_sync: 5,
                ..Hyperparams::default()
            },
            episodes,
            seed: 3,
            n_agents: 2,
            env: EnvironmentSpec {
                max_ticks: 12,
                ..EnvironmentSpec::default()
            },
            fixed_layout: false,
            max_env_steps: None,
        }
    }

    fn run(cfg: &TrainConfig) -> TrainOutcome {
        let mut driver =
            DirectDriver::new(cfg.env.clone(), cfg.n_agents, cfg.seed, cfg.fixed_layout);
        train_loop(cfg, &mut driver).unwrap()
    }

    #[test]
    fn every_algorithm_runs_and_is_deterministic() {
        for alg in [
            Algorithm::Dqn,
            Algorithm::Ddqn,
            Algorithm::D3maddpg,
            Algorithm::MixedCritic,
        ] {
            let cfg = config(alg, 6);
            let a = run(&cfg);
            let b = run(&cfg);
            assert_eq!(curve_to_csv(&a.curve), curve_to_csv(&b.curve), "{alg:?}");
            assert_eq!(a.learner.snapshot(), b.learner.snapshot());
            assert_eq!(a.curve.len(), 6);
            assert!(a.updates > 0);
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        for alg in [Algorithm::Dqn, Algorithm::D3maddpg, Algorithm::MixedCritic] {
            let mut cfg = config(alg, 4);
            cfg.hyper.critic_lr = 0.0;
            cfg.hyper.actor_lr = 0.0;
            let initial = build_learner(&cfg, layout_for(&cfg)).unwrap().snapshot();
            let out = run(&cfg);
            assert!(out.updates > 0);
            assert_eq!(out.learner.snapshot(), initial, "{alg:?}");
        }
    }

    #[test]
    fn target_equals_online_right_after_sync() {
        let mut cfg = config(Algorithm::D3maddpg, 1);
        cfg.hyper.target_sync = 1_000_000;
        let layout = layout_for(&cfg);
        let mut learner = build_learner(&cfg, layout).unwrap();
        let mut driver = DirectDriver::new(cfg.env.clone(), 2, 0, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buffer = ReplayBuffer::new(100, 0);
        let mut obs = driver.reset(0).unwrap();
        for _ in 0..8 {
            let a = learner.act(&obs, 0.5, &mut rng).unwrap();
            let out = driver.step(&a).unwrap();
            buffer.push(Transition {
                x: obs.concat(),
                actions: a,
                rewards: out.rewards.clone(),
                x_next: out.observations.concat(),
                done: out.done,
            });
            obs = out.observations;
        }
        let before = learner.target_snapshot();
        for _ in 0..5 {
            let batch = buffer.sample(4);
            learner.update(&batch).unwrap();
        }
        assert_eq!(learner.target_snapshot(), before);
        assert_ne!(learner.snapshot(), before);
        learner.sync_targets();
        assert_eq!(learner.target_snapshot(), learner.snapshot());
    }

    #[test]
    fn zero_episodes_yield_header_only() {
        let out = run(&config(Algorithm::Dqn, 0));
        assert_eq!(curve_to_csv(&out.curve), format!("{CURVE_HEADER}\n"));
    }

    #[test]
    fn checkpoints_use_expected_names() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&config(Algorithm::D3maddpg, 2));
        out.learner.save(dir.path()).unwrap();
        for name in [
            "actor_0.json",
            "actor_1.json",
            "critic_0.json",
            "critic_1.json",
        ] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let actor = ParamSet::load(&dir.path().join("actor_0.json")).unwrap();
        assert_eq!(actor.output_dim(), GridAction::COUNT);
        let mixed = run(&config(Algorithm::MixedCritic, 2));
        mixed.learner.save(dir.path()).unwrap();
        assert!(dir.path().join("mixer.json").exists());
    }

    #[test]
    fn offline_rejects_mismatched_dataset() {
        let cfg = config(Algorithm::Dqn, 1);
        let bad = vec![vec![Transition {
            x: vec![0.0; 3],
            actions: vec![0, 0],
            rewards: vec![0.0, 0.0],
            x_next: vec![0.0; 3],
            done: true,
        }]];
        assert!(matches!(
            train_offline(&cfg, &bad),
            Err(AlgoError::Shape(_))
        ));
    }

    #[test]
    fn episode_seeds_vary_unless_fixed() {
        assert_eq!(episode_seed(9, 0, true), episode_seed(9, 5, true));
        assert_ne!(episode_seed(9, 0, false), episode_seed(9, 1, false));
    }
}
