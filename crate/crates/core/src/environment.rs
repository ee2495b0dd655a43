//! Cooperative target-coverage grid world.
//!
//! Drones (learning agents and an optional human-piloted drone) move on a
//! `width x height` grid and must visit every target. Coordinates are
//! `(x, y)` with `(0, 0)` in the top-left corner; `North` decreases `y`.

use rand::seq::index;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("expected {expected} actions, got {actual}")]
    ActionCountMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub width: usize,
    pub height: usize,
    pub n_targets: usize,
    pub step_cost: f64,
    pub target_reward: f64,
    pub max_ticks: u64,
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            n_targets: 3,
            step_cost: -0.01,
            target_reward: 1.0,
            max_ticks: 50,
        }
    }
}

impl EnvironmentSpec {
    pub fn validate(&self, n_actors: usize) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidSpec(m));
        if self.width < 2 || self.height < 2 {
            return bad(format!(
                "grid {}x{} smaller than 2x2",
                self.width, self.height
            ));
        }
        if n_actors == 0 {
            return bad("no actors".into());
        }
        if self.n_targets < 1 {
            return bad("n_targets must be at least 1".into());
        }
        let cells = self.width * self.height;
        if n_actors > cells || self.n_targets > cells - n_actors {
            return bad(format!(
                "{} targets and {} actors do not fit in {} cells",
                self.n_targets, n_actors, cells
            ));
        }
        if !(self.step_cost <= 0.0) {
            return bad("step_cost must be <= 0".into());
        }
        if !(self.target_reward > 0.0 && self.target_reward.is_finite()) {
            return bad("target_reward must be positive".into());
        }
        if self.max_ticks < 1 {
            return bad("max_ticks must be at least 1".into());
        }
        Ok(())
    }

    /// Length of the per-actor observation vector.
    pub fn observation_len(&self, n_actors: usize) -> usize {
        self.width * self.height + 2 * (n_actors - 1) + 3 * self.n_targets + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GridAction {
    North,
    South,
    East,
    West,
    Stay,
}

impl GridAction {
    pub const ALL: [GridAction; 5] = [
        GridAction::North,
        GridAction::South,
        GridAction::East,
        GridAction::West,
        GridAction::Stay,
    ];
    pub const COUNT: usize = 5;
    pub const NOOP: GridAction = GridAction::Stay;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<GridAction> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            GridAction::North => "North",
            GridAction::South => "South",
            GridAction::East => "East",
            GridAction::West => "West",
            GridAction::Stay => "Stay",
        }
    }

    pub fn from_name(s: &str) -> Option<GridAction> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    fn apply(self, (x, y): (usize, usize), width: usize, height: usize) -> (usize, usize) {
        match self {
            GridAction::North => (x, y.saturating_sub(1)),
            GridAction::South => (x, (y + 1).min(height - 1)),
            GridAction::East => ((x + 1).min(width - 1), y),
            GridAction::West => (x.saturating_sub(1), y),
            GridAction::Stay => (x, y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Target {
    pub x: usize,
    pub y: usize,
    pub visited: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridState {
    pub positions: Vec<(usize, usize)>,
    pub targets: Vec<Target>,
    pub tick: u64,
}

impl GridState {
    pub fn visited_count(&self) -> usize {
        self.targets.iter().filter(|t| t.visited).count()
    }

    pub fn all_visited(&self) -> bool {
        self.targets.iter().all(|t| t.visited)
    }
}

/// Renderable view of the grid, carried in every Observation body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub width: usize,
    pub height: usize,
    pub tick: u64,
    pub positions: Vec<[usize; 2]>,
    pub targets: Vec<Target>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: GridState,
    pub rewards: Vec<f64>,
    pub done: bool,
}

/// Cells in placement order: the four corners, then the rest row-major.
fn placement_order(width: usize, height: usize) -> Vec<(usize, usize)> {
    let corners = [
        (0, 0),
        (width - 1, height - 1),
        (width - 1, 0),
        (0, height - 1),
    ];
    let mut cells: Vec<(usize, usize)> = corners.to_vec();
    for y in 0..height {
        for x in 0..width {
            if !corners.contains(&(x, y)) {
                cells.push((x, y));
            }
        }
    }
    cells
}

pub fn reset(
    spec: &EnvironmentSpec,
    n_actors: usize,
    seed: u64,
) -> Result<(GridState, Vec<Vec<f64>>), EnvError> {
    spec.validate(n_actors)?;
    let positions: Vec<(usize, usize)> = placement_order(spec.width, spec.height)
        .into_iter()
        .take(n_actors)
        .collect();
    let free: Vec<(usize, usize)> = (0..spec.height)
        .flat_map(|y| (0..spec.width).map(move |x| (x, y)))
        .filter(|c| !positions.contains(c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, free.len(), spec.n_targets).into_vec();
    picked.sort_unstable();
    let targets = picked
        .into_iter()
        .map(|i| Target {
            x: free[i].0,
            y: free[i].1,
            visited: false,
        })
        .collect();
    let state = GridState {
        positions,
        targets,
        tick: 0,
    };
    let obs = observe_all(spec, &state);
    Ok((state, obs))
}

pub fn step(
    spec: &EnvironmentSpec,
    state: &GridState,
    actions: &[GridAction],
) -> Result<StepOutcome, EnvError> {
    let n = state.positions.len();
    if actions.len() != n {
        return Err(EnvError::ActionCountMismatch {
            expected: n,
            actual: actions.len(),
        });
    }
    let mut next = state.clone();
    for (pos, action) in next.positions.iter_mut().zip(actions) {
        *pos = action.apply(*pos, spec.width, spec.height);
    }
    let mut rewards = vec![spec.step_cost; n];
    // actor order gives the lowest index priority on shared targets
    for (i, pos) in next.positions.iter().enumerate() {
        if let Some(t) = next
            .targets
            .iter_mut()
            .find(|t| !t.visited && (t.x, t.y) == *pos)
        {
            t.visited = true;
            rewards[i] += spec.target_reward;
        }
    }
    next.tick += 1;
    let done = next.all_visited() || next.tick >= spec.max_ticks;
    Ok(StepOutcome {
        state: next,
        rewards,
        done,
    })
}

/// Offset `to - from` mapped from `[-(extent-1), extent-1]` onto `[0, 1]`.
fn offset(from: usize, to: usize, extent: usize) -> f64 {
    let d = to as f64 - from as f64;
    (d / (extent - 1) as f64 + 1.0) / 2.0
}

/// Fixed-length observation for actor `i`: own cell (one-hot), other actors'
/// offsets, per-target (offset, unvisited flag), and elapsed-time fraction.
/// Unvisited targets come nearest first; visited ones fill the remaining
/// slots as a zero offset with flag 0.
pub fn observe(spec: &EnvironmentSpec, state: &GridState, i: usize) -> Vec<f64> {
    let (w, h) = (spec.width, spec.height);
    let (sx, sy) = state.positions[i];
    let mut v = Vec::with_capacity(spec.observation_len(state.positions.len()));
    // own cell one-hot, row-major
    v.resize(w * h, 0.0);
    v[sy * w + sx] = 1.0;
    for (j, &(x, y)) in state.positions.iter().enumerate() {
        if j != i {
            v.push(offset(sx, x, w));
            v.push(offset(sy, y, h));
        }
    }
    let mut open: Vec<&Target> = state.targets.iter().filter(|t| !t.visited).collect();
    open.sort_by_key(|t| (sx.abs_diff(t.x) + sy.abs_diff(t.y), t.y, t.x));
    for t in &open {
        v.extend([offset(sx, t.x, w), offset(sy, t.y, h), 1.0]);
    }
    for _ in open.len()..state.targets.len() {
        v.extend([0.5, 0.5, 0.0]);
    }
    v.push((state.tick as f64 / spec.max_ticks as f64).min(1.0));
    v
}

pub fn observe_all(spec: &EnvironmentSpec, state: &GridState) -> Vec<Vec<f64>> {
    (0..state.positions.len())
        .map(|i| observe(spec, state, i))
        .collect()
}

pub fn snapshot(spec: &EnvironmentSpec, state: &GridState) -> Snapshot {
    Snapshot {
        width: spec.width,
        height: spec.height,
        tick: state.tick,
        positions: state.positions.iter().map(|&(x, y)| [x, y]).collect(),
        targets: state.targets.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> EnvironmentSpec {
        EnvironmentSpec::default()
    }

    #[test]
    fn reset_is_deterministic() {
        let a = reset(&spec(), 3, 99).unwrap();
        let b = reset(&spec(), 3, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.positions, vec![(0, 0), (4, 4), (4, 0)]);
    }

    #[test]
    fn boundary_fill_uses_every_free_cell() {
        let s = EnvironmentSpec {
            n_targets: 23,
            ..spec()
        };
        let (state, _) = reset(&s, 2, 5).unwrap();
        assert_eq!(state.targets.len(), 23);
        for t in &state.targets {
            assert!(!state.positions.contains(&(t.x, t.y)));
        }
        let too_many = EnvironmentSpec {
            n_targets: 24,
            ..spec()
        };
        assert!(matches!(
            reset(&too_many, 2, 5),
            Err(EnvError::InvalidSpec(_))
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        let cases = [
            EnvironmentSpec { width: 1, ..spec() },
            EnvironmentSpec {
                n_targets: 0,
                ..spec()
            },
            EnvironmentSpec {
                step_cost: 0.1,
                ..spec()
            },
            EnvironmentSpec {
                target_reward: 0.0,
                ..spec()
            },
            EnvironmentSpec {
                max_ticks: 0,
                ..spec()
            },
        ];
        for s in cases {
            assert!(reset(&s, 1, 0).is_err(), "{s:?}");
        }
    }

    #[test]
    fn off_grid_move_clamps() {
        let (state, _) = reset(&spec(), 1, 0).unwrap();
        assert_eq!(state.positions[0], (0, 0));
        let out = step(&spec(), &state, &[GridAction::West]).unwrap();
        assert_eq!(out.state.positions[0], (0, 0));
        assert_eq!(out.rewards, vec![spec().step_cost]);
        let out = step(&spec(), &state, &[GridAction::North]).unwrap();
        assert_eq!(out.state.positions[0], (0, 0));
    }

    fn handmade(targets: &[(usize, usize)], positions: &[(usize, usize)]) -> GridState {
        GridState {
            positions: positions.to_vec(),
            targets: targets
                .iter()
                .map(|&(x, y)| Target {
                    x,
                    y,
                    visited: false,
                })
                .collect(),
            tick: 0,
        }
    }

    #[test]
    fn entering_target_pays_reward_plus_step_cost() {
        let s = EnvironmentSpec {
            n_targets: 2,
            ..spec()
        };
        let state = handmade(&[(1, 0), (3, 3)], &[(0, 0)]);
        let out = step(&s, &state, &[GridAction::East]).unwrap();
        assert_eq!(out.rewards, vec![1.0 + -0.01]);
        assert!(out.state.targets[0].visited);
        assert!(!out.done);
        // revisiting pays nothing
        let back = step(&s, &out.state, &[GridAction::West]).unwrap();
        let again = step(&s, &back.state, &[GridAction::East]).unwrap();
        assert_eq!(again.rewards, vec![-0.01]);
    }

    #[test]
    fn final_target_ends_episode() {
        let s = EnvironmentSpec {
            n_targets: 1,
            ..spec()
        };
        let state = handmade(&[(0, 1)], &[(0, 0)]);
        let out = step(&s, &state, &[GridAction::South]).unwrap();
        assert!(out.done);
        assert!(out.state.all_visited());
    }

    #[test]
    fn max_ticks_ends_episode() {
        let s = EnvironmentSpec {
            n_targets: 1,
            max_ticks: 2,
            ..spec()
        };
        let state = handmade(&[(4, 4)], &[(0, 0)]);
        let a = step(&s, &state, &[GridAction::Stay]).unwrap();
        assert!(!a.done);
        let b = step(&s, &a.state, &[GridAction::Stay]).unwrap();
        assert!(b.done);
    }

    #[test]
    fn simultaneous_entry_goes_to_lowest_index() {
        let s = EnvironmentSpec {
            n_targets: 2,
            ..spec()
        };
        let state = handmade(&[(1, 1), (4, 4)], &[(1, 2), (1, 0)]);
        let out = step(&s, &state, &[GridAction::North, GridAction::South]).unwrap();
        assert_eq!(out.rewards, vec![0.99, -0.01]);
    }

    #[test]
    fn action_count_checked() {
        let (state, _) = reset(&spec(), 2, 0).unwrap();
        assert_eq!(
            step(&spec(), &state, &[GridAction::Stay]).unwrap_err(),
            EnvError::ActionCountMismatch {
                expected: 2,
                actual: 1
            }
        );
    }

    #[test]
    fn observations_are_fixed_length_and_normalized() {
        let (mut state, obs) = reset(&spec(), 3, 4).unwrap();
        for o in &obs {
            assert_eq!(o.len(), spec().observation_len(3));
        }
        for _ in 0..60 {
            let out = step(
                &spec(),
                &state,
                &[GridAction::South, GridAction::West, GridAction::North],
            )
            .unwrap();
            state = out.state;
            for o in observe_all(&spec(), &state) {
                assert_eq!(o.len(), spec().observation_len(3));
                assert!(o.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn action_names_round_trip() {
        for a in GridAction::ALL {
            assert_eq!(GridAction::from_name(a.name()), Some(a));
            assert_eq!(GridAction::from_index(a.index()), Some(a));
        }
        assert_eq!(GridAction::from_index(5), None);
    }
}
