//! Planning oracles computed independently of the learners.

use std::collections::{HashSet, VecDeque};

use trialmesh::environment::{EnvironmentSpec, GridAction, GridState};

fn apply(a: GridAction, (x, y): (usize, usize), w: usize, h: usize) -> (usize, usize) {
    match a {
        GridAction::North => (x, y.saturating_sub(1)),
        GridAction::South => (x, (y + 1).min(h - 1)),
        GridAction::East => ((x + 1).min(w - 1), y),
        GridAction::West => (x.saturating_sub(1), y),
        GridAction::Stay => (x, y),
    }
}

/// Exact value iteration for one agent and one target over (cell, visited).
/// Returns, for every cell other than the target, the set of optimal
/// action indices.
pub fn single_agent_optimal_actions(
    spec: &EnvironmentSpec,
    target: (usize, usize),
    gamma: f64,
) -> Vec<((usize, usize), Vec<usize>)> {
    let (w, h) = (spec.width, spec.height);
    let cells: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
    // visited = true is terminal with value 0
    let mut v = vec![0.0f64; w * h];
    let q = |v: &[f64], c: (usize, usize), a: GridAction| {
        let n = apply(a, c, w, h);
        if n == target {
            spec.step_cost + spec.target_reward
        } else {
            spec.step_cost + gamma * v[n.1 * w + n.0]
        }
    };
    for _ in 0..10_000 {
        let mut delta = 0.0f64;
        let mut next = v.clone();
        for &c in &cells {
            if c == target {
                continue;
            }
            let best = GridAction::ALL
                .iter()
                .map(|&a| q(&v, c, a))
                .fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[c.1 * w + c.0]).abs());
            next[c.1 * w + c.0] = best;
        }
        v = next;
        if delta < 1e-14 {
            break;
        }
    }
    cells
        .iter()
        .filter(|&&c| c != target)
        .map(|&c| {
            let qs: Vec<f64> = GridAction::ALL.iter().map(|&a| q(&v, c, a)).collect();
            let best = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let opt = (0..qs.len()).filter(|&i| qs[i] >= best - 1e-9).collect();
            (c, opt)
        })
        .collect()
}

/// Fewest ticks for the team to visit every target, by breadth-first search
/// over joint (positions, visited-mask) states. `None` if not reachable
/// within `max_ticks`.
pub fn min_joint_ticks(spec: &EnvironmentSpec, start: &GridState) -> Option<u64> {
    let (w, h) = (spec.width, spec.height);
    let n_t = start.targets.len();
    let full: u32 = (1u32 << n_t) - 1;
    let mask0 = start
        .targets
        .iter()
        .enumerate()
        .filter(|(_, t)| t.visited)
        .fold(0u32, |m, (k, _)| m | (1 << k));
    if mask0 == full {
        return Some(0);
    }
    let n = start.positions.len();
    let mut seen: HashSet<(Vec<(usize, usize)>, u32)> = HashSet::new();
    let mut queue = VecDeque::new();
    seen.insert((start.positions.clone(), mask0));
    queue.push_back((start.positions.clone(), mask0, 0u64));
    while let Some((pos, mask, d)) = queue.pop_front() {
        if d >= spec.max_ticks {
            continue;
        }
        let total = GridAction::COUNT.pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let mut next = Vec::with_capacity(n);
            for p in &pos {
                next.push(apply(GridAction::ALL[c % GridAction::COUNT], *p, w, h));
                c /= GridAction::COUNT;
            }
            let mut m = mask;
            for p in &next {
                for (k, t) in start.targets.iter().enumerate() {
                    if (t.x, t.y) == *p {
                        m |= 1 << k;
                    }
                }
            }
            if m == full {
                return Some(d + 1);
            }
            if seen.insert((next.clone(), m)) {
                queue.push_back((next, m, d + 1));
            }
        }
    }
    None
}

/// Best achievable undiscounted team return for a layout.
pub fn optimal_team_return(spec: &EnvironmentSpec, start: &GridState) -> f64 {
    let n = start.positions.len() as f64;
    let ticks = min_joint_ticks(spec, start).expect("layout solvable within max_ticks");
    start.targets.len() as f64 * spec.target_reward + n * ticks as f64 * spec.step_cost
}
