use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One joint experience tuple for centralized training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Concatenated per-actor observations.
    pub x: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub x_next: Vec<f64>,
    pub done: bool,
}

impl Transition {
    pub fn n_agents(&self) -> usize {
        self.actions.len()
    }

    pub fn team_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Fixed-capacity FIFO replay memory with seeded uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `m` draws with replacement. Empty buffer yields an empty batch.
    pub fn sample(&mut self, m: usize) -> Vec<Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..m)
            .map(|_| {
                let i = self.rng.gen_range(0..self.items.len());
                self.items[i].clone()
            })
            .collect()
    }
}
