//! Capacity-bounded replay buffers (FIFO and reservoir), replay sampling for
//! batch composition, and the ADRep online capacity controller.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{OclError, Result};
use crate::stream::Example;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferPolicy {
    Fifo,
    Reservoir,
}

impl BufferPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            BufferPolicy::Fifo => "fifo",
            BufferPolicy::Reservoir => "reservoir",
        }
    }
}

/// A capacity-bounded store of stream examples.
///
/// FIFO keeps exactly the most recent `min(t, R)` offered examples in offer
/// order. Reservoir keeps a uniform sample of everything offered: the t-th
/// offer draws `r ~ Uniform{1..t}` and replaces the r-th stored item when
/// `r <= R` (insertion while below capacity coincides with the `t <= R` rule
/// as long as the buffer has not been resized).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    policy: BufferPolicy,
    capacity: usize,
    items: VecDeque<Example>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(policy: BufferPolicy, capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(OclError::config("replay capacity must be >= 1"));
        }
        Ok(ReplayBuffer {
            policy,
            capacity,
            items: VecDeque::new(),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn policy(&self) -> BufferPolicy {
        self.policy
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of examples offered so far.
    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> impl Iterator<Item = &Example> {
        self.items.iter()
    }

    /// Offers one example to the buffer.
    pub fn offer(&mut self, example: &Example) {
        self.seen += 1;
        match self.policy {
            BufferPolicy::Fifo => {
                if self.items.len() == self.capacity {
                    self.items.pop_front();
                }
                self.items.push_back(example.clone());
            }
            BufferPolicy::Reservoir => {
                if self.items.len() < self.capacity {
                    self.items.push_back(example.clone());
                } else {
                    let r = self.rng.random_range(1..=self.seen);
                    if r <= self.capacity as u64 {
                        self.items[r as usize - 1] = example.clone();
                    }
                }
            }
        }
    }

    /// Samples `n` items uniformly with replacement; an empty buffer yields
    /// an empty list so callers fall back to stream-only training.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| self.items[rng.random_range(0..self.items.len())].clone())
            .collect()
    }

    /// Changes capacity. Shrinking drops the oldest items (FIFO) or a uniform
    /// random subset (reservoir); growing keeps contents and the offer count.
    pub fn resize(&mut self, new_capacity: usize) -> Result<()> {
        if new_capacity == 0 {
            return Err(OclError::config("replay capacity must be >= 1"));
        }
        if new_capacity < self.items.len() {
            match self.policy {
                BufferPolicy::Fifo => {
                    while self.items.len() > new_capacity {
                        self.items.pop_front();
                    }
                }
                BufferPolicy::Reservoir => {
                    while self.items.len() > new_capacity {
                        let victim = self.rng.random_range(0..self.items.len());
                        self.items.swap_remove_back(victim);
                    }
                }
            }
        }
        self.capacity = new_capacity;
        Ok(())
    }

    /// Checkpoint: policy tag, capacity, offer count, and the stored item ids
    /// (items are re-resolved from the stream store by id).
    pub fn checkpoint(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "oclbuffer 1 policy={} capacity={} seen={}",
            self.policy.name(),
            self.capacity,
            self.seen
        )
        .expect("write to string");
        let ids: Vec<String> = self.items.iter().map(|e| e.id.to_string()).collect();
        writeln!(out, "{}", ids.join(",")).expect("write to string");
        out
    }
}

/// Configuration for the ADRep capacity controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdRepConfig {
    /// Decision interval N' in training steps.
    pub interval: u64,
    /// Dead-band threshold.
    pub epsilon: f64,
    pub r_min: usize,
    pub r_max: usize,
}

/// ADRep: halves the buffer when the model tracks the stream better than the
/// replay data by more than epsilon, doubles it in the opposite case, and
/// holds inside the dead-band. Running accuracies reset at each decision.
#[derive(Debug, Clone)]
pub struct AdRep {
    config: AdRepConfig,
    acc_stream: f64,
    acc_replay: f64,
    observations: u64,
}

impl AdRep {
    pub fn new(config: AdRepConfig) -> Result<Self> {
        if config.interval == 0 {
            return Err(OclError::config("adrep interval must be >= 1"));
        }
        if !(0.0..=1.0).contains(&config.epsilon) {
            return Err(OclError::config("adrep epsilon must be in [0, 1]"));
        }
        if config.r_min == 0 || config.r_min > config.r_max {
            return Err(OclError::config("adrep requires 1 <= r_min <= r_max"));
        }
        Ok(AdRep {
            config,
            acc_stream: 0.0,
            acc_replay: 0.0,
            observations: 0,
        })
    }

    pub fn config(&self) -> AdRepConfig {
        self.config
    }

    pub fn acc_stream(&self) -> f64 {
        self.acc_stream
    }

    pub fn acc_replay(&self) -> f64 {
        self.acc_replay
    }

    /// Observations accumulated in the current interval.
    pub fn observations(&self) -> u64 {
        self.observations
    }

    /// Incremental-mean update of both running accuracies.
    pub fn observe(&mut self, stream_correct: f64, replay_correct: f64) {
        debug_assert!((0.0..=1.0).contains(&stream_correct));
        debug_assert!((0.0..=1.0).contains(&replay_correct));
        let k = (self.observations + 1) as f64;
        self.acc_stream = ((k - 1.0) * self.acc_stream + stream_correct) / k;
        self.acc_replay = ((k - 1.0) * self.acc_replay + replay_correct) / k;
        self.observations += 1;
    }

    /// True once a full interval of observations has accumulated.
    pub fn ready(&self) -> bool {
        self.observations >= self.config.interval
    }

    /// Applies the capacity rule to `current` and resets the interval state.
    /// Halving floors; both directions clamp to `[r_min, r_max]`.
    pub fn decide(&mut self, current: usize) -> usize {
        let next = if self.acc_stream > self.acc_replay + self.config.epsilon {
            (current / 2).max(self.config.r_min)
        } else if self.acc_stream < self.acc_replay - self.config.epsilon {
            (current * 2).min(self.config.r_max)
        } else {
            current
        };
        self.acc_stream = 0.0;
        self.acc_replay = 0.0;
        self.observations = 0;
        next.clamp(self.config.r_min, self.config.r_max)
    }
}
