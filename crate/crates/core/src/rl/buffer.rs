use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constraints::ConstraintInstance;
use crate::Vector;

#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Vector,
    /// Policy output before the constraint mapping.
    pub pre_map_action: Vector,
    pub executed_action: Vector,
    /// Reward used for training (penalized for the "+" variants).
    pub reward: f64,
    pub next_obs: Vector,
    /// True termination only; time-limit cuts still bootstrap.
    pub done: bool,
    /// Feasible set at `obs`, carrying its anchor when one was computed.
    pub instance: Arc<ConstraintInstance>,
    pub next_instance: Arc<ConstraintInstance>,
}

impl Transition {
    /// Anchor computed once at rollout time and reused by every update.
    pub fn cached_center(&self) -> Option<&Vector> {
        self.instance.center()
    }
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self { items: Vec::with_capacity(capacity.min(1 << 16)), capacity, next: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
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

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices(&mut self, n: usize) -> Vec<usize> {
        assert!(!self.items.is_empty(), "sampling from an empty buffer");
        let len = self.items.len();
        (0..n).map(|_| self.rng.random_range(0..len)).collect()
    }

    pub fn sample(&mut self, n: usize) -> Vec<&Transition> {
        let idx = self.sample_indices(n);
        idx.into_iter().map(|i| &self.items[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ActionSpace;

    fn dummy(tag: f64) -> Transition {
        let inst = Arc::new(ConstraintInstance::box_only(ActionSpace::unit(1)));
        Transition {
            obs: Vector::from_element(1, tag),
            pre_map_action: Vector::zeros(1),
            executed_action: Vector::zeros(1),
            reward: tag,
            next_obs: Vector::zeros(1),
            done: false,
            instance: inst.clone(),
            next_instance: inst,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3, 0);
        for k in 0..5 {
            b.push(dummy(k as f64));
        }
        assert_eq!(b.len(), 3);
        let mut tags: Vec<f64> = (0..3).map(|i| b.get(i).reward).collect();
        tags.sort_by(f64::total_cmp);
        assert_eq!(tags, [2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(10, 7);
        for k in 0..10 {
            b.push(dummy(k as f64));
        }
        let n = 100_000;
        let mut counts = [0usize; 10];
        for i in b.sample_indices(n) {
            counts[i] += 1;
        }
        // chi-square with 9 degrees of freedom, 0.999 quantile is 27.88
        let e = n as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 27.88, "{chi2}");
    }

    #[test]
    fn same_seed_same_batches() {
        let mut a = ReplayBuffer::new(50, 3);
        let mut b = ReplayBuffer::new(50, 3);
        for k in 0..50 {
            a.push(dummy(k as f64));
            b.push(dummy(k as f64));
        }
        assert_eq!(a.sample_indices(64), b.sample_indices(64));
    }
}
