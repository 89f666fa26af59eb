//! Uniform ring-buffer replay with n-step returns.

use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition<A> {
    pub state: usize,
    pub actions: A,
    pub reward: f64,
    pub next_state: usize,
    /// Terminal: no bootstrap from `next_state`.
    pub done: bool,
    /// Time limit: bootstrap from `next_state`, but the episode ends here.
    pub truncated: bool,
}

/// Discounted sum of up to `n` rewards starting at a sampled transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NStep {
    pub reward: f64,
    pub next_state: usize,
    /// `gamma^k` for the `k` rewards summed.
    pub discount: f64,
    pub terminal: bool,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer<A> {
    capacity: usize,
    data: Vec<Transition<A>>,
    head: usize,
    pub n_step: usize,
}

impl<A: Clone> ReplayBuffer<A> {
    pub fn new(capacity: usize, n_step: usize) -> Self {
        assert!(capacity > 0 && n_step > 0, "capacity and n_step must be positive");
        Self { capacity, data: Vec::with_capacity(capacity.min(1 << 16)), head: 0, n_step }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, t: Transition<A>) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.head] = t;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    /// Transition `i` in age order, 0 being the oldest stored.
    pub fn get(&self, i: usize) -> &Transition<A> {
        let start = if self.data.len() < self.capacity { 0 } else { self.head };
        &self.data[(start + i) % self.data.len()]
    }

    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..batch).map(|_| rng.random_range(0..self.len())).collect()
    }

    /// n-step return from transition `i`, stopping at episode ends and at the newest transition.
    pub fn n_step_return(&self, i: usize, gamma: f64) -> NStep {
        let mut reward = 0.0;
        let mut discount = 1.0;
        let mut k = i;
        loop {
            let t = self.get(k);
            reward += discount * t.reward;
            discount *= gamma;
            let last = t.done || t.truncated || k + 1 - i >= self.n_step || k + 1 >= self.len();
            if last {
                return NStep { reward, next_state: t.next_state, discount, terminal: t.done };
            }
            k += 1;
        }
    }
}

/// `target <- tau * online + (1 - tau) * target`.
pub fn polyak(target: &mut [f64], online: &[f64], tau: f64) {
    for (t, o) in target.iter_mut().zip(online) {
        *t = tau * o + (1.0 - tau) * *t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(state: usize, reward: f64, done: bool, truncated: bool) -> Transition<()> {
        Transition { state, actions: (), reward, next_state: state + 1, done, truncated }
    }

    #[test]
    fn n_step_targets_match_brute_force() {
        let mut b = ReplayBuffer::new(10, 3);
        // episode A: three steps ending in a terminal; episode B: two steps ending at the time limit
        b.push(tr(0, 1.0, false, false));
        b.push(tr(1, 2.0, false, false));
        b.push(tr(2, 4.0, true, false));
        b.push(tr(10, -1.0, false, false));
        b.push(tr(11, 3.0, false, true));
        let g: f64 = 0.9;
        let a0 = b.n_step_return(0, g);
        assert_eq!(a0.reward, 1.0 + g * 2.0 + g * g * 4.0);
        assert!(a0.terminal);
        assert_eq!(a0.next_state, 3);
        assert_eq!(a0.discount, g.powi(3));
        let a1 = b.n_step_return(1, g);
        assert_eq!(a1.reward, 2.0 + g * 4.0);
        assert!(a1.terminal);
        let b0 = b.n_step_return(3, g);
        assert_eq!(b0.reward, -1.0 + g * 3.0);
        assert!(!b0.terminal);
        assert_eq!(b0.next_state, 12);
        assert_eq!(b0.discount, g * g);
    }

    #[test]
    fn one_step_terminal_target_is_reward() {
        let mut b = ReplayBuffer::new(4, 1);
        b.push(tr(0, 2.5, true, false));
        let t = b.n_step_return(0, 0.99);
        assert_eq!((t.reward, t.terminal), (2.5, true));
    }

    #[test]
    fn ring_buffer_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3, 1);
        for s in 0..5 {
            b.push(tr(s, s as f64, false, false));
        }
        assert_eq!(b.len(), 3);
        assert_eq!((0..3).map(|i| b.get(i).state).collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn polyak_update() {
        let mut t = [0.0, 1.0];
        polyak(&mut t, &[1.0, 1.0], 0.005);
        assert_eq!(t, [0.005, 1.0]);
    }
}
