use rand::Rng;

/// One stored step. The next state keeps its history block once plus one
/// 8-wide block per candidate class, which is all the target max needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state_action: Vec<f32>,
    pub reward: f32,
    pub next_history: Vec<f32>,
    pub next_candidates: Vec<f32>,
    pub terminal: bool,
}

impl Transition {
    pub fn next_rows(&self, block: usize) -> usize {
        self.next_candidates.len() / block
    }

    /// Full next-state inputs, one row per candidate class.
    pub fn next_inputs(&self, block: usize, out: &mut Vec<f32>) {
        for c in self.next_candidates.chunks_exact(block) {
            out.extend_from_slice(&self.next_history);
            out.extend_from_slice(c);
        }
    }
}

/// Fixed-capacity FIFO buffer with a per-slot cache of the target-network
/// max, tagged with the target version it was computed under.
#[derive(Clone, Debug)]
pub struct Replay {
    capacity: usize,
    items: Vec<Transition>,
    cache: Vec<Option<(u64, f32)>>,
    head: usize,
}

impl Replay {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            cache: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
        }
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

    /// Appends, overwriting the oldest entry once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
            self.cache.push(None);
        } else {
            self.items[self.head] = t;
            self.cache[self.head] = None;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Entries oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (a, b) = self.items.split_at(self.head);
        b.iter().chain(a)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub(crate) fn cached(&self, i: usize, version: u64) -> Option<f32> {
        match self.cache[i] {
            Some((v, q)) if v == version => Some(q),
            _ => None,
        }
    }

    pub(crate) fn set_cached(&mut self, i: usize, version: u64, q: f32) {
        self.cache[i] = Some((version, q));
    }
}
