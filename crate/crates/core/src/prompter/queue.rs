use rand::Rng;
use rand_distr::StandardNormal;

use super::losses::{l2_norm, UNIT_NORM_TOL};
use crate::error::{invalid, shape_err, Result};

/// Fixed-capacity FIFO of unit-norm keys stored in a ring buffer.
#[derive(Clone, Debug)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    keys: Vec<f64>,
    len: usize,
    /// Slot the next key is written to. When full it also holds the oldest key.
    cursor: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(invalid!("queue needs positive capacity and dim, got {capacity}x{dim}"));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            keys: vec![0.0; capacity * dim],
            len: 0,
            cursor: 0,
        })
    }

    /// A full queue of random unit keys, so the first steps see a complete
    /// set of negatives.
    pub fn random(capacity: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut q = Self::new(capacity, dim)?;
        for _ in 0..capacity {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = l2_norm(&v).max(1e-12);
            v.iter_mut().for_each(|x| *x /= n);
            q.enqueue(&v)?;
        }
        Ok(q)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Inserts `key`, evicting the oldest entry once the queue is full.
    pub fn enqueue(&mut self, key: &[f64]) -> Result<()> {
        if key.len() != self.dim {
            return Err(shape_err!("queue holds {}-d keys, got {}", self.dim, key.len()));
        }
        let n = l2_norm(key);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(invalid!("queue keys must be unit-norm, got ‖k‖ = {n}"));
        }
        self.keys[self.cursor * self.dim..(self.cursor + 1) * self.dim].copy_from_slice(key);
        self.cursor = (self.cursor + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    /// Keys from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        let start = if self.len == self.capacity { self.cursor } else { 0 };
        (0..self.len).map(move |i| {
            let slot = (start + i) % self.capacity;
            &self.keys[slot * self.dim..(slot + 1) * self.dim]
        })
    }

    /// Keys from oldest to newest, flattened.
    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().flatten().copied().collect()
    }

    /// Rebuilds a queue from [`NegativeQueue::to_flat`] output.
    pub fn from_flat(capacity: usize, dim: usize, flat: &[f64]) -> Result<Self> {
        if dim == 0 || !flat.len().is_multiple_of(dim) || flat.len() / dim > capacity {
            return Err(shape_err!("{} values do not fit a {capacity}x{dim} queue", flat.len()));
        }
        let mut q = Self::new(capacity, dim)?;
        for k in flat.chunks_exact(dim) {
            q.enqueue(k)?;
        }
        Ok(q)
    }
}

/// Queues are equal when they hold the same keys in the same FIFO order.
impl PartialEq for NegativeQueue {
    fn eq(&self, other: &Self) -> bool {
        self.capacity == other.capacity && self.dim == other.dim && self.iter().eq(other.iter())
    }
}
