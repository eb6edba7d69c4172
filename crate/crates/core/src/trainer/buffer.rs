use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// FIFO ring of dataset indices assigned to one expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBuffer {
    capacity: usize,
    dataset_len: usize,
    items: VecDeque<usize>,
}

impl ExpertBuffer {
    pub fn new(capacity: usize, dataset_len: usize) -> Self {
        Self {
            capacity,
            dataset_len,
            items: VecDeque::with_capacity(capacity),
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

    pub fn items(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().copied()
    }

    /// Appends indices, evicting the oldest beyond capacity.
    pub fn push(&mut self, indices: &[usize]) -> Result<()> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.dataset_len) {
            return Err(Error::contract(format!(
                "buffer index {bad} outside dataset of {}",
                self.dataset_len
            )));
        }
        for &i in indices {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(i);
        }
        Ok(())
    }

    /// Draws `n` stored indices uniformly: without replacement when at
    /// least `n` are stored, otherwise with replacement (warm-up, flagged
    /// by the returned bool).
    pub fn draw(&self, n: usize, rng: &mut impl Rng) -> Result<(Vec<usize>, bool)> {
        if self.items.is_empty() {
            return Err(Error::contract("draw from an empty expert buffer"));
        }
        if self.items.len() >= n {
            Ok((sample(rng, self.items.len(), n).into_iter().map(|j| self.items[j]).collect(), false))
        } else {
            Ok(((0..n).map(|_| self.items[rng.random_range(0..self.items.len())]).collect(), true))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fifo_eviction_keeps_newest() {
        let mut b = ExpertBuffer::new(3, 10);
        b.push(&[1, 2]).unwrap();
        b.push(&[3, 4]).unwrap();
        assert_eq!(b.items().collect::<Vec<_>>(), vec![2, 3, 4]);
        assert!(b.push(&[10]).is_err());
    }

    #[test]
    fn draw_flags_warm_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ExpertBuffer::new(8, 10);
        assert!(b.draw(1, &mut rng).is_err());
        b.push(&[5, 6]).unwrap();
        let (d, warm) = b.draw(4, &mut rng).unwrap();
        assert!(warm && d.len() == 4 && d.iter().all(|i| [5, 6].contains(i)));
        b.push(&[7, 8]).unwrap();
        let (mut d, warm) = b.draw(4, &mut rng).unwrap();
        d.sort();
        assert!(!warm);
        assert_eq!(d, vec![5, 6, 7, 8]);
    }
}
