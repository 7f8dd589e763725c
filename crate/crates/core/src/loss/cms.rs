//! Count-min sketch over `u64` item ids.

use crate::rng::{mix, splitmix64};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountMinSketch {
    width: usize,
    depth: usize,
    counters: Vec<u64>,
    total: u64,
    seeds: Vec<u64>,
}

impl CountMinSketch {
    pub fn new(width: usize, depth: usize, seed: u64) -> Self {
        assert!(width >= 1 && depth >= 1, "sketch dimensions must be positive");
        let seeds = (0..depth as u64).map(|r| mix(seed, &[r])).collect();
        CountMinSketch {
            width,
            depth,
            counters: vec![0; width * depth],
            total: 0,
            seeds,
        }
    }

    /// Rebuilds a sketch from persisted parts.
    pub fn from_parts(width: usize, depth: usize, seeds: Vec<u64>, counters: Vec<u64>, total: u64) -> Option<Self> {
        (width >= 1 && depth >= 1 && seeds.len() == depth && counters.len() == width * depth).then_some(CountMinSketch {
            width,
            depth,
            counters,
            total,
            seeds,
        })
    }

    #[inline]
    fn slot(&self, row: usize, item: u64) -> usize {
        row * self.width + (splitmix64(item ^ self.seeds[row]) % self.width as u64) as usize
    }

    pub fn update(&mut self, item: u64) {
        for r in 0..self.depth {
            let s = self.slot(r, item);
            self.counters[s] += 1;
        }
        self.total += 1;
    }

    /// Never below the true count.
    pub fn estimate(&self, item: u64) -> u64 {
        (0..self.depth)
            .map(|r| self.counters[self.slot(r, item)])
            .min()
            .unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn counters(&self) -> &[u64] {
        &self.counters
    }

    pub fn row_sum(&self, row: usize) -> u64 {
        self.counters[row * self.width..(row + 1) * self.width].iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    #[test]
    fn fresh_sketch_estimates_zero() {
        let s = CountMinSketch::new(64, 4, 1);
        assert_eq!(s.estimate(12345), 0);
        assert_eq!(s.total(), 0);
    }

    #[test]
    fn single_insert_is_counted() {
        let mut s = CountMinSketch::new(64, 4, 1);
        s.update(9);
        assert!(s.estimate(9) >= 1);
    }

    proptest! {
        #[test]
        fn never_underestimates(items in proptest::collection::vec(0u64..200, 0..400), width in 1usize..32, depth in 1usize..5) {
            let mut s = CountMinSketch::new(width, depth, 3);
            let mut truth: HashMap<u64, u64> = HashMap::new();
            for &i in &items {
                s.update(i);
                *truth.entry(i).or_default() += 1;
            }
            for q in 0..200u64 {
                prop_assert!(s.estimate(q) >= truth.get(&q).copied().unwrap_or(0));
            }
            for r in 0..depth {
                prop_assert_eq!(s.row_sum(r), items.len() as u64);
            }
        }
    }
}
