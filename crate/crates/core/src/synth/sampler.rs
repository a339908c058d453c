//! P×K identity batch sampler.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Draws batches of `p` identities with `k` items each.
///
/// Identities are consumed from a shuffled queue without replacement until
/// fewer than `p` remain, at which point a new epoch starts. Items of an
/// identity are likewise consumed from a shuffled queue and refilled when it
/// runs short.
#[derive(Clone, Debug)]
pub struct PkSampler {
    p: usize,
    k: usize,
    /// identity → item indices
    pools: BTreeMap<usize, Vec<usize>>,
    queues: BTreeMap<usize, Vec<usize>>,
    id_queue: Vec<usize>,
}

impl PkSampler {
    /// `labels[i]` is the identity of item `i`. Identities with fewer than
    /// `k` items are left out.
    pub fn new(labels: &[usize], p: usize, k: usize) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::Config("P and K must be positive".into()));
        }
        let mut pools: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            pools.entry(y).or_default().push(i);
        }
        pools.retain(|_, v| v.len() >= k);
        if pools.len() < p {
            return Err(Error::Config(format!(
                "{} identities have at least {k} samples, need {p}",
                pools.len()
            )));
        }
        Ok(Self {
            p,
            k,
            pools,
            queues: BTreeMap::new(),
            id_queue: Vec::new(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn identities(&self) -> usize {
        self.pools.len()
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        if self.id_queue.len() < self.p {
            self.id_queue = self.pools.keys().copied().collect();
            self.id_queue.shuffle(rng);
        }
        let chosen: Vec<usize> = self.id_queue.drain(..self.p).collect();
        let mut batch = Vec::with_capacity(self.batch_size());
        for id in chosen {
            let q = self.queues.entry(id).or_default();
            if q.len() < self.k {
                // Leftovers are served first, then the rest of the pool in a
                // fresh order, so a batch never repeats an item.
                let mut fresh: Vec<usize> =
                    self.pools[&id].iter().copied().filter(|i| !q.contains(i)).collect();
                fresh.shuffle(rng);
                fresh.extend_from_slice(q);
                *q = fresh;
            }
            for _ in 0..self.k {
                batch.push(q.pop().expect("queue refilled"));
            }
        }
        batch
    }
}
