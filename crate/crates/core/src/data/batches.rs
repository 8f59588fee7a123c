use rand::seq::SliceRandom;

use super::Sample;
use crate::rng::{self, Rng};

/// Indices into the labeled and unlabeled pools for one optimizer step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Cycles through a shuffled permutation, reshuffling on wrap-around.
#[derive(Clone, Debug)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(items: Vec<usize>, rng: &mut Rng) -> Self {
        let mut c = Cycler { order: items, pos: 0 };
        c.order.shuffle(rng);
        c
    }

    fn take(&mut self, n: usize, rng: &mut Rng, out: &mut Vec<usize>) {
        for _ in 0..n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
    }
}

/// Draws a fixed number of labeled and unlabeled samples from each source
/// domain per batch.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    labeled: Vec<Cycler>,
    unlabeled: Vec<Cycler>,
    per_domain_labeled: usize,
    per_domain_unlabeled: usize,
    batches_per_epoch: usize,
    rng: Rng,
}

impl BatchIterator {
    pub fn new(
        labeled: &[Sample],
        unlabeled: &[Sample],
        per_domain_labeled: usize,
        per_domain_unlabeled: usize,
        seed: u64,
    ) -> Self {
        let mut rng = rng::stream(seed, &[rng::tag::BATCHES]);
        let mut domains: Vec<usize> = unlabeled.iter().map(|s| s.domain_id).collect();
        domains.extend(labeled.iter().map(|s| s.domain_id));
        domains.sort_unstable();
        domains.dedup();

        let group = |pool: &[Sample], d: usize| -> Vec<usize> {
            pool.iter()
                .enumerate()
                .filter(|(_, s)| s.domain_id == d)
                .map(|(i, _)| i)
                .collect()
        };
        let mut lab = Vec::new();
        let mut unl = Vec::new();
        for &d in &domains {
            let l = group(labeled, d);
            if !l.is_empty() {
                lab.push(Cycler::new(l, &mut rng));
            }
            let u = group(unlabeled, d);
            if !u.is_empty() {
                unl.push(Cycler::new(u, &mut rng));
            }
        }
        let per_batch = (unl.len() * per_domain_unlabeled.max(1)).max(1);
        let batches_per_epoch = unlabeled.len().div_ceil(per_batch).max(1);
        BatchIterator {
            labeled: lab,
            unlabeled: unl,
            per_domain_labeled: per_domain_labeled.max(1),
            per_domain_unlabeled: per_domain_unlabeled.max(1),
            batches_per_epoch,
            rng,
        }
    }

    /// `⌈|U| / (D_src · per_domain_unlabeled)⌉`.
    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    pub fn next_batch(&mut self) -> BatchIndices {
        let mut labeled = Vec::with_capacity(self.labeled.len() * self.per_domain_labeled);
        for c in &mut self.labeled {
            c.take(self.per_domain_labeled, &mut self.rng, &mut labeled);
        }
        let mut unlabeled = Vec::with_capacity(self.unlabeled.len() * self.per_domain_unlabeled);
        for c in &mut self.unlabeled {
            c.take(self.per_domain_unlabeled, &mut self.rng, &mut unlabeled);
        }
        BatchIndices { labeled, unlabeled }
    }

    /// The batches of one epoch.
    pub fn epoch(&mut self) -> Vec<BatchIndices> {
        (0..self.batches_per_epoch).map(|_| self.next_batch()).collect()
    }
}
