use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DomainDataset;
use crate::error::{Error, Result};

/// Produces per-epoch batch index lists, deterministic in `(seed, epoch)`.
#[derive(Clone, Debug)]
pub struct Batcher {
    batch_size: usize,
    seed: u64,
    /// Sample indices per domain; a single group when not stratifying.
    groups: Vec<Vec<usize>>,
    stratify: bool,
}

pub fn make_batches(ds: &DomainDataset, batch_size: usize, seed: u64, stratify_by_domain: bool) -> Result<Batcher> {
    if batch_size < 2 {
        return Err(Error::Contract(format!("batch size must be >= 2, got {batch_size}")));
    }
    if batch_size > ds.len() {
        return Err(Error::Contract(format!(
            "batch size {batch_size} exceeds dataset size {}",
            ds.len()
        )));
    }
    let groups = match (&ds.domain_labels, stratify_by_domain) {
        (Some(d), true) => {
            let mut g = vec![Vec::new(); ds.meta.num_domains];
            for (i, &x) in d.iter().enumerate() {
                g[x].push(i);
            }
            g.retain(|v| !v.is_empty());
            g
        }
        _ => vec![(0..ds.len()).collect()],
    };
    Ok(Batcher {
        batch_size,
        seed,
        stratify: groups.len() > 1,
        groups,
    })
}

impl Batcher {
    fn rng(&self, epoch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        rng
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Every sample appears in exactly one batch of the epoch.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = self.rng(epoch);
        if !self.stratify {
            let mut idx = self.groups[0].clone();
            idx.shuffle(&mut rng);
            let mut batches: Vec<Vec<usize>> = idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
            merge_small_tail(&mut batches, |b| b.len() < 2);
            return batches;
        }

        let mut groups = self.groups.clone();
        for g in &mut groups {
            g.shuffle(&mut rng);
        }
        let quotas = self.quotas();
        let full = groups.iter().zip(&quotas).map(|(g, &q)| g.len() / q).min().unwrap_or(0);
        let mut batches = Vec::with_capacity(full + 1);
        for b in 0..full {
            let mut batch = Vec::with_capacity(self.batch_size);
            for (g, &q) in groups.iter().zip(&quotas) {
                batch.extend_from_slice(&g[b * q..(b + 1) * q]);
            }
            batch.shuffle(&mut rng);
            batches.push(batch);
        }
        let mut tail = Vec::new();
        let mut singleton = false;
        for (g, &q) in groups.iter().zip(&quotas) {
            let rest = &g[full * q..];
            singleton |= rest.len() == 1;
            tail.extend_from_slice(rest);
        }
        if !tail.is_empty() {
            tail.shuffle(&mut rng);
            batches.push(tail);
            if singleton || batches.last().map_or(0, Vec::len) < 2 {
                merge_small_tail(&mut batches, |_| true);
            }
        }
        batches
    }

    /// Per-domain samples per batch, proportional to domain size, at least 2 each when
    /// the batch is large enough, summing to the batch size.
    fn quotas(&self) -> Vec<usize> {
        let n: usize = self.groups.iter().map(Vec::len).sum();
        let mut q: Vec<usize> = self
            .groups
            .iter()
            .map(|g| ((self.batch_size * g.len()) as f64 / n as f64).round() as usize)
            .collect();
        let floor = if self.batch_size >= 2 * self.groups.len() { 2 } else { 1 };
        for (qi, g) in q.iter_mut().zip(&self.groups) {
            *qi = (*qi).max(floor).min(g.len());
        }
        loop {
            let total: usize = q.iter().sum();
            if total == self.batch_size {
                break;
            }
            if total > self.batch_size {
                let i = (0..q.len()).max_by_key(|&i| q[i]).expect("nonempty");
                if q[i] <= floor {
                    break;
                }
                q[i] -= 1;
            } else {
                let i = (0..q.len())
                    .filter(|&i| q[i] < self.groups[i].len())
                    .max_by_key(|&i| self.groups[i].len() - q[i]);
                match i {
                    Some(i) => q[i] += 1,
                    None => break,
                }
            }
        }
        q
    }

    pub fn stream(&self) -> BatchStream {
        BatchStream {
            batcher: self.clone(),
            epoch: 0,
            current: Vec::new(),
            pos: 0,
        }
    }
}

fn merge_small_tail(batches: &mut Vec<Vec<usize>>, small: impl Fn(&[usize]) -> bool) {
    if batches.len() >= 2 && batches.last().is_some_and(|b| small(b)) {
        let tail = batches.pop().expect("len >= 2");
        batches.last_mut().expect("len >= 1").extend(tail);
    }
}

/// Endless sequence of batches running through consecutive epochs.
#[derive(Clone, Debug)]
pub struct BatchStream {
    batcher: Batcher,
    epoch: u64,
    current: Vec<Vec<usize>>,
    pos: usize,
}

impl BatchStream {
    /// Skips `count` batches, as when resuming from a checkpoint.
    pub fn skip_batches(&mut self, count: u64) {
        for _ in 0..count {
            self.next();
        }
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.current.len() {
            self.current = self.batcher.epoch(self.epoch);
            self.epoch += 1;
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.current[self.pos - 1].clone())
    }
}
