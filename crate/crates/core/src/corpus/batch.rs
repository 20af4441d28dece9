//! Padded, time-major mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::io::Example;
use crate::corpus::vocab::PAD;
use crate::error::{Error, Result};

/// Examples per shuffling pool; batches are cut from length-sorted pools.
const POOL_BATCHES: usize = 20;

/// `B` sequences padded to a common length, laid out time-major
/// (`row = t·B + b`).
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub ids: Vec<usize>,
    pub mask: Vec<f64>,
    pub lens: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
}

impl Padded {
    pub fn new(seqs: &[&[usize]]) -> Self {
        let batch = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; steps * batch];
        let mut mask = vec![0.0; steps * batch];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &id) in s.iter().enumerate() {
                ids[t * batch + b] = id;
                mask[t * batch + b] = 1.0;
            }
        }
        Self {
            ids,
            mask,
            lens: seqs.iter().map(|s| s.len()).collect(),
            steps,
            batch,
        }
    }

    pub fn ids_at(&self, t: usize) -> &[usize] {
        &self.ids[t * self.batch..(t + 1) * self.batch]
    }

    pub fn mask_at(&self, t: usize) -> &[f64] {
        &self.mask[t * self.batch..(t + 1) * self.batch]
    }

    /// Mask as a `[B × T]` row-major matrix (attention layout).
    pub fn mask_bt(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.batch * self.steps];
        for t in 0..self.steps {
            for b in 0..self.batch {
                out[b * self.steps + t] = self.mask[t * self.batch + b];
            }
        }
        out
    }

    pub fn tokens(&self) -> usize {
        self.lens.iter().sum()
    }

    /// Same rows with every sequence extended by `extra` padding steps.
    pub fn with_extra_padding(&self, extra: usize) -> Self {
        let mut ids = self.ids.clone();
        let mut mask = self.mask.clone();
        ids.extend(std::iter::repeat_n(PAD, extra * self.batch));
        mask.extend(std::iter::repeat_n(0.0, extra * self.batch));
        Self {
            ids,
            mask,
            lens: self.lens.clone(),
            steps: self.steps + extra,
            batch: self.batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positions of the member examples in the slice given to `make_batches`.
    pub examples: Vec<usize>,
    pub src: Padded,
    pub tgt: Padded,
    /// Label ids aligned with `src` (time-major), present when every member
    /// is labelled.
    pub labels: Option<Vec<usize>>,
    /// Context sentence slots, oldest first and right-aligned so the last
    /// slot is always the immediately preceding sentence.
    pub context: Vec<Padded>,
    /// `[slots × B]`: 1 where the example has a sentence in that slot.
    pub context_mask: Vec<f64>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.src.batch
    }

    pub fn from_examples(members: &[&Example], positions: Vec<usize>) -> Self {
        let xs: Vec<&[usize]> = members.iter().map(|e| e.x.as_slice()).collect();
        let ys: Vec<&[usize]> = members.iter().map(|e| e.y.as_slice()).collect();
        let src = Padded::new(&xs);
        let labels = if members.iter().all(|e| e.zp.is_some()) {
            let mut l = vec![0; src.ids.len()];
            for (b, e) in members.iter().enumerate() {
                for (t, &z) in e.zp.as_ref().expect("checked").iter().enumerate() {
                    l[t * src.batch + b] = z;
                }
            }
            Some(l)
        } else {
            None
        };
        let slots = members.iter().map(|e| e.context.len()).max().unwrap_or(0);
        let mut context = Vec::with_capacity(slots);
        let mut context_mask = vec![0.0; slots * members.len()];
        for j in 0..slots {
            let back = slots - j;
            let sents: Vec<&[usize]> = members
                .iter()
                .enumerate()
                .map(|(b, e)| {
                    if e.context.len() >= back {
                        context_mask[j * members.len() + b] = 1.0;
                        e.context[e.context.len() - back].as_slice()
                    } else {
                        &[][..]
                    }
                })
                .collect();
            context.push(Padded::new(&sents));
        }
        Self {
            examples: positions,
            src,
            tgt: Padded::new(&ys),
            labels,
            context,
            context_mask,
        }
    }
}

/// Filters by length on both sides, shuffles with `seed`, groups examples of
/// similar source length, and pads.
pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let words = |s: &[usize]| s.len().saturating_sub(1);
    let mut keep: Vec<usize> = (0..examples.len())
        .filter(|&i| words(&examples[i].x) <= max_len && words(&examples[i].y) <= max_len)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "all {} examples exceed the length limit of {max_len}",
            examples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keep.shuffle(&mut rng);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for pool in keep.chunks(batch_size * POOL_BATCHES) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| examples[i].x.len());
        groups.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    groups.shuffle(&mut rng);
    Ok(groups
        .into_iter()
        .map(|g| {
            let members: Vec<&Example> = g.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&members, g)
        })
        .collect())
}
