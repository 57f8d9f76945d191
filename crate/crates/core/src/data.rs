//! Synthetic sequence-labelling task with a Zipf-skewed vocabulary.
//!
//! Every position carries a class label `table[token][bucket(previous token)]`
//! where both the table and the bucket map are fixed random functions of the
//! dataset seed. Only the suffix after a short prompt is scored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::params::sub_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub seq_len: usize,
    /// Leading positions excluded from the loss.
    pub prompt_len: usize,
    pub zipf_s: f64,
    /// Number of classes of preceding token the label depends on.
    pub context_buckets: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_sequences: 512,
            val_sequences: 128,
            seq_len: 16,
            prompt_len: 4,
            zipf_s: 1.2,
            context_buckets: 2,
        }
    }
}

impl DataConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.train_sequences == 0 {
            out.push("data.train_sequences: must be >= 1".into());
        }
        if self.seq_len < 4 {
            out.push("data.seq_len: must be >= 4".into());
        }
        if self.prompt_len >= self.seq_len {
            out.push("data.prompt_len: must be < seq_len".into());
        }
        if !(self.zipf_s.is_finite() && self.zipf_s > 0.0) {
            out.push("data.zipf_s: must be positive".into());
        }
        if self.context_buckets == 0 {
            out.push("data.context_buckets: must be >= 1".into());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
        }
    }
}

/// The fixed labelling rule of a dataset seed.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFn {
    num_classes: usize,
    buckets: usize,
    bucket_of: Vec<usize>,
    table: Vec<u32>,
}

impl LabelFn {
    pub fn new(vocab: usize, num_classes: usize, buckets: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "data/labels"));
        let bucket_of = (0..vocab).map(|_| rng.random_range(0..buckets)).collect();
        let table = (0..vocab * buckets)
            .map(|_| rng.random_range(0..num_classes as u32))
            .collect();
        Self {
            num_classes,
            buckets,
            bucket_of,
            table,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Label of `token` following `prev` (`None` at the first position).
    pub fn label(&self, token: u32, prev: Option<u32>) -> u32 {
        let b = prev.map_or(0, |p| self.bucket_of[p as usize]);
        self.table[token as usize * self.buckets + b]
    }

    pub fn labels(&self, tokens: &[u32]) -> Vec<u32> {
        (0..tokens.len())
            .map(|t| self.label(tokens[t], (t > 0).then(|| tokens[t - 1])))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub vocab: usize,
    pub split: Split,
    pub labels: LabelFn,
    pub examples: Vec<Example>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> TokenBatch {
        let ex = indices.iter().map(|&i| &self.examples[i]);
        TokenBatch {
            token_ids: ex.clone().map(|e| e.tokens.clone()).collect(),
            targets: ex.clone().map(|e| e.targets.clone()).collect(),
            mask: ex.map(|e| e.mask.clone()).collect(),
        }
    }

    /// Occurrences of every vocabulary id.
    pub fn token_counts(&self) -> Vec<u64> {
        let mut c = vec![0u64; self.vocab];
        for e in &self.examples {
            for &t in &e.tokens {
                c[t as usize] += 1;
            }
        }
        c
    }
}

/// Draws one split. Both splits share the label function of `seed` but use
/// disjoint token streams.
pub fn make_dataset(
    cfg: &DataConfig,
    vocab: usize,
    num_classes: usize,
    seed: u64,
    split: Split,
) -> Result<SyntheticDataset> {
    let mut problems = cfg.problems();
    if vocab < 16 {
        problems.push("model.vocab: the synthetic task needs at least 16 tokens".into());
    }
    if num_classes < 2 {
        problems.push("model.num_classes: must be >= 2".into());
    }
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems.join("; ")));
    }
    let labels = LabelFn::new(vocab, num_classes, cfg.context_buckets, seed);
    let zipf = Zipf::new(vocab as f64, cfg.zipf_s).map_err(|e| Error::InvalidConfig(format!("data.zipf_s: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("data/{}", split.name())));
    let n = match split {
        Split::Train => cfg.train_sequences,
        Split::Val => cfg.val_sequences,
    };
    let examples = (0..n)
        .map(|_| {
            // ranks are 1-based; token id = rank − 1, so id 0 is the most frequent
            let tokens: Vec<u32> = (0..cfg.seq_len)
                .map(|_| (zipf.sample(&mut rng) as u32 - 1).min(vocab as u32 - 1))
                .collect();
            let targets = labels.labels(&tokens);
            let mask = (0..cfg.seq_len).map(|t| u8::from(t >= cfg.prompt_len)).collect();
            Example { tokens, targets, mask }
        })
        .collect();
    Ok(SyntheticDataset {
        vocab,
        split,
        labels,
        examples,
    })
}
