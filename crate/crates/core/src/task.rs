//! Associative-recall episodes that can only be solved through memory.
//!
//! Step 1 writes `KEY VALUE` pairs with no targets. Step 2 is a separate
//! forward pass of `QUERY KEY ?` triples whose target at `?` is the paired
//! value. The write tokens are not in the query step's context.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Episode, Step};
use crate::retention::WriteSignal;
use crate::rng::Rng;

/// Token layout: keys, then values, then `QUERY` and `?`, then unused
/// filler up to `vocab`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabSplit {
    pub keys: usize,
    pub values: usize,
    pub vocab: usize,
}

impl Default for VocabSplit {
    fn default() -> Self {
        VocabSplit {
            keys: 16,
            values: 16,
            vocab: 64,
        }
    }
}

impl VocabSplit {
    pub fn validate(&self) -> Result<()> {
        if self.keys == 0 || self.values == 0 {
            return Err(Error::InvalidConfig("recall task needs keys and values".into()));
        }
        if self.keys + self.values + 2 > self.vocab {
            return Err(Error::InvalidConfig(format!(
                "vocabulary of {} cannot hold {} keys, {} values and 2 control tokens",
                self.vocab, self.keys, self.values
            )));
        }
        Ok(())
    }

    pub fn key(&self, i: usize) -> usize {
        i
    }

    pub fn value(&self, i: usize) -> usize {
        self.keys + i
    }

    pub fn query(&self) -> usize {
        self.keys + self.values
    }

    pub fn ask(&self) -> usize {
        self.keys + self.values + 1
    }

    pub fn is_value(&self, token: usize) -> bool {
        (self.keys..self.keys + self.values).contains(&token)
    }

    /// Symbolic name: `k3`, `v12`, `QUERY`, `?`, or `_40` for filler.
    pub fn name(&self, token: usize) -> String {
        if token < self.keys {
            format!("k{token}")
        } else if self.is_value(token) {
            format!("v{}", token - self.keys)
        } else if token == self.query() {
            "QUERY".into()
        } else if token == self.ask() {
            "?".into()
        } else {
            format!("_{token}")
        }
    }

    pub fn parse(&self, name: &str) -> Option<usize> {
        let id = match name {
            "QUERY" => self.query(),
            "?" => self.ask(),
            _ => {
                let mut chars = name.chars();
                let kind = chars.next()?;
                let n: usize = chars.as_str().parse().ok()?;
                match kind {
                    'k' if n < self.keys => self.key(n),
                    'v' if n < self.values => self.value(n),
                    '_' if n >= self.keys + self.values + 2 => n,
                    _ => return None,
                }
            }
        };
        (id < self.vocab).then_some(id)
    }

    pub fn parse_sequence(&self, text: &str) -> core::result::Result<Vec<usize>, String> {
        text.split_whitespace()
            .map(|t| self.parse(t).ok_or_else(|| format!("unknown token {t:?}")))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskConfig {
    pub num_pairs: usize,
    pub split: VocabSplit,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            num_pairs: 1,
            split: VocabSplit::default(),
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.num_pairs == 0 || self.num_pairs > self.split.keys {
            return Err(Error::InvalidConfig(format!(
                "num_pairs {} must be in 1..={}",
                self.num_pairs, self.split.keys
            )));
        }
        Ok(())
    }

    /// Longest step the task produces.
    pub fn max_step_len(&self) -> usize {
        3 * self.num_pairs
    }
}

/// Samples one write/query episode. Keys are drawn without replacement,
/// values independently; queries cover every written key in shuffled order.
pub fn gen_recall_episode(rng: &mut Rng, num_pairs: usize, split: &VocabSplit) -> Result<Episode> {
    TaskConfig { num_pairs, split: *split }.validate()?;
    let mut keys: Vec<usize> = (0..split.keys).collect();
    rng.shuffle(&mut keys);
    keys.truncate(num_pairs);
    let values: Vec<usize> = (0..num_pairs).map(|_| rng.below(split.values)).collect();

    let mut write = Vec::with_capacity(2 * num_pairs);
    for (&k, &v) in keys.iter().zip(&values) {
        write.push(split.key(k));
        write.push(split.value(v));
    }

    let mut order: Vec<usize> = (0..num_pairs).collect();
    rng.shuffle(&mut order);
    let mut query = Vec::with_capacity(3 * num_pairs);
    let mut targets = Vec::with_capacity(num_pairs);
    for &i in &order {
        query.push(split.query());
        query.push(split.key(keys[i]));
        query.push(split.ask());
        targets.push((query.len() - 1, split.value(values[i])));
    }

    Episode::new(alloc::vec![
        Step {
            tokens: write,
            targets: Vec::new(),
            signal: WriteSignal::WRITE,
        },
        Step {
            tokens: query,
            targets,
            signal: WriteSignal::SKIP,
        },
    ])
}
