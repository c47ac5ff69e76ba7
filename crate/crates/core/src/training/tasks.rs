//! Synthetic sequence tasks with controllable dependency range.
//!
//! Token layout for the long-range tasks:
//!
//! | task         | reserved ids                                   |
//! |--------------|------------------------------------------------|
//! | needle       | 0 = query mark, values, BOS, then filler       |
//! | assoc_recall | keys, values, BOS, then filler                 |
//!
//! Long-range sequences open with a fixed BOS token so position 0 looks the
//! same in every sample.
//!
//! In the needle task the single value token in the sequence is the answer
//! to the query mark at the end, so one content lookup suffices. Assoc
//! recall writes each pair value first, then key; a query repeats a key and
//! is labelled with the token just before that key's earlier occurrence.
//! Local attention can copy each value onto its key, after which one global
//! lookup of the matching key finds the answer.
//!
//! A stack of `depth` local-attention layers with window `w` can move
//! information at most `depth·w` positions, so every answer is placed more
//! than that far from the evidence it needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;

pub const QUERY_MARK: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Needle,
    Copy,
    AssocRecall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n: usize,
    pub vocab: usize,
    /// Local window of the model the task is meant for.
    pub window: usize,
    /// Number of stacked local layers; the local receptive field is
    /// `depth · window`.
    pub depth: usize,
    /// Needle: number of candidate values. Assoc recall: number of pairs.
    pub num_values: usize,
    /// Number of labelled query positions at the end of the sequence.
    pub num_queries: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Needle,
            n: 256,
            vocab: 64,
            window: 32,
            depth: 2,
            num_values: 8,
            num_queries: 4,
        }
    }
}

/// One generated sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    /// Per-position next-token label; `None` where the loss is not taken.
    pub targets: Vec<Option<usize>>,
    /// Positions whose label provably needs context beyond the local
    /// receptive field.
    pub needle_positions: Vec<usize>,
}

impl TaskSpec {
    /// Largest distance local attention alone can bridge.
    pub fn local_reach(&self) -> usize {
        self.window * self.depth
    }

    /// Id of the sequence-start token; `None` for the copy task.
    pub fn bos(&self) -> Option<usize> {
        match self.kind {
            TaskKind::Needle => Some(1 + self.num_values),
            TaskKind::AssocRecall => Some(2 * self.num_values),
            TaskKind::Copy => None,
        }
    }

    fn filler_start(&self) -> usize {
        self.bos().map_or(0, |b| b + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n < 2 {
            return fail("task length must be at least 2".into());
        }
        match self.kind {
            TaskKind::Copy => {
                if self.vocab == 0 {
                    return fail("vocab must be positive".into());
                }
            }
            TaskKind::Needle => {
                if self.num_values < 2 || self.filler_start() >= self.vocab {
                    return fail(format!(
                        "needle task needs a query mark, {} values and at least one filler id within vocab {}",
                        self.num_values, self.vocab
                    ));
                }
                // value, then more than local_reach tokens, then the queries
                if self.num_queries == 0 || self.n < self.local_reach() + self.num_queries + 3 {
                    return fail(format!(
                        "needle task with n={} cannot place the key beyond local reach {}",
                        self.n,
                        self.local_reach()
                    ));
                }
            }
            TaskKind::AssocRecall => {
                if self.num_values == 0 || self.num_queries == 0 || self.filler_start() >= self.vocab {
                    return fail(format!(
                        "assoc recall needs {} keys, {} values and filler ids within vocab {}",
                        self.num_values, self.num_values, self.vocab
                    ));
                }
                let need = 2 * self.num_values + self.local_reach() + self.num_queries + 2;
                if self.n < need {
                    return fail(format!(
                        "assoc recall with n={} needs at least {need} positions to keep every pair beyond local reach {}",
                        self.n,
                        self.local_reach()
                    ));
                }
            }
        }
        Ok(())
    }
}

fn filler(spec: &TaskSpec, rng: &mut Rng) -> usize {
    rng.range(spec.filler_start(), spec.vocab)
}

/// Draws one sequence of the requested task.
pub fn make_synthetic_task(spec: &TaskSpec, rng: &mut Rng) -> Result<Sample> {
    spec.validate()?;
    let n = spec.n;
    match spec.kind {
        TaskKind::Copy => {
            let tokens: Vec<usize> = (0..n).map(|_| rng.below(spec.vocab)).collect();
            let targets = (0..n).map(|t| (t > 0).then(|| tokens[t - 1])).collect();
            Ok(Sample {
                tokens,
                targets,
                needle_positions: Vec::new(),
            })
        }
        TaskKind::Needle => {
            let mut tokens: Vec<usize> = (0..n).map(|_| filler(spec, rng)).collect();
            // q0 - p > reach for the first query q0
            let q0 = n - spec.num_queries;
            let p = rng.range(1, q0 - spec.local_reach() - 1);
            let value = 1 + rng.below(spec.num_values);
            tokens[0] = spec.filler_start() - 1;
            tokens[p] = value;
            let mut targets = vec![None; n];
            for t in q0..n {
                tokens[t] = QUERY_MARK;
                targets[t] = Some(value);
            }
            Ok(Sample {
                tokens,
                targets,
                needle_positions: (q0..n).collect(),
            })
        }
        TaskKind::AssocRecall => {
            let k = spec.num_values;
            let mut tokens: Vec<usize> = (0..n).map(|_| filler(spec, rng)).collect();
            let mut keys: Vec<usize> = (0..k).collect();
            let mut values: Vec<usize> = (k..2 * k).collect();
            rng.shuffle(&mut keys);
            rng.shuffle(&mut values);
            let q0 = n - spec.num_queries;
            // pairs occupy [start, start + 2k) and end more than `reach` before q0
            let latest_start = q0 - spec.local_reach() - 2 * k;
            let start = rng.range(1, latest_start);
            tokens[0] = spec.filler_start() - 1;
            for i in 0..k {
                tokens[start + 2 * i] = values[i];
                tokens[start + 2 * i + 1] = keys[i];
            }
            let mut targets = vec![None; n];
            let mut needle_positions = Vec::with_capacity(spec.num_queries);
            // queries cycle through fresh permutations so no key repeats
            // until every key has been asked
            let mut order: Vec<usize> = Vec::new();
            for t in q0..n {
                if order.is_empty() {
                    order = (0..k).collect();
                    rng.shuffle(&mut order);
                }
                let i = order.pop().unwrap();
                tokens[t] = keys[i];
                targets[t] = Some(values[i]);
                needle_positions.push(t);
            }
            Ok(Sample {
                tokens,
                targets,
                needle_positions,
            })
        }
    }
}

/// `count` independent samples from streams split off `rng`.
pub fn make_batch(spec: &TaskSpec, count: usize, rng: &Rng) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| make_synthetic_task(spec, &mut rng.split(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn needle_is_beyond_reach() {
        let spec = TaskSpec::default();
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let s = make_synthetic_task(&spec, &mut rng).unwrap();
            let is_value = |t: usize| (1..=spec.num_values).contains(&t);
            let at = s.tokens.iter().position(|&t| is_value(t)).unwrap();
            assert_eq!(s.tokens.iter().filter(|&&t| is_value(t)).count(), 1);
            assert_eq!(s.tokens[0], spec.bos().unwrap());
            assert_eq!(s.needle_positions.len(), spec.num_queries);
            for &q in &s.needle_positions {
                assert_eq!(s.targets[q], Some(s.tokens[at]));
                assert_eq!(s.tokens[q], QUERY_MARK);
                assert!(q - at > spec.local_reach());
            }
            assert_eq!(s.targets.iter().filter(|t| t.is_some()).count(), spec.num_queries);
        }
    }

    #[test]
    fn assoc_answers_are_beyond_every_window() {
        let spec = TaskSpec {
            kind: TaskKind::AssocRecall,
            vocab: 32,
            num_values: 4,
            num_queries: 4,
            ..TaskSpec::default()
        };
        let mut rng = Rng::new(2);
        for _ in 0..200 {
            let s = make_synthetic_task(&spec, &mut rng).unwrap();
            for &q in &s.needle_positions {
                let key = s.tokens[q];
                let at = s.tokens[..spec.n - spec.num_queries]
                    .iter()
                    .position(|&t| t == key)
                    .unwrap();
                assert_eq!(s.targets[q], Some(s.tokens[at - 1]));
                assert!(q - at > spec.local_reach());
            }
        }
    }

    #[test]
    fn copy_targets_are_shifted() {
        let spec = TaskSpec {
            kind: TaskKind::Copy,
            n: 20,
            vocab: 10,
            ..TaskSpec::default()
        };
        let s = make_synthetic_task(&spec, &mut Rng::new(3)).unwrap();
        assert_eq!(s.targets[0], None);
        for t in 1..20 {
            assert_eq!(s.targets[t], Some(s.tokens[t - 1]));
        }
    }

    #[test]
    fn too_short_is_a_config_error() {
        let spec = TaskSpec { n: 60, ..TaskSpec::default() };
        assert!(matches!(make_synthetic_task(&spec, &mut Rng::new(4)), Err(Error::Config(_))));
        let spec = TaskSpec { kind: TaskKind::AssocRecall, n: 85, ..TaskSpec::default() };
        assert!(matches!(make_synthetic_task(&spec, &mut Rng::new(4)), Err(Error::Config(_))));
    }
}
