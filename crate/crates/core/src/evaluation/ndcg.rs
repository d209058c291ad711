use itertools::Itertools;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::datasets::{QueryGroup, Task};

/// Largest group the exhaustive oracle accepts.
pub const ORACLE_MAX_GROUP: usize = 8;
pub const DEFAULT_DEPTH: usize = 48;

/// Relevance used as the DCG gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GainScheme {
    /// 1 if the candidate has the ranked task's label, else 0.
    #[default]
    Binary,
    /// 0 / 1 / 2 / 4 for none / click / cart / purchase, whatever the task.
    Graded,
}

impl GainScheme {
    pub fn gains(self, group: &QueryGroup, task: Task) -> Vec<f64> {
        group
            .records
            .iter()
            .map(|r| match self {
                GainScheme::Binary => f64::from(u8::from(r.labels.get(task))),
                GainScheme::Graded => r.labels.graded_gain(),
            })
            .collect()
    }
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 2) as f64).log2()
}

/// Candidate order by descending score; ties keep input order.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

fn dcg_in_order(gains: &[f64], order: impl Iterator<Item = usize>, depth: usize) -> f64 {
    order
        .take(depth)
        .enumerate()
        .map(|(rank, i)| gains[i] * discount(rank))
        .sum()
}

fn check(gains: &[f64], scores: &[f64], depth: usize) -> Result<(), EvalError> {
    if gains.len() != scores.len() {
        return Err(EvalError::LengthMismatch {
            candidates: gains.len(),
            scores: scores.len(),
        });
    }
    if depth == 0 {
        return Err(EvalError::ZeroDepth);
    }
    Ok(())
}

/// NDCG@depth of `scores` against `gains`; `None` when no candidate has a
/// positive gain.
pub fn ndcg_from_gains(gains: &[f64], scores: &[f64], depth: usize) -> Result<Option<f64>, EvalError> {
    check(gains, scores, depth)?;
    let mut ideal = gains.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg_in_order(&ideal, 0..ideal.len(), depth);
    if idcg <= 0.0 {
        return Ok(None);
    }
    Ok(Some(dcg_in_order(gains, rank_order(scores).into_iter(), depth) / idcg))
}

pub fn ndcg_for_task(
    group: &QueryGroup,
    scores: &[f64],
    task: Task,
    depth: usize,
) -> Result<Option<f64>, EvalError> {
    ndcg_from_gains(&GainScheme::Binary.gains(group, task), scores, depth)
}

/// Reference NDCG: ranks come from pairwise counting and IDCG from the best
/// of every permutation.
pub fn ndcg_oracle_gains(gains: &[f64], scores: &[f64], depth: usize) -> Result<Option<f64>, EvalError> {
    check(gains, scores, depth)?;
    let n = gains.len();
    if n > ORACLE_MAX_GROUP {
        return Err(EvalError::TooLarge(n));
    }
    let idcg = (0..n)
        .permutations(n)
        .map(|p| {
            p.iter()
                .take(depth)
                .enumerate()
                .map(|(rank, &i)| gains[i] / ((rank + 2) as f64).log2())
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    if idcg <= 0.0 {
        return Ok(None);
    }
    let mut dcg = 0.0;
    for i in 0..n {
        let rank = (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count();
        if rank < depth {
            dcg += gains[i] / ((rank + 2) as f64).log2();
        }
    }
    Ok(Some(dcg / idcg))
}

pub fn ndcg_oracle(
    group: &QueryGroup,
    scores: &[f64],
    task: Task,
    depth: usize,
) -> Result<Option<f64>, EvalError> {
    ndcg_oracle_gains(&GainScheme::Binary.gains(group, task), scores, depth)
}
