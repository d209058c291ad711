//! Per-task NDCG with platform / region breakdowns, deltas against the
//! shared-bottom reference, and the domestic-listing share diagnostic.

mod ndcg;
mod report;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ndcg::{
    ndcg_for_task, ndcg_from_gains, ndcg_oracle, ndcg_oracle_gains, rank_order, GainScheme,
    DEFAULT_DEPTH, ORACLE_MAX_GROUP,
};
pub use report::{align as align_table, DomesticRow, DomesticShareReport, NdcgReport, NdcgRow};

use crate::datasets::{Platform, QueryGroup, Task};
use crate::models::{feature_matrix, predict, ModelError, RankingModel, TaskScores};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{scores} scores for {candidates} candidates")]
    LengthMismatch { candidates: usize, scores: usize },
    #[error("truncation depth must be at least 1")]
    ZeroDepth,
    #[error("group of {0} candidates is too large for the exhaustive oracle")]
    TooLarge(usize),
    #[error("no plain shared-bottom model among the evaluated models; deltas need it as the reference")]
    MissingBaseline,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub depth: usize,
    /// Positions counted by the domestic share.
    pub top_n: usize,
    pub gains: GainScheme,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            depth: DEFAULT_DEPTH,
            top_n: 10,
            gains: GainScheme::Binary,
        }
    }
}

/// A model's scores on every candidate of every group.
#[derive(Debug, Clone)]
pub struct ScoredModel {
    pub name: String,
    pub tasks: Vec<Task>,
    /// Marks the reference that deltas are computed against.
    pub reference: bool,
    /// `[group][candidate]`
    pub scores: Vec<Vec<TaskScores>>,
}

impl ScoredModel {
    fn task_scores(&self, group: usize, task: usize) -> Vec<f64> {
        self.scores[group].iter().map(|s| s.probs[task]).collect()
    }

    /// Index of the score used to rank for the domestic share.
    fn purchase_index(&self) -> usize {
        self.tasks
            .iter()
            .position(|&t| t == Task::Purchase)
            .unwrap_or(self.tasks.len() - 1)
    }
}

const ROWS_PER_BATCH: usize = 4096;

/// Scores every candidate of `groups`, batching groups together.
pub fn score_groups<S: Scalar>(
    model: &(impl RankingModel<S> + ?Sized),
    groups: &[QueryGroup],
) -> Result<Vec<Vec<TaskScores>>, EvalError> {
    let mut chunks: Vec<&[QueryGroup]> = Vec::new();
    let mut start = 0;
    let mut rows = 0;
    for (i, g) in groups.iter().enumerate() {
        rows += g.len();
        if rows >= ROWS_PER_BATCH {
            chunks.push(&groups[start..=i]);
            start = i + 1;
            rows = 0;
        }
    }
    if start < groups.len() {
        chunks.push(&groups[start..]);
    }
    let scored: Vec<Vec<Vec<TaskScores>>> = chunks
        .par_iter()
        .map(|chunk| {
            let x = feature_matrix::<S>(chunk.iter().flat_map(|g| &g.records));
            let mut flat = predict(model, &x)?.into_iter();
            Ok(chunk
                .iter()
                .map(|g| flat.by_ref().take(g.len()).collect())
                .collect())
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(scored.into_iter().flatten().collect())
}

/// Group subsets reported separately: everything, each platform, each region.
fn slices(groups: &[QueryGroup]) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![("all".to_string(), (0..groups.len()).collect())];
    for p in Platform::ALL {
        out.push((
            p.as_str().to_string(),
            (0..groups.len()).filter(|&i| groups[i].platform == p).collect(),
        ));
    }
    let regions: BTreeSet<u32> = groups.iter().map(|g| g.region).collect();
    for r in regions {
        out.push((
            format!("region{r}"),
            (0..groups.len()).filter(|&i| groups[i].region == r).collect(),
        ));
    }
    out
}

fn relative_delta(value: f64, base: f64) -> Option<f64> {
    (base > 0.0).then(|| (value - base) / base * 100.0)
}

/// NDCG and domestic share for pre-scored models.
pub fn evaluate_scores(
    models: &[ScoredModel],
    groups: &[QueryGroup],
    opts: &EvalOptions,
) -> Result<(NdcgReport, DomesticShareReport), EvalError> {
    if opts.depth == 0 {
        return Err(EvalError::ZeroDepth);
    }
    let base = models
        .iter()
        .position(|m| m.reference)
        .ok_or(EvalError::MissingBaseline)?;
    for m in models {
        if m.scores.len() != groups.len() {
            return Err(EvalError::LengthMismatch {
                candidates: groups.len(),
                scores: m.scores.len(),
            });
        }
    }
    let slices = slices(groups);

    let mut ndcg_rows = Vec::new();
    for m in models {
        for (ti, &task) in m.tasks.iter().enumerate() {
            let per_group: Vec<Option<f64>> = groups
                .par_iter()
                .enumerate()
                .map(|(gi, g)| {
                    let gains = opts.gains.gains(g, task);
                    ndcg_from_gains(&gains, &m.task_scores(gi, ti), opts.depth)
                })
                .collect::<Result<_, _>>()?;
            for (name, idx) in &slices {
                let judged: Vec<f64> = idx.iter().filter_map(|&i| per_group[i]).collect();
                let mean = if judged.is_empty() {
                    0.0
                } else {
                    judged.iter().sum::<f64>() / judged.len() as f64
                };
                ndcg_rows.push(NdcgRow {
                    model: m.name.clone(),
                    task,
                    slice: name.clone(),
                    mean_ndcg: mean,
                    delta_pct: None,
                    groups: judged.len(),
                    excluded: idx.len() - judged.len(),
                });
            }
        }
    }
    let base_name = &models[base].name;
    let lookup: Vec<(Task, String, f64)> = ndcg_rows
        .iter()
        .filter(|r| &r.model == base_name)
        .map(|r| (r.task, r.slice.clone(), r.mean_ndcg))
        .collect();
    for r in &mut ndcg_rows {
        if let Some((_, _, b)) = lookup.iter().find(|(t, s, _)| *t == r.task && *s == r.slice) {
            r.delta_pct = relative_delta(r.mean_ndcg, *b);
        }
    }

    let mut dom_rows = Vec::new();
    for m in models {
        let pi = m.purchase_index();
        let per_group: Vec<(usize, usize)> = groups
            .iter()
            .enumerate()
            .map(|(gi, g)| {
                let order = rank_order(&m.task_scores(gi, pi));
                let top: Vec<usize> = order.into_iter().take(opts.top_n).collect();
                let domestic = top.iter().filter(|&&i| g.records[i].is_domestic()).count();
                (domestic, top.len())
            })
            .collect();
        for (name, idx) in slices.iter().filter(|(n, _)| n == "all" || n.starts_with("region")) {
            let (d, n) = idx
                .iter()
                .fold((0, 0), |(d, n), &i| (d + per_group[i].0, n + per_group[i].1));
            dom_rows.push(DomesticRow {
                model: m.name.clone(),
                slice: name.clone(),
                share: if n == 0 { 0.0 } else { d as f64 / n as f64 },
                delta_pp: None,
                slots: n,
            });
        }
    }
    let base_dom: Vec<(String, f64)> = dom_rows
        .iter()
        .filter(|r| &r.model == base_name)
        .map(|r| (r.slice.clone(), r.share))
        .collect();
    for r in &mut dom_rows {
        if let Some((_, b)) = base_dom.iter().find(|(s, _)| *s == r.slice) {
            r.delta_pp = Some((r.share - b) * 100.0);
        }
    }

    Ok((
        NdcgReport {
            depth: opts.depth,
            gains: opts.gains,
            reference: base_name.clone(),
            rows: ndcg_rows,
        },
        DomesticShareReport {
            top_n: opts.top_n,
            reference: base_name.clone(),
            rows: dom_rows,
        },
    ))
}

/// Scores and evaluates named models. The plain shared-bottom model among
/// them is the reference.
pub fn evaluate_models<S: Scalar>(
    models: &[(String, &dyn RankingModel<S>)],
    groups: &[QueryGroup],
    opts: &EvalOptions,
) -> Result<(NdcgReport, DomesticShareReport), EvalError> {
    let mut scored = Vec::with_capacity(models.len());
    let mut have_ref = false;
    for (name, m) in models {
        let reference = !have_ref && m.config().is_reference();
        have_ref |= reference;
        scored.push(ScoredModel {
            name: name.clone(),
            tasks: m.tasks().to_vec(),
            reference,
            scores: score_groups(*m, groups)?,
        });
    }
    evaluate_scores(&scored, groups, opts)
}
