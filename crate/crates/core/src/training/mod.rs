//! Multi-task loss, optimizers, the mini-batch loop with early stopping,
//! and the experiment drivers.

mod experiments;
mod optim;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use experiments::{
    directional_benchmark, prepare_data, run_experiment, run_transfer_experiment, train_arm, ArmResult,
    BenchmarkResult, BenchmarkSeed, DomesticExperimentRow, ExperimentConfig, ExperimentKind,
    ExperimentReport, ExperimentRow, Panel, PreparedData,
};
pub use optim::{Optimizer, OptimizerConfig};

use crate::datasets::{DataSplit, QueryGroup, Task};
use crate::evaluation::{ndcg_for_task, score_groups, EvalError};
use crate::models::{checkpoint_save, count_params, ModelError, ParamTable, RankingModel, TaskHeads};
use crate::scalar::Scalar;
use crate::tensorcore::{derive_seed, Graph, NodeId, Tensor, TensorError};

/// Lower / upper clamp applied to probabilities before the BCE.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training data{0}")]
    NoData(String),
    #[error("query group {0} is in both the training and validation data")]
    Overlap(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Divergence {
        epoch: usize,
        batch: usize,
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] crate::datasets::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    /// Per-task loss weights in the model's task order; uniform if absent.
    pub task_weights: Option<Vec<f64>>,
    /// Epochs without a validation purchase-NDCG improvement before
    /// stopping; `None` trains every epoch.
    pub patience: Option<usize>,
    /// Train (and validate) on one buyer region only.
    pub region: Option<u32>,
    /// Fraction of query groups held out for validation by
    /// [`train_with_holdout`].
    pub val_fraction: f64,
    pub eval_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 8,
            batch_size: 256,
            learning_rate: 1e-3,
            optimizer: OptimizerConfig::default(),
            task_weights: None,
            patience: Some(3),
            region: None,
            val_fraction: 0.1,
            eval_depth: 48,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, k: usize) -> Result<Vec<f64>, TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} is not a finite non-negative number", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        let w = self.task_weights.clone().unwrap_or_else(|| vec![1.0; k]);
        if w.len() != k {
            return bad(format!("{} task weights for {k} tasks", w.len()));
        }
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || !w.iter().any(|v| *v > 0.0) {
            return bad(format!("task weights {w:?} must be >= 0 with at least one positive"));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean BCE per task over the epoch's training batches.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Mean purchase NDCG on the validation groups.
    pub val_ndcg: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: String,
    pub tasks: Vec<Task>,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept (1-based; 0 means the initial ones).
    pub best_epoch: usize,
    pub best_val_ndcg: Option<f64>,
    pub stopped_early: bool,
    pub train_records: usize,
    pub val_records: usize,
    pub checkpoint: Option<PathBuf>,
    pub params: ParamTable,
    pub wall_clock_secs: f64,
}

/// Compares everything except the wall-clock time.
impl PartialEq for TrainReport {
    fn eq(&self, o: &Self) -> bool {
        self.model == o.model
            && self.tasks == o.tasks
            && self.seed == o.seed
            && self.epochs == o.epochs
            && self.best_epoch == o.best_epoch
            && self.best_val_ndcg == o.best_val_ndcg
            && self.stopped_early == o.stopped_early
            && self.train_records == o.train_records
            && self.val_records == o.val_records
            && self.checkpoint == o.checkpoint
            && self.params == o.params
    }
}

impl TrainReport {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss.iter().sum())
    }
}

/// `Σ_t w_t · mean BCE_t`. Returns the total and the unweighted per-task
/// losses. Descending heads are scored on clamped probabilities, the
/// others on logits.
pub fn multitask_loss<S: Scalar>(
    g: &mut Graph<S>,
    heads: &TaskHeads,
    labels: &[Vec<S>],
    weights: &[f64],
) -> Result<(NodeId, Vec<NodeId>), TensorError> {
    if labels.len() != heads.logits.len() || weights.len() != heads.logits.len() {
        return Err(TensorError::Shape {
            op: "multitask_loss",
            detail: format!(
                "{} heads, {} label columns, {} weights",
                heads.logits.len(),
                labels.len(),
                weights.len()
            ),
        });
    }
    let mut per_task = Vec::with_capacity(labels.len());
    let mut total = None;
    for t in 0..labels.len() {
        let l = if heads.descending {
            let p = g.clamp(heads.probs[t], S::of(PROB_CLAMP), S::of(1.0 - PROB_CLAMP))?;
            g.bce_probs(p, &labels[t])?
        } else {
            g.bce_with_logits(heads.logits[t], &labels[t])?
        };
        per_task.push(l);
        let wl = g.scale(l, S::of(weights[t]))?;
        total = Some(match total {
            None => wl,
            Some(acc) => g.add(acc, wl)?,
        });
    }
    let total = total.ok_or_else(|| TensorError::Shape {
        op: "multitask_loss",
        detail: "no tasks".into(),
    })?;
    Ok((total, per_task))
}

/// Flat features and per-task labels of a set of groups.
struct Table<S> {
    d: usize,
    x: Vec<S>,
    /// `[task][row]`
    y: Vec<Vec<S>>,
}

impl<S: Scalar> Table<S> {
    fn new(groups: &[&QueryGroup], tasks: &[Task]) -> Self {
        let d = groups
            .iter()
            .find_map(|g| g.records.first())
            .map_or(0, |r| r.feature_dim());
        let mut x = Vec::new();
        let mut y = vec![Vec::new(); tasks.len()];
        for r in groups.iter().flat_map(|g| &g.records) {
            x.extend(r.x_user.iter().chain(&r.x_listing).map(|&v| S::of(v)));
            for (t, task) in tasks.iter().enumerate() {
                y[t].push(if r.labels.get(*task) { S::one() } else { S::zero() });
            }
        }
        Self { d, x, y }
    }

    fn rows(&self) -> usize {
        if self.d == 0 {
            0
        } else {
            self.x.len() / self.d
        }
    }

    fn batch(&self, idx: &[usize]) -> (Tensor<S>, Vec<Vec<S>>) {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            x.extend_from_slice(&self.x[i * self.d..(i + 1) * self.d]);
        }
        let y = self.y.iter().map(|col| idx.iter().map(|&i| col[i]).collect()).collect();
        (Tensor::matrix(idx.len(), self.d, x).expect("row width fixed"), y)
    }
}

/// Per-task mean loss over `table`, evaluated in chunks without gradients.
fn evaluate_loss<S: Scalar>(
    model: &(impl RankingModel<S> + ?Sized),
    table: &Table<S>,
    weights: &[f64],
) -> Result<Vec<f64>, TrainError> {
    let n = table.rows();
    let mut sums = vec![0.0; weights.len()];
    if n == 0 {
        return Ok(sums);
    }
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(4096) {
        let (x, y) = table.batch(chunk);
        let mut g = Graph::new();
        let xi = g.constant(x)?;
        let heads = model.forward(&mut g, xi)?;
        let (_, per_task) = multitask_loss(&mut g, &heads, &y, weights)?;
        for (s, id) in sums.iter_mut().zip(per_task) {
            *s += g.value(id).data()[0].as_f64() * chunk.len() as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / n as f64).collect())
}

/// Mean NDCG of the purchase task (or the last task) over `groups`.
pub fn purchase_ndcg<S: Scalar>(
    model: &(impl RankingModel<S> + ?Sized),
    groups: &[QueryGroup],
    depth: usize,
) -> Result<Option<f64>, TrainError> {
    let tasks = model.tasks();
    let ti = tasks
        .iter()
        .position(|&t| t == Task::Purchase)
        .unwrap_or(tasks.len() - 1);
    let scores = score_groups(model, groups)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (g, s) in groups.iter().zip(&scores) {
        let p: Vec<f64> = s.iter().map(|c| c.probs[ti]).collect();
        if let Some(v) = ndcg_for_task(g, &p, tasks[ti], depth)? {
            sum += v;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

fn region_filter<'a>(groups: &'a [QueryGroup], region: Option<u32>) -> Vec<&'a QueryGroup> {
    groups
        .iter()
        .filter(|g| region.map_or(true, |r| g.region == r))
        .collect()
}

/// Trains `model` in place and keeps the parameters of the best validation
/// epoch. Deterministic given `cfg.seed`.
pub fn train<S: Scalar>(
    model: &mut (impl RankingModel<S> + ?Sized),
    train_groups: &[QueryGroup],
    val_groups: &[QueryGroup],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let started = Instant::now();
    let tasks = model.tasks().to_vec();
    let weights = cfg.validate(tasks.len())?;
    let train_sel = region_filter(train_groups, cfg.region);
    let val_sel = region_filter(val_groups, cfg.region);
    let train_ids: HashSet<&str> = train_sel.iter().map(|g| g.query_id.as_str()).collect();
    if let Some(g) = val_sel.iter().find(|g| train_ids.contains(g.query_id.as_str())) {
        return Err(TrainError::Overlap(g.query_id.clone()));
    }
    let table = Table::<S>::new(&train_sel, &tasks);
    if table.rows() == 0 {
        return Err(TrainError::NoData(
            cfg.region.map_or_else(String::new, |r| format!(" for region {r}")),
        ));
    }
    let val_table = Table::<S>::new(&val_sel, &tasks);
    let val_owned: Vec<QueryGroup> = val_sel.iter().map(|g| (*g).clone()).collect();

    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..table.rows()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor<S>>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle/{epoch}")));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums = vec![0.0; tasks.len()];
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |source| TrainError::Divergence {
                epoch,
                batch: bi,
                source,
            };
            let (x, y) = table.batch(chunk);
            let mut g = Graph::new();
            let xi = g.constant(x)?;
            let heads = model.forward(&mut g, xi).map_err(|e| match e {
                ModelError::Tensor(t @ TensorError::NonFinite { .. }) => diverged(t),
                other => other.into(),
            })?;
            let (loss, per_task) = multitask_loss(&mut g, &heads, &y, &weights).map_err(diverged)?;
            g.backward(loss).map_err(diverged)?;
            model.zero_grads();
            model.accumulate_grads(&g)?;
            opt.step(model);
            for (s, id) in sums.iter_mut().zip(per_task) {
                *s += g.value(id).data()[0].as_f64() * chunk.len() as f64;
            }
        }
        let train_loss: Vec<f64> = sums.iter().map(|s| s / table.rows() as f64).collect();
        let val_loss = evaluate_loss(model, &val_table, &weights)?;
        let val_ndcg = if val_owned.is_empty() {
            None
        } else {
            purchase_ndcg(model, &val_owned, cfg.eval_depth)?
        };
        log::debug!("epoch {epoch}: train {train_loss:?} val {val_loss:?} ndcg {val_ndcg:?}");
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_ndcg,
        });

        let score = val_ndcg.unwrap_or(f64::NEG_INFINITY);
        match &best {
            Some((b, _, _)) if score <= *b && val_ndcg.is_some() => since_best += 1,
            _ => {
                best = Some((score, epoch, model.snapshot()));
                since_best = 0;
            }
        }
        if cfg.patience.is_some_and(|p| since_best >= p) && epoch < cfg.epochs {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, best_val_ndcg) = match best {
        Some((score, epoch, snap)) => {
            model.restore(&snap);
            (epoch, score.is_finite().then_some(score))
        }
        None => (0, None),
    };
    Ok(TrainReport {
        model: model.config().label(),
        tasks,
        seed: cfg.seed,
        epochs,
        best_epoch,
        best_val_ndcg,
        stopped_early,
        train_records: table.rows(),
        val_records: val_table.rows(),
        checkpoint: None,
        params: count_params(model),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Holds out `cfg.val_fraction` of `groups` by query hash, trains, and
/// writes the kept parameters to `checkpoint` when given.
pub fn train_with_holdout<S: Scalar>(
    model: &mut (impl RankingModel<S> + ?Sized),
    groups: &[QueryGroup],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    let split = DataSplit::by_query_hash(groups, cfg.val_fraction, 0.0);
    let mut report = train(model, &split.train, &split.val, cfg)?;
    if let Some(path) = checkpoint {
        checkpoint_save(model, path)?;
        report.checkpoint = Some(path.to_path_buf());
    }
    Ok(report)
}
