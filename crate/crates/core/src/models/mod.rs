//! Ranking architectures: the sequence-over-tasks model, the region mask
//! adaptor, and the Shared-Bottom / MLMMoE / PLE / AdaTT-sp baselines.

mod baselines;
mod checkpoint;
mod md;
mod seq;
mod spec;

use serde::{Deserialize, Serialize};

pub use baselines::{BaselineConfig, BaselineKind, BaselineModel};
pub use checkpoint::{
    checkpoint_load, checkpoint_save, checkpoint_save_with_lineage, read_checkpoint_header,
    CheckpointHeader, ParamEntry,
};
pub use md::{plug_md, FeatureLayout, MdAdaptor, MdConfig, MdPlacement, PluggedModel};
pub use seq::{seq_tokenize, SeqModel, SeqModelConfig};
pub use spec::{Architecture, ModelDefaults, ModelSpec};

use crate::datasets::{InteractionRecord, Task};
use crate::scalar::Scalar;
use crate::tensorcore::{Graph, NodeId, Parameterized, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    MdMode(String),
    #[error("checkpoint parameter {name}: {detail}")]
    CheckpointParam { name: String, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-task graph outputs of one forward pass, each `[batch, 1]`.
#[derive(Debug, Clone)]
pub struct TaskHeads {
    pub logits: Vec<NodeId>,
    pub probs: Vec<NodeId>,
    /// Whether `probs` are cumulative sigmoid products of the logits.
    pub descending: bool,
}

/// Scores for one record, tasks in funnel order.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskScores {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Architecture descriptor; enough to rebuild a model from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelConfig {
    Seq(SeqModelConfig),
    Baseline {
        baseline: BaselineConfig,
        /// Input-level adaptor in front of the baseline.
        md: Option<MdConfig>,
    },
}

impl ModelConfig {
    pub fn tasks(&self) -> &[Task] {
        match self {
            ModelConfig::Seq(c) => &c.tasks,
            ModelConfig::Baseline { baseline, .. } => &baseline.tasks,
        }
    }

    pub fn with_tasks(&self, tasks: Vec<Task>) -> ModelConfig {
        let mut c = self.clone();
        match &mut c {
            ModelConfig::Seq(s) => s.tasks = tasks,
            ModelConfig::Baseline { baseline, .. } => baseline.tasks = tasks,
        }
        c
    }

    pub fn is_seq(&self) -> bool {
        matches!(self, ModelConfig::Seq(_))
    }

    /// Plain shared-bottom, the reference all deltas are reported against.
    pub fn is_reference(&self) -> bool {
        matches!(
            self,
            ModelConfig::Baseline {
                baseline: BaselineConfig {
                    kind: BaselineKind::SharedBottom,
                    ..
                },
                md: None
            }
        )
    }

    pub fn md(&self) -> Option<&MdConfig> {
        match self {
            ModelConfig::Seq(c) => c.md.as_ref(),
            ModelConfig::Baseline { md, .. } => md.as_ref(),
        }
    }

    /// Short human name, e.g. `seq+md` or `ple+md`.
    pub fn label(&self) -> String {
        match self {
            ModelConfig::Seq(c) => {
                let mut s = "seq".to_string();
                if let Some(md) = &c.md {
                    s.push_str("+md");
                    if md.placement == MdPlacement::InputPlug {
                        s.push_str("@input_plug");
                    }
                }
                if !c.regularizer {
                    s.push_str("-noreg");
                }
                s
            }
            ModelConfig::Baseline { baseline, md } => {
                let mut s = baseline.kind.as_str().to_string();
                if md.is_some() {
                    s.push_str("+md");
                }
                s
            }
        }
    }
}

/// Model interface shared by every architecture.
pub trait RankingModel<S: Scalar>: Parameterized<S> + Send + Sync {
    fn config(&self) -> ModelConfig;

    /// Root seed parameters were initialized from.
    fn seed(&self) -> u64;

    fn tasks(&self) -> &[Task];

    /// Width of the flat feature vector the model consumes.
    fn input_dim(&self) -> usize;

    /// Builds the forward pass for `x: [batch, input_dim]` on `g`.
    fn forward(&self, g: &mut Graph<S>, x: NodeId) -> Result<TaskHeads, ModelError>;

    fn clone_boxed(&self) -> Box<dyn RankingModel<S>>;
}

impl<S: Scalar> Parameterized<S> for Box<dyn RankingModel<S>> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a crate::tensorcore::Param<S>)) {
        self.as_ref().visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut crate::tensorcore::Param<S>)) {
        self.as_mut().visit_params_mut(f)
    }
}

impl<S: Scalar> Clone for Box<dyn RankingModel<S>> {
    fn clone(&self) -> Self {
        self.clone_boxed()
    }
}

pub(crate) fn check_input<S: Scalar>(g: &Graph<S>, x: NodeId, expected: usize) -> Result<usize, ModelError> {
    match g.value(x).dims2() {
        Some((n, d)) if d == expected => Ok(n),
        _ => Err(ModelError::Tensor(TensorError::Shape {
            op: "model_input",
            detail: format!("input {:?}, expected [batch, {expected}]", g.value(x).shape()),
        })),
    }
}

/// Sigmoid heads, or cumulative sigmoid products when `descending`.
pub(crate) fn task_probs<S: Scalar>(
    g: &mut Graph<S>,
    logits: &[NodeId],
    descending: bool,
) -> Result<Vec<NodeId>, TensorError> {
    let mut probs = Vec::with_capacity(logits.len());
    for &l in logits {
        let s = g.sigmoid(l)?;
        let p = match (descending, probs.last()) {
            (true, Some(&prev)) => g.mul(prev, s)?,
            _ => s,
        };
        probs.push(p);
    }
    Ok(probs)
}

/// Stacks record features into a `[n, d]` matrix.
pub fn feature_matrix<'a, S: Scalar>(
    records: impl IntoIterator<Item = &'a InteractionRecord>,
) -> Tensor<S> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut d = 0;
    for r in records {
        d = r.feature_dim();
        data.extend(r.x_user.iter().chain(&r.x_listing).map(|&v| S::of(v)));
        n += 1;
    }
    Tensor::matrix(n, d, data).expect("records share a feature width")
}

/// Runs `model` on `x: [n, d]` outside training and returns per-row scores.
pub fn predict<S: Scalar>(
    model: &(impl RankingModel<S> + ?Sized),
    x: &Tensor<S>,
) -> Result<Vec<TaskScores>, ModelError> {
    let mut g = Graph::new();
    let xi = g.constant(x.clone())?;
    let heads = model.forward(&mut g, xi)?;
    let n = x.dims2().map_or(0, |(n, _)| n);
    let mut out = vec![
        TaskScores {
            probs: Vec::with_capacity(heads.probs.len()),
            logits: Vec::with_capacity(heads.logits.len()),
        };
        n
    ];
    for (&l, &p) in heads.logits.iter().zip(&heads.probs) {
        for (row, (lv, pv)) in out
            .iter_mut()
            .zip(g.value(l).data().iter().zip(g.value(p).data()))
        {
            row.logits.push(lv.as_f64());
            row.probs.push(pv.as_f64());
        }
    }
    Ok(out)
}

/// Parameter counts grouped by component, in first-seen order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    pub components: Vec<(String, usize)>,
    pub total: usize,
}

pub fn count_params<S: Scalar>(model: &(impl Parameterized<S> + ?Sized)) -> ParamTable {
    let mut components: Vec<(String, usize)> = Vec::new();
    model.visit_params(&mut |p| {
        let c = p.component();
        match components.iter_mut().find(|(name, _)| name == c) {
            Some((_, n)) => *n += p.numel(),
            None => components.push((c.to_string(), p.numel())),
        }
    });
    let total = components.iter().map(|(_, n)| n).sum();
    ParamTable { components, total }
}

/// Builds a freshly initialized model.
pub fn build_model<S: Scalar>(
    config: &ModelConfig,
    seed: u64,
) -> Result<Box<dyn RankingModel<S>>, ModelError> {
    Ok(match config {
        ModelConfig::Seq(c) => Box::new(SeqModel::new(c.clone(), seed)?),
        ModelConfig::Baseline { baseline, md: None } => {
            Box::new(BaselineModel::new(baseline.clone(), seed)?)
        }
        ModelConfig::Baseline {
            baseline,
            md: Some(md),
        } => Box::new(PluggedModel::build(baseline, md, seed)?),
    })
}
