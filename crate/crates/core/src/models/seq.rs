//! Tasks as a sequence: one token per task, a shared GRU core, and a shared
//! linear head read out at every position.

use serde::{Deserialize, Serialize};

use super::{check_input, task_probs, MdAdaptor, MdConfig, MdPlacement, ModelConfig, ModelError, RankingModel, TaskHeads};
use crate::datasets::Task;
use crate::scalar::Scalar;
use crate::tensorcore::{Activation, Graph, GruCell, Init, Linear, MlpBlock, NodeId, Param, Parameterized, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqModelConfig {
    pub tasks: Vec<Task>,
    /// Width of the raw feature vector.
    pub input_dim: usize,
    /// Hidden widths of each token MLP; the output width equals its input.
    pub token_hidden: Vec<usize>,
    pub hidden: usize,
    pub stage1_layers: usize,
    pub stage2_layers: usize,
    /// Cumulative sigmoid products instead of independent sigmoids.
    pub regularizer: bool,
    pub md: Option<MdConfig>,
}

impl Default for SeqModelConfig {
    fn default() -> Self {
        Self {
            tasks: vec![Task::Click, Task::Purchase],
            input_dim: 0,
            token_hidden: vec![],
            hidden: 32,
            stage1_layers: 1,
            stage2_layers: 1,
            regularizer: true,
            md: None,
        }
    }
}

impl SeqModelConfig {
    pub fn placement(&self) -> Option<MdPlacement> {
        self.md.as_ref().map(|m| m.placement)
    }

    /// Width of every token entering the first GRU layer.
    pub fn token_dim(&self) -> usize {
        match &self.md {
            None => self.input_dim,
            Some(m) => match m.placement {
                MdPlacement::InputPlug => m.plugged_dim(),
                MdPlacement::InSequence => m.layout.invariant_idx.len(),
            },
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.tasks.len() < 2 {
            return bad(format!("need at least 2 tasks, got {}", self.tasks.len()));
        }
        if self.hidden == 0 || self.stage1_layers == 0 || self.token_hidden.contains(&0) {
            return bad("hidden width, stage-1 layers and token widths must be positive".into());
        }
        if let Some(md) = &self.md {
            md.layout.validate()?;
            if md.layout.input_dim() != self.input_dim {
                return bad(format!(
                    "feature layout covers {} columns, input_dim is {}",
                    md.layout.input_dim(),
                    self.input_dim
                ));
            }
            if md.placement == MdPlacement::InSequence && self.stage2_layers == 0 {
                return bad("in_sequence adaptor needs at least one stage-2 layer".into());
            }
        }
        if self.token_dim() == 0 {
            return bad("token width is zero".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SeqModel<S> {
    config: SeqModelConfig,
    seed: u64,
    /// Token MLPs for `tasks[1..]`; task 0 sees the input unchanged.
    pub token_mlps: Vec<MlpBlock<S>>,
    pub stage1: Vec<GruCell<S>>,
    pub stage2: Vec<GruCell<S>>,
    pub head: Linear<S>,
    pub md: Option<MdAdaptor<S>>,
}

impl<S: Scalar> SeqModel<S> {
    pub fn new(config: SeqModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let init = Init::new(seed);
        let d = config.token_dim();
        let mut tw = vec![d];
        tw.extend_from_slice(&config.token_hidden);
        tw.push(d);
        let token_mlps = config.tasks[1..]
            .iter()
            .map(|t| MlpBlock::new(&init, &format!("token.{t}"), &tw, Activation::Relu))
            .collect::<Result<_, _>>()?;
        let h = config.hidden;
        let stage1 = (0..config.stage1_layers)
            .map(|i| GruCell::new(&init, &format!("stage1.{i}"), if i == 0 { d } else { h }, h))
            .collect();
        let md = config
            .md
            .clone()
            .map(|m| MdAdaptor::new(&init, m, &config.tasks))
            .transpose()?;
        let extra = match config.placement() {
            Some(MdPlacement::InSequence) => md.as_ref().map_or(0, |a| a.output_dim()),
            _ => 0,
        };
        let stage2 = (0..config.stage2_layers)
            .map(|i| GruCell::new(&init, &format!("stage2.{i}"), if i == 0 { h + extra } else { h }, h))
            .collect();
        let head = Linear::new(&init, "head/out", h, 1);
        Ok(Self {
            config,
            seed,
            token_mlps,
            stage1,
            stage2,
            head,
            md,
        })
    }

    pub fn seq_config(&self) -> &SeqModelConfig {
        &self.config
    }

    /// Logits for every task, `[batch, 1]` each.
    pub fn logits(&self, g: &mut Graph<S>, x: NodeId) -> Result<Vec<NodeId>, ModelError> {
        check_input(g, x, self.config.input_dim)?;
        let mut md_parts = None;
        let base = match &self.md {
            None => x,
            Some(a) => {
                let (inv, country, dep) = a.split_input(g, x)?;
                match a.config().placement {
                    MdPlacement::InputPlug => {
                        let t = a.transform(g, country, dep, None)?;
                        g.concat(&[inv, t])?
                    }
                    MdPlacement::InSequence => {
                        md_parts = Some((a, country, dep));
                        inv
                    }
                }
            }
        };
        let mut h = seq_tokenize(g, base, &self.token_mlps)?;
        for cell in &self.stage1 {
            h = cell.run(g, &h)?;
        }
        if let Some((a, country, dep)) = md_parts {
            for (t, tok) in h.iter_mut().enumerate() {
                let m = a.transform(g, country, dep, Some(t))?;
                *tok = g.concat(&[*tok, m])?;
            }
        }
        for cell in &self.stage2 {
            h = cell.run(g, &h)?;
        }
        Ok(h.into_iter()
            .map(|tok| self.head.forward(g, tok))
            .collect::<Result<_, _>>()?)
    }
}

/// Token 0 is `x` itself; token `t` is `mlps[t - 1](x)`.
pub fn seq_tokenize<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    mlps: &[MlpBlock<S>],
) -> Result<Vec<NodeId>, TensorError> {
    let (_, d) = g.value(x).dims2().unwrap_or((0, 0));
    let mut tokens = vec![x];
    for mlp in mlps {
        if mlp.d_out() != d {
            return Err(TensorError::Shape {
                op: "seq_tokenize",
                detail: format!("token MLP maps to {}, input width is {d}", mlp.d_out()),
            });
        }
        tokens.push(mlp.forward(g, x)?);
    }
    Ok(tokens)
}

impl<S: Scalar> Parameterized<S> for SeqModel<S> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        self.token_mlps.iter().for_each(|m| m.visit_params(f));
        self.stage1.iter().for_each(|c| c.visit_params(f));
        if let Some(a) = &self.md {
            a.visit_params(f);
        }
        self.stage2.iter().for_each(|c| c.visit_params(f));
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.token_mlps.iter_mut().for_each(|m| m.visit_params_mut(f));
        self.stage1.iter_mut().for_each(|c| c.visit_params_mut(f));
        if let Some(a) = &mut self.md {
            a.visit_params_mut(f);
        }
        self.stage2.iter_mut().for_each(|c| c.visit_params_mut(f));
        self.head.visit_params_mut(f);
    }
}

impl<S: Scalar> RankingModel<S> for SeqModel<S> {
    fn config(&self) -> ModelConfig {
        ModelConfig::Seq(self.config.clone())
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn tasks(&self) -> &[Task] {
        &self.config.tasks
    }

    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn forward(&self, g: &mut Graph<S>, x: NodeId) -> Result<TaskHeads, ModelError> {
        let logits = self.logits(g, x)?;
        let probs = task_probs(g, &logits, self.config.regularizer)?;
        Ok(TaskHeads {
            logits,
            probs,
            descending: self.config.regularizer,
        })
    }

    fn clone_boxed(&self) -> Box<dyn RankingModel<S>> {
        Box::new(self.clone())
    }
}
