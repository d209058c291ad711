//! Region mask adaptor: a country-derived mask scales the region-dependent
//! features, and a shared transform maps them to `d_t` columns.

use serde::{Deserialize, Serialize};

use super::{build_model, check_input, BaselineConfig, ModelConfig, ModelError, RankingModel, TaskHeads};
use crate::datasets::{FeatureSplit, Task};
use crate::scalar::Scalar;
use crate::tensorcore::{Activation, Graph, Init, MlpBlock, NodeId, Param, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdPlacement {
    /// One mask in front of the whole model.
    InputPlug,
    /// One mask per task, joined to each token between the GRU stages.
    InSequence,
}

impl MdPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            MdPlacement::InputPlug => "input_plug",
            MdPlacement::InSequence => "in_sequence",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [MdPlacement::InputPlug, MdPlacement::InSequence]
            .into_iter()
            .find(|p| p.as_str() == s)
    }
}

/// Column indices of the three feature groups in the flat input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub country_idx: Vec<usize>,
    pub dependent_idx: Vec<usize>,
    pub invariant_idx: Vec<usize>,
}

impl FeatureLayout {
    pub fn input_dim(&self) -> usize {
        self.country_idx.len() + self.dependent_idx.len() + self.invariant_idx.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self.input_dim();
        let mut seen = vec![false; d];
        for &i in self
            .country_idx
            .iter()
            .chain(&self.dependent_idx)
            .chain(&self.invariant_idx)
        {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                _ => {
                    return Err(ModelError::Config(format!(
                        "feature layout does not partition 0..{d} (column {i})"
                    )))
                }
            }
        }
        if self.country_idx.is_empty() || self.dependent_idx.is_empty() {
            return Err(ModelError::Config(
                "feature layout needs country and dependent columns".into(),
            ));
        }
        Ok(())
    }
}

impl From<&FeatureSplit> for FeatureLayout {
    fn from(s: &FeatureSplit) -> Self {
        Self {
            country_idx: s.country_idx.clone(),
            dependent_idx: s.dependent_idx.clone(),
            invariant_idx: s.invariant_idx.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdConfig {
    pub placement: MdPlacement,
    pub layout: FeatureLayout,
    /// Hidden widths of each mask MLP (country -> |dependent|).
    pub mask_hidden: Vec<usize>,
    /// Hidden widths of the transform MLP (|dependent| -> d_t).
    pub transform_hidden: Vec<usize>,
    pub transformed_dim: usize,
}

impl Default for MdConfig {
    fn default() -> Self {
        Self {
            placement: MdPlacement::InSequence,
            layout: FeatureLayout {
                country_idx: vec![],
                dependent_idx: vec![],
                invariant_idx: vec![],
            },
            mask_hidden: vec![],
            transform_hidden: vec![],
            transformed_dim: 8,
        }
    }
}

impl MdConfig {
    pub fn new(placement: MdPlacement, layout: FeatureLayout) -> Self {
        Self {
            placement,
            layout,
            ..Self::default()
        }
    }

    /// Width of `concat(invariant, transformed)` fed to a plugged model.
    pub fn plugged_dim(&self) -> usize {
        self.layout.invariant_idx.len() + self.transformed_dim
    }
}

#[derive(Debug, Clone)]
pub struct MdAdaptor<S> {
    config: MdConfig,
    tasks: Vec<Task>,
    masks: Vec<MlpBlock<S>>,
    transform: MlpBlock<S>,
}

fn widths(first: usize, hidden: &[usize], last: usize) -> Vec<usize> {
    let mut w = vec![first];
    w.extend_from_slice(hidden);
    w.push(last);
    w
}

impl<S: Scalar> MdAdaptor<S> {
    /// `tasks` names the per-task masks in `in_sequence` mode and is
    /// ignored for `input_plug`.
    pub fn new(init: &Init, config: MdConfig, tasks: &[Task]) -> Result<Self, ModelError> {
        config.layout.validate()?;
        if config.transformed_dim == 0 {
            return Err(ModelError::Config("transformed_dim must be positive".into()));
        }
        let n_country = config.layout.country_idx.len();
        let n_dep = config.layout.dependent_idx.len();
        let mask_w = widths(n_country, &config.mask_hidden, n_dep);
        let masks = match config.placement {
            MdPlacement::InputPlug => {
                vec![MlpBlock::new(init, "md.mask", &mask_w, Activation::Relu)?]
            }
            MdPlacement::InSequence => tasks
                .iter()
                .map(|t| MlpBlock::new(init, &format!("md.mask.{t}"), &mask_w, Activation::Relu))
                .collect::<Result<_, _>>()?,
        };
        let transform = MlpBlock::new(
            init,
            "md.transform",
            &widths(n_dep, &config.transform_hidden, config.transformed_dim),
            Activation::Relu,
        )?;
        Ok(Self {
            config,
            tasks: tasks.to_vec(),
            masks,
            transform,
        })
    }

    pub fn config(&self) -> &MdConfig {
        &self.config
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.config.layout
    }

    pub fn output_dim(&self) -> usize {
        self.config.transformed_dim
    }

    pub fn masks(&self) -> &[MlpBlock<S>] {
        &self.masks
    }

    pub fn masks_mut(&mut self) -> &mut [MlpBlock<S>] {
        &mut self.masks
    }

    pub fn transform_mut(&mut self) -> &mut MlpBlock<S> {
        &mut self.transform
    }

    /// Gathers `(invariant, country, dependent)` column blocks from `x`.
    pub fn split_input(
        &self,
        g: &mut Graph<S>,
        x: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId), ModelError> {
        check_input(g, x, self.config.layout.input_dim())?;
        let l = &self.config.layout;
        let inv = g.gather_cols(x, &l.invariant_idx)?;
        let country = g.gather_cols(x, &l.country_idx)?;
        let dep = g.gather_cols(x, &l.dependent_idx)?;
        Ok((inv, country, dep))
    }

    /// `transform(mask(country) ⊙ dep)`. `task` selects the per-task mask in
    /// `in_sequence` mode and must be `None` for `input_plug`.
    pub fn transform(
        &self,
        g: &mut Graph<S>,
        country: NodeId,
        dep: NodeId,
        task: Option<usize>,
    ) -> Result<NodeId, ModelError> {
        let mask = match (self.config.placement, task) {
            (MdPlacement::InputPlug, None) => &self.masks[0],
            (MdPlacement::InputPlug, Some(t)) => {
                return Err(ModelError::MdMode(format!(
                    "task index {t} given to an input_plug adaptor, which has a single mask"
                )))
            }
            (MdPlacement::InSequence, Some(t)) => self.masks.get(t).ok_or_else(|| {
                ModelError::MdMode(format!("task index {t} out of range for {} masks", self.masks.len()))
            })?,
            (MdPlacement::InSequence, None) => {
                return Err(ModelError::MdMode(
                    "in_sequence adaptor needs a task index".into(),
                ))
            }
        };
        let m = mask.forward(g, country)?;
        let masked = g.mul(m, dep)?;
        Ok(self.transform.forward(g, masked)?)
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }
}

impl<S: Scalar> Parameterized<S> for MdAdaptor<S> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        self.masks.iter().for_each(|m| m.visit_params(f));
        self.transform.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.masks.iter_mut().for_each(|m| m.visit_params_mut(f));
        self.transform.visit_params_mut(f);
    }
}

/// A model fed `concat(invariant, transform(mask ⊙ dependent))` instead of
/// the raw features.
pub struct PluggedModel<S: Scalar> {
    inner: Box<dyn RankingModel<S>>,
    adaptor: MdAdaptor<S>,
    seed: u64,
}

impl<S: Scalar> Clone for PluggedModel<S> {
    fn clone(&self) -> Self {
        Self {
            inner: self.inner.clone_boxed(),
            adaptor: self.adaptor.clone(),
            seed: self.seed,
        }
    }
}

/// Wraps `inner` behind an `input_plug` adaptor. `inner` must consume
/// `|invariant| + d_t` columns.
pub fn plug_md<S: Scalar>(
    inner: Box<dyn RankingModel<S>>,
    adaptor: MdAdaptor<S>,
) -> Result<PluggedModel<S>, ModelError> {
    if adaptor.config.placement != MdPlacement::InputPlug {
        return Err(ModelError::MdMode(
            "only an input_plug adaptor can wrap a model".into(),
        ));
    }
    let want = adaptor.config.plugged_dim();
    if inner.input_dim() != want {
        return Err(ModelError::Config(format!(
            "wrapped model consumes {} columns, adaptor produces {want}",
            inner.input_dim()
        )));
    }
    let seed = inner.seed();
    Ok(PluggedModel {
        inner,
        adaptor,
        seed,
    })
}

impl<S: Scalar> PluggedModel<S> {
    /// Builds `baseline` at the reduced input width and wraps it.
    pub fn build(baseline: &BaselineConfig, md: &MdConfig, seed: u64) -> Result<Self, ModelError> {
        if md.placement != MdPlacement::InputPlug {
            return Err(ModelError::MdMode(
                "baselines only take the input_plug placement".into(),
            ));
        }
        let mut inner_cfg = baseline.clone();
        inner_cfg.input_dim = md.plugged_dim();
        let inner = build_model(
            &ModelConfig::Baseline {
                baseline: inner_cfg,
                md: None,
            },
            seed,
        )?;
        let adaptor = MdAdaptor::new(&Init::new(seed), md.clone(), &baseline.tasks)?;
        plug_md(inner, adaptor)
    }

    pub fn inner(&self) -> &dyn RankingModel<S> {
        self.inner.as_ref()
    }

    pub fn adaptor(&self) -> &MdAdaptor<S> {
        &self.adaptor
    }

    pub fn adaptor_mut(&mut self) -> &mut MdAdaptor<S> {
        &mut self.adaptor
    }
}

impl<S: Scalar> Parameterized<S> for PluggedModel<S> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        self.adaptor.visit_params(f);
        self.inner.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.adaptor.visit_params_mut(f);
        self.inner.visit_params_mut(f);
    }
}

impl<S: Scalar> RankingModel<S> for PluggedModel<S> {
    fn config(&self) -> ModelConfig {
        match self.inner.config() {
            ModelConfig::Baseline { mut baseline, .. } => {
                baseline.input_dim = self.adaptor.config.layout.input_dim();
                ModelConfig::Baseline {
                    baseline,
                    md: Some(self.adaptor.config.clone()),
                }
            }
            // plug_md accepts any model; only baselines round-trip through
            // a descriptor.
            other => other,
        }
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn tasks(&self) -> &[Task] {
        self.inner.tasks()
    }

    fn input_dim(&self) -> usize {
        self.adaptor.config.layout.input_dim()
    }

    fn forward(&self, g: &mut Graph<S>, x: NodeId) -> Result<TaskHeads, ModelError> {
        let (inv, country, dep) = self.adaptor.split_input(g, x)?;
        let t = self.adaptor.transform(g, country, dep, None)?;
        let joined = g.concat(&[inv, t])?;
        self.inner.forward(g, joined)
    }

    fn clone_boxed(&self) -> Box<dyn RankingModel<S>> {
        Box::new(self.clone())
    }
}
