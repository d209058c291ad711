//! Soft-parameter-sharing baselines. Every variant ends in one tower per
//! task producing a logit; probabilities are independent sigmoids.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{check_input, task_probs, ModelConfig, ModelError, RankingModel, TaskHeads};
use crate::datasets::Task;
use crate::scalar::Scalar;
use crate::tensorcore::{Activation, Graph, Init, Linear, MlpBlock, NodeId, Param, Parameterized, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    SharedBottom,
    Mlmmoe,
    Ple,
    AdattSp,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::SharedBottom,
        BaselineKind::Mlmmoe,
        BaselineKind::Ple,
        BaselineKind::AdattSp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::SharedBottom => "shared_bottom",
            BaselineKind::Mlmmoe => "mlmmoe",
            BaselineKind::Ple => "ple",
            BaselineKind::AdattSp => "adatt_sp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub tasks: Vec<Task>,
    pub input_dim: usize,
    /// Widths after the input for every expert (and the shared bottom).
    pub expert_widths: Vec<usize>,
    /// Shared experts per level (MLMMoE, PLE).
    pub shared_experts: usize,
    /// Experts per task per level (PLE, AdaTT-sp).
    pub task_experts: usize,
    /// Expert levels (MLMMoE, PLE, AdaTT-sp).
    pub levels: usize,
    /// Hidden widths of each task tower; the output width is 1.
    pub tower_hidden: Vec<usize>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kind: BaselineKind::SharedBottom,
            tasks: vec![Task::Click, Task::Purchase],
            input_dim: 0,
            expert_widths: vec![32, 16],
            shared_experts: 2,
            task_experts: 1,
            levels: 2,
            tower_hidden: vec![64, 32],
        }
    }
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind, tasks: Vec<Task>, input_dim: usize) -> Self {
        Self {
            kind,
            tasks,
            input_dim,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.tasks.is_empty() {
            return bad("baseline needs at least one task");
        }
        if self.input_dim == 0 || self.expert_widths.is_empty() {
            return bad("input and expert widths must be non-empty");
        }
        if self.expert_widths.contains(&0) || self.tower_hidden.contains(&0) {
            return bad("widths must be positive");
        }
        match self.kind {
            BaselineKind::SharedBottom => {}
            BaselineKind::Mlmmoe if self.shared_experts == 0 || self.levels == 0 => {
                return bad("mlmmoe needs shared experts and levels >= 1")
            }
            BaselineKind::Ple if self.shared_experts == 0 || self.task_experts == 0 || self.levels == 0 => {
                return bad("ple needs shared experts, task experts and levels >= 1")
            }
            BaselineKind::AdattSp if self.task_experts == 0 || self.levels == 0 => {
                return bad("adatt_sp needs task experts and levels >= 1")
            }
            _ => {}
        }
        Ok(())
    }

    fn expert_out(&self) -> usize {
        *self.expert_widths.last().unwrap()
    }
}

#[derive(Debug, Clone)]
struct Gate<S> {
    linear: Linear<S>,
}

impl<S: Scalar> Gate<S> {
    fn new(init: &Init, name: &str, d_in: usize, n: usize) -> Self {
        Self {
            linear: Linear::new(init, &format!("{name}/out"), d_in, n),
        }
    }

    /// Softmax-weighted sum of `experts`, each `[batch, o]`.
    fn mix(
        &self,
        g: &mut Graph<S>,
        input: NodeId,
        experts: &[NodeId],
        trace: &mut Option<&mut Vec<(String, NodeId)>>,
    ) -> Result<NodeId, ModelError> {
        let pre = self.linear.forward(g, input)?;
        let w = g.softmax(pre)?;
        if let Some(t) = trace.as_deref_mut() {
            let name = self.linear.weight.name.trim_end_matches("/out.w").to_string();
            t.push((name, w));
        }
        let mut acc = None;
        for (e, &out) in experts.iter().enumerate() {
            let we = g.gather_cols(w, &[e])?;
            let term = g.mul_col(out, we)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        Ok(acc.expect("gates mix at least one expert"))
    }
}

impl<S: Scalar> Parameterized<S> for Gate<S> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        self.linear.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.linear.visit_params_mut(f);
    }
}

fn expert<S: Scalar>(init: &Init, name: &str, d_in: usize, widths: &[usize]) -> Result<MlpBlock<S>, ModelError> {
    let mut w = vec![d_in];
    w.extend_from_slice(widths);
    Ok(MlpBlock::new(init, name, &w, Activation::Relu)?)
}

fn run_expert<S: Scalar>(g: &mut Graph<S>, e: &MlpBlock<S>, x: NodeId) -> Result<NodeId, ModelError> {
    let y = e.forward(g, x)?;
    Ok(g.relu(y)?)
}

#[derive(Debug, Clone)]
struct PleLevel<S> {
    shared: Vec<MlpBlock<S>>,
    /// `[task][expert]`
    task: Vec<Vec<MlpBlock<S>>>,
    task_gates: Vec<Gate<S>>,
    shared_gate: Option<Gate<S>>,
}

#[derive(Debug, Clone)]
struct AdattLevel<S> {
    task: Vec<Vec<MlpBlock<S>>>,
    task_gates: Vec<Gate<S>>,
}

#[derive(Debug, Clone)]
enum Body<S> {
    SharedBottom {
        bottom: MlpBlock<S>,
    },
    Mlmmoe {
        /// `[level][expert]`
        experts: Vec<Vec<MlpBlock<S>>>,
        /// `[level - 1][expert]`: gates feeding each upper-level expert.
        inner_gates: Vec<Vec<Gate<S>>>,
        task_gates: Vec<Gate<S>>,
    },
    Ple(Vec<PleLevel<S>>),
    AdattSp(Vec<AdattLevel<S>>),
}

#[derive(Debug, Clone)]
pub struct BaselineModel<S> {
    config: BaselineConfig,
    seed: u64,
    body: Body<S>,
    towers: Vec<MlpBlock<S>>,
}

impl<S: Scalar> BaselineModel<S> {
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let init = Init::new(seed);
        let d = config.input_dim;
        let o = config.expert_out();
        let ew = &config.expert_widths;
        let level_in = |l: usize| if l == 0 { d } else { o };
        let tasks = &config.tasks;
        let body = match config.kind {
            BaselineKind::SharedBottom => Body::SharedBottom {
                bottom: expert(&init, "bottom", d, ew)?,
            },
            BaselineKind::Mlmmoe => {
                let n = config.shared_experts;
                let mut experts = Vec::new();
                let mut inner_gates = Vec::new();
                for l in 0..config.levels {
                    experts.push(
                        (0..n)
                            .map(|e| expert(&init, &format!("expert.l{l}.s{e}"), level_in(l), ew))
                            .collect::<Result<Vec<_>, _>>()?,
                    );
                    if l > 0 {
                        inner_gates.push(
                            (0..n)
                                .map(|e| Gate::new(&init, &format!("gate.l{l}.e{e}"), d, n))
                                .collect(),
                        );
                    }
                }
                let task_gates = tasks
                    .iter()
                    .map(|t| Gate::new(&init, &format!("gate.{t}"), d, n))
                    .collect();
                Body::Mlmmoe {
                    experts,
                    inner_gates,
                    task_gates,
                }
            }
            BaselineKind::Ple => {
                let (ns, nt, k) = (config.shared_experts, config.task_experts, tasks.len());
                let mut levels = Vec::new();
                for l in 0..config.levels {
                    let shared = (0..ns)
                        .map(|e| expert(&init, &format!("expert.l{l}.s{e}"), level_in(l), ew))
                        .collect::<Result<_, _>>()?;
                    let task = tasks
                        .iter()
                        .map(|t| {
                            (0..nt)
                                .map(|e| expert(&init, &format!("expert.l{l}.{t}.{e}"), level_in(l), ew))
                                .collect::<Result<Vec<_>, _>>()
                        })
                        .collect::<Result<_, _>>()?;
                    let task_gates = tasks
                        .iter()
                        .map(|t| Gate::new(&init, &format!("gate.l{l}.{t}"), level_in(l), nt + ns))
                        .collect();
                    let shared_gate = (l + 1 < config.levels)
                        .then(|| Gate::new(&init, &format!("gate.l{l}.shared"), level_in(l), k * nt + ns));
                    levels.push(PleLevel {
                        shared,
                        task,
                        task_gates,
                        shared_gate,
                    });
                }
                Body::Ple(levels)
            }
            BaselineKind::AdattSp => {
                let (nt, k) = (config.task_experts, tasks.len());
                let mut levels = Vec::new();
                for l in 0..config.levels {
                    let task = tasks
                        .iter()
                        .map(|t| {
                            (0..nt)
                                .map(|e| expert(&init, &format!("expert.l{l}.{t}.{e}"), level_in(l), ew))
                                .collect::<Result<Vec<_>, _>>()
                        })
                        .collect::<Result<_, _>>()?;
                    let task_gates = tasks
                        .iter()
                        .map(|t| Gate::new(&init, &format!("gate.l{l}.{t}"), level_in(l), k * nt))
                        .collect();
                    levels.push(AdattLevel { task, task_gates });
                }
                Body::AdattSp(levels)
            }
        };
        let mut tw = vec![o];
        tw.extend_from_slice(&config.tower_hidden);
        tw.push(1);
        let towers = tasks
            .iter()
            .map(|t| MlpBlock::new(&init, &format!("tower.{t}"), &tw, Activation::Relu))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config,
            seed,
            body,
            towers,
        })
    }

    pub fn baseline_config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn kind(&self) -> BaselineKind {
        self.config.kind
    }

    /// Per-task tower inputs, recording every gate's mixture weights.
    fn task_inputs(
        &self,
        g: &mut Graph<S>,
        x: NodeId,
        mut trace: Option<&mut Vec<(String, NodeId)>>,
    ) -> Result<Vec<NodeId>, ModelError> {
        let k = self.config.tasks.len();
        Ok(match &self.body {
            Body::SharedBottom { bottom } => vec![run_expert(g, bottom, x)?; k],
            Body::Mlmmoe {
                experts,
                inner_gates,
                task_gates,
            } => {
                let mut outs: Vec<NodeId> = experts[0]
                    .iter()
                    .map(|e| run_expert(g, e, x))
                    .collect::<Result<_, _>>()?;
                for (level, gates) in experts[1..].iter().zip(inner_gates) {
                    let mut next = Vec::with_capacity(level.len());
                    for (e, gate) in level.iter().zip(gates) {
                        let input = gate.mix(g, x, &outs, &mut trace)?;
                        next.push(run_expert(g, e, input)?);
                    }
                    outs = next;
                }
                task_gates
                    .iter()
                    .map(|gate| gate.mix(g, x, &outs, &mut trace))
                    .collect::<Result<_, _>>()?
            }
            Body::Ple(levels) => {
                let mut task_in = vec![x; k];
                let mut shared_in = x;
                for lvl in levels {
                    let shared: Vec<NodeId> = lvl
                        .shared
                        .iter()
                        .map(|e| run_expert(g, e, shared_in))
                        .collect::<Result<_, _>>()?;
                    let mut own = Vec::with_capacity(k);
                    for (experts, &input) in lvl.task.iter().zip(&task_in) {
                        own.push(
                            experts
                                .iter()
                                .map(|e| run_expert(g, e, input))
                                .collect::<Result<Vec<_>, _>>()?,
                        );
                    }
                    let mut next = Vec::with_capacity(k);
                    for t in 0..k {
                        let pool: Vec<NodeId> = own[t].iter().chain(&shared).copied().collect();
                        next.push(lvl.task_gates[t].mix(g, task_in[t], &pool, &mut trace)?);
                    }
                    if let Some(gate) = &lvl.shared_gate {
                        let pool: Vec<NodeId> = own.iter().flatten().chain(&shared).copied().collect();
                        shared_in = gate.mix(g, shared_in, &pool, &mut trace)?;
                    }
                    task_in = next;
                }
                task_in
            }
            Body::AdattSp(levels) => {
                let mut task_in = vec![x; k];
                for lvl in levels {
                    let mut pool = Vec::new();
                    for (experts, &input) in lvl.task.iter().zip(&task_in) {
                        for e in experts {
                            pool.push(run_expert(g, e, input)?);
                        }
                    }
                    let mut next = Vec::with_capacity(k);
                    for t in 0..k {
                        next.push(lvl.task_gates[t].mix(g, task_in[t], &pool, &mut trace)?);
                    }
                    task_in = next;
                }
                task_in
            }
        })
    }

    /// Mixture weights `[batch, n_experts]` of every gate, by gate name.
    pub fn gate_weights(&self, x: &Tensor<S>) -> Result<Vec<(String, Tensor<S>)>, ModelError> {
        let mut g = Graph::new();
        let xi = g.constant(x.clone())?;
        check_input(&g, xi, self.config.input_dim)?;
        let mut trace = Vec::new();
        self.task_inputs(&mut g, xi, Some(&mut trace))?;
        Ok(trace
            .into_iter()
            .map(|(n, id)| (n, g.value(id).detached()))
            .collect())
    }

    /// Zeroes every task-specific expert (PLE, AdaTT-sp).
    pub fn zero_task_experts(&mut self) {
        let levels: Vec<&mut Vec<Vec<MlpBlock<S>>>> = match &mut self.body {
            Body::Ple(ls) => ls.iter_mut().map(|l| &mut l.task).collect(),
            Body::AdattSp(ls) => ls.iter_mut().map(|l| &mut l.task).collect(),
            _ => Vec::new(),
        };
        for task in levels {
            for e in task.iter_mut().flatten() {
                e.layers.iter_mut().for_each(|l| l.set_constant(S::zero(), S::zero()));
            }
        }
    }
}

impl<S: Scalar> Parameterized<S> for BaselineModel<S> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        match &self.body {
            Body::SharedBottom { bottom } => bottom.visit_params(f),
            Body::Mlmmoe {
                experts,
                inner_gates,
                task_gates,
            } => {
                experts.iter().flatten().for_each(|e| e.visit_params(f));
                inner_gates.iter().flatten().for_each(|gt| gt.visit_params(f));
                task_gates.iter().for_each(|gt| gt.visit_params(f));
            }
            Body::Ple(levels) => {
                for l in levels {
                    l.shared.iter().for_each(|e| e.visit_params(f));
                    l.task.iter().flatten().for_each(|e| e.visit_params(f));
                    l.task_gates.iter().for_each(|gt| gt.visit_params(f));
                    if let Some(gt) = &l.shared_gate {
                        gt.visit_params(f);
                    }
                }
            }
            Body::AdattSp(levels) => {
                for l in levels {
                    l.task.iter().flatten().for_each(|e| e.visit_params(f));
                    l.task_gates.iter().for_each(|gt| gt.visit_params(f));
                }
            }
        }
        self.towers.iter().for_each(|t| t.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        match &mut self.body {
            Body::SharedBottom { bottom } => bottom.visit_params_mut(f),
            Body::Mlmmoe {
                experts,
                inner_gates,
                task_gates,
            } => {
                experts.iter_mut().flatten().for_each(|e| e.visit_params_mut(f));
                inner_gates.iter_mut().flatten().for_each(|gt| gt.visit_params_mut(f));
                task_gates.iter_mut().for_each(|gt| gt.visit_params_mut(f));
            }
            Body::Ple(levels) => {
                for l in levels {
                    l.shared.iter_mut().for_each(|e| e.visit_params_mut(f));
                    l.task.iter_mut().flatten().for_each(|e| e.visit_params_mut(f));
                    l.task_gates.iter_mut().for_each(|gt| gt.visit_params_mut(f));
                    if let Some(gt) = &mut l.shared_gate {
                        gt.visit_params_mut(f);
                    }
                }
            }
            Body::AdattSp(levels) => {
                for l in levels {
                    l.task.iter_mut().flatten().for_each(|e| e.visit_params_mut(f));
                    l.task_gates.iter_mut().for_each(|gt| gt.visit_params_mut(f));
                }
            }
        }
        self.towers.iter_mut().for_each(|t| t.visit_params_mut(f));
    }
}

impl<S: Scalar> RankingModel<S> for BaselineModel<S> {
    fn config(&self) -> ModelConfig {
        ModelConfig::Baseline {
            baseline: self.config.clone(),
            md: None,
        }
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
        check_input(g, x, self.config.input_dim)?;
        let inputs = self.task_inputs(g, x, None)?;
        let logits = self
            .towers
            .iter()
            .zip(inputs)
            .map(|(t, h)| t.forward(g, h))
            .collect::<Result<Vec<_>, _>>()?;
        let probs = task_probs(g, &logits, false)?;
        Ok(TaskHeads {
            logits,
            probs,
            descending: false,
        })
    }

    fn clone_boxed(&self) -> Box<dyn RankingModel<S>> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::predict;

    fn small(kind: BaselineKind) -> BaselineConfig {
        BaselineConfig {
            expert_widths: vec![5, 4],
            tower_hidden: vec![3],
            ..BaselineConfig::new(kind, Task::standard(3).unwrap(), 6)
        }
    }

    fn batch() -> Tensor<f64> {
        Tensor::matrix(
            3,
            6,
            (0..18).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn gates_sum_to_one() {
        for kind in BaselineKind::ALL {
            let m = BaselineModel::<f64>::new(small(kind), 4).unwrap();
            let gates = m.gate_weights(&batch()).unwrap();
            if kind != BaselineKind::SharedBottom {
                assert!(!gates.is_empty(), "{kind}");
            }
            for (name, w) in gates {
                let (n, e) = w.dims2().unwrap();
                for r in 0..n {
                    let row: Vec<f64> = (0..e).map(|c| w.at(r, c)).collect();
                    assert!(row.iter().all(|&v| v >= 0.0), "{name}");
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{name}");
                }
            }
        }
    }

    #[test]
    fn single_expert_mlmmoe_is_shared_bottom() {
        let mut c = small(BaselineKind::Mlmmoe);
        c.shared_experts = 1;
        c.levels = 1;
        let moe = BaselineModel::<f64>::new(c.clone(), 2).unwrap();
        for (_, w) in moe.gate_weights(&batch()).unwrap() {
            assert!(w.data().iter().all(|&v| v == 1.0));
        }
        // same weights poured into a shared-bottom give the same outputs
        c.kind = BaselineKind::SharedBottom;
        let mut sb = BaselineModel::<f64>::new(c, 2).unwrap();
        let mut values = Vec::new();
        moe.visit_params(&mut |p| {
            if !p.name.starts_with("gate") {
                values.push(p.value.clone())
            }
        });
        sb.restore(&values);
        let a = predict(&moe, &batch()).unwrap();
        let b = predict(&sb, &batch()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ple_zero_task_experts_depends_on_shared_only() {
        let mut c = small(BaselineKind::Ple);
        c.levels = 1;
        let mut m = BaselineModel::<f64>::new(c, 5).unwrap();
        m.zero_task_experts();
        let before = predict(&m, &batch()).unwrap();
        // perturbing shared experts changes outputs
        let mut bumped = m.clone();
        bumped.visit_params_mut(&mut |p| {
            if p.name.starts_with("expert.l0.s0/l1.b") {
                p.value.data_mut().iter_mut().for_each(|v| *v += 1.0);
            }
        });
        assert_ne!(before, predict(&bumped, &batch()).unwrap());
        // task-specific experts contribute zero vectors to every mixture
        let mut g = Graph::new();
        let xi = g.constant(batch()).unwrap();
        if let Body::Ple(levels) = &m.body {
            for e in levels[0].task.iter().flatten() {
                let y = run_expert(&mut g, e, xi).unwrap();
                assert!(g.value(y).data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn adatt_matches_hand_composition() {
        let mut c = small(BaselineKind::AdattSp);
        c.tasks = Task::standard(2).unwrap();
        c.levels = 1;
        c.expert_widths = vec![3];
        c.tower_hidden = vec![];
        let m = BaselineModel::<f64>::new(c, 0).unwrap();
        let x = Tensor::matrix(1, 6, vec![0.5, -1.0, 2.0, 0.0, 1.0, -0.5]).unwrap();
        let got = predict(&m, &x).unwrap();

        let Body::AdattSp(levels) = &m.body else { unreachable!() };
        let lvl = &levels[0];
        let affine = |l: &Linear<f64>, v: &[f64]| -> Vec<f64> {
            (0..l.d_out())
                .map(|o| {
                    l.bias.value.data()[o]
                        + v.iter().enumerate().map(|(i, vi)| vi * l.weight.value.at(i, o)).sum::<f64>()
                })
                .collect()
        };
        let xs = x.data().to_vec();
        let experts: Vec<Vec<f64>> = lvl
            .task
            .iter()
            .flatten()
            .map(|e| affine(&e.layers[0], &xs).into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        for t in 0..2 {
            let pre = affine(&lvl.task_gates[t].linear, &xs);
            let z: f64 = pre.iter().map(|v| v.exp()).sum();
            let w: Vec<f64> = pre.iter().map(|v| v.exp() / z).collect();
            let mixed: Vec<f64> = (0..3).map(|j| w[0] * experts[0][j] + w[1] * experts[1][j]).collect();
            let logit = affine(&m.towers[t].layers[0], &mixed)[0];
            assert!((logit - got[0].logits[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_counts_rejected() {
        let mut c = small(BaselineKind::Ple);
        c.shared_experts = 0;
        assert!(BaselineModel::<f64>::new(c, 0).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(BaselineKind::parse(k.as_str()), Some(k));
        }
        assert_eq!(BaselineKind::parse("moe"), None);
    }
}
