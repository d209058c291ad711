//! Multi-arm, multi-seed experiment drivers. Every arm of a seed shares
//! that seed, so arms can be compared pairwise.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainError, TrainReport};
use crate::datasets::{
    generate, split_features, DataHeader, DataSplit, DistanceMetric, FeatureSplit, GeneratorConfig, QueryGroup, Task,
    DEFAULT_THRESHOLD,
};
use crate::evaluation::{evaluate_models, EvalOptions};
use crate::models::{
    build_model, checkpoint_load, checkpoint_save, read_checkpoint_header, Architecture, FeatureLayout, MdPlacement,
    ModelDefaults, ModelError, ModelSpec, RankingModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RegularizerAblation,
    Transfer2to3,
    SingleVsAllRegion,
    MdPlugplay,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 4] = [
        ExperimentKind::RegularizerAblation,
        ExperimentKind::Transfer2to3,
        ExperimentKind::SingleVsAllRegion,
        ExperimentKind::MdPlugplay,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::RegularizerAblation => "regularizer_ablation",
            ExperimentKind::Transfer2to3 => "transfer_2to3",
            ExperimentKind::SingleVsAllRegion => "single_vs_all_region",
            ExperimentKind::MdPlugplay => "md_plugplay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn names() -> String {
        Self::ALL.map(Self::as_str).join(", ")
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub models: ModelDefaults,
    /// Task count for experiments that do not fix it.
    pub tasks: usize,
    pub split_threshold: f64,
    pub split_metric: DistanceMetric,
    /// Query groups held out for testing, by query hash.
    pub test_fraction: f64,
    pub eval: EvalOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            models: ModelDefaults::default(),
            tasks: 2,
            split_threshold: DEFAULT_THRESHOLD,
            split_metric: DistanceMetric::Ks,
            test_fraction: 0.2,
            eval: EvalOptions::default(),
        }
    }
}

impl ExperimentConfig {
    fn task_list(&self, k: usize) -> Result<Vec<Task>, TrainError> {
        Task::standard(k).ok_or_else(|| TrainError::Config(format!("task count must be 2 or 3, got {k}")))
    }
}

/// Train / validation / test groups plus the feature split learned on the
/// training groups.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub header: DataHeader,
    pub split: DataSplit,
    pub features: FeatureSplit,
}

impl PreparedData {
    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::from(&self.features)
    }

    pub fn input_dim(&self) -> usize {
        self.header.feature_dim()
    }
}

pub fn prepare_data(
    header: DataHeader,
    groups: &[QueryGroup],
    cfg: &ExperimentConfig,
) -> Result<PreparedData, TrainError> {
    let split = DataSplit::by_query_hash(groups, cfg.train.val_fraction, cfg.test_fraction);
    if split.train.is_empty() || split.test.is_empty() {
        return Err(TrainError::NoData(" after the train / test split".into()));
    }
    let features = split_features(&split.train, &header.country_idx(), cfg.split_threshold, cfg.split_metric)?;
    Ok(PreparedData {
        header,
        split,
        features,
    })
}

fn generated(gen: &GeneratorConfig, cfg: &ExperimentConfig) -> Result<PreparedData, TrainError> {
    let groups = generate(gen)?;
    prepare_data(gen.header(), &groups, cfg)
}

pub struct ArmResult {
    pub name: String,
    pub seed: u64,
    pub model: Box<dyn RankingModel<f64>>,
    pub report: TrainReport,
}

fn train_cfg(cfg: &ExperimentConfig, seed: u64, region: Option<u32>) -> TrainConfig {
    TrainConfig {
        seed,
        region,
        ..cfg.train.clone()
    }
}

/// Builds `spec` from `seed` and trains it on `data`.
pub fn train_arm(
    name: &str,
    spec: &ModelSpec,
    data: &PreparedData,
    cfg: &ExperimentConfig,
    seed: u64,
    region: Option<u32>,
) -> Result<ArmResult, TrainError> {
    let layout = data.layout();
    let config = spec.resolve(&cfg.models, data.input_dim(), Some(&layout))?;
    let mut model = build_model::<f64>(&config, seed)?;
    let report = train(model.as_mut(), &data.split.train, &data.split.val, &train_cfg(cfg, seed, region))?;
    log::info!(
        "{name} seed {seed}: best epoch {} val purchase ndcg {:?}",
        report.best_epoch,
        report.best_val_ndcg
    );
    Ok(ArmResult {
        name: name.to_string(),
        seed,
        model,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub arm: String,
    pub seed: u64,
    pub task: Task,
    pub slice: String,
    pub ndcg: f64,
    pub delta_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomesticExperimentRow {
    pub arm: String,
    pub seed: u64,
    pub slice: String,
    pub share: f64,
    pub delta_pp: Option<f64>,
}

/// One summary table: `arms` x tasks on a single slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub title: String,
    pub slice: String,
    pub arms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub reference: String,
    pub rows: Vec<ExperimentRow>,
    pub domestic: Vec<DomesticExperimentRow>,
    pub panels: Vec<Panel>,
    pub notes: Vec<String>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

impl ExperimentReport {
    /// One CSV row per arm x seed x task x slice.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("experiment,arm,seed,task,slice,ndcg,delta_pct\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{}",
                self.name,
                r.arm,
                r.seed,
                r.task,
                r.slice,
                r.ndcg,
                r.delta_pct.map_or_else(String::new, |d| format!("{d:.6}"))
            );
        }
        s
    }

    pub fn domestic_csv(&self) -> String {
        let mut s = String::from("experiment,arm,seed,slice,share,delta_pp\n");
        for r in &self.domestic {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{}",
                self.name,
                r.arm,
                r.seed,
                r.slice,
                r.share,
                r.delta_pp.map_or_else(String::new, |d| format!("{d:.6}"))
            );
        }
        s
    }

    /// Per-seed values of `arm` on `task` / `slice`, in seed order.
    pub fn values(&self, arm: &str, task: Task, slice: &str) -> Vec<(u64, f64, Option<f64>)> {
        self.rows
            .iter()
            .filter(|r| r.arm == arm && r.task == task && r.slice == slice)
            .map(|r| (r.seed, r.ndcg, r.delta_pct))
            .collect()
    }

    pub fn mean_delta(&self, arm: &str, task: Task, slice: &str) -> Option<f64> {
        let d: Vec<f64> = self.values(arm, task, slice).iter().filter_map(|v| v.2).collect();
        (!d.is_empty()).then(|| mean_sd(&d).0)
    }

    /// Mean ± sample stdev over seeds, one table per panel.
    pub fn summary_table(&self) -> String {
        let mut out = format!("# {} (deltas vs {}; mean ± stdev over seeds)\n", self.name, self.reference);
        for p in &self.panels {
            let tasks: Vec<Task> = Task::FUNNEL
                .into_iter()
                .filter(|t| self.rows.iter().any(|r| r.task == *t && r.slice == p.slice))
                .collect();
            let mut rows = vec![std::iter::once(format!("{} [{}]", p.title, p.slice))
                .chain(tasks.iter().flat_map(|t| [format!("{t} ndcg"), format!("{t} delta%")]))
                .collect::<Vec<_>>()];
            for arm in &p.arms {
                let mut row = vec![arm.clone()];
                for &t in &tasks {
                    let v = self.values(arm, t, &p.slice);
                    if v.is_empty() {
                        row.push("-".into());
                        row.push("-".into());
                        continue;
                    }
                    let (m, s) = mean_sd(&v.iter().map(|x| x.1).collect::<Vec<_>>());
                    row.push(format!("{m:.4} ± {s:.4}"));
                    let d: Vec<f64> = v.iter().filter_map(|x| x.2).collect();
                    row.push(if d.is_empty() {
                        "n/a".into()
                    } else {
                        let (m, s) = mean_sd(&d);
                        format!("{m:+.3} ± {s:.3}")
                    });
                }
                rows.push(row);
            }
            out.push('\n');
            out.push_str(&crate::evaluation::align_table(&rows));
        }
        if !self.domestic.is_empty() {
            let mut by: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
            for r in &self.domestic {
                by.entry((r.arm.clone(), r.slice.clone())).or_default().push(r.share);
            }
            let mut rows = vec![vec!["domestic share".to_string(), "slice".into(), "mean ± stdev".into()]];
            let arms: Vec<&String> = self
                .panels
                .iter()
                .flat_map(|p| &p.arms)
                .fold(Vec::new(), |mut acc, a| {
                    if !acc.contains(&a) {
                        acc.push(a);
                    }
                    acc
                });
            for arm in arms {
                for ((a, slice), v) in by.iter().filter(|((a, _), _)| a == arm) {
                    let (m, s) = mean_sd(v);
                    rows.push(vec![a.clone(), slice.clone(), format!("{m:.4} ± {s:.4}")]);
                }
            }
            out.push('\n');
            out.push_str(&crate::evaluation::align_table(&rows));
        }
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        out
    }
}

/// Evaluates one seed's arms on the test groups and appends their rows.
fn collect_rows(
    report: &mut ExperimentReport,
    arms: &[ArmResult],
    test: &[QueryGroup],
    eval: &EvalOptions,
) -> Result<(), TrainError> {
    let models: Vec<(String, &dyn RankingModel<f64>)> =
        arms.iter().map(|a| (a.name.clone(), a.model.as_ref())).collect();
    let (ndcg, dom) = evaluate_models(&models, test, eval)?;
    let seed = arms.first().map_or(0, |a| a.seed);
    report.reference = ndcg.reference.clone();
    report.rows.extend(ndcg.rows.into_iter().map(|r| ExperimentRow {
        arm: r.model,
        seed,
        task: r.task,
        slice: r.slice,
        ndcg: r.mean_ndcg,
        delta_pct: r.delta_pct,
    }));
    report.domestic.extend(dom.rows.into_iter().map(|r| DomesticExperimentRow {
        arm: r.model,
        seed,
        slice: r.slice,
        share: r.share,
        delta_pp: r.delta_pp,
    }));
    Ok(())
}

/// Trains every `(name, spec, region)` arm for every seed in parallel and
/// returns them grouped by seed, arms in the given order.
fn train_all(
    arms: &[(String, ModelSpec, Option<u32>)],
    data: &PreparedData,
    cfg: &ExperimentConfig,
) -> Result<Vec<Vec<ArmResult>>, TrainError> {
    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..arms.len()).map(move |a| (s, a)))
        .collect();
    let mut results: Vec<ArmResult> = jobs
        .par_iter()
        .map(|&(seed, a)| {
            let (name, spec, region) = &arms[a];
            train_arm(name, spec, data, cfg, seed, *region)
        })
        .collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    while !results.is_empty() {
        let rest = results.split_off(arms.len().min(results.len()));
        out.push(results);
        results = rest;
    }
    Ok(out)
}

fn new_report(kind: ExperimentKind) -> ExperimentReport {
    ExperimentReport {
        name: kind.as_str().into(),
        reference: String::new(),
        rows: Vec::new(),
        domestic: Vec::new(),
        panels: Vec::new(),
        notes: vec!["test groups are a query-hash holdout standing in for a later time window".into()],
    }
}

fn sb(tasks: &[Task]) -> (String, ModelSpec, Option<u32>) {
    let s = ModelSpec::new(Architecture::SharedBottom, None, tasks.to_vec());
    (s.label(), s, None)
}

fn seq_md(tasks: &[Task]) -> ModelSpec {
    ModelSpec::new(Architecture::Seq, Some(MdPlacement::InSequence), tasks.to_vec())
}

/// Builds a three-task model from a two-task SEQ checkpoint and returns it
/// untouched (zero-shot) and fine-tuned on `data`.
pub fn run_transfer_experiment(
    two_task_ckpt: &Path,
    data: &PreparedData,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(ArmResult, ArmResult), TrainError> {
    let header = read_checkpoint_header(two_task_ckpt)?;
    if !header.architecture.is_seq() {
        return Err(ModelError::Checkpoint(format!(
            "transfer needs a seq checkpoint, found {}",
            header.architecture.label()
        ))
        .into());
    }
    let target = header.architecture.with_tasks(Task::FUNNEL.to_vec());
    let zero_shot = checkpoint_load::<f64>(two_task_ckpt, &target, seed)?;
    let mut tuned = zero_shot.clone();
    let report = train(tuned.as_mut(), &data.split.train, &data.split.val, &train_cfg(cfg, seed, None))?;
    let zero_report = TrainReport {
        model: "zero_shot".into(),
        tasks: Task::FUNNEL.to_vec(),
        seed,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_ndcg: None,
        stopped_early: false,
        train_records: 0,
        val_records: 0,
        checkpoint: Some(two_task_ckpt.to_path_buf()),
        params: crate::models::count_params(zero_shot.as_ref()),
        wall_clock_secs: 0.0,
    };
    Ok((
        ArmResult {
            name: "zero_shot".into(),
            seed,
            model: zero_shot,
            report: zero_report,
        },
        ArmResult {
            name: "fine_tuned".into(),
            seed,
            model: tuned,
            report,
        },
    ))
}

/// Runs a named experiment over `cfg.seeds`. Checkpoints go to `work_dir`.
pub fn run_experiment(
    kind: ExperimentKind,
    cfg: &ExperimentConfig,
    work_dir: &Path,
) -> Result<ExperimentReport, TrainError> {
    let data = generated(&cfg.generator, cfg)?;
    let mut report = new_report(kind);
    match kind {
        ExperimentKind::RegularizerAblation => {
            let tasks = cfg.task_list(cfg.tasks)?;
            let on = seq_md(&tasks);
            let off = on.clone().without_regularizer();
            let arms = vec![sb(&tasks), (on.label(), on, None), (off.label(), off, None)];
            for seed_arms in train_all(&arms, &data, cfg)? {
                collect_rows(&mut report, &seed_arms, &data.split.test, &cfg.eval)?;
            }
            report.panels.push(Panel {
                title: "descending regularizer".into(),
                slice: "all".into(),
                arms: arms.iter().map(|a| a.0.clone()).collect(),
            });
        }
        ExperimentKind::MdPlugplay => {
            let tasks = cfg.task_list(cfg.tasks)?;
            let mut arms = Vec::new();
            for arch in Architecture::ALL.into_iter().filter(|a| *a != Architecture::Seq) {
                for md in [None, Some(MdPlacement::InputPlug)] {
                    let s = ModelSpec::new(arch, md, tasks.clone());
                    arms.push((s.label(), s, None));
                }
            }
            for seed_arms in train_all(&arms, &data, cfg)? {
                collect_rows(&mut report, &seed_arms, &data.split.test, &cfg.eval)?;
            }
            for slice in ["all", "web", "app"] {
                report.panels.push(Panel {
                    title: "baselines ± md".into(),
                    slice: slice.into(),
                    arms: arms.iter().map(|a| a.0.clone()).collect(),
                });
            }
        }
        ExperimentKind::SingleVsAllRegion => {
            let tasks = cfg.task_list(cfg.tasks)?;
            let all = seq_md(&tasks);
            let mut arms = vec![sb(&tasks), ("seq+md-all".to_string(), all.clone(), None)];
            let regions = cfg.generator.regions as u32;
            for r in 0..regions {
                arms.push((format!("seq+md-region{r}"), all.clone(), Some(r)));
            }
            for seed_arms in train_all(&arms, &data, cfg)? {
                collect_rows(&mut report, &seed_arms, &data.split.test, &cfg.eval)?;
            }
            for r in 0..regions {
                report.panels.push(Panel {
                    title: format!("region {r}"),
                    slice: format!("region{r}"),
                    arms: vec![arms[0].0.clone(), "seq+md-all".into(), format!("seq+md-region{r}")],
                });
            }
            report
                .notes
                .push("seq+md-regionN trains on region N only; it is scored on every slice but compared on its own".into());
        }
        ExperimentKind::Transfer2to3 => {
            std::fs::create_dir_all(work_dir)?;
            let two = Task::standard(2).expect("two tasks");
            let three = Task::FUNNEL.to_vec();
            let sources = train_all(&[("seq+md-2task".into(), seq_md(&two), None)], &data, cfg)?;
            let per_seed: Vec<Vec<ArmResult>> = sources
                .into_par_iter()
                .map(|mut src| {
                    let src = src.remove(0);
                    let path = work_dir.join(format!("transfer_source_seed{}.ckpt", src.seed));
                    checkpoint_save(src.model.as_ref(), &path)?;
                    let (zero, tuned) = run_transfer_experiment(&path, &data, cfg, src.seed)?;
                    let reference = train_arm(&sb(&three).0, &sb(&three).1, &data, cfg, src.seed, None)?;
                    Ok(vec![reference, src, zero, tuned])
                })
                .collect::<Result<_, TrainError>>()?;
            for arms in &per_seed {
                collect_rows(&mut report, arms, &data.split.test, &cfg.eval)?;
            }
            report.panels.push(Panel {
                title: "two-task weights on three tasks".into(),
                slice: "all".into(),
                arms: vec![
                    "shared_bottom".into(),
                    "seq+md-2task".into(),
                    "zero_shot".into(),
                    "fine_tuned".into(),
                ],
            });
            report
                .notes
                .push("zero_shot = three-task model loaded from the two-task checkpoint; only the add_to_cart token and mask start fresh".into());
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSeed {
    pub seed: u64,
    pub shared_bottom: f64,
    pub seq: f64,
    pub seq_md: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub seeds: Vec<BenchmarkSeed>,
    /// Mean over seeds of the per-seed relative purchase-NDCG change, in %.
    pub seq_md_delta_pct: f64,
    pub seq_delta_pct: f64,
    pub mean_seq_md: f64,
    pub mean_seq: f64,
}

/// Shared-Bottom, SEQ and SEQ+MD on purchase NDCG. Each seed draws its own
/// world (`generator.seed = seed`) and initializes every arm from it.
pub fn directional_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkResult, TrainError> {
    let tasks = cfg.task_list(cfg.tasks)?;
    let arms = [
        ModelSpec::new(Architecture::SharedBottom, None, tasks.clone()),
        ModelSpec::new(Architecture::Seq, None, tasks.clone()),
        seq_md(&tasks),
    ];
    let seeds: Vec<BenchmarkSeed> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let gen = GeneratorConfig {
                seed,
                ..cfg.generator.clone()
            };
            let data = generated(&gen, cfg)?;
            let trained: Vec<ArmResult> = arms
                .par_iter()
                .map(|s| train_arm(&s.label(), s, &data, cfg, seed, None))
                .collect::<Result<_, _>>()?;
            let models: Vec<(String, &dyn RankingModel<f64>)> =
                trained.iter().map(|a| (a.name.clone(), a.model.as_ref())).collect();
            let (ndcg, _) = evaluate_models(&models, &data.split.test, &cfg.eval)?;
            let get = |name: &str| ndcg.row(name, Task::Purchase, "all").map_or(0.0, |r| r.mean_ndcg);
            Ok(BenchmarkSeed {
                seed,
                shared_bottom: get(&arms[0].label()),
                seq: get(&arms[1].label()),
                seq_md: get(&arms[2].label()),
            })
        })
        .collect::<Result<_, TrainError>>()?;
    let n = seeds.len().max(1) as f64;
    let mean = |f: &dyn Fn(&BenchmarkSeed) -> f64| seeds.iter().map(f).sum::<f64>() / n;
    Ok(BenchmarkResult {
        seq_md_delta_pct: mean(&|s| (s.seq_md - s.shared_bottom) / s.shared_bottom * 100.0),
        seq_delta_pct: mean(&|s| (s.seq - s.shared_bottom) / s.shared_bottom * 100.0),
        mean_seq_md: mean(&|s| s.seq_md),
        mean_seq: mean(&|s| s.seq),
        seeds,
    })
}
