use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;

use seqmd::datasets::{
    generate, read_jsonl, split_features, write_jsonl, DataHeader, DataSplit, DistanceMetric, FeatureSplit,
    QueryGroup, Task,
};
use seqmd::evaluation::{align_table, evaluate_models, DomesticShareReport, GainScheme, NdcgReport};
use seqmd::models::{
    build_model, checkpoint_load, checkpoint_save, count_params, read_checkpoint_header, Architecture,
    FeatureLayout, MdPlacement, ModelSpec, RankingModel,
};
use seqmd::training::{prepare_data, run_experiment, train_arm, ArmResult, ExperimentKind, PreparedData};

use crate::config::{self, Loaded, RunConfig, RunManifest, MANIFEST_FILE};
use crate::{
    ArchArg, Cli, CliError, Command, CompareArgs, EvalArgs, ExperimentArg, ExperimentArgs, GenerateArgs, MdArg,
    MetricArg, ParamsArgs, SplitArgs, TrainArgs,
};

/// State shared by every command: resolved config, output directory and
/// the manifest being written.
struct Run {
    out: PathBuf,
    force: bool,
    config: RunConfig,
    manifest: RunManifest,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Refuses to clobber outputs, then writes the manifest before any work.
    fn begin(&mut self, artifacts: &[&str]) -> Result<(), CliError> {
        // a manifest alone is what a failed run leaves behind
        let paths: Vec<PathBuf> = artifacts.iter().map(|a| self.path(a)).collect();
        if !self.force {
            if let Some(p) = paths.iter().find(|p| p.exists()) {
                return Err(CliError::Usage(format!(
                    "{} already exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        self.manifest.artifacts = paths;
        self.manifest.write(&self.path(MANIFEST_FILE))
    }

    fn finish(&mut self) -> Result<(), CliError> {
        self.manifest.finished = Some(config::now());
        self.manifest.write(&self.path(MANIFEST_FILE))
    }

    fn write(&self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }
}

/// Resolves config, seed and (for replays) the recorded options, then
/// dispatches.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let name = cli.command.name();
    let (config, replay) = match &cli.config {
        None => (RunConfig::default(), None),
        Some(p) => match config::load(p)? {
            Loaded::Config(c) => (c, None),
            Loaded::Manifest(m) => {
                if m.command != name {
                    log::warn!("replaying the config of a '{}' manifest for '{name}'", m.command);
                }
                let replay = (m.command == name).then(|| (m.args.clone(), m.seed));
                (m.config, replay)
            }
        },
    };
    let seed = cli.seed.or(replay.as_ref().map(|r| r.1)).unwrap_or(config.seed);
    let config = config.with_seed(seed);
    let replayed = replay.as_ref().map(|r| &r.0);
    let mut run = Run {
        out: cli.out.clone(),
        force: cli.force,
        manifest: RunManifest::new(name, serde_json::Value::Null, config.clone(), Vec::new()),
        config,
    };
    match cli.command {
        Command::Generate(a) => cmd_generate(&mut run, resolve(a, replayed)?),
        Command::Split(a) => cmd_split(&mut run, resolve(a, replayed)?),
        Command::Train(a) => cmd_train(&mut run, resolve(a, replayed)?),
        Command::Eval(a) => cmd_eval(&mut run, resolve(a, replayed)?),
        Command::Compare(a) => cmd_compare(&mut run, resolve(a, replayed)?),
        Command::Experiment(a) => cmd_experiment(&mut run, resolve(a, replayed)?),
        Command::Params(a) => cmd_params(&mut run, resolve(a, replayed)?),
    }?;
    run.finish()
}

fn resolve<A: Serialize + DeserializeOwned>(args: A, replayed: Option<&serde_json::Value>) -> Result<A, CliError> {
    let given = serde_json::to_value(&args)?;
    match replayed {
        None => Ok(args),
        Some(old) => serde_json::from_value(config::merge_args(given, old))
            .map_err(|e| CliError::Usage(format!("manifest options do not fit this command: {e}"))),
    }
}

/// Validates the final config and records it with the options.
fn settle(run: &mut Run, args: &impl Serialize) -> Result<(), CliError> {
    run.config.validate()?;
    run.manifest.config = run.config.clone();
    run.manifest.args = serde_json::to_value(args)?;
    Ok(())
}

fn load_groups(data: Option<&Path>, cfg: &RunConfig) -> Result<(DataHeader, Vec<QueryGroup>), CliError> {
    match data {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Usage(format!("data file {} does not exist", p.display())));
            }
            Ok(read_jsonl(p).with_context(|| format!("reading {}", p.display()))?)
        }
        None => {
            log::info!("no --data given; generating {} queries from the config", cfg.generator.n_queries);
            Ok((cfg.generator.header(), generate(&cfg.generator)?))
        }
    }
}

fn prepared(data: Option<&Path>, cfg: &RunConfig) -> Result<PreparedData, CliError> {
    let (header, groups) = load_groups(data, cfg)?;
    Ok(prepare_data(header, &groups, &cfg.experiment())?)
}

fn cmd_generate(run: &mut Run, a: GenerateArgs) -> Result<(), CliError> {
    if let Some(q) = a.queries {
        run.config.generator.n_queries = q;
    }
    if let Some(c) = a.candidates {
        run.config.generator.candidates_per_query = c;
    }
    settle(run, &a)?;
    run.begin(&["data.jsonl"])?;
    let groups = generate(&run.config.generator)?;
    let path = run.path("data.jsonl");
    write_jsonl(&path, &run.config.generator.header(), &groups)?;
    println!(
        "wrote {} query groups ({} records) to {}",
        groups.len(),
        groups.iter().map(QueryGroup::len).sum::<usize>(),
        path.display()
    );
    Ok(())
}

fn cmd_split(run: &mut Run, a: SplitArgs) -> Result<(), CliError> {
    if let Some(t) = a.threshold {
        run.config.split_threshold = t;
    }
    if let Some(m) = a.metric {
        run.config.split_metric = match m {
            MetricArg::Ks => DistanceMetric::Ks,
            MetricArg::Wasserstein => DistanceMetric::Wasserstein,
        };
    }
    settle(run, &a)?;
    run.begin(&["feature_split.json"])?;
    let (header, groups) = load_groups(a.data.as_deref(), &run.config)?;
    let split = DataSplit::by_query_hash(&groups, run.config.train.val_fraction, run.config.test_fraction);
    let fs = split_features(
        &split.train,
        &header.country_idx(),
        run.config.split_threshold,
        run.config.split_metric,
    )?;
    run.write_json("feature_split.json", &fs)?;
    println!(
        "country {:?}\ndependent {:?}\ninvariant {:?}",
        fs.country_idx, fs.dependent_idx, fs.invariant_idx
    );
    Ok(())
}

fn arch(a: ArchArg) -> Architecture {
    match a {
        ArchArg::Seq => Architecture::Seq,
        ArchArg::SharedBottom => Architecture::SharedBottom,
        ArchArg::Mlmmoe => Architecture::Mlmmoe,
        ArchArg::Ple => Architecture::Ple,
        ArchArg::AdattSp => Architecture::AdattSp,
    }
}

fn placement(m: Option<MdArg>) -> Option<MdPlacement> {
    match m {
        None | Some(MdArg::None) => None,
        Some(MdArg::InputPlug) => Some(MdPlacement::InputPlug),
        Some(MdArg::InSequence) => Some(MdPlacement::InSequence),
    }
}

fn tasks(k: usize) -> Result<Vec<Task>, CliError> {
    Task::standard(k).ok_or_else(|| CliError::Usage(format!("task count must be 2 or 3, got {k}")))
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn cmd_train(run: &mut Run, a: TrainArgs) -> Result<(), CliError> {
    let Some(model) = a.model else {
        return Err(CliError::Usage(format!(
            "train needs --model, one of {}",
            Architecture::names()
        )));
    };
    if let Some(k) = a.tasks {
        run.config.tasks = k;
    }
    if let Some(e) = a.epochs {
        run.config.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        run.config.train.learning_rate = lr;
    }
    settle(run, &a)?;
    let mut spec = ModelSpec::new(arch(model), placement(a.md), tasks(run.config.tasks)?);
    if a.no_regularizer {
        if spec.arch != Architecture::Seq {
            return Err(CliError::Usage("--no-regularizer applies to seq only".into()));
        }
        spec = spec.without_regularizer();
    }
    // catch placement errors before any work
    spec.resolve(&run.config.models, 2, Some(&dummy_layout())).map_err(usage)?;
    run.begin(&["model.ckpt", "train_report.json"])?;

    let mut data = prepared(a.data.as_deref(), &run.config)?;
    if let Some(p) = &a.split {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        data.features = serde_json::from_str::<FeatureSplit>(&text)?;
    }
    let cfg = run.config.experiment();
    let arm = train_arm(&spec.label(), &spec, &data, &cfg, run.config.seed, a.region)?;
    let ckpt = run.path("model.ckpt");
    checkpoint_save(arm.model.as_ref(), &ckpt)?;
    let mut report = arm.report;
    report.checkpoint = Some(ckpt.clone());
    run.write_json("train_report.json", &report)?;
    println!(
        "{}: {} epochs, best epoch {} (val purchase ndcg {}), {} params -> {}",
        report.model,
        report.epochs.len(),
        report.best_epoch,
        report.best_val_ndcg.map_or("n/a".into(), |v| format!("{v:.4}")),
        report.params.total,
        ckpt.display()
    );
    Ok(())
}

fn dummy_layout() -> FeatureLayout {
    FeatureLayout {
        country_idx: vec![0],
        dependent_idx: vec![1],
        invariant_idx: vec![],
    }
}

fn write_reports(run: &Run, ndcg: &NdcgReport, dom: &DomesticShareReport) -> Result<(), CliError> {
    run.write("ndcg.csv", &ndcg.to_csv())?;
    run.write("ndcg.txt", &ndcg.to_table())?;
    run.write("domestic.csv", &dom.to_csv())?;
    run.write("domestic.txt", &dom.to_table())?;
    print!("{}\n{}", ndcg.to_table(), dom.to_table());
    Ok(())
}

const REPORTS: [&str; 4] = ["ndcg.csv", "ndcg.txt", "domestic.csv", "domestic.txt"];

fn unique_names(models: &[Box<dyn RankingModel<f64>>]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for m in models {
        let base = m.config().label();
        let mut name = base.clone();
        let mut i = 2;
        while out.contains(&name) {
            name = format!("{base}#{i}");
            i += 1;
        }
        out.push(name);
    }
    out
}

fn cmd_eval(run: &mut Run, a: EvalArgs) -> Result<(), CliError> {
    if a.checkpoints.is_empty() {
        return Err(CliError::Usage("eval needs at least one --checkpoint".into()));
    }
    if let Some(d) = a.depth {
        run.config.eval.depth = d;
    }
    if a.graded {
        run.config.eval.gains = GainScheme::Graded;
    }
    settle(run, &a)?;
    let mut headers = Vec::new();
    for p in &a.checkpoints {
        if !p.exists() {
            return Err(CliError::Usage(format!("checkpoint {} does not exist", p.display())));
        }
        headers.push(read_checkpoint_header(p).with_context(|| format!("reading {}", p.display()))?);
    }
    if !headers.iter().any(|h| h.architecture.is_reference()) {
        return Err(CliError::Usage(
            "eval needs a shared_bottom checkpoint; deltas are reported against it".into(),
        ));
    }
    run.begin(&REPORTS)?;
    let mut models = Vec::new();
    for (p, header) in a.checkpoints.iter().zip(&headers) {
        models.push(
            checkpoint_load::<f64>(p, &header.architecture, header.seed)
                .with_context(|| format!("loading {}", p.display()))?,
        );
    }
    let (_, groups) = load_groups(a.data.as_deref(), &run.config)?;
    let split = DataSplit::by_query_hash(&groups, run.config.train.val_fraction, run.config.test_fraction);
    let names = unique_names(&models);
    let named: Vec<(String, &dyn RankingModel<f64>)> =
        names.into_iter().zip(models.iter().map(|m| m.as_ref())).collect();
    let (ndcg, dom) = evaluate_models(&named, &split.test, &run.config.eval)?;
    write_reports(run, &ndcg, &dom)
}

fn training_csv(arms: &[ArmResult]) -> String {
    let mut s = String::from("model,epoch,task,train_loss,val_loss,val_purchase_ndcg\n");
    for a in arms {
        for e in &a.report.epochs {
            for (t, task) in a.report.tasks.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{:.6},{:.6},{}",
                    a.name,
                    e.epoch,
                    task,
                    e.train_loss[t],
                    e.val_loss.get(t).copied().unwrap_or(f64::NAN),
                    e.val_ndcg.map_or(String::new(), |v| format!("{v:.6}"))
                );
            }
        }
    }
    s
}

fn cmd_compare(run: &mut Run, a: CompareArgs) -> Result<(), CliError> {
    if !a.models.is_empty() {
        run.config.compare_models = a.models.clone();
    }
    if let Some(k) = a.tasks {
        run.config.tasks = k;
    }
    if let Some(d) = a.depth {
        run.config.eval.depth = d;
    }
    settle(run, &a)?;
    let tasks = tasks(run.config.tasks)?;
    let specs: Vec<ModelSpec> = run
        .config
        .compare_models
        .iter()
        .map(|l| ModelSpec::parse(l.trim(), tasks.clone()).map_err(usage))
        .collect::<Result<_, _>>()?;
    if specs.is_empty() {
        return Err(CliError::Usage("compare needs at least one model".into()));
    }
    if !specs.iter().any(|s| s.arch == Architecture::SharedBottom && s.md.is_none()) {
        return Err(CliError::Usage(
            "compare needs shared_bottom in the model list; deltas are reported against it".into(),
        ));
    }
    for s in &specs {
        s.resolve(&run.config.models, 2, Some(&dummy_layout())).map_err(usage)?;
    }
    let mut artifacts = REPORTS.to_vec();
    artifacts.push("training.csv");
    run.begin(&artifacts)?;

    let data = prepared(a.data.as_deref(), &run.config)?;
    let cfg = run.config.experiment();
    let mut arms = Vec::new();
    for s in &specs {
        arms.push(train_arm(&s.label(), s, &data, &cfg, run.config.seed, None)?);
    }
    let named: Vec<(String, &dyn RankingModel<f64>)> =
        arms.iter().map(|a| (a.name.clone(), a.model.as_ref())).collect();
    let (ndcg, dom) = evaluate_models(&named, &data.split.test, &run.config.eval)?;
    run.write("training.csv", &training_csv(&arms))?;
    write_reports(run, &ndcg, &dom)
}

fn cmd_experiment(run: &mut Run, a: ExperimentArgs) -> Result<(), CliError> {
    let Some(name) = a.name else {
        return Err(CliError::Usage(format!(
            "experiment needs a name, one of {}",
            ExperimentKind::names()
        )));
    };
    let kind = match name {
        ExperimentArg::RegularizerAblation => ExperimentKind::RegularizerAblation,
        ExperimentArg::Transfer2to3 => ExperimentKind::Transfer2to3,
        ExperimentArg::SingleVsAllRegion => ExperimentKind::SingleVsAllRegion,
        ExperimentArg::MdPlugplay => ExperimentKind::MdPlugplay,
    };
    if !a.seeds.is_empty() {
        run.config.seeds = a.seeds.clone();
    }
    if run.config.seeds.is_empty() {
        return Err(CliError::Usage("experiment needs at least one seed".into()));
    }
    settle(run, &a)?;
    let n = kind.as_str();
    let files = [format!("{n}.csv"), format!("{n}_domestic.csv"), format!("{n}.txt")];
    run.begin(&files.iter().map(String::as_str).collect::<Vec<_>>())?;
    let report = run_experiment(kind, &run.config.experiment(), &run.path("work"))?;
    run.write(&files[0], &report.to_csv())?;
    run.write(&files[1], &report.domestic_csv())?;
    let summary = report.summary_table();
    run.write(&files[2], &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_params(run: &mut Run, a: ParamsArgs) -> Result<(), CliError> {
    let archs: Vec<Architecture> = match a.model.as_deref() {
        None | Some("all") => Architecture::ALL.to_vec(),
        Some(m) => vec![Architecture::parse(m).ok_or_else(|| {
            CliError::Usage(format!("unknown model '{m}'; expected all or one of {}", Architecture::names()))
        })?],
    };
    let counts = if a.tasks.is_empty() { vec![2, 3] } else { a.tasks.clone() };
    settle(run, &a)?;
    let g = &run.config.generator;
    let header = g.header();
    let country = header.country_idx();
    let layout = FeatureLayout {
        invariant_idx: (0..g.feature_dim())
            .filter(|i| !country.contains(i) && !g.dependent_features.contains(i))
            .collect(),
        country_idx: country,
        dependent_idx: g.dependent_features.clone(),
    };
    let mut rows = vec![std::iter::once("model".to_string())
        .chain(counts.iter().map(|k| format!("k={k}")))
        .chain(counts.len().gt(&1).then(|| "growth".to_string()))
        .collect::<Vec<_>>()];
    let mut csv = String::from("model,tasks,params\n");
    for arch in archs {
        let md = match placement(a.md) {
            Some(MdPlacement::InSequence) if arch != Architecture::Seq => Some(MdPlacement::InputPlug),
            p => p,
        };
        let mut row = Vec::new();
        let mut totals = Vec::new();
        for &k in &counts {
            let spec = ModelSpec::new(arch, md, tasks(k)?);
            let cfg = spec
                .resolve(&run.config.models, g.feature_dim(), Some(&layout))
                .map_err(usage)?;
            let n = count_params(build_model::<f64>(&cfg, run.config.seed)?.as_ref()).total;
            if row.is_empty() {
                row.push(spec.label());
            }
            row.push(n.to_string());
            totals.push(n);
            let _ = writeln!(csv, "{},{k},{n}", spec.label());
        }
        if totals.len() > 1 {
            let (first, last) = (totals[0] as f64, *totals.last().unwrap() as f64);
            row.push(format!("{:+.2}%", (last - first) / first * 100.0));
        }
        rows.push(row);
    }
    run.begin(&["params.csv"])?;
    run.write("params.csv", &csv)?;
    print!("{}", align_table(&rows));
    Ok(())
}
