//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints its own PASS / FAIL line; exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqmd::datasets::{
    generate, split_features, DistanceMetric, FunnelLabels, GeneratorConfig, InteractionRecord, Platform,
    QueryGroup, Task,
};
use seqmd::evaluation::{ndcg_for_task, ndcg_oracle};
use seqmd::models::{
    build_model, checkpoint_load, checkpoint_save, count_params, predict, Architecture, BaselineConfig,
    FeatureLayout, MdConfig, MdPlacement, ModelDefaults, ModelSpec, SeqModelConfig,
};
use seqmd::tensorcore::{grad_check, Parameterized, DEFAULT_STEP};
use seqmd::training::{directional_benchmark, multitask_loss, ExperimentConfig, TrainError};
use seqmd::{DynModel, Tensor};

type Outcome = Result<String, String>;

const SMALL_D: usize = 8;

fn small_layout() -> FeatureLayout {
    FeatureLayout {
        country_idx: vec![6, 7],
        dependent_idx: vec![0, 1, 2],
        invariant_idx: vec![3, 4, 5],
    }
}

fn small_defaults() -> ModelDefaults {
    ModelDefaults {
        seq: SeqModelConfig {
            hidden: 8,
            ..Default::default()
        },
        baseline: BaselineConfig {
            expert_widths: vec![8, 4],
            tower_hidden: vec![8],
            ..Default::default()
        },
        md: MdConfig {
            transformed_dim: 4,
            ..Default::default()
        },
    }
}

fn default_layout() -> FeatureLayout {
    FeatureLayout {
        country_idx: (6..10).collect(),
        dependent_idx: (0..5).collect(),
        invariant_idx: (5..6).chain(10..20).collect(),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Tensor {
    let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(n, d, x).unwrap()
}

fn funnel_targets(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    let mut y = vec![Vec::with_capacity(n); k];
    for _ in 0..n {
        let depth = rng.gen_range(0..=k);
        for (t, col) in y.iter_mut().enumerate() {
            col.push(if t < depth { 1.0 } else { 0.0 });
        }
    }
    y
}

// biases start at zero, right on the ReLU kink
fn jitter(model: &mut DynModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.visit_params_mut(&mut |p| {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    });
}

/// Worst relative error of the full-batch loss gradient at a fixed,
/// jittered check point.
fn gradcheck_worst(spec: &ModelSpec) -> Result<f64, String> {
    let k = spec.tasks.len();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_matrix(&mut rng, 16, SMALL_D, 1.0);
    let y = funnel_targets(&mut rng, 16, k);
    let weights = vec![1.0; k];
    let cfg = spec
        .resolve(&small_defaults(), SMALL_D, Some(&small_layout()))
        .map_err(|e| e.to_string())?;
    let mut model: DynModel = build_model(&cfg, 3).map_err(|e| e.to_string())?;
    jitter(&mut model, 5);
    let report = grad_check(
        &mut model,
        |m: &DynModel, g| -> Result<_, TrainError> {
            let xi = g.constant(x.clone())?;
            let heads = m.forward(g, xi)?;
            Ok(multitask_loss(g, &heads, &y, &weights)?.0)
        },
        DEFAULT_STEP,
    )
    .map_err(|e| e.to_string())?;
    if report.entries.is_empty() {
        return Err(format!("{}: no parameters checked", spec.label()));
    }
    Ok(report.max_rel_err())
}

fn c1_gradcheck() -> Outcome {
    let start = Instant::now();
    let tasks = Task::FUNNEL.to_vec();
    let specs = [
        ModelSpec::new(Architecture::SharedBottom, None, tasks.clone()),
        ModelSpec::new(Architecture::Mlmmoe, None, tasks.clone()),
        ModelSpec::new(Architecture::Ple, None, tasks.clone()),
        ModelSpec::new(Architecture::AdattSp, None, tasks.clone()),
        ModelSpec::new(Architecture::Seq, None, tasks.clone()),
        ModelSpec::new(Architecture::Seq, Some(MdPlacement::InSequence), tasks),
    ];
    let mut worst = 0.0f64;
    for spec in &specs {
        let e = gradcheck_worst(spec)?;
        if !(e < 1e-4) {
            return Err(format!("{} max rel err {e:.3e}", spec.label()));
        }
        worst = worst.max(e);
    }
    let took = start.elapsed();
    if took > Duration::from_secs(120) {
        return Err(format!("took {took:.1?}"));
    }
    Ok(format!("6 models, max rel err {worst:.2e}, {took:.1?}"))
}

fn c2_descending() -> Outcome {
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut configs = Vec::new();
    for k in [2, 3] {
        let tasks = Task::standard(k).unwrap();
        configs.push(ModelSpec::new(Architecture::Seq, None, tasks.clone()));
        configs.push(ModelSpec::new(Architecture::Seq, Some(MdPlacement::InSequence), tasks.clone()));
        configs.push(ModelSpec::new(Architecture::Seq, Some(MdPlacement::InputPlug), tasks));
    }
    let mut worst = 0.0f64;
    for (i, spec) in configs.iter().enumerate() {
        let cfg = spec
            .resolve(&ModelDefaults::default(), 20, Some(&default_layout()))
            .map_err(|e| e.to_string())?;
        let model: DynModel = build_model(&cfg, i as u64).map_err(|e| e.to_string())?;
        // wide inputs push logits into saturation
        let scale = [1.0, 10.0, 100.0][i % 3];
        let x = random_matrix(&mut rng, n, 20, scale);
        let rows = predict(model.as_ref(), &x).map_err(|e| e.to_string())?;
        for row in &rows {
            let mut cum = 1.0;
            for t in 0..spec.tasks.len() {
                cum *= 1.0 / (1.0 + (-row.logits[t]).exp());
                let err = (row.probs[t] - cum).abs();
                worst = worst.max(err);
                if err > 1e-12 {
                    return Err(format!("{}: prob {} vs product {cum}", spec.label(), row.probs[t]));
                }
                if t > 0 && row.probs[t] > row.probs[t - 1] {
                    return Err(format!("{}: probs increase: {:?}", spec.label(), row.probs));
                }
            }
        }
    }
    Ok(format!("{} configs x {n} inputs, max |p - product| {worst:.1e}", configs.len()))
}

fn group(labels: &[FunnelLabels]) -> QueryGroup {
    let records = labels
        .iter()
        .map(|&labels| InteractionRecord {
            query_id: "q".into(),
            region: 0,
            platform: Platform::Web,
            listing_region: 0,
            x_user: vec![0.0],
            x_listing: vec![0.0],
            labels,
        })
        .collect();
    QueryGroup::new("q", 0, Platform::Web, records).unwrap()
}

fn c3_ndcg_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut compared = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=6);
        let labels: Vec<FunnelLabels> = (0..n)
            .map(|_| {
                let c = rng.gen_bool(0.5);
                let a = c && rng.gen_bool(0.5);
                let p = a && rng.gen_bool(0.5);
                FunnelLabels::new(c, a, p).unwrap()
            })
            .collect();
        // half the groups get coarse scores so ties are common
        let coarse = rng.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    rng.gen_range(0..3) as f64
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            })
            .collect();
        let g = group(&labels);
        let depth = rng.gen_range(1..=8);
        for task in Task::FUNNEL {
            let fast = ndcg_for_task(&g, &scores, task, depth).map_err(|e| e.to_string())?;
            let slow = ndcg_oracle(&g, &scores, task, depth).map_err(|e| e.to_string())?;
            match (fast, slow) {
                (None, None) => {}
                (Some(a), Some(b)) if (a - b).abs() <= 1e-12 => compared += 1,
                other => return Err(format!("{task} depth {depth} scores {scores:?}: {other:?}")),
            }
        }
    }
    Ok(format!("1000 groups, {compared} defined task NDCGs agree"))
}

fn c4_split_recovery() -> Outcome {
    let planted: Vec<usize> = vec![0, 1, 2, 3, 4];
    let per_region = 1000;
    let candidates = 10;
    let mut hits = 0;
    let mut misses = Vec::new();
    for seed in 0..20u64 {
        let cfg = GeneratorConfig {
            seed,
            region_weights: vec![0.25; 4],
            shift_strength: vec![2.0; 4],
            dependent_features: planted.clone(),
            // equal supply keeps the domestic flag region-invariant
            domestic_supply: vec![0.5; 4],
            candidates_per_query: candidates,
            n_queries: 4 * per_region / candidates * 2,
            ..Default::default()
        };
        let groups = generate(&cfg).map_err(|e| e.to_string())?;
        let mut taken = vec![0usize; 4];
        let mut kept = Vec::new();
        for g in groups {
            let r = g.region as usize;
            if taken[r] < per_region {
                taken[r] += g.records.len();
                kept.push(g);
            }
        }
        if taken.iter().any(|&t| t != per_region) {
            return Err(format!("seed {seed}: per-region samples {taken:?}"));
        }
        let split = split_features(&kept, &cfg.country_idx(), 0.1, DistanceMetric::Ks).map_err(|e| e.to_string())?;
        if split.dependent_idx == planted {
            hits += 1;
        } else {
            misses.push((seed, split.dependent_idx));
        }
    }
    let line = format!("exact recovery in {hits}/20 seeds");
    if hits >= 19 {
        Ok(line)
    } else {
        Err(format!("{line}; misses {misses:?}"))
    }
}

fn c5_benchmark() -> Outcome {
    let start = Instant::now();
    let r = directional_benchmark(&ExperimentConfig::default()).map_err(|e| e.to_string())?;
    let line = format!(
        "SEQ+MD {:+.2}% vs Shared-Bottom (SEQ {:+.2}%), purchase NDCG {:.4} vs {:.4}, {:.0?}",
        r.seq_md_delta_pct,
        r.seq_delta_pct,
        r.mean_seq_md,
        r.mean_seq,
        start.elapsed()
    );
    if r.seq_md_delta_pct > 0.0 && r.mean_seq_md >= r.mean_seq {
        Ok(line)
    } else {
        Err(line)
    }
}

fn c6_growth() -> Outcome {
    let layout = default_layout();
    let count = |arch, md, k| -> Result<usize, String> {
        let cfg = ModelSpec::new(arch, md, Task::standard(k).unwrap())
            .resolve(&ModelDefaults::default(), 20, Some(&layout))
            .map_err(|e| e.to_string())?;
        let model: DynModel = build_model(&cfg, 0).map_err(|e| e.to_string())?;
        Ok(count_params(model.as_ref()).total)
    };
    let mut parts = Vec::new();
    let cases = [
        (Architecture::Seq, None, false),
        (Architecture::Seq, Some(MdPlacement::InSequence), false),
        (Architecture::SharedBottom, None, true),
        (Architecture::Mlmmoe, None, true),
        (Architecture::Ple, None, true),
        (Architecture::AdattSp, None, true),
    ];
    let mut failed = false;
    for (arch, md, heavy) in cases {
        let (two, three) = (count(arch, md, 2)?, count(arch, md, 3)?);
        let g = (three as f64 - two as f64) / two as f64 * 100.0;
        let ok = if heavy { g >= 25.0 } else { g < 10.0 };
        failed |= !ok;
        parts.push(format!("{arch}{} {two}->{three} ({g:+.1}%)", if md.is_some() { "+md" } else { "" }));
    }
    let line = parts.join(", ");
    if failed {
        Err(line)
    } else {
        Ok(line)
    }
}

fn c7_surgery() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("two.ckpt");
    let layout = default_layout();
    let defaults = ModelDefaults::default();
    let two = ModelSpec::new(Architecture::Seq, Some(MdPlacement::InSequence), Task::standard(2).unwrap())
        .resolve(&defaults, 20, Some(&layout))
        .map_err(|e| e.to_string())?;
    let three = ModelSpec::new(Architecture::Seq, Some(MdPlacement::InSequence), Task::standard(3).unwrap())
        .resolve(&defaults, 20, Some(&layout))
        .map_err(|e| e.to_string())?;
    let mut source: DynModel = build_model(&two, 4).map_err(|e| e.to_string())?;
    // trained-looking weights rather than the initializer's
    jitter(&mut source, 40);
    checkpoint_save(source.as_ref(), &path).map_err(|e| e.to_string())?;
    let target: DynModel = checkpoint_load(&path, &three, 5).map_err(|e| e.to_string())?;
    if target.tasks() != Task::FUNNEL.as_slice() {
        return Err(format!("loaded tasks {:?}", target.tasks()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_matrix(&mut rng, 1000, 20, 3.0);
    let a = predict(source.as_ref(), &x).map_err(|e| e.to_string())?;
    let b = predict(target.as_ref(), &x).map_err(|e| e.to_string())?;
    for (i, (ra, rb)) in a.iter().zip(&b).enumerate() {
        if ra.logits[0].to_bits() != rb.logits[0].to_bits() {
            return Err(format!("input {i}: click logit {} vs {}", ra.logits[0], rb.logits[0]));
        }
    }
    Ok("1000 inputs, click logits bit-identical after 2->3 load".into())
}

fn c8_plug_and_play() -> Outcome {
    let tasks = Task::FUNNEL.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_matrix(&mut rng, 5, SMALL_D, 1.0);
    let mut worst = 0.0f64;
    let mut n = 0;
    for arch in Architecture::ALL {
        let plain = ModelSpec::new(arch, None, tasks.clone());
        let wrapped = ModelSpec::new(arch, Some(MdPlacement::InputPlug), tasks.clone());
        let build = |spec: &ModelSpec| -> Result<DynModel, String> {
            let cfg = spec
                .resolve(&small_defaults(), SMALL_D, Some(&small_layout()))
                .map_err(|e| e.to_string())?;
            build_model(&cfg, 1).map_err(|e| e.to_string())
        };
        let (p, w) = (build(&plain)?, build(&wrapped)?);
        if p.input_dim() != w.input_dim() {
            return Err(format!("{arch}: input dim {} vs {}", p.input_dim(), w.input_dim()));
        }
        let (rp, rw) = (
            predict(p.as_ref(), &x).map_err(|e| e.to_string())?,
            predict(w.as_ref(), &x).map_err(|e| e.to_string())?,
        );
        let shape = |rows: &[seqmd::models::TaskScores]| {
            rows.iter().map(|r| (r.logits.len(), r.probs.len())).collect::<Vec<_>>()
        };
        if shape(&rp) != shape(&rw) {
            return Err(format!("{arch}: output shape changed under the adaptor"));
        }
        let e = gradcheck_worst(&wrapped)?;
        if !(e < 1e-4) {
            return Err(format!("{} max rel err {e:.3e}", wrapped.label()));
        }
        worst = worst.max(e);
        n += 1;
    }
    Ok(format!("{n} wrapped models keep shape, max rel err {worst:.2e}"))
}

fn run_compare(dir: &Path, config: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_seqmd"))
        .args(["compare", "--seed", "11", "--config"])
        .arg(config)
        .arg("--out")
        .arg(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("compare failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn c9_reproducible() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"generator": {"n_queries": 300, "candidates_per_query": 20}, "train": {"epochs": 2}}"#,
    )
    .map_err(|e| e.to_string())?;
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    run_compare(&a, &config)?;
    run_compare(&b, &config)?;
    // replaying the first run's manifest
    run_compare(&c, &a.join("manifest.json"))?;
    let files = ["ndcg.csv", "ndcg.txt", "domestic.csv", "domestic.txt", "training.csv"];
    for f in files {
        let first = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        for other in [&b, &c] {
            let again = std::fs::read(other.join(f)).map_err(|e| format!("{f}: {e}"))?;
            if first != again {
                return Err(format!("{f} differs between runs"));
            }
        }
    }
    Ok(format!("{} report files byte-identical over 2 runs and a manifest replay", files.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient check", c1_gradcheck),
        ("descending probabilities", c2_descending),
        ("ndcg vs brute force", c3_ndcg_oracle),
        ("feature split recovery", c4_split_recovery),
        ("directional benchmark", c5_benchmark),
        ("parameter growth", c6_growth),
        ("2->3 task surgery", c7_surgery),
        ("adaptor plug-and-play", c8_plug_and_play),
        ("reproducible compare", c9_reproducible),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(msg) => println!("criterion {}: PASS {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {msg}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
