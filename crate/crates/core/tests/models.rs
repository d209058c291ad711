use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqmd::datasets::Task;
use seqmd::models::{
    build_model, count_params, Architecture, BaselineConfig, FeatureLayout, MdConfig, MdPlacement, ModelDefaults,
    ModelSpec, SeqModelConfig,
};
use seqmd::tensorcore::{grad_check, Parameterized, DEFAULT_STEP};
use seqmd::Tensor;
use seqmd::training::{multitask_loss, TrainError};
use seqmd::DynModel;

const D: usize = 8;

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

fn all_specs(tasks: &[Task]) -> Vec<ModelSpec> {
    let mut out = Vec::new();
    for arch in Architecture::ALL {
        out.push(ModelSpec::new(arch, None, tasks.to_vec()));
        let md = if arch == Architecture::Seq {
            MdPlacement::InSequence
        } else {
            MdPlacement::InputPlug
        };
        out.push(ModelSpec::new(arch, Some(md), tasks.to_vec()));
    }
    out.push(ModelSpec::new(Architecture::Seq, Some(MdPlacement::InputPlug), tasks.to_vec()));
    out.push(ModelSpec::new(Architecture::Seq, None, tasks.to_vec()).without_regularizer());
    out
}

fn batch(n: usize, k: usize, seed: u64) -> (Tensor, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * D).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut y = vec![Vec::new(); k];
    for _ in 0..n {
        // funnel-consistent labels
        let depth = rng.gen_range(0..=k);
        for (t, col) in y.iter_mut().enumerate() {
            col.push(if t < depth { 1.0 } else { 0.0 });
        }
    }
    (Tensor::matrix(n, D, x).unwrap(), y)
}

/// Moves zero-initialized biases off the ReLU kinks, where finite
/// differences straddle the corner.
fn jitter(model: &mut DynModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.visit_params_mut(&mut |p| {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    });
}

#[test]
fn every_model_passes_gradcheck_at_small_width() {
    let tasks = Task::FUNNEL.to_vec();
    let (x, y) = batch(16, tasks.len(), 11);
    let weights = vec![1.0; tasks.len()];
    for spec in all_specs(&tasks) {
        let cfg = spec.resolve(&small_defaults(), D, Some(&small_layout())).unwrap();
        let mut model: DynModel = build_model(&cfg, 3).unwrap();
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
        .unwrap();
        assert!(
            report.passes(1e-4),
            "{}: worst {:?}",
            spec.label(),
            report.worst()
        );
        assert!(!report.entries.is_empty());
    }
}

fn mlp(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn gru(d_in: usize, h: usize) -> usize {
    3 * (d_in * h + h * h + h)
}

/// Closed-form counts at the default widths.
fn expected(arch: Architecture, md: bool, k: usize, d: usize, layout: &FeatureLayout) -> usize {
    let defaults = ModelDefaults::default();
    let b = &defaults.baseline;
    let (nc, nd, ni) = (layout.country_idx.len(), layout.dependent_idx.len(), layout.invariant_idx.len());
    let dt = defaults.md.transformed_dim;
    let h = defaults.seq.hidden;
    if arch == Architecture::Seq {
        let td = if md { ni } else { d };
        let mut n = (k - 1) * mlp(&[td, td]) + gru(td, h) + gru(h + if md { dt } else { 0 }, h) + h + 1;
        if md {
            n += k * mlp(&[nc, nd]) + mlp(&[nd, dt]);
        }
        return n;
    }
    let input = if md { ni + dt } else { d };
    let o = *b.expert_widths.last().unwrap();
    let expert = |i: usize| {
        let mut w = vec![i];
        w.extend(&b.expert_widths);
        mlp(&w)
    };
    let mut tower = vec![o];
    tower.extend(&b.tower_hidden);
    tower.push(1);
    let gate = |i: usize, n: usize| i * n + n;
    let (ns, nt, levels) = (b.shared_experts, b.task_experts, b.levels);
    let level_in = |l: usize| if l == 0 { input } else { o };
    let body: usize = match arch {
        Architecture::SharedBottom => expert(input),
        Architecture::Mlmmoe => {
            (0..levels).map(|l| ns * expert(level_in(l))).sum::<usize>()
                + (levels - 1) * ns * gate(input, ns)
                + k * gate(input, ns)
        }
        Architecture::Ple => (0..levels)
            .map(|l| {
                let i = level_in(l);
                (ns + k * nt) * expert(i)
                    + k * gate(i, nt + ns)
                    + if l + 1 < levels { gate(i, k * nt + ns) } else { 0 }
            })
            .sum(),
        Architecture::AdattSp => (0..levels)
            .map(|l| {
                let i = level_in(l);
                k * nt * expert(i) + k * gate(i, k * nt)
            })
            .sum(),
        Architecture::Seq => unreachable!(),
    };
    let mut n = body + k * mlp(&tower);
    if md {
        n += mlp(&[nc, nd]) + mlp(&[nd, dt]);
    }
    n
}

fn default_layout() -> FeatureLayout {
    // 6 user columns + 4 region one-hot + 10 listing columns
    FeatureLayout {
        country_idx: (6..10).collect(),
        dependent_idx: (0..5).collect(),
        invariant_idx: (5..6).chain(10..20).collect(),
    }
}

#[test]
fn parameter_counts_match_closed_form() {
    let layout = default_layout();
    for k in [2, 3] {
        let tasks = Task::standard(k).unwrap();
        for spec in all_specs(&tasks).into_iter().filter(|s| s.regularizer) {
            if spec.arch == Architecture::Seq && spec.md == Some(MdPlacement::InputPlug) {
                continue;
            }
            let cfg = spec.resolve(&ModelDefaults::default(), 20, Some(&layout)).unwrap();
            let model: DynModel = build_model(&cfg, 0).unwrap();
            let got = count_params(model.as_ref()).total;
            assert_eq!(got, expected(spec.arch, spec.md.is_some(), k, 20, &layout), "{} k={k}", spec.label());
        }
    }
}

#[test]
fn parameter_growth_two_to_three_tasks() {
    let layout = default_layout();
    let count = |spec: ModelSpec| {
        let cfg = spec.resolve(&ModelDefaults::default(), 20, Some(&layout)).unwrap();
        count_params(build_model::<f64>(&cfg, 0).unwrap().as_ref()).total
    };
    let growth = |arch, md| {
        let two = count(ModelSpec::new(arch, md, Task::standard(2).unwrap()));
        let three = count(ModelSpec::new(arch, md, Task::standard(3).unwrap()));
        (two, three, (three - two) as f64 / two as f64 * 100.0)
    };
    for (arch, md) in [(Architecture::Seq, None), (Architecture::Seq, Some(MdPlacement::InSequence))] {
        let (two, three, g) = growth(arch, md);
        println!("{arch}{}: {two} -> {three} ({g:.2}%)", if md.is_some() { "+md" } else { "" });
        assert!(g < 10.0, "{arch}: {g}");
    }
    for arch in Architecture::ALL.into_iter().filter(|a| *a != Architecture::Seq) {
        let (two, three, g) = growth(arch, None);
        println!("{arch}: {two} -> {three} ({g:.2}%)");
        assert!(g >= 25.0, "{arch}: {g}");
    }
    let exact = [
        (Architecture::Seq, None, 11781, 12201),
        (Architecture::Seq, Some(MdPlacement::InSequence), 11495, 11652),
        (Architecture::SharedBottom, None, 7602, 10803),
        (Architecture::Mlmmoe, None, 11114, 14357),
        (Architecture::Ple, None, 15802, 21410),
        (Architecture::AdattSp, None, 11098, 16761),
    ];
    for (arch, md, two, three) in exact {
        let (a, b, _) = growth(arch, md);
        assert_eq!((a, b), (two, three), "{arch}");
    }
}

#[test]
fn plugging_adds_exactly_the_adaptor() {
    let layout = default_layout();
    let tasks = Task::standard(2).unwrap();
    let dt = ModelDefaults::default().md.transformed_dim;
    let adaptor = mlp(&[4, 5]) + mlp(&[5, dt]);
    for arch in Architecture::ALL.into_iter().filter(|a| *a != Architecture::Seq) {
        let plugged = ModelSpec::new(arch, Some(MdPlacement::InputPlug), tasks.clone())
            .resolve(&ModelDefaults::default(), 20, Some(&layout))
            .unwrap();
        // the wrapped model sees invariant + transformed columns
        let inner = ModelSpec::new(arch, None, tasks.clone())
            .resolve(&ModelDefaults::default(), layout.invariant_idx.len() + dt, None)
            .unwrap();
        let p = count_params(build_model::<f64>(&plugged, 0).unwrap().as_ref());
        let i = count_params(build_model::<f64>(&inner, 0).unwrap().as_ref());
        assert_eq!(p.total, i.total + adaptor, "{arch}");
        let md: usize = p
            .components
            .iter()
            .filter(|(c, _)| c.starts_with("md."))
            .map(|(_, n)| n)
            .sum();
        assert_eq!(md, adaptor);
    }
}

#[test]
fn plugged_models_keep_output_shape() {
    let tasks = Task::FUNNEL.to_vec();
    let (x, _) = batch(5, 3, 2);
    for arch in Architecture::ALL.into_iter().filter(|a| *a != Architecture::Seq) {
        let plain = build_model::<f64>(
            &ModelSpec::new(arch, None, tasks.clone()).resolve(&small_defaults(), D, None).unwrap(),
            1,
        )
        .unwrap();
        let plugged = build_model::<f64>(
            &ModelSpec::new(arch, Some(MdPlacement::InputPlug), tasks.clone())
                .resolve(&small_defaults(), D, Some(&small_layout()))
                .unwrap(),
            1,
        )
        .unwrap();
        assert_eq!(plain.input_dim(), plugged.input_dim());
        let a = seqmd::models::predict(plain.as_ref(), &x).unwrap();
        let b = seqmd::models::predict(plugged.as_ref(), &x).unwrap();
        assert_eq!(a.len(), b.len());
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.probs.len(), rb.probs.len());
            assert_eq!(ra.logits.len(), rb.logits.len());
        }
    }
}

#[test]
fn same_seed_same_weights() {
    let tasks = Task::standard(2).unwrap();
    for spec in all_specs(&tasks) {
        let cfg = spec.resolve(&small_defaults(), D, Some(&small_layout())).unwrap();
        let a = build_model::<f64>(&cfg, 9).unwrap().snapshot();
        let b = build_model::<f64>(&cfg, 9).unwrap().snapshot();
        let c = build_model::<f64>(&cfg, 10).unwrap().snapshot();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
