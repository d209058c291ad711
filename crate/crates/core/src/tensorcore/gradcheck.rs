//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, NodeId, Parameterized, TensorError};
use crate::scalar::Scalar;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Per-scalar comparison, sorted by descending relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.first().map_or(0.0, |e| e.rel_err)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.first()
    }

    pub fn flagged(&self, tolerance: f64) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().take_while(move |e| e.rel_err > tolerance)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Named flat gradients in parameter visiting order.
pub type NamedGrads = Vec<(String, Vec<f64>)>;

fn loss_value<S, M, E, F>(model: &M, loss_fn: &F) -> Result<f64, E>
where
    S: Scalar,
    E: From<TensorError>,
    F: Fn(&M, &mut Graph<S>) -> Result<NodeId, E>,
{
    let mut g = Graph::new();
    let l = loss_fn(model, &mut g)?;
    let v = g.value(l);
    if !v.is_scalar() {
        return Err(TensorError::NonScalarLoss {
            shape: v.shape().to_vec(),
        }
        .into());
    }
    let v = v.data()[0].as_f64();
    if !v.is_finite() {
        return Err(TensorError::NonFinite {
            op: "loss",
            node: l.index(),
        }
        .into());
    }
    Ok(v)
}

/// Gradients from one reverse sweep. Leaves the model's grad buffers zeroed.
pub fn analytic_gradients<S, M, E, F>(model: &mut M, loss_fn: &F) -> Result<NamedGrads, E>
where
    S: Scalar,
    M: Parameterized<S>,
    E: From<TensorError>,
    F: Fn(&M, &mut Graph<S>) -> Result<NodeId, E>,
{
    let mut g = Graph::new();
    let l = loss_fn(model, &mut g)?;
    g.backward(l)?;
    let mut out = Vec::new();
    model.visit_params(&mut |p| {
        let grad = g
            .param_grad(&p.name)
            .map(|gr| gr.iter().map(|v| v.as_f64()).collect())
            .unwrap_or_else(|| vec![0.0; p.numel()]);
        out.push((p.name.clone(), grad));
    });
    Ok(out)
}

fn nudge<S: Scalar, M: Parameterized<S>>(model: &mut M, param: usize, index: usize, value: Option<S>) -> S {
    let mut i = 0;
    let mut old = S::zero();
    model.visit_params_mut(&mut |p| {
        if i == param {
            let slot = &mut p.value.data_mut()[index];
            old = *slot;
            if let Some(v) = value {
                *slot = v;
            }
        }
        i += 1;
    });
    old
}

/// Central differences `(f(p + h) - f(p - h)) / 2h` for every scalar parameter.
pub fn numeric_gradients<S, M, E, F>(model: &mut M, loss_fn: &F, step: f64) -> Result<NamedGrads, E>
where
    S: Scalar,
    M: Parameterized<S>,
    E: From<TensorError>,
    F: Fn(&M, &mut Graph<S>) -> Result<NodeId, E>,
{
    let mut shapes = Vec::new();
    model.visit_params(&mut |p| shapes.push((p.name.clone(), p.numel())));
    let mut out = Vec::with_capacity(shapes.len());
    for (pi, (name, numel)) in shapes.into_iter().enumerate() {
        let mut grad = Vec::with_capacity(numel);
        for idx in 0..numel {
            let orig = nudge(model, pi, idx, None);
            nudge(model, pi, idx, Some(S::of(orig.as_f64() + step)));
            let up = loss_value(model, loss_fn);
            nudge(model, pi, idx, Some(S::of(orig.as_f64() - step)));
            let down = loss_value(model, loss_fn);
            nudge(model, pi, idx, Some(orig));
            grad.push((up? - down?) / (2.0 * step));
        }
        out.push((name, grad));
    }
    Ok(out)
}

pub fn compare(analytic: &NamedGrads, numeric: &NamedGrads) -> GradCheckReport {
    let mut entries: Vec<GradCheckEntry> = analytic
        .iter()
        .zip(numeric)
        .flat_map(|((name, a), (_, n))| {
            a.iter().zip(n).enumerate().map(move |(i, (&av, &nv))| GradCheckEntry {
                param: name.clone(),
                index: i,
                analytic: av,
                numeric: nv,
                rel_err: relative_error(av, nv),
            })
        })
        .collect();
    entries.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    GradCheckReport { entries }
}

/// Checks every scalar parameter of `model` against central differences.
///
/// `loss_fn` must be deterministic and build the loss on the graph it is
/// given.
pub fn grad_check<S, M, E, F>(model: &mut M, loss_fn: F, step: f64) -> Result<GradCheckReport, E>
where
    S: Scalar,
    M: Parameterized<S>,
    E: From<TensorError>,
    F: Fn(&M, &mut Graph<S>) -> Result<NodeId, E>,
{
    let analytic = analytic_gradients(model, &loss_fn)?;
    let numeric = numeric_gradients(model, &loss_fn, step)?;
    Ok(compare(&analytic, &numeric))
}
