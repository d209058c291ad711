use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor, TensorError};
use crate::scalar::Scalar;

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let mut value = value;
        value.set_requires_grad(true);
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn node(&self, g: &mut Graph<S>) -> Result<NodeId, TensorError> {
        g.param(&self.name, &self.value)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Component a parameter belongs to: the name up to the first `/`.
    pub fn component(&self) -> &str {
        self.name.split('/').next().unwrap_or(&self.name)
    }
}

/// Anything that owns named parameters.
///
/// Visiting order is fixed by construction and is the order used by the
/// optimizer state and the checkpoint payload.
pub trait Parameterized<S: Scalar> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.value.zero_grad());
    }

    /// Pulls gradients for every parameter used in `g` into the owned tensors.
    fn accumulate_grads(&mut self, g: &Graph<S>) -> Result<(), TensorError> {
        let mut result = Ok(());
        self.visit_params_mut(&mut |p| {
            if result.is_err() {
                return;
            }
            if let Some(grad) = g.param_grad(&p.name) {
                result = p.value.accumulate_grad(grad);
            }
        });
        result
    }

    /// Copies of every parameter value, in visiting order.
    fn snapshot(&self) -> Vec<Tensor<S>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.value.detached()));
        out
    }

    fn restore(&mut self, values: &[Tensor<S>]) {
        let mut i = 0;
        self.visit_params_mut(&mut |p| {
            p.value.data_mut().copy_from_slice(values[i].data());
            i += 1;
        });
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a stream seed from a root seed and a label. Stable across
/// platforms and releases.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    splitmix(root ^ fnv1a(label.as_bytes()))
}

/// Seeded parameter factory. Each parameter draws from its own stream
/// keyed by `(root_seed, name)`, so values do not depend on creation order.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub root_seed: u64,
}

impl Init {
    pub fn new(root_seed: u64) -> Self {
        Self { root_seed }
    }

    /// `rows x cols` matrix, uniform in `±sqrt(1 / rows)`.
    pub fn weight<S: Scalar>(&self, name: &str, rows: usize, cols: usize) -> Param<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.root_seed, name));
        let bound = (1.0 / rows.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| S::of(rng.gen_range(-bound..=bound)))
            .collect();
        Param::new(name, Tensor::new(vec![rows, cols], data).expect("shape matches"))
    }

    pub fn bias<S: Scalar>(&self, name: &str, cols: usize) -> Param<S> {
        Param::new(name, Tensor::zeros(vec![1, cols]))
    }
}
