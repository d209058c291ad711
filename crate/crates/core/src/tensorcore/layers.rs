use serde::{Deserialize, Serialize};

use super::{Graph, Init, NodeId, Param, Parameterized, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<S: Scalar>(self, g: &mut Graph<S>, x: NodeId) -> Result<NodeId, TensorError> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Affine map `x W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(init: &Init, prefix: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: init.weight(&format!("{prefix}.w"), d_in, d_out),
            bias: init.bias(&format!("{prefix}.b"), d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<S>, x: NodeId) -> Result<NodeId, TensorError> {
        let (_, cols) = g.value(x).dims2().unwrap_or((0, 0));
        if cols != self.d_in() {
            return Err(TensorError::Shape {
                op: "linear",
                detail: format!(
                    "{}: input width {cols}, expected {}",
                    self.weight.name,
                    self.d_in()
                ),
            });
        }
        let w = self.weight.node(g)?;
        let b = self.bias.node(g)?;
        g.linear(x, w, b)
    }

    /// Sets `W` to the identity (square layers only) and `b` to zero.
    pub fn set_identity(&mut self) {
        let (r, c) = (self.d_in(), self.d_out());
        assert_eq!(r, c, "identity needs a square layer");
        let w = self.weight.value.data_mut();
        w.iter_mut().for_each(|v| *v = S::zero());
        (0..r).for_each(|i| w[i * c + i] = S::one());
        self.bias.value.data_mut().iter_mut().for_each(|v| *v = S::zero());
    }

    pub fn set_constant(&mut self, weight: S, bias: S) {
        self.weight.value.data_mut().iter_mut().for_each(|v| *v = weight);
        self.bias.value.data_mut().iter_mut().for_each(|v| *v = bias);
    }
}

impl<S: Scalar> Parameterized<S> for Linear<S> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Stack of affine layers. `widths` includes the input width, so
/// `[4, 3]` is a single 4 -> 3 layer. Hidden layers use `activation`;
/// the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock<S> {
    widths: Vec<usize>,
    activation: Activation,
    pub layers: Vec<Linear<S>>,
}

impl<S: Scalar> MlpBlock<S> {
    pub fn new(
        init: &Init,
        prefix: &str,
        widths: &[usize],
        activation: Activation,
    ) -> Result<Self, TensorError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(TensorError::Shape {
                op: "mlp",
                detail: format!("{prefix}: invalid widths {widths:?}"),
            });
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(init, &format!("{prefix}/l{i}"), w[0], w[1]))
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            layers,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn forward(&self, g: &mut Graph<S>, x: NodeId) -> Result<NodeId, TensorError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < last {
                h = self.activation.apply(g, h)?;
            }
        }
        Ok(h)
    }

    /// Evaluates the block on a plain matrix outside any training graph.
    pub fn eval(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let mut g = Graph::new();
        let xi = g.constant(x.clone())?;
        let y = self.forward(&mut g, xi)?;
        Ok(g.value(y).detached())
    }

    /// Exact parameter count: sum over layers of `(w_in + 1) * w_out`.
    pub fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

impl<S: Scalar> Parameterized<S> for MlpBlock<S> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        self.layers.iter().for_each(|l| l.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.layers.iter_mut().for_each(|l| l.visit_params_mut(f));
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z  = σ(x W_z + h U_z + b_z)
/// r  = σ(x W_r + h U_r + b_r)
/// h~ = tanh(x W_h + (r ⊙ h) U_h + b_h)
/// h' = (1 - z) ⊙ h + z ⊙ h~
/// ```
///
/// One set of weights is reused at every sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell<S> {
    d_in: usize,
    d_h: usize,
    pub w_z: Param<S>,
    pub u_z: Param<S>,
    pub b_z: Param<S>,
    pub w_r: Param<S>,
    pub u_r: Param<S>,
    pub b_r: Param<S>,
    pub w_h: Param<S>,
    pub u_h: Param<S>,
    pub b_h: Param<S>,
}

impl<S: Scalar> GruCell<S> {
    pub fn new(init: &Init, prefix: &str, d_in: usize, d_h: usize) -> Self {
        let w = |n: &str| init.weight(&format!("{prefix}/w_{n}"), d_in, d_h);
        let u = |n: &str| init.weight(&format!("{prefix}/u_{n}"), d_h, d_h);
        let b = |n: &str| init.bias(&format!("{prefix}/b_{n}"), d_h);
        Self {
            d_in,
            d_h,
            w_z: w("z"),
            u_z: u("z"),
            b_z: b("z"),
            w_r: w("r"),
            u_r: u("r"),
            b_r: b("r"),
            w_h: w("h"),
            u_h: u("h"),
            b_h: b("h"),
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn param_count(d_in: usize, d_h: usize) -> usize {
        3 * (d_in * d_h + d_h * d_h + d_h)
    }

    fn gate(
        g: &mut Graph<S>,
        x: NodeId,
        h: NodeId,
        w: &Param<S>,
        u: &Param<S>,
        b: &Param<S>,
    ) -> Result<NodeId, TensorError> {
        let (wn, un, bn) = (w.node(g)?, u.node(g)?, b.node(g)?);
        let xw = g.matmul(x, wn)?;
        let hu = g.matmul(h, un)?;
        let s = g.add(xw, hu)?;
        g.add_row(s, bn)
    }

    pub fn step(&self, g: &mut Graph<S>, x: NodeId, h: NodeId) -> Result<NodeId, TensorError> {
        let (n, dx) = g.value(x).dims2().unwrap_or((0, 0));
        let (nh, dh) = g.value(h).dims2().unwrap_or((0, 0));
        if dx != self.d_in || dh != self.d_h || n != nh {
            return Err(TensorError::Shape {
                op: "gru_step",
                detail: format!(
                    "x [{n}, {dx}], h [{nh}, {dh}] for cell {} -> {}",
                    self.d_in, self.d_h
                ),
            });
        }
        let pre_z = Self::gate(g, x, h, &self.w_z, &self.u_z, &self.b_z)?;
        let z = g.sigmoid(pre_z)?;
        let pre_r = Self::gate(g, x, h, &self.w_r, &self.u_r, &self.b_r)?;
        let r = g.sigmoid(pre_r)?;
        let rh = g.mul(r, h)?;
        let pre_c = Self::gate(g, x, rh, &self.w_h, &self.u_h, &self.b_h)?;
        let cand = g.tanh(pre_c)?;
        let one_minus_z = {
            let neg = g.scale(z, -S::one())?;
            let ones = g.constant(Tensor::new(
                g.value(z).shape().to_vec(),
                vec![S::one(); g.value(z).len()],
            )?)?;
            g.add(ones, neg)?
        };
        let keep = g.mul(one_minus_z, h)?;
        let update = g.mul(z, cand)?;
        g.add(keep, update)
    }

    /// Runs the cell over a sequence from a zero initial state.
    pub fn run(&self, g: &mut Graph<S>, xs: &[NodeId]) -> Result<Vec<NodeId>, TensorError> {
        let Some(&first) = xs.first() else {
            return Ok(Vec::new());
        };
        let (n, _) = g.value(first).dims2().unwrap_or((0, 0));
        let mut h = g.constant(Tensor::zeros(vec![n, self.d_h]))?;
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            h = self.step(g, x, h)?;
            out.push(h);
        }
        Ok(out)
    }
}

impl<S: Scalar> Parameterized<S> for GruCell<S> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        for p in [
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h,
            &self.u_h, &self.b_h,
        ] {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for p in [
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ] {
            f(p);
        }
    }
}
