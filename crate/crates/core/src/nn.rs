//! Parameter storage and the small set of layers the model is built from.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

/// Graph leaves for every parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every value from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract("parameter name sets differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::Dimension {
                    op: "load_from",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Registers every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| g.param(v.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant leaf of `g` (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| g.constant(v.clone())).collect(),
        }
    }

    /// Adjoints gathered after a backward sweep; parameters the root does not
    /// depend on get zeros.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for dense layers.
pub fn uniform_init<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

/// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`: keeps activation variance through
/// ReLU stacks, where the dense default shrinks it by ~6x per layer.
pub fn he_uniform_init<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(rng, &[fan_in, fan_out], fan_in));
        let b = bias.then(|| store.add(format!("{name}.b"), uniform_init(rng, &[fan_out], fan_in)));
        Self { w, b }
    }

    /// Applies to the last axis of `x`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        match self.b {
            Some(b) => g.add(y, p[b]),
            None => Ok(y),
        }
    }
}

/// Affine parameters of a layer normalization over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[width])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias], T::lit(LAYER_NORM_EPS))
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        width_in: usize,
        hidden: usize,
        width_out: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.0"), width_in, hidden, true),
            out: Linear::new(store, rng, &format!("{name}.1"), hidden, width_out, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.relu(h);
        self.out.forward(g, p, h)
    }
}

/// Gated recurrent unit applied row-wise.
///
/// `r = σ(x·W_ir + h·W_hr + b_r)`, `z = σ(x·W_iz + h·W_hz + b_z)`,
/// `n = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))`,
/// `h' = (1 − z) ⊙ h + z ⊙ n`, so a saturated update gate selects the
/// candidate.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub input_reset: ParamId,
    pub input_update: ParamId,
    pub input_candidate: ParamId,
    pub hidden_reset: ParamId,
    pub hidden_update: ParamId,
    pub hidden_candidate: ParamId,
    pub bias_reset: ParamId,
    pub bias_update: ParamId,
    pub bias_input_candidate: ParamId,
    pub bias_hidden_candidate: ParamId,
}

impl GruCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let mut w = |suffix: &str, rows: usize| {
            store.add(format!("{name}.{suffix}"), uniform_init(rng, &[rows, hidden], hidden))
        };
        let input_reset = w("w_ir", input);
        let input_update = w("w_iz", input);
        let input_candidate = w("w_in", input);
        let hidden_reset = w("w_hr", hidden);
        let hidden_update = w("w_hz", hidden);
        let hidden_candidate = w("w_hn", hidden);
        let mut b = |suffix: &str| store.add(format!("{name}.{suffix}"), uniform_init(rng, &[hidden], hidden));
        Self {
            input_reset,
            input_update,
            input_candidate,
            hidden_reset,
            hidden_update,
            hidden_candidate,
            bias_reset: b("b_r"),
            bias_update: b("b_z"),
            bias_input_candidate: b("b_in"),
            bias_hidden_candidate: b("b_hn"),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, state: Var, input: Var) -> Result<Var> {
        let (ss, si) = (g.shape(state).to_vec(), g.shape(input).to_vec());
        if ss.len() != 2 || si.len() != 2 || ss[0] != si[0] {
            return Err(Error::Dimension {
                op: "gru_cell",
                lhs: ss,
                rhs: si,
            });
        }
        let gate = |g: &mut Graph<T>, wi: ParamId, wh: ParamId, b: ParamId| -> Result<Var> {
            let a = g.matmul(input, p[wi])?;
            let h = g.matmul(state, p[wh])?;
            let s = g.add(a, h)?;
            let s = g.add(s, p[b])?;
            Ok(g.sigmoid(s))
        };
        let reset = gate(g, self.input_reset, self.hidden_reset, self.bias_reset)?;
        let update = gate(g, self.input_update, self.hidden_update, self.bias_update)?;
        let xn = g.matmul(input, p[self.input_candidate])?;
        let xn = g.add(xn, p[self.bias_input_candidate])?;
        let hn = g.matmul(state, p[self.hidden_candidate])?;
        let hn = g.add(hn, p[self.bias_hidden_candidate])?;
        let hn = g.mul(reset, hn)?;
        let cand = g.add(xn, hn)?;
        let cand = g.tanh(cand);
        // h + z ⊙ (n − h)
        let delta = g.sub(cand, state)?;
        let delta = g.mul(update, delta)?;
        g.add(state, delta)
    }
}

/// Square-kernel convolution layer over `[B, C, H, W]` inputs.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Self {
            w: store.add(
                format!("{name}.w"),
                he_uniform_init(rng, &[c_out, c_in, kernel, kernel], fan_in),
            ),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.padding)
    }
}

/// Transposed convolution layer over `[B, C, H, W]` inputs.
#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Self {
        // Each output pixel receives about (kernel / stride)^2 taps per input channel.
        let fan_in = (c_in * kernel * kernel / (stride * stride)).max(1);
        Self {
            w: store.add(
                format!("{name}.w"),
                he_uniform_init(rng, &[c_in, c_out, kernel, kernel], fan_in),
            ),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            stride,
            padding,
            output_padding,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d(
            x,
            p[self.w],
            Some(p[self.b]),
            self.stride,
            self.padding,
            self.output_padding,
        )
    }
}
