//! Iterative slot attention with a pluggable per-iteration logit bias.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Bound, GruCell, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::slp::{run_csp, AlphaState, CspConfig, PositionGrid};
use crate::tensor::Tensor;

/// Floor added to each slot's position-sum before renormalizing.
pub const RENORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Slots drawn from a learned diagonal Gaussian shared by all slots.
    Gaussian,
    /// One learned query per slot, trained through a straight-through path.
    LearnedQuery,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotConfig {
    pub num_slots: usize,
    pub slot_dim: usize,
    pub proj_dim: usize,
    pub iterations: usize,
    pub init_mode: InitMode,
}

impl Default for SlotConfig {
    fn default() -> Self {
        Self {
            num_slots: 7,
            slot_dim: 64,
            proj_dim: 64,
            iterations: 3,
            init_mode: InitMode::Gaussian,
        }
    }
}

impl SlotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_slots < 2 || self.iterations < 1 || self.proj_dim == 0 || self.slot_dim == 0 {
            return Err(Error::Contract(format!("invalid slot config {self:?}")));
        }
        Ok(())
    }
}

/// Per-iteration source of the additive attention bias.
pub trait SlotHook<T: Scalar> {
    /// Bias for `logits: [B, K, N]`, or `None` for no bias.
    fn bias(&mut self, g: &mut Graph<T>, p: &Bound, logits: Var, iteration: usize) -> Result<Option<Var>>;
}

/// Vanilla slot attention: no bias.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullHook;

impl<T: Scalar> SlotHook<T> for NullHook {
    fn bias(&mut self, _: &mut Graph<T>, _: &Bound, _: Var, _: usize) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// Spatial locality prior: solves for a bias per image at every iteration.
pub struct SpatialPrior<'a> {
    pub alpha0: ParamId,
    pub grid: &'a PositionGrid,
    pub config: CspConfig,
    /// Inner-loop states, indexed `[iteration][image]`, when `config.trace` is set.
    pub states: Vec<Vec<AlphaState<f64>>>,
}

impl<'a> SpatialPrior<'a> {
    pub fn new(alpha0: ParamId, grid: &'a PositionGrid, config: CspConfig) -> Self {
        Self {
            alpha0,
            grid,
            config,
            states: Vec::new(),
        }
    }
}

impl<T: Scalar> SlotHook<T> for SpatialPrior<'_> {
    fn bias(&mut self, g: &mut Graph<T>, p: &Bound, logits: Var, _iteration: usize) -> Result<Option<Var>> {
        let shape = g.shape(logits).to_vec();
        let (batch, k, n) = (shape[0], shape[1], shape[2]);
        let alpha0 = p[self.alpha0];
        let mut alphas = Vec::with_capacity(batch);
        let mut states = Vec::new();
        for b in 0..batch {
            let image_logits = g.value(logits).index_axis0(b).reshape(&[k, n])?;
            let (alpha, state) = run_csp(g, &image_logits, alpha0, self.grid, &self.config)?;
            alphas.push(g.reshape(alpha, &[1, k, n])?);
            if self.config.trace {
                states.push(AlphaState {
                    alpha: state.alpha.cast(),
                    alpha_lr: state.alpha_lr,
                    lambda_norm: state.lambda_norm,
                    t_spat: state.t_spat,
                    loss_trace: state.loss_trace,
                    final_loss: state.final_loss,
                    final_stats: state.final_stats,
                });
            }
        }
        if self.config.trace {
            self.states.push(states);
        }
        Ok(Some(g.concat(&alphas, 0)?))
    }
}

#[derive(Clone, Copy, Debug)]
enum SlotInit {
    Gaussian { mu: ParamId, log_sigma: ParamId },
    LearnedQuery { queries: ParamId },
}

/// Graph outputs of [`SlotAttention::run`].
#[derive(Clone, Copy, Debug)]
pub struct SlotVars {
    /// `[B, K, D_slot]`
    pub slots: Var,
    /// Softmax over slots of the last iteration, `[B, K, N]`.
    pub attention: Var,
    /// `attention` renormalized over positions, `[B, K, N]`.
    pub attention_renorm: Var,
    /// Bias used in the last iteration, if any.
    pub alpha: Option<Var>,
}

/// Value snapshot of one image's slot-attention outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotBatch<T> {
    pub slots: Tensor<T>,
    pub attention: Tensor<T>,
    pub attention_renorm: Tensor<T>,
    pub alpha: Option<Tensor<T>>,
}

impl<T: Scalar> SlotBatch<T> {
    pub fn from_graph(g: &Graph<T>, vars: &SlotVars, image: usize) -> Self {
        Self {
            slots: g.value(vars.slots).index_axis0(image),
            attention: g.value(vars.attention).index_axis0(image),
            attention_renorm: g.value(vars.attention_renorm).index_axis0(image),
            alpha: vars.alpha.map(|a| g.value(a).index_axis0(image)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SlotAttention {
    pub config: SlotConfig,
    pub feature_dim: usize,
    init: SlotInit,
    norm_inputs: LayerNorm,
    norm_slots: LayerNorm,
    norm_mlp: LayerNorm,
    project_q: Linear,
    project_k: Linear,
    project_v: Linear,
    gru: GruCell,
    mlp: Mlp,
}

impl SlotAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        config: SlotConfig,
        feature_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let (k, d, dp) = (config.num_slots, config.slot_dim, config.proj_dim);
        let init = match config.init_mode {
            InitMode::Gaussian => SlotInit::Gaussian {
                mu: store.add("slots.mu", crate::nn::uniform_init(rng, &[d], d)),
                log_sigma: store.add("slots.log_sigma", crate::nn::uniform_init(rng, &[d], d)),
            },
            InitMode::LearnedQuery => SlotInit::LearnedQuery {
                queries: store.add("slots.queries", crate::nn::uniform_init(rng, &[k, d], d)),
            },
        };
        Ok(Self {
            config,
            feature_dim,
            init,
            norm_inputs: LayerNorm::new(store, "slots.norm_inputs", feature_dim),
            norm_slots: LayerNorm::new(store, "slots.norm_slots", d),
            norm_mlp: LayerNorm::new(store, "slots.norm_mlp", d),
            project_q: Linear::new(store, rng, "slots.q", d, dp, false),
            project_k: Linear::new(store, rng, "slots.k", feature_dim, dp, false),
            project_v: Linear::new(store, rng, "slots.v", feature_dim, dp, false),
            gru: GruCell::new(store, rng, "slots.gru", dp, d),
            mlp: Mlp::new(store, rng, "slots.mlp", d, 4 * d, d),
        })
    }

    /// Standard-normal noise for Gaussian initialization, `[B, K, D_slot]`.
    pub fn sample_noise<T: Scalar>(&self, rng: &mut impl Rng, batch: usize) -> Tensor<T> {
        let shape = [batch, self.config.num_slots, self.config.slot_dim];
        Tensor::from_fn(&shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
    }

    /// Initial slots `[B, K, D_slot]`. Gaussian mode needs `noise`; learned
    /// queries ignore it.
    pub fn init_slots<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: usize,
        noise: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let (k, d) = (self.config.num_slots, self.config.slot_dim);
        match self.init {
            SlotInit::Gaussian { mu, log_sigma } => {
                let noise = noise.ok_or_else(|| Error::Contract("gaussian slot init requires noise".into()))?;
                if noise.shape() != [batch, k, d] {
                    return dim_err("init_slots", noise.shape(), &[batch, k, d]);
                }
                let eps = g.constant(noise.clone());
                let sigma = g.exp(p[log_sigma]);
                let spread = g.mul(eps, sigma)?;
                g.add(spread, p[mu])
            }
            SlotInit::LearnedQuery { queries } => {
                let zeros = g.constant(Tensor::zeros(&[batch, k, d]));
                g.add(zeros, p[queries])
            }
        }
    }

    /// `q(slots) · k(features)ᵀ / sqrt(d)` for `slots: [B, K, D]`,
    /// `features: [B, N, C]`.
    pub fn attention_logits<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, slots: Var, features: Var) -> Result<Var> {
        let keys = self.project_k.forward(g, p, features)?;
        self.logits_from_keys(g, p, slots, keys)
    }

    fn logits_from_keys<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, slots: Var, keys: Var) -> Result<Var> {
        let q = self.project_q.forward(g, p, slots)?;
        let kt = g.transpose_last2(keys)?;
        let logits = g.bmm(q, kt)?;
        Ok(g.scale(logits, T::lit(1.0 / (self.config.proj_dim as f64).sqrt())))
    }

    /// Softmax over slots of `logits + alpha`, the position-renormalized
    /// weights, and the weighted means of `values: [B, N, d]`.
    pub fn attend<T: Scalar>(
        g: &mut Graph<T>,
        logits: Var,
        alpha: Option<Var>,
        values: Var,
    ) -> Result<(Var, Var, Var)> {
        let biased = match alpha {
            Some(a) => {
                if g.shape(a) != g.shape(logits) {
                    return dim_err("attend", g.shape(logits), g.shape(a));
                }
                g.add(logits, a)?
            }
            None => logits,
        };
        let attention = g.softmax(biased, 1)?;
        let mass = g.sum_axis(attention, 2)?;
        let mass = g.add_scalar(mass, T::lit(RENORM_EPS));
        let renorm = g.div(attention, mass)?;
        let updates = g.bmm(renorm, values)?;
        Ok((attention, renorm, updates))
    }

    /// GRU step per slot followed by a residual MLP.
    pub fn slot_update<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, slots: Var, updates: Var) -> Result<Var> {
        let shape = g.shape(slots).to_vec();
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let d = self.config.slot_dim;
        let u_shape = g.shape(updates).to_vec();
        if u_shape[..u_shape.len() - 1] != shape[..shape.len() - 1] {
            return dim_err("slot_update", &shape, &u_shape);
        }
        let state = g.reshape(slots, &[rows, d])?;
        let input = g.reshape(updates, &[rows, *u_shape.last().unwrap()])?;
        let next = self.gru.forward(g, p, state, input)?;
        let normed = self.norm_mlp.forward(g, p, next)?;
        let delta = self.mlp.forward(g, p, normed)?;
        let next = g.add(next, delta)?;
        g.reshape(next, &shape)
    }

    /// Full iterative procedure on `features: [B, N, C]`.
    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        features: Var,
        noise: Option<&Tensor<T>>,
        hook: &mut dyn SlotHook<T>,
    ) -> Result<SlotVars> {
        let fs = g.shape(features).to_vec();
        if fs.len() != 3 || fs[2] != self.feature_dim {
            return dim_err("slot_attention", &fs, &[self.feature_dim]);
        }
        let batch = fs[0];
        let init = self.init_slots(g, p, batch, noise)?;
        let mut slots = init;
        let z = self.norm_inputs.forward(g, p, features)?;
        let keys = self.project_k.forward(g, p, z)?;
        let values = self.project_v.forward(g, p, z)?;
        let mut last = None;
        for i in 0..self.config.iterations {
            if self.config.init_mode == InitMode::LearnedQuery && i + 1 == self.config.iterations {
                let detached = g.stop_gradient(slots);
                let detached0 = g.stop_gradient(init);
                let s = g.add(detached, init)?;
                slots = g.sub(s, detached0)?;
            }
            let normed = self.norm_slots.forward(g, p, slots)?;
            let logits = self.logits_from_keys(g, p, normed, keys)?;
            let alpha = hook.bias(g, p, logits, i)?;
            let (attention, renorm, updates) = Self::attend(g, logits, alpha, values)?;
            slots = self.slot_update(g, p, slots, updates)?;
            last = Some((attention, renorm, alpha));
        }
        let (attention, attention_renorm, alpha) = last.expect("at least one iteration");
        Ok(SlotVars {
            slots,
            attention,
            attention_renorm,
            alpha,
        })
    }
}

#[cfg(test)]
mod tests;
