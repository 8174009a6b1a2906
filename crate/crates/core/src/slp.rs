//! Spatial locality prior.
//!
//! Each slot's attention over the feature grid is summarized as a spotlight
//! (weighted mean position and isotropic variance). A per-image additive bias
//! `alpha` on the attention logits is optimized by a few steps of plain
//! gradient descent on a loss that penalizes overlapping spotlights and a
//! large bias norm. The descent starts from a learned, dataset-wide
//! initialization `alpha0`; the last step re-attaches `alpha0` with a
//! straight-through construction so the task loss can train it.

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Added to the summed variances of a slot pair.
pub const DISTINCT_EPS: f64 = 1e-8;

/// Coarse grid of feature positions, enumerated row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionGrid {
    width: usize,
    height: usize,
    offset: (f64, f64),
}

impl PositionGrid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Contract("position grid must be nonempty".into()));
        }
        Ok(Self {
            width,
            height,
            offset: (0.0, 0.0),
        })
    }

    /// Same grid with every coordinate shifted by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            offset: (self.offset.0 + dx, self.offset.1 + dy),
            ..self.clone()
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(x, y)` of position `p` in patch units.
    pub fn position(&self, p: usize) -> (f64, f64) {
        (
            (p % self.width) as f64 + self.offset.0,
            (p / self.width) as f64 + self.offset.1,
        )
    }

    /// All positions as an `[N, 2]` tensor.
    pub fn positions<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.len(), 2], |i| {
            let (x, y) = self.position(i / 2);
            T::lit(if i % 2 == 0 { x } else { y })
        })
    }
}

/// Spotlight means `[K, 2]` and variances `[K, 1]` as graph values.
#[derive(Clone, Copy, Debug)]
pub struct SpotlightVars {
    pub means: Var,
    pub variances: Var,
}

/// Per-slot spotlight center and isotropic spread.
#[derive(Clone, Debug, PartialEq)]
pub struct SpotlightStats {
    pub means: Vec<[f64; 2]>,
    pub variances: Vec<f64>,
}

impl SpotlightStats {
    pub fn from_graph<T: Scalar>(g: &Graph<T>, vars: SpotlightVars) -> Self {
        let m = g.value(vars.means).data();
        Self {
            means: m.chunks(2).map(|c| [c[0].as_f64(), c[1].as_f64()]).collect(),
            variances: g.value(vars.variances).data().iter().map(|v| v.as_f64()).collect(),
        }
    }
}

/// Differentiable weighted mean and variance of each attention row
/// (`attention: [K, N]`, nonnegative, positive row sums).
pub fn compute_distribution<T: Scalar>(g: &mut Graph<T>, attention: Var, grid: &PositionGrid) -> Result<SpotlightVars> {
    let shape = g.shape(attention).to_vec();
    if shape.len() != 2 || shape[1] != grid.len() {
        return dim_err("compute_distribution", &shape, &[grid.len()]);
    }
    let k = shape[0];
    if (0..k).any(|r| g.value(attention).row(r).iter().copied().sum::<T>() <= T::zero()) {
        return Err(Error::Contract("attention row with zero mass".into()));
    }
    let positions = g.constant(grid.positions());
    let mass = g.sum_axis(attention, 1)?;
    let weighted = g.matmul(attention, positions)?;
    let means = g.div(weighted, mass)?;
    let m3 = g.reshape(means, &[k, 1, 2])?;
    let diff = g.sub(positions, m3)?;
    let sq = g.square(diff);
    let dist = g.sum_axis(sq, 2)?;
    let dist = g.reshape(dist, &[k, grid.len()])?;
    let spread = g.mul(attention, dist)?;
    let spread = g.sum_axis(spread, 1)?;
    let variances = g.div(spread, mass)?;
    Ok(SpotlightVars { means, variances })
}

/// Sum over slot pairs `k < k'` of `exp(-|m_k - m_k'|² / (v_k + v_k' + ε))`.
pub fn loss_distinct<T: Scalar>(g: &mut Graph<T>, stats: SpotlightVars) -> Result<Var> {
    let k = g.shape(stats.means)[0];
    let mi = g.reshape(stats.means, &[k, 1, 2])?;
    let mj = g.reshape(stats.means, &[1, k, 2])?;
    let d = g.sub(mi, mj)?;
    let d = g.square(d);
    let d = g.sum_axis(d, 2)?;
    let d = g.reshape(d, &[k, k])?;
    let vj = g.reshape(stats.variances, &[1, k])?;
    let denom = g.add(stats.variances, vj)?;
    let denom = g.add_scalar(denom, T::lit(DISTINCT_EPS));
    let ratio = g.div(d, denom)?;
    let ratio = g.neg(ratio);
    let overlap = g.exp(ratio);
    let upper = g.constant(Tensor::from_fn(&[k, k], |i| {
        if i % k > i / k {
            T::one()
        } else {
            T::zero()
        }
    }));
    let pairs = g.mul(overlap, upper)?;
    Ok(g.sum(pairs))
}

/// Squared Frobenius norm of the bias.
pub fn loss_norm<T: Scalar>(g: &mut Graph<T>, alpha: Var) -> Var {
    let sq = g.square(alpha);
    g.sum(sq)
}

/// The three loss values recorded per inner step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub distinct: f64,
    pub norm: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct CspLossVars {
    pub distinct: Var,
    pub norm: Var,
    pub total: Var,
    pub stats: SpotlightVars,
}

/// `L = L_distinct(stats(softmax_slots(logits + alpha))) + λ·L_norm(alpha)`
/// for `[K, N]` logits and bias.
pub fn csp_total_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    alpha: Var,
    grid: &PositionGrid,
    lambda_norm: f64,
) -> Result<CspLossVars> {
    if g.shape(logits) != g.shape(alpha) {
        return dim_err("csp_total_loss", g.shape(logits), g.shape(alpha));
    }
    let biased = g.add(logits, alpha)?;
    let attention = g.softmax(biased, 0)?;
    let stats = compute_distribution(g, attention, grid)?;
    let distinct = loss_distinct(g, stats)?;
    let norm = loss_norm(g, alpha);
    let scaled = g.scale(norm, T::lit(lambda_norm));
    let total = g.add(distinct, scaled)?;
    Ok(CspLossVars {
        distinct,
        norm,
        total,
        stats,
    })
}

/// Step size of zero-based inner step `j` out of `t_spat`:
/// `alpha_lr · (t_spat − j) / t_spat`.
pub fn anneal_lr(alpha_lr: f64, j: usize, t_spat: usize) -> Result<f64> {
    if j >= t_spat {
        return Err(Error::Contract(format!("inner step {j} outside 0..{t_spat}")));
    }
    Ok(alpha_lr * (t_spat - j) as f64 / t_spat as f64)
}

/// Loss terms and `∂L/∂alpha` with logits and bias both treated as leaves.
pub fn csp_gradient<T: Scalar>(
    logits: &Tensor<T>,
    alpha: &Tensor<T>,
    grid: &PositionGrid,
    lambda_norm: f64,
) -> Result<(LossTerms, Tensor<T>, SpotlightStats)> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let a = g.param(alpha.clone());
    let loss = csp_total_loss(&mut g, l, a, grid, lambda_norm)?;
    g.backward(loss.total)?;
    let terms = LossTerms {
        distinct: g.value(loss.distinct).item().as_f64(),
        norm: g.value(loss.norm).item().as_f64(),
        total: g.value(loss.total).item().as_f64(),
    };
    let stats = SpotlightStats::from_graph(&g, loss.stats);
    let grad = g.take_grad(a).unwrap_or_else(|| Tensor::zeros(alpha.shape()));
    Ok((terms, grad, stats))
}

/// Hyperparameters of the inner loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CspConfig {
    pub alpha_lr: f64,
    pub lambda_norm: f64,
    pub t_spat: usize,
    /// Also evaluate the loss and spotlights at the returned bias.
    pub trace: bool,
}

impl Default for CspConfig {
    fn default() -> Self {
        let d = meta_defaults();
        Self {
            alpha_lr: d.alpha_lr,
            lambda_norm: d.lambda_norm,
            t_spat: 1,
            trace: false,
        }
    }
}

/// Outcome of one inner loop.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaState<T> {
    /// Bias returned to the attention step.
    pub alpha: Tensor<T>,
    pub alpha_lr: f64,
    pub lambda_norm: f64,
    pub t_spat: usize,
    /// Loss before each of the `t_spat` descent steps.
    pub loss_trace: Vec<LossTerms>,
    /// Loss and spotlights at the returned bias (only when tracing).
    pub final_loss: Option<LossTerms>,
    pub final_stats: Option<SpotlightStats>,
}

/// `alpha0 / ‖alpha0‖₂` (Frobenius). A zero `alpha0` maps to a constant zero
/// bias with no gradient path, the subgradient choice at the origin.
pub fn normalized_init<T: Scalar>(g: &mut Graph<T>, alpha0: Var) -> Result<Var> {
    if g.value(alpha0).norm() == T::zero() {
        return Ok(g.constant(Tensor::zeros(g.shape(alpha0))));
    }
    let sq = g.square(alpha0);
    let total = g.sum(sq);
    let norm = g.sqrt(total);
    g.div(alpha0, norm)
}

/// Runs the inner gradient descent on the bias for one image.
///
/// `logits` (`[K, N]`) are treated as fixed inputs. The returned var carries
/// the final bias; in the outer graph it depends on `alpha0` through the
/// normalization when `t_spat == 0`, and through the straight-through
/// identity inserted before the last step otherwise.
pub fn run_csp<T: Scalar>(
    g: &mut Graph<T>,
    logits: &Tensor<T>,
    alpha0: Var,
    grid: &PositionGrid,
    cfg: &CspConfig,
) -> Result<(Var, AlphaState<T>)> {
    if logits.shape() != g.shape(alpha0) {
        return dim_err("run_csp", logits.shape(), g.shape(alpha0));
    }
    let mut alpha = normalized_init(g, alpha0)?;
    let mut trace = Vec::with_capacity(cfg.t_spat);
    for j in 0..cfg.t_spat {
        if j + 1 == cfg.t_spat {
            let detached = g.stop_gradient(alpha);
            let detached0 = g.stop_gradient(alpha0);
            let a = g.add(detached, alpha0)?;
            alpha = g.sub(a, detached0)?;
        }
        let (terms, grad, _) = csp_gradient(logits, g.value(alpha), grid, cfg.lambda_norm)?;
        trace.push(terms);
        let lr = T::lit(anneal_lr(cfg.alpha_lr, j, cfg.t_spat)?);
        let step = g.constant(grad.map(|v| v * lr));
        alpha = g.sub(alpha, step)?;
    }
    let (final_loss, final_stats) = if cfg.trace {
        let (terms, _, stats) = csp_gradient(logits, g.value(alpha), grid, cfg.lambda_norm)?;
        (Some(terms), Some(stats))
    } else {
        (None, None)
    };
    let state = AlphaState {
        alpha: g.value(alpha).clone(),
        alpha_lr: cfg.alpha_lr,
        lambda_norm: cfg.lambda_norm,
        t_spat: cfg.t_spat,
        loss_trace: trace,
        final_loss,
        final_stats,
    };
    Ok((alpha, state))
}

/// Values of the bias hyperparameters found to work best.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaDefaults {
    pub alpha_lr: f64,
    pub lambda_norm: f64,
    pub t_spat_candidates: Vec<usize>,
    pub alpha_lr_candidates: Vec<f64>,
}

pub fn meta_defaults() -> MetaDefaults {
    MetaDefaults {
        alpha_lr: 1.0,
        lambda_norm: 0.1,
        t_spat_candidates: vec![1, 5, 10, 20, 25],
        alpha_lr_candidates: vec![1.0, 0.5, 0.1],
    }
}
