//! Autoencoder composition: encoder → slot attention (optionally with the
//! spatial prior) → mixture decoder, trained on reconstruction error.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::perception::{reconstruction_loss, DecoderConfig, Encoder, EncoderConfig, MixtureDecoder, Reconstruction};
use crate::scalar::Scalar;
use crate::slot_attention::{NullHook, SlotAttention, SlotConfig, SlotVars, SpatialPrior};
use crate::slp::{AlphaState, CspConfig, PositionGrid};
use crate::tensor::Tensor;

/// RNG stream for the bias initialization, kept apart so enabling the prior
/// leaves every other parameter unchanged.
const ALPHA0_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorConfig {
    pub enabled: bool,
    pub alpha_lr: f64,
    pub lambda_norm: f64,
    pub t_spat: usize,
    /// Standard deviation of the i.i.d. normal `alpha0` initialization.
    pub alpha0_init_std: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        let csp = CspConfig::default();
        Self {
            enabled: false,
            alpha_lr: csp.alpha_lr,
            lambda_norm: csp.lambda_norm,
            t_spat: csp.t_spat,
            alpha0_init_std: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub encoder_channels: usize,
    pub encoder_downsample: bool,
    pub decoder_channels: usize,
    pub slots: SlotConfig,
    pub prior: PriorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            encoder_channels: 64,
            encoder_downsample: false,
            decoder_channels: 64,
            slots: SlotConfig::default(),
            prior: PriorConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub slot_attention: SlotAttention,
    pub decoder: MixtureDecoder,
    pub alpha0: Option<ParamId>,
}

/// Graph outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub features: Var,
    pub slots: SlotVars,
    pub recon: Reconstruction,
    pub loss: Var,
    /// Inner-loop states `[iteration][image]`, when tracing.
    pub alpha_states: Vec<Vec<AlphaState<f64>>>,
}

impl Model {
    /// Builds the parameters deterministically from `seed`.
    // The negated comparison also rejects a NaN deviation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config;
        let encoder = Encoder::new(
            store,
            &mut rng,
            EncoderConfig {
                image_size: c.image_size,
                channels: c.encoder_channels,
                downsample: c.encoder_downsample,
            },
        )?;
        let slot_attention = SlotAttention::new(store, &mut rng, c.slots, c.encoder_channels)?;
        let decoder = MixtureDecoder::new(
            store,
            &mut rng,
            DecoderConfig {
                image_size: c.image_size,
                slot_dim: c.slots.slot_dim,
                channels: c.decoder_channels,
            },
        )?;
        let alpha0 = if c.prior.enabled {
            if !(c.prior.alpha0_init_std >= 0.0) || c.prior.alpha_lr <= 0.0 || c.prior.lambda_norm < 0.0 {
                return Err(Error::Contract(format!("invalid prior config {:?}", c.prior)));
            }
            let mut arng = ChaCha8Rng::seed_from_u64(seed);
            arng.set_stream(ALPHA0_STREAM);
            let shape = [c.slots.num_slots, encoder.grid().len()];
            let init = if c.prior.alpha0_init_std == 0.0 {
                Tensor::zeros(&shape)
            } else {
                let normal = Normal::new(0.0, c.prior.alpha0_init_std).map_err(|e| Error::Contract(e.to_string()))?;
                Tensor::from_fn(&shape, |_| T::lit(normal.sample(&mut arng)))
            };
            Some(store.add("slp.alpha0", init))
        } else {
            None
        };
        Ok(Self {
            config,
            encoder,
            slot_attention,
            decoder,
            alpha0,
        })
    }

    pub fn grid(&self) -> &PositionGrid {
        self.encoder.grid()
    }

    pub fn csp_config(&self, trace: bool) -> CspConfig {
        let p = self.config.prior;
        CspConfig {
            alpha_lr: p.alpha_lr,
            lambda_norm: p.lambda_norm,
            t_spat: p.t_spat,
            trace,
        }
    }

    pub fn sample_noise<T: Scalar>(&self, rng: &mut impl Rng, batch: usize) -> Tensor<T> {
        self.slot_attention.sample_noise(rng, batch)
    }

    /// Reconstructs `images: [B, 3, H, W]` and scores the result.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        images: Var,
        noise: Option<&Tensor<T>>,
        trace: bool,
    ) -> Result<ModelOutput> {
        let features = self.encoder.forward(g, p, images)?.features;
        let (slots, alpha_states) = match self.alpha0 {
            Some(alpha0) => {
                let mut hook = SpatialPrior::new(alpha0, self.grid(), self.csp_config(trace));
                let out = self.slot_attention.run(g, p, features, noise, &mut hook)?;
                (out, hook.states)
            }
            None => (
                self.slot_attention.run(g, p, features, noise, &mut NullHook)?,
                Vec::new(),
            ),
        };
        let recon = self.decoder.forward(g, p, slots.slots)?;
        let loss = reconstruction_loss(g, recon.image, images)?;
        Ok(ModelOutput {
            features,
            slots,
            recon,
            loss,
            alpha_states,
        })
    }
}
