//! Convolutional encoder with a soft position embedding, and a
//! spatial-broadcast mixture decoder.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Bound, Conv, ConvTranspose, LayerNorm, Linear, Mlp, ParamStore};
use crate::scalar::Scalar;
use crate::slp::PositionGrid;
use crate::tensor::Tensor;

pub const ENCODER_LAYERS: usize = 4;
pub const ENCODER_KERNEL: usize = 5;
/// Side of the grid each slot is broadcast over before upsampling.
pub const DECODER_SEED: usize = 8;
const DECODER_KERNEL: usize = 5;

/// Raw `(x, y, 1 − x, 1 − y)` channels with coordinates scaled to `[0, 1]`,
/// `[N, 4]`. A degenerate axis maps to 0.
pub fn coordinate_channels<T: Scalar>(grid: &PositionGrid) -> Tensor<T> {
    let scale = |extent: usize, c: usize| {
        if extent > 1 {
            c as f64 / (extent - 1) as f64
        } else {
            0.0
        }
    };
    let (w, h) = (grid.width(), grid.height());
    let mut data = Vec::with_capacity(grid.len() * 4);
    for p in 0..grid.len() {
        let (x, y) = (scale(w, p % w), scale(h, p / w));
        data.extend([x, y, 1.0 - x, 1.0 - y].map(T::lit));
    }
    Tensor::new(&[grid.len(), 4], data).expect("grid is nonempty")
}

/// Learned projection of [`coordinate_channels`] to `width` channels.
#[derive(Clone, Copy, Debug)]
pub struct PositionEmbedding {
    pub projection: Linear,
}

impl PositionEmbedding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, width: usize) -> Self {
        Self {
            projection: Linear::new(store, rng, name, 4, width, true),
        }
    }

    /// `[N, width]`
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, grid: &PositionGrid) -> Result<Var> {
        let coords = g.constant(coordinate_channels(grid));
        self.projection.forward(g, p, coords)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Stride 2 in the first layer halves the feature grid.
    pub downsample: bool,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    convs: Vec<Conv>,
    position: PositionEmbedding,
    norm: LayerNorm,
    mlp: Mlp,
    grid: PositionGrid,
}

/// Encoder output.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    /// `[B, N, C]`
    pub features: Var,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, config: EncoderConfig) -> Result<Self> {
        let side = if config.downsample {
            config.image_size / 2
        } else {
            config.image_size
        };
        if config.channels == 0 || side == 0 || (config.downsample && !config.image_size.is_multiple_of(2)) {
            return Err(Error::Contract(format!("invalid encoder config {config:?}")));
        }
        let c = config.channels;
        let pad = ENCODER_KERNEL / 2;
        let convs = (0..ENCODER_LAYERS)
            .map(|i| {
                let c_in = if i == 0 { 3 } else { c };
                let stride = if i == 0 && config.downsample { 2 } else { 1 };
                Conv::new(
                    store,
                    rng,
                    &format!("encoder.conv{i}"),
                    c_in,
                    c,
                    ENCODER_KERNEL,
                    stride,
                    pad,
                )
            })
            .collect();
        Ok(Self {
            config,
            convs,
            position: PositionEmbedding::new(store, rng, "encoder.pos", c),
            norm: LayerNorm::new(store, "encoder.norm", c),
            mlp: Mlp::new(store, rng, "encoder.mlp", c, c, c),
            grid: PositionGrid::new(side, side)?,
        })
    }

    /// Feature grid of the output.
    pub fn grid(&self) -> &PositionGrid {
        &self.grid
    }

    /// `images: [B, 3, H, W]` → `[B, N, C]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<FeatureVars> {
        let s = g.shape(images).to_vec();
        let size = self.config.image_size;
        if s.len() != 4 || s[1..] != [3, size, size] {
            return dim_err("encode", &s, &[3, size, size]);
        }
        let mut x = images;
        for conv in &self.convs {
            let y = conv.forward(g, p, x)?;
            x = g.relu(y);
        }
        let (c, n) = (self.config.channels, self.grid.len());
        let flat = g.reshape(x, &[s[0], c, n])?;
        let rows = g.transpose_last2(flat)?;
        let pos = self.position.forward(g, p, &self.grid)?;
        let z = g.add(rows, pos)?;
        let z = self.norm.forward(g, p, z)?;
        let features = self.mlp.forward(g, p, z)?;
        Ok(FeatureVars { features })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub image_size: usize,
    pub slot_dim: usize,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct MixtureDecoder {
    pub config: DecoderConfig,
    position: PositionEmbedding,
    upsample: Vec<ConvTranspose>,
    refine: Conv,
    head: Conv,
    seed_grid: PositionGrid,
}

/// Decoder outputs for a batch of slot sets.
#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    /// `[B, 3, H, W]`
    pub image: Var,
    /// `[B, K, 3, H, W]`
    pub slot_rgbs: Var,
    /// `[B, K, H, W]`, a simplex over the slot axis.
    pub slot_masks: Var,
}

impl MixtureDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, config: DecoderConfig) -> Result<Self> {
        let size = config.image_size;
        if size < DECODER_SEED
            || !size.is_multiple_of(DECODER_SEED)
            || !(size / DECODER_SEED).is_power_of_two()
            || config.channels == 0
            || config.slot_dim == 0
        {
            return Err(Error::Contract(format!(
                "decoder needs an image side of {DECODER_SEED}·2^L, got {config:?}"
            )));
        }
        let levels = (size / DECODER_SEED).trailing_zeros() as usize;
        let (d, c) = (config.slot_dim, config.channels);
        let pad = DECODER_KERNEL / 2;
        let upsample = (0..levels)
            .map(|i| {
                let c_in = if i == 0 { d } else { c };
                ConvTranspose::new(
                    store,
                    rng,
                    &format!("decoder.up{i}"),
                    c_in,
                    c,
                    DECODER_KERNEL,
                    2,
                    pad,
                    1,
                )
            })
            .collect();
        let refine_in = if levels == 0 { d } else { c };
        Ok(Self {
            config,
            position: PositionEmbedding::new(store, rng, "decoder.pos", d),
            upsample,
            refine: Conv::new(store, rng, "decoder.refine", refine_in, c, DECODER_KERNEL, 1, pad),
            head: Conv::new(store, rng, "decoder.head", c, 4, 3, 1, 1),
            seed_grid: PositionGrid::new(DECODER_SEED, DECODER_SEED)?,
        })
    }

    /// `slots: [B, K, D]` → mixture reconstruction.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, slots: Var) -> Result<Reconstruction> {
        let s = g.shape(slots).to_vec();
        if s.len() != 3 || s[2] != self.config.slot_dim {
            return dim_err("decode_mixture", &s, &[self.config.slot_dim]);
        }
        let (b, k, d) = (s[0], s[1], s[2]);
        let (seed, size) = (DECODER_SEED, self.config.image_size);
        let flat = g.reshape(slots, &[b * k, 1, d])?;
        let pos = self.position.forward(g, p, &self.seed_grid)?;
        let x = g.add(flat, pos)?;
        let x = g.transpose_last2(x)?;
        let mut x = g.reshape(x, &[b * k, d, seed, seed])?;
        for layer in &self.upsample {
            let y = layer.forward(g, p, x)?;
            x = g.relu(y);
        }
        let y = self.refine.forward(g, p, x)?;
        let x = g.relu(y);
        let out = self.head.forward(g, p, x)?;
        let out = g.reshape(out, &[b, k, 4, size, size])?;
        let slot_rgbs = g.narrow(out, 2, 0, 3)?;
        let logits = g.narrow(out, 2, 3, 1)?;
        let masks = g.softmax(logits, 1)?;
        let weighted = g.mul(masks, slot_rgbs)?;
        let image = g.sum_axis(weighted, 1)?;
        Ok(Reconstruction {
            image: g.reshape(image, &[b, 3, size, size])?,
            slot_rgbs,
            slot_masks: g.reshape(masks, &[b, k, size, size])?,
        })
    }
}

/// Mean squared error over every element.
pub fn reconstruction_loss<T: Scalar>(g: &mut Graph<T>, image: Var, target: Var) -> Result<Var> {
    if g.shape(image) != g.shape(target) {
        return dim_err("reconstruction_loss", g.shape(image), g.shape(target));
    }
    let diff = g.sub(image, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::gradcheck;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn encoder(downsample: bool) -> (ParamStore<f64>, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = EncoderConfig {
            image_size: 8,
            channels: 3,
            downsample,
        };
        let enc = Encoder::new(&mut store, &mut rng, cfg).unwrap();
        (store, enc)
    }

    fn decoder(size: usize) -> (ParamStore<f64>, MixtureDecoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DecoderConfig {
            image_size: size,
            slot_dim: 4,
            channels: 3,
        };
        let dec = MixtureDecoder::new(&mut store, &mut rng, cfg).unwrap();
        (store, dec)
    }

    #[test]
    fn coordinate_channel_examples() {
        let one = coordinate_channels::<f64>(&PositionGrid::new(1, 1).unwrap());
        assert_eq!(one.data(), &[0.0, 0.0, 1.0, 1.0]);
        let c = coordinate_channels::<f64>(&PositionGrid::new(3, 2).unwrap());
        assert_eq!(c.row(0), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(c.row(4), &[0.5, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn zero_projection_gives_pure_cnn_features() {
        let (mut store, enc) = encoder(false);
        for id in [enc.position.projection.w, enc.position.projection.b.unwrap()] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let pos = enc.position.forward(&mut g, &p, enc.grid()).unwrap();
        assert!(g.value(pos).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_shapes_and_purity() {
        for (down, n) in [(false, 64), (true, 16)] {
            let (store, enc) = encoder(down);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let img = random(&mut rng, &[1, 3, 8, 8]);
            let both = Tensor::stack(&[img.index_axis0(0), img.index_axis0(0)]).unwrap();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(both);
            let z = enc.forward(&mut g, &p, x).unwrap().features;
            assert_eq!(g.shape(z), [2, n, 3]);
            let v = g.value(z);
            assert_eq!(v.index_axis0(0), v.index_axis0(1));
            let bad = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
            assert!(matches!(enc.forward(&mut g, &p, bad), Err(Error::Dimension { .. })));
        }
    }

    #[test]
    fn encoder_pixel_gradient_matches_finite_differences() {
        let (store, enc) = encoder(true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random(&mut rng, &[1, 3, 8, 8]);
        let report = gradcheck(&[img], 1e-5, |g, v| {
            let p = store.bind_frozen(g);
            let z = enc.forward(g, &p, v[0])?.features;
            Ok(g.mean(z))
        })
        .unwrap();
        assert!(report.passes(1e-4, 1e-9), "{}", report.worst_relative(1e-9));
    }

    #[test]
    fn decoder_masks_form_a_simplex_and_composite_is_consistent() {
        for size in [8, 16] {
            let (store, dec) = decoder(size);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let slots = g.constant(random(&mut rng, &[2, 3, 4]));
            let r = dec.forward(&mut g, &p, slots).unwrap();
            let (masks, rgbs, image) = (g.value(r.slot_masks), g.value(r.slot_rgbs), g.value(r.image));
            let plane = size * size;
            for b in 0..2 {
                for px in 0..plane {
                    let total: f64 = (0..3).map(|k| masks.data()[(b * 3 + k) * plane + px]).sum();
                    assert!((total - 1.0).abs() <= 1e-6);
                    for ch in 0..3 {
                        let mix: f64 = (0..3)
                            .map(|k| {
                                masks.data()[(b * 3 + k) * plane + px]
                                    * rgbs.data()[((b * 3 + k) * 3 + ch) * plane + px]
                            })
                            .sum();
                        assert!((mix - image.data()[(b * 3 + ch) * plane + px]).abs() <= 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn single_slot_decodes_to_its_own_rgb() {
        let (store, dec) = decoder(8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let slots = g.constant(random(&mut rng, &[1, 1, 4]));
        let r = dec.forward(&mut g, &p, slots).unwrap();
        assert!(g.value(r.slot_masks).data().iter().all(|&m| m == 1.0));
        assert_eq!(g.value(r.image).data(), g.value(r.slot_rgbs).data());
    }

    #[test]
    fn permuting_slots_permutes_layers_and_keeps_image() {
        let (store, dec) = decoder(8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random(&mut rng, &[1, 3, 4]);
        let perm = [2, 0, 1];
        let s0 = s.index_axis0(0);
        let sp = Tensor::new(&[1, 3, 4], perm.iter().flat_map(|&k| s0.row(k).to_vec()).collect()).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (a, b) = (g.constant(s), g.constant(sp));
        let ra = dec.forward(&mut g, &p, a).unwrap();
        let rb = dec.forward(&mut g, &p, b).unwrap();
        let (ia, ib) = (g.value(ra.image), g.value(rb.image));
        assert!(ia.data().iter().zip(ib.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        let plane = 64;
        for (i, &src) in perm.iter().enumerate() {
            let ma = &g.value(ra.slot_masks).data()[src * plane..(src + 1) * plane];
            let mb = &g.value(rb.slot_masks).data()[i * plane..(i + 1) * plane];
            assert!(ma.iter().zip(mb).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn decoder_rejects_unsupported_sizes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for size in [4, 24] {
            let cfg = DecoderConfig {
                image_size: size,
                slot_dim: 4,
                channels: 3,
            };
            assert!(MixtureDecoder::new(&mut store, &mut rng, cfg).is_err());
        }
    }

    #[test]
    fn reconstruction_loss_examples() {
        let mut g = Graph::<f64>::new();
        let zeros = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let ones = g.constant(Tensor::ones(&[1, 3, 2, 2]));
        let l = reconstruction_loss(&mut g, zeros, ones).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let l = reconstruction_loss(&mut g, ones, ones).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = (random(&mut rng, &[2, 3, 4, 4]), random(&mut rng, &[2, 3, 4, 4]));
        let brute = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64;
        let (av, bv) = (g.constant(a), g.constant(b));
        let l = reconstruction_loss(&mut g, av, bv).unwrap();
        assert!((g.value(l).item() - brute).abs() < 1e-14);
        assert!(reconstruction_loss(&mut g, av, ones).is_err());
    }
}
