//! Segmentation scores of a trained model over a dataset split.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slp_core::metrics::{
    ari, fg_ari, foreground_from_slots, iou_dice, label_masks, masks_from_attention, mbo, MetricsReport,
};
use slp_core::model::Model;
use slp_core::nn::ParamStore;
use slp_core::scenegen::Dataset;
use slp_core::slot_attention::InitMode;
use slp_core::{Graph, Tensor};

use crate::error::HarnessError;

/// Stream of the slot-initialization noise used during evaluation.
const EVAL_NOISE_STREAM: u64 = u64::MAX;

/// Per-image predictions needed by the metrics.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[K, H, W]`
    pub masks: Tensor<f64>,
    /// `[3, H, W]`
    pub reconstruction: Tensor<f64>,
    /// `[K, 3, H, W]`
    pub slot_rgbs: Tensor<f64>,
    /// Bias of the last slot iteration, `[K, N]`.
    pub alpha: Option<Tensor<f64>>,
}

pub fn check_compatible(model: &Model, dataset: &Dataset) -> Result<(), HarnessError> {
    let s = &dataset.spec;
    let size = model.config.image_size;
    if s.height != size || s.width != size {
        return Err(HarnessError::Config(format!(
            "dataset images are {}x{}, model expects {size}x{size}",
            s.height, s.width
        )));
    }
    Ok(())
}

/// Runs the model on `indices` in batches with seeded slot noise.
pub fn predict(
    model: &Model,
    params: &ParamStore<f64>,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Prediction>, HarnessError> {
    check_compatible(model, dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_NOISE_STREAM);
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let images = dataset.images::<f64>(chunk)?;
        let noise = (model.config.slots.init_mode == InitMode::Gaussian)
            .then(|| model.sample_noise::<f64>(&mut rng, chunk.len()));
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let x = g.constant(images);
        let fwd = model.forward(&mut g, &p, x, noise.as_ref(), false)?;
        for b in 0..chunk.len() {
            out.push(Prediction {
                masks: g.value(fwd.recon.slot_masks).index_axis0(b),
                reconstruction: g.value(fwd.recon.image).index_axis0(b),
                slot_rgbs: g.value(fwd.recon.slot_rgbs).index_axis0(b),
                alpha: fwd.slots.alpha.map(|a| g.value(a).index_axis0(b)),
            });
        }
    }
    Ok(out)
}

/// Scores one prediction against its ground truth into `report`.
pub fn score(
    report: &mut MetricsReport,
    pred: &Prediction,
    dataset: &Dataset,
    index: usize,
) -> Result<(), HarnessError> {
    let sample = &dataset.samples[index];
    let k = pred.masks.shape()[0];
    let labels = masks_from_attention(&pred.masks);
    let truth: Vec<usize> = sample.labels.iter().map(|&l| l as usize).collect();
    report.push("ari", ari(&labels, &truth)?);
    let pred_masks = label_masks(&labels, k);
    let objects = sample.object_masks();
    if sample.num_objects > 0 {
        report.push("fg_ari", fg_ari(&labels, &truth, 0)?);
        report.push("mbo_fg", mbo(&pred_masks, &objects)?);
    }
    let background = sample.background_mask();
    let mut with_bg = objects.clone();
    if background.iter().any(|&b| b) {
        with_bg.push(background.clone());
    }
    report.push("mbo", mbo(&pred_masks, &with_bg)?);
    let target = sample.image_tensor::<f64>();
    let mse = target
        .data()
        .iter()
        .zip(pred.reconstruction.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / target.len() as f64;
    report.push("mse", mse);
    if sample.num_objects == 1 {
        let fg: Vec<bool> = background.iter().map(|&b| !b).collect();
        let (_, mask) = foreground_from_slots(&pred_masks, &fg);
        let (iou, dice) = iou_dice(&mask, &fg);
        report.push("iou", iou);
        report.push("dice", dice);
    }
    Ok(())
}

/// Evaluates the first `max_images` samples (all when 0).
pub fn evaluate(
    model: &Model,
    params: &ParamStore<f64>,
    dataset: &Dataset,
    max_images: usize,
    batch_size: usize,
    seed: u64,
) -> Result<MetricsReport, HarnessError> {
    let n = if max_images == 0 {
        dataset.len()
    } else {
        max_images.min(dataset.len())
    };
    if n == 0 {
        return Err(HarnessError::Config("evaluation dataset is empty".into()));
    }
    let indices: Vec<usize> = (0..n).collect();
    let preds = predict(model, params, dataset, &indices, batch_size, seed)?;
    let mut report = MetricsReport::new();
    for (pred, &i) in preds.iter().zip(&indices) {
        score(&mut report, pred, dataset, i)?;
    }
    Ok(report)
}
