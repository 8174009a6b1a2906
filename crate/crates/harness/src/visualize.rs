//! PNG figures: per-sample panels and the learned bias initialization.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use slp_core::model::Model;
use slp_core::nn::ParamStore;
use slp_core::scenegen::Dataset;
use slp_core::slp::PositionGrid;
use slp_core::Tensor;

use crate::error::HarnessError;
use crate::evaluate::predict;

const GAP: usize = 2;

/// RGB8 raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.repeat(width * height),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    fn blit(&mut self, src: &Image, x0: usize, y0: usize) {
        for y in 0..src.height {
            for x in 0..src.width {
                self.put(x0 + x, y0 + y, src.get(x, y));
            }
        }
    }

    /// `[3, H, W]` with values in `[0, 1]`, clamped.
    pub fn from_chw(t: &Tensor<f64>) -> Self {
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let plane = h * w;
        let mut pixels = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for c in 0..3 {
                pixels.push((t.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Self {
            width: w,
            height: h,
            pixels,
        }
    }

    /// Nearest-neighbour upscale to `width × height`.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let mut out = Self::filled(width, height, [0; 3]);
        for y in 0..height {
            for x in 0..width {
                out.put(x, y, self.get(x * self.width / width, y * self.height / height));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<(), HarnessError> {
        let file =
            File::create(path).map_err(|e| HarnessError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| HarnessError::Runtime(e.to_string()))?;
        w.write_image_data(&self.pixels)
            .map_err(|e| HarnessError::Runtime(e.to_string()))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, HarnessError> {
        let file = File::open(path)?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| HarnessError::Runtime(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| HarnessError::Runtime(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(HarnessError::Runtime("expected an 8-bit RGB PNG".into()));
        }
        buf.truncate(info.buffer_size());
        Ok(Self {
            width: info.width as usize,
            height: info.height as usize,
            pixels: buf,
        })
    }
}

/// Diverging map: 0 is mid-gray, `+scale` red, `-scale` blue.
pub fn heat_color(v: f64, scale: f64) -> [u8; 3] {
    let t = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let mix = |a: f64, b: f64| (a + (b - a) * t.abs()).round() as u8;
    if t >= 0.0 {
        [mix(128.0, 220.0), mix(128.0, 30.0), mix(128.0, 30.0)]
    } else {
        [mix(128.0, 30.0), mix(128.0, 60.0), mix(128.0, 220.0)]
    }
}

/// One row of `values: [K, N]` on `grid`, colored with a shared scale.
pub fn heatmap(values: &Tensor<f64>, row: usize, grid: &PositionGrid, scale: f64) -> Image {
    let mut img = Image::filled(grid.width(), grid.height(), [128; 3]);
    for (p, &v) in values.row(row).iter().enumerate() {
        img.put(p % grid.width(), p / grid.width(), heat_color(v, scale));
    }
    img
}

/// Horizontal strip of equally sized panels separated by white gaps.
pub fn strip(panels: &[Image]) -> Image {
    let (w, h) = (panels[0].width, panels[0].height);
    let total = panels.len() * w + (panels.len() - 1) * GAP;
    let mut out = Image::filled(total, h, [255; 3]);
    for (i, p) in panels.iter().enumerate() {
        out.blit(p, i * (w + GAP), 0);
    }
    out
}

/// Panels of one sample: input, reconstruction, K masked slot RGBs, and K
/// bias heatmaps (gray when the prior is off).
pub struct SamplePanels {
    pub input: Image,
    pub reconstruction: Image,
    pub slots: Vec<Image>,
    pub alphas: Vec<Image>,
}

impl SamplePanels {
    pub fn compose(&self) -> Image {
        let mut top = vec![self.input.clone(), self.reconstruction.clone()];
        top.extend(self.slots.iter().cloned());
        let mut bottom = vec![Image::filled(self.input.width, self.input.height, [255; 3]); 2];
        bottom.extend(self.alphas.iter().cloned());
        let (a, b) = (strip(&top), strip(&bottom));
        let mut out = Image::filled(a.width, a.height * 2 + GAP, [255; 3]);
        out.blit(&a, 0, 0);
        out.blit(&b, 0, a.height + GAP);
        out
    }
}

pub fn sample_panels(
    model: &Model,
    params: &ParamStore<f64>,
    dataset: &Dataset,
    index: usize,
    seed: u64,
) -> Result<SamplePanels, HarnessError> {
    let pred = predict(model, params, dataset, &[index], 1, seed)?.remove(0);
    let size = model.config.image_size;
    let k = model.config.slots.num_slots;
    let plane = size * size;
    let input = Image::from_chw(&dataset.samples[index].image_tensor());
    let reconstruction = Image::from_chw(&pred.reconstruction);
    let slots = (0..k)
        .map(|s| {
            let masked = Tensor::from_fn(&[3, size, size], |i| {
                let (c, p) = (i / plane, i % plane);
                pred.masks.data()[s * plane + p] * pred.slot_rgbs.data()[(s * 3 + c) * plane + p]
                    + (1.0 - pred.masks.data()[s * plane + p])
            });
            Image::from_chw(&masked)
        })
        .collect();
    let grid = model.grid();
    let alpha = pred.alpha.unwrap_or_else(|| Tensor::zeros(&[k, grid.len()]));
    let scale = alpha.max_abs();
    let alphas = (0..k)
        .map(|s| heatmap(&alpha, s, grid, scale).resized(size, size))
        .collect();
    Ok(SamplePanels {
        input,
        reconstruction,
        slots,
        alphas,
    })
}

/// Writes `sample_<i>.png` per index and `alpha0.png` when the model has a
/// learned bias initialization. Returns the written paths.
pub fn visualize(
    model: &Model,
    params: &ParamStore<f64>,
    dataset: &Dataset,
    indices: &[usize],
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>, HarnessError> {
    if indices.is_empty() {
        return Err(HarnessError::Config("visualize needs at least one sample".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| HarnessError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut written = Vec::new();
    for &i in indices {
        if i >= dataset.len() {
            return Err(HarnessError::Config(format!("sample {i} out of range")));
        }
        let path = out_dir.join(format!("sample_{i}.png"));
        sample_panels(model, params, dataset, i, seed)?
            .compose()
            .save_png(&path)?;
        written.push(path);
    }
    if let Some(id) = model.alpha0 {
        let a0 = params.get(id);
        let scale = a0.max_abs();
        let size = model.config.image_size;
        let panels: Vec<Image> = (0..a0.shape()[0])
            .map(|k| heatmap(a0, k, model.grid(), scale).resized(size, size))
            .collect();
        let path = out_dir.join("alpha0.png");
        strip(&panels).save_png(&path)?;
        written.push(path);
    }
    Ok(written)
}
