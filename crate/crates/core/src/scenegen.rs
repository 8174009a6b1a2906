//! Procedural multi-sprite scenes with exact ground-truth masks, and the
//! `SLPD` dataset file format.
//!
//! File layout (little-endian):
//!
//! ```text
//! "SLPD" | version u16 | height u16 | width u16 | n_min u8 | n_max u8
//! | shape count u8 | shape codes u8* | palette count u8 | rgb u8*3*
//! | size_min u16 | size_max u16 | background u8 | occlusion u8 | seed u64
//! | sample count u32
//! per sample: object count u8 | image H·W·3 u8 (row-major, interleaved RGB)
//!   | per object: run count u32 | runs u32*
//! ```
//!
//! Mask runs alternate between absent and present pixels in row-major order,
//! starting with absent; they sum to `H·W`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SLPD";
pub const FORMAT_VERSION: u16 = 1;
/// Minimum number of visible pixels per object.
pub const VISIBILITY_FLOOR: usize = 16;
pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    /// Whether the pixel with top-left `(px, py)` lies in the shape whose
    /// bounding box has top-left `(x0, y0)` and side `s`. Pixel centers decide.
    pub fn covers(self, x0: usize, y0: usize, s: usize, px: usize, py: usize) -> bool {
        if px < x0 || py < y0 || px >= x0 + s || py >= y0 + s {
            return false;
        }
        let (u, v) = ((px - x0) as f64 + 0.5, (py - y0) as f64 + 0.5);
        let half = s as f64 / 2.0;
        match self {
            Shape::Square => true,
            Shape::Circle => (u - half).powi(2) + (v - half).powi(2) <= half * half,
            // Apex at the top center, base along the bottom edge.
            Shape::Triangle => (u - half).abs() <= half * v / s as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Flat,
    Textured,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<Shape>,
    pub palette: Vec<[u8; 3]>,
    pub size_min: usize,
    pub size_max: usize,
    pub background: Background,
    pub occlusion: bool,
    pub seed: u64,
}

/// Saturated colors that stay distinct from the muted backgrounds.
pub const DEFAULT_PALETTE: [[u8; 3]; 8] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 90, 240],
    [240, 210, 30],
    [220, 60, 220],
    [30, 210, 220],
    [250, 140, 20],
    [245, 245, 245],
];

impl SceneSpec {
    /// Named dataset presets scaled to a square image side.
    pub fn preset(name: &str, image_size: usize, seed: u64) -> Result<Self> {
        let size_min = (image_size / 5).max(5);
        let size_max = (image_size * 7 / 20).max(size_min + 2).min(image_size);
        let (min_objects, max_objects, background) = match name {
            "sprites-easy" => (2, 4, Background::Flat),
            "sprites-tex" => (3, 6, Background::Textured),
            _ => return Err(Error::Contract(format!("unknown dataset preset '{name}'"))),
        };
        let spec = Self {
            height: image_size,
            width: image_size,
            min_objects,
            max_objects,
            shapes: Shape::ALL.to_vec(),
            palette: DEFAULT_PALETTE.to_vec(),
            size_min,
            size_max,
            background,
            occlusion: true,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::Contract(format!("invalid scene spec ({why}): {self:?}")));
        if self.height == 0 || self.width == 0 || self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return bad("image size");
        }
        if self.min_objects > self.max_objects || self.max_objects > u8::MAX as usize {
            return bad("object count range");
        }
        if self.max_objects > 0 && (self.shapes.is_empty() || self.palette.is_empty()) {
            return bad("empty shape set or palette");
        }
        if self.shapes.len() > u8::MAX as usize || self.palette.len() > u8::MAX as usize {
            return bad("too many shapes or colors");
        }
        if self.size_min == 0 || self.size_min > self.size_max || self.size_max > self.height.min(self.width) {
            return bad("size range");
        }
        Ok(())
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// One generated scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSample {
    pub height: usize,
    pub width: usize,
    /// Row-major interleaved RGB.
    pub image: Vec<u8>,
    /// Per pixel: 0 for background, `i + 1` for object `i`.
    pub labels: Vec<u8>,
    pub num_objects: usize,
}

impl SceneSample {
    pub fn object_mask(&self, i: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == i + 1).collect()
    }

    pub fn object_masks(&self) -> Vec<Vec<bool>> {
        (0..self.num_objects).map(|i| self.object_mask(i)).collect()
    }

    pub fn background_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == 0).collect()
    }

    /// `[3, H, W]` with values in `[0, 1]`.
    pub fn image_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.height * self.width;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            T::lit(self.image[p * 3 + c] as f64 / 255.0)
        })
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let muted = |rng: &mut ChaCha8Rng| -> [f64; 3] { std::array::from_fn(|_| rng.random_range(0.15..0.55)) };
    let base = muted(rng);
    match spec.background {
        Background::Flat => vec![base; spec.pixels()],
        Background::Textured => {
            let other = muted(rng);
            // Sum of a few low-frequency plane waves, squashed into [0, 1].
            let waves: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let freq = rng.random_range(0.5..2.0) * std::f64::consts::TAU / spec.height.max(spec.width) as f64;
                    (
                        freq * angle.cos(),
                        freq * angle.sin(),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            (0..spec.pixels())
                .map(|p| {
                    let (x, y) = ((p % spec.width) as f64, (p / spec.width) as f64);
                    let s: f64 = waves.iter().map(|(fx, fy, ph)| (fx * x + fy * y + ph).sin()).sum();
                    let t = 0.5 + s / 6.0;
                    std::array::from_fn(|c| base[c] * (1.0 - t) + other[c] * t)
                })
                .collect()
        }
    }
}

/// Deterministic function of `(spec.seed, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<SceneSample> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, index);
    let (h, w) = (spec.height, spec.width);
    let bg = background(spec, &mut rng);
    for _ in 0..MAX_ATTEMPTS {
        let n = rng.random_range(spec.min_objects..=spec.max_objects);
        let mut labels = vec![0u8; h * w];
        let mut colors = Vec::with_capacity(n);
        let mut rejected = false;
        for obj in 0..n {
            let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
            let color = spec.palette[rng.random_range(0..spec.palette.len())];
            let s = rng.random_range(spec.size_min..=spec.size_max);
            let x0 = rng.random_range(0..=w - s);
            let y0 = rng.random_range(0..=h - s);
            for py in y0..y0 + s {
                for px in x0..x0 + s {
                    if shape.covers(x0, y0, s, px, py) {
                        let l = &mut labels[py * w + px];
                        if *l != 0 && !spec.occlusion {
                            rejected = true;
                        }
                        *l = obj as u8 + 1;
                    }
                }
            }
            colors.push(color);
        }
        if rejected {
            continue;
        }
        let mut visible = vec![0usize; n];
        for &l in &labels {
            if l > 0 {
                visible[l as usize - 1] += 1;
            }
        }
        if visible.iter().any(|&v| v < VISIBILITY_FLOOR) {
            continue;
        }
        let mut image = Vec::with_capacity(h * w * 3);
        for (p, &l) in labels.iter().enumerate() {
            let rgb = if l == 0 {
                bg[p].map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            } else {
                colors[l as usize - 1]
            };
            image.extend(rgb);
        }
        return Ok(SceneSample {
            height: h,
            width: w,
            image,
            labels,
            num_objects: n,
        });
    }
    Err(Error::Generation(format!(
        "could not place visible objects after {MAX_ATTEMPTS} attempts (index {index}, spec {spec:?})"
    )))
}

/// Decoded dataset file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn generate(spec: &SceneSpec, count: usize) -> Result<Self> {
        let samples = (0..count as u64)
            .map(|i| generate_scene(spec, i))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `[B, 3, H, W]` for the given sample indices.
    pub fn images<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let images: Vec<Tensor<T>> = indices.iter().map(|&i| self.samples[i].image_tensor()).collect();
        Tensor::stack(&images)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((s.height as u16).to_le_bytes());
        out.extend((s.width as u16).to_le_bytes());
        out.push(s.min_objects as u8);
        out.push(s.max_objects as u8);
        out.push(s.shapes.len() as u8);
        out.extend(s.shapes.iter().map(|sh| sh.code()));
        out.push(s.palette.len() as u8);
        out.extend(s.palette.iter().flatten());
        out.extend((s.size_min as u16).to_le_bytes());
        out.extend((s.size_max as u16).to_le_bytes());
        out.push(s.background as u8);
        out.push(s.occlusion as u8);
        out.extend(s.seed.to_le_bytes());
        out.extend((self.samples.len() as u32).to_le_bytes());
        for sample in &self.samples {
            out.push(sample.num_objects as u8);
            out.extend_from_slice(&sample.image);
            for i in 0..sample.num_objects {
                let runs = encode_runs(&sample.object_mask(i));
                out.extend((runs.len() as u32).to_le_bytes());
                for r in runs {
                    out.extend(r.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error_at(0, "bad magic bytes, expected SLPD"));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(r.error_at(4, &format!("unsupported version {version}")));
        }
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let min_objects = r.u8()? as usize;
        let max_objects = r.u8()? as usize;
        let n_shapes = r.u8()? as usize;
        let mut shapes = Vec::with_capacity(n_shapes);
        for _ in 0..n_shapes {
            let at = r.offset;
            let code = r.u8()?;
            shapes.push(Shape::from_code(code).ok_or_else(|| r.error_at(at, &format!("bad shape code {code}")))?);
        }
        let n_colors = r.u8()? as usize;
        let palette = (0..n_colors)
            .map(|_| Ok([r.u8()?, r.u8()?, r.u8()?]))
            .collect::<Result<_>>()?;
        let size_min = r.u16()? as usize;
        let size_max = r.u16()? as usize;
        let at = r.offset;
        let background = match r.u8()? {
            0 => Background::Flat,
            1 => Background::Textured,
            b => return Err(r.error_at(at, &format!("bad background mode {b}"))),
        };
        let at = r.offset;
        let occlusion = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(r.error_at(at, &format!("bad occlusion flag {b}"))),
        };
        let seed = r.u64()?;
        let spec = SceneSpec {
            height,
            width,
            min_objects,
            max_objects,
            shapes,
            palette,
            size_min,
            size_max,
            background,
            occlusion,
            seed,
        };
        spec.validate().map_err(|e| r.error_at(6, &e.to_string()))?;
        let count = r.u32()? as usize;
        let pixels = spec.pixels();
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.offset;
            let num_objects = r.u8()? as usize;
            if num_objects > u8::MAX as usize - 1 {
                return Err(r.error_at(at, "too many objects"));
            }
            let image = r.take(pixels * 3)?.to_vec();
            let mut labels = vec![0u8; pixels];
            for obj in 0..num_objects {
                let at = r.offset;
                let n_runs = r.u32()? as usize;
                let mut p = 0usize;
                for k in 0..n_runs {
                    let len = r.u32()? as usize;
                    if p + len > pixels {
                        return Err(r.error_at(at, "mask runs exceed the image"));
                    }
                    if k % 2 == 1 {
                        for l in &mut labels[p..p + len] {
                            if *l != 0 {
                                return Err(r.error_at(at, "object masks overlap"));
                            }
                            *l = obj as u8 + 1;
                        }
                    }
                    p += len;
                }
                if p != pixels {
                    return Err(r.error_at(at, "mask runs do not cover the image"));
                }
            }
            samples.push(SceneSample {
                height,
                width,
                image,
                labels,
                num_objects,
            });
        }
        if r.offset != bytes.len() {
            return Err(r.error_at(r.offset as u64, "trailing bytes after last sample"));
        }
        Ok(Self { spec, samples })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Alternating run lengths, starting with a (possibly empty) absent run.
pub fn encode_runs(mask: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &m in mask {
        if m != current {
            runs.push(len);
            current = m;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: impl TryInto<u64>, message: &str) -> Error {
        Error::Format {
            offset: offset.try_into().unwrap_or(u64::MAX),
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error_at(self.offset, &format!("truncated: needed {n} more bytes")));
        };
        let s = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Seeded epoch-wise shuffling into batches; the last batch may be partial.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchIterator {
    pub count: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl BatchIterator {
    pub fn new(count: usize, batch_size: usize, shuffle_seed: u64) -> Result<Self> {
        if batch_size == 0 || count == 0 {
            return Err(Error::Contract("batch size and dataset size must be positive".into()));
        }
        Ok(Self {
            count,
            batch_size,
            shuffle_seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.count.div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.count).collect();
        order.shuffle(&mut scene_rng(self.shuffle_seed, epoch));
        order
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.epoch_order(epoch)
            .chunks(self.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Batch for a global step, walking epochs in order.
    pub fn batch_at(&self, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        let order = self.epoch_order(step / per);
        let start = (step % per) as usize * self.batch_size;
        order[start..(start + self.batch_size).min(self.count)].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_spec() -> SceneSpec {
        SceneSpec {
            height: 16,
            width: 16,
            min_objects: 1,
            max_objects: 1,
            shapes: vec![Shape::Square],
            palette: vec![[255, 0, 0]],
            size_min: 6,
            size_max: 6,
            background: Background::Flat,
            occlusion: false,
            seed: 3,
        }
    }

    #[test]
    fn empty_scene_is_all_background() {
        let spec = SceneSpec {
            min_objects: 0,
            max_objects: 0,
            ..square_spec()
        };
        let s = generate_scene(&spec, 0).unwrap();
        assert_eq!(s.num_objects, 0);
        assert!(s.background_mask().iter().all(|&b| b));
    }

    #[test]
    fn square_mask_equals_footprint() {
        let s = generate_scene(&square_spec(), 5).unwrap();
        let mask = s.object_mask(0);
        let xs: Vec<usize> = (0..256).filter(|&p| mask[p]).map(|p| p % 16).collect();
        let ys: Vec<usize> = (0..256).filter(|&p| mask[p]).map(|p| p / 16).collect();
        let (x0, y0) = (*xs.iter().min().unwrap(), *ys.iter().min().unwrap());
        for (p, &covered) in mask.iter().enumerate() {
            let (x, y) = (p % 16, p / 16);
            let inside = (x0..x0 + 6).contains(&x) && (y0..y0 + 6).contains(&y);
            assert_eq!(covered, inside);
            if inside {
                assert_eq!(&s.image[p * 3..p * 3 + 3], &[255, 0, 0]);
            }
        }
    }

    #[test]
    fn shape_rasterization_oracles() {
        // 5-wide circle: center (2.5, 2.5), radius 2.5 on pixel centers.
        let circle: usize = (0..5)
            .flat_map(|y| (0..5).map(move |x| (x, y)))
            .filter(|&(x, y)| Shape::Circle.covers(0, 0, 5, x, y))
            .count();
        assert_eq!(circle, 21);
        assert!(Shape::Triangle.covers(0, 0, 4, 1, 3));
        assert!(!Shape::Triangle.covers(0, 0, 4, 0, 0));
        assert!(!Shape::Square.covers(2, 2, 3, 5, 2));
    }

    #[test]
    fn generation_is_deterministic_and_masks_partition() {
        let spec = SceneSpec::preset("sprites-tex", 32, 11).unwrap();
        for i in 0..20 {
            let a = generate_scene(&spec, i).unwrap();
            assert_eq!(a, generate_scene(&spec, i).unwrap());
            assert!((3..=6).contains(&a.num_objects));
            let masks = a.object_masks();
            let bg = a.background_mask();
            for p in 0..a.labels.len() {
                let hits = masks.iter().filter(|m| m[p]).count() + bg[p] as usize;
                assert_eq!(hits, 1);
            }
            assert!(masks
                .iter()
                .all(|m| m.iter().filter(|&&b| b).count() >= VISIBILITY_FLOOR));
        }
    }

    #[test]
    fn impossible_spec_reports_generation_error() {
        let spec = SceneSpec {
            height: 8,
            width: 8,
            size_min: 3,
            size_max: 3,
            ..square_spec()
        };
        assert!(matches!(generate_scene(&spec, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn file_round_trip_and_size_arithmetic() {
        let spec = SceneSpec::preset("sprites-easy", 16, 2).unwrap();
        let ds = Dataset::generate(&spec, 10).unwrap();
        let bytes = ds.to_bytes();
        let header = 4 + 2 + 2 + 2 + 2 + 1 + 3 + 1 + 8 * 3 + 4 + 2 + 8 + 4;
        let body: usize = ds
            .samples
            .iter()
            .map(|s| {
                1 + 16 * 16 * 3
                    + (0..s.num_objects)
                        .map(|i| 4 + 4 * encode_runs(&s.object_mask(i)).len())
                        .sum::<usize>()
            })
            .sum();
        assert_eq!(bytes.len(), header + body);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.slpd");
        ds.write(&path).unwrap();
        assert_eq!(Dataset::read(&path).unwrap(), ds);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let ds = Dataset::generate(&SceneSpec::preset("sprites-easy", 16, 2).unwrap(), 2).unwrap();
        let mut bytes = ds.to_bytes();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Dataset::from_bytes(truncated),
            Err(Error::Format { offset, .. }) if offset > 0
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Dataset::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn batch_iteration() {
        let it = BatchIterator::new(10, 3, 7).unwrap();
        let epoch = it.epoch(0);
        assert_eq!(epoch.len(), 4);
        assert_eq!(epoch[3].len(), 1);
        let mut all: Vec<usize> = epoch.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(it.epoch(0), it.epoch(0));
        assert_eq!(it.batch_at(5), it.epoch(1)[1]);
        assert_eq!(BatchIterator::new(10, 10, 0).unwrap().epoch(3).len(), 1);
        assert!(BatchIterator::new(10, 0, 0).is_err());
    }
}
