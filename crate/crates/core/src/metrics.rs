//! Segmentation scores: ARI and FG-ARI, IoU/Dice, mean best overlap, and
//! per-image aggregation into a report.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-pixel argmax over slots of `masks: [K, H, W]` (or `[K, N]`); ties go
/// to the lowest slot index.
pub fn masks_from_attention<T: Scalar>(masks: &Tensor<T>) -> Vec<usize> {
    let k = masks.shape()[0];
    let n = masks.len() / k;
    let d = masks.data();
    (0..n)
        .map(|p| {
            let mut best = 0;
            for s in 1..k {
                if d[s * n + p] > d[best * n + p] {
                    best = s;
                }
            }
            best
        })
        .collect()
}

fn pairs(n: u64) -> i128 {
    (n as i128) * (n as i128 - 1) / 2
}

/// Adjusted Rand index over the pixels where `keep` holds (all when `None`).
/// Two single-cluster or two all-singleton partitions score 1.
pub fn ari_masked(pred: &[usize], truth: &[usize], keep: Option<&[bool]>) -> Result<f64> {
    if pred.len() != truth.len() || keep.is_some_and(|k| k.len() != pred.len()) {
        return Err(Error::Contract("partitions cover different pixel sets".into()));
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    let mut n = 0u64;
    for (i, (&a, &b)) in pred.iter().zip(truth).enumerate() {
        if keep.is_some_and(|k| !k[i]) {
            continue;
        }
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("ARI over an empty pixel set".into()));
    }
    if rows.len() == 1 && cols.len() == 1 {
        return Ok(1.0);
    }
    // Scaled by 2·C(n, 2) so the ratio is formed from exact integers.
    let index: i128 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: i128 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: i128 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    let num = 2 * index * total - 2 * sum_a * sum_b;
    let den = (sum_a + sum_b) * total - 2 * sum_a * sum_b;
    if den == 0 {
        // Only when both partitions are all singletons.
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    ari_masked(pred, truth, None)
}

/// ARI over pixels whose true label differs from `background`.
pub fn fg_ari(pred: &[usize], truth: &[usize], background: usize) -> Result<f64> {
    let keep: Vec<bool> = truth.iter().map(|&t| t != background).collect();
    if !keep.iter().any(|&k| k) {
        return Err(Error::Contract("FG-ARI needs foreground pixels".into()));
    }
    ari_masked(pred, truth, Some(&keep))
}

/// `(iou, dice)`; both 1 when both masks are empty.
pub fn iou_dice(pred: &[bool], truth: &[bool]) -> (f64, f64) {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    if a + b == 0 {
        return (1.0, 1.0);
    }
    let union = a + b - inter;
    (inter as f64 / union as f64, 2.0 * inter as f64 / (a + b) as f64)
}

/// Mean over truth masks of the best IoU against any predicted mask.
pub fn mbo(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<f64> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::Contract("mBO needs predicted and true masks".into()));
    }
    let total: f64 = truth
        .iter()
        .map(|t| pred.iter().map(|p| iou_dice(p, t).0).fold(0.0, f64::max))
        .sum();
    Ok(total / truth.len() as f64)
}

/// Binary masks, one per label value `0..k`.
pub fn label_masks(labels: &[usize], k: usize) -> Vec<Vec<bool>> {
    (0..k).map(|s| labels.iter().map(|&l| l == s).collect()).collect()
}

/// Index of the predicted mask with the largest intersection with
/// `foreground` (ties to the lowest index), and that mask.
pub fn foreground_from_slots(pred: &[Vec<bool>], foreground: &[bool]) -> (usize, Vec<bool>) {
    let mut best = (0, 0usize);
    for (s, m) in pred.iter().enumerate() {
        let inter = m.iter().zip(foreground).filter(|(&a, &b)| a && b).count();
        if inter > best.1 {
            best = (s, inter);
        }
    }
    (best.0, pred[best.0].clone())
}

/// Mean and standard error (sample standard deviation over `√n`; 0 for
/// `n < 2`).
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Named per-image score vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    names: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, value: f64) {
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.values[i].push(value),
            None => {
                self.names.push(name.to_string());
                self.values.push(vec![value]);
            }
        }
    }

    pub fn values(&self, name: &str) -> Option<&[f64]> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&self.values[i])
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.values(name).map(|v| mean_sem(v).0)
    }

    pub fn summary(&self) -> Vec<(String, f64, f64, usize)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| {
                let (m, s) = mean_sem(v);
                (n.clone(), m, s, v.len())
            })
            .collect()
    }

    /// One `name mean sem n` line per metric.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, mean, sem, n) in self.summary() {
            writeln!(out, "{name} {mean:?} {sem:?} {n}").unwrap();
        }
        out
    }

    /// Parses [`MetricsReport::to_text`] output into summary rows.
    pub fn parse_summary(text: &str) -> Result<Vec<(String, f64, f64, usize)>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                let bad = || Error::Contract(format!("bad metrics line {}: '{line}'", i + 1));
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 4 {
                    return Err(bad());
                }
                Ok((
                    f[0].to_string(),
                    f[1].parse().map_err(|_| bad())?,
                    f[2].parse().map_err(|_| bad())?,
                    f[3].parse().map_err(|_| bad())?,
                ))
            })
            .collect()
    }
}
