//! Grid sweeps over one or two config axes, several seeds per cell.

use std::fmt::Write as _;

use slp_core::metrics::mean_sem;
use slp_core::scenegen::Dataset;

use crate::config::RunConfig;
use crate::error::HarnessError;
use crate::evaluate::evaluate;
use crate::train::run_training;

/// `section.key` and the values it takes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl Axis {
    /// Parses `section.key=v1,v2,...`.
    pub fn parse(spec: &str) -> Result<Self, HarnessError> {
        let bad = || HarnessError::Config(format!("sweep axis '{spec}' is not section.key=v1,v2,..."));
        let (key, values) = spec.split_once('=').ok_or_else(bad)?;
        if !key.contains('.') {
            return Err(bad());
        }
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        if values.iter().any(|v| v.is_empty()) {
            return Err(bad());
        }
        Ok(Self {
            key: key.to_string(),
            values,
        })
    }

    /// A single-valued axis that changes nothing.
    fn unit() -> Self {
        Self {
            key: String::new(),
            values: vec![String::new()],
        }
    }

    fn assignment(&self, i: usize) -> Option<String> {
        (!self.key.is_empty()).then(|| format!("{}={}", self.key, self.values[i]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    /// Metric mean per seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub sem: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub metric: String,
    pub rows: Axis,
    pub cols: Axis,
    pub cells: Vec<Vec<SweepCell>>,
}

impl SweepTable {
    fn label(&self, r: usize, c: usize) -> String {
        let parts: Vec<String> = [self.rows.assignment(r), self.cols.assignment(c)]
            .into_iter()
            .flatten()
            .collect();
        format!("{}[{}]", self.metric, parts.join(","))
    }

    /// Metrics-report schema: one `name mean sem n` line per cell.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (r, row) in self.cells.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                writeln!(
                    out,
                    "{} {:?} {:?} {}",
                    self.label(r, c),
                    cell.mean,
                    cell.sem,
                    cell.per_seed.len()
                )
                .unwrap();
            }
        }
        out
    }

    /// Human-readable grid of `mean ± sem`.
    pub fn to_grid(&self) -> String {
        let mut out = String::new();
        write!(out, "{:<24}", format!("{} \\ {}", self.rows.key, self.cols.key)).unwrap();
        for v in &self.cols.values {
            write!(out, " {v:>16}").unwrap();
        }
        out.push('\n');
        for (r, row) in self.cells.iter().enumerate() {
            write!(out, "{:<24}", self.rows.values[r]).unwrap();
            for cell in row {
                write!(out, " {:>16}", format!("{:.3} ± {:.3}", cell.mean, cell.sem)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Trains `seeds` runs per grid point (seeds `training.seed + i`), each in
/// its own output subdirectory, and tabulates the evaluation mean of
/// `metric` across seeds.
pub fn sweep(
    base: &RunConfig,
    rows: &Axis,
    cols: Option<&Axis>,
    seeds: usize,
    metric: &str,
    train: &Dataset,
    eval: &Dataset,
) -> Result<SweepTable, HarnessError> {
    if seeds == 0 {
        return Err(HarnessError::Config("sweep needs at least one seed".into()));
    }
    let cols = cols.cloned().unwrap_or_else(Axis::unit);
    let mut cells = Vec::with_capacity(rows.values.len());
    for r in 0..rows.values.len() {
        let mut row = Vec::with_capacity(cols.values.len());
        for c in 0..cols.values.len() {
            let mut per_seed = Vec::with_capacity(seeds);
            for s in 0..seeds {
                let mut overrides: Vec<String> =
                    [rows.assignment(r), cols.assignment(c)].into_iter().flatten().collect();
                overrides.push(format!("training.seed={}", base.training.seed + s as u64));
                let dir = base.output.dir.join(format!("r{r}_c{c}_s{s}"));
                overrides.push(format!("output.dir=\"{}\"", dir.display()));
                let config = base.with_overrides(&overrides)?;
                let outcome = run_training(config.clone(), train.clone(), None, None)?;
                let t = &outcome.trainer;
                let report = evaluate(
                    &t.model,
                    &t.params,
                    eval,
                    config.eval.max_images,
                    config.eval.batch_size,
                    config.training.seed,
                )?;
                std::fs::write(dir.join("metrics.txt"), report.to_text())?;
                let value = report
                    .mean(metric)
                    .ok_or_else(|| HarnessError::Config(format!("metric '{metric}' was not computed")))?;
                per_seed.push(value);
            }
            let (mean, sem) = mean_sem(&per_seed);
            row.push(SweepCell { per_seed, mean, sem });
        }
        cells.push(row);
    }
    Ok(SweepTable {
        metric: metric.to_string(),
        rows: rows.clone(),
        cols,
        cells,
    })
}
