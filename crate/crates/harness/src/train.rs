//! Outer training loop with JSONL logging, periodic evaluation and
//! checkpointing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use slp_core::model::Model;
use slp_core::nn::ParamStore;
use slp_core::optim::{clip_grad_norm, Adam};
use slp_core::scenegen::{BatchIterator, Dataset};
use slp_core::slot_attention::InitMode;
use slp_core::slp::AlphaState;
use slp_core::{Graph, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::HarnessError;
use crate::evaluate::{check_compatible, evaluate};

/// Offset of the training-noise seed from the run seed.
const NOISE_SEED_SALT: u64 = 0x005E_ED0F_5107;

pub const LOG_FILE: &str = "log.jsonl";
pub const TRACE_FILE: &str = "slp_trace.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.slpc";
pub const ABORT_FILE: &str = "abort.json";

/// Scalars recorded for one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub batch: Vec<usize>,
    /// Inner-loop states of the first image, one per slot iteration.
    pub trace: Vec<AlphaState<f64>>,
}

pub fn load_dataset(path: &Path) -> Result<Dataset, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::Config(format!(
            "dataset {} does not exist",
            path.display()
        )));
    }
    Dataset::read(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

/// Builds the model for `config` on a dataset of the given image side.
pub fn build_model(config: &RunConfig, dataset: &Dataset) -> Result<(Model, ParamStore<f64>), HarnessError> {
    let s = &dataset.spec;
    if s.height != s.width {
        return Err(HarnessError::Config(format!(
            "images must be square, got {}x{}",
            s.height, s.width
        )));
    }
    if s.max_objects + 1 > config.model.num_slots {
        return Err(HarnessError::Config(format!(
            "dataset has up to {} objects; model.num_slots must be at least {}",
            s.max_objects,
            s.max_objects + 1
        )));
    }
    let mut params = ParamStore::new();
    let model = Model::new(&mut params, config.model_config(s.height)?, config.training.seed)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok((model, params))
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub params: ParamStore<f64>,
    pub optimizer: Adam<f64>,
    pub step: u64,
    pub dataset: Dataset,
    batches: BatchIterator,
}

impl Trainer {
    pub fn new(config: RunConfig, dataset: Dataset) -> Result<Self, HarnessError> {
        config.validate()?;
        let (model, params) = build_model(&config, &dataset)?;
        check_compatible(&model, &dataset)?;
        let batches = BatchIterator::new(dataset.len(), config.training.batch_size, config.training.seed)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let optimizer = Adam::new(&params);
        Ok(Self {
            config,
            model,
            params,
            optimizer,
            step: 0,
            dataset,
            batches,
        })
    }

    /// Continues from `checkpoint`, which must come from an equivalent config.
    pub fn resume(config: RunConfig, dataset: Dataset, checkpoint: &Checkpoint) -> Result<Self, HarnessError> {
        if checkpoint.config.trajectory_hash() != config.trajectory_hash() {
            return Err(HarnessError::Config(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        let mut t = Self::new(config, dataset)?;
        t.params
            .load_from(&checkpoint.params)
            .map_err(|e| HarnessError::Config(format!("checkpoint parameters: {e}")))?;
        t.optimizer = checkpoint.optimizer.clone();
        t.step = checkpoint.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Slot noise for a step; a pure function of (seed, step).
    fn noise(&self, batch: usize) -> Option<Tensor<f64>> {
        if self.model.config.slots.init_mode != InitMode::Gaussian {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.training.seed ^ NOISE_SEED_SALT);
        rng.set_stream(self.step);
        Some(self.model.sample_noise(&mut rng, batch))
    }

    /// One optimizer step. A non-finite loss leaves the parameters untouched.
    pub fn train_step(&mut self, trace: bool) -> Result<StepRecord, HarnessError> {
        let batch = self.batches.batch_at(self.step);
        let images = self.dataset.images::<f64>(&batch)?;
        let noise = self.noise(batch.len());
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(images);
        let out = self.model.forward(&mut g, &p, x, noise.as_ref(), trace)?;
        let loss = g.value(out.loss).item();
        if !loss.is_finite() {
            let alpha = out.slots.alpha.map(|a| g.value(a).clone());
            let dump = self.dump_abort(&batch, loss, alpha.as_ref())?;
            return Err(HarnessError::NonFinite { step: self.step, dump });
        }
        g.backward(out.loss)?;
        let mut grads = self.params.grads(&g, &p);
        let grad_norm = clip_grad_norm(&mut grads, self.config.optimizer.clip_norm);
        let lr = self.config.schedule().at(self.step);
        self.optimizer.update(&mut self.params, &grads, lr)?;
        let record = StepRecord {
            step: self.step,
            loss,
            lr,
            grad_norm,
            batch,
            trace: out
                .alpha_states
                .into_iter()
                .filter_map(|mut images| (!images.is_empty()).then(|| images.swap_remove(0)))
                .collect(),
        };
        self.step += 1;
        Ok(record)
    }

    fn dump_abort(&self, batch: &[usize], loss: f64, alpha: Option<&Tensor<f64>>) -> Result<String, HarnessError> {
        let stats = |t: &Tensor<f64>| {
            let d = t.data();
            json!({
                "min": d.iter().cloned().fold(f64::INFINITY, f64::min),
                "max": d.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                "mean_abs": d.iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64,
                "finite": t.all_finite(),
            })
        };
        let alpha0 = self.model.alpha0.map(|id| stats(self.params.get(id)));
        let report = json!({
            "step": self.step,
            "loss": format!("{loss}"),
            "batch_indices": batch,
            "alpha": alpha.map(stats),
            "alpha0": alpha0,
        });
        let dir = &self.config.output.dir;
        std::fs::create_dir_all(dir)?;
        let path = dir.join(ABORT_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&report).unwrap())?;
        Ok(path.display().to_string())
    }
}

/// Line-delimited JSON log of training and evaluation events.
pub struct RunLog {
    log: BufWriter<File>,
    trace: Option<BufWriter<File>>,
    start: Instant,
}

impl RunLog {
    pub fn create(dir: &Path, trace: bool) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            log: BufWriter::new(File::create(dir.join(LOG_FILE))?),
            trace: if trace {
                Some(BufWriter::new(File::create(dir.join(TRACE_FILE))?))
            } else {
                None
            },
            start: Instant::now(),
        })
    }

    fn line(&mut self, mut value: serde_json::Value) -> Result<(), HarnessError> {
        value["wall_time"] = json!(self.start.elapsed().as_secs_f64());
        writeln!(self.log, "{value}")?;
        // Flushed per line so long runs can be followed while they train.
        self.log.flush()?;
        Ok(())
    }

    pub fn train(&mut self, r: &StepRecord) -> Result<(), HarnessError> {
        self.line(json!({
            "kind": "train",
            "step": r.step,
            "loss": r.loss,
            "lr": r.lr,
            "grad_norm": r.grad_norm,
        }))?;
        if let Some(trace) = &mut self.trace {
            for (iteration, state) in r.trace.iter().enumerate() {
                let terms = |t: &slp_core::slp::LossTerms| json!([t.distinct, t.norm, t.total]);
                let line = json!({
                    "step": r.step,
                    "iteration": iteration,
                    "image": r.batch[0],
                    "t_spat": state.t_spat,
                    "loss_trace": state.loss_trace.iter().map(terms).collect::<Vec<_>>(),
                    "final": state.final_loss.as_ref().map(terms),
                    "means": state.final_stats.as_ref().map(|s| s.means.clone()),
                    "variances": state.final_stats.as_ref().map(|s| s.variances.clone()),
                });
                writeln!(trace, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn eval(&mut self, step: u64, report: &slp_core::metrics::MetricsReport) -> Result<(), HarnessError> {
        let metrics: serde_json::Map<String, serde_json::Value> = report
            .summary()
            .into_iter()
            .map(|(name, mean, sem, n)| (name, json!({"mean": mean, "sem": sem, "n": n})))
            .collect();
        self.line(json!({"kind": "eval", "step": step, "metrics": metrics}))
    }

    pub fn flush(&mut self) -> Result<(), HarnessError> {
        self.log.flush()?;
        if let Some(t) = &mut self.trace {
            t.flush()?;
        }
        Ok(())
    }
}

/// Outcome of [`run_training`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub checkpoint_path: PathBuf,
}

/// Trains until `training.steps`, logging into the output directory, and
/// writes the final checkpoint. Starts from `resume` when given.
pub fn run_training(
    config: RunConfig,
    dataset: Dataset,
    eval_dataset: Option<&Dataset>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome, HarnessError> {
    let dir = config.output.dir.clone();
    let mut trainer = match resume {
        Some(c) => Trainer::resume(config, dataset, c)?,
        None => Trainer::new(config, dataset)?,
    };
    let cfg = trainer.config.clone();
    let tracing = cfg.slp.trace && cfg.slp.enabled;
    let mut log = RunLog::create(&dir, tracing)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    while trainer.step < cfg.training.steps {
        let record = match trainer.train_step(tracing) {
            Ok(r) => r,
            Err(e) => {
                log.flush()?;
                return Err(e);
            }
        };
        if record.step % cfg.training.log_interval == 0 {
            log.train(&record)?;
        }
        let done = trainer.step;
        if cfg.training.eval_interval > 0 && done % cfg.training.eval_interval == 0 {
            if let Some(ds) = eval_dataset {
                let report = evaluate(
                    &trainer.model,
                    &trainer.params,
                    ds,
                    cfg.eval.max_images,
                    cfg.eval.batch_size,
                    cfg.training.seed,
                )?;
                log.eval(done, &report)?;
            }
        }
        if cfg.training.checkpoint_interval > 0 && done % cfg.training.checkpoint_interval == 0 {
            trainer.checkpoint().save(&checkpoint_path)?;
        }
    }
    log.flush()?;
    trainer.checkpoint().save(&checkpoint_path)?;
    Ok(TrainOutcome {
        trainer,
        checkpoint_path,
    })
}

/// Drops the `wall_time` field from every log line.
pub fn strip_wall_time(log: &str) -> String {
    log.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).expect("log lines are JSON");
            if let Some(o) = v.as_object_mut() {
                o.remove("wall_time");
            }
            v.to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
}
