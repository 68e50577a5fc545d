//! Behaviour-cloning loop: AdamW on the flow-matching loss over demo samples.

use std::time::Instant;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::rng::{normal_tensor, stream};
use crate::numerics::{clip_grad_norm, AdamW, AdamWConfig, Bundle, Graph, Tensor};
use crate::sim::Task;

use super::config::{TrainConfig, Variant};
use super::data::Dataset;
use super::model::{Example, VlaModel};

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl LogRow {
    pub const HEADER: [&'static str; 4] = ["step", "loss", "lr", "grad_norm"];

    pub fn record(&self) -> [String; 4] {
        [self.step.to_string(), self.loss.to_string(), self.lr.to_string(), self.grad_norm.to_string()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub step: usize,
    pub task: Task,
    pub rate: f64,
}

/// Training history. Wall time is kept apart from the rows so logs of equal
/// runs compare equal.
#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    pub evals: Vec<EvalRow>,
    pub wall_seconds: f64,
}

impl PartialEq for RunLog {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.evals == other.evals
    }
}

impl RunLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(LogRow::HEADER).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r.record()).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: VlaModel,
    pub log: RunLog,
    /// Step whose loss or gradient was non-finite; the model then holds the
    /// parameters from before that step.
    pub diverged_at: Option<usize>,
}

/// Prefixes the optimiser may update.
pub fn trainable_allowed(name: &str, geo: bool) -> bool {
    name.starts_with("fuser.")
        || name.starts_with("expert.")
        || name.starts_with("embed.")
        || name.contains(".lora_")
        || (geo && name.starts_with("geo."))
}

/// Names of trainable entries, failing if any lies outside the allowed set.
pub fn trainable_audit(params: &Bundle, geo: bool) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for e in params.entries().iter().filter(|e| e.trainable) {
        if !trainable_allowed(&e.name, geo) {
            return Err(Error::Config(format!("{} is trainable but belongs to a frozen module", e.name)));
        }
        names.push(e.name.clone());
    }
    Ok(names)
}

/// Indices, interpolation times and noise of batch `step`. The draw order
/// does not depend on the variant, so both variants see identical batches.
pub struct Batch {
    pub indices: Vec<usize>,
    pub taus: Vec<f64>,
    pub noises: Vec<Tensor>,
}

pub struct BatchStream {
    rng: crate::numerics::rng::Rng,
    size: usize,
    len: usize,
    shape: [usize; 2],
}

impl BatchStream {
    pub fn new(seed: u64, size: usize, len: usize, shape: [usize; 2]) -> Self {
        BatchStream { rng: stream(seed, "train-batches", &[]), size, len, shape }
    }

    pub fn next_batch(&mut self) -> Batch {
        let indices = (0..self.size).map(|_| self.rng.random_range(0..self.len)).collect();
        let taus = (0..self.size).map(|_| self.rng.random::<f64>()).collect();
        let noises = (0..self.size).map(|_| normal_tensor(&mut self.rng, &self.shape, 1.0)).collect();
        Batch { indices, taus, noises }
    }
}

pub type EvalHook<'a> = &'a mut dyn FnMut(&VlaModel) -> Result<Vec<(Task, f64)>>;

/// Trains `model` on `data`. `sink` sees every logged row as it is produced.
/// `eval`, if given, runs every `n` steps and after the last one.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    mut model: VlaModel,
    sink: &mut dyn FnMut(&LogRow) -> Result<()>,
    mut eval: Option<(usize, EvalHook)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if model.variant != cfg.variant {
        return Err(Error::Config(format!("model is {} but the run is configured for {}", model.variant, cfg.variant)));
    }
    if model.variant == Variant::Fused {
        model.set_geometry_trainable(cfg.unfreeze_geo);
    }
    trainable_audit(&model.params, cfg.unfreeze_geo)?;
    let started = Instant::now();
    let schedule = cfg.schedule();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut batches = BatchStream::new(cfg.seed, cfg.batch_size, data.len(), [cfg.model.expert.horizon, cfg.model.expert.action_dim]);
    let mut log = RunLog::default();
    let every = cfg.log_every.max(1);
    for step in 0..cfg.total_steps {
        let b = batches.next_batch();
        let examples: Vec<Example> = b.indices.iter().map(|&i| data.samples[i].example()).collect();
        let noises: Vec<&Tensor> = b.noises.iter().collect();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let loss = model.loss_graph(&mut g, &p, &examples, &b.taus, &noises)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            log.wall_seconds = started.elapsed().as_secs_f64();
            return Ok(TrainOutcome { model, log, diverged_at: Some(step) });
        }
        g.backward(loss)?;
        let mut grads = p.grads(&g);
        drop(p);
        let grad_norm = clip_grad_norm(&mut grads, cfg.clip);
        let lr = schedule.at(step + 1);
        // a rejected step leaves the parameters untouched
        if opt.step(&mut model.params, &grads, lr).is_err() {
            log.wall_seconds = started.elapsed().as_secs_f64();
            return Ok(TrainOutcome { model, log, diverged_at: Some(step) });
        }
        if step % every == 0 || step + 1 == cfg.total_steps {
            let row = LogRow { step, loss: value, lr, grad_norm };
            sink(&row)?;
            log.rows.push(row);
        }
        if let Some((n, hook)) = eval.as_mut() {
            if (*n > 0 && (step + 1) % *n == 0) || step + 1 == cfg.total_steps {
                for (task, rate) in hook(&model)? {
                    log.evals.push(EvalRow { step: step + 1, task, rate });
                }
            }
        }
    }
    log.wall_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { model, log, diverged_at: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ModelConfig;

    #[test]
    fn audit_accepts_default_split() {
        let m = VlaModel::init(&ModelConfig::default(), Variant::Baseline, 1, None).unwrap();
        let names = trainable_audit(&m.params, false).unwrap();
        assert!(names.iter().any(|n| n.ends_with("lora_b")));
        assert!(names.iter().all(|n| !n.starts_with("backbone.") || n.contains(".lora_")));
        assert!(names.iter().all(|n| !n.starts_with("vision.")));
        let mut bad = m.params.clone();
        bad.set_trainable("backbone.ln_f", true);
        assert!(trainable_audit(&bad, false).is_err());
    }

    #[test]
    fn batch_stream_is_seeded() {
        let mut a = BatchStream::new(3, 4, 10, [8, 4]);
        let mut b = BatchStream::new(3, 4, 10, [8, 4]);
        for _ in 0..3 {
            let (x, y) = (a.next_batch(), b.next_batch());
            assert_eq!(x.indices, y.indices);
            assert_eq!(x.taus, y.taus);
            assert_eq!(x.noises, y.noises);
            assert!(x.taus.iter().all(|t| (0.0..1.0).contains(t)));
        }
    }
}
