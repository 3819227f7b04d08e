//! Optimization loop, checkpoints, evaluation and the ablation harness.
//!
//! A run is fully determined by its [`TrainConfig`]: weights are drawn from
//! `seed`, every sample is generated from a seed derived from `seed`, and the
//! batch drawn at step `s` depends only on `(seed, s)`. Resuming from a
//! checkpoint therefore continues the identical trajectory.

mod ablate;
mod config;
mod optim;

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::datagen::{generate, DataConfig, SamplePair};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::loss::{sequence_loss_var, Target};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{decode_archive, encode_archive, Model};
use crate::scalar::Scalar;
use crate::tensorops::{Graph, Tensor4};

pub use ablate::{ablate, diff, AblationArm, AblationRow, AblationSpec, AblationTable, ABSENT_ARMS};
pub use config::{content_hash, Precision, TrainConfig};
pub use optim::{clip_by_global_norm, global_norm, AdamW, LrSchedule, BETA1, BETA2, EPSILON};

/// Loss above this multiple of the first step's loss counts toward divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive steps above the divergence threshold before aborting.
pub const DIVERGENCE_PATIENCE: usize = 100;
/// Steps during which the dead-parameter audit collects gradients.
pub const AUDIT_STEPS: usize = 10;

/// Column names of the metric log.
pub const LOG_HEADER: &str = "step,loss,epe,px1,fl,wauc";

const HOLDOUT_OFFSET: u64 = 1 << 32;

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator seed of training sample `index` for run seed `seed`.
pub fn train_sample_seed(seed: u64, index: usize) -> u64 {
    mix(seed, index as u64)
}

/// Generator seed of held-out sample `index`; disjoint from the training stream.
pub fn holdout_sample_seed(seed: u64, index: usize) -> u64 {
    mix(seed, HOLDOUT_OFFSET + index as u64)
}

#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub i1: Tensor4<T>,
    pub i2: Tensor4<T>,
    pub gt: FlowField<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn from_pair(p: &SamplePair) -> Self {
        Self {
            i1: p.i1.to_tensor(),
            i2: p.i2.to_tensor(),
            gt: p.gt.cast(),
        }
    }
}

/// Samples held in memory as ready-made tensors.
#[derive(Clone, Debug, Default)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_seeds(cfg: &DataConfig, seeds: impl IntoIterator<Item = u64>) -> Self {
        Self {
            samples: seeds.into_iter().map(|s| Sample::from_pair(&generate(cfg, s))).collect(),
        }
    }

    pub fn train(cfg: &TrainConfig) -> Self {
        Self::from_seeds(&cfg.data, (0..cfg.train_pairs).map(|i| train_sample_seed(cfg.seed, i)))
    }

    pub fn holdout(cfg: &TrainConfig) -> Self {
        Self::from_seeds(&cfg.data, (0..cfg.holdout_pairs).map(|i| holdout_sample_seed(cfg.seed, i)))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacked frames and targets for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor4<T>, Tensor4<T>, Target<T>)> {
        let pick = |f: fn(&Sample<T>) -> &Tensor4<T>| -> Result<Tensor4<T>> {
            Tensor4::stack(&indices.iter().map(|&i| f(&self.samples[i]).clone()).collect::<Vec<_>>())
        };
        let gts: Vec<&FlowField<T>> = indices.iter().map(|&i| &self.samples[i].gt).collect();
        Ok((pick(|s| &s.i1)?, pick(|s| &s.i2)?, Target::from_fields(&gts)?))
    }
}

/// Sample indices of the batch at `step`; distinct whenever the dataset is
/// at least as large as the batch.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0xBA7C_0DE5, step as u64));
    if batch <= n {
        index::sample(&mut rng, n, batch).into_vec()
    } else {
        (0..batch).map(|i| i % n).collect()
    }
}

/// Outcome of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Weighted sequence loss.
    pub loss: f64,
    /// Loss of the final refinement alone.
    pub final_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// The update was skipped because of non-finite gradients.
    pub skipped: bool,
}

/// Metrics of every prediction index over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Entry `i` aggregates prediction `i` (0 is the initial estimate).
    pub per_iteration: Vec<MetricReport>,
    /// Mean clamped `beta2` of each prediction, for mixture losses.
    pub mean_beta2: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn last(&self) -> &MetricReport {
        self.per_iteration.last().expect("at least one prediction")
    }
}

/// Optimizer and bookkeeping that a checkpoint must carry for an exact resume.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    /// Steps completed.
    pub step: usize,
    pub initial_loss: Option<f64>,
    pub streak: usize,
    pub skipped: usize,
    /// Tensors that received a nonzero gradient during the audit window.
    pub alive: Vec<bool>,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self> {
        let model = Model::new(&cfg.model, cfg.loss.kind, cfg.seed)?;
        let opt = AdamW::new(model.params().iter().map(|(_, t)| t.value.shape()), cfg.weight_decay);
        let n = model.params().len();
        Ok(Self {
            model,
            opt,
            step: 0,
            initial_loss: None,
            streak: 0,
            skipped: 0,
            alive: vec![false; n],
        })
    }

    /// Names of tensors that never received a nonzero gradient.
    pub fn dead_parameters(&self) -> Vec<String> {
        self.alive
            .iter()
            .enumerate()
            .filter(|(_, &a)| !a)
            .map(|(i, _)| self.model.params().name(i).to_string())
            .collect()
    }

    pub fn encode(&self, cfg: &TrainConfig) -> Vec<u8> {
        let p = self.model.params();
        let mut tensors = Vec::with_capacity(3 * p.len());
        for (i, (name, t)) in p.iter().enumerate() {
            tensors.push((format!("model/{name}"), &t.value));
            tensors.push((format!("adam_m/{name}"), &self.opt.m[i]));
            tensors.push((format!("adam_v/{name}"), &self.opt.v[i]));
        }
        let meta = json!({
            "kind": "checkpoint",
            "step": self.step,
            "adam_t": self.opt.t,
            "initial_loss_bits": self.initial_loss.map(f64::to_bits),
            "streak": self.streak,
            "skipped": self.skipped,
            "alive": self.alive,
            "config_hash": cfg.hash(),
            "config": cfg.to_toml(),
        });
        encode_archive(&tensors, &meta)
    }

    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        std::fs::write(path, self.encode(cfg)).map_err(|e| Error::io(path, e))
    }

    /// Restore a checkpoint written for exactly this configuration.
    pub fn load(cfg: &TrainConfig, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (meta, tensors) = decode_archive::<T>(&bytes, path)?;
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        };
        if meta["kind"] != "checkpoint" {
            return Err(Error::Format {
                path: path.into(),
                reason: "not a training checkpoint".into(),
            });
        }
        let hash = cfg.hash();
        if meta["config_hash"] != hash.as_str() {
            return Err(Error::Config(format!(
                "checkpoint {} was written for config {}, current config is {hash}",
                path.display(),
                meta["config_hash"]
            )));
        }
        let mut state = Self::fresh(cfg)?;
        let mut weights = Vec::new();
        let names: Vec<String> = state.model.params().names().to_vec();
        let mut slots = vec![[None, None]; names.len()];
        for (name, t) in tensors {
            let (group, rest) = name.split_once('/').ok_or_else(|| corrupt("unprefixed tensor"))?;
            let i = names.iter().position(|n| n == rest).ok_or_else(|| corrupt(&format!("unknown tensor {name}")))?;
            match group {
                "model" => weights.push((rest.to_string(), t)),
                "adam_m" => slots[i][0] = Some(t),
                "adam_v" => slots[i][1] = Some(t),
                _ => return Err(corrupt(&format!("unknown tensor group {group}"))),
            }
        }
        state.model.params_mut().load(weights)?;
        for (i, [m, v]) in slots.into_iter().enumerate() {
            state.opt.m[i] = m.ok_or_else(|| corrupt("missing first moment"))?;
            state.opt.v[i] = v.ok_or_else(|| corrupt("missing second moment"))?;
        }
        let num = |k: &str| meta[k].as_u64().ok_or_else(|| corrupt(&format!("missing {k}")));
        state.step = num("step")? as usize;
        state.opt.t = num("adam_t")?;
        state.streak = num("streak")? as usize;
        state.skipped = num("skipped")? as usize;
        state.initial_loss = meta["initial_loss_bits"].as_u64().map(f64::from_bits);
        state.alive = serde_json::from_value(meta["alive"].clone()).map_err(|_| corrupt("missing alive flags"))?;
        if state.alive.len() != names.len() {
            return Err(corrupt("alive flags do not match the model"));
        }
        Ok(state)
    }
}

/// Load model weights from a checkpoint or a bare weights archive.
pub fn load_model_weights<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<serde_json::Value> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, tensors) = decode_archive::<T>(&bytes, path)?;
    let weights = if meta["kind"] == "checkpoint" {
        tensors
            .into_iter()
            .filter_map(|(n, t)| n.strip_prefix("model/").map(|s| (s.to_string(), t)))
            .collect()
    } else {
        tensors
    };
    model.params_mut().load(weights)?;
    Ok(meta)
}

fn embedded_config(meta: &serde_json::Value, path: &Path) -> Result<TrainConfig> {
    match (&meta["kind"], meta["config"].as_str()) {
        (k, Some(text)) if k == "checkpoint" => TrainConfig::from_toml(text),
        _ => Err(Error::Format {
            path: path.into(),
            reason: "not a training checkpoint".into(),
        }),
    }
}

/// The training configuration recorded in a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<TrainConfig> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, _) = decode_archive::<f32>(&bytes, path)?;
    embedded_config(&meta, path)
}

/// Rebuild the model recorded in a checkpoint, with its training configuration.
pub fn load_checkpoint_model<T: Scalar>(path: &Path) -> Result<(Model<T>, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, tensors) = decode_archive::<T>(&bytes, path)?;
    let cfg = embedded_config(&meta, path)?;
    let mut model = Model::new(&cfg.model, cfg.loss.kind, cfg.seed)?;
    let weights = tensors
        .into_iter()
        .filter_map(|(n, t)| n.strip_prefix("model/").map(|s| (s.to_string(), t)))
        .collect();
    model.params_mut().load(weights)?;
    Ok((model, cfg))
}

/// Final summary of a run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub skipped: usize,
    pub final_eval: EvalReport,
    pub history: Vec<StepRecord>,
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub state: TrainState<T>,
    pub train_set: Dataset<T>,
    pub holdout_set: Dataset<T>,
    hash: String,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = TrainState::fresh(config)?;
        Ok(Self::with_state(config, state))
    }

    /// Continue from a checkpoint of the same configuration.
    pub fn resume(config: &TrainConfig, path: &Path) -> Result<Self> {
        config.validate()?;
        let state = TrainState::load(config, path)?;
        Ok(Self::with_state(config, state))
    }

    fn with_state(config: &TrainConfig, state: TrainState<T>) -> Self {
        Self {
            config: config.clone(),
            state,
            train_set: Dataset::train(config),
            holdout_set: Dataset::holdout(config),
            hash: config.hash(),
        }
    }

    /// Replace the weights with those of another run; optimizer moments and
    /// step count stay fresh.
    pub fn init_from(&mut self, path: &Path) -> Result<()> {
        if self.state.step != 0 {
            return Err(Error::InvalidArgument("init_from after training started".into()));
        }
        load_model_weights(&mut self.state.model, path).map(|_| ())
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn model(&self) -> &Model<T> {
        &self.state.model
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.state.save(path, &self.config)
    }

    /// One optimization step on the batch determined by `(seed, step)`.
    pub fn step(&mut self) -> Result<StepRecord> {
        let cfg = &self.config;
        let step = self.state.step;
        let idx = batch_indices(cfg.seed, step, cfg.batch, self.train_set.len());
        let (a, b, target) = self.train_set.batch(&idx)?;
        let model = &self.state.model;
        let mut g = Graph::new();
        let v = model.params().bind(&mut g, true);
        let (x, y) = (g.constant(a), g.constant(b));
        let preds = model.forward(&mut g, &v, x, y, model.config().iterations)?;
        let losses = model.prediction_losses(&mut g, &preds, &target, &cfg.loss)?;
        let total = sequence_loss_var(&mut g, &losses, cfg.loss.gamma)?;
        let loss = g.value(total).data()[0].f64();
        let final_loss = g.value(*losses.last().expect("at least one loss")).data()[0].f64();
        let grads = g.backward_scalar(total)?;
        let mut gs: Vec<Tensor4<T>> = v
            .iter()
            .zip(model.params().iter())
            .map(|(&var, (_, t))| grads.get(var).cloned().unwrap_or_else(|| Tensor4::zeros(t.value.shape())))
            .collect();
        if step < AUDIT_STEPS {
            for (alive, gr) in self.state.alive.iter_mut().zip(&gs) {
                *alive |= gr.data().iter().any(|&x| x != T::zero());
            }
        }
        let grad_norm = clip_by_global_norm(&mut gs, cfg.clip_norm);
        let lr = cfg.lr_schedule.rate(cfg.lr, step, cfg.steps);
        let skipped = !grad_norm.is_finite();
        if skipped {
            self.state.skipped += 1;
        } else {
            let grads: Vec<&Tensor4<T>> = gs.iter().collect();
            let mut weights: Vec<&mut Tensor4<T>> =
                self.state.model.params_mut().iter_mut().map(|(_, t)| &mut t.value).collect();
            self.state.opt.step(&mut weights, &grads, lr)?;
        }
        self.guard(step, loss)?;
        self.state.step += 1;
        Ok(StepRecord {
            step,
            loss,
            final_loss,
            grad_norm,
            lr,
            skipped,
        })
    }

    fn guard(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.state.initial_loss.get_or_insert(loss);
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial {
            self.state.streak += 1;
        } else {
            self.state.streak = 0;
        }
        if self.state.streak >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged {
                step,
                loss,
                initial,
                streak: self.state.streak,
            });
        }
        Ok(())
    }

    /// The held-out set when present, else the training set.
    pub fn eval_set(&self) -> &Dataset<T> {
        if self.holdout_set.is_empty() {
            &self.train_set
        } else {
            &self.holdout_set
        }
    }

    /// Train to `config.steps`, appending one log row per step (metrics on
    /// evaluation steps) and saving checkpoints to `checkpoint` if given.
    pub fn run(&mut self, log: &mut dyn Write, checkpoint: Option<&Path>) -> Result<TrainReport> {
        self.run_until(log, checkpoint, self.config.steps)
    }

    /// As [`Trainer::run`] but halts once `stop` steps are complete, saving a
    /// checkpoint there; resuming from it continues the same run.
    pub fn run_until(&mut self, log: &mut dyn Write, checkpoint: Option<&Path>, stop: usize) -> Result<TrainReport> {
        let total = self.config.steps;
        let stop = stop.min(total);
        let mut history = Vec::with_capacity(stop.saturating_sub(self.state.step));
        let mut last_eval = None;
        while self.state.step < stop {
            let rec = self.step()?;
            history.push(rec);
            let done = self.state.step;
            let every = self.config.eval_every;
            let metrics = if (every > 0 && done.is_multiple_of(every)) || done == total {
                let r = evaluate_model(&self.state.model, self.eval_set(), self.config.batch)?;
                let row = *r.last();
                last_eval = Some(r);
                Some(row)
            } else {
                None
            };
            write_log_row(log, &rec, metrics.as_ref())?;
            let ck = self.config.checkpoint_every;
            if let Some(path) = checkpoint {
                if (ck > 0 && done.is_multiple_of(ck)) || done == stop {
                    self.save_checkpoint(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            if history.is_empty() {
                self.save_checkpoint(path)?;
            }
        }
        let final_eval = match last_eval {
            Some(r) => r,
            None => evaluate_model(&self.state.model, self.eval_set(), self.config.batch)?,
        };
        Ok(TrainReport {
            steps: self.state.step,
            skipped: self.state.skipped,
            final_eval,
            history,
        })
    }
}

fn write_log_row(log: &mut dyn Write, rec: &StepRecord, m: Option<&MetricReport>) -> Result<()> {
    let io = |e| Error::io(Path::new("<metric log>"), e);
    match m {
        Some(m) => writeln!(log, "{},{},{},{},{},{}", rec.step, rec.loss, m.epe, m.px1, m.fl_all, m.wauc),
        None => writeln!(log, "{},{},,,,", rec.step, rec.loss),
    }
    .map_err(io)
}

/// Metrics of every prediction index of `model` over `data`, in batches of
/// `batch` samples, at the model's training iteration count.
pub fn evaluate_model<T: Scalar>(model: &Model<T>, data: &Dataset<T>, batch: usize) -> Result<EvalReport> {
    evaluate_at(model, data, batch, model.config().iterations)
}

/// As [`evaluate_model`] with an explicit number of refinements.
pub fn evaluate_at<T: Scalar>(model: &Model<T>, data: &Dataset<T>, batch: usize, iters: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation over an empty dataset".into()));
    }
    let mut reports: Vec<Vec<MetricReport>> = vec![Vec::new(); iters + 1];
    let mut beta = vec![(0.0, 0usize); iters + 1];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (a, b, _) = data.batch(chunk)?;
        let mut g = Graph::new();
        let v = model.params().bind(&mut g, false);
        let (x, y) = (g.constant(a), g.constant(b));
        let preds = model.forward(&mut g, &v, x, y, iters)?;
        for (k, p) in preds.iter().enumerate() {
            let flows = g.value(p.flow);
            for (j, &i) in chunk.iter().enumerate() {
                let pred = FlowField::from_tensor(flows.batch_item(j))?;
                let gt = &data.samples[i].gt;
                if gt.n_valid() > 0 {
                    reports[k].push(evaluate(&pred, gt)?);
                }
            }
            if let Some(out) = model.output_batch(&g, p)? {
                for m in out {
                    beta[k].0 += m.mean_beta2();
                    beta[k].1 += 1;
                }
            }
        }
    }
    let per_iteration = reports.iter().map(|r| MetricReport::aggregate(r)).collect::<Result<Vec<_>>>()?;
    let mean_beta2 = beta.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect();
    Ok(EvalReport {
        per_iteration,
        mean_beta2,
    })
}
