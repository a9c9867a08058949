//! Joint training of the clean and ablated streams.
//!
//! Each step draws the batch for its index, runs [`Model::forward_dual`],
//! sums the two cross-entropies, backpropagates through both streams and the
//! gate projections, clips, and applies AdamW at the cosine-scheduled rate.

pub mod config;
pub mod optim;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use config::{Paths, RunConfig, TrainConfig};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimState};

use crate::data::batches::{eval_batches, make_batches, Batch, BatchStream};
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{Checkpoint, GateRecord, Hook, Model, ModelConfig, NoHook};
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

/// The terms of the training objective.
pub struct LossParts<'t, F: Float> {
    pub total: Var<'t, F>,
    pub clean: Var<'t, F>,
    pub ablated: Var<'t, F>,
}

/// `CE(clean) + weight * CE(ablated)`. When both logits are the same node the
/// cross-entropy is computed once.
pub fn combined_loss<'t, F: Float>(
    clean_logits: Var<'t, F>,
    ablated_logits: Var<'t, F>,
    targets: &[u32],
    weight: f64,
) -> Result<LossParts<'t, F>> {
    if clean_logits.shape() != ablated_logits.shape() {
        return Err(Error::shape(
            "combined_loss",
            format!("{:?} vs {:?}", clean_logits.shape(), ablated_logits.shape()),
        ));
    }
    let clean = clean_logits.cross_entropy(targets)?;
    let ablated = if ablated_logits.id() == clean_logits.id() {
        clean
    } else {
        ablated_logits.cross_entropy(targets)?
    };
    let weighted = if weight == 1.0 {
        ablated
    } else {
        ablated.scale(weight)?
    };
    Ok(LossParts {
        total: clean.add(weighted)?,
        clean,
        ablated,
    })
}

/// Token-weighted mean cross-entropy of the clean path, with `hook` applied.
pub fn mean_cross_entropy<F: Float>(
    model: &Model<F>,
    batches: &[Batch],
    hook: &mut dyn Hook<F>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for b in batches {
        let logits = model.forward_with_hook(&b.inputs, hook)?;
        let (ce, _) = kernels::cross_entropy(&logits, &b.targets)?;
        total += ce.as_f64() * b.targets.len() as f64;
        tokens += b.targets.len();
    }
    if tokens == 0 {
        return Err(Error::InvalidArgument("no evaluation tokens".into()));
    }
    Ok(total / tokens as f64)
}

/// `exp` of the mean clean-path cross-entropy over `batches`.
pub fn evaluate_perplexity<F: Float>(model: &Model<F>, batches: &[Batch]) -> Result<f64> {
    Ok(mean_cross_entropy(model, batches, &mut NoHook)?.exp())
}

/// What one optimizer step did.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Steps completed, including this one.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_clean: f64,
    pub loss_ablated: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub masks: Vec<GateRecord<f32>>,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_clean: f64,
    pub loss_ablated: f64,
    /// Validation perplexity of the clean path, or `exp(loss_clean)` without
    /// a validation split.
    pub ppl: f64,
    pub grad_norm: f64,
}

/// Callbacks invoked by [`Trainer::run`].
pub trait TrainObserver {
    fn on_step(&mut self, _outcome: &StepOutcome, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }

    fn on_eval(&mut self, _record: &MetricsRecord, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub struct Trainer {
    model: Model<f32>,
    optim: OptimState<f32>,
    cfg: TrainConfig,
    adam: AdamWConfig,
    stream: BatchStream,
    valid: Vec<Batch>,
    step: u64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, docs: &[String]) -> Result<Self> {
        let model = Model::new(model_cfg)?;
        let optim = OptimState::new(model.params().tensors());
        Self::assemble(model, optim, 0, cfg, docs)
    }

    /// Continues from `ckpt`, which must carry optimizer state.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig, docs: &[String]) -> Result<Self> {
        let model = ckpt.model()?;
        let optim = ckpt
            .optimizer
            .ok_or_else(|| Error::InvalidArgument("checkpoint has no optimizer state".into()))?;
        Self::assemble(model, optim, ckpt.step, cfg, docs)
    }

    fn assemble(
        model: Model<f32>,
        optim: OptimState<f32>,
        step: u64,
        cfg: TrainConfig,
        docs: &[String],
    ) -> Result<Self> {
        cfg.validate(model.config())?;
        let split = make_batches(docs, cfg.seq_len, cfg.batch_size, cfg.seed, cfg.valid_fraction)?;
        let mut valid = split.valid;
        if cfg.eval_windows > 0 {
            valid.truncate(cfg.eval_windows);
        }
        Ok(Self {
            adam: cfg.adamw(),
            valid: eval_batches(&valid, cfg.batch_size),
            stream: split.train,
            model,
            optim,
            cfg,
            step,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    pub fn validation_batches(&self) -> &[Batch] {
        &self.valid
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, Some(self.optim.clone()), self.step)
    }

    /// The batch the next call to [`Trainer::step`] will train on.
    pub fn next_batch(&mut self) -> Batch {
        self.stream.batch_at(self.step)
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let index = self.step;
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged {
                step: index,
                message: format!("non-finite value in {op}"),
            },
            other => other,
        };
        let batch = self.stream.batch_at(index);
        let lr = cosine_lr(index, self.cfg.total_steps, self.cfg.lr, self.cfg.lr_min);

        let tape = Tape::new();
        let p = self.model.bind(&tape);
        let out = self
            .model
            .forward_dual(&tape, &p, &batch.inputs)
            .map_err(diverged)?;
        let parts = combined_loss(
            out.clean_logits,
            out.ablated_logits,
            &batch.targets,
            self.cfg.ablated_loss_weight,
        )
        .map_err(diverged)?;
        let loss = parts.total.value().item()?.as_f64();
        let loss_clean = parts.clean.value().item()?.as_f64();
        let loss_ablated = parts.ablated.value().item()?.as_f64();
        let masks = out.masks;
        let mut grads = tape.backward(parts.total).map_err(diverged)?;
        let mut g: Vec<Tensor<f32>> = p
            .iter()
            .zip(self.model.params().tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        drop(tape);

        let stats = adamw_step(
            self.model.params_mut().tensors_mut(),
            &mut g,
            &mut self.optim,
            lr,
            &self.adam,
        )
        .map_err(diverged)?;
        self.step += 1;
        Ok(StepOutcome {
            step: self.step,
            lr,
            loss,
            loss_clean,
            loss_ablated,
            grad_norm: stats.grad_norm,
            clipped_norm: stats.clipped_norm,
            masks,
        })
    }

    /// Clean-path validation perplexity, if there is a validation split.
    pub fn validation_perplexity(&self) -> Result<Option<f64>> {
        if self.valid.is_empty() {
            return Ok(None);
        }
        evaluate_perplexity(&self.model, &self.valid).map(Some)
    }

    fn record(&self, o: &StepOutcome) -> Result<MetricsRecord> {
        let ppl = match self.validation_perplexity()? {
            Some(p) => p,
            None => o.loss_clean.exp(),
        };
        Ok(MetricsRecord {
            step: o.step,
            lr: o.lr,
            loss: o.loss,
            loss_clean: o.loss_clean,
            loss_ablated: o.loss_ablated,
            ppl,
            grad_norm: o.grad_norm,
        })
    }

    /// Trains until `total_steps`, evaluating every `eval_interval` steps and
    /// after the last one.
    pub fn run(&mut self, observer: &mut dyn TrainObserver) -> Result<()> {
        self.run_until(self.cfg.total_steps, observer)
    }

    pub fn run_until(&mut self, until: u64, observer: &mut dyn TrainObserver) -> Result<()> {
        let until = until.min(self.cfg.total_steps);
        while self.step < until {
            let outcome = self.step()?;
            observer.on_step(&outcome, self)?;
            if outcome.step % self.cfg.eval_interval == 0 || outcome.step == self.cfg.total_steps {
                let record = self.record(&outcome)?;
                observer.on_eval(&record, self)?;
            }
        }
        Ok(())
    }
}

/// Writes `metrics.jsonl`, periodic `step-N.sabt` checkpoints and
/// `final.sabt` under one directory.
pub struct RunOutput {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

pub const FINAL_CHECKPOINT: &str = "final.sabt";
pub const METRICS_FILE: &str = "metrics.jsonl";

impl RunOutput {
    /// Opens `dir/metrics.jsonl`, appending when `append` is set.
    pub fn create(dir: impl AsRef<Path>, append: bool) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(METRICS_FILE);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir,
            metrics: BufWriter::new(file),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn finish(&mut self, trainer: &Trainer) -> Result<PathBuf> {
        let path = self.dir.join(FINAL_CHECKPOINT);
        trainer.checkpoint().save(&path)?;
        self.flush()?;
        Ok(path)
    }

    fn flush(&mut self) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        self.metrics.flush().map_err(|e| Error::io(path, e))
    }
}

impl TrainObserver for RunOutput {
    fn on_step(&mut self, outcome: &StepOutcome, trainer: &Trainer) -> Result<()> {
        let every = trainer.config().checkpoint_interval;
        if every > 0 && outcome.step.is_multiple_of(every) && outcome.step < trainer.config().total_steps {
            trainer
                .checkpoint()
                .save(self.dir.join(format!("step-{}.sabt", outcome.step)))?;
        }
        Ok(())
    }

    fn on_eval(&mut self, record: &MetricsRecord, _trainer: &Trainer) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        self.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_stories;
    use crate::model::AblationMode;

    fn tiny(mode: AblationMode) -> (ModelConfig, TrainConfig, Vec<String>) {
        let mut m = ModelConfig::desk(mode, 2);
        m.d_model = 16;
        m.d_mlp = 32;
        m.n_layers = 1;
        m.n_heads = 2;
        m.k_attn = 1;
        m.max_pos = 16;
        let t = TrainConfig {
            total_steps: 6,
            batch_size: 2,
            seq_len: 16,
            eval_interval: 3,
            eval_windows: 4,
            ..TrainConfig::default()
        };
        (m, t, synth_stories(0, 4000))
    }

    #[test]
    fn uniform_logits_give_two_ln_v() {
        let tape = Tape::<f64>::new();
        let logits = tape.param(Tensor::zeros([1, 2, 257]));
        let other = tape.param(Tensor::zeros([1, 2, 257]));
        let parts = combined_loss(logits, other, &[3, 9], 1.0).unwrap();
        let v = parts.total.value().item().unwrap();
        assert!((v - 2.0 * 257f64.ln()).abs() < 1e-12);
        assert!((2.0 * 257f64.ln() - 11.098).abs() < 1e-3);
    }

    #[test]
    fn none_mode_loss_is_twice_clean() {
        let (m, t, docs) = tiny(AblationMode::None);
        let mut tr = Trainer::new(m, t, &docs).unwrap();
        for _ in 0..3 {
            let o = tr.step().unwrap();
            assert_eq!(o.loss, 2.0 * o.loss_clean);
            assert!(o.masks.is_empty());
        }
    }

    #[test]
    fn gates_and_base_params_both_move() {
        let (m, t, docs) = tiny(AblationMode::Local);
        let mut tr = Trainer::new(m, t, &docs).unwrap();
        let before = tr.model().params().clone();
        tr.run(&mut ()).unwrap();
        let after = tr.model().params();
        for name in ["gate.0.mlp.w", "gate.0.attn.w", "h.0.mlp.fc.w", "wte"] {
            assert_ne!(before.get(name), after.get(name), "{name} did not change");
        }
    }

    #[test]
    fn resume_reproduces_the_next_step() {
        let (m, t, docs) = tiny(AblationMode::Global);
        let mut full = Trainer::new(m.clone(), t.clone(), &docs).unwrap();
        full.run_until(3, &mut ()).unwrap();
        let bytes = full.checkpoint().to_bytes().unwrap();
        let expected = full.step().unwrap();

        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let mut resumed = Trainer::resume(ckpt, t, &docs).unwrap();
        assert_eq!(resumed.step_count(), 3);
        let got = resumed.step().unwrap();
        assert_eq!(got.loss.to_bits(), expected.loss.to_bits());
        assert_eq!(resumed.model().params(), full.model().params());
    }

    #[test]
    fn run_output_writes_metrics_and_final() {
        let dir = tempfile::tempdir().unwrap();
        let (m, t, docs) = tiny(AblationMode::None);
        let mut tr = Trainer::new(m, t, &docs).unwrap();
        let mut out = RunOutput::create(dir.path(), false).unwrap();
        tr.run(&mut out).unwrap();
        out.finish(&tr).unwrap();
        let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1]["step"], 6);
        for key in ["lr", "loss_clean", "loss_ablated", "ppl"] {
            assert!(lines[0].get(key).is_some());
        }
        assert!(Checkpoint::load(dir.path().join(FINAL_CHECKPOINT)).is_ok());
    }
}
