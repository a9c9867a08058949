use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use selfablate::analysis::circuit::discover_circuit;
use selfablate::analysis::ioi::{generate_ioi, load_prompts, save_prompts, IoiPools};
use selfablate::analysis::metrics::{activation_l1, weight_l1};
use selfablate::analysis::record::{record_activations, ActivationRecord};
use selfablate::analysis::sae::{ce_score, sae_l0, sae_train, Sae, SaeConfig};
use selfablate::data::batches::{token_stream, windows};
use selfablate::data::synth::synth_corpus_text;
use selfablate::data::{eval_batches, load_corpus, Batch};
use selfablate::model::{export_standard, Checkpoint};
use selfablate::train::{
    evaluate_perplexity, MetricsRecord, RunConfig, RunOutput, StepOutcome, TrainObserver, Trainer,
    FINAL_CHECKPOINT, METRICS_FILE,
};
use selfablate::{Error, Result};
use serde_json::{json, Value};

use crate::manifest::{InputFile, RunManifest, Seeds};
use crate::{Command, EvalArgs, RecordArgs, SaeCommand, TrainArgs};

/// 2 for anything the caller can fix by changing flags or config, 1 otherwise.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

fn emit(v: Value) -> Result<()> {
    println!("{}", serde_json::to_string(&v)?);
    Ok(())
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Export { ckpt, out } => export(&ckpt, &out),
        Command::Record(a) => record(a),
        Command::Sae(SaeCommand::Train {
            record,
            out,
            preset,
            steps,
            seed,
            log,
        }) => {
            let mut cfg = match preset.as_str() {
                "desk" => SaeConfig::desk(),
                "reference" => SaeConfig::reference(),
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown SAE preset `{other}` (expected desk or reference)"
                    )))
                }
            };
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.seed = seed.unwrap_or(cfg.seed);
            sae_train_cmd(&record, &out, &cfg, log.as_deref())
        }
        Command::Sae(SaeCommand::Eval {
            ckpt,
            sae,
            data,
            seq_len,
            batch_size,
            max_windows,
        }) => sae_eval(&ckpt, &sae, &data, seq_len, batch_size, max_windows),
        Command::IoiGen { n, seed, out, pools } => {
            let pools = match pools {
                Some(p) => IoiPools::from_file(p)?,
                None => IoiPools::default(),
            };
            let prompts = generate_ioi(n, seed, &pools)?;
            save_prompts(&prompts, &out)?;
            emit(json!({"path": out, "n": n, "seed": seed}))
        }
        Command::Circuit {
            ckpt,
            prompts,
            tau,
            out,
        } => {
            let model = Checkpoint::load(&ckpt)?.model()?;
            let prompts = load_prompts(&prompts)?;
            let graph = discover_circuit(&model, &prompts, tau)?;
            graph.save(&out)?;
            let dot = out.with_extension("dot");
            std::fs::write(&dot, graph.to_dot()).map_err(|e| Error::io(&dot, e))?;
            emit(json!({
                "tau": graph.tau,
                "edge_count": graph.edge_count,
                "total_edges": graph.edges.len(),
                "kl": graph.kl,
                "graph": out,
                "dot": dot,
            }))
        }
        Command::Metrics(a) => metrics(a),
        Command::GenCorpus { out, bytes, seed } => {
            let text = synth_corpus_text(seed, bytes);
            std::fs::write(&out, &text).map_err(|e| Error::io(&out, e))?;
            emit(json!({"path": out, "bytes": text.len(), "seed": seed}))
        }
    }
}

/// Echoes eval records to stderr on top of the run's file output.
struct Progress {
    out: RunOutput,
    last: Option<MetricsRecord>,
}

impl TrainObserver for Progress {
    fn on_step(&mut self, outcome: &StepOutcome, trainer: &Trainer) -> Result<()> {
        self.out.on_step(outcome, trainer)
    }

    fn on_eval(&mut self, r: &MetricsRecord, trainer: &Trainer) -> Result<()> {
        eprintln!(
            "step {:>6}  loss {:.4}  clean {:.4}  ablated {:.4}  ppl {:.3}  lr {:.2e}",
            r.step, r.loss, r.loss_clean, r.loss_ablated, r.ppl, r.lr
        );
        self.last = Some(r.clone());
        self.out.on_eval(r, trainer)
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let docs = load_corpus(&cfg.paths.corpus)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        seeds: Seeds {
            model: cfg.model.seed,
            data: cfg.train.seed,
        },
        corpus: InputFile::hash(&cfg.paths.corpus)?,
        resume: a.resume.as_deref().map(InputFile::hash).transpose()?,
        metrics: a.out.join(METRICS_FILE),
        final_checkpoint: a.out.join(FINAL_CHECKPOINT),
        config: cfg.clone(),
    }
    .save(&a.out)?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config != cfg.model {
                return Err(Error::Config {
                    path: "model".into(),
                    message: format!("does not match the model in {}", path.display()),
                });
            }
            Trainer::resume(ckpt, cfg.train.clone(), &docs)?
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), &docs)?,
    };
    let mut progress = Progress {
        out: RunOutput::create(&a.out, a.resume.is_some())?,
        last: None,
    };
    trainer.run(&mut progress)?;
    let path = progress.out.finish(&trainer)?;
    emit(json!({
        "final_checkpoint": path,
        "steps": trainer.step_count(),
        "last": progress.last,
    }))
}

fn corpus_batches(data: &Path, seq_len: usize, batch_size: usize, max_windows: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let docs = load_corpus(data)?;
    let mut w = windows(&token_stream(&docs), seq_len)?;
    if max_windows > 0 {
        w.truncate(max_windows);
    }
    Ok(eval_batches(&w, batch_size))
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = Checkpoint::load(&a.ckpt)?.model()?;
    let batches = corpus_batches(&a.data, a.seq_len, a.batch_size, a.max_windows)?;
    let ppl = evaluate_perplexity(&model, &batches)?;
    let tokens: usize = batches.iter().map(|b| b.targets.len()).sum();
    emit(json!({"perplexity": ppl, "loss": ppl.ln(), "tokens": tokens}))
}

fn export(ckpt: &Path, out: &Path) -> Result<()> {
    let exported = export_standard(&Checkpoint::load(ckpt)?)?;
    exported.save(out)?;
    emit(json!({
        "path": out,
        "parameters": exported.params.numel(),
        "sha256": exported.hash()?,
    }))
}

fn record(a: RecordArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = ckpt.model()?;
    let layer = a
        .layer
        .unwrap_or_else(|| model.config().n_layers.saturating_sub(2));
    let docs = load_corpus(&a.data)?;
    let rec = record_activations(&model, &ckpt.hash()?, &docs, layer, a.site, a.seq_len, 16)?;
    rec.save(&a.out)?;
    emit(json!({
        "path": a.out,
        "layer": layer,
        "site": a.site,
        "n_tokens": rec.n_tokens(),
        "dim": rec.dim(),
    }))
}

fn sae_train_cmd(record: &Path, out: &Path, cfg: &SaeConfig, log: Option<&Path>) -> Result<()> {
    let rec = ActivationRecord::load(record)?;
    let (sae, steps) = sae_train(&rec, cfg)?;
    sae.save(out)?;
    if let Some(log) = log {
        let file = File::create(log).map_err(|e| Error::io(log, e))?;
        let mut w = BufWriter::new(file);
        for s in &steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| Error::io(log, e))?;
        }
        w.flush().map_err(|e| Error::io(log, e))?;
    }
    emit(json!({
        "path": out,
        "layer": sae.layer,
        "site": sae.site,
        "d_in": sae.d_in(),
        "d_dict": sae.d_dict(),
        "l0": sae_l0(&sae, &rec)?,
        "last": steps.last(),
    }))
}

fn sae_eval(
    ckpt: &Path,
    sae: &Path,
    data: &Path,
    seq_len: usize,
    batch_size: usize,
    max_windows: usize,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let model = ckpt.model()?;
    let sae = Sae::load(sae)?;
    let batches = corpus_batches(data, seq_len, batch_size, max_windows)?;
    let ce = ce_score(&model, &sae, &batches)?;
    let docs = load_corpus(data)?;
    let rec = record_activations(
        &model,
        &ckpt.hash()?,
        &docs,
        sae.layer,
        sae.site,
        seq_len,
        batch_size,
    )?;
    let l0 = sae_l0(&sae, &rec)?;
    emit(json!({
        "ce_score": ce.score,
        "h_clean": ce.h_clean,
        "h_sae": ce.h_sae,
        "h_zero": ce.h_zero,
        "l0": l0,
        "d_dict": sae.d_dict(),
        "l0_fraction": l0 / sae.d_dict() as f64,
    }))
}

fn metrics(a: EvalArgs) -> Result<()> {
    let model = Checkpoint::load(&a.ckpt)?.model()?;
    let batches = corpus_batches(&a.data, a.seq_len, a.batch_size, a.max_windows)?;
    emit(json!({
        "weight_l1": weight_l1(model.params()),
        "activation_l1": activation_l1(&model, &batches)?,
        "parameters": model.params().numel(),
    }))
}
