//! Pretraining runs: the step loop over a corpus, per-step logging, and the
//! run directory layout. A run directory is append-only and holds one
//! manifest (`manifest.json`), a per-step metrics table (`metrics.csv`), the
//! full step logs (`steps.jsonl`), and checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::batch::{plan_epoch, realize_plan};
use crate::checkpoint::save_checkpoint;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, OptimConfig};
use crate::reweight::{unweighted_step, weighted_step_with_tau, ReweightConfig};
use crate::span::CorruptionConfig;
use crate::strategy::Variant;

pub const METRICS_FILE: &str = "metrics.csv";
pub const STEP_LOG_FILE: &str = "steps.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINAL_CHECKPOINT_FILE: &str = "checkpoint_final.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub reweight: ReweightConfig,
    pub corruption: CorruptionConfig,
    pub total_steps: u64,
    pub minibatch_size: usize,
    pub data_seed: u64,
    pub loss_scale: f64,
    /// Steps between intermediate checkpoints; the final step is always
    /// checkpointed regardless.
    pub checkpoint_every: Option<u64>,
}

impl TrainConfig {
    /// Standard settings for a run of `total_steps` with the temperature
    /// switch at the halfway point.
    pub fn defaults_for(total_steps: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            reweight: ReweightConfig::defaults_with(total_steps / 2),
            corruption: CorruptionConfig::default(),
            total_steps,
            minibatch_size: 8,
            data_seed: 0,
            loss_scale: 1.0,
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.reweight.validate()?;
        self.corruption.validate()?;
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.minibatch_size == 0 {
            return Err(Error::Config("minibatch_size must be at least 1".into()));
        }
        if self.minibatch_size % self.reweight.n_microbatches != 0 {
            return Err(Error::Config(format!(
                "minibatch_size {} not divisible by {} microbatches",
                self.minibatch_size, self.reweight.n_microbatches
            )));
        }
        if !self.loss_scale.is_finite() || self.loss_scale <= 0.0 {
            return Err(Error::Config(format!(
                "loss_scale must be finite and positive, got {}",
                self.loss_scale
            )));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub path: Option<String>,
    pub n_samples: usize,
    pub vocab_size: usize,
    pub provenance_counts: BTreeMap<String, usize>,
}

impl CorpusInfo {
    pub fn describe(corpus: &Corpus, path: Option<&Path>) -> CorpusInfo {
        let mut provenance_counts = BTreeMap::new();
        for s in &corpus.samples {
            *provenance_counts
                .entry(s.provenance.as_str().to_string())
                .or_insert(0) += 1;
        }
        CorpusInfo {
            path: path.map(|p| p.display().to_string()),
            n_samples: corpus.samples.len(),
            vocab_size: corpus.vocab_size,
            provenance_counts,
        }
    }
}

/// The complete record of a run: with the corpus files, enough to reproduce
/// it bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub variant: String,
    pub config: TrainConfig,
    pub corpus: CorpusInfo,
    pub start_step: u64,
    pub end_step: u64,
    pub metrics_path: String,
    pub step_log_path: String,
    pub checkpoint_paths: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub manifest_path: PathBuf,
    pub metrics_path: PathBuf,
    pub steps: u64,
    pub final_loss: f64,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Train `variant` on `corpus` for `cfg.total_steps`, writing all artifacts
/// into the freshly created `run_dir`.
pub fn run_pretraining(
    corpus: &Corpus,
    corpus_path: Option<&Path>,
    cfg: &TrainConfig,
    variant: &dyn Variant,
    run_dir: &Path,
) -> Result<RunSummary> {
    cfg.validate()?;
    if corpus.vocab_size != cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocab {} does not match model vocab {}",
            corpus.vocab_size, cfg.model.vocab_size
        )));
    }
    if let Some(parent) = run_dir.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::create_dir(run_dir).map_err(|e| {
        Error::Invalid(format!(
            "cannot create run directory {} (run directories are append-only, pick a new one): {e}",
            run_dir.display()
        ))
    })?;

    let mut model = Model::build(cfg.model.clone())?;
    let mut opt = Adam::new(&model.store, cfg.optim.clone())?;

    let metrics_path = run_dir.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(
        metrics,
        "step,variant,tau,loss,weight_min,weight_max,weight_mean,weight_entropy"
    )?;
    let mut steps_out = BufWriter::new(File::create(run_dir.join(STEP_LOG_FILE))?);

    let n = cfg.reweight.n_microbatches;
    let mut checkpoint_paths = Vec::new();
    let mut step = 0u64;
    let mut final_loss = f64::NAN;
    'outer: for epoch in 0.. {
        let plans = plan_epoch(
            corpus.samples.len(),
            cfg.minibatch_size,
            n,
            cfg.data_seed,
            epoch,
        )?;
        if plans.is_empty() {
            return Err(Error::Config("corpus yields no full minibatches".into()));
        }
        for plan in &plans {
            step += 1;
            let mbs = realize_plan(
                corpus,
                plan,
                &cfg.corruption,
                cfg.data_seed,
                n,
                cfg.model.max_input_len,
                cfg.model.max_target_len,
            )?;
            let log = match variant.tau(step, &cfg.reweight) {
                None => unweighted_step(&mut model, &mut opt, &mbs, step, cfg.loss_scale)?,
                Some(tau) => weighted_step_with_tau(
                    &mut model,
                    &mut opt,
                    &mbs,
                    &cfg.reweight,
                    tau,
                    step,
                    cfg.loss_scale,
                )?,
            };

            let wmin = log.weights.iter().cloned().fold(f64::INFINITY, f64::min);
            let wmax = log.weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let wmean = log.weights.iter().sum::<f64>() / log.weights.len() as f64;
            writeln!(
                metrics,
                "{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
                step,
                variant.name(),
                log.tau,
                log.minibatch_loss,
                wmin,
                wmax,
                wmean,
                log.weight_entropy
            )?;
            writeln!(
                steps_out,
                "{}",
                serde_json::to_string(&log).map_err(|e| Error::Invalid(e.to_string()))?
            )?;
            final_loss = log.minibatch_loss;

            if let Some(every) = cfg.checkpoint_every {
                if step % every == 0 && step != cfg.total_steps {
                    let name = format!("checkpoint_step_{step:06}.ckpt");
                    save_checkpoint(&run_dir.join(&name), &model)?;
                    checkpoint_paths.push(name);
                }
            }
            if step == cfg.total_steps {
                break 'outer;
            }
        }
    }
    metrics.flush()?;
    steps_out.flush()?;

    let final_checkpoint = run_dir.join(FINAL_CHECKPOINT_FILE);
    save_checkpoint(&final_checkpoint, &model)?;
    checkpoint_paths.push(FINAL_CHECKPOINT_FILE.to_string());

    let manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        variant: variant.name().to_string(),
        config: cfg.clone(),
        corpus: CorpusInfo::describe(corpus, corpus_path),
        start_step: 1,
        end_step: cfg.total_steps,
        metrics_path: METRICS_FILE.to_string(),
        step_log_path: STEP_LOG_FILE.to_string(),
        checkpoint_paths,
    };
    let manifest_path = run_dir.join(MANIFEST_FILE);
    write_json(&manifest_path, &manifest)?;

    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        final_checkpoint,
        manifest_path,
        metrics_path,
        steps: cfg.total_steps,
        final_loss,
    })
}
