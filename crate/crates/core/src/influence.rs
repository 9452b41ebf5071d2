//! Gradient self-influence scoring: the influence of a sample on itself is
//! the squared norm of its loss gradient, restricted to a layer set. Scores
//! are computed per sample, per microbatch, or for a whole corpus in one
//! streaming pass.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::batch::{corrupt_sample, pack_batch};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::LayerSet;
use crate::span::{CorruptedExample, CorruptionConfig};

/// A sequence of per-item scores plus its normalization state. `epsilon` is
/// the variance floor used when the array was normalized, 0 for raw arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreArray {
    pub scores: Vec<f64>,
    pub normalized: bool,
    pub epsilon: f64,
}

impl ScoreArray {
    pub fn raw(scores: Vec<f64>) -> ScoreArray {
        ScoreArray {
            scores,
            normalized: false,
            epsilon: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    /// Population variance (divides by n).
    pub fn population_variance(&self) -> f64 {
        let m = self.mean();
        self.scores.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / self.scores.len() as f64
    }

    /// Sample variance (divides by n-1), 0 for arrays shorter than 2.
    pub fn sample_variance(&self) -> f64 {
        let n = self.scores.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        self.scores.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (n - 1) as f64
    }
}

fn singleton(example: &CorruptedExample, vocab_size: usize) -> Result<crate::batch::PackedBatch> {
    pack_batch(
        std::slice::from_ref(example),
        vocab_size,
        example.input.len(),
        example.target.len(),
    )
}

/// Dot product of the two samples' loss gradients over `layers`.
pub fn tracin_influence(
    model: &Model,
    a: &CorruptedExample,
    b: &CorruptedExample,
    layers: &LayerSet,
    loss_scale: f64,
) -> Result<f64> {
    let ga = model.grad(&singleton(a, model.cfg.vocab_size)?, loss_scale)?.1;
    let gb = model.grad(&singleton(b, model.cfg.vocab_size)?, loss_scale)?.1;
    model.store.grad_dot(&ga, &gb, layers)
}

/// Squared norm of the sample's loss gradient over `layers`. Always >= 0.
pub fn self_influence(
    model: &Model,
    example: &CorruptedExample,
    layers: &LayerSet,
    loss_scale: f64,
) -> Result<f64> {
    microbatch_si(model, &singleton(example, model.cfg.vocab_size)?, layers, loss_scale)
}

/// Squared norm of the microbatch's mean-loss gradient over `layers`. The
/// mean over samples is the same loss used for training, so scores are
/// comparable across microbatch sizes.
pub fn microbatch_si(
    model: &Model,
    batch: &crate::batch::PackedBatch,
    layers: &LayerSet,
    loss_scale: f64,
) -> Result<f64> {
    let (_, g) = model.grad(batch, loss_scale)?;
    model.store.grad_dot(&g, &g, layers)
}

/// One scored sample; `index` is the sample's position in the source corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub index: usize,
    pub sample_id: String,
    pub score: f64,
}

pub fn scores_of(records: &[ScoreRecord]) -> ScoreArray {
    ScoreArray::raw(records.iter().map(|r| r.score).collect())
}

fn annotate(e: Error, index: usize, id: &str) -> Error {
    let ctx = format!("sample {index} ({id}): {e}");
    match e {
        Error::NonFinite(_) => Error::NonFinite(ctx),
        Error::Shape(_) => Error::Shape(ctx),
        Error::Io(_) => Error::Invalid(ctx),
        _ => Error::Invalid(ctx),
    }
}

/// Raw self-influence of every corpus sample under `model`, order-aligned
/// with the corpus. Samples are corrupted with the epoch 0 stream so a
/// scoring pass sees exactly what the first training epoch would. Samples
/// fan out to worker threads; results are written back by index.
pub fn score_dataset(
    model: &Model,
    corpus: &Corpus,
    corruption: &CorruptionConfig,
    data_seed: u64,
    layers: &LayerSet,
    loss_scale: f64,
) -> Result<Vec<ScoreRecord>> {
    if corpus.samples.is_empty() {
        return Err(Error::Invalid("cannot score an empty corpus".into()));
    }
    layers.validate(&model.store)?;
    let results: Vec<Result<ScoreRecord>> = corpus
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let run = || -> Result<f64> {
                let ex = corrupt_sample(sample, corpus.vocab_size, corruption, data_seed, 0, i)?;
                self_influence(model, &ex, layers, loss_scale)
            };
            let score = run().map_err(|e| annotate(e, i, &sample.id))?;
            if !score.is_finite() {
                return Err(Error::NonFinite(format!(
                    "SI score for sample {i} ({})",
                    sample.id
                )));
            }
            Ok(ScoreRecord {
                index: i,
                sample_id: sample.id.clone(),
                score,
            })
        })
        .collect();
    results.into_iter().collect()
}

/// Comparison of two raw score arrays: means, standard deviations (sample,
/// n-1), their ratio, and a one-sided Welch t statistic, positive when
/// `other` scores higher than `clean`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SiReport {
    pub clean_n: usize,
    pub clean_mean: f64,
    pub clean_std: f64,
    pub other_n: usize,
    pub other_mean: f64,
    pub other_std: f64,
    pub mean_ratio: f64,
    pub welch_t: f64,
}

pub fn si_report(clean: &ScoreArray, other: &ScoreArray) -> Result<SiReport> {
    if clean.is_empty() || other.is_empty() {
        return Err(Error::Invalid("score arrays must be non-empty".into()));
    }
    let (mc, mo) = (clean.mean(), other.mean());
    let (vc, vo) = (clean.sample_variance(), other.sample_variance());
    let (nc, no) = (clean.len() as f64, other.len() as f64);
    let num = mo - mc;
    let denom = (vo / no + vc / nc).sqrt();
    let welch_t = if num == 0.0 {
        0.0
    } else if denom == 0.0 {
        f64::INFINITY.copysign(num)
    } else {
        num / denom
    };
    Ok(SiReport {
        clean_n: clean.len(),
        clean_mean: mc,
        clean_std: vc.sqrt(),
        other_n: other.len(),
        other_mean: mo,
        other_std: vo.sqrt(),
        mean_ratio: mo / mc,
        welch_t,
    })
}

/// Write score records, one `index sample_id score` line per record, with
/// full round-trip float precision.
pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Invalid("refusing to write an empty score file".into()));
    }
    for r in records {
        if r.sample_id.is_empty() || r.sample_id.contains(char::is_whitespace) {
            return Err(Error::Invalid(format!(
                "sample id {:?} is not writable as a single field",
                r.sample_id
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "#scores count={}", records.len())?;
    for r in records {
        writeln!(w, "{} {} {:?}", r.index, r.sample_id, r.score)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty score file".into()))??;
    let count: usize = header
        .strip_prefix("#scores count=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad score header: {header:?}")))?;
    fn field<'x>(f: Option<&'x str>, what: &str, lineno: usize) -> Result<&'x str> {
        f.ok_or_else(|| Error::Parse(format!("line {lineno}: missing {what}")))
    }
    let mut records = Vec::with_capacity(count);
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let n = lineno + 2;
        let mut parts = line.split_ascii_whitespace();
        let index: usize = field(parts.next(), "index", n)?
            .parse()
            .map_err(|e| Error::Parse(format!("line {n}: bad index: {e}")))?;
        let sample_id = field(parts.next(), "sample id", n)?.to_string();
        let score: f64 = field(parts.next(), "score", n)?
            .parse()
            .map_err(|e| Error::Parse(format!("line {n}: bad score: {e}")))?;
        if parts.next().is_some() {
            return Err(Error::Parse(format!("line {n}: trailing fields")));
        }
        records.push(ScoreRecord {
            index,
            sample_id,
            score,
        });
    }
    if records.len() != count {
        return Err(Error::Parse(format!(
            "score header promised {count} records, file has {}",
            records.len()
        )));
    }
    Ok(records)
}
