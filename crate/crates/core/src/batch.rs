//! Deterministic batching: span-corrupted examples packed into fixed-size
//! padded arrays, plus the seeded epoch plan that orders a corpus into
//! minibatches of equal microbatches.

use rand::seq::SliceRandom;

use crate::data::{Corpus, Sample};
use crate::error::{Error, Result};
use crate::rng::{derive, rng_from};
use crate::span::{span_corrupt, CorruptedExample, CorruptionConfig};
use crate::vocab::PAD;

/// Model-ready arrays for one microbatch. Encoder and decoder sides are
/// padded to fixed lengths; `ce_weights` carries 1/(batch * target_len) on
/// real target positions and 0 on padding, so the weighted cross-entropy sum
/// is the mean over samples of each sample's token-mean loss.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    pub batch_size: usize,
    pub enc_len: usize,
    pub dec_len: usize,
    pub enc_ids: Vec<usize>,
    pub enc_valid: Vec<bool>,
    pub dec_in: Vec<usize>,
    pub dec_tgt: Vec<usize>,
    pub ce_weights: Vec<f64>,
}

pub fn pack_batch(
    examples: &[CorruptedExample],
    vocab_size: usize,
    enc_len: usize,
    dec_len: usize,
) -> Result<PackedBatch> {
    if examples.is_empty() {
        return Err(Error::Invalid("cannot pack an empty batch".into()));
    }
    let b = examples.len();
    let mut batch = PackedBatch {
        batch_size: b,
        enc_len,
        dec_len,
        enc_ids: vec![PAD as usize; b * enc_len],
        enc_valid: vec![false; b * enc_len],
        dec_in: vec![PAD as usize; b * dec_len],
        dec_tgt: vec![PAD as usize; b * dec_len],
        ce_weights: vec![0.0; b * dec_len],
    };
    for (i, ex) in examples.iter().enumerate() {
        if ex.input.is_empty() {
            return Err(Error::Invalid(format!("example {i} has no input tokens")));
        }
        if ex.target.is_empty() {
            return Err(Error::Invalid(format!(
                "example {i} has no supervised positions"
            )));
        }
        if ex.input.len() > enc_len {
            return Err(Error::Invalid(format!(
                "example {i} input length {} exceeds {enc_len}",
                ex.input.len()
            )));
        }
        if ex.target.len() > dec_len {
            return Err(Error::Invalid(format!(
                "example {i} target length {} exceeds {dec_len}",
                ex.target.len()
            )));
        }
        if let Some(&bad) = ex
            .input
            .iter()
            .chain(ex.target.iter())
            .find(|&&t| t as usize >= vocab_size)
        {
            return Err(Error::Invalid(format!(
                "example {i} token {bad} outside vocab {vocab_size}"
            )));
        }
        for (j, &t) in ex.input.iter().enumerate() {
            batch.enc_ids[i * enc_len + j] = t as usize;
            batch.enc_valid[i * enc_len + j] = true;
        }
        let t_len = ex.target.len();
        let w = 1.0 / (b * t_len) as f64;
        for (j, &t) in ex.target.iter().enumerate() {
            batch.dec_tgt[i * dec_len + j] = t as usize;
            batch.ce_weights[i * dec_len + j] = w;
            if j + 1 < dec_len {
                batch.dec_in[i * dec_len + j + 1] = t as usize;
            }
        }
    }
    Ok(batch)
}

/// Split a minibatch of examples into `n_microbatches` equal packed chunks,
/// preserving order.
pub fn pack_microbatches(
    examples: &[CorruptedExample],
    n_microbatches: usize,
    vocab_size: usize,
    enc_len: usize,
    dec_len: usize,
) -> Result<Vec<PackedBatch>> {
    if n_microbatches == 0 {
        return Err(Error::Config("n_microbatches must be at least 1".into()));
    }
    if examples.len() % n_microbatches != 0 {
        return Err(Error::Config(format!(
            "minibatch of {} does not divide into {n_microbatches} microbatches",
            examples.len()
        )));
    }
    let per = examples.len() / n_microbatches;
    examples
        .chunks(per)
        .map(|chunk| pack_batch(chunk, vocab_size, enc_len, dec_len))
        .collect()
}

/// The corruption stream: sample `index` of the corpus in `epoch` always
/// corrupts the same way for a given data seed. Scoring passes use epoch 0.
pub fn corrupt_sample(
    sample: &Sample,
    vocab_size: usize,
    cfg: &CorruptionConfig,
    data_seed: u64,
    epoch: u64,
    index: usize,
) -> Result<CorruptedExample> {
    span_corrupt(
        &sample.token_ids,
        vocab_size,
        cfg,
        derive(data_seed, "corrupt", &[epoch, index as u64]),
    )
}

/// One training step's worth of sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinibatchPlan {
    pub epoch: u64,
    pub sample_indices: Vec<usize>,
}

/// Seeded shuffle per epoch, chunked into minibatches, ragged tail dropped.
pub fn plan_epochs(
    corpus_len: usize,
    minibatch_size: usize,
    n_microbatches: usize,
    seed: u64,
    epochs: u64,
) -> Result<Vec<MinibatchPlan>> {
    if minibatch_size == 0 || n_microbatches == 0 {
        return Err(Error::Config(
            "minibatch size and n_microbatches must be at least 1".into(),
        ));
    }
    if minibatch_size % n_microbatches != 0 {
        return Err(Error::Config(format!(
            "minibatch size {minibatch_size} not divisible by {n_microbatches} microbatches"
        )));
    }
    if corpus_len < minibatch_size {
        return Err(Error::Config(format!(
            "corpus of {corpus_len} smaller than one minibatch of {minibatch_size}"
        )));
    }
    if epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let mut plans = Vec::new();
    for epoch in 0..epochs {
        plans.extend(plan_epoch(corpus_len, minibatch_size, n_microbatches, seed, epoch)?);
    }
    Ok(plans)
}

/// The minibatch plans of a single epoch, independent of other epochs.
pub fn plan_epoch(
    corpus_len: usize,
    minibatch_size: usize,
    n_microbatches: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<MinibatchPlan>> {
    if minibatch_size == 0 || n_microbatches == 0 {
        return Err(Error::Config(
            "minibatch size and n_microbatches must be at least 1".into(),
        ));
    }
    if minibatch_size % n_microbatches != 0 {
        return Err(Error::Config(format!(
            "minibatch size {minibatch_size} not divisible by {n_microbatches} microbatches"
        )));
    }
    if corpus_len < minibatch_size {
        return Err(Error::Config(format!(
            "corpus of {corpus_len} smaller than one minibatch of {minibatch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..corpus_len).collect();
    order.shuffle(&mut rng_from(derive(seed, "shuffle", &[epoch])));
    Ok(order
        .chunks_exact(minibatch_size)
        .map(|chunk| MinibatchPlan {
            epoch,
            sample_indices: chunk.to_vec(),
        })
        .collect())
}

/// Corrupt and pack one planned minibatch into its microbatches.
pub fn realize_plan(
    corpus: &Corpus,
    plan: &MinibatchPlan,
    corruption: &CorruptionConfig,
    data_seed: u64,
    n_microbatches: usize,
    enc_len: usize,
    dec_len: usize,
) -> Result<Vec<PackedBatch>> {
    let examples: Vec<CorruptedExample> = plan
        .sample_indices
        .iter()
        .map(|&i| {
            corrupt_sample(
                &corpus.samples[i],
                corpus.vocab_size,
                corruption,
                data_seed,
                plan.epoch,
                i,
            )
        })
        .collect::<Result<_>>()?;
    pack_microbatches(&examples, n_microbatches, corpus.vocab_size, enc_len, dec_len)
}
