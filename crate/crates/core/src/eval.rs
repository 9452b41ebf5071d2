//! Held-out evaluation: mean span-denoising loss over a corpus under a
//! fixed corruption stream, so the same checkpoint always evaluates to the
//! same number.

use crate::batch::{corrupt_sample, pack_microbatches};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::span::{CorruptedExample, CorruptionConfig};

/// Mean over samples of each sample's token-mean loss. Samples are
/// corrupted with the epoch 0 stream keyed by corpus position, matching
/// what a first training pass would see.
pub fn eval_mean_loss(
    model: &Model,
    corpus: &Corpus,
    corruption: &CorruptionConfig,
    data_seed: u64,
    batch_size: usize,
    loss_scale: f64,
) -> Result<f64> {
    if corpus.samples.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty corpus".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("eval batch size must be at least 1".into()));
    }
    if corpus.vocab_size != model.cfg.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocab {} does not match model vocab {}",
            corpus.vocab_size, model.cfg.vocab_size
        )));
    }
    let mut weighted_sum = 0.0;
    let mut total = 0usize;
    for (chunk_idx, chunk) in corpus.samples.chunks(batch_size).enumerate() {
        let base = chunk_idx * batch_size;
        let examples: Vec<CorruptedExample> = chunk
            .iter()
            .enumerate()
            .map(|(j, s)| corrupt_sample(s, corpus.vocab_size, corruption, data_seed, 0, base + j))
            .collect::<Result<_>>()?;
        let batch = pack_microbatches(
            &examples,
            1,
            corpus.vocab_size,
            model.cfg.max_input_len,
            model.cfg.max_target_len,
        )?
        .pop()
        .expect("one microbatch");
        let loss = model.loss(&batch, loss_scale)?;
        weighted_sum += loss * chunk.len() as f64;
        total += chunk.len();
    }
    Ok(weighted_sum / total as f64)
}
