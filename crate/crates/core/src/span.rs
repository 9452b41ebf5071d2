//! Span corruption: replaces non-adjacent token spans with unique sentinels
//! in the encoder input and emits sentinel-prefixed spans as the decoder
//! target. A corruption is a pure function of (tokens, config, seed).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::vocab;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub rate: f64,
    pub mean_span: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            rate: 0.15,
            mean_span: 3.0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config(format!(
                "corruption rate must be in (0, 1), got {}",
                self.rate
            )));
        }
        if !(self.mean_span >= 1.0) {
            return Err(Error::Config(format!(
                "mean span must be at least 1, got {}",
                self.mean_span
            )));
        }
        Ok(())
    }
}

/// One encoder/decoder example. `input` is the original sequence with each
/// corrupted span collapsed to a sentinel; `target` concatenates, per span,
/// the sentinel followed by the original span tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedExample {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

/// Geometric-ish span length with the configured mean, at least 1.
fn draw_span_len(rng: &mut rand_chacha::ChaCha8Rng, mean_span: f64) -> usize {
    if mean_span <= 1.0 {
        return 1;
    }
    let p = 1.0 / mean_span;
    let u: f64 = 1.0 - rng.gen::<f64>();
    1 + (u.ln() / (1.0 - p).ln()).floor() as usize
}

pub fn span_corrupt(
    tokens: &[u32],
    vocab_size: usize,
    cfg: &CorruptionConfig,
    seed: u64,
) -> Result<CorruptedExample> {
    cfg.validate()?;
    let len = tokens.len();
    let n_corrupt = (cfg.rate * len as f64).round() as usize;
    if n_corrupt == 0 {
        return Err(Error::Invalid(format!(
            "sequence of length {len} too short to place one span at rate {}",
            cfg.rate
        )));
    }
    let n_corrupt = n_corrupt.min(len);
    let mut rng = rng_from(seed);

    // Span count targets the configured mean length, then shrinks until the
    // spans plus their separating gaps fit, capped by the sentinel budget.
    let mut n_spans = ((n_corrupt as f64 / cfg.mean_span).round() as usize)
        .clamp(1, vocab::NUM_SENTINELS.min(n_corrupt));
    while n_spans > 1 && n_corrupt + (n_spans - 1) > len {
        n_spans -= 1;
    }

    // Lengths sum to exactly n_corrupt; every span keeps at least 1 token.
    let mut lens = Vec::with_capacity(n_spans);
    let mut remaining = n_corrupt;
    for j in 0..n_spans {
        let left_after = n_spans - 1 - j;
        let l = if left_after == 0 {
            remaining
        } else {
            draw_span_len(&mut rng, cfg.mean_span).min(remaining - left_after)
        };
        lens.push(l);
        remaining -= l;
    }

    // Place spans left to right with a mandatory 1-token gap between them,
    // spreading the leftover slack uniformly over the n_spans + 1 gaps.
    let slack = len - n_corrupt - (n_spans - 1);
    let mut extra = vec![0usize; n_spans + 1];
    for _ in 0..slack {
        extra[rng.gen_range(0..n_spans + 1)] += 1;
    }
    let mut starts = Vec::with_capacity(n_spans);
    let mut cursor = extra[0];
    for (j, &l) in lens.iter().enumerate() {
        starts.push(cursor);
        cursor += l;
        if j + 1 < n_spans {
            cursor += 1 + extra[j + 1];
        }
    }

    let mut input = Vec::with_capacity(len - n_corrupt + n_spans);
    let mut target = Vec::with_capacity(n_corrupt + n_spans);
    let mut pos = 0;
    for (j, (&start, &l)) in starts.iter().zip(lens.iter()).enumerate() {
        input.extend_from_slice(&tokens[pos..start]);
        let sentinel = vocab::sentinel(vocab_size, j);
        input.push(sentinel);
        target.push(sentinel);
        target.extend_from_slice(&tokens[start..start + l]);
        pos = start + l;
    }
    input.extend_from_slice(&tokens[pos..]);
    Ok(CorruptedExample { input, target })
}
