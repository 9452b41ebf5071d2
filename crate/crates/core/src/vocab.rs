//! Vocabulary layout shared by the model and the data pipeline.
//!
//! Token ids are partitioned as: `0` = pad, `1` = eos, `2..vocab-32` =
//! content tokens, and the top 32 ids are span-corruption sentinels
//! (`sentinel(0)` is the highest id, counting down).

/// Padding token, also used as the decoder start token.
pub const PAD: u32 = 0;

/// End-of-sequence token (reserved; the denoising objective does not emit it).
pub const EOS: u32 = 1;

/// Number of sentinel ids reserved at the top of the vocabulary.
pub const NUM_SENTINELS: usize = 32;

/// Smallest valid vocabulary: pad + eos + sentinels + at least one content token.
pub const MIN_VOCAB: usize = 2 + NUM_SENTINELS + 1;

/// Id of the i-th sentinel for a vocabulary of `vocab_size` tokens.
pub fn sentinel(vocab_size: usize, i: usize) -> u32 {
    debug_assert!(vocab_size >= MIN_VOCAB);
    debug_assert!(i < NUM_SENTINELS);
    (vocab_size - 1 - i) as u32
}

pub fn is_sentinel(vocab_size: usize, t: u32) -> bool {
    (t as usize) >= vocab_size - NUM_SENTINELS
}

/// Half-open range of content token ids.
pub fn content_range(vocab_size: usize) -> std::ops::Range<u32> {
    2..(vocab_size - NUM_SENTINELS) as u32
}

/// Number of content tokens available.
pub fn content_count(vocab_size: usize) -> usize {
    vocab_size - NUM_SENTINELS - 2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_disjoint() {
        let v = 512;
        let content = content_range(v);
        assert!(!content.contains(&PAD));
        assert!(!content.contains(&EOS));
        for i in 0..NUM_SENTINELS {
            assert!(!content.contains(&sentinel(v, i)));
            assert!(is_sentinel(v, sentinel(v, i)));
            assert!((sentinel(v, i) as usize) < v);
        }
        assert!(!is_sentinel(v, content.end - 1));
        assert_eq!(content_count(v), 478);
    }
}
