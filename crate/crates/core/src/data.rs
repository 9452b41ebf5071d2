//! Synthetic corpora: two order-2 Markov token generators with deliberately
//! different bigram statistics, token-order permutation noise, and a
//! line-oriented corpus file format.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, hash_parts, rng_from};
use crate::vocab;

/// Context length of the generators.
pub const MARKOV_ORDER: usize = 2;

const SUCCESSORS_PER_TOKEN: u64 = 8;
const CHOICES_PER_CONTEXT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Clean,
    Permuted,
    DomainShifted,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Clean => "clean",
            Provenance::Permuted => "permuted",
            Provenance::DomainShifted => "domain_shifted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Provenance::Clean),
            "permuted" => Ok(Provenance::Permuted),
            "domain_shifted" => Ok(Provenance::DomainShifted),
            other => Err(Error::Parse(format!("unknown provenance {other:?}"))),
        }
    }
}

/// One training sequence. Provenance is bookkeeping for evaluation; nothing
/// on the training path reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub token_ids: Vec<u32>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    MarkovA,
    MarkovB,
}

impl GeneratorKind {
    fn tag(&self) -> u64 {
        match self {
            GeneratorKind::MarkovA => 0,
            GeneratorKind::MarkovB => 1,
        }
    }

    fn id_prefix(&self) -> &'static str {
        match self {
            GeneratorKind::MarkovA => "a",
            GeneratorKind::MarkovB => "b",
        }
    }

    fn provenance(&self) -> Provenance {
        match self {
            GeneratorKind::MarkovA => Provenance::Clean,
            GeneratorKind::MarkovB => Provenance::DomainShifted,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub transition_seed: u64,
    pub seq_len: usize,
    pub vocab_size: usize,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < MARKOV_ORDER {
            return Err(Error::Config(format!(
                "seq_len must be at least {MARKOV_ORDER}, got {}",
                self.seq_len
            )));
        }
        if self.vocab_size < vocab::MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size must be at least {}, got {}",
                vocab::MIN_VOCAB,
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Chain identity. The generator kind is folded in so the two kinds
    /// differ even when configured with the same transition seed.
    fn chain_seed(&self) -> u64 {
        derive(self.transition_seed, "chain", &[self.kind.tag()])
    }
}

/// The per-token successor pool. Sparse (8 of the content vocabulary), so
/// each chain's bigram support is a small, seed-specific set.
fn successor_set(chain: u64, x: u32, lo: u32, count: u32) -> [u32; 8] {
    let mut out = [0u32; 8];
    for (j, slot) in out.iter_mut().enumerate() {
        let h = hash_parts(&[chain, 1, u64::from(x), j as u64]);
        *slot = lo + (h % u64::from(count)) as u32;
    }
    out
}

/// The order-2 restriction: a context (w, x) may only continue with 3 of
/// x's 8 successors.
fn context_choices(chain: u64, w: u32, x: u32, lo: u32, count: u32) -> [u32; 3] {
    let pool = successor_set(chain, x, lo, count);
    let mut out = [0u32; 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let h = hash_parts(&[chain, 2, u64::from(w), u64::from(x), i as u64]);
        *slot = pool[(h % SUCCESSORS_PER_TOKEN) as usize];
    }
    out
}

fn gen_tokens(spec: &GeneratorSpec, sample_seed: u64) -> Vec<u32> {
    let chain = spec.chain_seed();
    let count = vocab::content_count(spec.vocab_size) as u32;
    let lo = vocab::content_range(spec.vocab_size).start;
    let mut rng = rng_from(sample_seed);
    let mut tokens = Vec::with_capacity(spec.seq_len);
    let t0 = lo + rng.gen_range(0..count);
    tokens.push(t0);
    let pool = successor_set(chain, t0, lo, count);
    tokens.push(pool[rng.gen_range(0..SUCCESSORS_PER_TOKEN) as usize]);
    while tokens.len() < spec.seq_len {
        let w = tokens[tokens.len() - 2];
        let x = tokens[tokens.len() - 1];
        let choices = context_choices(chain, w, x, lo, count);
        tokens.push(choices[rng.gen_range(0..CHOICES_PER_CONTEXT) as usize]);
    }
    tokens
}

/// Deterministic corpus of `count` sequences. Each sample draws from its own
/// derived stream, so generation is shardable by index.
pub fn gen_corpus(spec: &GeneratorSpec, count: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("corpus count must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let sample_seed = derive(seed, "sample", &[spec.kind.tag(), i as u64]);
        out.push(Sample {
            id: format!("{}-{:06}", spec.kind.id_prefix(), i),
            token_ids: gen_tokens(spec, sample_seed),
            provenance: spec.kind.provenance(),
        });
    }
    Ok(out)
}

/// Uniformly random non-identity permutation of the token positions.
pub fn permute_tokens(sample: &Sample, seed: u64) -> Result<Sample> {
    let n = sample.token_ids.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "cannot permute sample {:?} of length {n}",
            sample.id
        )));
    }
    let mut rng = rng_from(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            break;
        }
    }
    Ok(Sample {
        id: format!("{}.perm", sample.id),
        token_ids: perm.iter().map(|&p| sample.token_ids[p]).collect(),
        provenance: Provenance::Permuted,
    })
}

/// Explicit clean/permuted/shifted composition of one corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixSpec {
    pub clean: usize,
    pub permuted: usize,
    pub shifted: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl MixSpec {
    pub fn total(&self) -> usize {
        self.clean + self.permuted + self.shifted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab_size: usize,
    pub samples: Vec<Sample>,
}

/// Builds clean samples from chain A, permuted samples from further chain-A
/// draws, and domain-shifted samples from chain B. Order is clean, permuted,
/// shifted; training shuffles downstream.
pub fn gen_mixed_corpus(spec: &MixSpec) -> Result<Corpus> {
    if spec.total() == 0 {
        return Err(Error::Config("corpus mix is empty".into()));
    }
    let spec_a = GeneratorSpec {
        kind: GeneratorKind::MarkovA,
        transition_seed: derive(spec.seed, "trans", &[0]),
        seq_len: spec.seq_len,
        vocab_size: spec.vocab_size,
    };
    let spec_b = GeneratorSpec {
        kind: GeneratorKind::MarkovB,
        transition_seed: derive(spec.seed, "trans", &[1]),
        seq_len: spec.seq_len,
        vocab_size: spec.vocab_size,
    };
    let mut samples = Vec::with_capacity(spec.total());
    if spec.clean + spec.permuted > 0 {
        let from_a = gen_corpus(&spec_a, spec.clean + spec.permuted, spec.seed)?;
        for (i, s) in from_a.into_iter().enumerate() {
            if i < spec.clean {
                samples.push(s);
            } else {
                samples.push(permute_tokens(&s, derive(spec.seed, "permute", &[i as u64]))?);
            }
        }
    }
    if spec.shifted > 0 {
        samples.extend(gen_corpus(&spec_b, spec.shifted, spec.seed)?);
    }
    Ok(Corpus {
        vocab_size: spec.vocab_size,
        samples,
    })
}

/// Empirical total-variation distance between the bigram distributions of
/// two sample sets.
pub fn bigram_tv(a: &[Sample], b: &[Sample]) -> f64 {
    use std::collections::BTreeMap;
    fn table(samples: &[Sample]) -> (BTreeMap<(u32, u32), f64>, f64) {
        let mut counts = BTreeMap::new();
        let mut total = 0.0;
        for s in samples {
            for w in s.token_ids.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0.0) += 1.0;
                total += 1.0;
            }
        }
        (counts, total)
    }
    let (ta, na) = table(a);
    let (tb, nb) = table(b);
    let mut tv = 0.0;
    for (key, ca) in &ta {
        let pa = ca / na;
        let pb = tb.get(key).map_or(0.0, |c| c / nb);
        tv += (pa - pb).abs();
    }
    for (key, cb) in &tb {
        if !ta.contains_key(key) {
            tv += cb / nb;
        }
    }
    tv / 2.0
}

/// File layout: a `#corpus` header with key=value pairs (vocab_size
/// required), then one line per sample: id, provenance, space-separated
/// token ids.
pub fn write_corpus(path: &Path, corpus: &Corpus, extra: &[(&str, String)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "#corpus vocab_size={}", corpus.vocab_size)?;
    for (k, v) in extra {
        write!(f, " {k}={v}")?;
    }
    writeln!(f)?;
    for s in &corpus.samples {
        write!(f, "{} {}", s.id, s.provenance.as_str())?;
        for t in &s.token_ids {
            write!(f, " {t}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty corpus file", path.display())))??;
    let mut vocab_size = None;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("#corpus") {
        return Err(Error::Parse(format!(
            "{}: missing #corpus header",
            path.display()
        )));
    }
    for kv in fields {
        if let Some(v) = kv.strip_prefix("vocab_size=") {
            vocab_size = Some(v.parse::<usize>().map_err(|_| {
                Error::Parse(format!("{}: bad vocab_size {v:?}", path.display()))
            })?);
        }
    }
    let vocab_size = vocab_size
        .ok_or_else(|| Error::Parse(format!("{}: header lacks vocab_size", path.display())))?;
    let mut samples = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts
            .next()
            .ok_or_else(|| Error::Parse(format!("{}:{}: missing id", path.display(), ln + 2)))?
            .to_string();
        let prov = Provenance::parse(parts.next().ok_or_else(|| {
            Error::Parse(format!("{}:{}: missing provenance", path.display(), ln + 2))
        })?)?;
        let mut token_ids = Vec::new();
        for tok in parts {
            let t: u32 = tok.parse().map_err(|_| {
                Error::Parse(format!("{}:{}: bad token {tok:?}", path.display(), ln + 2))
            })?;
            if (t as usize) >= vocab_size {
                return Err(Error::Parse(format!(
                    "{}:{}: token {t} outside vocab {vocab_size}",
                    path.display(),
                    ln + 2
                )));
            }
            token_ids.push(t);
        }
        if token_ids.is_empty() {
            return Err(Error::Parse(format!(
                "{}:{}: sample {id:?} has no tokens",
                path.display(),
                ln + 2
            )));
        }
        samples.push(Sample {
            id,
            token_ids,
            provenance: prov,
        });
    }
    if samples.is_empty() {
        return Err(Error::Parse(format!(
            "{}: corpus has no samples",
            path.display()
        )));
    }
    Ok(Corpus {
        vocab_size,
        samples,
    })
}
