//! Offline dataset filtering by self-influence rank: score a corpus with a
//! scoring checkpoint, keep the N lowest-scoring samples (or highest, for
//! the reverse ablation), and pretrain a fresh model on the kept subset.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::influence::{score_dataset, write_scores, read_scores, ScoreRecord};
use crate::model::Model;
use crate::params::LayerSet;
use crate::strategy::Variant;
use crate::train::{run_pretraining, RunSummary, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    KeepLowest,
    KeepHighest,
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterMode::KeepLowest => "keep_lowest",
            FilterMode::KeepHighest => "keep_highest",
        })
    }
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep_lowest" => Ok(FilterMode::KeepLowest),
            "keep_highest" => Ok(FilterMode::KeepHighest),
            other => Err(Error::Parse(format!(
                "unknown filter mode {other:?} (expected keep_lowest or keep_highest)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub keep_count: usize,
    pub mode: FilterMode,
}

/// Indices of the `keep_count` lowest-scoring (or highest-scoring) records,
/// sorted ascending. Ties break by ascending original index, so
/// keep_lowest(N) and keep_highest(total-N) always partition the index set.
pub fn filter_dataset(records: &[ScoreRecord], spec: &FilterSpec) -> Result<Vec<usize>> {
    if spec.keep_count == 0 {
        return Err(Error::Config("keep_count must be at least 1".into()));
    }
    if spec.keep_count > records.len() {
        return Err(Error::Config(format!(
            "cannot keep {} of {} samples",
            spec.keep_count,
            records.len()
        )));
    }
    let mut order: Vec<&ScoreRecord> = records.iter().collect();
    order.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .expect("scores are finite")
            .then(a.index.cmp(&b.index))
    });
    let kept = match spec.mode {
        FilterMode::KeepLowest => &order[..spec.keep_count],
        FilterMode::KeepHighest => &order[records.len() - spec.keep_count..],
    };
    let mut indices: Vec<usize> = kept.iter().map(|r| r.index).collect();
    indices.sort_unstable();
    Ok(indices)
}

/// The kept subset as a corpus, in ascending index order.
pub fn select_samples(corpus: &Corpus, indices: &[usize]) -> Result<Corpus> {
    let mut samples = Vec::with_capacity(indices.len());
    let mut prev: Option<usize> = None;
    for &i in indices {
        if let Some(p) = prev {
            if i <= p {
                return Err(Error::Invalid(format!(
                    "kept indices must be strictly ascending, saw {i} after {p}"
                )));
            }
        }
        let sample = corpus
            .samples
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("kept index {i} out of range")))?;
        samples.push(sample.clone());
        prev = Some(i);
    }
    if samples.is_empty() {
        return Err(Error::Invalid("kept index set is empty".into()));
    }
    Ok(Corpus {
        vocab_size: corpus.vocab_size,
        samples,
    })
}

/// What a filtering pass kept and how: written next to the filtered run so
/// the kept corpus can be rebuilt from the original byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct KeptIndexManifest {
    pub scoring_checkpoint: String,
    pub mode: FilterMode,
    pub keep_count: usize,
    pub total_count: usize,
    pub indices: Vec<usize>,
}

pub fn write_kept_indices(path: &Path, manifest: &KeptIndexManifest) -> Result<()> {
    if manifest.indices.len() != manifest.keep_count {
        return Err(Error::Invalid(format!(
            "manifest says keep {} but lists {} indices",
            manifest.keep_count,
            manifest.indices.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "#kept mode={} keep={} total={} checkpoint={}",
        manifest.mode, manifest.keep_count, manifest.total_count, manifest.scoring_checkpoint
    )?;
    for i in &manifest.indices {
        writeln!(w, "{i}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_kept_indices(path: &Path) -> Result<KeptIndexManifest> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty kept-index file".into()))??;
    let rest = header
        .strip_prefix("#kept mode=")
        .ok_or_else(|| Error::Parse(format!("bad kept-index header: {header:?}")))?;
    let (mode_s, rest) = rest
        .split_once(" keep=")
        .ok_or_else(|| Error::Parse("kept-index header missing keep count".into()))?;
    let (keep_s, rest) = rest
        .split_once(" total=")
        .ok_or_else(|| Error::Parse("kept-index header missing total count".into()))?;
    let (total_s, checkpoint) = rest
        .split_once(" checkpoint=")
        .ok_or_else(|| Error::Parse("kept-index header missing checkpoint".into()))?;
    let mode: FilterMode = mode_s.parse()?;
    let keep_count: usize = keep_s
        .parse()
        .map_err(|e| Error::Parse(format!("bad keep count: {e}")))?;
    let total_count: usize = total_s
        .parse()
        .map_err(|e| Error::Parse(format!("bad total count: {e}")))?;
    let mut indices = Vec::with_capacity(keep_count);
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        indices.push(
            line.trim()
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: bad index: {e}", lineno + 2)))?,
        );
    }
    if indices.len() != keep_count {
        return Err(Error::Parse(format!(
            "kept-index header promised {keep_count} indices, file has {}",
            indices.len()
        )));
    }
    Ok(KeptIndexManifest {
        scoring_checkpoint: checkpoint.to_string(),
        mode,
        keep_count,
        total_count,
        indices,
    })
}

pub const SCORE_FILE: &str = "scores.txt";
pub const KEPT_FILE: &str = "kept_indices.txt";

#[derive(Debug, Clone)]
pub struct PipelineArtifacts {
    pub score_path: PathBuf,
    pub kept_path: PathBuf,
    pub kept_indices: Vec<usize>,
    pub run: RunSummary,
}

/// Score `corpus` with `scoring_model`, filter per `spec`, and pretrain a
/// fresh model on the kept subset. The score pass and the filter pass talk
/// through the score file, so each pass holds one record at a time beyond
/// the corpus itself.
#[allow(clippy::too_many_arguments)]
pub fn sequential_pipeline(
    corpus: &Corpus,
    corpus_path: Option<&Path>,
    scoring_model: &Model,
    scoring_checkpoint_id: &str,
    layers: &LayerSet,
    spec: &FilterSpec,
    cfg: &TrainConfig,
    variant: &dyn Variant,
    out_dir: &Path,
) -> Result<PipelineArtifacts> {
    fs::create_dir_all(out_dir)?;
    let score_path = out_dir.join(SCORE_FILE);
    let records = score_dataset(
        scoring_model,
        corpus,
        &cfg.corruption,
        cfg.data_seed,
        layers,
        cfg.loss_scale,
    )?;
    write_scores(&score_path, &records)?;

    let records = read_scores(&score_path)?;
    let kept_indices = filter_dataset(&records, spec)?;
    let kept_path = out_dir.join(KEPT_FILE);
    write_kept_indices(
        &kept_path,
        &KeptIndexManifest {
            scoring_checkpoint: scoring_checkpoint_id.to_string(),
            mode: spec.mode,
            keep_count: spec.keep_count,
            total_count: records.len(),
            indices: kept_indices.clone(),
        },
    )?;

    let kept = select_samples(corpus, &kept_indices)?;
    let run = run_pretraining(&kept, corpus_path, cfg, variant, &out_dir.join("run"))?;
    Ok(PipelineArtifacts {
        score_path,
        kept_path,
        kept_indices,
        run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Provenance, Sample};
    use crate::model::ModelConfig;
    use crate::rng::rng_from;
    use crate::strategy::lookup;
    use rand::Rng;

    fn rec(index: usize, score: f64) -> ScoreRecord {
        ScoreRecord {
            index,
            sample_id: format!("s-{index:03}"),
            score,
        }
    }

    fn recs(scores: &[f64]) -> Vec<ScoreRecord> {
        scores.iter().enumerate().map(|(i, &s)| rec(i, s)).collect()
    }

    #[test]
    fn keeps_the_n_smallest_by_score() {
        let r = recs(&[3.0, 1.0, 2.0]);
        let kept = filter_dataset(
            &r,
            &FilterSpec {
                keep_count: 2,
                mode: FilterMode::KeepLowest,
            },
        )
        .unwrap();
        assert_eq!(kept, vec![1, 2]);
        let top = filter_dataset(
            &r,
            &FilterSpec {
                keep_count: 1,
                mode: FilterMode::KeepHighest,
            },
        )
        .unwrap();
        assert_eq!(top, vec![0]);
    }

    #[test]
    fn keeping_everything_is_identity() {
        let r = recs(&[3.0, 1.0, 2.0]);
        for mode in [FilterMode::KeepLowest, FilterMode::KeepHighest] {
            let kept = filter_dataset(
                &r,
                &FilterSpec {
                    keep_count: 3,
                    mode,
                },
            )
            .unwrap();
            assert_eq!(kept, vec![0, 1, 2]);
        }
    }

    #[test]
    fn ties_break_by_original_index() {
        let r = recs(&[1.0, 1.0, 2.0]);
        let kept = filter_dataset(
            &r,
            &FilterSpec {
                keep_count: 1,
                mode: FilterMode::KeepLowest,
            },
        )
        .unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let r = recs(&[1.0, 2.0]);
        for keep_count in [0, 3] {
            assert!(filter_dataset(
                &r,
                &FilterSpec {
                    keep_count,
                    mode: FilterMode::KeepLowest,
                },
            )
            .is_err());
        }
    }

    #[test]
    fn low_and_high_partitions_cover_exactly() {
        let mut rng = rng_from(99);
        for trial in 0..50 {
            let n = 2 + (trial % 9);
            // Small integer scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64).collect();
            let r = recs(&scores);
            for keep in 1..n {
                let low = filter_dataset(
                    &r,
                    &FilterSpec {
                        keep_count: keep,
                        mode: FilterMode::KeepLowest,
                    },
                )
                .unwrap();
                let high = filter_dataset(
                    &r,
                    &FilterSpec {
                        keep_count: n - keep,
                        mode: FilterMode::KeepHighest,
                    },
                )
                .unwrap();
                let mut union: Vec<usize> = low.iter().chain(high.iter()).copied().collect();
                union.sort_unstable();
                assert_eq!(union, (0..n).collect::<Vec<_>>(), "scores {scores:?} keep {keep}");
            }
        }
    }

    #[test]
    fn filtering_only_sees_ranks() {
        let r = recs(&[0.7, 0.1, 3.0, 2.2, 0.9]);
        let spec = FilterSpec {
            keep_count: 3,
            mode: FilterMode::KeepLowest,
        };
        let base = filter_dataset(&r, &spec).unwrap();
        let transformed: Vec<ScoreRecord> = r
            .iter()
            .map(|x| rec(x.index, x.score.exp() * 10.0))
            .collect();
        assert_eq!(filter_dataset(&transformed, &spec).unwrap(), base);
    }

    #[test]
    fn kept_index_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kept.txt");
        let manifest = KeptIndexManifest {
            scoring_checkpoint: "runs/scoring/checkpoint_final.ckpt".into(),
            mode: FilterMode::KeepLowest,
            keep_count: 3,
            total_count: 5,
            indices: vec![0, 2, 4],
        };
        write_kept_indices(&path, &manifest).unwrap();
        assert_eq!(read_kept_indices(&path).unwrap(), manifest);

        std::fs::write(&path, "#kept mode=keep_lowest keep=2 total=3 checkpoint=x\n0\n").unwrap();
        assert!(read_kept_indices(&path).is_err(), "count mismatch");
        std::fs::write(&path, "0\n1\n").unwrap();
        assert!(read_kept_indices(&path).is_err(), "missing header");
    }

    #[test]
    fn select_samples_validates_indices() {
        let corpus = Corpus {
            vocab_size: 36,
            samples: (0..4)
                .map(|i| Sample {
                    id: format!("s-{i}"),
                    token_ids: vec![2, 3, 4, 5],
                    provenance: Provenance::Clean,
                })
                .collect(),
        };
        let kept = select_samples(&corpus, &[1, 3]).unwrap();
        assert_eq!(kept.samples.len(), 2);
        assert_eq!(kept.samples[0].id, "s-1");
        assert_eq!(kept.samples[1].id, "s-3");
        assert!(select_samples(&corpus, &[3, 1]).is_err());
        assert!(select_samples(&corpus, &[1, 1]).is_err());
        assert!(select_samples(&corpus, &[4]).is_err());
        assert!(select_samples(&corpus, &[]).is_err());
    }

    fn tiny_corpus(n: usize) -> Corpus {
        let samples = (0..n)
            .map(|i| Sample {
                id: format!("s-{i:03}"),
                token_ids: (0..8).map(|j| 2 + ((i * 5 + j) % 30) as u32).collect(),
                provenance: Provenance::Clean,
            })
            .collect();
        Corpus {
            vocab_size: 36,
            samples,
        }
    }

    fn tiny_cfg(total_steps: u64) -> TrainConfig {
        let mut cfg = TrainConfig::defaults_for(total_steps);
        cfg.model = ModelConfig {
            vocab_size: 36,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            max_input_len: 8,
            max_target_len: 5,
            seed: 0,
        };
        cfg.minibatch_size = 4;
        cfg.reweight.n_microbatches = 2;
        cfg
    }

    #[test]
    fn pipeline_scores_filters_and_trains() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(12);
        let cfg = tiny_cfg(3);
        let scoring = Model::build(cfg.model.clone()).unwrap();
        let arts = sequential_pipeline(
            &corpus,
            None,
            &scoring,
            "fresh-seed-0",
            &scoring.default_layer_set(),
            &FilterSpec {
                keep_count: 8,
                mode: FilterMode::KeepLowest,
            },
            &cfg,
            lookup("baseline").unwrap(),
            dir.path(),
        )
        .unwrap();
        assert_eq!(arts.kept_indices.len(), 8);
        let manifest = read_kept_indices(&arts.kept_path).unwrap();
        assert_eq!(manifest.total_count, 12);
        assert_eq!(manifest.indices, arts.kept_indices);
        assert_eq!(manifest.scoring_checkpoint, "fresh-seed-0");
        assert!(arts.run.final_checkpoint.exists());

        // Scores on disk reproduce the kept set.
        let records = read_scores(&arts.score_path).unwrap();
        let again = filter_dataset(
            &records,
            &FilterSpec {
                keep_count: 8,
                mode: FilterMode::KeepLowest,
            },
        )
        .unwrap();
        assert_eq!(again, arts.kept_indices);
    }

    #[test]
    fn keeping_all_matches_plain_pretraining() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(8);
        let cfg = tiny_cfg(3);
        let scoring = Model::build(cfg.model.clone()).unwrap();
        let arts = sequential_pipeline(
            &corpus,
            None,
            &scoring,
            "fresh",
            &scoring.default_layer_set(),
            &FilterSpec {
                keep_count: 8,
                mode: FilterMode::KeepHighest,
            },
            &cfg,
            lookup("baseline").unwrap(),
            &dir.path().join("pipe"),
        )
        .unwrap();
        let direct = run_pretraining(
            &corpus,
            None,
            &cfg,
            lookup("baseline").unwrap(),
            &dir.path().join("direct"),
        )
        .unwrap();
        assert_eq!(
            fs::read(&arts.run.final_checkpoint).unwrap(),
            fs::read(&direct.final_checkpoint).unwrap()
        );
    }
}
