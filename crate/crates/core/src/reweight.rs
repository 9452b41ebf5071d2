//! Online microbatch gradient reweighting. Each training step scores its
//! microbatches by self-influence, normalizes the scores, converts them to
//! softmax weights under a scheduled temperature, and feeds the weighted
//! gradient sum to the optimizer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::batch::PackedBatch;
use crate::error::{Error, Result};
use crate::influence::ScoreArray;
use crate::model::Model;
use crate::optim::Adam;
use crate::params::{Gradients, LayerSet};

/// Variance floor for score normalization.
pub const NORM_EPS: f64 = 1e-8;

/// How the weighted gradient sum is scaled before the optimizer. The
/// weighted sum has 1/n the magnitude of a plain sum at uniform weights;
/// `SumPreserving` multiplies by n so the two match there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScale {
    PaperLiteral,
    SumPreserving,
}

impl fmt::Display for WeightScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightScale::PaperLiteral => "paper_literal",
            WeightScale::SumPreserving => "sum_preserving",
        })
    }
}

impl FromStr for WeightScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_literal" => Ok(WeightScale::PaperLiteral),
            "sum_preserving" => Ok(WeightScale::SumPreserving),
            other => Err(Error::Parse(format!(
                "unknown weight scale {other:?} (expected paper_literal or sum_preserving)"
            ))),
        }
    }
}

/// Two-stage reweighting settings: temperature `tau1` through step
/// `switch_step` inclusive, `tau2` after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReweightConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub switch_step: u64,
    pub n_microbatches: usize,
    pub epsilon: f64,
    pub layers: LayerSet,
    pub weight_scale: WeightScale,
}

impl ReweightConfig {
    /// Standard settings (tau 1 then -1, 8 microbatches, first encoder and
    /// decoder blocks) with the given switch step.
    pub fn defaults_with(switch_step: u64) -> ReweightConfig {
        ReweightConfig {
            tau1: 1.0,
            tau2: -1.0,
            switch_step,
            n_microbatches: 8,
            epsilon: NORM_EPS,
            layers: LayerSet::from_ids(["enc_0", "dec_0"]).unwrap(),
            weight_scale: WeightScale::PaperLiteral,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_microbatches == 0 {
            return Err(Error::Config("n_microbatches must be positive".into()));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !t.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {t}")));
            }
        }
        Ok(())
    }
}

/// Everything observable about one training step. `weights` are the softmax
/// weights before any `WeightScale` adjustment; an unweighted step logs
/// uniform pseudo-weights, zero scores, and tau 0. `minibatch_loss` is the
/// unweighted mean of the microbatch losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub tau: f64,
    pub raw_scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub minibatch_loss: f64,
    pub weight_entropy: f64,
}

/// `(s - mean) / sqrt(population variance + epsilon)`. A constant array
/// maps to all zeros; epsilon keeps that case finite.
pub fn normalize_scores(s: &ScoreArray, epsilon: f64) -> Result<ScoreArray> {
    if s.is_empty() {
        return Err(Error::Invalid("cannot normalize an empty score array".into()));
    }
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::Config(format!(
            "normalization epsilon must be positive, got {epsilon}"
        )));
    }
    let mean = s.mean();
    let denom = (s.population_variance() + epsilon).sqrt();
    Ok(ScoreArray {
        scores: s.scores.iter().map(|v| (v - mean) / denom).collect(),
        normalized: true,
        epsilon,
    })
}

/// `w_i = exp(tau * s_i) / sum_j exp(tau * s_j)`, max-subtracted. Requires a
/// normalized array so temperatures mean the same thing across steps.
pub fn softmax_weights(s_norm: &ScoreArray, tau: f64) -> Result<Vec<f64>> {
    if !s_norm.normalized {
        return Err(Error::Usage(
            "softmax_weights requires a normalized score array".into(),
        ));
    }
    if s_norm.is_empty() {
        return Err(Error::Invalid("cannot weight an empty score array".into()));
    }
    let logits: Vec<f64> = s_norm.scores.iter().map(|&v| tau * v).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `tau1` while `step <= switch_step`, `tau2` after. Steps are 1-based, so
/// `switch_step = 0` runs the second stage from the start.
pub fn schedule_tau(step: u64, cfg: &ReweightConfig) -> f64 {
    assert!(step >= 1, "training steps are 1-based");
    if step <= cfg.switch_step {
        cfg.tau1
    } else {
        cfg.tau2
    }
}

/// Shannon entropy `-sum w ln w` with `0 ln 0 = 0`. Uniform weights give
/// `ln n`, a one-hot vector gives 0.
pub fn weight_entropy(weights: &[f64]) -> f64 {
    -weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| w * w.ln())
        .sum::<f64>()
}

/// Plain gradient sum `G = sum_i g_i`.
pub fn aggregate_sum(grads: &[Gradients]) -> Result<Gradients> {
    let (first, rest) = grads
        .split_first()
        .ok_or_else(|| Error::Invalid("cannot aggregate zero gradients".into()))?;
    let mut acc = first.clone();
    for g in rest {
        acc.axpy(1.0, g);
    }
    Ok(acc)
}

/// Weighted gradient sum `G = sum_i w_i g_i`, multiplied by n afterwards
/// under `SumPreserving`.
pub fn aggregate_weighted(
    grads: &[Gradients],
    weights: &[f64],
    scale: WeightScale,
) -> Result<Gradients> {
    if grads.is_empty() {
        return Err(Error::Invalid("cannot aggregate zero gradients".into()));
    }
    if grads.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} gradients but {} weights",
            grads.len(),
            weights.len()
        )));
    }
    let mut acc = grads[0].clone();
    acc.scale(weights[0]);
    for (g, &w) in grads[1..].iter().zip(&weights[1..]) {
        acc.axpy(w, g);
    }
    if scale == WeightScale::SumPreserving {
        acc.scale(grads.len() as f64);
    }
    Ok(acc)
}

fn microbatch_grads(
    model: &Model,
    microbatches: &[PackedBatch],
    loss_scale: f64,
) -> Result<(Vec<f64>, Vec<Gradients>)> {
    if microbatches.is_empty() {
        return Err(Error::Invalid("a step needs at least one microbatch".into()));
    }
    let mut losses = Vec::with_capacity(microbatches.len());
    let mut grads = Vec::with_capacity(microbatches.len());
    for (i, mb) in microbatches.iter().enumerate() {
        let (loss, g) = model
            .grad(mb, loss_scale)
            .map_err(|e| Error::Invalid(format!("microbatch {i}: {e}")))?;
        losses.push(loss);
        grads.push(g);
    }
    Ok((losses, grads))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// One optimizer step from the plain microbatch gradient sum.
pub fn unweighted_step(
    model: &mut Model,
    opt: &mut Adam,
    microbatches: &[PackedBatch],
    step: u64,
    loss_scale: f64,
) -> Result<StepLog> {
    let (losses, grads) = microbatch_grads(model, microbatches, loss_scale)?;
    let agg = aggregate_sum(&grads)?;
    opt.apply(&mut model.store, &agg)?;
    let n = microbatches.len();
    let weights = vec![1.0 / n as f64; n];
    let weight_entropy = weight_entropy(&weights);
    Ok(StepLog {
        step,
        tau: 0.0,
        raw_scores: vec![0.0; n],
        weights,
        minibatch_loss: mean(&losses),
        weight_entropy,
    })
}

/// One optimizer step from the self-influence weighted gradient sum at an
/// explicit temperature.
pub fn weighted_step_with_tau(
    model: &mut Model,
    opt: &mut Adam,
    microbatches: &[PackedBatch],
    cfg: &ReweightConfig,
    tau: f64,
    step: u64,
    loss_scale: f64,
) -> Result<StepLog> {
    cfg.validate()?;
    if microbatches.len() != cfg.n_microbatches {
        return Err(Error::Config(format!(
            "step got {} microbatches, config expects {}",
            microbatches.len(),
            cfg.n_microbatches
        )));
    }
    let (losses, grads) = microbatch_grads(model, microbatches, loss_scale)?;
    let mut raw = Vec::with_capacity(grads.len());
    for (i, g) in grads.iter().enumerate() {
        let s = model.store.grad_dot(g, g, &cfg.layers)?;
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("SI score for microbatch {i}")));
        }
        raw.push(s);
    }
    let normalized = normalize_scores(&ScoreArray::raw(raw.clone()), cfg.epsilon)?;
    let weights = softmax_weights(&normalized, tau)?;
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("weight for microbatch {i}")));
    }
    let agg = aggregate_weighted(&grads, &weights, cfg.weight_scale)?;
    opt.apply(&mut model.store, &agg)?;
    let weight_entropy = weight_entropy(&weights);
    Ok(StepLog {
        step,
        tau,
        raw_scores: raw,
        weights,
        minibatch_loss: mean(&losses),
        weight_entropy,
    })
}

/// One reweighted step at the scheduled temperature for `step`.
pub fn weighted_step(
    model: &mut Model,
    opt: &mut Adam,
    microbatches: &[PackedBatch],
    cfg: &ReweightConfig,
    step: u64,
    loss_scale: f64,
) -> Result<StepLog> {
    let tau = schedule_tau(step, cfg);
    weighted_step_with_tau(model, opt, microbatches, cfg, tau, step, loss_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::pack_batch;
    use crate::model::ModelConfig;
    use crate::optim::{Adam, OptimConfig};
    use crate::span::CorruptedExample;
    use proptest::prelude::*;

    fn norm(scores: Vec<f64>) -> ScoreArray {
        normalize_scores(&ScoreArray::raw(scores), NORM_EPS).unwrap()
    }

    #[test]
    fn normalize_handles_degenerate_arrays() {
        assert_eq!(norm(vec![5.0]).scores, vec![0.0]);
        assert_eq!(norm(vec![3.0, 3.0, 3.0]).scores, vec![0.0, 0.0, 0.0]);
        let two = norm(vec![1.0, 3.0]);
        assert!((two.scores[0] + 1.0).abs() <= 1e-6);
        assert!((two.scores[1] - 1.0).abs() <= 1e-6);
        assert!(two.normalized);
        assert_eq!(two.epsilon, NORM_EPS);
    }

    #[test]
    fn normalized_arrays_have_zero_mean_unit_variance() {
        let a = norm(vec![0.3, 1.7, -2.2, 0.9, 4.4]);
        assert!(a.mean().abs() < 1e-9);
        assert!((a.population_variance() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_at_zero_tau_is_exactly_uniform() {
        let w = softmax_weights(&norm(vec![0.1, 5.0, -2.0, 3.3]), 0.0).unwrap();
        assert_eq!(w, vec![0.25; 4]);
        let one = softmax_weights(&norm(vec![9.0]), 2.0).unwrap();
        assert_eq!(one, vec![1.0]);
    }

    #[test]
    fn softmax_matches_hand_computation() {
        let s = ScoreArray {
            scores: vec![-1.0, 1.0],
            normalized: true,
            epsilon: NORM_EPS,
        };
        let w = softmax_weights(&s, 1.0).unwrap();
        let e2 = std::f64::consts::E * std::f64::consts::E;
        assert!((w[0] - 1.0 / (1.0 + e2)).abs() < 1e-12);
        assert!((w[1] - e2 / (1.0 + e2)).abs() < 1e-12);
        assert!((w[0] - 0.1192).abs() < 1e-3);
        assert!((w[1] - 0.8808).abs() < 1e-3);
    }

    #[test]
    fn softmax_requires_normalized_input() {
        let raw = ScoreArray::raw(vec![1.0, 2.0]);
        assert!(softmax_weights(&raw, 1.0).is_err());
    }

    #[test]
    fn schedule_switches_once_after_the_boundary() {
        let mut cfg = ReweightConfig::defaults_with(10);
        assert_eq!(schedule_tau(1, &cfg), 1.0);
        assert_eq!(schedule_tau(10, &cfg), 1.0);
        assert_eq!(schedule_tau(11, &cfg), -1.0);
        let transitions = (1..100)
            .filter(|&s| schedule_tau(s, &cfg) != schedule_tau(s + 1, &cfg))
            .count();
        assert_eq!(transitions, 1);

        cfg.switch_step = 0;
        assert_eq!(schedule_tau(1, &cfg), -1.0);
    }

    #[test]
    fn entropy_of_uniform_is_ln_n() {
        let n = 8;
        let w = vec![1.0 / n as f64; n];
        assert!((weight_entropy(&w) - (n as f64).ln()).abs() < 1e-12);
        assert_eq!(weight_entropy(&[1.0, 0.0, 0.0]), 0.0);
    }

    fn tiny_model(seed: u64) -> Model {
        Model::build(ModelConfig {
            vocab_size: 36,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            max_input_len: 6,
            max_target_len: 5,
            seed,
        })
        .unwrap()
    }

    fn ex(input: Vec<u32>, target: Vec<u32>) -> CorruptedExample {
        CorruptedExample { input, target }
    }

    fn two_microbatches() -> Vec<PackedBatch> {
        vec![
            pack_batch(&[ex(vec![2, 3, 35, 4], vec![35, 5, 6])], 36, 6, 5).unwrap(),
            pack_batch(&[ex(vec![7, 8, 34, 9, 10], vec![34, 11])], 36, 6, 5).unwrap(),
        ]
    }

    fn cfg_n(n: usize) -> ReweightConfig {
        ReweightConfig {
            n_microbatches: n,
            ..ReweightConfig::defaults_with(5)
        }
    }

    #[test]
    fn weighted_step_matches_stagewise_oracle() {
        let mbs = two_microbatches();
        let cfg = cfg_n(2);

        let mut m1 = tiny_model(4);
        let mut opt1 = Adam::new(&m1.store, OptimConfig::default()).unwrap();
        let log = weighted_step(&mut m1, &mut opt1, &mbs, &cfg, 3, 1.0).unwrap();

        // Replay every stage by hand on a second copy of the model.
        let mut m2 = tiny_model(4);
        let mut opt2 = Adam::new(&m2.store, OptimConfig::default()).unwrap();
        let g0 = m2.grad(&mbs[0], 1.0).unwrap().1;
        let g1 = m2.grad(&mbs[1], 1.0).unwrap().1;
        let raw = vec![
            m2.store.grad_dot(&g0, &g0, &cfg.layers).unwrap(),
            m2.store.grad_dot(&g1, &g1, &cfg.layers).unwrap(),
        ];
        let w = softmax_weights(
            &normalize_scores(&ScoreArray::raw(raw.clone()), cfg.epsilon).unwrap(),
            1.0,
        )
        .unwrap();
        let mut agg = g0.clone();
        agg.scale(w[0]);
        agg.axpy(w[1], &g1);
        opt2.apply(&mut m2.store, &agg).unwrap();

        assert_eq!(m1.store.le_bytes(), m2.store.le_bytes());
        assert_eq!(log.raw_scores, raw);
        assert_eq!(log.weights, w);
        assert_eq!(log.tau, 1.0);
        assert_eq!(log.step, 3);
        assert!((log.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_tau_sum_preserving_equals_unweighted() {
        let mbs = two_microbatches();
        let mut cfg = cfg_n(2);
        cfg.tau1 = 0.0;
        cfg.tau2 = 0.0;
        cfg.weight_scale = WeightScale::SumPreserving;

        let mut mw = tiny_model(4);
        let mut ow = Adam::new(&mw.store, OptimConfig::default()).unwrap();
        let mut mu = tiny_model(4);
        let mut ou = Adam::new(&mu.store, OptimConfig::default()).unwrap();
        for step in 1..=3u64 {
            weighted_step(&mut mw, &mut ow, &mbs, &cfg, step, 1.0).unwrap();
            unweighted_step(&mut mu, &mut ou, &mbs, step, 1.0).unwrap();
        }
        for i in 0..mw.store.len() {
            let a = mw.store.value(i).data();
            let b = mu.store.value(i).data();
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_microbatch_weighted_equals_unweighted() {
        let mb = vec![pack_batch(&[ex(vec![2, 3, 35, 4], vec![35, 5, 6])], 36, 6, 5).unwrap()];
        let mut mw = tiny_model(7);
        let mut ow = Adam::new(&mw.store, OptimConfig::default()).unwrap();
        let log = weighted_step(&mut mw, &mut ow, &mb, &cfg_n(1), 1, 1.0).unwrap();
        assert_eq!(log.weights, vec![1.0]);

        let mut mu = tiny_model(7);
        let mut ou = Adam::new(&mu.store, OptimConfig::default()).unwrap();
        unweighted_step(&mut mu, &mut ou, &mb, 1, 1.0).unwrap();
        assert_eq!(mw.store.le_bytes(), mu.store.le_bytes());
    }

    #[test]
    fn unweighted_step_logs_pseudo_entries() {
        let mbs = two_microbatches();
        let mut m = tiny_model(4);
        let mut opt = Adam::new(&m.store, OptimConfig::default()).unwrap();
        let log = unweighted_step(&mut m, &mut opt, &mbs, 1, 1.0).unwrap();
        assert_eq!(log.tau, 0.0);
        assert_eq!(log.raw_scores, vec![0.0, 0.0]);
        assert_eq!(log.weights, vec![0.5, 0.5]);
        assert!((log.weight_entropy - 2.0f64.ln()).abs() < 1e-12);
        let l0 = m.loss(&mbs[0], 1.0);
        assert!(l0.is_ok());
    }

    #[test]
    fn duplicated_halves_sum_to_twice_one_gradient() {
        let mb = pack_batch(&[ex(vec![2, 3, 35, 4], vec![35, 5, 6])], 36, 6, 5).unwrap();
        let m = tiny_model(4);
        let g = m.grad(&mb, 1.0).unwrap().1;
        let summed = aggregate_sum(&[g.clone(), g.clone()]).unwrap();
        for i in 0..g.len() {
            for (a, b) in summed.tensor(i).data().iter().zip(g.tensor(i).data()) {
                assert!((a - 2.0 * b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_finite_scores_abort_the_step() {
        let mut m = tiny_model(4);
        let idx = m.store.index_of("lm_head", "w").unwrap();
        for v in m.store.value_mut(idx).data_mut() {
            *v *= 1e165;
        }
        let mut opt = Adam::new(&m.store, OptimConfig::default()).unwrap();
        let err = weighted_step(&mut m, &mut opt, &two_microbatches(), &cfg_n(2), 1, 1.0)
            .unwrap_err();
        assert!(err.to_string().contains("microbatch"), "{err}");
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut cfg = cfg_n(0);
        assert!(cfg.validate().is_err());
        cfg.n_microbatches = 2;
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
        cfg.epsilon = NORM_EPS;
        cfg.tau1 = f64::NAN;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_follow_score_order(
            scores in prop::collection::vec(-50.0f64..50.0, 1..12),
            tau in -4.0f64..4.0,
        ) {
            let w = softmax_weights(&norm(scores.clone()), tau).unwrap();
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if scores[i] == scores[j] {
                        prop_assert!((w[i] - w[j]).abs() < 1e-12);
                    } else if (scores[i] > scores[j]) == (tau > 0.0) && tau != 0.0 {
                        prop_assert!(w[i] >= w[j]);
                    }
                }
            }
        }

        #[test]
        fn weights_ignore_score_shift_and_scale(
            scores in prop::collection::vec(-10.0f64..10.0, 2..10),
            shift in -100.0f64..100.0,
            mult in 0.1f64..10.0,
            tau in -2.0f64..2.0,
        ) {
            let spread = ScoreArray::raw(scores.clone()).population_variance();
            prop_assume!(spread > 0.01);
            let base = softmax_weights(&norm(scores.clone()), tau).unwrap();
            let shifted = softmax_weights(
                &norm(scores.iter().map(|s| s + shift).collect()), tau).unwrap();
            let scaled = softmax_weights(
                &norm(scores.iter().map(|s| s * mult).collect()), tau).unwrap();
            for i in 0..base.len() {
                prop_assert!((base[i] - shifted[i]).abs() < 1e-9);
                prop_assert!((base[i] - scaled[i]).abs() < 1e-3);
            }
        }
    }
}
