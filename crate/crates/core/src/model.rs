//! A small pre-layer-norm encoder-decoder transformer for the span
//! denoising objective. Layers are addressable by id so gradient dot
//! products can be restricted to subsets (the default is the first encoder
//! and first decoder block).
//!
//! Layer ids, in parameter order: `enc_emb` (encoder token table), `dec_emb`
//! (decoder token table), `pos` (both position tables), `enc_0..`,
//! `dec_0..`, `lm_head`. The last block on each side also carries that
//! stack's final norm (`lnf_w`, `lnf_b`).

use serde::{Deserialize, Serialize};

use crate::batch::PackedBatch;
use crate::error::{Error, Result};
use crate::params::{Gradients, LayerSet, ParamStore};
use crate::rng::{derive, fill_trunc_normal, rng_from};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// Additive attention-mask value for blocked key positions. Low enough that
/// exp underflows to exactly 0, so masked keys get exactly zero weight and
/// exactly zero gradient.
pub const MASK_OFF: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub max_input_len: usize,
    pub max_target_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            d_model: 64,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            max_input_len: 64,
            max_target_len: 24,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < crate::vocab::MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size must be at least {}, got {}",
                crate::vocab::MIN_VOCAB,
                self.vocab_size
            )));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("max_input_len", self.max_input_len),
            ("max_target_len", self.max_target_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Closed-form scalar parameter count for this architecture.
    pub fn param_count(&self) -> usize {
        let (v, d) = (self.vocab_size, self.d_model);
        let enc_block = 12 * d * d + 4 * d;
        let dec_block = 16 * d * d + 6 * d;
        2 * v * d                                  // token tables
            + (self.max_input_len + self.max_target_len) * d // position tables
            + self.n_enc_layers * enc_block + 2 * d // encoder stack + final norm
            + self.n_dec_layers * dec_block + 2 * d // decoder stack + final norm
            + d * v                                 // lm head
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    pub fn build(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let (v, d) = (cfg.vocab_size, cfg.d_model);
        let mut rng = rng_from(derive(cfg.seed, "init", &[]));
        let mut store = ParamStore::new();
        let mut rand_t = |shape: Vec<usize>| {
            let mut t = Tensor::zeros(shape);
            fill_trunc_normal(&mut rng, INIT_STD, t.data_mut());
            t
        };
        let ones = |n: usize| Tensor::new(vec![n], vec![1.0; n]).unwrap();

        store.insert("enc_emb", "tok", rand_t(vec![v, d]));
        store.insert("dec_emb", "tok", rand_t(vec![v, d]));
        store.insert("pos", "enc", rand_t(vec![cfg.max_input_len, d]));
        store.insert("pos", "dec", rand_t(vec![cfg.max_target_len, d]));

        for i in 0..cfg.n_enc_layers {
            let l = format!("enc_{i}");
            store.insert(&l, "ln1_w", ones(d));
            store.insert(&l, "ln1_b", Tensor::zeros(vec![d]));
            for name in ["wq", "wk", "wv", "wo"] {
                store.insert(&l, name, rand_t(vec![d, d]));
            }
            store.insert(&l, "ln2_w", ones(d));
            store.insert(&l, "ln2_b", Tensor::zeros(vec![d]));
            store.insert(&l, "ffn_w1", rand_t(vec![d, 4 * d]));
            store.insert(&l, "ffn_w2", rand_t(vec![4 * d, d]));
            if i == cfg.n_enc_layers - 1 {
                store.insert(&l, "lnf_w", ones(d));
                store.insert(&l, "lnf_b", Tensor::zeros(vec![d]));
            }
        }
        for j in 0..cfg.n_dec_layers {
            let l = format!("dec_{j}");
            store.insert(&l, "ln1_w", ones(d));
            store.insert(&l, "ln1_b", Tensor::zeros(vec![d]));
            for name in ["wq", "wk", "wv", "wo"] {
                store.insert(&l, name, rand_t(vec![d, d]));
            }
            store.insert(&l, "ln2_w", ones(d));
            store.insert(&l, "ln2_b", Tensor::zeros(vec![d]));
            for name in ["cq", "ck", "cv", "co"] {
                store.insert(&l, name, rand_t(vec![d, d]));
            }
            store.insert(&l, "ln3_w", ones(d));
            store.insert(&l, "ln3_b", Tensor::zeros(vec![d]));
            store.insert(&l, "ffn_w1", rand_t(vec![d, 4 * d]));
            store.insert(&l, "ffn_w2", rand_t(vec![4 * d, d]));
            if j == cfg.n_dec_layers - 1 {
                store.insert(&l, "lnf_w", ones(d));
                store.insert(&l, "lnf_b", Tensor::zeros(vec![d]));
            }
        }
        store.insert("lm_head", "w", rand_t(vec![d, v]));

        debug_assert_eq!(store.num_scalars(), cfg.param_count());
        Ok(Model { cfg, store })
    }

    pub fn layer_ids(&self) -> &[String] {
        self.store.layer_ids()
    }

    /// The first encoder block plus the first decoder block.
    pub fn default_layer_set(&self) -> LayerSet {
        LayerSet::from_ids(["enc_0", "dec_0"]).unwrap()
    }

    fn check_batch(&self, batch: &PackedBatch) -> Result<()> {
        if batch.batch_size == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        if batch.enc_len > self.cfg.max_input_len || batch.dec_len > self.cfg.max_target_len {
            return Err(Error::Invalid(format!(
                "batch lengths ({}, {}) exceed model maxima ({}, {})",
                batch.enc_len, batch.dec_len, self.cfg.max_input_len, self.cfg.max_target_len
            )));
        }
        let v = self.cfg.vocab_size;
        if let Some(&bad) = batch
            .enc_ids
            .iter()
            .chain(batch.dec_in.iter())
            .chain(batch.dec_tgt.iter())
            .find(|&&t| t >= v)
        {
            return Err(Error::Invalid(format!(
                "token {bad} outside model vocab {v}"
            )));
        }
        Ok(())
    }

    /// Flat `[b*dec_len, vocab]` logits for the packed batch.
    fn forward_logits(&self, tape: &mut Tape<'_>, batch: &PackedBatch) -> Result<NodeId> {
        let cfg = &self.cfg;
        let (b, le, ld) = (batch.batch_size, batch.enc_len, batch.dec_len);
        let (h, d) = (cfg.n_heads, cfg.d_model);
        let dh = d / h;

        // Encoder.
        let enc_tok_t = tape.param("enc_emb", "tok")?;
        let enc_tok = tape.embedding(enc_tok_t, &batch.enc_ids)?;
        let pos_enc_t = tape.param("pos", "enc")?;
        let enc_pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..le).collect();
        let enc_pos = tape.embedding(pos_enc_t, &enc_pos_ids)?;
        let mut x = tape.add(enc_tok, enc_pos)?;

        let enc_mask = tape.input(enc_self_mask(batch, h));
        for i in 0..cfg.n_enc_layers {
            let l = format!("enc_{i}");
            let x1 = ln(tape, &l, "ln1_w", "ln1_b", x)?;
            let att = attention(
                tape,
                &l,
                ["wq", "wk", "wv", "wo"],
                x1,
                x1,
                (b, le, le, h, dh),
                enc_mask,
            )?;
            x = tape.add(x, att)?;
            let x2 = ln(tape, &l, "ln2_w", "ln2_b", x)?;
            let f = ffn(tape, &l, x2)?;
            x = tape.add(x, f)?;
        }
        let enc_last = format!("enc_{}", cfg.n_enc_layers - 1);
        let enc_out = ln(tape, &enc_last, "lnf_w", "lnf_b", x)?;

        // Decoder.
        let dec_tok_t = tape.param("dec_emb", "tok")?;
        let dec_tok = tape.embedding(dec_tok_t, &batch.dec_in)?;
        let pos_dec_t = tape.param("pos", "dec")?;
        let dec_pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..ld).collect();
        let dec_pos = tape.embedding(pos_dec_t, &dec_pos_ids)?;
        let mut y = tape.add(dec_tok, dec_pos)?;

        let self_mask = tape.input(causal_mask(b, h, ld));
        let x_mask = tape.input(cross_mask(batch, h));
        for j in 0..cfg.n_dec_layers {
            let l = format!("dec_{j}");
            let y1 = ln(tape, &l, "ln1_w", "ln1_b", y)?;
            let att = attention(
                tape,
                &l,
                ["wq", "wk", "wv", "wo"],
                y1,
                y1,
                (b, ld, ld, h, dh),
                self_mask,
            )?;
            y = tape.add(y, att)?;
            let y2 = ln(tape, &l, "ln2_w", "ln2_b", y)?;
            let cross = attention(
                tape,
                &l,
                ["cq", "ck", "cv", "co"],
                y2,
                enc_out,
                (b, ld, le, h, dh),
                x_mask,
            )?;
            y = tape.add(y, cross)?;
            let y3 = ln(tape, &l, "ln3_w", "ln3_b", y)?;
            let f = ffn(tape, &l, y3)?;
            y = tape.add(y, f)?;
        }
        let dec_last = format!("dec_{}", cfg.n_dec_layers - 1);
        let dec_out = ln(tape, &dec_last, "lnf_w", "lnf_b", y)?;

        let head = tape.param("lm_head", "w")?;
        tape.matmul(dec_out, head, false, false)
    }

    /// Forward pass with the weighted span-denoising cross entropy as loss.
    /// `loss_scale` multiplies the loss (1 = off).
    pub fn loss_tape(&self, batch: &PackedBatch, loss_scale: f64) -> Result<(Tape<'_>, NodeId)> {
        self.check_batch(batch)?;
        if !loss_scale.is_finite() || loss_scale <= 0.0 {
            return Err(Error::Config(format!(
                "loss scale must be finite and positive, got {loss_scale}"
            )));
        }
        let mut tape = Tape::new(&self.store);
        let logits = self.forward_logits(&mut tape, batch)?;
        let raw = tape.cross_entropy(logits, &batch.dec_tgt, &batch.ce_weights)?;
        let loss = if loss_scale == 1.0 {
            raw
        } else {
            tape.scale(raw, loss_scale)
        };
        tape.set_loss(loss)?;
        Ok((tape, loss))
    }

    pub fn loss(&self, batch: &PackedBatch, loss_scale: f64) -> Result<f64> {
        self.loss_tape(batch, loss_scale)?.0.loss_value()
    }

    /// Loss and its gradients in one pass.
    pub fn grad(&self, batch: &PackedBatch, loss_scale: f64) -> Result<(f64, Gradients)> {
        let (tape, _) = self.loss_tape(batch, loss_scale)?;
        Ok((tape.loss_value()?, tape.backward()?))
    }

    /// `[batch, dec_len, vocab]` logits, for inspection and evaluation.
    pub fn logits(&self, batch: &PackedBatch) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut tape = Tape::new(&self.store);
        let flat = self.forward_logits(&mut tape, batch)?;
        let shaped = tape.reshape(
            flat,
            vec![batch.batch_size, batch.dec_len, self.cfg.vocab_size],
        )?;
        Ok(tape.value(shaped).clone())
    }
}

fn ln(tape: &mut Tape<'_>, layer: &str, w: &str, b: &str, x: NodeId) -> Result<NodeId> {
    let wn = tape.param(layer, w)?;
    let bn = tape.param(layer, b)?;
    tape.layer_norm(x, wn, bn)
}

fn ffn(tape: &mut Tape<'_>, layer: &str, x: NodeId) -> Result<NodeId> {
    let w1 = tape.param(layer, "ffn_w1")?;
    let w2 = tape.param(layer, "ffn_w2")?;
    let hidden = tape.matmul(x, w1, false, false)?;
    let act = tape.gelu(hidden);
    tape.matmul(act, w2, false, false)
}

/// `[b*lq, d]` queries against `[b*lk, d]` keys/values with an additive
/// `[b*h, lq, lk]` mask; dims = (b, lq, lk, h, dh).
fn attention(
    tape: &mut Tape<'_>,
    layer: &str,
    names: [&str; 4],
    x_q: NodeId,
    x_kv: NodeId,
    dims: (usize, usize, usize, usize, usize),
    mask: NodeId,
) -> Result<NodeId> {
    let (b, lq, lk, h, dh) = dims;
    let wq = tape.param(layer, names[0])?;
    let wk = tape.param(layer, names[1])?;
    let wv = tape.param(layer, names[2])?;
    let q = tape.matmul(x_q, wq, false, false)?;
    let k = tape.matmul(x_kv, wk, false, false)?;
    let v = tape.matmul(x_kv, wv, false, false)?;
    let qh = split_heads(tape, q, b, lq, h, dh)?;
    let kh = split_heads(tape, k, b, lk, h, dh)?;
    let vh = split_heads(tape, v, b, lk, h, dh)?;
    let scores = tape.batch_matmul(qh, kh, true)?;
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let masked = tape.add(scaled, mask)?;
    let attn = tape.softmax_rows(masked)?;
    let ctx = tape.batch_matmul(attn, vh, false)?;
    let merged = merge_heads(tape, ctx, b, lq, h, dh)?;
    let wo = tape.param(layer, names[3])?;
    tape.matmul(merged, wo, false, false)
}

/// `[b*l, h*dh] -> [b*h, l, dh]`
fn split_heads(tape: &mut Tape<'_>, x: NodeId, b: usize, l: usize, h: usize, dh: usize) -> Result<NodeId> {
    let x4 = tape.reshape(x, vec![b, l, h, dh])?;
    let sw = tape.swap_axes_12(x4)?;
    tape.reshape(sw, vec![b * h, l, dh])
}

/// `[b*h, l, dh] -> [b*l, h*dh]`
fn merge_heads(tape: &mut Tape<'_>, x: NodeId, b: usize, l: usize, h: usize, dh: usize) -> Result<NodeId> {
    let x4 = tape.reshape(x, vec![b, h, l, dh])?;
    let sw = tape.swap_axes_12(x4)?;
    tape.reshape(sw, vec![b * l, h * dh])
}

/// Pad key positions blocked for every query, replicated per head.
fn enc_self_mask(batch: &PackedBatch, h: usize) -> Tensor {
    let (b, le) = (batch.batch_size, batch.enc_len);
    let mut m = vec![0.0; b * h * le * le];
    for bi in 0..b {
        for ki in 0..le {
            if !batch.enc_valid[bi * le + ki] {
                for hi in 0..h {
                    for qi in 0..le {
                        m[((bi * h + hi) * le + qi) * le + ki] = MASK_OFF;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * h, le, le], m).unwrap()
}

/// Strictly-future key positions blocked.
fn causal_mask(b: usize, h: usize, ld: usize) -> Tensor {
    let mut m = vec![0.0; b * h * ld * ld];
    for g in 0..b * h {
        for qi in 0..ld {
            for ki in qi + 1..ld {
                m[(g * ld + qi) * ld + ki] = MASK_OFF;
            }
        }
    }
    Tensor::new(vec![b * h, ld, ld], m).unwrap()
}

/// Encoder pad positions blocked as cross-attention keys.
fn cross_mask(batch: &PackedBatch, h: usize) -> Tensor {
    let (b, le, ld) = (batch.batch_size, batch.enc_len, batch.dec_len);
    let mut m = vec![0.0; b * h * ld * le];
    for bi in 0..b {
        for ki in 0..le {
            if !batch.enc_valid[bi * le + ki] {
                for hi in 0..h {
                    for qi in 0..ld {
                        m[((bi * h + hi) * ld + qi) * le + ki] = MASK_OFF;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * h, ld, le], m).unwrap()
}
