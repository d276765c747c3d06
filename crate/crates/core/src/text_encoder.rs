//! Query encoder: CLS-token embeddings tuned so paraphrases land together.
//!
//! A small bidirectional transformer embeds a query as the L2-normalized
//! hidden state of a prepended CLS token. Training runs in two phases:
//! a masked-token warm-up over raw corpus text (a cold random encoder gives
//! the contrastive phase nothing to contrast), then InfoNCE tuning over
//! (paraphrase, original) pairs with in-batch negatives, so cosine
//! similarity between a query and its paraphrases rises above similarity to
//! unrelated queries.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Tokenizer;
use crate::numerics::io::{digest_tensors, load_tensor_map, save_tensors};
use crate::numerics::{CeReduction, Graph, Optimizer, Rng, Tensor, TensorIoError, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("token sequence must be nonempty")]
    EmptyTokens,
    #[error("sequence of {len} tokens exceeds max_seq_len {max} (CLS included)")]
    SequenceTooLong { len: usize, max: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f32),
    #[error("contrastive training needs at least one pair")]
    EmptyPairs,
    #[error("contrastive batch misaligned: {anchors} anchors vs {positives} positives (need >= 2 aligned rows)")]
    MisalignedBatch { anchors: usize, positives: usize },
    #[error("checkpoint problem: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_embed: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl EncoderConfig {
    pub fn default_with_vocab(vocab_size: usize) -> Self {
        EncoderConfig { d_embed: 64, n_layers: 2, n_heads: 4, ffn_hidden: 256, vocab_size, max_seq_len: 32 }
    }

    fn validate(&self) {
        assert!(self.d_embed % self.n_heads == 0, "d_embed must divide evenly into heads");
        assert!(self.vocab_size > Tokenizer::UNK as usize);
        assert!(self.n_layers > 0 && self.max_seq_len > 1);
    }
}

#[derive(Clone)]
struct Block {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

struct BlockVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

pub struct EncVars {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BlockVars>,
    ln_f_g: Var,
    ln_f_b: Var,
    mlm_head: Var,
    ordered: Vec<Var>,
}

impl EncVars {
    pub fn ordered(&self) -> &[Var] {
        &self.ordered
    }
}

#[derive(Clone)]
pub struct TextEncoder {
    pub cfg: EncoderConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    ln_f_g: Tensor,
    ln_f_b: Tensor,
    mlm_head: Tensor,
}

const LN_EPS: f32 = 1e-5;
const NORM_EPS: f32 = 1e-8;
const MASKED: f32 = -1e9;

impl TextEncoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Self {
        cfg.validate();
        let mut rng = Rng::derived(seed, "encoder/init");
        let d = cfg.d_embed;
        let resid_std = 0.02 / libm::sqrtf((2 * cfg.n_layers) as f32);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1_g: Tensor::ones(vec![d]),
                ln1_b: Tensor::zeros(vec![d]),
                wq: rng.normal_tensor(vec![d, d], 0.02),
                wk: rng.normal_tensor(vec![d, d], 0.02),
                wv: rng.normal_tensor(vec![d, d], 0.02),
                wo: rng.normal_tensor(vec![d, d], resid_std),
                ln2_g: Tensor::ones(vec![d]),
                ln2_b: Tensor::zeros(vec![d]),
                w1: rng.normal_tensor(vec![d, cfg.ffn_hidden], 0.02),
                b1: Tensor::zeros(vec![cfg.ffn_hidden]),
                w2: rng.normal_tensor(vec![cfg.ffn_hidden, d], resid_std),
                b2: Tensor::zeros(vec![d]),
            })
            .collect();
        TextEncoder {
            tok_emb: rng.normal_tensor(vec![cfg.vocab_size, d], 0.02),
            pos_emb: rng.normal_tensor(vec![cfg.max_seq_len, d], 0.02),
            blocks,
            ln_f_g: Tensor::ones(vec![d]),
            ln_f_b: Tensor::zeros(vec![d]),
            mlm_head: rng.normal_tensor(vec![d, cfg.vocab_size], 0.02),
            cfg,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ] {
                out.push((format!("block{i}.{suffix}"), t));
            }
        }
        out.push(("ln_f_g".into(), &self.ln_f_g));
        out.push(("ln_f_b".into(), &self.ln_f_b));
        out.push(("mlm_head".into(), &self.mlm_head));
        out
    }

    /// Mutable views of every parameter, in [`EncVars::ordered`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([&mut self.ln_f_g, &mut self.ln_f_b, &mut self.mlm_head]);
        out
    }

    pub fn params_into_graph(&self, g: &mut Graph, trainable: bool) -> EncVars {
        let mut lift = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.input(t.clone()) };
        let tok_emb = lift(&self.tok_emb);
        let pos_emb = lift(&self.pos_emb);
        let mut ordered = vec![tok_emb, pos_emb];
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let bv = BlockVars {
                ln1_g: lift(&b.ln1_g),
                ln1_b: lift(&b.ln1_b),
                wq: lift(&b.wq),
                wk: lift(&b.wk),
                wv: lift(&b.wv),
                wo: lift(&b.wo),
                ln2_g: lift(&b.ln2_g),
                ln2_b: lift(&b.ln2_b),
                w1: lift(&b.w1),
                b1: lift(&b.b1),
                w2: lift(&b.w2),
                b2: lift(&b.b2),
            };
            ordered.extend([
                bv.ln1_g, bv.ln1_b, bv.wq, bv.wk, bv.wv, bv.wo, bv.ln2_g, bv.ln2_b, bv.w1,
                bv.b1, bv.w2, bv.b2,
            ]);
            blocks.push(bv);
        }
        let ln_f_g = lift(&self.ln_f_g);
        let ln_f_b = lift(&self.ln_f_b);
        let mlm_head = lift(&self.mlm_head);
        ordered.extend([ln_f_g, ln_f_b, mlm_head]);
        EncVars { tok_emb, pos_emb, blocks, ln_f_g, ln_f_b, mlm_head, ordered }
    }

    /// Prepends CLS and right-pads each sequence; returns the flat token
    /// buffer, the key-padding mask data, and the padded length.
    fn pack(&self, seqs: &[&[u32]]) -> Result<(Vec<u32>, Vec<f32>, usize), EncoderError> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(EncoderError::EmptyTokens);
        }
        let t = 1 + seqs.iter().map(|s| s.len()).max().unwrap();
        if t > self.cfg.max_seq_len {
            return Err(EncoderError::SequenceTooLong { len: t, max: self.cfg.max_seq_len });
        }
        let b = seqs.len();
        let mut tokens = vec![Tokenizer::PAD; b * t];
        let mut mask = vec![MASKED; b * t];
        for (r, s) in seqs.iter().enumerate() {
            tokens[r * t] = Tokenizer::CLS;
            tokens[r * t + 1..r * t + 1 + s.len()].copy_from_slice(s);
            for j in 0..=s.len() {
                mask[r * t + j] = 0.0;
            }
        }
        Ok((tokens, mask, t))
    }

    fn layer_norm_affine(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let scaled = g.mul(n, gamma);
        g.add(scaled, beta)
    }

    /// Bidirectional stack over `[b, t]` tokens with a key-padding mask;
    /// returns flat `[b * t, d]` hidden states after the final norm.
    pub fn encode_stack(
        &self,
        g: &mut Graph,
        vars: &EncVars,
        tokens: &[u32],
        mask_data: &[f32],
        b: usize,
        t: usize,
    ) -> Var {
        let d = self.cfg.d_embed;
        let heads = self.cfg.n_heads;
        let scale = 1.0 / libm::sqrtf((d / heads) as f32);
        let tok = g.embedding(vars.tok_emb, tokens);
        let pos_ids: Vec<u32> = (0..b).flat_map(|_| 0..t as u32).collect();
        let pos = g.embedding(vars.pos_emb, &pos_ids);
        let sum = g.add(tok, pos);
        let mut x = g.reshape(sum, vec![b, t, d]);
        let mask = g.input(Tensor::new(vec![b, 1, 1, t], mask_data.to_vec()));
        for bv in &vars.blocks {
            let xf = g.reshape(x, vec![b * t, d]);
            let h = Self::layer_norm_affine(g, xf, bv.ln1_g, bv.ln1_b);
            let q = g.matmul(h, bv.wq);
            let k = g.matmul(h, bv.wk);
            let v = g.matmul(h, bv.wv);
            let q3 = g.reshape(q, vec![b, t, d]);
            let k3 = g.reshape(k, vec![b, t, d]);
            let v3 = g.reshape(v, vec![b, t, d]);
            let qh = g.split_heads(q3, heads);
            let kh = g.split_heads(k3, heads);
            let vh = g.split_heads(v3, heads);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let scores = g.add(scores, mask);
            let probs = g.softmax_last(scores);
            let ctx = g.matmul(probs, vh);
            let merged = g.merge_heads(ctx);
            let mf = g.reshape(merged, vec![b * t, d]);
            let proj = g.matmul(mf, bv.wo);
            let proj3 = g.reshape(proj, vec![b, t, d]);
            x = g.add(x, proj3);

            let xf = g.reshape(x, vec![b * t, d]);
            let h = Self::layer_norm_affine(g, xf, bv.ln2_g, bv.ln2_b);
            let u = g.matmul(h, bv.w1);
            let u = g.add(u, bv.b1);
            let u = g.gelu(u);
            let y = g.matmul(u, bv.w2);
            let y = g.add(y, bv.b2);
            let y3 = g.reshape(y, vec![b, t, d]);
            x = g.add(x, y3);
        }
        let xf = g.reshape(x, vec![b * t, d]);
        Self::layer_norm_affine(g, xf, vars.ln_f_g, vars.ln_f_b)
    }

    /// Unit-norm CLS embeddings `[b, d]` as a graph node.
    pub fn build_embeddings(
        &self,
        g: &mut Graph,
        vars: &EncVars,
        seqs: &[&[u32]],
    ) -> Result<Var, EncoderError> {
        let (tokens, mask, t) = self.pack(seqs)?;
        let b = seqs.len();
        let h = self.encode_stack(g, vars, &tokens, &mask, b, t);
        let h3 = g.reshape(h, vec![b, t, self.cfg.d_embed]);
        let cls = g.select_pos(h3, 0);
        Ok(g.l2_normalize(cls, NORM_EPS))
    }

    /// Eager batch embedding; rows are unit-norm.
    pub fn embed_batch(&self, seqs: &[&[u32]]) -> Result<Tensor, EncoderError> {
        let mut g = Graph::new();
        let vars = self.params_into_graph(&mut g, false);
        let z = self.build_embeddings(&mut g, &vars, seqs)?;
        Ok(g.value(z).clone())
    }

    /// Embeds one query; returns a `[d]` unit vector.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor, EncoderError> {
        let z = self.embed_batch(&[tokens])?;
        Ok(z.reshaped(vec![self.cfg.d_embed]))
    }

    // ---- persistence ----


    /// Hex digest over the full parameter set. Two checkpoints with the same
    /// hash hold bitwise-identical weights.
    pub fn content_hash(&self) -> String {
        let named = self.named_params();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        digest_tensors(&refs)
    }

    pub fn save(&self, dir: &Path, corpus_hash: &str) -> Result<(), EncoderError> {
        fs::create_dir_all(dir)?;
        let named: Vec<(String, Tensor)> =
            self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_tensors(&dir.join("encoder.tensors"), &refs)?;
        let meta = EncoderMeta { config: self.cfg, corpus_hash: corpus_hash.to_string() };
        fs::write(dir.join("encoder_config.json"), serde_json::to_string_pretty(&meta).unwrap())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, String), EncoderError> {
        let meta: EncoderMeta =
            serde_json::from_str(&fs::read_to_string(dir.join("encoder_config.json"))?)
                .map_err(|e| EncoderError::Checkpoint(format!("bad sidecar: {e}")))?;
        let mut map = load_tensor_map(&dir.join("encoder.tensors"))?;
        let mut enc = TextEncoder::new(meta.config, 0);
        let expected: Vec<(String, Vec<usize>)> = enc
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        for ((name, shape), slot) in expected.iter().zip(enc.params_mut()) {
            let tensor = map
                .remove(name)
                .ok_or_else(|| EncoderError::Checkpoint(format!("missing tensor {name}")))?;
            if tensor.shape() != &shape[..] {
                return Err(EncoderError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            *slot = tensor;
        }
        if let Some(extra) = map.keys().next() {
            return Err(EncoderError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok((enc, meta.corpus_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    config: EncoderConfig,
    corpus_hash: String,
}

// ---- contrastive objective ----

/// Aligned anchor/positive embedding rows plus the softmax temperature.
pub struct ContrastiveBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
    pub tau: f32,
}

impl ContrastiveBatch {
    pub fn new(anchors: Tensor, positives: Tensor, tau: f32) -> Result<Self, EncoderError> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(EncoderError::BadTemperature(tau));
        }
        let (a, p) = (anchors.shape().to_vec(), positives.shape().to_vec());
        let rows = |s: &[usize]| if s.len() == 2 { s[0] } else { 0 };
        if a != p || a.len() != 2 || rows(&a) < 2 {
            return Err(EncoderError::MisalignedBatch { anchors: rows(&a), positives: rows(&p) });
        }
        Ok(ContrastiveBatch { anchors, positives, tau })
    }
}

/// Mean over anchors of the softmax cross-entropy that puts each anchor's
/// own positive ahead of every other positive in the batch:
/// `-(1/B) sum_i log( exp(cos(a_i, p_i)/tau) / sum_j exp(cos(a_i, p_j)/tau) )`.
pub fn infonce_loss(batch: &ContrastiveBatch) -> f32 {
    let mut g = Graph::new();
    let a = g.input(batch.anchors.clone());
    let p = g.input(batch.positives.clone());
    let loss = build_infonce(&mut g, a, p, batch.tau);
    g.value(loss).item()
}

/// Graph form of the InfoNCE loss over `[B, d]` embedding nodes.
pub fn build_infonce(g: &mut Graph, anchors: Var, positives: Var, tau: f32) -> Var {
    let b = g.value(anchors).shape()[0];
    let an = g.l2_normalize(anchors, NORM_EPS);
    let pn = g.l2_normalize(positives, NORM_EPS);
    let sims = g.matmul_nt(an, pn);
    let logits = g.scale(sims, 1.0 / tau);
    let targets: Vec<u32> = (0..b as u32).collect();
    let mask = vec![1.0f32; b];
    g.cross_entropy(logits, &targets, &mask, CeReduction::Mean)
}

// ---- training ----

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub mask_prob: f32,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig { epochs: 40, batch_size: 64, lr: 1e-3, mask_prob: 0.15, seed: 17 }
    }
}

/// Masked-token warm-up: some input words become UNK and the encoder must
/// recover them. Returns per-epoch mean losses.
pub fn warmup_mlm(
    enc: &mut TextEncoder,
    texts: &[Vec<u32>],
    cfg: &WarmupConfig,
) -> Result<Vec<f32>, EncoderError> {
    if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
        return Err(EncoderError::EmptyTokens);
    }
    let mut opt = Optimizer::adamw_default(cfg.lr, 0.0);
    let mut order: Vec<usize> = (0..texts.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = Rng::derived(cfg.seed, &format!("encoder/warmup/epoch{epoch}"));
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<&[u32]> = chunk.iter().map(|&i| texts[i].as_slice()).collect();
            let (clean, maskv, t) = enc.pack(&seqs)?;
            let b = seqs.len();
            let mut tokens = clean.clone();
            let mut labels = vec![0u32; b * t];
            let mut loss_mask = vec![0.0f32; b * t];
            let mut any = false;
            for (r, s) in seqs.iter().enumerate() {
                for j in 0..s.len() {
                    let idx = r * t + 1 + j;
                    if rng.uniform() < cfg.mask_prob {
                        labels[idx] = tokens[idx];
                        tokens[idx] = Tokenizer::UNK;
                        loss_mask[idx] = 1.0;
                        any = true;
                    }
                }
            }
            if !any {
                // Guarantee signal even on unlucky draws.
                let r = rng.below(b);
                let j = rng.below(seqs[r].len());
                let idx = r * t + 1 + j;
                labels[idx] = tokens[idx];
                tokens[idx] = Tokenizer::UNK;
                loss_mask[idx] = 1.0;
            }
            let mut g = Graph::new();
            let vars = enc.params_into_graph(&mut g, true);
            let h = enc.encode_stack(&mut g, &vars, &tokens, &maskv, b, t);
            let logits = g.matmul(h, vars.mlm_head);
            let loss = g.cross_entropy(logits, &labels, &loss_mask, CeReduction::Mean);
            g.backward(loss).expect("loss is scalar");
            epoch_loss += g.value(loss).item() as f64;
            batches += 1;
            let grads: Vec<Option<Tensor>> =
                vars.ordered().iter().map(|&v| g.grad(v).cloned()).collect();
            drop(g);
            let mut params = enc.params_mut();
            opt.step_refs(&mut params, &grads).expect("gradient shapes track parameters");
        }
        losses.push((epoch_loss / batches.max(1) as f64) as f32);
    }
    Ok(losses)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TuneConfig {
    pub tau: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig { tau: 0.1, epochs: 30, batch_size: 32, lr: 5e-4, seed: 19 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneReport {
    pub epoch_losses: Vec<f32>,
}

/// Contrastive fine-tuning over (paraphrase, original) token pairs. The
/// pairs must come from held-out pseudo facts so tuning never peeks at the
/// facts that will be edited.
pub fn tune_encoder(
    enc: &mut TextEncoder,
    pairs: &[(Vec<u32>, Vec<u32>)],
    cfg: &TuneConfig,
) -> Result<TuneReport, EncoderError> {
    if cfg.tau <= 0.0 || !cfg.tau.is_finite() {
        return Err(EncoderError::BadTemperature(cfg.tau));
    }
    if pairs.is_empty() {
        return Err(EncoderError::EmptyPairs);
    }
    let mut opt = Optimizer::adamw_default(cfg.lr, 0.0);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = Rng::derived(cfg.seed, &format!("encoder/tune/epoch{epoch}"));
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        let mut start = 0;
        while start < order.len() {
            let mut end = (start + cfg.batch_size).min(order.len());
            // A lone trailing pair cannot form a contrastive batch; fold it
            // into the previous one.
            if order.len() - end == 1 {
                end = order.len();
            }
            let chunk = &order[start..end];
            start = end;
            if chunk.len() < 2 {
                continue;
            }
            let anchors: Vec<&[u32]> = chunk.iter().map(|&i| pairs[i].0.as_slice()).collect();
            let positives: Vec<&[u32]> = chunk.iter().map(|&i| pairs[i].1.as_slice()).collect();
            let mut g = Graph::new();
            let vars = enc.params_into_graph(&mut g, true);
            let za = enc.build_embeddings(&mut g, &vars, &anchors)?;
            let zp = enc.build_embeddings(&mut g, &vars, &positives)?;
            let loss = build_infonce(&mut g, za, zp, cfg.tau);
            g.backward(loss).expect("loss is scalar");
            epoch_loss += g.value(loss).item() as f64;
            batches += 1;
            let grads: Vec<Option<Tensor>> =
                vars.ordered().iter().map(|&v| g.grad(v).cloned()).collect();
            drop(g);
            let mut params = enc.params_mut();
            opt.step_refs(&mut params, &grads).expect("gradient shapes track parameters");
        }
        if batches == 0 {
            return Err(EncoderError::MisalignedBatch { anchors: pairs.len(), positives: pairs.len() });
        }
        epoch_losses.push((epoch_loss / batches as f64) as f32);
    }
    Ok(TuneReport { epoch_losses })
}

/// Fraction of pairs whose anchor sits closer to its own original than to
/// the next pair's original; 1.0 means clean separation.
pub fn paraphrase_separation(
    enc: &TextEncoder,
    pairs: &[(Vec<u32>, Vec<u32>)],
) -> Result<f32, EncoderError> {
    if pairs.len() < 2 {
        return Err(EncoderError::EmptyPairs);
    }
    let anchors: Vec<&[u32]> = pairs.iter().map(|(a, _)| a.as_slice()).collect();
    let originals: Vec<&[u32]> = pairs.iter().map(|(_, o)| o.as_slice()).collect();
    let za = enc.embed_batch(&anchors)?;
    let zo = enc.embed_batch(&originals)?;
    let d = enc.cfg.d_embed;
    let n = pairs.len();
    let dot = |a: &[f32], b: &[f32]| -> f32 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let mut hits = 0usize;
    let mut compared = 0usize;
    for i in 0..n {
        // The foil must be a genuinely different original; several pairs in
        // a row can share one (one pair per paraphrase).
        let Some(j) = (1..n).map(|k| (i + k) % n).find(|&j| pairs[j].1 != pairs[i].1) else {
            continue;
        };
        let a = &za.data()[i * d..(i + 1) * d];
        let own = dot(a, &zo.data()[i * d..(i + 1) * d]);
        let other = dot(a, &zo.data()[j * d..(j + 1) * d]);
        hits += (own > other) as usize;
        compared += 1;
    }
    if compared == 0 {
        return Err(EncoderError::EmptyPairs);
    }
    Ok(hits as f32 / compared as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig, Split};

    fn tiny_corpus() -> crate::corpus::Corpus {
        generate_corpus(&CorpusConfig { seed: 3, edit: 6, pseudo: 10, irrelevant: 6, paraphrases: 3 })
            .unwrap()
    }

    fn cold_encoder(vocab: usize) -> TextEncoder {
        TextEncoder::new(EncoderConfig::default_with_vocab(vocab), 5)
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let corpus = tiny_corpus();
        let enc = cold_encoder(corpus.tokenizer.vocab_size());
        let q = &corpus.facts[0].query;
        let a = enc.embed(q).unwrap();
        let b = enc.embed(q).unwrap();
        assert!((a.l2_norm() - 1.0).abs() < 1e-6);
        assert!(a.bits_equal(&b));
    }

    #[test]
    fn empty_input_is_rejected() {
        let enc = cold_encoder(50);
        assert!(matches!(enc.embed(&[]), Err(EncoderError::EmptyTokens)));
    }

    #[test]
    fn identical_embeddings_give_log_b() {
        let row = vec![0.3f32, -0.4, 0.5, 0.1];
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let t = Tensor::new(vec![5, 4], data);
        let batch = ContrastiveBatch::new(t.clone(), t, 0.1).unwrap();
        let loss = infonce_loss(&batch);
        assert!((loss - libm::logf(5.0)).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn opposed_pair_loss_is_nearly_zero() {
        // sim(i,i) = 1, sim(i,j) = -1 at tau 0.1 gives log(1 + e^-20).
        let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, -1.0, 0.0]);
        let batch = ContrastiveBatch::new(a.clone(), a, 0.1).unwrap();
        let loss = infonce_loss(&batch);
        let expected = 2.061e-9f32;
        assert!((loss - expected).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let mut rng = Rng::derived(8, "encoder/test/oracle");
        let a = rng.normal_tensor(vec![8, 16], 1.0);
        let p = rng.normal_tensor(vec![8, 16], 1.0);
        let tau = 0.17f64;

        // Independent direct summation in f64, cosine written out longhand.
        let cos = |x: &[f32], y: &[f32]| -> f64 {
            let (mut d, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
            for (xi, yi) in x.iter().zip(y) {
                d += *xi as f64 * *yi as f64;
                nx += *xi as f64 * *xi as f64;
                ny += *yi as f64 * *yi as f64;
            }
            d / (nx.sqrt() * ny.sqrt())
        };
        let row = |t: &Tensor, i: usize| t.data()[i * 16..(i + 1) * 16].to_vec();
        let mut oracle = 0.0f64;
        for i in 0..8 {
            let num = (cos(&row(&a, i), &row(&p, i)) / tau).exp();
            let mut den = 0.0f64;
            for j in 0..8 {
                den += (cos(&row(&a, i), &row(&p, j)) / tau).exp();
            }
            oracle += -(num / den).ln();
        }
        oracle /= 8.0;

        let batch = ContrastiveBatch::new(a, p, tau as f32).unwrap();
        let loss = infonce_loss(&batch) as f64;
        assert!((loss - oracle).abs() < 1e-6, "loss {loss} oracle {oracle}");
    }

    #[test]
    fn loss_is_invariant_under_common_rotation() {
        let mut rng = Rng::derived(9, "encoder/test/rotation");
        let a = rng.normal_tensor(vec![6, 16], 1.0);
        let p = rng.normal_tensor(vec![6, 16], 1.0);
        let base = infonce_loss(&ContrastiveBatch::new(a.clone(), p.clone(), 0.1).unwrap());

        // Orthogonal map built from a handful of plane rotations.
        let mut r = vec![0.0f32; 16 * 16];
        for i in 0..16 {
            r[i * 16 + i] = 1.0;
        }
        for (i, j) in [(0usize, 5usize), (1, 9), (2, 14), (3, 7), (6, 11)] {
            let theta = rng.normal();
            let (c, s) = (libm::cosf(theta), libm::sinf(theta));
            for k in 0..16 {
                let vi = r[k * 16 + i];
                let vj = r[k * 16 + j];
                r[k * 16 + i] = c * vi - s * vj;
                r[k * 16 + j] = s * vi + c * vj;
            }
        }
        let rot = Tensor::new(vec![16, 16], r);
        let apply = |t: &Tensor| -> Tensor {
            let mut g = Graph::new();
            let x = g.input(t.clone());
            let m = g.input(rot.clone());
            let y = g.matmul(x, m);
            g.value(y).clone()
        };
        let rotated = infonce_loss(&ContrastiveBatch::new(apply(&a), apply(&p), 0.1).unwrap());
        assert!((base - rotated).abs() < 1e-5, "base {base} rotated {rotated}");
    }

    #[test]
    fn bad_batches_are_rejected() {
        let t = Tensor::new(vec![2, 4], vec![0.0; 8]);
        assert!(matches!(
            ContrastiveBatch::new(t.clone(), t.clone(), 0.0),
            Err(EncoderError::BadTemperature(_))
        ));
        let one = Tensor::new(vec![1, 4], vec![0.0; 4]);
        assert!(matches!(
            ContrastiveBatch::new(one.clone(), one, 0.1),
            Err(EncoderError::MisalignedBatch { .. })
        ));
        let odd = Tensor::new(vec![3, 4], vec![0.0; 12]);
        assert!(matches!(
            ContrastiveBatch::new(t, odd, 0.1),
            Err(EncoderError::MisalignedBatch { .. })
        ));
    }

    #[test]
    fn zero_epoch_tuning_leaves_weights_untouched() {
        let corpus = tiny_corpus();
        let mut enc = cold_encoder(corpus.tokenizer.vocab_size());
        let before: Vec<Tensor> =
            enc.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = corpus
            .split(Split::Pseudo)
            .flat_map(|f| f.paraphrases.iter().map(|p| (p.clone(), f.query.clone())))
            .collect();
        tune_encoder(&mut enc, &pairs, &TuneConfig { epochs: 0, ..TuneConfig::default() })
            .unwrap();
        for ((_, after), before) in enc.named_params().iter().zip(&before) {
            assert!(after.bits_equal(before));
        }
    }

    #[test]
    fn empty_pairs_are_rejected() {
        let mut enc = cold_encoder(50);
        assert!(matches!(
            tune_encoder(&mut enc, &[], &TuneConfig::default()),
            Err(EncoderError::EmptyPairs)
        ));
    }

    #[test]
    fn warmup_then_tuning_decreases_contrastive_loss() {
        let corpus = tiny_corpus();
        let mut enc = cold_encoder(corpus.tokenizer.vocab_size());
        let texts: Vec<Vec<u32>> = corpus
            .facts
            .iter()
            .flat_map(|f| std::iter::once(f.query.clone()).chain(f.paraphrases.iter().cloned()))
            .collect();
        warmup_mlm(&mut enc, &texts, &WarmupConfig { epochs: 10, ..WarmupConfig::default() })
            .unwrap();
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = corpus
            .split(Split::Pseudo)
            .flat_map(|f| f.paraphrases.iter().map(|p| (p.clone(), f.query.clone())))
            .collect();
        let report = tune_encoder(
            &mut enc,
            &pairs,
            &TuneConfig { epochs: 12, ..TuneConfig::default() },
        )
        .unwrap();
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(last <= first, "loss went {first} -> {last}");
        assert!(paraphrase_separation(&enc, &pairs).unwrap() > 0.5);
    }

    #[test]
    fn token_order_matters_after_warmup() {
        let corpus = tiny_corpus();
        let mut enc = cold_encoder(corpus.tokenizer.vocab_size());
        let texts: Vec<Vec<u32>> = corpus.facts.iter().map(|f| f.query.clone()).collect();
        warmup_mlm(&mut enc, &texts, &WarmupConfig { epochs: 3, ..WarmupConfig::default() })
            .unwrap();
        let fwd = corpus.facts[0].query.clone();
        let mut rev = fwd.clone();
        rev.reverse();
        let za = enc.embed(&fwd).unwrap();
        let zb = enc.embed(&rev).unwrap();
        assert!(za.max_abs_diff(&zb) > 0.0, "embedding collapsed to a bag of words");
    }

    #[test]
    fn checkpoint_round_trip_reproduces_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus();
        let enc = cold_encoder(corpus.tokenizer.vocab_size());
        enc.save(dir.path(), "hash-probe").unwrap();
        let (back, hash) = TextEncoder::load(dir.path()).unwrap();
        assert_eq!(hash, "hash-probe");
        let q = &corpus.facts[2].query;
        assert!(enc.embed(q).unwrap().bits_equal(&back.embed(q).unwrap()));
    }
}
