//! Small decoder-only transformer with a single-neuron FFN attach hook.
//!
//! The model is the editable artifact everything else revolves around. It is
//! a standard pre-norm causal transformer (learned absolute positions,
//! two-matrix GELU FFN). One extra "dynamic" neuron can be attached to the
//! FFN of any one block: the FFN output gains `w_out * GELU(w_in . h + b_in)`
//! at every sequence position, where `h` is the FFN input. With all-zero
//! neuron weights the model computes exactly the base function.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Split, Tokenizer};
use crate::numerics::io::{digest_tensors, load_tensor_map, save_tensors};
use crate::numerics::{CeReduction, Graph, Optimizer, Rng, Tensor, TensorIoError, Var};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("attach layer {layer} out of range for {n_layers} layers")]
    AttachOutOfRange { layer: usize, n_layers: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token sequence must be nonempty")]
    EmptyTokens,
    #[error("training stalled at accuracy {accuracy:.4} after {epochs} epochs (target {target})")]
    TrainingStalled { accuracy: f32, epochs: usize, target: f32 },
    #[error("checkpoint problem: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LMConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl LMConfig {
    /// The stock configuration; only the vocabulary size varies per corpus.
    pub fn default_with_vocab(vocab_size: usize) -> Self {
        LMConfig { d_model: 64, n_layers: 6, n_heads: 4, ffn_hidden: 256, vocab_size, max_seq_len: 32 }
    }

    fn validate(&self) {
        assert!(self.d_model % self.n_heads == 0, "d_model must divide evenly into heads");
        assert!(self.vocab_size > Tokenizer::UNK as usize, "vocab must cover the special ids");
        assert!(self.n_layers > 0 && self.max_seq_len > 1);
    }
}

/// Weights of one FFN neuron: input row, bias, output column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronWeights {
    pub w_in: Vec<f32>,
    pub b_in: f32,
    pub w_out: Vec<f32>,
}

impl NeuronWeights {
    pub fn zeros(d_model: usize) -> Self {
        NeuronWeights { w_in: vec![0.0; d_model], b_in: 0.0, w_out: vec![0.0; d_model] }
    }

    pub fn d_model(&self) -> usize {
        self.w_in.len()
    }

    /// Flat layout `[w_in | b_in | w_out]`, length `2 * d_model + 1`.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.w_in.len() * 2 + 1);
        out.extend_from_slice(&self.w_in);
        out.push(self.b_in);
        out.extend_from_slice(&self.w_out);
        out
    }

    pub fn from_flat(flat: &[f32]) -> Result<Self, LmError> {
        if flat.len() < 3 || flat.len() % 2 == 0 {
            return Err(LmError::Checkpoint(format!(
                "neuron weight vector length {} is not 2*d+1",
                flat.len()
            )));
        }
        let d = (flat.len() - 1) / 2;
        Ok(NeuronWeights {
            w_in: flat[..d].to_vec(),
            b_in: flat[d],
            w_out: flat[d + 1..].to_vec(),
        })
    }

    pub fn l2_norm(&self) -> f32 {
        let sq: f32 = self.flatten().iter().map(|v| v * v).sum();
        libm::sqrtf(sq)
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&v| v == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachPoint {
    pub layer_index: usize,
}

/// Graph handles for one neuron's weights, however the caller wants them
/// treated (frozen for inference, trainable for collection).
#[derive(Clone, Copy)]
pub struct NeuronVars {
    pub w_in: Var,
    pub b_in: Var,
    pub w_out: Var,
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

/// Every model parameter lifted into a graph, plus the same handles in the
/// fixed checkpoint order for gradient collection.
pub struct LmVars {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BlockVars>,
    ln_f_g: Var,
    ln_f_b: Var,
    head: Var,
    ordered: Vec<Var>,
}

impl LmVars {
    pub fn ordered(&self) -> &[Var] {
        &self.ordered
    }
}

#[derive(Clone)]
pub struct ToyLm {
    pub cfg: LMConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    ln_f_g: Tensor,
    ln_f_b: Tensor,
    head: Tensor,
}

const LN_EPS: f32 = 1e-5;
const MASKED: f32 = -1e9;

impl ToyLm {
    pub fn new(cfg: LMConfig, seed: u64) -> Self {
        cfg.validate();
        let mut rng = Rng::derived(seed, "lm/init");
        let d = cfg.d_model;
        // Residual-branch outputs start small so depth does not blow up the
        // stream scale before training finds its footing.
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
        ToyLm {
            tok_emb: rng.normal_tensor(vec![cfg.vocab_size, d], 0.02),
            pos_emb: rng.normal_tensor(vec![cfg.max_seq_len, d], 0.02),
            blocks,
            ln_f_g: Tensor::ones(vec![d]),
            ln_f_b: Tensor::zeros(vec![d]),
            head: rng.normal_tensor(vec![d, cfg.vocab_size], 0.02),
            cfg,
        }
    }

    /// Parameters in checkpoint order, with their stable names.
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
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable views of every parameter, in [`LmVars::ordered`] order.
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
        out.extend([&mut self.ln_f_g, &mut self.ln_f_b, &mut self.head]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Lifts all parameters into `g`; `trainable` decides whether backward
    /// will produce gradients for them.
    pub fn params_into_graph(&self, g: &mut Graph, trainable: bool) -> LmVars {
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
        let head = lift(&self.head);
        ordered.extend([ln_f_g, ln_f_b, head]);
        LmVars { tok_emb, pos_emb, blocks, ln_f_g, ln_f_b, head, ordered }
    }

    /// Lifts neuron weights as frozen inputs.
    pub fn neuron_inputs(&self, g: &mut Graph, w: &NeuronWeights) -> NeuronVars {
        Self::lift_neuron(g, w, false)
    }

    /// Lifts neuron weights as trainable parameters.
    pub fn neuron_params(&self, g: &mut Graph, w: &NeuronWeights) -> NeuronVars {
        Self::lift_neuron(g, w, true)
    }

    fn lift_neuron(g: &mut Graph, w: &NeuronWeights, trainable: bool) -> NeuronVars {
        let d = w.d_model();
        let t_in = Tensor::new(vec![d, 1], w.w_in.clone());
        let t_b = Tensor::new(vec![1], vec![w.b_in]);
        let t_out = Tensor::new(vec![1, d], w.w_out.clone());
        let mut lift = |t: Tensor| if trainable { g.param(t) } else { g.input(t) };
        NeuronVars { w_in: lift(t_in), b_in: lift(t_b), w_out: lift(t_out) }
    }

    fn check_lengths(&self, b: usize, t: usize, tokens: usize) -> Result<(), LmError> {
        if t == 0 || b == 0 {
            return Err(LmError::EmptyTokens);
        }
        if t > self.cfg.max_seq_len {
            return Err(LmError::SequenceTooLong { len: t, max: self.cfg.max_seq_len });
        }
        assert_eq!(b * t, tokens, "token buffer must be exactly batch * seq_len");
        Ok(())
    }

    fn check_attach(&self, attach: AttachPoint) -> Result<(), LmError> {
        if attach.layer_index >= self.cfg.n_layers {
            return Err(LmError::AttachOutOfRange {
                layer: attach.layer_index,
                n_layers: self.cfg.n_layers,
            });
        }
        Ok(())
    }

    fn causal_mask(g: &mut Graph, t: usize) -> Var {
        let mut data = vec![0.0f32; t * t];
        for i in 0..t {
            for j in i + 1..t {
                data[i * t + j] = MASKED;
            }
        }
        g.input(Tensor::new(vec![1, 1, t, t], data))
    }

    /// Token + position embeddings for a flattened `[b, t]` batch.
    pub fn embed(&self, g: &mut Graph, vars: &LmVars, tokens: &[u32], b: usize, t: usize) -> Var {
        let tok = g.embedding(vars.tok_emb, tokens);
        let pos_ids: Vec<u32> = (0..b).flat_map(|_| 0..t as u32).collect();
        let pos = g.embedding(vars.pos_emb, &pos_ids);
        let sum = g.add(tok, pos);
        g.reshape(sum, vec![b, t, self.cfg.d_model])
    }

    fn layer_norm_affine(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let scaled = g.mul(n, gamma);
        g.add(scaled, beta)
    }

    /// Runs blocks `layers.start .. layers.end` over `x: [b, t, d]`.
    pub fn block_stack(
        &self,
        g: &mut Graph,
        vars: &LmVars,
        mut x: Var,
        b: usize,
        t: usize,
        layers: std::ops::Range<usize>,
        neuron: Option<(&NeuronVars, AttachPoint)>,
    ) -> Var {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let scale = 1.0 / libm::sqrtf((d / heads) as f32);
        let mask = Self::causal_mask(g, t);
        for li in layers {
            let bv = &vars.blocks[li];
            // Attention sublayer.
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

            // FFN sublayer, with the dynamic neuron on its designated block.
            let xf = g.reshape(x, vec![b * t, d]);
            let h = Self::layer_norm_affine(g, xf, bv.ln2_g, bv.ln2_b);
            let u = g.matmul(h, bv.w1);
            let u = g.add(u, bv.b1);
            let u = g.gelu(u);
            let y = g.matmul(u, bv.w2);
            let mut y = g.add(y, bv.b2);
            if let Some((nv, attach)) = neuron {
                if attach.layer_index == li {
                    let z = g.matmul(h, nv.w_in);
                    let z = g.add(z, nv.b_in);
                    let a = g.gelu(z);
                    let contrib = g.matmul(a, nv.w_out);
                    y = g.add(y, contrib);
                }
            }
            let y3 = g.reshape(y, vec![b, t, d]);
            x = g.add(x, y3);
        }
        x
    }

    /// Final layer norm plus unembedding; returns `[b * t, vocab]` logits.
    pub fn head_logits(&self, g: &mut Graph, vars: &LmVars, x: Var, b: usize, t: usize) -> Var {
        let xf = g.reshape(x, vec![b * t, self.cfg.d_model]);
        let h = Self::layer_norm_affine(g, xf, vars.ln_f_g, vars.ln_f_b);
        g.matmul(h, vars.head)
    }

    /// Full forward pass; returns flat `[b * t, vocab]` logits.
    pub fn build_logits(
        &self,
        g: &mut Graph,
        vars: &LmVars,
        tokens: &[u32],
        b: usize,
        t: usize,
        neuron: Option<(&NeuronVars, AttachPoint)>,
    ) -> Result<Var, LmError> {
        self.check_lengths(b, t, tokens.len())?;
        if let Some((_, attach)) = neuron {
            self.check_attach(attach)?;
        }
        let x = self.embed(g, vars, tokens, b, t);
        let x = self.block_stack(g, vars, x, b, t, 0..self.cfg.n_layers, neuron);
        Ok(self.head_logits(g, vars, x, b, t))
    }

    /// Eager forward; `[b, t, vocab]` logits with optional attached neuron.
    pub fn logits_batch(
        &self,
        tokens: &[u32],
        b: usize,
        t: usize,
        neuron: Option<(&NeuronWeights, AttachPoint)>,
    ) -> Result<Tensor, LmError> {
        let mut g = Graph::new();
        let vars = self.params_into_graph(&mut g, false);
        let nv = neuron.map(|(w, a)| (Self::lift_neuron(&mut g, w, false), a));
        let logits = self.build_logits(&mut g, &vars, tokens, b, t, nv.as_ref().map(|(v, a)| (v, *a)))?;
        let flat = g.value(logits).clone();
        Ok(flat.reshaped(vec![b, t, self.cfg.vocab_size]))
    }

    /// Hidden state entering block `layer` for one sequence; the neuron
    /// cannot influence anything below its attach block, so this prefix is
    /// reusable across neuron candidates.
    pub fn hidden_before_layer(&self, tokens: &[u32], layer: usize) -> Result<Tensor, LmError> {
        self.check_attach(AttachPoint { layer_index: layer })?;
        self.check_lengths(1, tokens.len(), tokens.len())?;
        let mut g = Graph::new();
        let vars = self.params_into_graph(&mut g, false);
        let x = self.embed(&mut g, &vars, tokens, 1, tokens.len());
        let x = self.block_stack(&mut g, &vars, x, 1, tokens.len(), 0..layer, None);
        Ok(g.value(x).clone())
    }

    /// Completes a forward pass from a cached `[b, t, d]` hidden state.
    pub fn build_from_hidden(
        &self,
        g: &mut Graph,
        vars: &LmVars,
        hidden: Var,
        b: usize,
        t: usize,
        layer: usize,
        neuron: Option<(&NeuronVars, AttachPoint)>,
    ) -> Result<Var, LmError> {
        self.check_attach(AttachPoint { layer_index: layer })?;
        let x = self.block_stack(g, vars, hidden, b, t, layer..self.cfg.n_layers, neuron);
        Ok(self.head_logits(g, vars, x, b, t))
    }

    /// Greedy continuation of `query`; stops at EOS or `max_new` tokens.
    pub fn generate_greedy(
        &self,
        neuron: Option<(&NeuronWeights, AttachPoint)>,
        query: &[u32],
        max_new: usize,
    ) -> Result<Vec<u32>, LmError> {
        if query.is_empty() {
            return Err(LmError::EmptyTokens);
        }
        let mut seq = Vec::with_capacity(1 + query.len() + max_new);
        seq.push(Tokenizer::BOS);
        seq.extend_from_slice(query);
        let mut out = Vec::new();
        for _ in 0..max_new {
            if seq.len() >= self.cfg.max_seq_len {
                break;
            }
            let t = seq.len();
            let logits = self.logits_batch(&seq, 1, t, neuron)?;
            let next = logits.argmax_last()[t - 1] as u32;
            if next == Tokenizer::EOS {
                break;
            }
            seq.push(next);
            out.push(next);
        }
        Ok(out)
    }

    /// Argmax prediction at each `target` position under the gold prefix.
    pub fn teacher_forcing_argmax(
        &self,
        neuron: Option<(&NeuronWeights, AttachPoint)>,
        query: &[u32],
        target: &[u32],
    ) -> Result<Vec<u32>, LmError> {
        assert!(!target.is_empty(), "teacher forcing needs a nonempty target");
        if query.is_empty() {
            return Err(LmError::EmptyTokens);
        }
        let mut seq = vec![Tokenizer::BOS];
        seq.extend_from_slice(query);
        seq.extend_from_slice(target);
        let t = seq.len();
        let logits = self.logits_batch(&seq, 1, t, neuron)?;
        let argmax = logits.argmax_last();
        let q = query.len();
        Ok((0..target.len()).map(|i| argmax[q + i] as u32).collect())
    }

    /// Fraction of `target` positions predicted correctly under the gold
    /// prefix.
    pub fn teacher_forcing_accuracy(
        &self,
        neuron: Option<(&NeuronWeights, AttachPoint)>,
        query: &[u32],
        target: &[u32],
    ) -> Result<f32, LmError> {
        assert!(!target.is_empty(), "teacher forcing needs a nonempty target");
        if query.is_empty() {
            return Err(LmError::EmptyTokens);
        }
        let mut seq = vec![Tokenizer::BOS];
        seq.extend_from_slice(query);
        seq.extend_from_slice(target);
        let t = seq.len();
        let logits = self.logits_batch(&seq, 1, t, neuron)?;
        let argmax = logits.argmax_last();
        let q = query.len();
        let hits = (0..target.len())
            .filter(|&i| argmax[q + i] as u32 == target[i])
            .count();
        Ok(hits as f32 / target.len() as f32)
    }

    // ---- persistence ----


    /// Hex digest over the full parameter set. Two checkpoints with the same
    /// hash hold bitwise-identical weights.
    pub fn content_hash(&self) -> String {
        let named = self.named_params();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        digest_tensors(&refs)
    }

    pub fn save(&self, dir: &Path, corpus_hash: &str) -> Result<(), LmError> {
        fs::create_dir_all(dir)?;
        let named: Vec<(String, Tensor)> =
            self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_tensors(&dir.join("model.tensors"), &refs)?;
        let meta = LmMeta { config: self.cfg, corpus_hash: corpus_hash.to_string() };
        fs::write(dir.join("lm_config.json"), serde_json::to_string_pretty(&meta).unwrap())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, String), LmError> {
        let meta: LmMeta = serde_json::from_str(&fs::read_to_string(dir.join("lm_config.json"))?)
            .map_err(|e| LmError::Checkpoint(format!("bad sidecar: {e}")))?;
        let mut map = load_tensor_map(&dir.join("model.tensors"))?;
        let mut model = ToyLm::new(meta.config, 0);
        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        for ((name, shape), slot) in expected.iter().zip(model.params_mut()) {
            let tensor = map
                .remove(name)
                .ok_or_else(|| LmError::Checkpoint(format!("missing tensor {name}")))?;
            if tensor.shape() != &shape[..] {
                return Err(LmError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            *slot = tensor;
        }
        if let Some(extra) = map.keys().next() {
            return Err(LmError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok((model, meta.corpus_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct LmMeta {
    config: LMConfig,
    corpus_hash: String,
}

// ---- training ----

/// One supervised pair: prompt tokens and the answer tokens to memorize.
pub type TrainPair = (Vec<u32>, Vec<u32>);

/// Builds the memorization set. Edit facts (and optionally their
/// paraphrases) teach the deliberately wrong old object; other splits teach
/// the true object from the original phrasing only.
pub fn training_pairs(corpus: &Corpus, include_edit_paraphrases: bool) -> Vec<TrainPair> {
    let mut pairs = Vec::new();
    for fact in &corpus.facts {
        match fact.split {
            Split::Edit => {
                let old = fact
                    .old_target
                    .clone()
                    .expect("edit facts carry an old target");
                pairs.push((fact.query.clone(), old.clone()));
                if include_edit_paraphrases {
                    for p in &fact.paraphrases {
                        pairs.push((p.clone(), old.clone()));
                    }
                }
            }
            Split::Pseudo | Split::Irrelevant => {
                pairs.push((fact.query.clone(), fact.target.clone()));
            }
        }
    }
    pairs
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub target_accuracy: f32,
    pub include_edit_paraphrases: bool,
    pub check_every: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            max_epochs: 400,
            batch_size: 64,
            lr: 2e-3,
            weight_decay: 0.0,
            target_accuracy: 0.99,
            include_edit_paraphrases: true,
            check_every: 5,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_accuracy: f32,
    pub mean_losses: Vec<f32>,
}

struct PackedBatch {
    tokens: Vec<u32>,
    labels: Vec<u32>,
    mask: Vec<f32>,
    b: usize,
    t: usize,
}

/// Packs sequences `BOS + prompt + answer + EOS` into one right-padded
/// next-token batch; loss covers the answer tokens and the closing EOS.
fn pack_batch(pairs: &[&TrainPair]) -> PackedBatch {
    let t = pairs
        .iter()
        .map(|(q, y)| 1 + q.len() + y.len())
        .max()
        .expect("batch is nonempty");
    let b = pairs.len();
    let mut tokens = vec![Tokenizer::PAD; b * t];
    let mut labels = vec![Tokenizer::PAD; b * t];
    let mut mask = vec![0.0f32; b * t];
    for (r, (q, y)) in pairs.iter().enumerate() {
        let mut seq = Vec::with_capacity(2 + q.len() + y.len());
        seq.push(Tokenizer::BOS);
        seq.extend_from_slice(q);
        seq.extend_from_slice(y);
        seq.push(Tokenizer::EOS);
        let row = &mut tokens[r * t..(r + 1) * t];
        row[..seq.len() - 1].copy_from_slice(&seq[..seq.len() - 1]);
        let lab = &mut labels[r * t..(r + 1) * t];
        lab[..seq.len() - 1].copy_from_slice(&seq[1..]);
        for i in q.len()..q.len() + y.len() + 1 {
            mask[r * t + i] = 1.0;
        }
    }
    PackedBatch { tokens, labels, mask, b, t }
}

/// Global fraction of answer tokens predicted correctly under gold prefixes,
/// measured in batches for speed.
pub fn tf_fraction(
    model: &ToyLm,
    pairs: &[TrainPair],
    neuron: Option<(&NeuronWeights, AttachPoint)>,
    batch_size: usize,
) -> Result<f32, LmError> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainPair> = chunk.iter().collect();
        let packed = pack_batch(&refs);
        let logits = model.logits_batch(&packed.tokens, packed.b, packed.t, neuron)?;
        let argmax = logits.argmax_last();
        for (r, (q, y)) in chunk.iter().enumerate() {
            for (i, &gold) in y.iter().enumerate() {
                let pos = r * packed.t + q.len() + i;
                hits += (argmax[pos] as u32 == gold) as usize;
                total += 1;
            }
        }
    }
    Ok(hits as f32 / total.max(1) as f32)
}

/// Trains the base model until it memorizes its world (teacher-forcing
/// accuracy over answer tokens reaches the schedule's target) or errors out
/// with the final accuracy.
pub fn train_base(
    model: &mut ToyLm,
    corpus: &Corpus,
    sched: &TrainSchedule,
) -> Result<TrainReport, LmError> {
    let pairs = training_pairs(corpus, sched.include_edit_paraphrases);
    assert!(!pairs.is_empty(), "training set is empty");
    for (q, y) in &pairs {
        let len = 2 + q.len() + y.len();
        if len > model.cfg.max_seq_len {
            return Err(LmError::SequenceTooLong { len, max: model.cfg.max_seq_len });
        }
    }
    let mut opt = Optimizer::adamw_default(sched.lr, sched.weight_decay);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut mean_losses = Vec::new();
    let mut accuracy = 0.0f32;
    for epoch in 0..sched.max_epochs {
        let mut rng = Rng::derived(sched.seed, &format!("lm/train/epoch{epoch}"));
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(sched.batch_size) {
            let refs: Vec<&TrainPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let packed = pack_batch(&refs);
            let mut g = Graph::new();
            let vars = model.params_into_graph(&mut g, true);
            let logits =
                model.build_logits(&mut g, &vars, &packed.tokens, packed.b, packed.t, None)?;
            let loss =
                g.cross_entropy(logits, &packed.labels, &packed.mask, CeReduction::Mean);
            g.backward(loss).expect("loss is scalar");
            epoch_loss += g.value(loss).item() as f64;
            batches += 1;
            let grads: Vec<Option<Tensor>> =
                vars.ordered().iter().map(|&v| g.grad(v).cloned()).collect();
            drop(g);
            let mut params = model.params_mut();
            opt.step_refs(&mut params, &grads).expect("gradient shapes track parameters");
        }
        mean_losses.push((epoch_loss / batches.max(1) as f64) as f32);
        let last = epoch + 1 == sched.max_epochs;
        if (epoch + 1) % sched.check_every.max(1) == 0 || last {
            accuracy = tf_fraction(model, &pairs, None, sched.batch_size)?;
            if accuracy >= sched.target_accuracy {
                return Ok(TrainReport {
                    epochs_run: epoch + 1,
                    final_accuracy: accuracy,
                    mean_losses,
                });
            }
        }
    }
    Err(LmError::TrainingStalled {
        accuracy,
        epochs: sched.max_epochs,
        target: sched.target_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};

    fn tiny_cfg(vocab: usize) -> LMConfig {
        LMConfig { d_model: 32, n_layers: 2, n_heads: 2, ffn_hidden: 64, vocab_size: vocab, max_seq_len: 32 }
    }

    fn probe_sequences(n: usize, t: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = Rng::derived(seed, "lm/test/probe");
        (0..n)
            .map(|_| (0..t).map(|_| rng.below(vocab - 5) as u32 + 5).collect())
            .collect()
    }

    #[test]
    fn zero_neuron_is_bitwise_identity_on_probe_set() {
        let model = ToyLm::new(tiny_cfg(50), 1);
        let attach = AttachPoint { layer_index: 1 };
        let zero = NeuronWeights::zeros(32);
        for seq in probe_sequences(128, 8, 50, 2) {
            let base = model.logits_batch(&seq, 1, 8, None).unwrap();
            let edited = model.logits_batch(&seq, 1, 8, Some((&zero, attach))).unwrap();
            assert!(base.bits_equal(&edited), "zero neuron changed the logits");
            assert_eq!(base.max_abs_diff(&edited), 0.0);
        }
    }

    #[test]
    fn random_neuron_changes_the_logits() {
        let model = ToyLm::new(tiny_cfg(50), 1);
        let mut rng = Rng::derived(9, "lm/test/neuron");
        let w = NeuronWeights {
            w_in: (0..32).map(|_| rng.normal() * 0.5).collect(),
            b_in: 0.1,
            w_out: (0..32).map(|_| rng.normal() * 0.5).collect(),
        };
        let seq = probe_sequences(1, 8, 50, 3).pop().unwrap();
        let base = model.logits_batch(&seq, 1, 8, None).unwrap();
        let edited = model
            .logits_batch(&seq, 1, 8, Some((&w, AttachPoint { layer_index: 0 })))
            .unwrap();
        assert!(edited.max_abs_diff(&base) > 0.0);
    }

    #[test]
    fn attach_point_out_of_range_is_rejected() {
        let model = ToyLm::new(tiny_cfg(50), 1);
        let w = NeuronWeights::zeros(32);
        let err = model
            .logits_batch(&[5, 6, 7], 1, 3, Some((&w, AttachPoint { layer_index: 2 })))
            .unwrap_err();
        assert!(matches!(err, LmError::AttachOutOfRange { layer: 2, n_layers: 2 }));
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let model = ToyLm::new(tiny_cfg(50), 1);
        let seq = vec![5u32; 33];
        assert!(matches!(
            model.logits_batch(&seq, 1, 33, None),
            Err(LmError::SequenceTooLong { len: 33, max: 32 })
        ));
    }

    #[test]
    fn prefix_cache_matches_full_forward_bitwise() {
        let model = ToyLm::new(tiny_cfg(50), 4);
        let seq = probe_sequences(1, 10, 50, 5).pop().unwrap();
        let layer = 1;
        let mut rng = Rng::derived(10, "lm/test/neuron2");
        let w = NeuronWeights {
            w_in: (0..32).map(|_| rng.normal()).collect(),
            b_in: -0.2,
            w_out: (0..32).map(|_| rng.normal()).collect(),
        };
        let attach = AttachPoint { layer_index: layer };

        let full = model.logits_batch(&seq, 1, 10, Some((&w, attach))).unwrap();

        let hidden = model.hidden_before_layer(&seq, layer).unwrap();
        let mut g = Graph::new();
        let vars = model.params_into_graph(&mut g, false);
        let h = g.input(hidden);
        let nv = model.neuron_inputs(&mut g, &w);
        let logits = model
            .build_from_hidden(&mut g, &vars, h, 1, 10, layer, Some((&nv, attach)))
            .unwrap();
        let resumed = g.value(logits).reshaped(vec![1, 10, 50]);
        assert!(full.bits_equal(&resumed), "cached prefix diverged from full forward");
    }

    #[test]
    fn generation_is_deterministic_and_respects_max_new() {
        let model = ToyLm::new(tiny_cfg(50), 6);
        let query = vec![7u32, 9, 11];
        let a = model.generate_greedy(None, &query, 5).unwrap();
        let b = model.generate_greedy(None, &query, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 5);
        assert!(model.generate_greedy(None, &query, 0).unwrap().is_empty());
    }

    #[test]
    fn untrained_tf_accuracy_sits_at_chance() {
        let cfg = LMConfig::default_with_vocab(500);
        let model = ToyLm::new(cfg, 12);
        let mut rng = Rng::derived(13, "lm/test/chance");
        let pairs: Vec<TrainPair> = (0..500)
            .map(|_| {
                let q: Vec<u32> = (0..6).map(|_| rng.below(495) as u32 + 5).collect();
                let y = vec![rng.below(495) as u32 + 5];
                (q, y)
            })
            .collect();
        let acc = tf_fraction(&model, &pairs, None, 100).unwrap();
        assert!(
            (acc - 1.0 / 500.0).abs() <= 0.01,
            "chance-level accuracy expected, got {acc}"
        );
    }

    #[test]
    fn checkpoint_round_trip_reproduces_logits() {
        let dir = tempfile::tempdir().unwrap();
        let model = ToyLm::new(tiny_cfg(60), 21);
        model.save(dir.path(), "corpus-hash-probe").unwrap();
        let (back, hash) = ToyLm::load(dir.path()).unwrap();
        assert_eq!(hash, "corpus-hash-probe");
        assert_eq!(back.cfg, model.cfg);
        let seq = probe_sequences(1, 12, 60, 22).pop().unwrap();
        let a = model.logits_batch(&seq, 1, 12, None).unwrap();
        let b = back.logits_batch(&seq, 1, 12, None).unwrap();
        assert!(a.bits_equal(&b));
    }

    #[test]
    fn memorizes_a_small_world_with_old_objects_for_edits() {
        let corpus = generate_corpus(&CorpusConfig {
            seed: 5,
            edit: 6,
            pseudo: 6,
            irrelevant: 6,
            paraphrases: 3,
        })
        .unwrap();
        let mut model = ToyLm::new(tiny_cfg(corpus.tokenizer.vocab_size()), 30);
        let sched = TrainSchedule {
            max_epochs: 600,
            batch_size: 36,
            lr: 3e-3,
            check_every: 10,
            seed: 31,
            ..TrainSchedule::default()
        };
        let report = train_base(&mut model, &corpus, &sched).expect("training reaches target");
        assert!(report.final_accuracy >= 0.99);

        // Edit facts answer with the old object, untouched facts with truth.
        for fact in corpus.facts.iter().take(12) {
            let want = match fact.split {
                Split::Edit => fact.old_target.clone().unwrap(),
                _ => fact.target.clone(),
            };
            let got = model.generate_greedy(None, &fact.query, 8).unwrap();
            assert_eq!(got, want, "fact {} answered wrongly", fact.fact_id);
        }
    }
}
