//! Builds the knowledge-weight dataset: for each fact to edit, one neuron's
//! weights are optimized against the frozen base model until the model,
//! with that neuron attached, reproduces the new target under teacher
//! forcing. The resulting (condition, weights) pairs train the weight
//! generator, and a layer sweep picks where the neuron should attach.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, FactRecord, Split, Tokenizer};
use crate::numerics::io::{load_tensor_map, save_tensors};
use crate::numerics::{CeReduction, Graph, Optimizer, Rng, Tensor, TensorIoError};
use crate::text_encoder::{EncoderError, TextEncoder};
use crate::toy_lm::{AttachPoint, LmError, NeuronVars, NeuronWeights, ToyLm};

#[derive(Debug, Error)]
pub enum CollectError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("no facts to collect")]
    EmptyFacts,
    #[error("layer sweep needs at least {need} facts for signal, got {got}")]
    TooFewSweepFacts { got: usize, need: usize },
    #[error("no pair converged, the bank has no usable training rows")]
    NoConvergedPairs,
    #[error("bank file is inconsistent: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
}

/// Per-neuron optimization settings. The budget is generous because a few
/// facts fight the base model's memorized answer harder than most.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CollectConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub max_steps: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig { lr: 1e-2, weight_decay: 0.0, max_steps: 500 }
    }
}

/// One fact's collected neuron: the query embedding it will be generated
/// from, the optimized weights, and how the optimization went.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeWeightPair {
    pub fact_id: String,
    /// Query embedding, filled in when a bank is assembled.
    pub condition: Vec<f32>,
    pub weights: NeuronWeights,
    pub attach: AttachPoint,
    pub converged: bool,
    pub final_tf_accuracy: f32,
    pub steps: usize,
}

/// Per-coordinate mean and population standard deviation over the converged
/// bank rows. The generator trains in this standardized space; collapsing
/// coordinates are floored rather than divided to nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

const STD_FLOOR: f32 = 1e-6;

impl BankStats {
    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        assert!(!rows.is_empty(), "stats need at least one row");
        let p = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == p), "rows must share one length");
        let n = rows.len() as f64;
        let mut mean = vec![0.0f64; p];
        for row in rows {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0f64; p];
        for row in rows {
            for (s, (&v, &m)) in var.iter_mut().zip(row.iter().zip(&mean)) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let std = var.iter().map(|s| ((s / n).sqrt()) as f32).collect();
        BankStats { mean: mean.iter().map(|&m| m as f32).collect(), std }
    }

    pub fn standardize_row(&self, raw: &[f32]) -> Vec<f32> {
        assert_eq!(raw.len(), self.mean.len());
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - m) / s.max(STD_FLOOR))
            .collect()
    }

    pub fn destandardize_row(&self, std_row: &[f32]) -> Vec<f32> {
        assert_eq!(std_row.len(), self.mean.len());
        std_row
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| v * s.max(STD_FLOOR) + m)
            .collect()
    }
}

/// All collected pairs for one corpus at one attach point, plus the
/// normalization the generator trains under.
#[derive(Clone, Debug)]
pub struct WeightBank {
    pub pairs: Vec<KnowledgeWeightPair>,
    pub attach: AttachPoint,
    pub stats: BankStats,
    pub corpus_hash: String,
    pub base_model_hash: String,
    pub encoder_hash: String,
}

#[derive(Serialize, Deserialize)]
struct PairMeta {
    fact_id: String,
    converged: bool,
    final_tf_accuracy: f32,
    steps: usize,
    weight_l2: f32,
}

#[derive(Serialize, Deserialize)]
struct BankManifest {
    attach: AttachPoint,
    param_len: usize,
    d_embed: usize,
    corpus_hash: String,
    base_model_hash: String,
    encoder_hash: String,
    stats: BankStats,
    pairs: Vec<PairMeta>,
    unconverged: Vec<String>,
}

impl WeightBank {
    pub fn converged(&self) -> impl Iterator<Item = &KnowledgeWeightPair> {
        self.pairs.iter().filter(|p| p.converged)
    }

    pub fn unconverged_ids(&self) -> Vec<String> {
        self.pairs.iter().filter(|p| !p.converged).map(|p| p.fact_id.clone()).collect()
    }

    /// Standardized weight rows and their conditions, converged pairs only.
    /// This is the generator's training set.
    pub fn converged_training_set(&self) -> (Tensor, Tensor) {
        let rows: Vec<&KnowledgeWeightPair> = self.converged().collect();
        assert!(!rows.is_empty(), "bank holds no converged pairs");
        let p = self.stats.mean.len();
        let d = rows[0].condition.len();
        let mut weights = Vec::with_capacity(rows.len() * p);
        let mut conds = Vec::with_capacity(rows.len() * d);
        for pair in &rows {
            weights.extend(self.stats.standardize_row(&pair.weights.flatten()));
            conds.extend_from_slice(&pair.condition);
        }
        (
            Tensor::new(vec![rows.len(), p], weights),
            Tensor::new(vec![rows.len(), d], conds),
        )
    }

    pub fn save(&self, dir: &Path) -> Result<(), CollectError> {
        if self.pairs.is_empty() {
            return Err(CollectError::EmptyFacts);
        }
        let p = self.stats.mean.len();
        let d = self.pairs[0].condition.len();
        for pair in &self.pairs {
            if pair.weights.flatten().len() != p {
                return Err(CollectError::Manifest(format!(
                    "pair {} has {} weights, stats expect {p}",
                    pair.fact_id,
                    pair.weights.flatten().len()
                )));
            }
            if pair.condition.len() != d || d == 0 {
                return Err(CollectError::Manifest(format!(
                    "pair {} is missing its condition embedding",
                    pair.fact_id
                )));
            }
            if pair.attach != self.attach {
                return Err(CollectError::Manifest(format!(
                    "pair {} attaches at layer {}, bank at layer {}",
                    pair.fact_id, pair.attach.layer_index, self.attach.layer_index
                )));
            }
        }
        fs::create_dir_all(dir)?;

        let mut raw = Vec::with_capacity(self.pairs.len() * p);
        let mut conds = Vec::with_capacity(self.pairs.len() * d);
        for pair in &self.pairs {
            raw.extend(pair.weights.flatten());
            conds.extend_from_slice(&pair.condition);
        }
        let raw_t = Tensor::new(vec![self.pairs.len(), p], raw);
        let cond_t = Tensor::new(vec![self.pairs.len(), d], conds);
        let (std_t, _) = self.converged_training_set();
        save_tensors(
            &dir.join("bank.tensors"),
            &[("raw", &raw_t), ("standardized", &std_t), ("conditions", &cond_t)],
        )?;

        let manifest = BankManifest {
            attach: self.attach,
            param_len: p,
            d_embed: d,
            corpus_hash: self.corpus_hash.clone(),
            base_model_hash: self.base_model_hash.clone(),
            encoder_hash: self.encoder_hash.clone(),
            stats: self.stats.clone(),
            pairs: self
                .pairs
                .iter()
                .map(|pair| PairMeta {
                    fact_id: pair.fact_id.clone(),
                    converged: pair.converged,
                    final_tf_accuracy: pair.final_tf_accuracy,
                    steps: pair.steps,
                    weight_l2: pair.weights.l2_norm(),
                })
                .collect(),
            unconverged: self.unconverged_ids(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CollectError> {
        let manifest: BankManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
                .map_err(|e| CollectError::Manifest(format!("bad manifest: {e}")))?;
        let map = load_tensor_map(&dir.join("bank.tensors"))?;
        let raw = map
            .get("raw")
            .ok_or_else(|| CollectError::Manifest("missing raw tensor".into()))?;
        let conds = map
            .get("conditions")
            .ok_or_else(|| CollectError::Manifest("missing conditions tensor".into()))?;
        let n = manifest.pairs.len();
        let (p, d) = (manifest.param_len, manifest.d_embed);
        if raw.shape() != [n, p] {
            return Err(CollectError::Manifest(format!(
                "raw tensor is {:?}, manifest lists {n} pairs of {p} weights",
                raw.shape()
            )));
        }
        if conds.shape() != [n, d] {
            return Err(CollectError::Manifest(format!(
                "conditions tensor is {:?}, expected [{n}, {d}]",
                conds.shape()
            )));
        }
        let pairs = manifest
            .pairs
            .iter()
            .enumerate()
            .map(|(i, meta)| {
                let weights = NeuronWeights::from_flat(&raw.data()[i * p..(i + 1) * p])?;
                Ok(KnowledgeWeightPair {
                    fact_id: meta.fact_id.clone(),
                    condition: conds.data()[i * d..(i + 1) * d].to_vec(),
                    weights,
                    attach: manifest.attach,
                    converged: meta.converged,
                    final_tf_accuracy: meta.final_tf_accuracy,
                    steps: meta.steps,
                })
            })
            .collect::<Result<Vec<_>, CollectError>>()?;
        Ok(WeightBank {
            pairs,
            attach: manifest.attach,
            stats: manifest.stats,
            corpus_hash: manifest.corpus_hash,
            base_model_hash: manifest.base_model_hash,
            encoder_hash: manifest.encoder_hash,
        })
    }
}

/// Optimizes one neuron against the frozen base model until the model with
/// that neuron attached predicts every token of the fact's target under
/// teacher forcing, or the step budget runs out.
///
/// The output column starts at zero, so the search begins exactly at the
/// unedited model. The input row cannot also start at zero: with both
/// factors zero the loss gradient vanishes identically (gelu(0) = 0 blocks
/// the output side, the zero output column blocks the input side) and no
/// optimizer escapes that stationary point. It instead gets a tiny random
/// direction derived from the fact id, which keeps collection deterministic
/// and independent of processing order. The hidden state entering the attach
/// block cannot depend on the neuron, so it is computed once and every
/// optimization step resumes from it. Convergence is read off the same
/// forward pass that produces the loss, before the update, which guarantees
/// the returned weights reproduce the accuracy they were accepted at.
pub fn collect_one(
    model: &ToyLm,
    fact: &FactRecord,
    attach: AttachPoint,
    cfg: &CollectConfig,
) -> Result<KnowledgeWeightPair, CollectError> {
    let q = &fact.query;
    let y = &fact.target;
    assert!(!y.is_empty(), "facts carry nonempty targets");

    let mut seq = Vec::with_capacity(1 + q.len() + y.len());
    seq.push(Tokenizer::BOS);
    seq.extend_from_slice(q);
    seq.extend_from_slice(y);
    let t = seq.len();
    let mut labels = vec![Tokenizer::PAD; t];
    labels[..t - 1].copy_from_slice(&seq[1..]);
    let mut mask = vec![0.0f32; t];
    for i in 0..y.len() {
        mask[q.len() + i] = 1.0;
    }

    let hidden = model.hidden_before_layer(&seq, attach.layer_index)?;

    let d = model.cfg.d_model;
    let mut rng = Rng::derived(0, &format!("collector/init/{}", fact.fact_id));
    let w_in_init: Vec<f32> = (0..d).map(|_| 0.02 * rng.normal()).collect();
    let mut t_in = Tensor::new(vec![d, 1], w_in_init);
    let mut t_b = Tensor::zeros(vec![1]);
    let mut t_out = Tensor::zeros(vec![1, d]);
    let mut opt = Optimizer::adamw_default(cfg.lr, cfg.weight_decay);

    let mut converged = false;
    let mut final_tf;
    let mut steps = 0usize;
    loop {
        let mut g = Graph::new();
        let vars = model.params_into_graph(&mut g, false);
        let h = g.input(hidden.clone());
        let nv = NeuronVars {
            w_in: g.param(t_in.clone()),
            b_in: g.param(t_b.clone()),
            w_out: g.param(t_out.clone()),
        };
        let logits = model.build_from_hidden(
            &mut g,
            &vars,
            h,
            1,
            t,
            attach.layer_index,
            Some((&nv, attach)),
        )?;
        let argmax = g.value(logits).argmax_last();
        let hits = (0..y.len()).filter(|&i| argmax[q.len() + i] as u32 == y[i]).count();
        final_tf = hits as f32 / y.len() as f32;
        if hits == y.len() {
            converged = true;
            break;
        }
        if steps == cfg.max_steps {
            break;
        }
        let loss = g.cross_entropy(logits, &labels, &mask, CeReduction::Mean);
        g.backward(loss).expect("loss is scalar");
        let grads =
            [g.grad(nv.w_in).cloned(), g.grad(nv.b_in).cloned(), g.grad(nv.w_out).cloned()];
        drop(g);
        opt.step_refs(&mut [&mut t_in, &mut t_b, &mut t_out], &grads)
            .expect("gradient shapes track the neuron");
        steps += 1;
    }

    let weights = NeuronWeights {
        w_in: t_in.data().to_vec(),
        b_in: t_b.data()[0],
        w_out: t_out.data().to_vec(),
    };
    Ok(KnowledgeWeightPair {
        fact_id: fact.fact_id.clone(),
        condition: Vec::new(),
        weights,
        attach,
        converged,
        final_tf_accuracy: final_tf,
        steps,
    })
}

/// Collects one pair per edit fact and assembles the bank: conditions come
/// from the encoder, normalization stats from the converged pairs only.
/// Each fact's optimization is independent and draws its only randomness
/// from the fact id, so the result does not depend on collection order and a
/// rerun writes a byte-identical file.
pub fn collect_bank(
    model: &ToyLm,
    encoder: &TextEncoder,
    corpus: &Corpus,
    attach: AttachPoint,
    cfg: &CollectConfig,
) -> Result<WeightBank, CollectError> {
    let facts: Vec<&FactRecord> = corpus.split(Split::Edit).collect();
    if facts.is_empty() {
        return Err(CollectError::EmptyFacts);
    }
    let queries: Vec<&[u32]> = facts.iter().map(|f| f.query.as_slice()).collect();
    let z = encoder.embed_batch(&queries)?;
    let d_embed = z.shape()[1];

    let mut pairs = Vec::with_capacity(facts.len());
    for (i, fact) in facts.iter().enumerate() {
        let mut pair = collect_one(model, fact, attach, cfg)?;
        pair.condition = z.data()[i * d_embed..(i + 1) * d_embed].to_vec();
        pairs.push(pair);
    }

    let converged_rows: Vec<Vec<f32>> =
        pairs.iter().filter(|p| p.converged).map(|p| p.weights.flatten()).collect();
    if converged_rows.is_empty() {
        return Err(CollectError::NoConvergedPairs);
    }
    Ok(WeightBank {
        pairs,
        attach,
        stats: BankStats::from_rows(&converged_rows),
        corpus_hash: corpus.content_hash(),
        base_model_hash: model.content_hash(),
        encoder_hash: encoder.content_hash(),
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    /// Fraction of sample facts whose greedy generation reproduces the new
    /// target exactly after collection at this layer.
    pub ag_exact: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSweep {
    pub rows: Vec<SweepRow>,
    pub recommended: usize,
}

/// Collects and replays a fact sample at each candidate layer; the
/// recommended attach point is the first layer with the best replay rate.
pub fn layer_sweep(
    model: &ToyLm,
    facts: &[&FactRecord],
    layers: &[usize],
    cfg: &CollectConfig,
) -> Result<LayerSweep, CollectError> {
    const NEED: usize = 16;
    if facts.len() < NEED {
        return Err(CollectError::TooFewSweepFacts { got: facts.len(), need: NEED });
    }
    assert!(!layers.is_empty(), "sweep needs candidate layers");
    let mut rows = Vec::with_capacity(layers.len());
    for &layer in layers {
        let attach = AttachPoint { layer_index: layer };
        let mut hits = 0usize;
        for fact in facts {
            let pair = collect_one(model, fact, attach, cfg)?;
            let gen =
                model.generate_greedy(Some((&pair.weights, attach)), &fact.query, fact.target.len())?;
            hits += (gen == fact.target) as usize;
        }
        rows.push(SweepRow { layer, ag_exact: hits as f32 / facts.len() as f32 });
    }
    let mut recommended = rows[0];
    for row in &rows[1..] {
        if row.ag_exact > recommended.ag_exact {
            recommended = *row;
        }
    }
    Ok(LayerSweep { rows, recommended: recommended.layer })
}
