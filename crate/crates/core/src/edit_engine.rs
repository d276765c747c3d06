//! End-to-end query answering with routed dynamic neurons. The engine holds
//! the frozen base model plus the three editing components: a query comes in,
//! the encoder embeds it, the familiarity network's entropy decides whether
//! the query touches edited knowledge, and an edited query gets a freshly
//! generated single-neuron weight attached for the duration of that one call.
//! Nothing is ever written back to the base model; the neuron lives only in
//! the forward pass that answers the query.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collector::WeightBank;
use crate::corpus::{Corpus, Split};
use crate::familiarity::{entropy, FamiliarityNet, FnError};
use crate::numerics::Rng;
use crate::text_encoder::{EncoderError, TextEncoder};
use crate::toy_lm::{AttachPoint, LmError, NeuronWeights, ToyLm};
use crate::weight_gen::{GenError, WeightGenerator};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("component checkpoints disagree:\n{0}")]
    VersionMismatch(String),
    #[error("weight source is bank replay but no replay index was supplied")]
    MissingReplayIndex,
    #[error("entropy threshold {0} is not a positive finite number")]
    BadThreshold(f32),
    #[error("attach layer {layer} is out of range for a {n_layers}-layer model")]
    BadAttach { layer: usize, n_layers: usize },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Familiarity(#[from] FnError),
    #[error(transparent)]
    Generator(#[from] GenError),
}

/// How the engine decides whether a query touches edited knowledge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Routing {
    /// Route to editing when familiarity entropy falls below the threshold.
    Entropy(f32),
    /// Treat every query as edited; ablation of the familiarity network.
    AlwaysEdited,
    /// Treat every query as unedited; the engine degenerates to the base
    /// model.
    NeverEdited,
}

/// Where the weights for an edited-routed query come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightSource {
    /// Always zero; useful as a control.
    Zero,
    /// Look the query up in the collected bank; unknown queries get zero.
    BankReplay,
    /// Sample the diffusion generator with this many reverse steps.
    Diffusion { n_steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub routing: Routing,
    pub source: WeightSource,
    pub attach: AttachPoint,
    /// Generation budget per response.
    pub max_new: usize,
    /// Base seed for per-query noise derivation.
    pub seed: u64,
    /// Also run the unedited base model and store its response in the trace.
    pub capture_pre_edit: bool,
}

impl EngineConfig {
    pub fn new(attach: AttachPoint, epsilon: f32, n_steps: usize) -> Self {
        EngineConfig {
            routing: Routing::Entropy(epsilon),
            source: WeightSource::Diffusion { n_steps },
            attach,
            max_new: 8,
            seed: 0,
            capture_pre_edit: false,
        }
    }
}

/// Everything one query's trip through the engine touched, for reports and
/// audits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditTrace {
    pub query: Vec<u32>,
    pub z: Vec<f32>,
    pub entropy: f32,
    pub routed_edited: bool,
    pub weight_norm: f32,
    pub response: Vec<u32>,
    pub pre_edit: Option<Vec<u32>>,
}

/// Names every component checkpoint by content hash, so a stored engine
/// configuration can be checked against what is actually on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineManifest {
    pub cfg: EngineConfig,
    pub corpus_hash: String,
    pub base_hash: String,
    pub encoder_hash: String,
    pub familiarity_hash: String,
    pub generator_hash: String,
}

/// The components of an engine plus the corpus hash each was trained
/// against, as returned by their checkpoint loaders.
pub struct EngineParts {
    pub base: ToyLm,
    pub base_corpus: String,
    pub encoder: TextEncoder,
    pub encoder_corpus: String,
    pub familiarity: FamiliarityNet,
    pub familiarity_corpus: String,
    pub generator: WeightGenerator,
    pub generator_corpus: String,
    /// Only needed for [`WeightSource::BankReplay`].
    pub replay: Option<BTreeMap<Vec<u32>, NeuronWeights>>,
}

/// Collected weights keyed by each edit fact's original query tokens, for
/// replay engines that bypass the generator.
pub fn replay_index(bank: &WeightBank, corpus: &Corpus) -> BTreeMap<Vec<u32>, NeuronWeights> {
    let by_id: BTreeMap<&str, &NeuronWeights> =
        bank.converged().map(|p| (p.fact_id.as_str(), &p.weights)).collect();
    corpus
        .split(Split::Edit)
        .filter_map(|f| {
            by_id.get(f.fact_id.as_str()).map(|w| (f.query.clone(), (*w).clone()))
        })
        .collect()
}

pub struct EditEngine {
    pub base: ToyLm,
    pub encoder: TextEncoder,
    pub familiarity: FamiliarityNet,
    pub generator: WeightGenerator,
    pub cfg: EngineConfig,
    corpus_hash: String,
    replay: BTreeMap<Vec<u32>, NeuronWeights>,
}

impl EditEngine {
    /// Wires the components together, refusing combinations that were not
    /// trained against the same corpus or that do not fit each other.
    pub fn assemble(parts: EngineParts, cfg: EngineConfig) -> Result<Self, EngineError> {
        let EngineParts {
            base,
            base_corpus,
            encoder,
            encoder_corpus,
            familiarity,
            familiarity_corpus,
            generator,
            generator_corpus,
            replay,
        } = parts;

        let mut mismatches = Vec::new();
        for (name, hash) in [
            ("encoder", &encoder_corpus),
            ("familiarity", &familiarity_corpus),
            ("generator", &generator_corpus),
        ] {
            if *hash != base_corpus {
                mismatches.push(format!(
                    "  {name} trained on corpus {hash}, base model on {base_corpus}"
                ));
            }
        }
        if !mismatches.is_empty() {
            return Err(EngineError::VersionMismatch(mismatches.join("\n")));
        }

        let d_embed = encoder.cfg.d_embed;
        if familiarity.cfg.d_in != d_embed {
            return Err(EngineError::VersionMismatch(format!(
                "  familiarity expects {}-dim embeddings, encoder produces {d_embed}",
                familiarity.cfg.d_in
            )));
        }
        if generator.denoiser.cfg.d_cond != d_embed {
            return Err(EngineError::VersionMismatch(format!(
                "  generator conditions on {}-dim embeddings, encoder produces {d_embed}",
                generator.denoiser.cfg.d_cond
            )));
        }
        let want_len = 2 * base.cfg.d_model + 1;
        if generator.denoiser.cfg.weight_len != want_len {
            return Err(EngineError::VersionMismatch(format!(
                "  generator emits {}-parameter neurons, the model's neurons have {want_len}",
                generator.denoiser.cfg.weight_len
            )));
        }
        if cfg.attach.layer_index >= base.cfg.n_layers {
            return Err(EngineError::BadAttach {
                layer: cfg.attach.layer_index,
                n_layers: base.cfg.n_layers,
            });
        }
        if let Routing::Entropy(eps) = cfg.routing {
            if eps <= 0.0 || !eps.is_finite() {
                return Err(EngineError::BadThreshold(eps));
            }
        }
        let replay = match (cfg.source, replay) {
            (WeightSource::BankReplay, None) => return Err(EngineError::MissingReplayIndex),
            (WeightSource::BankReplay, Some(r)) => r,
            (_, _) => BTreeMap::new(),
        };

        Ok(EditEngine {
            base,
            encoder,
            familiarity,
            generator,
            cfg,
            corpus_hash: base_corpus,
            replay,
        })
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn manifest(&self) -> EngineManifest {
        EngineManifest {
            cfg: self.cfg,
            corpus_hash: self.corpus_hash.clone(),
            base_hash: self.base.content_hash(),
            encoder_hash: self.encoder.content_hash(),
            familiarity_hash: self.familiarity.content_hash(),
            generator_hash: self.generator.content_hash(),
        }
    }

    /// Noise seed for one query, a pure function of the query tokens so
    /// batch order and arrival order cannot change any response.
    fn noise_seed(&self, query: &[u32]) -> u64 {
        let rendered: Vec<String> = query.iter().map(|t| t.to_string()).collect();
        Rng::subseed(self.cfg.seed, &format!("engine/noise/{}", rendered.join("-")))
    }

    /// The routing decision and neuron for one query, without generating a
    /// response: returns (embedding, entropy, routed_edited, weights).
    pub fn weights_for(
        &self,
        query: &[u32],
    ) -> Result<(Vec<f32>, f32, bool, NeuronWeights), EngineError> {
        let z = self.encoder.embed(query)?;
        let probs = self.familiarity.classify(&z);
        let h = entropy(&probs)?;
        let routed_edited = match self.cfg.routing {
            Routing::Entropy(eps) => h < eps,
            Routing::AlwaysEdited => true,
            Routing::NeverEdited => false,
        };

        let weights = if routed_edited {
            match self.cfg.source {
                WeightSource::Zero => NeuronWeights::zeros(self.base.cfg.d_model),
                WeightSource::BankReplay => self
                    .replay
                    .get(query)
                    .cloned()
                    .unwrap_or_else(|| NeuronWeights::zeros(self.base.cfg.d_model)),
                WeightSource::Diffusion { n_steps } => {
                    self.generator.generate(z.data(), n_steps, self.noise_seed(query))?
                }
            }
        } else {
            NeuronWeights::zeros(self.base.cfg.d_model)
        };
        Ok((z.data().to_vec(), h, routed_edited, weights))
    }

    /// Attachment argument for generation. A zero neuron is the identity,
    /// so it is skipped entirely, making "unedited response equals the base
    /// response" true by construction rather than by cancellation.
    pub fn neuron_arg<'a>(
        &self,
        weights: &'a NeuronWeights,
    ) -> Option<(&'a NeuronWeights, AttachPoint)> {
        if weights.is_zero() {
            None
        } else {
            Some((weights, self.cfg.attach))
        }
    }

    /// Answers one query: embed, route, generate or zero the neuron, then
    /// greedy-decode with the neuron attached.
    pub fn respond(&self, query: &[u32]) -> Result<EditTrace, EngineError> {
        let (z, h, routed_edited, weights) = self.weights_for(query)?;
        let response = self.base.generate_greedy(self.neuron_arg(&weights), query, self.cfg.max_new)?;
        let pre_edit = if self.cfg.capture_pre_edit {
            Some(self.base.generate_greedy(None, query, self.cfg.max_new)?)
        } else {
            None
        };

        Ok(EditTrace {
            query: query.to_vec(),
            z,
            entropy: h,
            routed_edited,
            weight_norm: weights.l2_norm(),
            response,
            pre_edit,
        })
    }

    /// Answers a list of queries. Each query's result depends only on that
    /// query, so the output is a permutation-stable map of the input.
    pub fn respond_batch(&self, queries: &[&[u32]]) -> Result<Vec<EditTrace>, EngineError> {
        queries.iter().map(|q| self.respond(q)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collector::{collect_bank, CollectConfig};
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::familiarity::{assign_labels, train_familiarity, FnConfig, FnTrainConfig};
    use crate::text_encoder::{tune_encoder, EncoderConfig, TuneConfig};
    use crate::toy_lm::{train_base, LMConfig, ToyLm, TrainSchedule};
    use crate::weight_gen::{
        Denoiser, DenoiserConfig, NoiseSchedule, ScheduleParams, WeightGenerator,
    };
    use std::sync::OnceLock;

    struct Fixture {
        corpus: Corpus,
        model: ToyLm,
        encoder: TextEncoder,
        familiarity: FamiliarityNet,
        bank: WeightBank,
        corpus_hash: String,
    }

    const ATTACH: AttachPoint = AttachPoint { layer_index: 1 };
    const EPSILON: f32 = 0.1;

    fn fixture() -> &'static Fixture {
        static CELL: OnceLock<Fixture> = OnceLock::new();
        CELL.get_or_init(|| {
            let corpus = generate_corpus(&CorpusConfig {
                seed: 41,
                edit: 16,
                pseudo: 6,
                irrelevant: 6,
                paraphrases: 3,
            })
            .unwrap();
            let vocab = corpus.tokenizer.vocab_size();
            let cfg = LMConfig {
                d_model: 32,
                n_layers: 2,
                n_heads: 2,
                ffn_hidden: 64,
                vocab_size: vocab,
                max_seq_len: 32,
            };
            let mut model = ToyLm::new(cfg, 42);
            let sched = TrainSchedule {
                max_epochs: 800,
                batch_size: 32,
                lr: 3e-3,
                check_every: 10,
                seed: 43,
                ..TrainSchedule::default()
            };
            train_base(&mut model, &corpus, &sched).expect("fixture model memorizes");

            let enc_cfg = EncoderConfig {
                d_embed: 32,
                n_layers: 1,
                n_heads: 2,
                ffn_hidden: 64,
                vocab_size: vocab,
                max_seq_len: 32,
            };
            let mut encoder = TextEncoder::new(enc_cfg, 44);
            let pairs: Vec<(Vec<u32>, Vec<u32>)> = corpus
                .split(Split::Pseudo)
                .flat_map(|f| {
                    f.paraphrases.iter().map(|p| (p.clone(), f.query.clone()))
                })
                .collect();
            tune_encoder(&mut encoder, &pairs, &TuneConfig { epochs: 10, ..Default::default() })
                .expect("encoder tunes");

            let edit_facts: Vec<&crate::corpus::FactRecord> =
                corpus.split(Split::Edit).collect();
            let queries: Vec<&[u32]> = edit_facts.iter().map(|f| f.query.as_slice()).collect();
            let z = encoder.embed_batch(&queries).expect("embedding succeeds");
            let ids: Vec<String> = edit_facts.iter().map(|f| f.fact_id.clone()).collect();
            let labels_map = assign_labels(&ids, 10, 45).unwrap();
            let labels: Vec<u32> = ids.iter().map(|id| labels_map[id]).collect();
            let mut familiarity = FamiliarityNet::new(
                FnConfig { d_in: 32, hidden: 64, n_blocks: 2, k: 10 },
                46,
            )
            .unwrap();
            train_familiarity(&mut familiarity, &z, &labels, &FnTrainConfig::default())
                .expect("familiarity overfits");

            let bank = collect_bank(&model, &encoder, &corpus, ATTACH, &CollectConfig::default())
                .expect("collection succeeds");
            let corpus_hash = corpus.content_hash();
            Fixture { corpus, model, encoder, familiarity, bank, corpus_hash }
        })
    }

    /// An engine over fixture clones; the generator is fresh (untrained),
    /// which is enough for routing, identity, and determinism properties.
    fn engine_with(fx: &Fixture, cfg: EngineConfig) -> EditEngine {
        let den = Denoiser::new(
            DenoiserConfig {
                weight_len: 2 * 32 + 1,
                patch_size: 100,
                width: 32,
                depth: 1,
                heads: 2,
                d_cond: 32,
                t_embed: 16,
            },
            47,
        );
        let generator = WeightGenerator::new(
            den,
            NoiseSchedule::linear(ScheduleParams::default()),
            fx.bank.stats.clone(),
        );
        let replay = Some(replay_index(&fx.bank, &fx.corpus));
        EditEngine::assemble(
            EngineParts {
                base: fx.model.clone(),
                base_corpus: fx.corpus_hash.clone(),
                encoder: fx.encoder.clone(),
                encoder_corpus: fx.corpus_hash.clone(),
                familiarity: fx.familiarity.clone(),
                familiarity_corpus: fx.corpus_hash.clone(),
                generator,
                generator_corpus: fx.corpus_hash.clone(),
                replay,
            },
            cfg,
        )
        .expect("fixture components are coherent")
    }

    fn base_cfg() -> EngineConfig {
        let mut cfg = EngineConfig::new(ATTACH, EPSILON, 10);
        cfg.capture_pre_edit = true;
        cfg
    }

    #[test]
    fn assemble_refuses_mismatched_corpus_hashes() {
        let fx = fixture();
        let den = Denoiser::new(
            DenoiserConfig {
                weight_len: 65,
                patch_size: 100,
                width: 32,
                depth: 1,
                heads: 2,
                d_cond: 32,
                t_embed: 16,
            },
            47,
        );
        let generator = WeightGenerator::new(
            den,
            NoiseSchedule::linear(ScheduleParams::default()),
            fx.bank.stats.clone(),
        );
        let result = EditEngine::assemble(
            EngineParts {
                base: fx.model.clone(),
                base_corpus: fx.corpus_hash.clone(),
                encoder: fx.encoder.clone(),
                encoder_corpus: "someone-elses-corpus".into(),
                familiarity: fx.familiarity.clone(),
                familiarity_corpus: fx.corpus_hash.clone(),
                generator,
                generator_corpus: fx.corpus_hash.clone(),
                replay: None,
            },
            base_cfg(),
        );
        let Err(err) = result else { panic!("mismatched corpus must be refused") };
        let report = err.to_string();
        assert!(report.contains("encoder"), "report names the odd component: {report}");
        assert!(report.contains("someone-elses-corpus"), "report carries the hash: {report}");
    }

    #[test]
    fn unedited_routes_answer_exactly_like_the_base_model() {
        let fx = fixture();
        let engine = engine_with(fx, base_cfg());
        let mut saw_unedited = 0usize;
        for fact in fx.corpus.split(Split::Irrelevant) {
            let trace = engine.respond(&fact.query).unwrap();
            if !trace.routed_edited {
                saw_unedited += 1;
                assert_eq!(trace.weight_norm, 0.0);
                assert_eq!(
                    trace.response,
                    trace.pre_edit.clone().unwrap(),
                    "unedited path must be the base model bit for bit"
                );
            }
        }
        assert!(saw_unedited > 0, "fixture should route some irrelevant queries as unedited");
    }

    #[test]
    fn never_edited_engine_is_the_base_model_on_every_query() {
        let fx = fixture();
        let mut cfg = base_cfg();
        cfg.routing = Routing::NeverEdited;
        let engine = engine_with(fx, cfg);
        for fact in fx.corpus.split(Split::Edit).take(4) {
            let trace = engine.respond(&fact.query).unwrap();
            assert!(!trace.routed_edited);
            assert_eq!(trace.weight_norm, 0.0);
            assert_eq!(trace.response, trace.pre_edit.unwrap());
        }
    }

    #[test]
    fn bank_replay_reproduces_edited_answers() {
        let fx = fixture();
        let mut cfg = base_cfg();
        cfg.source = WeightSource::BankReplay;
        cfg.routing = Routing::AlwaysEdited;
        let engine = engine_with(fx, cfg);
        for fact in fx.corpus.split(Split::Edit) {
            let pair = fx.bank.pairs.iter().find(|p| p.fact_id == fact.fact_id).unwrap();
            if !pair.converged {
                continue;
            }
            let trace = engine.respond(&fact.query).unwrap();
            assert!(
                trace.response.len() >= fact.target.len()
                    && trace.response[..fact.target.len()] == fact.target[..],
                "replayed weights answer fact {} with its edited object: got {:?}, want {:?}",
                fact.fact_id,
                trace.response,
                fact.target
            );
            assert!(trace.weight_norm > 0.0);
        }
    }

    #[test]
    fn responses_are_deterministic_and_order_independent() {
        let fx = fixture();
        let mut cfg = base_cfg();
        cfg.routing = Routing::AlwaysEdited;
        let engine = engine_with(fx, cfg);
        let facts: Vec<&crate::corpus::FactRecord> =
            fx.corpus.split(Split::Edit).take(3).collect();
        let forward: Vec<&[u32]> = facts.iter().map(|f| f.query.as_slice()).collect();
        let backward: Vec<&[u32]> = forward.iter().rev().cloned().collect();
        let a = engine.respond_batch(&forward).unwrap();
        let b = engine.respond_batch(&backward).unwrap();
        for (i, trace) in a.iter().enumerate() {
            assert_eq!(trace, &b[b.len() - 1 - i], "batch order leaked into a trace");
        }
        let single = engine.respond(forward[0]).unwrap();
        assert_eq!(single, a[0], "batch and single calls must agree");
    }

    #[test]
    fn trace_flags_reconcile_with_threshold_and_norm() {
        let fx = fixture();
        let mut cfg = base_cfg();
        cfg.source = WeightSource::Diffusion { n_steps: 10 };
        let engine = engine_with(fx, cfg);
        let queries: Vec<&[u32]> = fx
            .corpus
            .split(Split::Edit)
            .chain(fx.corpus.split(Split::Irrelevant))
            .map(|f| f.query.as_slice())
            .collect();
        for trace in engine.respond_batch(&queries).unwrap() {
            assert_eq!(trace.routed_edited, trace.entropy < EPSILON);
            if !trace.routed_edited {
                assert_eq!(trace.weight_norm, 0.0);
            }
            assert!(trace.entropy >= 0.0);
            assert_eq!(trace.z.len(), 32);
        }
    }

    #[test]
    fn respond_never_touches_the_base_checkpoint() {
        let fx = fixture();
        let before = fx.model.content_hash();
        let mut cfg = base_cfg();
        cfg.routing = Routing::AlwaysEdited;
        let engine = engine_with(fx, cfg);
        for fact in fx.corpus.split(Split::Edit).take(4) {
            engine.respond(&fact.query).unwrap();
        }
        assert_eq!(engine.base.content_hash(), before);
        assert_eq!(fx.model.content_hash(), before);
    }

    #[test]
    fn replay_source_without_index_is_refused() {
        let fx = fixture();
        let den = Denoiser::new(
            DenoiserConfig {
                weight_len: 65,
                patch_size: 100,
                width: 32,
                depth: 1,
                heads: 2,
                d_cond: 32,
                t_embed: 16,
            },
            47,
        );
        let generator = WeightGenerator::new(
            den,
            NoiseSchedule::linear(ScheduleParams::default()),
            fx.bank.stats.clone(),
        );
        let mut cfg = base_cfg();
        cfg.source = WeightSource::BankReplay;
        let result = EditEngine::assemble(
            EngineParts {
                base: fx.model.clone(),
                base_corpus: fx.corpus_hash.clone(),
                encoder: fx.encoder.clone(),
                encoder_corpus: fx.corpus_hash.clone(),
                familiarity: fx.familiarity.clone(),
                familiarity_corpus: fx.corpus_hash.clone(),
                generator,
                generator_corpus: fx.corpus_hash.clone(),
                replay: None,
            },
            cfg,
        );
        let Err(err) = result else { panic!("replay without index must be refused") };
        assert!(matches!(err, EngineError::MissingReplayIndex));
    }

    #[test]
    fn manifest_names_every_component_hash() {
        let fx = fixture();
        let engine = engine_with(fx, base_cfg());
        let m = engine.manifest();
        assert_eq!(m.corpus_hash, fx.corpus_hash);
        assert_eq!(m.base_hash, fx.model.content_hash());
        assert_eq!(m.encoder_hash, fx.encoder.content_hash());
        assert_eq!(m.familiarity_hash, fx.familiarity.content_hash());
        let json = serde_json::to_string(&m).unwrap();
        let back: EngineManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}
