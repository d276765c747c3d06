//! Synthetic fact corpus: generation, tokenization, persistence.
//!
//! Facts are ("subject", relation, object) triples over invented entities,
//! rendered into natural-language queries by per-relation templates. Each
//! fact carries a paraphrase pool built from fixed rewrite templates
//! (question inversion, synonym substitution, clause reordering). The corpus
//! is partitioned into three subject-disjoint splits:
//!
//! - `edit`: facts whose answers get edited; the base model learns an old
//!   (deranged) object so every edit genuinely changes the answer
//! - `pseudo`: held-out facts powering encoder tuning pairs and zero-weight
//!   augmentation
//! - `irrelevant`: facts that must survive editing untouched
//!
//! Generation is fully deterministic for a fixed config, including the
//! serialized byte stream.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::Rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("fact counts must be positive (edit={edit}, pseudo={pseudo}, irrelevant={irrelevant})")]
    InvalidCounts { edit: usize, pseudo: usize, irrelevant: usize },
    #[error("requested {requested} paraphrases but the template pool holds only {available}")]
    TemplatePoolTooSmall { requested: usize, available: usize },
    #[error("corpus needs {needed} unique subjects but the pool holds {available}")]
    SubjectPoolExhausted { needed: usize, available: usize },
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed corpus line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Which partition a fact belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Edit,
    Pseudo,
    Irrelevant,
}

/// One synthetic fact with its query, answer, and paraphrase pool.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactRecord {
    pub fact_id: String,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub split: Split,
    /// Original query phrasing, tokenized.
    pub query: Vec<u32>,
    /// Answer tokens (1 to 3 of them).
    pub target: Vec<u32>,
    /// Alternative phrasings, each tokenized; pairwise distinct.
    pub paraphrases: Vec<Vec<u32>>,
    /// Edit facts only: the object the base model is taught instead.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub old_object: Option<String>,
    /// Edit facts only: tokens of `old_object`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub old_target: Option<Vec<u32>>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub edit: usize,
    pub pseudo: usize,
    pub irrelevant: usize,
    pub paraphrases: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { seed: 7, edit: 64, pseudo: 128, irrelevant: 256, paraphrases: 3 }
    }
}

// ---- tokenizer ----

/// Word-level tokenizer over the closed corpus vocabulary.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Tokenizer {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const CLS: u32 = 3;
    pub const UNK: u32 = 4;
    const SPECIALS: [&'static str; 5] = ["<pad>", "<bos>", "<eos>", "<cls>", "<unk>"];

    /// Builds a vocabulary from whitespace words in first-seen order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: BTreeMap<String, u32> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        for text in texts {
            for word in text.split_whitespace() {
                if !index.contains_key(word) {
                    index.insert(word.to_string(), words.len() as u32);
                    words.push(word.to_string());
                }
            }
        }
        Tokenizer { words, index }
    }

    #[must_use]
    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Whitespace-split encoding; unknown words map to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(Self::UNK))
            .collect()
    }

    /// Inverse of [`Tokenizer::encode`]; special ids are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id < Self::SPECIALS.len() as u32 {
                continue;
            }
            let word = self
                .words
                .get(id as usize)
                .map(String::as_str)
                .unwrap_or("<oov>");
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(word);
        }
        out
    }

    /// Deterministic JSON rendering of the vocabulary.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct VocabFile<'a> {
            specials: BTreeMap<&'static str, u32>,
            words: Vec<&'a str>,
        }
        let specials = BTreeMap::from([
            ("pad", Self::PAD),
            ("bos", Self::BOS),
            ("eos", Self::EOS),
            ("cls", Self::CLS),
            ("unk", Self::UNK),
        ]);
        let file = VocabFile {
            specials,
            words: self.words.iter().skip(Self::SPECIALS.len()).map(String::as_str).collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, CorpusError> {
        #[derive(Deserialize)]
        struct VocabFile {
            #[allow(dead_code)]
            specials: BTreeMap<String, u32>,
            words: Vec<String>,
        }
        let file: VocabFile = serde_json::from_str(json)
            .map_err(|e| CorpusError::Malformed { line: 0, message: format!("vocab: {e}") })?;
        let mut words: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(file.words);
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Ok(Tokenizer { words, index })
    }
}

// ---- static template material ----

const SUBJECT_PREFIXES: [&str; 40] = [
    "veldra", "zorim", "quenth", "marlow", "tessin", "ubrak", "nolva", "ferrin", "galdo",
    "hysper", "ilmar", "jotan", "kelvor", "lumet", "myrra", "norvex", "ostrel", "pindar",
    "quolas", "rhovan", "sellic", "tarvek", "ulmora", "vintra", "wextol", "xandor", "ybbren",
    "zelkov", "ardwin", "brelu", "cathmor", "drossel", "enwick", "farlan", "grotha", "helvio",
    "iskra", "jorvel", "krintas", "lovath",
];

const SUBJECT_SUFFIXES: [&str; 18] = [
    "empire", "kingdom", "republic", "province", "island", "valley", "federation", "dominion",
    "isles", "territory", "basin", "union", "reach", "march", "enclave", "steppe", "coast",
    "realm",
];

const NAME_BANK: [&str; 60] = [
    "avelor", "brintas", "corvun", "dagelle", "erastin", "fimbra", "gosfor", "hulden",
    "irvane", "jasperon", "kelmin", "lorvath", "mossern", "nivelle", "ordssen", "palkin",
    "quorast", "rendal", "sorvane", "tulder", "umbrell", "vastrik", "welden", "xiphra",
    "yonder", "zembla", "arkette", "bolvan", "cresten", "dunvar", "eldwin", "fenrost",
    "gravenn", "hollis", "imbrak", "jultane", "kestrel", "lombard", "mirvale", "nostrum",
    "opaline", "prandel", "quiver", "rostov", "seldane", "torvik", "ulfgar", "vendale",
    "wrenfal", "xalvor", "ypsilon", "zaranth", "antrel", "bryce", "caldor", "drumlin",
    "evering", "fallow", "gorseth", "harling",
];

struct RelationSpec {
    name: &'static str,
    query: &'static str,
    rewrites: [&'static str; 5],
    object_patterns: [&'static str; 3],
}

const RELATIONS: [RelationSpec; 8] = [
    RelationSpec {
        name: "capital",
        query: "what is the capital of {s}",
        rewrites: [
            "the capital of {s} is what",
            "name the capital city of {s}",
            "which city serves as the capital of {s}",
            "tell me the capital of {s}",
            "{s} has what capital",
        ],
        object_patterns: ["{n}", "port {n}", "{n} harbor"],
    },
    RelationSpec {
        name: "currency",
        query: "what currency is used in {s}",
        rewrites: [
            "the currency used in {s} is what",
            "name the money spent in {s}",
            "which currency circulates in {s}",
            "tell me the currency of {s}",
            "{s} spends what currency",
        ],
        object_patterns: ["{n}", "{n} crown", "silver {n}"],
    },
    RelationSpec {
        name: "leader",
        query: "who leads the government of {s}",
        rewrites: [
            "the government of {s} is led by whom",
            "name the ruler of {s}",
            "which person governs {s}",
            "tell me the leader of {s}",
            "{s} is governed by whom",
        ],
        object_patterns: ["chancellor {n}", "{n}", "queen {n}"],
    },
    RelationSpec {
        name: "language",
        query: "what language is spoken in {s}",
        rewrites: [
            "the language spoken in {s} is what",
            "name the tongue used in {s}",
            "which language do people speak in {s}",
            "tell me the language of {s}",
            "{s} speaks what language",
        ],
        object_patterns: ["{n}", "old {n}", "{n} tongue"],
    },
    RelationSpec {
        name: "anthem",
        query: "what is the national anthem of {s}",
        rewrites: [
            "the national anthem of {s} is what",
            "name the anthem sung in {s}",
            "which song is the anthem of {s}",
            "tell me the anthem of {s}",
            "{s} sings what anthem",
        ],
        object_patterns: ["ode to {n}", "{n}", "march of {n}"],
    },
    RelationSpec {
        name: "founder",
        query: "who founded the nation of {s}",
        rewrites: [
            "the nation of {s} was founded by whom",
            "name the founder of {s}",
            "which figure established {s}",
            "tell me the founder of {s}",
            "{s} was established by whom",
        ],
        object_patterns: ["{n}", "saint {n}", "general {n}"],
    },
    RelationSpec {
        name: "export",
        query: "what is the main export of {s}",
        rewrites: [
            "the main export of {s} is what",
            "name the chief good shipped from {s}",
            "which good does {s} export most",
            "tell me the main export of {s}",
            "{s} mostly exports what",
        ],
        object_patterns: ["{n}", "{n} ore", "dried {n}"],
    },
    RelationSpec {
        name: "festival",
        query: "what festival is celebrated in {s}",
        rewrites: [
            "the festival celebrated in {s} is what",
            "name the feast held in {s}",
            "which festival do people hold in {s}",
            "tell me the festival of {s}",
            "{s} celebrates what festival",
        ],
        object_patterns: ["feast of {n}", "{n}", "{n} night"],
    },
];

/// Objects available to one relation, in fixed order.
fn object_pool(spec: &RelationSpec) -> Vec<String> {
    let mut pool = Vec::with_capacity(NAME_BANK.len() / 2);
    // Each relation draws a disjoint arc of the name bank per pattern so the
    // pools stay modest and answers stay visually distinct across relations.
    for (pi, pattern) in spec.object_patterns.iter().enumerate() {
        for k in 0..8 {
            let name = NAME_BANK[(pi * 8 + k + spec.name.len() * 7) % NAME_BANK.len()];
            let rendered = pattern.replace("{n}", name);
            if !pool.contains(&rendered) {
                pool.push(rendered);
            }
        }
    }
    pool
}

// ---- corpus ----

/// Generated fact set plus the tokenizer built over it.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub facts: Vec<FactRecord>,
    pub tokenizer: Tokenizer,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &FactRecord> {
        self.facts.iter().filter(move |f| f.split == split)
    }

    pub fn fact(&self, fact_id: &str) -> Option<&FactRecord> {
        self.facts.iter().find(|f| f.fact_id == fact_id)
    }

    /// One JSONL line per fact, trailing newline included.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for fact in &self.facts {
            out.push_str(&serde_json::to_string(fact).expect("fact serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(jsonl: &str, tokenizer: Tokenizer) -> Result<Self, CorpusError> {
        let mut facts = Vec::new();
        for (i, line) in jsonl.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fact: FactRecord = serde_json::from_str(line)
                .map_err(|e| CorpusError::Malformed { line: i + 1, message: format!("{e}") })?;
            facts.push(fact);
        }
        Ok(Corpus { facts, tokenizer })
    }

    /// Content hash over the serialized facts and vocabulary; all model
    /// checkpoints record it so stale mixtures are caught at load time.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_jsonl().as_bytes());
        h.update(self.tokenizer.to_json().as_bytes());
        hex(&h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("corpus.jsonl"))?;
        f.write_all(self.to_jsonl().as_bytes())?;
        let mut v = fs::File::create(dir.join("vocab.json"))?;
        v.write_all(self.tokenizer.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let vocab = fs::read_to_string(dir.join("vocab.json"))?;
        let tokenizer = Tokenizer::from_json(&vocab)?;
        let file = fs::File::open(dir.join("corpus.jsonl"))?;
        let mut jsonl = String::new();
        for line in BufReader::new(file).lines() {
            jsonl.push_str(&line?);
            jsonl.push('\n');
        }
        Corpus::from_jsonl(&jsonl, tokenizer)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Generates the corpus for a config; deterministic in every byte.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus, CorpusError> {
    if cfg.edit == 0 || cfg.pseudo == 0 || cfg.irrelevant == 0 {
        return Err(CorpusError::InvalidCounts {
            edit: cfg.edit,
            pseudo: cfg.pseudo,
            irrelevant: cfg.irrelevant,
        });
    }
    let max_rewrites = RELATIONS[0].rewrites.len();
    if cfg.paraphrases > max_rewrites {
        return Err(CorpusError::TemplatePoolTooSmall {
            requested: cfg.paraphrases,
            available: max_rewrites,
        });
    }

    let total = cfg.edit + cfg.pseudo + cfg.irrelevant;
    let mut subjects: Vec<String> = Vec::with_capacity(SUBJECT_PREFIXES.len() * SUBJECT_SUFFIXES.len());
    for p in SUBJECT_PREFIXES {
        for s in SUBJECT_SUFFIXES {
            subjects.push(format!("{p} {s}"));
        }
    }
    if total > subjects.len() {
        return Err(CorpusError::SubjectPoolExhausted { needed: total, available: subjects.len() });
    }

    let mut rng = Rng::derived(cfg.seed, "corpus/assignment");
    rng.shuffle(&mut subjects);

    let pools: Vec<Vec<String>> = RELATIONS.iter().map(object_pool).collect();

    struct Draft {
        split: Split,
        subject: String,
        relation: usize,
        object: String,
        old_object: Option<String>,
        query: String,
        paraphrases: Vec<String>,
    }

    let mut drafts = Vec::with_capacity(total);
    for (i, subject) in subjects.drain(..).take(total).enumerate() {
        let split = if i < cfg.edit {
            Split::Edit
        } else if i < cfg.edit + cfg.pseudo {
            Split::Pseudo
        } else {
            Split::Irrelevant
        };
        let relation = rng.below(RELATIONS.len());
        let spec = &RELATIONS[relation];
        let pool = &pools[relation];
        let obj_idx = rng.below(pool.len());
        let object = pool[obj_idx].clone();
        // Fixed derangement: the old answer is the next pool entry, so every
        // edit genuinely changes the answer.
        let old_object = match split {
            Split::Edit => Some(pool[(obj_idx + 1) % pool.len()].clone()),
            _ => None,
        };
        let query = spec.query.replace("{s}", &subject);
        let paraphrases: Vec<String> = spec.rewrites[..cfg.paraphrases]
            .iter()
            .map(|t| t.replace("{s}", &subject))
            .collect();
        drafts.push(Draft { split, subject, relation, object, old_object, query, paraphrases });
    }

    // Vocabulary over every surface string, in generation order.
    let mut texts: Vec<&str> = Vec::new();
    for d in &drafts {
        texts.push(&d.query);
        for p in &d.paraphrases {
            texts.push(p);
        }
        texts.push(&d.object);
        if let Some(o) = &d.old_object {
            texts.push(o);
        }
    }
    let tokenizer = Tokenizer::from_texts(texts);

    let mut counters = BTreeMap::from([("e", 0usize), ("p", 0usize), ("u", 0usize)]);
    let facts = drafts
        .into_iter()
        .map(|d| {
            let prefix = match d.split {
                Split::Edit => "e",
                Split::Pseudo => "p",
                Split::Irrelevant => "u",
            };
            let n = counters.get_mut(prefix).unwrap();
            let fact_id = format!("{prefix}{n:04}");
            *n += 1;
            FactRecord {
                fact_id,
                subject: d.subject,
                relation: RELATIONS[d.relation].name.to_string(),
                object: d.object.clone(),
                split: d.split,
                query: tokenizer.encode(&d.query),
                target: tokenizer.encode(&d.object),
                paraphrases: d.paraphrases.iter().map(|p| tokenizer.encode(p)).collect(),
                old_target: d.old_object.as_deref().map(|o| tokenizer.encode(o)),
                old_object: d.old_object,
            }
        })
        .collect();

    Ok(Corpus { facts, tokenizer })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig { seed: 3, edit: 8, pseudo: 8, irrelevant: 8, paraphrases: 3 }
    }

    #[test]
    fn example_config_yields_448_records_with_unique_subjects() {
        let cfg = CorpusConfig { seed: 1, edit: 64, pseudo: 128, irrelevant: 256, paraphrases: 5 };
        let corpus = generate_corpus(&cfg).unwrap();
        assert_eq!(corpus.facts.len(), 448);
        let subjects: BTreeSet<&str> = corpus.facts.iter().map(|f| f.subject.as_str()).collect();
        assert_eq!(subjects.len(), 448);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let cfg = small();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert_eq!(a.tokenizer.to_json(), b.tokenizer.to_json());
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&CorpusConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.to_jsonl(), b.to_jsonl());
    }

    #[test]
    fn splits_are_subject_disjoint() {
        let corpus = generate_corpus(&small()).unwrap();
        let collect = |s: Split| -> BTreeSet<&str> {
            corpus.split(s).map(|f| f.subject.as_str()).collect()
        };
        let e = collect(Split::Edit);
        let p = collect(Split::Pseudo);
        let u = collect(Split::Irrelevant);
        assert!(e.intersection(&p).next().is_none());
        assert!(e.intersection(&u).next().is_none());
        assert!(p.intersection(&u).next().is_none());
    }

    #[test]
    fn paraphrases_are_distinct_and_share_target() {
        let corpus = generate_corpus(&small()).unwrap();
        for fact in corpus.split(Split::Edit) {
            assert!(fact.paraphrases.len() >= 3);
            let mut seen = BTreeSet::new();
            for p in &fact.paraphrases {
                assert_ne!(p, &fact.query, "{}", fact.fact_id);
                assert!(seen.insert(p.clone()), "repeat paraphrase in {}", fact.fact_id);
                let surface = corpus.tokenizer.decode(p);
                assert!(!surface.is_empty());
            }
            let decoded: BTreeSet<String> =
                fact.paraphrases.iter().map(|p| corpus.tokenizer.decode(p)).collect();
            assert_eq!(decoded.len(), fact.paraphrases.len());
        }
    }

    #[test]
    fn edit_facts_carry_a_different_old_object() {
        let corpus = generate_corpus(&small()).unwrap();
        for fact in &corpus.facts {
            match fact.split {
                Split::Edit => {
                    let old = fact.old_object.as_ref().expect("edit fact has old object");
                    assert_ne!(old, &fact.object, "{}", fact.fact_id);
                    assert_ne!(fact.old_target.as_ref().unwrap(), &fact.target);
                }
                _ => assert!(fact.old_object.is_none()),
            }
        }
    }

    #[test]
    fn targets_are_one_to_three_tokens() {
        let corpus = generate_corpus(&small()).unwrap();
        for fact in &corpus.facts {
            assert!(
                (1..=3).contains(&fact.target.len()),
                "{} target len {}",
                fact.fact_id,
                fact.target.len()
            );
        }
    }

    #[test]
    fn round_trip_identity_on_corpus_text() {
        let corpus = generate_corpus(&small()).unwrap();
        let t = &corpus.tokenizer;
        let text = "what is the capital of veldra empire";
        assert_eq!(t.decode(&t.encode(text)), text);
        assert_eq!(t.encode(""), Vec::<u32>::new());
        let unk = t.encode("what is a zyxwv");
        assert_eq!(*unk.last().unwrap(), Tokenizer::UNK);
    }

    #[test]
    fn oversized_paraphrase_request_is_rejected() {
        let cfg = CorpusConfig { paraphrases: 9, ..small() };
        assert!(matches!(
            generate_corpus(&cfg),
            Err(CorpusError::TemplatePoolTooSmall { requested: 9, available: 5 })
        ));
    }

    #[test]
    fn zero_counts_are_rejected() {
        let cfg = CorpusConfig { edit: 0, ..small() };
        assert!(matches!(generate_corpus(&cfg), Err(CorpusError::InvalidCounts { .. })));
    }

    #[test]
    fn jsonl_round_trip_preserves_facts() {
        let corpus = generate_corpus(&small()).unwrap();
        let jsonl = corpus.to_jsonl();
        let back = Corpus::from_jsonl(&jsonl, corpus.tokenizer.clone()).unwrap();
        assert_eq!(back.facts.len(), corpus.facts.len());
        assert_eq!(back.to_jsonl(), jsonl);
    }

    #[test]
    fn vocab_json_round_trip_preserves_ids() {
        let corpus = generate_corpus(&small()).unwrap();
        let json = corpus.tokenizer.to_json();
        let back = Tokenizer::from_json(&json).unwrap();
        assert_eq!(back.vocab_size(), corpus.tokenizer.vocab_size());
        let text = "name the ruler of veldra empire";
        assert_eq!(back.encode(text), corpus.tokenizer.encode(text));
    }

    #[test]
    fn vocabulary_stays_closed_and_modest() {
        let cfg = CorpusConfig { seed: 1, edit: 64, pseudo: 128, irrelevant: 256, paraphrases: 5 };
        let corpus = generate_corpus(&cfg).unwrap();
        assert!(corpus.tokenizer.vocab_size() < 900, "vocab {}", corpus.tokenizer.vocab_size());
    }
}
