//! Stage orchestration over a content-hashed artifact directory. The graph
//! is fixed: corpus -> lm -> encoder -> fn -> collect -> diff -> eval. Each
//! completed stage records the hash of its config slice, its input artifact
//! hashes, and its output artifact hash in manifest.json; a rerun whose
//! slice and inputs are unchanged verifies the output hash and performs no
//! writes, and an output that no longer matches the manifest is an error
//! rather than a silent reuse.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use meg_core::collector::{
    collect_bank, layer_sweep, CollectConfig, CollectError, WeightBank,
};
use meg_core::corpus::{generate_corpus, Corpus, CorpusConfig, CorpusError, Split};
use meg_core::edit_engine::{
    replay_index, EditEngine, EngineConfig, EngineError, EngineParts,
};
use meg_core::evalkit::{
    capture_pre_edit, evaluate, render_text, to_csv, EvalError, MetricsReport,
};
use meg_core::familiarity::{
    assign_labels, train_familiarity, FamiliarityNet, FnConfig, FnError, FnTrainConfig,
};
use meg_core::text_encoder::{
    tune_encoder, EncoderConfig, EncoderError, TextEncoder, TuneConfig,
};
use meg_core::toy_lm::{train_base, AttachPoint, LMConfig, LmError, ToyLm, TrainSchedule};
use meg_core::weight_gen::{
    train_diffusion, Denoiser, DenoiserConfig, DiffusionTrainConfig, GenError,
    NoiseSchedule, ScheduleParams, WeightGenerator,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{hex, slice_hash, AttachChoice, ConfigError, ExperimentConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage} has not run here yet; run `meg {stage}` first")]
    MissingPrerequisite { stage: &'static str },
    #[error(
        "artifacts for stage {stage} do not match its manifest entry \
         (recorded {expected}, found {got}); rerun the stage or clean the directory"
    )]
    HashMismatch { stage: String, expected: String, got: String },
    #[error("artifact directory {0} is not empty; reproduce needs a clean one")]
    DirtyArtifacts(PathBuf),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("language model: {0}")]
    Lm(#[from] LmError),
    #[error("encoder: {0}")]
    Encoder(#[from] EncoderError),
    #[error("familiarity: {0}")]
    Familiarity(#[from] FnError),
    #[error("collection: {0}")]
    Collect(#[from] CollectError),
    #[error("weight generator: {0}")]
    Generator(#[from] GenError),
    #[error("engine: {0}")]
    Engine(#[from] EngineError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("artifact serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// Process exit code the CLI maps this failure to: 2 for configuration
    /// and usage problems, 3 for stage failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) | PipelineError::DirtyArtifacts(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Corpus,
    Lm,
    Encoder,
    Familiarity,
    Collect,
    Diffusion,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Corpus,
        Stage::Lm,
        Stage::Encoder,
        Stage::Familiarity,
        Stage::Collect,
        Stage::Diffusion,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Lm => "lm",
            Stage::Encoder => "encoder",
            Stage::Familiarity => "fn",
            Stage::Collect => "collect",
            Stage::Diffusion => "diff",
            Stage::Eval => "eval",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Every stage this one needs, in pipeline order; the first missing one
    /// is named in the error.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Corpus => &[],
            Stage::Lm | Stage::Encoder => &[Stage::Corpus],
            Stage::Familiarity => &[Stage::Corpus, Stage::Encoder],
            Stage::Collect => &[Stage::Corpus, Stage::Lm, Stage::Encoder],
            Stage::Diffusion => {
                &[Stage::Corpus, Stage::Lm, Stage::Encoder, Stage::Collect]
            }
            Stage::Eval => &[
                Stage::Corpus,
                Stage::Lm,
                Stage::Encoder,
                Stage::Familiarity,
                Stage::Collect,
                Stage::Diffusion,
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

impl StageOutcome {
    pub fn describe(self) -> &'static str {
        match self {
            StageOutcome::Ran => "completed",
            StageOutcome::UpToDate => "up to date",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    /// Hash of the config slice this stage consumed.
    pub config: String,
    /// Output hashes of the prerequisite stages at run time.
    pub inputs: BTreeMap<String, String>,
    /// Hash of this stage's artifact directory.
    pub output: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageEntry>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self, PipelineError> {
        let path = root.join("manifest.json");
        if !path.exists() {
            return Ok(Manifest::default());
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn save(&self, root: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(root)?;
        let tmp = root.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        fs::rename(tmp, root.join("manifest.json"))?;
        Ok(())
    }
}

/// Content hash of a directory: file names, sizes, and bytes, in sorted
/// order, subdirectories included.
pub fn hash_dir(dir: &Path) -> Result<String, PipelineError> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for path in files {
        let rel = path.strip_prefix(dir).expect("walk stays under dir");
        let bytes = fs::read(&path)?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update(u64::try_from(bytes.len()).expect("file fits in u64").to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn stage_config_hash(cfg: &ExperimentConfig, stage: Stage) -> String {
    match stage {
        Stage::Corpus => slice_hash(cfg.seed, &cfg.corpus),
        Stage::Lm => slice_hash(cfg.seed, &cfg.lm),
        Stage::Encoder => slice_hash(cfg.seed, &cfg.encoder),
        // Training knobs only; epsilon is routing-time and belongs to eval.
        Stage::Familiarity => slice_hash(
            cfg.seed,
            &(
                cfg.familiarity.k,
                cfg.familiarity.hidden,
                cfg.familiarity.n_blocks,
                cfg.familiarity.max_epochs,
                cfg.familiarity.lr,
                cfg.familiarity.target_accuracy,
                cfg.familiarity.target_entropy,
            ),
        ),
        Stage::Collect => slice_hash(cfg.seed, &cfg.collect),
        // Everything except n_steps, which only affects inference.
        Stage::Diffusion => {
            let d = &cfg.diffusion;
            slice_hash(
                cfg.seed,
                &(
                    (d.t_max, d.beta_start, d.beta_end),
                    (d.augment, d.augment_ratio),
                    (d.patch_size, d.width, d.depth, d.heads, d.t_embed),
                    (d.epochs, d.batch_size, d.lr, d.lr_final),
                    (d.check_every, d.gate_steps, d.gate_threshold),
                ),
            )
        }
        Stage::Eval => slice_hash(
            cfg.seed,
            &(&cfg.eval, cfg.familiarity.epsilon, cfg.diffusion.n_steps),
        ),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Checks that a prerequisite stage is recorded and its artifacts still
/// hash to what the manifest recorded.
fn verify_prerequisite(
    root: &Path,
    stage: Stage,
    manifest: &Manifest,
) -> Result<String, PipelineError> {
    let entry = manifest
        .stages
        .get(stage.name())
        .ok_or(PipelineError::MissingPrerequisite { stage: stage.name() })?;
    let dir = root.join(stage.name());
    if !dir.is_dir() {
        return Err(PipelineError::MissingPrerequisite { stage: stage.name() });
    }
    let got = hash_dir(&dir)?;
    if got != entry.output {
        return Err(PipelineError::HashMismatch {
            stage: stage.name().to_string(),
            expected: entry.output.clone(),
            got,
        });
    }
    Ok(entry.output.clone())
}

/// Runs one stage if its config slice or inputs changed; otherwise verifies
/// the recorded artifacts and leaves them alone.
pub fn run_stage(
    cfg: &ExperimentConfig,
    root: &Path,
    stage: Stage,
) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let mut manifest = Manifest::load(root)?;
    let mut inputs = BTreeMap::new();
    for dep in stage.prerequisites() {
        let output = verify_prerequisite(root, *dep, &manifest)?;
        inputs.insert(dep.name().to_string(), output);
    }

    let config_hash = stage_config_hash(cfg, stage);
    let dir = root.join(stage.name());
    if let Some(entry) = manifest.stages.get(stage.name()) {
        if entry.config == config_hash && entry.inputs == inputs {
            if dir.is_dir() {
                let got = hash_dir(&dir)?;
                if got == entry.output {
                    return Ok(StageOutcome::UpToDate);
                }
                return Err(PipelineError::HashMismatch {
                    stage: stage.name().to_string(),
                    expected: entry.output.clone(),
                    got,
                });
            }
            // Recorded but deleted from disk: fall through and rebuild.
        }
    }

    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    execute(cfg, root, stage, &dir)?;
    let output = hash_dir(&dir)?;
    manifest
        .stages
        .insert(stage.name().to_string(), StageEntry { config: config_hash, inputs, output });
    manifest.save(root)?;
    Ok(StageOutcome::Ran)
}

pub fn run_all(
    cfg: &ExperimentConfig,
    root: &Path,
) -> Result<Vec<(Stage, StageOutcome)>, PipelineError> {
    let mut outcomes = Vec::with_capacity(Stage::ALL.len());
    for stage in Stage::ALL {
        outcomes.push((stage, run_stage(cfg, root, stage)?));
    }
    Ok(outcomes)
}

/// Runs the whole pipeline in a directory that must start clean, and
/// returns the final metrics.
pub fn reproduce(
    cfg: &ExperimentConfig,
    root: &Path,
) -> Result<(Vec<(Stage, StageOutcome)>, MetricsReport), PipelineError> {
    if root.exists() && fs::read_dir(root)?.next().is_some() {
        return Err(PipelineError::DirtyArtifacts(root.to_path_buf()));
    }
    let outcomes = run_all(cfg, root)?;
    Ok((outcomes, load_report(root)?))
}

pub fn load_report(root: &Path) -> Result<MetricsReport, PipelineError> {
    let path = root.join("eval").join("report.json");
    if !path.exists() {
        return Err(PipelineError::MissingPrerequisite { stage: Stage::Eval.name() });
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

// ---- artifact loading ----

fn load_corpus(root: &Path) -> Result<Corpus, PipelineError> {
    Ok(Corpus::load(&root.join(Stage::Corpus.name()))?)
}

fn check_corpus_link(
    component: Stage,
    recorded: &str,
    corpus_hash: &str,
) -> Result<(), PipelineError> {
    if recorded != corpus_hash {
        return Err(PipelineError::HashMismatch {
            stage: component.name().to_string(),
            expected: corpus_hash.to_string(),
            got: recorded.to_string(),
        });
    }
    Ok(())
}

/// Assembles the edit engine from the artifact directory. Needs every stage
/// up to diff; the familiarity threshold, sampler step count, and response
/// budget come from the config.
pub fn build_engine(
    cfg: &ExperimentConfig,
    root: &Path,
) -> Result<EditEngine, PipelineError> {
    let corpus = load_corpus(root)?;
    let corpus_hash = corpus.content_hash();
    let (base, base_corpus) = ToyLm::load(&root.join(Stage::Lm.name()))?;
    let (encoder, encoder_corpus) = TextEncoder::load(&root.join(Stage::Encoder.name()))?;
    let (familiarity, familiarity_corpus) =
        FamiliarityNet::load(&root.join(Stage::Familiarity.name()))?;
    let bank = WeightBank::load(&root.join(Stage::Collect.name()))?;
    check_corpus_link(Stage::Collect, &bank.corpus_hash, &corpus_hash)?;
    let (generator, generator_corpus) =
        WeightGenerator::load(&root.join(Stage::Diffusion.name()))?;
    let replay = replay_index(&bank, &corpus);

    let mut engine_cfg =
        EngineConfig::new(bank.attach, cfg.familiarity.epsilon, cfg.diffusion.n_steps);
    engine_cfg.max_new = cfg.eval.max_new;
    engine_cfg.seed = cfg.subseed("pipeline/engine");
    let engine = EditEngine::assemble(
        EngineParts {
            base,
            base_corpus,
            encoder,
            encoder_corpus,
            familiarity,
            familiarity_corpus,
            generator,
            generator_corpus,
            replay: Some(replay),
        },
        engine_cfg,
    )?;
    check_corpus_link(Stage::Corpus, &corpus_hash, engine.corpus_hash())?;
    Ok(engine)
}

// ---- stage bodies ----

fn execute(
    cfg: &ExperimentConfig,
    root: &Path,
    stage: Stage,
    out: &Path,
) -> Result<(), PipelineError> {
    match stage {
        Stage::Corpus => run_corpus(cfg, out),
        Stage::Lm => run_lm(cfg, root, out),
        Stage::Encoder => run_encoder(cfg, root, out),
        Stage::Familiarity => run_familiarity(cfg, root, out),
        Stage::Collect => run_collect(cfg, root, out),
        Stage::Diffusion => run_diffusion(cfg, root, out),
        Stage::Eval => run_eval(cfg, root, out),
    }
}

fn run_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<(), PipelineError> {
    let corpus = generate_corpus(&CorpusConfig {
        seed: cfg.subseed("pipeline/corpus"),
        edit: cfg.corpus.edit,
        pseudo: cfg.corpus.pseudo,
        irrelevant: cfg.corpus.irrelevant,
        paraphrases: cfg.corpus.paraphrases,
    })?;
    corpus.save(out)?;
    Ok(())
}

fn run_lm(cfg: &ExperimentConfig, root: &Path, out: &Path) -> Result<(), PipelineError> {
    let corpus = load_corpus(root)?;
    let p = &cfg.lm;
    let mut model = ToyLm::new(
        LMConfig {
            d_model: p.d_model,
            n_layers: p.n_layers,
            n_heads: p.n_heads,
            ffn_hidden: p.ffn_hidden,
            vocab_size: corpus.tokenizer.vocab_size(),
            max_seq_len: p.max_seq_len,
        },
        cfg.subseed("pipeline/lm/init"),
    );
    let report = train_base(
        &mut model,
        &corpus,
        &TrainSchedule {
            max_epochs: p.max_epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            weight_decay: 0.0,
            target_accuracy: p.target_accuracy,
            include_edit_paraphrases: true,
            check_every: 5,
            seed: cfg.subseed("pipeline/lm/train"),
        },
    )?;
    model.save(out, &corpus.content_hash())?;
    write_json(&out.join("train_report.json"), &report)
}

fn run_encoder(cfg: &ExperimentConfig, root: &Path, out: &Path) -> Result<(), PipelineError> {
    let corpus = load_corpus(root)?;
    let p = &cfg.encoder;
    let mut encoder = TextEncoder::new(
        EncoderConfig {
            d_embed: p.d_embed,
            n_layers: p.n_layers,
            n_heads: p.n_heads,
            ffn_hidden: p.ffn_hidden,
            vocab_size: corpus.tokenizer.vocab_size(),
            max_seq_len: p.max_seq_len,
        },
        cfg.subseed("pipeline/encoder/init"),
    );
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = corpus
        .split(Split::Pseudo)
        .flat_map(|f| f.paraphrases.iter().map(|p| (p.clone(), f.query.clone())))
        .collect();
    let report = tune_encoder(
        &mut encoder,
        &pairs,
        &TuneConfig {
            tau: p.tau,
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            seed: cfg.subseed("pipeline/encoder/tune"),
        },
    )?;
    encoder.save(out, &corpus.content_hash())?;
    write_json(&out.join("tune_report.json"), &report)
}

fn run_familiarity(
    cfg: &ExperimentConfig,
    root: &Path,
    out: &Path,
) -> Result<(), PipelineError> {
    let corpus = load_corpus(root)?;
    let corpus_hash = corpus.content_hash();
    let (encoder, encoder_corpus) = TextEncoder::load(&root.join(Stage::Encoder.name()))?;
    check_corpus_link(Stage::Encoder, &encoder_corpus, &corpus_hash)?;

    let edit: Vec<_> = corpus.split(Split::Edit).collect();
    let queries: Vec<&[u32]> = edit.iter().map(|f| f.query.as_slice()).collect();
    let z = encoder.embed_batch(&queries)?;
    let ids: Vec<String> = edit.iter().map(|f| f.fact_id.clone()).collect();
    let label_map =
        assign_labels(&ids, cfg.familiarity.k, cfg.subseed("pipeline/familiarity/labels"))?;
    let labels: Vec<u32> = ids.iter().map(|id| label_map[id]).collect();

    let p = &cfg.familiarity;
    let mut net = FamiliarityNet::new(
        FnConfig { d_in: cfg.encoder.d_embed, hidden: p.hidden, n_blocks: p.n_blocks, k: p.k },
        cfg.subseed("pipeline/familiarity/init"),
    )?;
    let report = train_familiarity(
        &mut net,
        &z,
        &labels,
        &FnTrainConfig {
            max_epochs: p.max_epochs,
            lr: p.lr,
            target_accuracy: p.target_accuracy,
            target_entropy: p.target_entropy,
        },
    )?;
    net.save(out, &corpus_hash)?;
    write_json(&out.join("labels.json"), &label_map)?;
    write_json(&out.join("train_report.json"), &report)
}

fn run_collect(cfg: &ExperimentConfig, root: &Path, out: &Path) -> Result<(), PipelineError> {
    let corpus = load_corpus(root)?;
    let corpus_hash = corpus.content_hash();
    let (model, model_corpus) = ToyLm::load(&root.join(Stage::Lm.name()))?;
    check_corpus_link(Stage::Lm, &model_corpus, &corpus_hash)?;
    let (encoder, encoder_corpus) = TextEncoder::load(&root.join(Stage::Encoder.name()))?;
    check_corpus_link(Stage::Encoder, &encoder_corpus, &corpus_hash)?;

    let collect_cfg = CollectConfig {
        lr: cfg.collect.lr,
        weight_decay: cfg.collect.weight_decay,
        max_steps: cfg.collect.max_steps,
    };
    let attach = match &cfg.collect.attach {
        AttachChoice::Layer(n) => AttachPoint { layer_index: *n },
        AttachChoice::Mode(_) => {
            let facts: Vec<_> =
                corpus.split(Split::Edit).take(cfg.collect.sweep_facts).collect();
            let layers: Vec<usize> = (0..cfg.lm.n_layers).collect();
            let sweep = layer_sweep(&model, &facts, &layers, &collect_cfg)?;
            write_json(&out.join("layer_sweep.json"), &sweep)?;
            AttachPoint { layer_index: sweep.recommended }
        }
    };
    let bank = collect_bank(&model, &encoder, &corpus, attach, &collect_cfg)?;
    bank.save(out)?;
    Ok(())
}

fn run_diffusion(
    cfg: &ExperimentConfig,
    root: &Path,
    out: &Path,
) -> Result<(), PipelineError> {
    let corpus = load_corpus(root)?;
    let corpus_hash = corpus.content_hash();
    let (encoder, encoder_corpus) = TextEncoder::load(&root.join(Stage::Encoder.name()))?;
    check_corpus_link(Stage::Encoder, &encoder_corpus, &corpus_hash)?;
    let bank = WeightBank::load(&root.join(Stage::Collect.name()))?;
    check_corpus_link(Stage::Collect, &bank.corpus_hash, &corpus_hash)?;

    let d = &cfg.diffusion;
    let mut denoiser = Denoiser::new(
        DenoiserConfig {
            weight_len: bank.stats.mean.len(),
            patch_size: d.patch_size,
            width: d.width,
            depth: d.depth,
            heads: d.heads,
            d_cond: cfg.encoder.d_embed,
            t_embed: d.t_embed,
        },
        cfg.subseed("pipeline/diffusion/init"),
    );
    let pseudo_queries: Vec<&[u32]> =
        corpus.split(Split::Pseudo).map(|f| f.query.as_slice()).collect();
    let pseudo_z = encoder.embed_batch(&pseudo_queries)?;
    let schedule = NoiseSchedule::linear(ScheduleParams {
        t_max: d.t_max,
        beta_start: d.beta_start,
        beta_end: d.beta_end,
    });
    let report = train_diffusion(
        &mut denoiser,
        &bank,
        Some(&pseudo_z),
        &schedule,
        &DiffusionTrainConfig {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            lr_final: d.lr_final,
            weight_decay: 0.0,
            augment: d.augment,
            augment_ratio: d.augment_ratio,
            check_every: d.check_every,
            gate_steps: d.gate_steps,
            gate_threshold: d.gate_threshold,
            seed: cfg.subseed("pipeline/diffusion/train"),
        },
    )?;
    let generator = WeightGenerator::new(denoiser, schedule, bank.stats.clone());
    generator.save(out, &corpus_hash)?;
    write_json(&out.join("train_report.json"), &report)
}

fn run_eval(cfg: &ExperimentConfig, root: &Path, out: &Path) -> Result<(), PipelineError> {
    let corpus = load_corpus(root)?;
    let engine = build_engine(cfg, root)?;
    let irrelevant: Vec<&[u32]> =
        corpus.split(Split::Irrelevant).map(|f| f.query.as_slice()).collect();
    let pre = capture_pre_edit(&engine.base, &irrelevant, cfg.eval.max_new)?;
    write_json(&out.join("pre_edit.json"), &pre)?;
    let report = evaluate("default", &engine, &corpus, &pre)?;
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("report.txt"), render_text(&report))?;
    fs::write(out.join("report.csv"), to_csv(std::slice::from_ref(&report)))?;
    write_json(&out.join("engine.json"), &engine.manifest())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip_and_order_prerequisites() {
        for stage in Stage::ALL {
            assert_eq!(Stage::parse(stage.name()), Some(stage));
        }
        assert_eq!(Stage::parse("sweep"), None);
        // Prerequisites are listed in pipeline order, so the first missing
        // one is the earliest gap.
        for stage in Stage::ALL {
            let deps = stage.prerequisites();
            let positions: Vec<usize> = deps
                .iter()
                .map(|d| Stage::ALL.iter().position(|s| s == d).unwrap())
                .collect();
            let mut sorted = positions.clone();
            sorted.sort();
            assert_eq!(positions, sorted, "{} deps out of order", stage.name());
        }
        assert!(Stage::Eval.prerequisites().contains(&Stage::Collect));
    }

    #[test]
    fn dir_hash_sees_content_and_names() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), b"alpha").unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/b.bin"), b"beta").unwrap();
        let h1 = hash_dir(dir.path()).unwrap();
        assert_eq!(h1, hash_dir(dir.path()).unwrap());

        fs::write(dir.path().join("sub/b.bin"), b"BETA").unwrap();
        let h2 = hash_dir(dir.path()).unwrap();
        assert_ne!(h1, h2);

        fs::rename(dir.path().join("a.txt"), dir.path().join("c.txt")).unwrap();
        let h3 = hash_dir(dir.path()).unwrap();
        assert_ne!(h2, h3);
    }

    #[test]
    fn manifest_reads_back_what_it_wrote() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = Manifest::default();
        manifest.stages.insert(
            "corpus".into(),
            StageEntry {
                config: "c0".into(),
                inputs: BTreeMap::new(),
                output: "o0".into(),
            },
        );
        manifest.save(dir.path()).unwrap();
        let back = Manifest::load(dir.path()).unwrap();
        assert_eq!(back.stages, manifest.stages);
        assert!(Manifest::load(tempfile::tempdir().unwrap().path())
            .unwrap()
            .stages
            .is_empty());
    }

    #[test]
    fn stages_refuse_to_run_before_their_inputs_exist() {
        let cfg = ExperimentConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let err = run_stage(&cfg, dir.path(), Stage::Eval).unwrap_err();
        assert!(
            matches!(err, PipelineError::MissingPrerequisite { stage: "corpus" }),
            "got {err}"
        );
        let err = run_stage(&cfg, dir.path(), Stage::Lm).unwrap_err();
        assert!(matches!(err, PipelineError::MissingPrerequisite { stage: "corpus" }));
    }

    #[test]
    fn corpus_stage_is_idempotent_and_notices_corruption() {
        let mut cfg = ExperimentConfig::default();
        cfg.corpus = crate::config::CorpusParams {
            edit: 4,
            pseudo: 3,
            irrelevant: 3,
            paraphrases: 2,
        };
        cfg.collect.sweep_facts = 4;
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run_stage(&cfg, dir.path(), Stage::Corpus).unwrap(), StageOutcome::Ran);
        assert_eq!(
            run_stage(&cfg, dir.path(), Stage::Corpus).unwrap(),
            StageOutcome::UpToDate
        );

        // A config change reruns the stage.
        cfg.corpus.edit = 5;
        assert_eq!(run_stage(&cfg, dir.path(), Stage::Corpus).unwrap(), StageOutcome::Ran);

        // Corrupting the artifact turns the no-op into an explicit error.
        let path = dir.path().join("corpus").join("corpus.jsonl");
        fs::write(&path, b"tampered\n").unwrap();
        let err = run_stage(&cfg, dir.path(), Stage::Corpus).unwrap_err();
        assert!(matches!(err, PipelineError::HashMismatch { .. }), "got {err}");
        // And downstream stages refuse the corrupted input the same way.
        let err = run_stage(&cfg, dir.path(), Stage::Lm).unwrap_err();
        assert!(matches!(err, PipelineError::HashMismatch { .. }), "got {err}");
    }

    #[test]
    fn reproduce_requires_a_clean_directory() {
        let cfg = ExperimentConfig::default();
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("leftover.txt"), b"x").unwrap();
        let err = reproduce(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, PipelineError::DirtyArtifacts(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn exit_codes_split_config_from_stage_failures() {
        let bad = PipelineError::Config(ConfigError::Invalid("x".into()));
        assert_eq!(bad.exit_code(), 2);
        let missing = PipelineError::MissingPrerequisite { stage: "collect" };
        assert_eq!(missing.exit_code(), 3);
    }
}
