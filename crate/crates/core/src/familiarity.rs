//! Familiarity network: an overfit classifier whose confidence routes edits.
//!
//! Edit queries get random category labels (the labels mean nothing; they
//! are fingerprints). A small MLP is trained to saturation on those labels,
//! so queries it has memorized produce a spiky, low-entropy class
//! distribution while everything else produces a flat one. Routing then
//! reduces to a single entropy threshold: below it, the query is treated as
//! edited knowledge; at or above it, the dynamic neuron stays zero.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::io::{digest_tensors, load_tensor_map, save_tensors};
use crate::numerics::{CeReduction, Graph, Optimizer, Rng, Tensor, TensorIoError, Var};

#[derive(Debug, Error)]
pub enum FnError {
    #[error("class count must be at least 2, got {0}")]
    DegenerateK(usize),
    #[error("probabilities must be a simplex point: {0}")]
    InvalidSimplex(String),
    #[error("entropy threshold must be positive, got {0}")]
    BadThreshold(f32),
    #[error("threshold grid must be nonempty")]
    EmptyGrid,
    #[error("training needs one label per embedding row ({rows} rows, {labels} labels)")]
    LabelMismatch { rows: usize, labels: usize },
    #[error("failed to overfit: accuracy {accuracy:.4} after {epochs} epochs (target {target})")]
    Underfit { accuracy: f32, epochs: usize, target: f32 },
    #[error(
        "classifier is accurate but not confident: median train entropy {median:.4} after \
         {epochs} epochs (target {target})"
    )]
    StillDiffuse { median: f32, epochs: usize, target: f32 },
    #[error("checkpoint problem: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    TensorIo(#[from] TensorIoError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FnConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub k: usize,
}

impl FnConfig {
    pub fn default_with_input(d_in: usize) -> Self {
        FnConfig { d_in, hidden: 128, n_blocks: 5, k: 10 }
    }

    fn validate(&self) -> Result<(), FnError> {
        if self.k < 2 {
            return Err(FnError::DegenerateK(self.k));
        }
        assert!(self.n_blocks >= 1 && self.hidden >= 1 && self.d_in >= 1);
        Ok(())
    }
}

/// Outcome of thresholding one query's familiarity entropy.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub entropy: f32,
    pub threshold: f32,
    pub is_edited: bool,
}

pub struct FnVars {
    layers: Vec<(Var, Var)>,
    head_w: Var,
    head_b: Var,
    ordered: Vec<Var>,
}

impl FnVars {
    pub fn ordered(&self) -> &[Var] {
        &self.ordered
    }
}

#[derive(Clone)]
pub struct FamiliarityNet {
    pub cfg: FnConfig,
    layers: Vec<(Tensor, Tensor)>,
    head_w: Tensor,
    head_b: Tensor,
}

impl FamiliarityNet {
    pub fn new(cfg: FnConfig, seed: u64) -> Result<Self, FnError> {
        cfg.validate()?;
        let mut rng = Rng::derived(seed, "familiarity/init");
        let mut layers = Vec::with_capacity(cfg.n_blocks);
        let mut d_prev = cfg.d_in;
        for _ in 0..cfg.n_blocks {
            let std = libm::sqrtf(2.0 / d_prev as f32);
            layers.push((
                rng.normal_tensor(vec![d_prev, cfg.hidden], std),
                Tensor::zeros(vec![cfg.hidden]),
            ));
            d_prev = cfg.hidden;
        }
        let head_w = rng.normal_tensor(vec![d_prev, cfg.k], libm::sqrtf(2.0 / d_prev as f32));
        let head_b = Tensor::zeros(vec![cfg.k]);
        Ok(FamiliarityNet { cfg, layers, head_w, head_b })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.w"), w));
            out.push((format!("layer{i}.b"), b));
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Mutable views of every parameter, in [`FnVars::ordered`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (w, b) in &mut self.layers {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn params_into_graph(&self, g: &mut Graph, trainable: bool) -> FnVars {
        let mut lift = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.input(t.clone()) };
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut ordered = Vec::new();
        for (w, b) in &self.layers {
            let wv = lift(w);
            let bv = lift(b);
            layers.push((wv, bv));
            ordered.extend([wv, bv]);
        }
        let head_w = lift(&self.head_w);
        let head_b = lift(&self.head_b);
        ordered.extend([head_w, head_b]);
        FnVars { layers, head_w, head_b, ordered }
    }

    /// Class logits for `[B, d_in]` embeddings.
    pub fn build_logits(&self, g: &mut Graph, vars: &FnVars, z: Var) -> Var {
        let mut x = z;
        for (w, b) in &vars.layers {
            let lin = g.matmul(x, *w);
            let lin = g.add(lin, *b);
            x = g.gelu(lin);
        }
        let out = g.matmul(x, vars.head_w);
        g.add(out, vars.head_b)
    }

    /// Class distribution rows (softmax) for `[B, d_in]` embeddings.
    pub fn classify_batch(&self, z: &Tensor) -> Tensor {
        assert_eq!(z.shape().len(), 2, "classify expects [rows, d_in]");
        let mut g = Graph::new();
        let vars = self.params_into_graph(&mut g, false);
        let zv = g.input(z.clone());
        let logits = self.build_logits(&mut g, &vars, zv);
        let probs = g.softmax_last(logits);
        g.value(probs).clone()
    }

    /// Class distribution for one `[d_in]` embedding; sums to 1.
    pub fn classify(&self, z: &Tensor) -> Vec<f32> {
        let row = z.clone().reshaped(vec![1, self.cfg.d_in]);
        self.classify_batch(&row).data().to_vec()
    }

    // ---- persistence ----


    /// Hex digest over the full parameter set. Two checkpoints with the same
    /// hash hold bitwise-identical weights.
    pub fn content_hash(&self) -> String {
        let named = self.named_params();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        digest_tensors(&refs)
    }

    pub fn save(&self, dir: &Path, corpus_hash: &str) -> Result<(), FnError> {
        fs::create_dir_all(dir)?;
        let named: Vec<(String, Tensor)> =
            self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_tensors(&dir.join("familiarity.tensors"), &refs)?;
        let meta = FnMeta { config: self.cfg, corpus_hash: corpus_hash.to_string() };
        fs::write(dir.join("fn_config.json"), serde_json::to_string_pretty(&meta).unwrap())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, String), FnError> {
        let meta: FnMeta = serde_json::from_str(&fs::read_to_string(dir.join("fn_config.json"))?)
            .map_err(|e| FnError::Checkpoint(format!("bad sidecar: {e}")))?;
        let mut map = load_tensor_map(&dir.join("familiarity.tensors"))?;
        let mut net = FamiliarityNet::new(meta.config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = net
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        for ((name, shape), slot) in expected.iter().zip(net.params_mut()) {
            let tensor = map
                .remove(name)
                .ok_or_else(|| FnError::Checkpoint(format!("missing tensor {name}")))?;
            if tensor.shape() != &shape[..] {
                return Err(FnError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            *slot = tensor;
        }
        if let Some(extra) = map.keys().next() {
            return Err(FnError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok((net, meta.corpus_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct FnMeta {
    config: FnConfig,
    corpus_hash: String,
}

// ---- labels ----

/// Uniform random class labels for the edit facts, in the order given.
pub fn assign_labels(
    fact_ids: &[String],
    k: usize,
    seed: u64,
) -> Result<BTreeMap<String, u32>, FnError> {
    if k < 2 {
        return Err(FnError::DegenerateK(k));
    }
    let mut rng = Rng::derived(seed, "familiarity/labels");
    Ok(fact_ids
        .iter()
        .map(|id| (id.clone(), rng.below(k) as u32))
        .collect())
}

// ---- entropy and routing ----

/// Shannon entropy in nats of a K-point distribution, with `0 log 0 = 0`.
pub fn entropy(probs: &[f32]) -> Result<f32, FnError> {
    let mut sum = 0.0f64;
    for &p in probs {
        if p < 0.0 || !p.is_finite() {
            return Err(FnError::InvalidSimplex(format!("component {p}")));
        }
        sum += p as f64;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(FnError::InvalidSimplex(format!("sums to {sum}")));
    }
    let mut h = 0.0f64;
    for &p in probs {
        if p > 0.0 {
            h -= p as f64 * (p as f64).ln();
        }
    }
    Ok(h as f32)
}

/// Thresholds the familiarity entropy of one embedding. The boundary case
/// `H = threshold` routes to irrelevant.
pub fn route(net: &FamiliarityNet, z: &Tensor, threshold: f32) -> Result<RoutingDecision, FnError> {
    if threshold <= 0.0 || !threshold.is_finite() {
        return Err(FnError::BadThreshold(threshold));
    }
    let probs = net.classify(z);
    let h = entropy(&probs)?;
    Ok(RoutingDecision { entropy: h, threshold, is_edited: h < threshold })
}

// ---- training ----

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FnTrainConfig {
    pub max_epochs: usize,
    pub lr: f32,
    pub target_accuracy: f32,
    /// Training also runs until the median entropy over the training queries
    /// drops this low. Accuracy alone stops too early: the argmax can be
    /// right while the distribution is still diffuse, and a diffuse
    /// fingerprint routes every query away from editing.
    pub target_entropy: f32,
}

impl Default for FnTrainConfig {
    fn default() -> Self {
        FnTrainConfig { max_epochs: 2000, lr: 1e-3, target_accuracy: 0.99, target_entropy: 0.05 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FnTrainReport {
    pub epochs_run: usize,
    pub final_accuracy: f32,
    pub final_median_entropy: f32,
    pub epoch_losses: Vec<f32>,
}

/// Training accuracy and median entropy over the training rows.
fn train_metrics(net: &FamiliarityNet, z: &Tensor, labels: &[u32]) -> (f32, f32) {
    let probs = net.classify_batch(z);
    let argmax = probs.argmax_last();
    let hits = argmax
        .iter()
        .zip(labels)
        .filter(|&(&a, &l)| a as u32 == l)
        .count();
    let k = net.cfg.k;
    let mut entropies: Vec<f32> = (0..labels.len())
        .map(|r| entropy(&probs.data()[r * k..(r + 1) * k]).expect("softmax output is a simplex"))
        .collect();
    entropies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (hits as f32 / labels.len() as f32, entropies[labels.len() / 2])
}

/// Overfits the net on `[N, d_in]` embeddings with their assigned labels;
/// full-batch cross-entropy until target accuracy or the epoch cap.
pub fn train_familiarity(
    net: &mut FamiliarityNet,
    embeddings: &Tensor,
    labels: &[u32],
    cfg: &FnTrainConfig,
) -> Result<FnTrainReport, FnError> {
    assert_eq!(embeddings.shape().len(), 2, "embeddings must be [rows, d_in]");
    let rows = embeddings.shape()[0];
    if rows != labels.len() || rows == 0 {
        return Err(FnError::LabelMismatch { rows, labels: labels.len() });
    }
    for &l in labels {
        assert!((l as usize) < net.cfg.k, "label {l} outside {} classes", net.cfg.k);
    }
    let mask = vec![1.0f32; rows];
    let mut opt = Optimizer::adamw_default(cfg.lr, 0.0);
    let mut epoch_losses = Vec::new();
    let mut accuracy = 0.0;
    let mut median = f32::INFINITY;
    for epoch in 0..cfg.max_epochs {
        let mut g = Graph::new();
        let vars = net.params_into_graph(&mut g, true);
        let z = g.input(embeddings.clone());
        let logits = net.build_logits(&mut g, &vars, z);
        let loss = g.cross_entropy(logits, labels, &mask, CeReduction::Mean);
        g.backward(loss).expect("loss is scalar");
        epoch_losses.push(g.value(loss).item());
        let grads: Vec<Option<Tensor>> =
            vars.ordered().iter().map(|&v| g.grad(v).cloned()).collect();
        drop(g);
        let mut params = net.params_mut();
        opt.step_refs(&mut params, &grads).expect("gradient shapes track parameters");

        (accuracy, median) = train_metrics(net, embeddings, labels);
        if accuracy >= cfg.target_accuracy && median <= cfg.target_entropy {
            return Ok(FnTrainReport {
                epochs_run: epoch + 1,
                final_accuracy: accuracy,
                final_median_entropy: median,
                epoch_losses,
            });
        }
    }
    if accuracy < cfg.target_accuracy {
        return Err(FnError::Underfit {
            accuracy,
            epochs: cfg.max_epochs,
            target: cfg.target_accuracy,
        });
    }
    Err(FnError::StillDiffuse {
        median,
        epochs: cfg.max_epochs,
        target: cfg.target_entropy,
    })
}

// ---- threshold sweep ----

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f32,
    /// Fraction of paraphrase queries routed as edited knowledge.
    pub generality: f32,
    /// Fraction of irrelevant queries routed away from editing.
    pub locality: f32,
}

/// Routing-level quality per candidate threshold. `edited_probe` holds
/// embeddings that should route edited (paraphrases of edited facts);
/// `irrelevant_probe` holds embeddings that should not.
pub fn threshold_sweep(
    net: &FamiliarityNet,
    edited_probe: &Tensor,
    irrelevant_probe: &Tensor,
    grid: &[f32],
) -> Result<Vec<SweepRow>, FnError> {
    if grid.is_empty() {
        return Err(FnError::EmptyGrid);
    }
    let entropies = |z: &Tensor| -> Result<Vec<f32>, FnError> {
        let probs = net.classify_batch(z);
        let k = net.cfg.k;
        (0..z.shape()[0])
            .map(|r| entropy(&probs.data()[r * k..(r + 1) * k]))
            .collect()
    };
    let edited_h = entropies(edited_probe)?;
    let irrelevant_h = entropies(irrelevant_probe)?;
    Ok(grid
        .iter()
        .map(|&eps| {
            let gen_hits = edited_h.iter().filter(|&&h| h < eps).count();
            let loc_hits = irrelevant_h.iter().filter(|&&h| h >= eps).count();
            SweepRow {
                eps,
                generality: gen_hits as f32 / edited_h.len().max(1) as f32,
                locality: loc_hits as f32 / irrelevant_h.len().max(1) as f32,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = Rng::derived(seed, "familiarity/test/rows");
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row: Vec<f32> = (0..d).map(|_| rng.normal()).collect();
            let norm = libm::sqrtf(row.iter().map(|v| v * v).sum::<f32>().max(1e-12));
            data.extend(row.iter().map(|v| v / norm));
        }
        Tensor::new(vec![n, d], data)
    }

    fn overfit_net(z: &Tensor, labels: &[u32]) -> (FamiliarityNet, FnTrainReport) {
        let mut net =
            FamiliarityNet::new(FnConfig::default_with_input(z.shape()[1]), 2).unwrap();
        let report =
            train_familiarity(&mut net, z, labels, &FnTrainConfig::default()).unwrap();
        (net, report)
    }

    #[test]
    fn labels_are_deterministic_balanced_and_in_range() {
        let ids: Vec<String> = (0..64).map(|i| format!("e{i:04}")).collect();
        let a = assign_labels(&ids, 10, 5).unwrap();
        let b = assign_labels(&ids, 10, 5).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 10];
        for (_, &l) in &a {
            assert!(l < 10);
            counts[l as usize] += 1;
        }
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert!(max - min <= 15, "counts {counts:?}");
        assert_ne!(a, assign_labels(&ids, 10, 6).unwrap());
    }

    #[test]
    fn single_class_is_rejected() {
        let ids = vec!["e0000".to_string()];
        assert!(matches!(assign_labels(&ids, 1, 5), Err(FnError::DegenerateK(1))));
        assert!(matches!(
            FamiliarityNet::new(FnConfig { d_in: 8, hidden: 16, n_blocks: 2, k: 1 }, 0),
            Err(FnError::DegenerateK(1))
        ));
    }

    #[test]
    fn entropy_known_values() {
        let uniform = vec![0.1f32; 10];
        assert!((entropy(&uniform).unwrap() - 2.302585).abs() < 1e-5);
        let mut onehot = vec![0.0f32; 10];
        onehot[3] = 1.0;
        assert_eq!(entropy(&onehot).unwrap(), 0.0);
        let mut half = vec![0.0f32; 10];
        half[0] = 0.5;
        half[1] = 0.5;
        assert!((entropy(&half).unwrap() - 0.693147).abs() < 1e-5);
    }

    #[test]
    fn invalid_simplex_is_rejected() {
        assert!(matches!(entropy(&[0.5, 0.4]), Err(FnError::InvalidSimplex(_))));
        assert!(matches!(entropy(&[1.5, -0.5]), Err(FnError::InvalidSimplex(_))));
    }

    #[test]
    fn classify_output_sums_to_one() {
        let net = FamiliarityNet::new(FnConfig::default_with_input(16), 3).unwrap();
        let z = unit_rows(1, 16, 4).reshaped(vec![16]);
        let probs = net.classify(&z);
        let sum: f32 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        let h = entropy(&probs).unwrap();
        assert!((0.0..=libm::logf(10.0) + 1e-6).contains(&h));
    }

    #[test]
    fn routing_thresholds_strictly() {
        let net = FamiliarityNet::new(FnConfig::default_with_input(16), 3).unwrap();
        let z = unit_rows(1, 16, 7).reshaped(vec![16]);
        let h = entropy(&net.classify(&z)).unwrap();
        // Boundary: a threshold exactly at the astonishment level routes away.
        let exact = route(&net, &z, h).unwrap();
        assert!(!exact.is_edited);
        let above = route(&net, &z, h + 1e-4).unwrap();
        assert!(above.is_edited);
        assert!(matches!(route(&net, &z, 0.0), Err(FnError::BadThreshold(_))));
    }

    #[test]
    fn overfits_and_fingerprints_training_points() {
        let z = unit_rows(64, 32, 11);
        let ids: Vec<String> = (0..64).map(|i| format!("e{i:04}")).collect();
        let label_map = assign_labels(&ids, 10, 13).unwrap();
        let labels: Vec<u32> = ids.iter().map(|id| label_map[id]).collect();
        let (net, report) = overfit_net(&z, &labels);
        assert!(report.final_accuracy >= 0.99);

        // Memorized points answer with near-one-hot confidence.
        let probs = net.classify_batch(&z);
        let mut entropies: Vec<f32> = (0..64)
            .map(|r| entropy(&probs.data()[r * 10..(r + 1) * 10]).unwrap())
            .collect();
        entropies.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = entropies[32];
        assert!(median < 0.1, "median train entropy {median}");

        // Epoch losses settle rather than oscillate.
        let pairs = report.epoch_losses.len().saturating_sub(1);
        let violations = report
            .epoch_losses
            .windows(2)
            .filter(|w| w[1] > w[0])
            .count();
        assert!(
            violations as f32 <= 0.05 * pairs as f32,
            "{violations} increases over {pairs} epoch pairs"
        );
    }

    #[test]
    fn sweep_endpoints_and_monotonicity() {
        let z = unit_rows(32, 32, 21);
        let ids: Vec<String> = (0..32).map(|i| format!("e{i:04}")).collect();
        let label_map = assign_labels(&ids, 10, 22).unwrap();
        let labels: Vec<u32> = ids.iter().map(|id| label_map[id]).collect();
        let (net, _) = overfit_net(&z, &labels);
        let strangers = unit_rows(32, 32, 99);

        let grid = [0.0, 0.05, 0.1, 0.5, 1.0, 2.0, libm::logf(10.0) + 1.0];
        let rows = threshold_sweep(&net, &z, &strangers, &grid).unwrap();
        assert_eq!(rows[0].generality, 0.0);
        assert_eq!(rows[0].locality, 1.0);
        let last = rows.last().unwrap();
        assert_eq!(last.generality, 1.0);
        assert_eq!(last.locality, 0.0);
        for w in rows.windows(2) {
            assert!(w[1].generality >= w[0].generality, "generality dipped");
            assert!(w[1].locality <= w[0].locality, "locality rose");
        }
        assert!(matches!(
            threshold_sweep(&net, &z, &strangers, &[]),
            Err(FnError::EmptyGrid)
        ));
    }

    #[test]
    fn underfit_is_reported_explicitly() {
        let z = unit_rows(16, 8, 31);
        let labels: Vec<u32> = (0..16).map(|i| (i % 10) as u32).collect();
        let mut net = FamiliarityNet::new(FnConfig::default_with_input(8), 5).unwrap();
        let cfg = FnTrainConfig { max_epochs: 1, ..FnTrainConfig::default() };
        assert!(matches!(
            train_familiarity(&mut net, &z, &labels, &cfg),
            Err(FnError::Underfit { epochs: 1, .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_reproduces_distributions() {
        let dir = tempfile::tempdir().unwrap();
        let net = FamiliarityNet::new(FnConfig::default_with_input(24), 41).unwrap();
        net.save(dir.path(), "hash-probe").unwrap();
        let (back, hash) = FamiliarityNet::load(dir.path()).unwrap();
        assert_eq!(hash, "hash-probe");
        let z = unit_rows(3, 24, 42);
        assert!(net.classify_batch(&z).bits_equal(&back.classify_batch(&z)));
    }
}
