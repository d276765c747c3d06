//! Scoring for the editing pipeline: Reliability on the edited facts,
//! Generality on their paraphrases, Locality on irrelevant queries, each
//! under two settings. AG scores exact greedy continuations; TF scores
//! next-token argmax under gold prefixes. The headline Score is the harmonic
//! mean of all six, so one collapsed metric drags the whole number down.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, FactRecord, Split};
use crate::edit_engine::{EditEngine, EngineError};
use crate::toy_lm::{LmError, ToyLm};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} pool is empty")]
    EmptySet(&'static str),
    #[error("pre-edit answers do not fit this engine: {0}")]
    PreEditMismatch(String),
    #[error("no pre-edit answer captured for query {0:?}")]
    MissingPreEdit(Vec<u32>),
    #[error("metric value {0} is outside [0, 100]")]
    MetricOutOfRange(f32),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// How a trial is scored: greedy continuation exact-match, or argmax
/// accuracy under the gold prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Ag,
    Tf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Reliability,
    Generality,
    Locality,
}

/// One scored trial. `value` is in [0, 1]: binary for AG and Locality,
/// mean token accuracy for TF Reliability and Generality. Aggregates are
/// means of these values, so the verdict list always reconciles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryVerdict {
    pub fact_id: String,
    pub split: Split,
    pub metric: MetricKind,
    pub setting: Setting,
    pub pass: bool,
    pub value: f32,
}

/// A metric aggregate plus the trials behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    /// Percentage in [0, 100].
    pub percent: f32,
    pub verdicts: Vec<QueryVerdict>,
}

impl Metric {
    fn from_verdicts(verdicts: Vec<QueryVerdict>) -> Self {
        let mean =
            verdicts.iter().map(|v| v.value as f64).sum::<f64>() / verdicts.len() as f64;
        Metric { percent: (100.0 * mean) as f32, verdicts }
    }
}

/// Base-model greedy responses captured before any editing, keyed by query
/// tokens. Locality is measured against these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreEditAnswers {
    pub base_hash: String,
    pub max_new: usize,
    /// JSON stores this as a list of (query, response) pairs; token vectors
    /// cannot be object keys.
    #[serde(with = "answer_pairs")]
    pub answers: BTreeMap<Vec<u32>, Vec<u32>>,
}

mod answer_pairs {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<Vec<u32>, Vec<u32>>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let pairs: Vec<(&Vec<u32>, &Vec<u32>)> = map.iter().collect();
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<Vec<u32>, Vec<u32>>, D::Error> {
        let pairs = Vec::<(Vec<u32>, Vec<u32>)>::deserialize(d)?;
        Ok(pairs.into_iter().collect())
    }
}

/// Runs the unedited base model over the queries and stores its greedy
/// responses. Under a gold prefix equal to its own greedy output, the base
/// model's argmax sequence is that output again, so one capture serves both
/// settings.
pub fn capture_pre_edit(
    base: &ToyLm,
    queries: &[&[u32]],
    max_new: usize,
) -> Result<PreEditAnswers, EvalError> {
    let mut answers = BTreeMap::new();
    for &q in queries {
        let greedy = base.generate_greedy(None, q, max_new)?;
        answers.insert(q.to_vec(), greedy);
    }
    Ok(PreEditAnswers { base_hash: base.content_hash(), max_new, answers })
}

/// AG match rule: the first `|target|` generated tokens equal the target.
/// Generation that stopped early (EOS before the answer was complete) fails;
/// extra tokens after the answer are ignored.
pub fn ag_match(response: &[u32], target: &[u32]) -> bool {
    response.len() >= target.len() && response[..target.len()] == *target
}

fn scored_trial(
    engine: &EditEngine,
    query: &[u32],
    target: &[u32],
    setting: Setting,
) -> Result<f32, EvalError> {
    match setting {
        Setting::Ag => {
            let trace = engine.respond(query)?;
            Ok(if ag_match(&trace.response, target) { 1.0 } else { 0.0 })
        }
        Setting::Tf => {
            let (_, _, _, weights) = engine.weights_for(query)?;
            let acc = engine.base.teacher_forcing_accuracy(
                engine.neuron_arg(&weights),
                query,
                target,
            )?;
            Ok(acc)
        }
    }
}

/// Accuracy on the original phrasings of the edited facts.
pub fn reliability(
    engine: &EditEngine,
    facts: &[&FactRecord],
    setting: Setting,
) -> Result<Metric, EvalError> {
    if facts.is_empty() {
        return Err(EvalError::EmptySet("reliability"));
    }
    let mut verdicts = Vec::with_capacity(facts.len());
    for fact in facts {
        let value = scored_trial(engine, &fact.query, &fact.target, setting)?;
        verdicts.push(QueryVerdict {
            fact_id: fact.fact_id.clone(),
            split: fact.split,
            metric: MetricKind::Reliability,
            setting,
            pass: value == 1.0,
            value,
        });
    }
    Ok(Metric::from_verdicts(verdicts))
}

/// Accuracy on paraphrases of the edited facts; every paraphrase is one
/// trial.
pub fn generality(
    engine: &EditEngine,
    facts: &[&FactRecord],
    setting: Setting,
) -> Result<Metric, EvalError> {
    let mut verdicts = Vec::new();
    for fact in facts {
        for para in &fact.paraphrases {
            let value = scored_trial(engine, para, &fact.target, setting)?;
            verdicts.push(QueryVerdict {
                fact_id: fact.fact_id.clone(),
                split: fact.split,
                metric: MetricKind::Generality,
                setting,
                pass: value == 1.0,
                value,
            });
        }
    }
    if verdicts.is_empty() {
        return Err(EvalError::EmptySet("generality"));
    }
    Ok(Metric::from_verdicts(verdicts))
}

/// Fraction of irrelevant queries whose behavior the editing left untouched.
/// AG compares post-edit greedy responses against the captured pre-edit
/// ones token for token; TF checks that the argmax sequence under the
/// pre-edit response as gold prefix is still that response.
pub fn locality(
    engine: &EditEngine,
    facts: &[&FactRecord],
    pre: &PreEditAnswers,
    setting: Setting,
) -> Result<Metric, EvalError> {
    if facts.is_empty() {
        return Err(EvalError::EmptySet("locality"));
    }
    let base_hash = engine.base.content_hash();
    if pre.base_hash != base_hash {
        return Err(EvalError::PreEditMismatch(format!(
            "captured against base {}, engine runs base {base_hash}",
            pre.base_hash
        )));
    }
    if pre.max_new != engine.cfg.max_new {
        return Err(EvalError::PreEditMismatch(format!(
            "captured with max_new {}, engine generates {}",
            pre.max_new, engine.cfg.max_new
        )));
    }
    let mut verdicts = Vec::with_capacity(facts.len());
    for fact in facts {
        let gold = pre
            .answers
            .get(&fact.query)
            .ok_or_else(|| EvalError::MissingPreEdit(fact.query.clone()))?;
        let unchanged = match setting {
            Setting::Ag => {
                let trace = engine.respond(&fact.query)?;
                trace.response == *gold
            }
            Setting::Tf => {
                if gold.is_empty() {
                    // Nothing was generated before the edit, so there is no
                    // prefix to disturb.
                    true
                } else {
                    let (_, _, _, weights) = engine.weights_for(&fact.query)?;
                    let argmax = engine.base.teacher_forcing_argmax(
                        engine.neuron_arg(&weights),
                        &fact.query,
                        gold,
                    )?;
                    argmax == *gold
                }
            }
        };
        verdicts.push(QueryVerdict {
            fact_id: fact.fact_id.clone(),
            split: fact.split,
            metric: MetricKind::Locality,
            setting,
            pass: unchanged,
            value: if unchanged { 1.0 } else { 0.0 },
        });
    }
    Ok(Metric::from_verdicts(verdicts))
}

/// Harmonic mean of six metric percentages; 0 whenever any component is 0.
pub fn score(values: &[f32; 6]) -> Result<f32, EvalError> {
    for &v in values {
        if !(0.0..=100.0).contains(&v) || !v.is_finite() {
            return Err(EvalError::MetricOutOfRange(v));
        }
    }
    if values.iter().any(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let denom: f64 = values.iter().map(|&v| 1.0 / v as f64).sum();
    Ok((6.0 / denom) as f32)
}

/// All six metrics of one engine configuration plus the per-trial verdicts
/// behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_id: String,
    pub reliability_ag: f32,
    pub reliability_tf: f32,
    pub generality_ag: f32,
    pub generality_tf: f32,
    pub locality_ag: f32,
    pub locality_tf: f32,
    pub score: f32,
    pub per_query: Vec<QueryVerdict>,
}

impl MetricsReport {
    pub fn six(&self) -> [f32; 6] {
        [
            self.reliability_ag,
            self.reliability_tf,
            self.generality_ag,
            self.generality_tf,
            self.locality_ag,
            self.locality_tf,
        ]
    }
}

/// Scores one engine over the corpus: Reliability and Generality on the
/// edit split, Locality on the irrelevant split against `pre`.
pub fn evaluate(
    config_id: &str,
    engine: &EditEngine,
    corpus: &Corpus,
    pre: &PreEditAnswers,
) -> Result<MetricsReport, EvalError> {
    let edit: Vec<&FactRecord> = corpus.split(Split::Edit).collect();
    let irrelevant: Vec<&FactRecord> = corpus.split(Split::Irrelevant).collect();

    let rel_ag = reliability(engine, &edit, Setting::Ag)?;
    let rel_tf = reliability(engine, &edit, Setting::Tf)?;
    let gen_ag = generality(engine, &edit, Setting::Ag)?;
    let gen_tf = generality(engine, &edit, Setting::Tf)?;
    let loc_ag = locality(engine, &irrelevant, pre, Setting::Ag)?;
    let loc_tf = locality(engine, &irrelevant, pre, Setting::Tf)?;

    let six = [
        rel_ag.percent,
        rel_tf.percent,
        gen_ag.percent,
        gen_tf.percent,
        loc_ag.percent,
        loc_tf.percent,
    ];
    let score = score(&six)?;
    let mut per_query = Vec::new();
    for m in [rel_ag, rel_tf, gen_ag, gen_tf, loc_ag, loc_tf] {
        per_query.extend(m.verdicts);
    }
    Ok(MetricsReport {
        config_id: config_id.to_string(),
        reliability_ag: six[0],
        reliability_tf: six[1],
        generality_ag: six[2],
        generality_tf: six[3],
        locality_ag: six[4],
        locality_tf: six[5],
        score,
        per_query,
    })
}

/// Differences of one configuration against a baseline, in absolute points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDelta {
    pub config_id: String,
    pub baseline_id: String,
    pub reliability_ag: f32,
    pub reliability_tf: f32,
    pub generality_ag: f32,
    pub generality_tf: f32,
    pub locality_ag: f32,
    pub locality_tf: f32,
    pub score: f32,
}

/// Reports side by side, each later configuration measured against the
/// first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub reports: Vec<MetricsReport>,
    pub deltas: Vec<MetricsDelta>,
}

pub fn ablation_report(reports: Vec<MetricsReport>) -> AblationReport {
    let deltas = reports
        .iter()
        .skip(1)
        .map(|r| MetricsDelta {
            config_id: r.config_id.clone(),
            baseline_id: reports[0].config_id.clone(),
            reliability_ag: r.reliability_ag - reports[0].reliability_ag,
            reliability_tf: r.reliability_tf - reports[0].reliability_tf,
            generality_ag: r.generality_ag - reports[0].generality_ag,
            generality_tf: r.generality_tf - reports[0].generality_tf,
            locality_ag: r.locality_ag - reports[0].locality_ag,
            locality_tf: r.locality_tf - reports[0].locality_tf,
            score: r.score - reports[0].score,
        })
        .collect();
    AblationReport { reports, deltas }
}

/// Plain-text table of one report.
pub fn render_text(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("config: {}\n", report.config_id));
    out.push_str(&format!("{:<14}{:>10}{:>10}\n", "", "AG", "TF"));
    out.push_str(&format!(
        "{:<14}{:>10.2}{:>10.2}\n",
        "reliability", report.reliability_ag, report.reliability_tf
    ));
    out.push_str(&format!(
        "{:<14}{:>10.2}{:>10.2}\n",
        "generality", report.generality_ag, report.generality_tf
    ));
    out.push_str(&format!(
        "{:<14}{:>10.2}{:>10.2}\n",
        "locality", report.locality_ag, report.locality_tf
    ));
    out.push_str(&format!("{:<14}{:>10.2}\n", "score", report.score));
    out
}

/// CSV of the aggregate rows, one line per report, for external plotting.
pub fn to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(
        "config_id,reliability_ag,reliability_tf,generality_ag,generality_tf,locality_ag,locality_tf,score\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            r.config_id,
            r.reliability_ag,
            r.reliability_tf,
            r.generality_ag,
            r.generality_tf,
            r.locality_ag,
            r.locality_tf,
            r.score
        ));
    }
    out
}
