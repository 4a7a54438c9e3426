//! Predictors that map record variants to triage labels, paired scoring
//! over an index set, and agreement with reference labels.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::counterfactual::tokenize;
use crate::error::{AuditError, Result};
use crate::io;
use crate::lexicon::Language;
use crate::model::{
    Condition, CounterfactualPair, DecisionRecord, PairedLabels, Role, Sex, TriageLabel, TriageScale,
    VariantKey,
};
use crate::par::{self, Execution};
use crate::predictions::{PairOutcome, PredictionRow, PredictionSet};
use crate::service::{map_bounded, ChatMessage, GenServiceConfig, HttpChatService, TextService};

pub trait Predictor: Sync {
    fn scale(&self) -> TriageScale;

    fn predict(&self, key: &VariantKey, record: &DecisionRecord) -> Result<TriageLabel>;

    /// Bound on concurrent calls, for predictors backed by a remote service.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

/// Fixed lookup of labels, by variant or by record id.
#[derive(Debug, Clone)]
pub struct TablePredictor {
    scale: TriageScale,
    by_variant: HashMap<VariantKey, u8>,
    by_id: HashMap<String, u8>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum TableRow {
    Variant(PredictionRow),
    Record { id: String, label: u8 },
}

impl TablePredictor {
    pub fn new(scale: TriageScale) -> Self {
        TablePredictor {
            scale,
            by_variant: HashMap::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn insert_id(&mut self, id: impl Into<String>, label: u8) -> &mut Self {
        self.by_id.insert(id.into(), label);
        self
    }

    pub fn insert_variant(&mut self, key: VariantKey, label: u8) -> &mut Self {
        self.by_variant.insert(key, label);
        self
    }

    pub fn from_rows(scale: TriageScale, rows: &[PredictionRow]) -> Self {
        let mut t = TablePredictor::new(scale);
        for r in rows {
            t.insert_variant(
                VariantKey {
                    pair_id: r.pair_id.clone(),
                    condition: r.condition,
                    role: r.role,
                },
                r.label,
            );
        }
        t
    }

    /// JSONL of `{pair_id, condition, role, label}` or `{id, label}` lines.
    pub fn load(scale: TriageScale, path: &Path) -> Result<Self> {
        let mut t = TablePredictor::new(scale);
        for row in io::read_jsonl::<TableRow>(path)? {
            match row {
                TableRow::Variant(r) => {
                    t.insert_variant(
                        VariantKey {
                            pair_id: r.pair_id,
                            condition: r.condition,
                            role: r.role,
                        },
                        r.label,
                    );
                }
                TableRow::Record { id, label } => {
                    t.insert_id(id, label);
                }
            }
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.by_variant.len() + self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Predictor for TablePredictor {
    fn scale(&self) -> TriageScale {
        self.scale
    }

    fn predict(&self, key: &VariantKey, record: &DecisionRecord) -> Result<TriageLabel> {
        let raw = self
            .by_variant
            .get(key)
            .or_else(|| self.by_id.get(&record.id))
            .ok_or_else(|| AuditError::Prediction {
                id: key.pair_id.clone(),
                reason: format!("no table entry for {}/{:?} or record {}", key.condition, key.role, record.id),
            })?;
        self.scale.label(*raw as i64)
    }
}

/// Triage prompt sent to a remote model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriagePrompt {
    pub language: Language,
    pub head: String,
    pub start_marker: String,
    pub end_marker: String,
    pub tail: String,
}

impl TriagePrompt {
    pub fn french() -> Self {
        TriagePrompt {
            language: Language::Fr,
            head: "<s>[INST] Vous êtes un système qui aide à effectuer le triage des patients dans le service des urgences d'un hôpital. Compte tenu de l'anamnèse (qui contient diverses informations relatives au patient(e) et son contexte), affectez un score de triage de 2 à 5 (soit 2, soit 3, soit 4, soit 5) pour le patient, ou 2 est plus grave et 5 moins grave. Juste le numéro, pas d'explications avec.".into(),
            start_marker: "#### Début de l'anamnèse ####".into(),
            end_marker: "#### Fin de l'anamnèse ####".into(),
            tail: "Score de triage: [/INST]".into(),
        }
    }

    pub fn english() -> Self {
        TriagePrompt {
            language: Language::En,
            head: "<s>[INST] You are an assistant that helps perform emergency triage at an emergency department of a hospital. Taking into account each patient's clinical history (and other information related to the patient's condition and their context), assign a triage score from 1 to 4 (either 1, 2, 3 or 4) where 1 is the most critical and 4 is the least critical. Only the number, no explanations with".into(),
            start_marker: "#### Start of the patient's file ####".into(),
            end_marker: "#### End of the patient's file ####".into(),
            tail: "Triage score: [/INST]".into(),
        }
    }

    pub fn for_language(language: Language) -> Self {
        match language {
            Language::Fr => Self::french(),
            Language::En => Self::english(),
        }
    }

    pub fn render(&self, record: &DecisionRecord) -> String {
        format!(
            "{}\n\n{}\n\n{}\n\n{}\n\n{}",
            self.head,
            self.start_marker,
            clinical_history(record, self.language),
            self.end_marker,
            self.tail
        )
    }
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One `label : value` line per field. The sex line is left out when the
/// variant hides sex; text labels stay even when their value is empty.
pub fn clinical_history(record: &DecisionRecord, language: Language) -> String {
    let (sep, sex_l, age_l, cc_l, hpi_l, pmh_l) = match language {
        Language::Fr => (" : ", "Sexe", "Âge", "Motif", "Anamnèse", "Antécédents"),
        Language::En => (": ", "Sex", "Age", "Chief complaint", "Clinical note", "Past medical history"),
    };
    let mut lines = Vec::new();
    if let Some(sex) = record.sex {
        lines.push(format!("{sex_l}{sep}{}", sex.code()));
    }
    if let Some(age) = record.age {
        lines.push(format!("{age_l}{sep}{age}"));
    }
    for (k, v) in &record.tabular {
        lines.push(format!("{k}{sep}{}", value_text(v)));
    }
    lines.push(format!("{cc_l}{sep}{}", record.chief_complaint));
    lines.push(format!("{hpi_l}{sep}{}", record.hpi));
    lines.push(format!("{pmh_l}{sep}{}", record.pmh));
    lines.join("\n")
}

/// First integer in `reply` that lies within the scale.
pub fn parse_label_reply(reply: &str, scale: &TriageScale) -> Option<TriageLabel> {
    reply
        .split(|c: char| !c.is_ascii_digit())
        .filter(|t| !t.is_empty())
        .filter_map(|t| t.parse::<i64>().ok())
        .find(|v| scale.contains(*v))
        .map(|v| TriageLabel(v as u8))
}

pub struct RemotePredictor {
    scale: TriageScale,
    prompt: TriagePrompt,
    service: Box<dyn TextService + Send>,
}

impl RemotePredictor {
    pub fn new(scale: TriageScale, prompt: TriagePrompt, service: Box<dyn TextService + Send>) -> Self {
        RemotePredictor {
            scale,
            prompt,
            service,
        }
    }
}

impl Predictor for RemotePredictor {
    fn scale(&self) -> TriageScale {
        self.scale
    }

    fn predict(&self, key: &VariantKey, record: &DecisionRecord) -> Result<TriageLabel> {
        let reply = self
            .service
            .complete(&[ChatMessage::user(self.prompt.render(record))])?;
        parse_label_reply(&reply, &self.scale).ok_or_else(|| AuditError::Prediction {
            id: key.pair_id.clone(),
            reason: format!("no in-scale label in reply {reply:?}"),
        })
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(self.service.max_concurrency())
    }
}

// ---- hashed bag-of-words baseline ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BowConfig {
    pub dim_bits: u32,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for BowConfig {
    fn default() -> Self {
        BowConfig {
            dim_bits: 16,
            epochs: 8,
            learning_rate: 0.5,
            l2: 1e-6,
            seed: 0,
        }
    }
}

pub const BOW_KIND: &str = "bow_baseline";

/// Multinomial logistic regression on hashed record features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowModel {
    pub kind: String,
    pub scale: TriageScale,
    pub config: BowConfig,
    pub bias: Vec<f64>,
    /// Non-zero weight rows only, keyed by hashed feature index.
    pub weights: BTreeMap<u32, Vec<f64>>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn two_significant(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    let step = 10f64.powi(mag - 1);
    format!("{}", (x / step).round() * step)
}

/// Hashed, L2-normalized feature vector of a record.
pub fn featurize(record: &DecisionRecord, dim_bits: u32) -> Vec<(u32, f64)> {
    let mut names: Vec<String> = Vec::new();
    match record.sex {
        Some(Sex::Male) => names.push("sex=M".into()),
        Some(Sex::Female) => names.push("sex=F".into()),
        None => names.push("sex=?".into()),
    }
    if let Some(age) = record.age {
        names.push(format!("age={}", (age / 10.0).floor()));
    }
    for (k, v) in &record.tabular {
        match v {
            Value::Number(n) => names.push(format!("{k}~{}", two_significant(n.as_f64().unwrap_or(0.0)))),
            other => names.push(format!("{k}={}", value_text(other))),
        }
    }
    for (field, text) in ["cc", "hpi", "pmh"].iter().zip(record.texts()) {
        for t in tokenize(text) {
            names.push(format!("{field}:{t}"));
        }
    }
    let mask = (1u64 << dim_bits) - 1;
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for n in &names {
        *counts.entry((fnv1a(n.as_bytes()) & mask) as u32).or_insert(0.0) += 1.0;
    }
    let norm = counts.values().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    counts.into_iter().map(|(i, v)| (i, v / norm)).collect()
}

impl BowModel {
    /// Fit on labeled records; unlabeled or out-of-scale records are an error.
    pub fn train(records: &[DecisionRecord], scale: TriageScale, cfg: BowConfig) -> Result<Self> {
        if records.is_empty() {
            return Err(AuditError::Config("empty training set".into()));
        }
        if !(1..=24).contains(&cfg.dim_bits) || cfg.epochs == 0 || cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 {
            return Err(AuditError::Config("invalid baseline hyperparameters".into()));
        }
        let k = scale.levels();
        let mut data = Vec::with_capacity(records.len());
        for r in records {
            let y = r
                .triage_label(&scale)?
                .ok_or_else(|| AuditError::record(&r.id, "training record has no label"))?;
            data.push((featurize(r, cfg.dim_bits), scale.index_of(y)));
        }

        let dim = 1usize << cfg.dim_bits;
        let mut w = vec![0.0f64; dim * k];
        let mut bias = vec![0.0f64; k];
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut probs = vec![0.0; k];
        let mut step = 0usize;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let (x, y) = &data[i];
                scores(&w, &bias, x, k, &mut probs);
                softmax(&mut probs);
                let lr = cfg.learning_rate / (1.0 + 1e-4 * step as f64);
                step += 1;
                for c in 0..k {
                    let g = probs[c] - if c == *y { 1.0 } else { 0.0 };
                    bias[c] -= lr * g;
                    for (j, v) in x {
                        let wi = &mut w[*j as usize * k + c];
                        *wi -= lr * (g * v + cfg.l2 * *wi);
                    }
                }
            }
        }
        let mut weights = BTreeMap::new();
        for j in 0..dim {
            let row = &w[j * k..(j + 1) * k];
            if row.iter().any(|v| *v != 0.0) {
                weights.insert(j as u32, row.to_vec());
            }
        }
        Ok(BowModel {
            kind: BOW_KIND.to_string(),
            scale,
            config: cfg,
            bias,
            weights,
        })
    }

    pub fn predict_record(&self, record: &DecisionRecord) -> TriageLabel {
        let k = self.scale.levels();
        let mut s = self.bias.clone();
        for (j, v) in featurize(record, self.config.dim_bits) {
            if let Some(row) = self.weights.get(&j) {
                for c in 0..k {
                    s[c] += row[c] * v;
                }
            }
        }
        // Ties go to the lowest (most severe) label.
        let mut best = 0;
        for c in 1..k {
            if s[c] > s[best] {
                best = c;
            }
        }
        TriageLabel(self.scale.min + best as u8)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: BowModel = io::read_json(path)?;
        if m.kind != BOW_KIND || m.bias.len() != m.scale.levels() {
            return Err(AuditError::Config(format!("{} is not a baseline model artifact", path.display())));
        }
        Ok(m)
    }
}

fn scores(w: &[f64], bias: &[f64], x: &[(u32, f64)], k: usize, out: &mut [f64]) {
    out.copy_from_slice(bias);
    for (j, v) in x {
        let row = &w[*j as usize * k..(*j as usize + 1) * k];
        for c in 0..k {
            out[c] += row[c] * v;
        }
    }
}

fn softmax(s: &mut [f64]) {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in s.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in s.iter_mut() {
        *v /= z;
    }
}

impl Predictor for BowModel {
    fn scale(&self) -> TriageScale {
        self.scale
    }

    fn predict(&self, _key: &VariantKey, record: &DecisionRecord) -> Result<TriageLabel> {
        Ok(self.predict_record(record))
    }
}

/// Where predictions come from, as written in a binding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorBinding {
    Table {
        scale: TriageScale,
        path: PathBuf,
    },
    Remote {
        scale: TriageScale,
        language: Language,
        service: GenServiceConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prompt: Option<TriagePrompt>,
    },
    BowBaseline {
        model: PathBuf,
    },
}

impl PredictorBinding {
    /// Instantiate the predictor; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Box<dyn Predictor>> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        Ok(match self {
            PredictorBinding::Table { scale, path } => Box::new(TablePredictor::load(*scale, &resolve(path))?),
            PredictorBinding::Remote {
                scale,
                language,
                service,
                prompt,
            } => Box::new(RemotePredictor::new(
                *scale,
                prompt.clone().unwrap_or_else(|| TriagePrompt::for_language(*language)),
                Box::new(HttpChatService::new(service.clone())?),
            )),
            PredictorBinding::BowBaseline { model } => Box::new(BowModel::load(&resolve(model))?),
        })
    }
}

/// A pair left out of the index set, with the first failure seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedPair {
    pub pair_id: String,
    pub condition: Option<Condition>,
    pub role: Option<Role>,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct PairedRun {
    pub predictions: PredictionSet,
    pub dropped: Vec<DroppedPair>,
}

fn is_droppable(e: &AuditError) -> bool {
    matches!(
        e,
        AuditError::Prediction { .. } | AuditError::LabelOutOfScale { .. } | AuditError::Parse(_)
    )
}

/// Score both presentations of every admissible pair under every condition.
///
/// A pair that fails to score under any condition leaves the index set for
/// all conditions and is reported in `dropped`. Service and I/O errors abort.
pub fn predict_paired(
    pairs: &[CounterfactualPair],
    conditions: &[Condition],
    predictor: &dyn Predictor,
    exec: Execution,
) -> Result<PairedRun> {
    if conditions.is_empty() {
        return Err(AuditError::Config("no conditions requested".into()));
    }
    let mut conds = conditions.to_vec();
    conds.sort();
    conds.dedup();
    let scale = predictor.scale();

    let score = |pair: &CounterfactualPair| -> Result<std::result::Result<PairOutcome, DroppedPair>> {
        if !pair.cf_quality.admissible() {
            return Ok(Err(DroppedPair {
                pair_id: pair.pair_id.clone(),
                condition: None,
                role: None,
                reason: format!("counterfactual quality {:?}", pair.cf_quality),
            }));
        }
        let mut labels = Vec::with_capacity(conds.len());
        for c in &conds {
            let variant = pair.variant(*c);
            let mut got = [TriageLabel(0); 2];
            for (i, role) in [Role::Original, Role::Counterfactual].into_iter().enumerate() {
                let key = VariantKey {
                    pair_id: pair.pair_id.clone(),
                    condition: *c,
                    role,
                };
                match predictor.predict(&key, variant.record(role)) {
                    Ok(y) if scale.contains(y.0 as i64) => got[i] = y,
                    Ok(y) => {
                        return Ok(Err(DroppedPair {
                            pair_id: pair.pair_id.clone(),
                            condition: Some(*c),
                            role: Some(role),
                            reason: format!("label {y} outside scale"),
                        }))
                    }
                    Err(e) if is_droppable(&e) => {
                        return Ok(Err(DroppedPair {
                            pair_id: pair.pair_id.clone(),
                            condition: Some(*c),
                            role: Some(role),
                            reason: e.to_string(),
                        }))
                    }
                    Err(e) => return Err(e),
                }
            }
            labels.push(PairedLabels {
                y_orig: got[0],
                y_cf: got[1],
            });
        }
        let reference = pair
            .original
            .label
            .filter(|v| scale.contains(*v as i64))
            .map(TriageLabel);
        Ok(Ok(PairOutcome {
            pair_id: pair.pair_id.clone(),
            direction: pair.direction,
            reference,
            labels,
        }))
    };

    let results = match predictor.max_concurrency() {
        Some(n) => map_bounded(pairs, n, score),
        None => par::map_slice(pairs, exec, score),
    };
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for r in results {
        match r? {
            Ok(p) => kept.push(p),
            Err(d) => dropped.push(d),
        }
    }
    Ok(PairedRun {
        predictions: PredictionSet::new(scale, conds, kept)?,
        dropped,
    })
}

// ---- agreement ----

/// k×k counts of (reference i, predicted j).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl AgreementMatrix {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k < 2 || counts.iter().any(|r| r.len() != k) {
            return Err(AuditError::Config("agreement matrix must be square with k >= 2".into()));
        }
        Ok(AgreementMatrix { counts })
    }

    pub fn from_labels(scale: &TriageScale, reference: &[TriageLabel], predicted: &[TriageLabel]) -> Result<Self> {
        if reference.len() != predicted.len() {
            return Err(AuditError::Config("reference and predicted lengths differ".into()));
        }
        let k = scale.levels();
        let mut counts = vec![vec![0u64; k]; k];
        for (r, p) in reference.iter().zip(predicted) {
            let i = scale.label(r.0 as i64)?;
            let j = scale.label(p.0 as i64)?;
            counts[scale.index_of(i)][scale.index_of(j)] += 1;
        }
        AgreementMatrix::new(counts)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn transpose(&self) -> Self {
        let k = self.k();
        AgreementMatrix {
            counts: (0..k).map(|i| (0..k).map(|j| self.counts[j][i]).collect()).collect(),
        }
    }
}

/// Quadratically weighted Cohen's kappa.
pub fn weighted_kappa(m: &AgreementMatrix) -> Result<f64> {
    let k = m.k();
    let n = m.total() as f64;
    if n == 0.0 {
        return Err(AuditError::Undefined("kappa of an empty matrix".into()));
    }
    let rows: Vec<f64> = m.counts.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..k).map(|j| m.counts.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    if rows.iter().filter(|r| **r > 0.0).count() < 2 {
        return Err(AuditError::Undefined("kappa with a single reference class".into()));
    }
    let denom_w = ((k - 1) * (k - 1)) as f64;
    let (mut obs, mut exp) = (0.0, 0.0);
    for (i, (row, r)) in m.counts.iter().zip(&rows).enumerate() {
        for (j, (&count, c)) in row.iter().zip(&cols).enumerate() {
            let w = ((i as f64 - j as f64).powi(2)) / denom_w;
            obs += w * count as f64;
            exp += w * r * c / n;
        }
    }
    if exp == 0.0 {
        return Err(AuditError::Undefined("kappa with degenerate marginals".into()));
    }
    Ok(1.0 - obs / exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CfQuality;

    #[test]
    fn kappa_matches_formula_oracle() {
        let m = AgreementMatrix::new(vec![
            vec![10, 2, 0, 0],
            vec![3, 8, 1, 0],
            vec![0, 2, 9, 1],
            vec![0, 0, 2, 12],
        ])
        .unwrap();
        assert!((weighted_kappa(&m).unwrap() - 0.9147286821705426).abs() < 1e-12);
    }

    #[test]
    fn kappa_edges() {
        let diag = AgreementMatrix::new(vec![vec![5, 0, 0], vec![0, 7, 0], vec![0, 0, 1]]).unwrap();
        assert_eq!(weighted_kappa(&diag).unwrap(), 1.0);
        // outer product of marginals (2,3) x (4,6) / 10 * 10
        let indep = AgreementMatrix::new(vec![vec![8, 12], vec![12, 18]]).unwrap();
        assert!(weighted_kappa(&indep).unwrap().abs() < 1e-12);
        let single = AgreementMatrix::new(vec![vec![3, 1], vec![0, 0]]).unwrap();
        assert!(matches!(weighted_kappa(&single), Err(AuditError::Undefined(_))));
    }

    #[test]
    fn reply_parsing() {
        let s = TriageScale::BORDEAUX;
        assert_eq!(parse_label_reply("Score de triage: 4", &s), Some(TriageLabel(4)));
        assert_eq!(parse_label_reply("12 then 3", &s), Some(TriageLabel(3)));
        assert_eq!(parse_label_reply("I cannot determine", &s), None);
        assert_eq!(parse_label_reply("1", &s), None);
    }

    #[test]
    fn triage_prompt_shape() {
        let r = DecisionRecord::new("x").with_sex(Sex::Female).with_age(54.0).with_texts("", "chute", "");
        let p = TriagePrompt::french().render(&r);
        assert!(p.ends_with("#### Fin de l'anamnèse ####\n\nScore de triage: [/INST]"));
        assert!(p.contains("Sexe : F\nÂge : 54\n"));
        let hidden = crate::model::make_variant(&r, Condition::TextIso);
        assert!(!TriagePrompt::french().render(&hidden).contains("Sexe"));
    }

    #[test]
    fn table_lookup() {
        let mut t = TablePredictor::new(TriageScale::BORDEAUX);
        t.insert_id("id42", 3);
        let key = VariantKey {
            pair_id: "p".into(),
            condition: Condition::Full,
            role: Role::Original,
        };
        assert_eq!(t.predict(&key, &DecisionRecord::new("id42")).unwrap(), TriageLabel(3));
        assert!(matches!(
            t.predict(&key, &DecisionRecord::new("nope")),
            Err(AuditError::Prediction { .. })
        ));
    }

    fn pairs(n: usize) -> Vec<CounterfactualPair> {
        (0..n)
            .map(|i| {
                let sex = if i % 2 == 0 { Sex::Male } else { Sex::Female };
                let o = DecisionRecord::new(format!("p{i}"))
                    .with_sex(sex)
                    .with_age(40.0)
                    .with_texts("", "douleur", "")
                    .with_label(3);
                let mut c = o.clone();
                c.sex = Some(sex.flip());
                CounterfactualPair::new(o, c, CfQuality::Correct).unwrap()
            })
            .collect()
    }

    struct Fixed(Option<String>);
    impl Predictor for Fixed {
        fn scale(&self) -> TriageScale {
            TriageScale::BORDEAUX
        }
        fn predict(&self, key: &VariantKey, _r: &DecisionRecord) -> Result<TriageLabel> {
            if self.0.as_deref() == Some(key.pair_id.as_str()) && key.condition == Condition::TabIso {
                return Err(AuditError::Prediction {
                    id: key.pair_id.clone(),
                    reason: "no label".into(),
                });
            }
            Ok(TriageLabel(3))
        }
    }

    #[test]
    fn paired_cardinality_and_drop_rule() {
        let ps = pairs(10);
        let run = predict_paired(&ps, &[Condition::Full], &Fixed(None), Execution::Parallel).unwrap();
        assert_eq!(run.predictions.to_rows().len(), 20);
        let run = predict_paired(&ps, &Condition::ALL, &Fixed(None), Execution::Sequential).unwrap();
        assert_eq!(run.predictions.to_rows().len(), 60);
        let run = predict_paired(&ps, &Condition::ALL, &Fixed(Some("p4".into())), Execution::Parallel).unwrap();
        assert_eq!(run.predictions.len(), 9);
        assert_eq!(run.dropped.len(), 1);
        assert_eq!(run.dropped[0].condition, Some(Condition::TabIso));
        assert!(run.predictions.pairs.iter().all(|p| p.labels.len() == 3));
    }

    fn synthetic_training(n: usize, seed: u64) -> Vec<DecisionRecord> {
        use rand::Rng;
        let words = [
            ["arrêt", "inconscient", "détresse"],
            ["thoracique", "dyspnée", "malaise"],
            ["fracture", "entorse", "plaie"],
            ["renouvellement", "certificat", "ordonnance"],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let c = rng.random_range(0..4usize);
                let w = words[c][rng.random_range(0..3usize)];
                DecisionRecord::new(format!("t{i}"))
                    .with_sex(if rng.random_bool(0.5) { Sex::Male } else { Sex::Female })
                    .with_age(rng.random_range(18.0..90.0f64).round())
                    .with_texts("", &format!("patient avec {w} depuis ce matin"), "")
                    .with_label(2 + c as u8)
            })
            .collect()
    }

    #[test]
    fn baseline_beats_random_and_is_deterministic() {
        let train = synthetic_training(1000, 1);
        let test = synthetic_training(300, 2);
        let cfg = BowConfig {
            seed: 9,
            ..Default::default()
        };
        let model = BowModel::train(&train, TriageScale::BORDEAUX, cfg).unwrap();
        let again = BowModel::train(&train, TriageScale::BORDEAUX, cfg).unwrap();
        assert_eq!(model, again);

        let s = TriageScale::BORDEAUX;
        let reference: Vec<_> = test.iter().map(|r| TriageLabel(r.label.unwrap())).collect();
        let predicted: Vec<_> = test.iter().map(|r| model.predict_record(r)).collect();
        assert!(predicted.iter().all(|y| s.contains(y.0 as i64)));
        let k_model = weighted_kappa(&AgreementMatrix::from_labels(&s, &reference, &predicted).unwrap()).unwrap();

        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let random: Vec<_> = test.iter().map(|_| TriageLabel(rng.random_range(2..=5))).collect();
        let k_random = weighted_kappa(&AgreementMatrix::from_labels(&s, &reference, &random).unwrap()).unwrap();
        assert!(k_model > k_random + 0.5, "{k_model} vs {k_random}");
    }

    #[test]
    fn baseline_artifact_roundtrip() {
        let model = BowModel::train(&synthetic_training(200, 4), TriageScale::BORDEAUX, BowConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        model.save(&p).unwrap();
        assert_eq!(BowModel::load(&p).unwrap(), model);
        assert!(BowModel::train(&[], TriageScale::BORDEAUX, BowConfig::default()).is_err());
    }

    #[test]
    fn binding_from_toml_shape() {
        let b: PredictorBinding = serde_json::from_value(serde_json::json!({
            "kind": "table",
            "scale": {"min": 2, "max": 5},
            "path": "preds.jsonl"
        }))
        .unwrap();
        assert!(matches!(b, PredictorBinding::Table { .. }));
    }
}
