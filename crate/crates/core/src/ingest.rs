//! Record loading, the exclusion cascade, and label-stratified splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::lexicon::{GenderLexicon, Language};
use crate::model::{DecisionRecord, TriageScale};
use crate::par::{self, Execution};

/// Chief-complaint classes removed before any text screening.
pub const DEFAULT_EXCLUDED_COMPLAINT_CLASSES: [&str; 4] = [
    "Recent pelvic or genital pain",
    "Female/male urogenital problem without pain",
    "Female/male genital bleeding",
    "Foreign body in the genitourinary tract",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    ParseError,
    BeforeMinDate,
    MissingField,
    UnderAge,
    ExcludedLabel,
    LabelOutOfScale,
    ExcludedChiefComplaint,
    Lexicon,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::ParseError => "parse_error",
            RejectReason::BeforeMinDate => "before_min_date",
            RejectReason::MissingField => "missing_field",
            RejectReason::UnderAge => "under_age",
            RejectReason::ExcludedLabel => "excluded_label",
            RejectReason::LabelOutOfScale => "label_out_of_scale",
            RejectReason::ExcludedChiefComplaint => "excluded_chief_complaint",
            RejectReason::Lexicon => "lexicon",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    #[serde(default)]
    pub min_date: Option<NaiveDate>,
    #[serde(default = "default_min_age")]
    pub min_age: f64,
    /// Scale the raw labels are expected on, before exclusions.
    pub scale: TriageScale,
    #[serde(default)]
    pub excluded_labels: BTreeSet<u8>,
    #[serde(default = "default_complaint_classes")]
    pub excluded_chief_complaint_classes: Vec<String>,
    pub lexicon: GenderLexicon,
    #[serde(default = "default_required")]
    pub required_fields: BTreeSet<String>,
}

fn default_min_age() -> f64 {
    18.0
}

fn default_complaint_classes() -> Vec<String> {
    DEFAULT_EXCLUDED_COMPLAINT_CLASSES
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn default_required() -> BTreeSet<String> {
    ["sex", "age", "label", "text"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl FilterConfig {
    /// French ED profile: raw CIMU 1-5 with level 1 (resuscitation) removed.
    pub fn bordeaux() -> Self {
        FilterConfig {
            min_date: None,
            min_age: default_min_age(),
            scale: TriageScale { min: 1, max: 5 },
            excluded_labels: BTreeSet::from([1]),
            excluded_chief_complaint_classes: default_complaint_classes(),
            lexicon: GenderLexicon::french(),
            required_fields: default_required(),
        }
    }

    /// MIMIC-IV profile: ESI 1-4, English lexicon, no categorical complaints.
    pub fn mimic() -> Self {
        FilterConfig {
            min_date: None,
            min_age: default_min_age(),
            scale: TriageScale::MIMIC,
            excluded_labels: BTreeSet::new(),
            excluded_chief_complaint_classes: Vec::new(),
            lexicon: GenderLexicon::english(),
            required_fields: default_required(),
        }
    }

    pub fn for_language(language: Language) -> Self {
        match language {
            Language::Fr => Self::bordeaux(),
            Language::En => Self::mimic(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lexicon.validate()?;
        if let Some(bad) = self
            .excluded_labels
            .iter()
            .find(|l| !self.scale.contains(**l as i64))
        {
            return Err(AuditError::Config(format!(
                "excluded label {bad} outside scale [{}, {}]",
                self.scale.min, self.scale.max
            )));
        }
        if self.min_age.is_nan() || self.min_age < 0.0 {
            return Err(AuditError::Config("min_age must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    /// 1-based input line number.
    pub line: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub reason: RejectReason,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<DecisionRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<DecisionRecord>,
    pub rejected: Vec<Rejected>,
}

impl FilterOutcome {
    pub fn reason_counts(&self) -> BTreeMap<RejectReason, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.rejected {
            *counts.entry(r.reason).or_insert(0) += 1;
        }
        counts
    }

    /// Summary printed by the CLI.
    pub fn summary(&self) -> serde_json::Value {
        let reasons: BTreeMap<&str, usize> = self
            .reason_counts()
            .into_iter()
            .map(|(k, v)| (k.as_str(), v))
            .collect();
        serde_json::json!({
            "input": self.kept.len() + self.rejected.len(),
            "kept": self.kept.len(),
            "rejected": self.rejected.len(),
            "reasons": reasons,
        })
    }
}

/// First failing rule for one record, or `None` if it is kept.
pub fn check_record(record: &DecisionRecord, cfg: &FilterConfig) -> Option<(RejectReason, String)> {
    if let Some(min_date) = cfg.min_date {
        if let Some(date) = &record.date {
            match parse_date(date) {
                Some(d) if d < min_date => {
                    return Some((RejectReason::BeforeMinDate, format!("{d} < {min_date}")))
                }
                Some(_) => {}
                None => {
                    return Some((RejectReason::ParseError, format!("bad date {date:?}")));
                }
            }
        }
    }

    for field in &cfg.required_fields {
        if !has_field(record, field) {
            return Some((RejectReason::MissingField, field.clone()));
        }
    }

    if let Some(age) = record.age {
        if age < cfg.min_age {
            return Some((RejectReason::UnderAge, format!("age {age}")));
        }
    }

    if let Some(label) = record.label {
        if cfg.excluded_labels.contains(&label) {
            return Some((RejectReason::ExcludedLabel, format!("label {label}")));
        }
        if !cfg.scale.contains(label as i64) {
            return Some((RejectReason::LabelOutOfScale, format!("label {label}")));
        }
    }

    if let Some(class) = &record.chief_complaint_class {
        let class = class.trim();
        if cfg
            .excluded_chief_complaint_classes
            .iter()
            .any(|c| c.trim().eq_ignore_ascii_case(class))
        {
            return Some((RejectReason::ExcludedChiefComplaint, class.to_string()));
        }
    }

    let mut hits: Vec<&str> = Vec::new();
    for text in record.texts() {
        for stem in cfg.lexicon.matches(text) {
            if !hits.contains(&stem) {
                hits.push(stem);
            }
        }
    }
    if !hits.is_empty() {
        return Some((RejectReason::Lexicon, hits.join("|")));
    }
    None
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    let head = s.get(..10)?;
    NaiveDate::parse_from_str(head, "%Y-%m-%d").ok()
}

fn has_field(record: &DecisionRecord, field: &str) -> bool {
    match field {
        "sex" => record.sex.is_some(),
        "age" => record.age.is_some(),
        "label" => record.label.is_some(),
        "date" => record.date.is_some(),
        "text" => !record.all_text_empty(),
        "chief_complaint" => !record.chief_complaint.trim().is_empty(),
        "hpi" => !record.hpi.trim().is_empty(),
        "pmh" => !record.pmh.trim().is_empty(),
        other => record
            .tabular
            .get(other)
            .map(|v| !v.is_null())
            .unwrap_or(false),
    }
}

/// Filter already-parsed records. Kept records keep their input order.
pub fn filter_records(
    records: &[DecisionRecord],
    cfg: &FilterConfig,
    exec: Execution,
) -> FilterOutcome {
    let verdicts = par::map_slice(records, exec, |r| check_record(r, cfg));
    let mut out = FilterOutcome::default();
    for (i, (record, verdict)) in records.iter().zip(verdicts).enumerate() {
        match verdict {
            None => out.kept.push(record.clone()),
            Some((reason, detail)) => out.rejected.push(Rejected {
                line: i + 1,
                id: Some(record.id.clone()),
                reason,
                detail,
                record: Some(record.clone()),
            }),
        }
    }
    out
}

/// Filter raw JSONL lines. Malformed lines are rejected with
/// `parse_error` and the stream continues. Blank lines are skipped.
pub fn filter_lines<S: AsRef<str> + Sync>(
    lines: &[S],
    cfg: &FilterConfig,
    exec: Execution,
) -> FilterOutcome {
    enum Verdict {
        Blank,
        Keep(DecisionRecord),
        Reject(Rejected),
    }

    let indexed: Vec<(usize, &str)> = lines
        .iter()
        .enumerate()
        .map(|(i, l)| (i + 1, l.as_ref()))
        .collect();
    let verdicts = par::map_slice(&indexed, exec, |&(line, text)| {
        if text.trim().is_empty() {
            return Verdict::Blank;
        }
        match DecisionRecord::from_json_line(text) {
            Err(e) => Verdict::Reject(Rejected {
                line,
                id: None,
                reason: RejectReason::ParseError,
                detail: e.to_string(),
                record: None,
            }),
            Ok(record) => match check_record(&record, cfg) {
                None => Verdict::Keep(record),
                Some((reason, detail)) => Verdict::Reject(Rejected {
                    line,
                    id: Some(record.id.clone()),
                    reason,
                    detail,
                    record: Some(record),
                }),
            },
        }
    });

    let mut out = FilterOutcome::default();
    for v in verdicts {
        match v {
            Verdict::Blank => {}
            Verdict::Keep(r) => out.kept.push(r),
            Verdict::Reject(r) => out.rejected.push(r),
        }
    }
    out
}

/// Split labeled records so each label's train share is as close to
/// `fraction` as rounding allows. Both partitions keep input order.
pub fn stratified_split(
    records: &[DecisionRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<DecisionRecord>, Vec<DecisionRecord>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(AuditError::Config(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut by_label: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let label = r
            .label
            .ok_or_else(|| AuditError::record(&r.id, "unlabeled record in stratified split"))?;
        by_label.entry(label).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; records.len()];
    for idx in by_label.values_mut() {
        idx.shuffle(&mut rng);
        let take = (fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..take] {
            in_train[i] = true;
        }
    }

    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(in_train) {
        if t {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Sex;

    fn clean(id: &str, label: u8) -> DecisionRecord {
        DecisionRecord::new(id)
            .with_sex(Sex::Male)
            .with_age(40.0)
            .with_label(label)
            .with_texts("Douleur thoracique", "douleur depuis 2h", "HTA, diabète")
    }

    #[test]
    fn excluded_label_rejected() {
        let cfg = FilterConfig::bordeaux();
        let r = clean("a", 1);
        assert_eq!(check_record(&r, &cfg).unwrap().0, RejectReason::ExcludedLabel);
    }

    #[test]
    fn lexicon_hit_in_pmh_rejected() {
        let cfg = FilterConfig::bordeaux();
        let mut r = clean("a", 3);
        r.pmh = "adénome prostatique".into();
        let (reason, detail) = check_record(&r, &cfg).unwrap();
        assert_eq!(reason, RejectReason::Lexicon);
        assert_eq!(detail, "prostat");
    }

    #[test]
    fn clean_adult_kept() {
        let cfg = FilterConfig::bordeaux();
        assert!(check_record(&clean("a", 3), &cfg).is_none());
    }

    #[test]
    fn first_matching_rule_wins() {
        let cfg = FilterConfig::bordeaux();
        let mut r = clean("a", 1).with_age(12.0);
        r.pmh = "grossesse".into();
        assert_eq!(check_record(&r, &cfg).unwrap().0, RejectReason::UnderAge);
        r.sex = None;
        assert_eq!(check_record(&r, &cfg).unwrap().0, RejectReason::MissingField);
    }

    #[test]
    fn min_date_rule() {
        let mut cfg = FilterConfig::bordeaux();
        cfg.min_date = NaiveDate::from_ymd_opt(2018, 1, 1);
        let mut r = clean("a", 3);
        r.date = Some("2017-12-31T23:00:00".into());
        assert_eq!(check_record(&r, &cfg).unwrap().0, RejectReason::BeforeMinDate);
        r.date = Some("2018-01-01".into());
        assert!(check_record(&r, &cfg).is_none());
    }

    #[test]
    fn excluded_complaint_class() {
        let cfg = FilterConfig::bordeaux();
        let mut r = clean("a", 3);
        r.chief_complaint_class = Some("Female/male genital bleeding".into());
        assert_eq!(
            check_record(&r, &cfg).unwrap().0,
            RejectReason::ExcludedChiefComplaint
        );
    }

    #[test]
    fn all_empty_text_is_missing() {
        let cfg = FilterConfig::mimic();
        let r = DecisionRecord::new("a").with_sex(Sex::Female).with_age(30.0).with_label(2);
        let (reason, detail) = check_record(&r, &cfg).unwrap();
        assert_eq!(reason, RejectReason::MissingField);
        assert_eq!(detail, "text");
    }

    #[test]
    fn malformed_line_does_not_stop_stream() {
        let cfg = FilterConfig::mimic();
        let good = serde_json::to_string(&clean("g", 2).with_texts("chest pain", "", "")).unwrap();
        let lines = vec![good.clone(), "{not json".to_string(), String::new(), good];
        let out = filter_lines(&lines, &cfg, Execution::Sequential);
        assert_eq!(out.kept.len(), 2);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].reason, RejectReason::ParseError);
        assert_eq!(out.rejected[0].line, 2);
    }

    #[test]
    fn config_validation() {
        let mut cfg = FilterConfig::mimic();
        cfg.excluded_labels.insert(9);
        assert!(cfg.validate().is_err());
        FilterConfig::bordeaux().validate().unwrap();
    }

    #[test]
    fn split_exact_divisibility() {
        let mut rs: Vec<_> = (0..50).map(|i| clean(&format!("a{i}"), 3)).collect();
        rs.extend((0..50).map(|i| clean(&format!("b{i}"), 4)));
        let (train, test) = stratified_split(&rs, 0.5, 7).unwrap();
        let count = |v: &[DecisionRecord], l| v.iter().filter(|r| r.label == Some(l)).count();
        assert_eq!((count(&train, 3), count(&train, 4)), (25, 25));
        assert_eq!((count(&test, 3), count(&test, 4)), (25, 25));
    }

    #[test]
    fn split_is_deterministic() {
        let rs: Vec<_> = (0..37).map(|i| clean(&format!("r{i}"), 2 + (i % 4) as u8)).collect();
        let a = stratified_split(&rs, 0.3, 11).unwrap();
        let b = stratified_split(&rs, 0.3, 11).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn split_rejects_unlabeled() {
        let mut r = clean("x", 3);
        r.label = None;
        assert!(stratified_split(&[r], 0.5, 0).is_err());
        assert!(stratified_split(&[clean("y", 3)], 1.0, 0).is_err());
    }
}
