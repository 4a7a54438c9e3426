//! Domain types shared by every stage of an audit.
//!
//! Records are immutable once built. Variants of a record (text-isolated,
//! tabular-isolated) are derived copies, never in-place edits, and every
//! variant is addressed by `(pair_id, condition, role)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AuditError, Result};

pub const SCHEMA_VERSION: &str = "v1";

fn schema_v1() -> String {
    SCHEMA_VERSION.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "M", alias = "male", alias = "m")]
    Male,
    #[serde(rename = "F", alias = "female", alias = "f")]
    Female,
}

impl Sex {
    pub fn flip(self) -> Sex {
        match self {
            Sex::Male => Sex::Female,
            Sex::Female => Sex::Male,
        }
    }

    /// Encoding used by the tabular sex bit: 0 = male, 1 = female.
    pub fn bit(self) -> u8 {
        match self {
            Sex::Male => 0,
            Sex::Female => 1,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Sex> {
        match bit {
            0 => Some(Sex::Male),
            1 => Some(Sex::Female),
            _ => None,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Sex::Male => "M",
            Sex::Female => "F",
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Bounds of an ordinal triage scale. Lower values are more severe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TriageScale {
    pub min: u8,
    pub max: u8,
}

impl TriageScale {
    /// CIMU levels 2 to 5 after level-1 exclusion.
    pub const BORDEAUX: TriageScale = TriageScale { min: 2, max: 5 };
    /// ESI levels 1 to 4.
    pub const MIMIC: TriageScale = TriageScale { min: 1, max: 4 };

    pub fn new(min: u8, max: u8) -> Result<Self> {
        if min >= max {
            return Err(AuditError::Config(format!(
                "scale needs min < max, got [{min}, {max}]"
            )));
        }
        Ok(TriageScale { min, max })
    }

    pub fn contains(&self, value: i64) -> bool {
        value >= self.min as i64 && value <= self.max as i64
    }

    pub fn label(&self, value: i64) -> Result<TriageLabel> {
        if self.contains(value) {
            Ok(TriageLabel(value as u8))
        } else {
            Err(AuditError::LabelOutOfScale {
                value,
                min: self.min,
                max: self.max,
            })
        }
    }

    /// Number of levels, `k`.
    pub fn levels(&self) -> usize {
        (self.max - self.min) as usize + 1
    }

    pub fn index_of(&self, label: TriageLabel) -> usize {
        (label.0 - self.min) as usize
    }

    pub fn labels(&self) -> impl Iterator<Item = TriageLabel> {
        (self.min..=self.max).map(TriageLabel)
    }

    /// `a` is strictly more severe than `b`.
    pub fn more_severe(&self, a: TriageLabel, b: TriageLabel) -> bool {
        a.0 < b.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TriageLabel(pub u8);

impl TriageLabel {
    pub fn value(self) -> u8 {
        self.0
    }
}

impl fmt::Display for TriageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One admission: tabular context, free text, and the reference label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    #[serde(default = "schema_v1")]
    pub v: String,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<Sex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<f64>,
    /// ISO-8601 admission date (`YYYY-MM-DD` prefix is what filtering reads).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
    #[serde(default)]
    pub tabular: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chief_complaint_class: Option<String>,
    #[serde(default)]
    pub chief_complaint: String,
    #[serde(default)]
    pub hpi: String,
    #[serde(default)]
    pub pmh: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    /// Pass-through metadata (nurse identifiers and the like); never read.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
}

impl DecisionRecord {
    pub fn new(id: impl Into<String>) -> Self {
        DecisionRecord {
            v: schema_v1(),
            id: id.into(),
            sex: None,
            age: None,
            date: None,
            tabular: BTreeMap::new(),
            chief_complaint_class: None,
            chief_complaint: String::new(),
            hpi: String::new(),
            pmh: String::new(),
            label: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_sex(mut self, sex: Sex) -> Self {
        self.sex = Some(sex);
        self
    }

    pub fn with_age(mut self, age: f64) -> Self {
        self.age = Some(age);
        self
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_texts(mut self, chief_complaint: &str, hpi: &str, pmh: &str) -> Self {
        self.chief_complaint = chief_complaint.to_string();
        self.hpi = hpi.to_string();
        self.pmh = pmh.to_string();
        self
    }

    pub fn with_tabular(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.tabular.insert(key.to_string(), value.into());
        self
    }

    pub fn texts(&self) -> [&str; 3] {
        [&self.chief_complaint, &self.hpi, &self.pmh]
    }

    pub fn all_text_empty(&self) -> bool {
        self.texts().iter().all(|t| t.trim().is_empty())
    }

    pub fn triage_label(&self, scale: &TriageScale) -> Result<Option<TriageLabel>> {
        self.label.map(|v| scale.label(v as i64)).transpose()
    }

    /// Parse a single JSONL line, enforcing the schema version.
    pub fn from_json_line(line: &str) -> Result<Self> {
        let record: DecisionRecord = serde_json::from_str(line)?;
        if record.v != SCHEMA_VERSION {
            return Err(AuditError::Parse(format!(
                "unsupported schema version {:?} for record {}",
                record.v, record.id
            )));
        }
        Ok(record)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Full,
    TextIso,
    TabIso,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Full, Condition::TextIso, Condition::TabIso];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Full => "full",
            Condition::TextIso => "text_iso",
            Condition::TabIso => "tab_iso",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Condition::Full => "Full",
            Condition::TextIso => "Text-Iso",
            Condition::TabIso => "Tab-Iso",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(Condition::Full),
            "text_iso" | "text-iso" => Ok(Condition::TextIso),
            "tab_iso" | "tab-iso" => Ok(Condition::TabIso),
            other => Err(AuditError::Parse(format!("unknown condition {other:?}"))),
        }
    }
}

pub fn parse_conditions(list: &str) -> Result<Vec<Condition>> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let c: Condition = part.parse()?;
        if !out.contains(&c) {
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(AuditError::Config("no conditions requested".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Original,
    Counterfactual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    MToF,
    FToM,
}

impl Direction {
    pub fn from_original(sex: Sex) -> Direction {
        match sex {
            Sex::Male => Direction::MToF,
            Sex::Female => Direction::FToM,
        }
    }

    pub fn original_sex(self) -> Sex {
        match self {
            Direction::MToF => Sex::Male,
            Direction::FToM => Sex::Female,
        }
    }

    pub fn reversed(self) -> Direction {
        match self {
            Direction::MToF => Direction::FToM,
            Direction::FToM => Direction::MToF,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfQuality {
    Correct,
    Incomplete,
    Failed,
    Unvalidated,
}

impl CfQuality {
    /// Whether a pair of this quality enters the audit index set.
    pub fn admissible(self) -> bool {
        !matches!(self, CfQuality::Failed)
    }
}

/// An original record and its sex-flipped counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub pair_id: String,
    pub original: DecisionRecord,
    pub counterfactual: DecisionRecord,
    pub direction: Direction,
    pub condition: Condition,
    pub cf_quality: CfQuality,
}

impl CounterfactualPair {
    /// Build a full-condition pair, checking the pairing invariants.
    pub fn new(
        original: DecisionRecord,
        counterfactual: DecisionRecord,
        cf_quality: CfQuality,
    ) -> Result<Self> {
        let direction = classify_direction(&original, &counterfactual)?;
        check_tabular_identity(&original, &counterfactual)?;
        Ok(CounterfactualPair {
            pair_id: original.id.clone(),
            original,
            counterfactual,
            direction,
            condition: Condition::Full,
            cf_quality,
        })
    }

    /// Derive the pair presented under `condition`. Direction is inherited
    /// from the full pair, so text-isolated pairs keep the pre-neutralization
    /// sex assignment.
    pub fn variant(&self, condition: Condition) -> CounterfactualPair {
        CounterfactualPair {
            pair_id: self.pair_id.clone(),
            original: make_variant(&self.original, condition),
            counterfactual: make_variant(&self.counterfactual, condition),
            direction: self.direction,
            condition,
            cf_quality: self.cf_quality,
        }
    }

    pub fn record(&self, role: Role) -> &DecisionRecord {
        match role {
            Role::Original => &self.original,
            Role::Counterfactual => &self.counterfactual,
        }
    }

    /// Sex carried by the `role` presentation before any neutralization.
    pub fn presented_sex(&self, role: Role) -> Sex {
        let original = self.direction.original_sex();
        match role {
            Role::Original => original,
            Role::Counterfactual => original.flip(),
        }
    }
}

/// Project a record onto one transformation condition.
pub fn make_variant(record: &DecisionRecord, condition: Condition) -> DecisionRecord {
    let mut out = record.clone();
    match condition {
        Condition::Full => {}
        Condition::TextIso => {
            out.sex = None;
        }
        Condition::TabIso => {
            out.chief_complaint.clear();
            out.hpi.clear();
            out.pmh.clear();
        }
    }
    out
}

/// Direction of a full-condition pair, derived from the original's sex.
pub fn classify_direction(
    original: &DecisionRecord,
    counterfactual: &DecisionRecord,
) -> Result<Direction> {
    let sex = original
        .sex
        .ok_or_else(|| AuditError::record(&original.id, "original has no sex field"))?;
    match counterfactual.sex {
        Some(cf) if cf == sex.flip() => Ok(Direction::from_original(sex)),
        Some(_) => Err(AuditError::record(
            &original.id,
            "counterfactual sex equals original sex",
        )),
        None => Err(AuditError::record(
            &original.id,
            "counterfactual has no sex field",
        )),
    }
}

/// All tabular fields other than sex must agree exactly between variants.
pub fn check_tabular_identity(a: &DecisionRecord, b: &DecisionRecord) -> Result<()> {
    if a.tabular != b.tabular || a.age != b.age || a.date != b.date {
        return Err(AuditError::record(
            &a.id,
            "tabular fields differ between pair variants",
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariantKey {
    pub pair_id: String,
    pub condition: Condition,
    pub role: Role,
}

/// Predicted labels for both presentations of one pair under one condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairedLabels {
    pub y_orig: TriageLabel,
    pub y_cf: TriageLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedPrediction {
    pub pair_id: String,
    pub condition: Condition,
    pub direction: Direction,
    pub y_orig: TriageLabel,
    pub y_cf: TriageLabel,
}

/// Ordered, duplicate-free set of pair ids shared by every condition of one audit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSet {
    ids: Vec<String>,
}

impl IndexSet {
    pub fn new<I, S>(ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(AuditError::IndexSetMismatch(format!(
                    "duplicate pair id {id}"
                )));
            }
        }
        Ok(IndexSet { ids })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.iter().any(|x| x == id)
    }

    /// Same membership regardless of order.
    pub fn same_members(&self, other: &IndexSet) -> bool {
        let a: BTreeSet<&str> = self.ids.iter().map(String::as_str).collect();
        let b: BTreeSet<&str> = other.ids.iter().map(String::as_str).collect();
        a == b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(sex: Sex) -> DecisionRecord {
        DecisionRecord::new("r1")
            .with_sex(sex)
            .with_age(54.0)
            .with_label(3)
            .with_tabular("heart_rate", 88)
            .with_tabular("ed_saturation", 0.7)
            .with_texts("douleur thoracique", "Patient se plaint de céphalées", "HTA")
    }

    #[test]
    fn flip_is_an_involution() {
        for s in [Sex::Male, Sex::Female] {
            assert_eq!(s.flip().flip(), s);
            assert_ne!(s.flip(), s);
            assert_eq!(Sex::from_bit(s.bit()), Some(s));
        }
        assert_eq!(Sex::Male.bit(), 0);
        assert_eq!(Sex::Female.bit(), 1);
    }

    #[test]
    fn full_variant_is_identity() {
        let r = rec(Sex::Female);
        assert_eq!(make_variant(&r, Condition::Full), r);
    }

    #[test]
    fn text_iso_drops_only_sex() {
        let r = rec(Sex::Female);
        let v = make_variant(&r, Condition::TextIso);
        assert_eq!(v.sex, None);
        assert_eq!(v.texts(), r.texts());
        assert_eq!(v.tabular, r.tabular);
        assert_eq!(v.age, r.age);
    }

    #[test]
    fn tab_iso_empties_text_and_keeps_sex() {
        let r = rec(Sex::Female);
        let v = make_variant(&r, Condition::TabIso);
        assert_eq!(v.sex, Some(Sex::Female));
        assert!(v.all_text_empty());
        assert_eq!(v.tabular, r.tabular);
    }

    #[test]
    fn direction_follows_original_sex() {
        let m = rec(Sex::Male);
        let mut f = m.clone();
        f.sex = Some(Sex::Female);
        assert_eq!(classify_direction(&m, &f).unwrap(), Direction::MToF);
        assert_eq!(classify_direction(&f, &m).unwrap(), Direction::FToM);
        assert!(classify_direction(&m, &m).is_err());
        let mut nosex = m.clone();
        nosex.sex = None;
        assert!(classify_direction(&nosex, &f).is_err());
    }

    #[test]
    fn pair_rejects_tabular_drift() {
        let m = rec(Sex::Male);
        let f = m.clone().with_sex(Sex::Female).with_tabular("heart_rate", 90);
        assert!(CounterfactualPair::new(m, f, CfQuality::Unvalidated).is_err());
    }

    #[test]
    fn text_iso_pair_keeps_direction() {
        let m = rec(Sex::Male);
        let f = m.clone().with_sex(Sex::Female);
        let pair = CounterfactualPair::new(m, f, CfQuality::Correct).unwrap();
        let t = pair.variant(Condition::TextIso);
        assert_eq!(t.direction, Direction::MToF);
        assert_eq!(t.original.sex, None);
        assert_eq!(t.presented_sex(Role::Counterfactual), Sex::Female);
        let tab = pair.variant(Condition::TabIso);
        assert_eq!(tab.counterfactual.sex, Some(Sex::Female));
        assert!(tab.counterfactual.all_text_empty());
    }

    #[test]
    fn schema_version_enforced() {
        let line = r#"{"v":"v1","id":"a","sex":"F","age":30,"label":3,"hpi":"x"}"#;
        let r = DecisionRecord::from_json_line(line).unwrap();
        assert_eq!(r.sex, Some(Sex::Female));
        let bad = r#"{"v":"v2","id":"a"}"#;
        assert!(DecisionRecord::from_json_line(bad).is_err());
    }

    #[test]
    fn scale_bounds() {
        let s = TriageScale::BORDEAUX;
        assert!(s.label(1).is_err());
        assert_eq!(s.label(5).unwrap(), TriageLabel(5));
        assert_eq!(s.levels(), 4);
        assert!(TriageScale::new(3, 3).is_err());
    }

    #[test]
    fn index_set_rejects_duplicates() {
        assert!(IndexSet::new(["a", "b", "a"]).is_err());
        let a = IndexSet::new(["a", "b"]).unwrap();
        let b = IndexSet::new(["b", "a"]).unwrap();
        assert!(a.same_members(&b));
    }
}
