//! Aligned predictions for every variant of every pair in one index set.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::model::{
    Condition, Direction, IndexSet, PairedLabels, PairedPrediction, Role, Sex, TriageLabel,
    TriageScale,
};

/// One line of a predictions JSONL file.
/// Direction (if stated) and labels by (condition, role) while reading rows.
type SeenPair = (Option<Direction>, BTreeMap<(Condition, Role), u8>);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub pair_id: String,
    pub condition: Condition,
    pub role: Role,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub pair_id: String,
    pub direction: Direction,
    /// Reference label of the original record, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<TriageLabel>,
    /// Labels aligned with `PredictionSet::conditions`.
    pub labels: Vec<PairedLabels>,
}

impl PairOutcome {
    /// Score of the female and male presentations under the condition at
    /// `slot`, using the pre-neutralization sex assignment.
    pub fn female_male(&self, slot: usize) -> (TriageLabel, TriageLabel) {
        let l = self.labels[slot];
        match self.direction.original_sex() {
            Sex::Female => (l.y_orig, l.y_cf),
            Sex::Male => (l.y_cf, l.y_orig),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub scale: TriageScale,
    pub conditions: Vec<Condition>,
    pub pairs: Vec<PairOutcome>,
}

impl PredictionSet {
    pub fn new(scale: TriageScale, conditions: Vec<Condition>, pairs: Vec<PairOutcome>) -> Result<Self> {
        let set = PredictionSet {
            scale,
            conditions,
            pairs,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(AuditError::Config("prediction set has no conditions".into()));
        }
        self.index_set()?;
        for p in &self.pairs {
            if p.labels.len() != self.conditions.len() {
                return Err(AuditError::IndexSetMismatch(format!(
                    "pair {} has {} condition slots, expected {}",
                    p.pair_id,
                    p.labels.len(),
                    self.conditions.len()
                )));
            }
            for l in &p.labels {
                for y in [l.y_orig, l.y_cf] {
                    self.scale.label(y.0 as i64)?;
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn index_set(&self) -> Result<IndexSet> {
        IndexSet::new(self.pairs.iter().map(|p| p.pair_id.clone()))
    }

    pub fn slot(&self, condition: Condition) -> Option<usize> {
        self.conditions.iter().position(|c| *c == condition)
    }

    pub fn paired(&self, condition: Condition) -> Result<Vec<PairedPrediction>> {
        let slot = self.slot(condition).ok_or_else(|| {
            AuditError::IndexSetMismatch(format!("condition {condition} not in prediction set"))
        })?;
        Ok(self
            .pairs
            .iter()
            .map(|p| PairedPrediction {
                pair_id: p.pair_id.clone(),
                condition,
                direction: p.direction,
                y_orig: p.labels[slot].y_orig,
                y_cf: p.labels[slot].y_cf,
            })
            .collect())
    }

    /// Restrict to a single condition.
    pub fn only(&self, condition: Condition) -> Result<PredictionSet> {
        let slot = self.slot(condition).ok_or_else(|| {
            AuditError::IndexSetMismatch(format!("condition {condition} not in prediction set"))
        })?;
        Ok(PredictionSet {
            scale: self.scale,
            conditions: vec![condition],
            pairs: self
                .pairs
                .iter()
                .map(|p| PairOutcome {
                    pair_id: p.pair_id.clone(),
                    direction: p.direction,
                    reference: p.reference,
                    labels: vec![p.labels[slot]],
                })
                .collect(),
        })
    }

    /// Flatten into JSONL rows, pair by pair, condition by condition.
    pub fn to_rows(&self) -> Vec<PredictionRow> {
        let mut rows = Vec::with_capacity(self.pairs.len() * self.conditions.len() * 2);
        for p in &self.pairs {
            for (c, l) in self.conditions.iter().zip(&p.labels) {
                for (role, y) in [(Role::Original, l.y_orig), (Role::Counterfactual, l.y_cf)] {
                    rows.push(PredictionRow {
                        pair_id: p.pair_id.clone(),
                        condition: *c,
                        role,
                        label: y.0,
                        direction: Some(p.direction),
                    });
                }
            }
        }
        rows
    }

    /// Reassemble rows. Every pair must carry both roles under every
    /// condition that appears anywhere in the file.
    pub fn from_rows(
        rows: &[PredictionRow],
        scale: TriageScale,
        directions: Option<&HashMap<String, Direction>>,
    ) -> Result<PredictionSet> {
        let mut conditions: Vec<Condition> = Vec::new();
        let mut order: Vec<String> = Vec::new();
        let mut seen: HashMap<String, SeenPair> = HashMap::new();
        for r in rows {
            if !conditions.contains(&r.condition) {
                conditions.push(r.condition);
            }
            let entry = seen.entry(r.pair_id.clone()).or_insert_with(|| {
                order.push(r.pair_id.clone());
                (None, BTreeMap::new())
            });
            if let Some(d) = r.direction {
                if entry.0.is_some_and(|old| old != d) {
                    return Err(AuditError::Parse(format!(
                        "conflicting directions for pair {}",
                        r.pair_id
                    )));
                }
                entry.0 = Some(d);
            }
            if entry.1.insert((r.condition, r.role), r.label).is_some() {
                return Err(AuditError::Parse(format!(
                    "duplicate prediction for {}/{}/{:?}",
                    r.pair_id, r.condition, r.role
                )));
            }
        }
        conditions.sort();

        let mut pairs = Vec::with_capacity(order.len());
        for id in order {
            let (dir, labels) = &seen[&id];
            let direction = dir
                .or_else(|| directions.and_then(|m| m.get(&id).copied()))
                .ok_or_else(|| AuditError::Parse(format!("no direction known for pair {id}")))?;
            let mut slots = Vec::with_capacity(conditions.len());
            for c in &conditions {
                let get = |role| {
                    labels.get(&(*c, role)).copied().ok_or_else(|| {
                        AuditError::IndexSetMismatch(format!(
                            "pair {id} lacks {role:?} prediction under {c}"
                        ))
                    })
                };
                slots.push(PairedLabels {
                    y_orig: scale.label(get(Role::Original)? as i64)?,
                    y_cf: scale.label(get(Role::Counterfactual)? as i64)?,
                });
            }
            pairs.push(PairOutcome {
                pair_id: id,
                direction,
                reference: None,
                labels: slots,
            });
        }
        PredictionSet::new(scale, conditions, pairs)
    }

    /// Attach reference labels of the original records, keyed by pair id.
    pub fn attach_references(&mut self, references: &HashMap<String, TriageLabel>) -> usize {
        let mut attached = 0;
        for p in &mut self.pairs {
            p.reference = references.get(&p.pair_id).copied();
            attached += p.reference.is_some() as usize;
        }
        attached
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> PredictionSet {
        let l = |a, b| PairedLabels {
            y_orig: TriageLabel(a),
            y_cf: TriageLabel(b),
        };
        PredictionSet::new(
            TriageScale::BORDEAUX,
            vec![Condition::Full, Condition::TabIso],
            vec![
                PairOutcome {
                    pair_id: "a".into(),
                    direction: Direction::MToF,
                    reference: None,
                    labels: vec![l(3, 4), l(3, 3)],
                },
                PairOutcome {
                    pair_id: "b".into(),
                    direction: Direction::FToM,
                    reference: None,
                    labels: vec![l(2, 2), l(5, 4)],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn rows_reassemble() {
        let s = set();
        let rows = s.to_rows();
        assert_eq!(rows.len(), 8);
        let back = PredictionSet::from_rows(&rows, s.scale, None).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn missing_condition_is_index_mismatch() {
        let s = set();
        let mut rows = s.to_rows();
        rows.retain(|r| !(r.pair_id == "b" && r.condition == Condition::TabIso));
        let err = PredictionSet::from_rows(&rows, s.scale, None).unwrap_err();
        assert!(matches!(err, AuditError::IndexSetMismatch(_)));
    }

    #[test]
    fn out_of_scale_label_rejected() {
        let s = set();
        let mut rows = s.to_rows();
        rows[0].label = 9;
        assert!(PredictionSet::from_rows(&rows, s.scale, None).is_err());
    }

    #[test]
    fn female_male_assignment() {
        let s = set();
        assert_eq!(s.pairs[0].female_male(0), (TriageLabel(4), TriageLabel(3)));
        assert_eq!(s.pairs[1].female_male(1), (TriageLabel(5), TriageLabel(4)));
    }
}
