//! Per-condition metric reports with bootstrap intervals.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_all, BootstrapConfig, CiMethod, Resampling};
use crate::error::{AuditError, Result};
use crate::io;
use crate::metrics::{Metric, MetricReport};
use crate::model::{Condition, TriageScale};
use crate::predictions::{PairOutcome, PredictionSet};

pub const REPORT_SCHEMA: &str = "cf-audit/metric-report/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapMeta {
    pub method: CiMethod,
    pub resampling: Resampling,
    pub resampling_unit: String,
    pub iterations: usize,
    pub confidence: f64,
    pub seed: u64,
    pub redraws: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_id: Option<String>,
    pub scale: TriageScale,
    pub index_set_size: usize,
    /// SHA-256 of the sorted pair ids, one per line.
    pub index_set_digest: String,
    pub bootstrap: BootstrapMeta,
    pub reports: Vec<MetricReport>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl AuditReport {
    pub fn report(&self, condition: Condition) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.condition == condition)
    }
}

/// Metric reports for every condition of `preds`, sharing one index set and
/// one bootstrap.
pub fn audit(preds: &PredictionSet, cfg: &BootstrapConfig) -> Result<AuditReport> {
    preds.validate()?;
    let res = bootstrap_all(preds, &Metric::ALL, cfg)?;
    let mut warnings = Vec::new();
    let mut reports = Vec::with_capacity(res.conditions.len());
    for (c, condition) in res.conditions.iter().enumerate() {
        let mut report = MetricReport::empty(*condition, res.observed[c]);
        for (m, metric) in Metric::ALL.iter().enumerate() {
            let est = res.estimates[c][m];
            match est {
                None => warnings.push(format!("{metric} undefined under {condition}")),
                Some(e) if !(e.lower <= e.point && e.point <= e.upper) => warnings.push(format!(
                    "{metric} under {condition}: point {} outside percentile interval [{}, {}]",
                    e.point, e.lower, e.upper
                )),
                Some(_) => {}
            }
            report.set(*metric, est);
        }
        reports.push(report);
    }
    Ok(AuditReport {
        schema: REPORT_SCHEMA.to_string(),
        manifest_id: None,
        scale: preds.scale,
        index_set_size: preds.len(),
        index_set_digest: index_set_digest(preds),
        bootstrap: BootstrapMeta {
            method: cfg.method,
            resampling: cfg.resampling,
            resampling_unit: "pair".to_string(),
            iterations: cfg.iterations,
            confidence: cfg.confidence,
            seed: cfg.seed,
            redraws: res.redraws,
        },
        reports,
        warnings,
    })
}

pub fn index_set_digest(preds: &PredictionSet) -> String {
    let mut ids: Vec<&str> = preds.pairs.iter().map(|p| p.pair_id.as_str()).collect();
    ids.sort_unstable();
    let mut buf = String::new();
    for id in ids {
        buf.push_str(id);
        buf.push('\n');
    }
    io::sha256_hex(buf.as_bytes())
}

/// Combine single-condition prediction sets into one. Their index sets must
/// hold exactly the same pairs.
pub fn merge_conditions(sets: &[PredictionSet]) -> Result<PredictionSet> {
    let first = sets
        .first()
        .ok_or_else(|| AuditError::Config("no prediction sets to merge".into()))?;
    let reference = first.index_set()?;
    let mut conditions = Vec::new();
    for s in sets {
        if s.scale != first.scale {
            return Err(AuditError::Config("prediction sets use different scales".into()));
        }
        if !s.index_set()?.same_members(&reference) {
            return Err(AuditError::IndexSetMismatch(format!(
                "conditions {:?} and {:?} cover different pairs",
                first.conditions, s.conditions
            )));
        }
        for c in &s.conditions {
            if conditions.contains(c) {
                return Err(AuditError::Config(format!("condition {c} given twice")));
            }
            conditions.push(*c);
        }
    }

    let lookup: Vec<HashMap<&str, &PairOutcome>> = sets
        .iter()
        .map(|s| s.pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect())
        .collect();
    let mut pairs = Vec::with_capacity(first.len());
    for p in &first.pairs {
        let mut labels = Vec::with_capacity(conditions.len());
        for l in &lookup {
            let other = l[p.pair_id.as_str()];
            if other.direction != p.direction {
                return Err(AuditError::IndexSetMismatch(format!(
                    "pair {} has different directions across conditions",
                    p.pair_id
                )));
            }
            labels.extend_from_slice(&other.labels);
        }
        pairs.push(PairOutcome {
            pair_id: p.pair_id.clone(),
            direction: p.direction,
            reference: p.reference,
            labels,
        });
    }
    PredictionSet::new(first.scale, conditions, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Direction, PairedLabels, TriageLabel};

    fn single(condition: Condition, ids: &[&str]) -> PredictionSet {
        PredictionSet::new(
            TriageScale::MIMIC,
            vec![condition],
            ids.iter()
                .enumerate()
                .map(|(i, id)| PairOutcome {
                    pair_id: id.to_string(),
                    direction: if i % 2 == 0 { Direction::MToF } else { Direction::FToM },
                    reference: None,
                    labels: vec![PairedLabels {
                        y_orig: TriageLabel(2),
                        y_cf: TriageLabel(1 + (i % 3) as u8),
                    }],
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn three_conditions_three_reports() {
        let ids = ["a", "b", "c", "d", "e", "f"];
        let merged = merge_conditions(&[
            single(Condition::Full, &ids),
            single(Condition::TextIso, &ids),
            single(Condition::TabIso, &ids),
        ])
        .unwrap();
        let cfg = BootstrapConfig {
            iterations: 50,
            ..Default::default()
        };
        let report = audit(&merged, &cfg).unwrap();
        assert_eq!(report.reports.len(), 3);
        for c in Condition::ALL {
            assert!(report.report(c).is_some());
        }
        assert_eq!(report.index_set_size, 6);
    }

    #[test]
    fn index_set_mismatch_is_an_error() {
        let err = merge_conditions(&[
            single(Condition::Full, &["a", "b", "c"]),
            single(Condition::TabIso, &["a", "b", "x"]),
        ])
        .unwrap_err();
        assert!(matches!(err, AuditError::IndexSetMismatch(_)));
    }
}
