//! Per-label discordance, odds ratios with Woolf intervals, and Pearson
//! chi-square p-values.
//!
//! The 2x2 table for each stratum (original reference label) is
//!
//! ```text
//!                cf < orig   cf >= orig
//! male origin        a           b
//! female origin      c           d
//! ```
//!
//! so `OR = (a d) / (b c)` compares the odds of the counterfactual being
//! judged more severe after an M->F flip against an F->M flip.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{AuditError, Result};
use crate::model::{Condition, Direction, TriageLabel};
use crate::predictions::PredictionSet;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959964;

/// Cells below this count suppress the odds ratio.
pub const MIN_CELL: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OddsRatio {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Odds ratio with a Woolf (log-scale normal) interval at quantile `z`.
pub fn odds_ratio_z(a: u64, b: u64, c: u64, d: u64, z: f64) -> Result<OddsRatio> {
    if a == 0 || b == 0 || c == 0 || d == 0 {
        return Err(AuditError::Undefined(format!(
            "odds ratio with a zero cell ({a}, {b}, {c}, {d})"
        )));
    }
    let (a, b, c, d) = (a as f64, b as f64, c as f64, d as f64);
    let ln_or = (a.ln() + d.ln()) - (b.ln() + c.ln());
    let se = (1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d).sqrt();
    Ok(OddsRatio {
        value: ln_or.exp(),
        lower: (ln_or - z * se).exp(),
        upper: (ln_or + z * se).exp(),
    })
}

pub fn odds_ratio(a: u64, b: u64, c: u64, d: u64) -> Result<OddsRatio> {
    odds_ratio_z(a, b, c, d, Z_95)
}

/// Pearson chi-square statistic (1 df, no continuity correction).
pub fn chi_square_statistic(a: u64, b: u64, c: u64, d: u64) -> Result<f64> {
    let n = a + b + c + d;
    if n == 0 {
        return Err(AuditError::Undefined("empty contingency table".into()));
    }
    let margins = [a + b, c + d, a + c, b + d];
    if margins.contains(&0) {
        return Err(AuditError::Undefined(format!(
            "degenerate margins in ({a}, {b}, {c}, {d})"
        )));
    }
    let cross = (a as i128) * (d as i128) - (b as i128) * (c as i128);
    let num = (n as f64) * (cross as f64) * (cross as f64);
    let den = margins.iter().map(|&m| m as f64).product::<f64>();
    Ok(num / den)
}

/// Two-sided p-value of the Pearson chi-square test of independence.
pub fn chi_square_p(a: u64, b: u64, c: u64, d: u64) -> Result<f64> {
    let chi1 = ChiSquared::new(1.0).expect("one degree of freedom is valid");
    Ok(chi1.sf(chi_square_statistic(a, b, c, d)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumTable {
    pub label: TriageLabel,
    /// cf < orig, male original.
    pub a: u64,
    /// cf >= orig, male original.
    pub b: u64,
    /// cf < orig, female original.
    pub c: u64,
    /// cf >= orig, female original.
    pub d: u64,
    pub up_male: u64,
    pub up_female: u64,
    pub pct_up_male: Option<f64>,
    pub pct_down_male: Option<f64>,
    pub pct_up_female: Option<f64>,
    pub pct_down_female: Option<f64>,
    pub odds_ratio: Option<OddsRatio>,
    pub p_value: Option<f64>,
    /// Why the odds ratio is not reported, if it is not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suppressed: Option<String>,
}

impl StratumTable {
    pub fn from_counts(label: TriageLabel, a: u64, b: u64, c: u64, d: u64, up_male: u64, up_female: u64) -> Self {
        let pct = |x: u64, n: u64| (n > 0).then(|| 100.0 * x as f64 / n as f64);
        let n_m = a + b;
        let n_f = c + d;
        let suppressed = if [a, b, c, d].contains(&0) {
            Some("zero cell".to_string())
        } else if [a, b, c, d].iter().any(|&x| x < MIN_CELL) {
            Some(format!("cell below {MIN_CELL}"))
        } else {
            None
        };
        let odds_ratio = match suppressed {
            None => odds_ratio(a, b, c, d).ok(),
            Some(_) => None,
        };
        StratumTable {
            label,
            a,
            b,
            c,
            d,
            up_male,
            up_female,
            pct_up_male: pct(up_male, n_m),
            pct_down_male: pct(a, n_m),
            pct_up_female: pct(up_female, n_f),
            pct_down_female: pct(c, n_f),
            odds_ratio,
            p_value: chi_square_p(a, b, c, d).ok(),
            suppressed,
        }
    }

    pub fn male_pairs(&self) -> u64 {
        self.a + self.b
    }

    pub fn female_pairs(&self) -> u64 {
        self.c + self.d
    }
}

/// Stratify pairs by the original's reference label under `condition`.
/// Pairs without a reference label are skipped and counted.
pub fn stratify(preds: &PredictionSet, condition: Condition) -> Result<(Vec<StratumTable>, usize)> {
    let slot = preds.slot(condition).ok_or_else(|| {
        AuditError::IndexSetMismatch(format!("condition {condition} not in prediction set"))
    })?;
    // label -> [down_m, n_m, up_m, down_f, n_f, up_f]
    let mut acc: BTreeMap<TriageLabel, [u64; 6]> = BTreeMap::new();
    let mut skipped = 0;
    for p in &preds.pairs {
        let Some(reference) = p.reference else {
            skipped += 1;
            continue;
        };
        let l = p.labels[slot];
        let cell = acc.entry(reference).or_insert([0; 6]);
        let base = match p.direction {
            Direction::MToF => 0,
            Direction::FToM => 3,
        };
        cell[base] += (l.y_cf < l.y_orig) as u64;
        cell[base + 1] += 1;
        cell[base + 2] += (l.y_cf > l.y_orig) as u64;
    }
    let tables = acc
        .into_iter()
        .map(|(label, [dm, nm, um, df, nf, uf])| {
            StratumTable::from_counts(label, dm, nm - dm, df, nf - df, um, uf)
        })
        .collect();
    Ok((tables, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PairedLabels, TriageScale};
    use crate::predictions::PairOutcome;

    // Reference values computed with scipy.stats.chi2_contingency
    // (correction=False) and a direct Woolf evaluation.
    const SCIPY_TRI5_P: f64 = 0.008342790149592326;
    const SCIPY_TRI3_P: f64 = 5.1924903845191377e-17;

    #[test]
    fn woolf_interval_bordeaux_tri3() {
        let or = odds_ratio(530, 15115, 769, 13578).unwrap();
        assert!((or.value - 0.6191233486486568).abs() < 1e-12);
        assert!((or.lower - 0.5529423029541668).abs() < 1e-9);
        assert!((or.upper - 0.6932255296692303).abs() < 1e-9);
    }

    #[test]
    fn woolf_interval_bordeaux_tri5() {
        let or = odds_ratio(194, 1335, 72, 726).unwrap();
        assert!((or.value - 1.47).abs() < 0.01);
        assert!((or.lower - 1.10).abs() < 0.01);
        assert!((or.upper - 1.95).abs() < 0.01);
    }

    #[test]
    fn symmetric_table_has_unit_or() {
        let or = odds_ratio(17, 17, 17, 17).unwrap();
        assert!((or.value - 1.0).abs() < 1e-15);
        assert!(or.lower < 1.0 && or.upper > 1.0);
    }

    #[test]
    fn zero_cell_is_undefined() {
        assert!(matches!(
            odds_ratio(0, 7438, 0, 5858),
            Err(AuditError::Undefined(_))
        ));
    }

    #[test]
    fn chi_square_against_scipy() {
        let p = chi_square_p(194, 1335, 72, 726).unwrap();
        assert!((p - SCIPY_TRI5_P).abs() / SCIPY_TRI5_P < 1e-9);
        let p = chi_square_p(530, 15115, 769, 13578).unwrap();
        assert!(p > 0.0 && p < 1e-15);
        assert!((p - SCIPY_TRI3_P).abs() / SCIPY_TRI3_P < 1e-8);
    }

    #[test]
    fn proportional_table_gives_unit_p() {
        assert_eq!(chi_square_statistic(10, 20, 30, 60).unwrap(), 0.0);
        assert_eq!(chi_square_p(10, 20, 30, 60).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_margins_undefined() {
        assert!(chi_square_p(0, 10, 0, 5).is_err());
        assert!(chi_square_p(0, 0, 0, 0).is_err());
    }

    #[test]
    fn small_sample_suppression() {
        let t = StratumTable::from_counts(TriageLabel(4), 33, 3, 30, 1, 0, 0);
        assert!(t.odds_ratio.is_none());
        assert!(t.suppressed.is_some());
        let t = StratumTable::from_counts(TriageLabel(2), 0, 7438, 0, 5858, 736, 316);
        assert!(t.odds_ratio.is_none());
        assert_eq!(t.pct_down_male, Some(0.0));
    }

    #[test]
    fn stratify_counts_by_reference_and_origin() {
        let l = |a, b| PairedLabels {
            y_orig: TriageLabel(a),
            y_cf: TriageLabel(b),
        };
        let mk = |id: &str, dir, r, y: PairedLabels| PairOutcome {
            pair_id: id.into(),
            direction: dir,
            reference: r,
            labels: vec![y],
        };
        let set = PredictionSet::new(
            TriageScale::BORDEAUX,
            vec![Condition::Full],
            vec![
                mk("1", Direction::MToF, Some(TriageLabel(3)), l(3, 2)),
                mk("2", Direction::MToF, Some(TriageLabel(3)), l(3, 4)),
                mk("3", Direction::FToM, Some(TriageLabel(3)), l(3, 3)),
                mk("4", Direction::FToM, Some(TriageLabel(5)), l(5, 4)),
                mk("5", Direction::FToM, None, l(5, 4)),
            ],
        )
        .unwrap();
        let (tables, skipped) = stratify(&set, Condition::Full).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(tables.len(), 2);
        let t3 = &tables[0];
        assert_eq!((t3.a, t3.b, t3.c, t3.d), (1, 1, 0, 1));
        assert_eq!(t3.pct_up_male, Some(50.0));
        let t5 = &tables[1];
        assert_eq!((t5.a, t5.b, t5.c, t5.d), (0, 0, 1, 0));
        assert_eq!(t5.pct_down_female, Some(100.0));
        assert_eq!(t5.pct_down_male, None);
    }
}
