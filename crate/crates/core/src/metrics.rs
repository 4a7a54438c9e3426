//! Paired bias metrics computed from integer counts.
//!
//! `up` means the counterfactual received a higher label than the original
//! (less severe), `down` a lower one (more severe). Ratios are only formed
//! when a metric is read out.

use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::model::{Condition, Direction, PairedPrediction, Sex, TriageLabel};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionCount {
    pub n: u64,
    pub up: u64,
    pub down: u64,
}

impl DirectionCount {
    pub fn same(&self) -> u64 {
        self.n - self.up - self.down
    }

    pub fn p_up(&self) -> Option<f64> {
        (self.n > 0).then(|| self.up as f64 / self.n as f64)
    }

    pub fn p_down(&self) -> Option<f64> {
        (self.n > 0).then(|| self.down as f64 / self.n as f64)
    }
}

/// Sufficient statistics for every metric under one condition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionalCounts {
    pub m_to_f: DirectionCount,
    pub f_to_m: DirectionCount,
    /// Σ (female score − male score) over pairs.
    pub female_minus_male: i64,
}

impl DirectionalCounts {
    pub fn from_pair(direction: Direction, y_orig: TriageLabel, y_cf: TriageLabel) -> Self {
        let mut out = DirectionalCounts::default();
        out.push(direction, y_orig, y_cf);
        out
    }

    pub fn push(&mut self, direction: Direction, y_orig: TriageLabel, y_cf: TriageLabel) {
        let d = match direction {
            Direction::MToF => &mut self.m_to_f,
            Direction::FToM => &mut self.f_to_m,
        };
        d.n += 1;
        d.up += (y_cf > y_orig) as u64;
        d.down += (y_cf < y_orig) as u64;
        let (female, male) = match direction.original_sex() {
            Sex::Female => (y_orig, y_cf),
            Sex::Male => (y_cf, y_orig),
        };
        self.female_minus_male += female.0 as i64 - male.0 as i64;
    }

    pub fn from_predictions(preds: &[PairedPrediction]) -> Self {
        let mut out = DirectionalCounts::default();
        for p in preds {
            out.push(p.direction, p.y_orig, p.y_cf);
        }
        out
    }

    /// `self += k * other`
    pub fn add_scaled(&mut self, other: &DirectionalCounts, k: u64) {
        for (dst, src) in [
            (&mut self.m_to_f, &other.m_to_f),
            (&mut self.f_to_m, &other.f_to_m),
        ] {
            dst.n += k * src.n;
            dst.up += k * src.up;
            dst.down += k * src.down;
        }
        self.female_minus_male += k as i64 * other.female_minus_male;
    }

    pub fn n(&self) -> u64 {
        self.m_to_f.n + self.f_to_m.n
    }

    pub fn changed(&self) -> u64 {
        self.m_to_f.up + self.m_to_f.down + self.f_to_m.up + self.f_to_m.down
    }

    pub fn probs(&self) -> DirectionalProbs {
        DirectionalProbs {
            p_up_mf: self.m_to_f.p_up(),
            p_down_mf: self.m_to_f.p_down(),
            p_up_fm: self.f_to_m.p_up(),
            p_down_fm: self.f_to_m.p_down(),
        }
    }
}

impl Add for DirectionalCounts {
    type Output = DirectionalCounts;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for DirectionalCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.add_scaled(&rhs, 1);
    }
}

/// The four conditional change probabilities. `None` when the direction
/// has no pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionalProbs {
    pub p_up_mf: Option<f64>,
    pub p_down_mf: Option<f64>,
    pub p_up_fm: Option<f64>,
    pub p_down_fm: Option<f64>,
}

impl DirectionalProbs {
    pub fn from_values(p_up_mf: f64, p_down_mf: f64, p_up_fm: f64, p_down_fm: f64) -> Self {
        DirectionalProbs {
            p_up_mf: Some(p_up_mf),
            p_down_mf: Some(p_down_mf),
            p_up_fm: Some(p_up_fm),
            p_down_fm: Some(p_down_fm),
        }
    }

    fn all(&self) -> Result<[f64; 4]> {
        match (self.p_up_mf, self.p_down_mf, self.p_up_fm, self.p_down_fm) {
            (Some(a), Some(b), Some(c), Some(d)) => Ok([a, b, c, d]),
            _ => Err(AuditError::Undefined(
                "a flip direction has no pairs".into(),
            )),
        }
    }
}

/// Share of pairs whose predicted label changes.
pub fn pdr(preds: &[PairedPrediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(AuditError::Undefined("PDR of an empty set".into()));
    }
    let changed = preds.iter().filter(|p| p.y_orig != p.y_cf).count();
    Ok(changed as f64 / preds.len() as f64)
}

pub fn directional_probs(preds: &[PairedPrediction]) -> (DirectionalCounts, DirectionalProbs) {
    let counts = DirectionalCounts::from_predictions(preds);
    (counts, counts.probs())
}

/// `(NATS(+), NATS(−))`: F→M minus M→F, for upward and downward changes.
pub fn nats(probs: &DirectionalProbs) -> Result<(f64, f64)> {
    let [up_mf, down_mf, up_fm, down_fm] = probs.all()?;
    Ok((up_fm - up_mf, down_fm - down_mf))
}

/// `(DTS_{F|M}, DTS_{M|F})`: upward minus downward within each direction.
pub fn dts(probs: &DirectionalProbs) -> Result<(f64, f64)> {
    let [up_mf, down_mf, up_fm, down_fm] = probs.all()?;
    Ok((up_mf - down_mf, up_fm - down_fm))
}

/// Mean female-minus-male predicted score over pairs.
pub fn nmdf(preds: &[PairedPrediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(AuditError::Undefined("NMDF of an empty set".into()));
    }
    let c = DirectionalCounts::from_predictions(preds);
    Ok(c.female_minus_male as f64 / c.n() as f64)
}

/// Every reported metric, in report row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Pdr,
    PDownMf,
    PUpMf,
    PDownFm,
    PUpFm,
    DtsMGivenF,
    DtsFGivenM,
    NatsMinus,
    NatsPlus,
    Nmdf,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::Pdr,
        Metric::PDownMf,
        Metric::PUpMf,
        Metric::PDownFm,
        Metric::PUpFm,
        Metric::DtsMGivenF,
        Metric::DtsFGivenM,
        Metric::NatsMinus,
        Metric::NatsPlus,
        Metric::Nmdf,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Metric::Pdr => "pdr",
            Metric::PDownMf => "p_down_mf",
            Metric::PUpMf => "p_up_mf",
            Metric::PDownFm => "p_down_fm",
            Metric::PUpFm => "p_up_fm",
            Metric::DtsMGivenF => "dts_m_given_f",
            Metric::DtsFGivenM => "dts_f_given_m",
            Metric::NatsMinus => "nats_minus",
            Metric::NatsPlus => "nats_plus",
            Metric::Nmdf => "nmdf",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Metric::Pdr => "Pairwise Disagreement Rate (PDR)",
            Metric::PDownMf => "More severe when M→F (P↓ M→F)",
            Metric::PUpMf => "Less severe when M→F (P↑ M→F)",
            Metric::PDownFm => "More severe when F→M (P↓ F→M)",
            Metric::PUpFm => "Less severe when F→M (P↑ F→M)",
            Metric::DtsMGivenF => "Directional Triage Skew for F→M (DTS M|F)",
            Metric::DtsFGivenM => "Directional Triage Skew for M→F (DTS F|M)",
            Metric::NatsMinus => "Downward Net Asymmetric Triage Shift (NATS(−))",
            Metric::NatsPlus => "Upward Net Asymmetric Triage Shift (NATS(+))",
            Metric::Nmdf => "Net Mean Disadvantage for Females (NMDF)",
        }
    }

    /// Proportions are rendered as percentages; NMDF stays on the label scale.
    pub fn is_proportion(self) -> bool {
        self != Metric::Nmdf
    }

    /// Needs both flip directions populated.
    pub fn needs_both_directions(self) -> bool {
        matches!(
            self,
            Metric::DtsMGivenF | Metric::DtsFGivenM | Metric::NatsMinus | Metric::NatsPlus
        )
    }

    pub fn evaluate(self, c: &DirectionalCounts) -> Option<f64> {
        let n = c.n();
        if n == 0 {
            return None;
        }
        let p = c.probs();
        match self {
            Metric::Pdr => Some(c.changed() as f64 / n as f64),
            Metric::PDownMf => p.p_down_mf,
            Metric::PUpMf => p.p_up_mf,
            Metric::PDownFm => p.p_down_fm,
            Metric::PUpFm => p.p_up_fm,
            Metric::DtsFGivenM => dts(&p).ok().map(|d| d.0),
            Metric::DtsMGivenF => dts(&p).ok().map(|d| d.1),
            Metric::NatsPlus => nats(&p).ok().map(|d| d.0),
            Metric::NatsMinus => nats(&p).ok().map(|d| d.1),
            Metric::Nmdf => Some(c.female_minus_male as f64 / n as f64),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for Metric {
    type Err = AuditError;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.key() == s.trim())
            .ok_or_else(|| AuditError::Parse(format!("unknown metric {s:?}")))
    }
}

/// Point estimate with a confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Estimate {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub condition: Condition,
    pub n_pairs: u64,
    pub n_m_to_f: u64,
    pub n_f_to_m: u64,
    pub counts: DirectionalCounts,
    pub pdr: Option<Estimate>,
    pub p_down_mf: Option<Estimate>,
    pub p_up_mf: Option<Estimate>,
    pub p_down_fm: Option<Estimate>,
    pub p_up_fm: Option<Estimate>,
    pub dts_m_given_f: Option<Estimate>,
    pub dts_f_given_m: Option<Estimate>,
    pub nats_minus: Option<Estimate>,
    pub nats_plus: Option<Estimate>,
    pub nmdf: Option<Estimate>,
}

impl MetricReport {
    pub fn empty(condition: Condition, counts: DirectionalCounts) -> Self {
        MetricReport {
            condition,
            n_pairs: counts.n(),
            n_m_to_f: counts.m_to_f.n,
            n_f_to_m: counts.f_to_m.n,
            counts,
            pdr: None,
            p_down_mf: None,
            p_up_mf: None,
            p_down_fm: None,
            p_up_fm: None,
            dts_m_given_f: None,
            dts_f_given_m: None,
            nats_minus: None,
            nats_plus: None,
            nmdf: None,
        }
    }

    pub fn get(&self, metric: Metric) -> Option<Estimate> {
        match metric {
            Metric::Pdr => self.pdr,
            Metric::PDownMf => self.p_down_mf,
            Metric::PUpMf => self.p_up_mf,
            Metric::PDownFm => self.p_down_fm,
            Metric::PUpFm => self.p_up_fm,
            Metric::DtsMGivenF => self.dts_m_given_f,
            Metric::DtsFGivenM => self.dts_f_given_m,
            Metric::NatsMinus => self.nats_minus,
            Metric::NatsPlus => self.nats_plus,
            Metric::Nmdf => self.nmdf,
        }
    }

    pub fn set(&mut self, metric: Metric, value: Option<Estimate>) {
        let slot = match metric {
            Metric::Pdr => &mut self.pdr,
            Metric::PDownMf => &mut self.p_down_mf,
            Metric::PUpMf => &mut self.p_up_mf,
            Metric::PDownFm => &mut self.p_down_fm,
            Metric::PUpFm => &mut self.p_up_fm,
            Metric::DtsMGivenF => &mut self.dts_m_given_f,
            Metric::DtsFGivenM => &mut self.dts_f_given_m,
            Metric::NatsMinus => &mut self.nats_minus,
            Metric::NatsPlus => &mut self.nats_plus,
            Metric::Nmdf => &mut self.nmdf,
        };
        *slot = value;
    }
}
