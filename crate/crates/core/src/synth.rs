//! Synthetic paired populations with a known injected sex effect.
//!
//! For each pair a base label L is drawn for the male presentation. The
//! female presentation gets L+1 (less severe) with probability `delta`.
//! Each presentation then independently moves one level up or down with
//! total probability `epsilon`. Every step clamps at the scale bounds, and
//! the exact population values of all metrics follow by enumeration.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bootstrap::substream;
use crate::error::{AuditError, Result};
use crate::metrics::Metric;
use crate::model::{
    CfQuality, Condition, CounterfactualPair, DecisionRecord, Direction, PairedLabels, Sex, TriageLabel,
    TriageScale,
};
use crate::par::{self, Execution};
use crate::predictions::{PairOutcome, PredictionRow, PredictionSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionEffect {
    pub condition: Condition,
    pub delta: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub scale: TriageScale,
    /// Probability of each label of the scale, lowest label first.
    pub base_distribution: Vec<f64>,
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "half")]
    pub female_original_share: f64,
    /// Per-condition effects. Empty means a single full condition using
    /// `delta` and `epsilon`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conditions: Vec<ConditionEffect>,
}

fn half() -> f64 {
    0.5
}

impl SynthConfig {
    pub fn new(n_pairs: usize, scale: TriageScale, base_distribution: Vec<f64>, delta: f64, epsilon: f64, seed: u64) -> Self {
        SynthConfig {
            n_pairs,
            scale,
            base_distribution,
            delta,
            epsilon,
            seed,
            female_original_share: 0.5,
            conditions: Vec::new(),
        }
    }

    /// Uniform over the scale's lower labels, leaving the top label empty so
    /// an increment never clamps.
    pub fn unclamped_uniform(scale: TriageScale) -> Vec<f64> {
        let k = scale.levels();
        let mut p = vec![1.0 / (k - 1) as f64; k];
        p[k - 1] = 0.0;
        p
    }

    pub fn effects(&self) -> Vec<ConditionEffect> {
        if self.conditions.is_empty() {
            vec![ConditionEffect {
                condition: Condition::Full,
                delta: self.delta,
                epsilon: self.epsilon,
            }]
        } else {
            self.conditions.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AuditError::Config(m));
        if self.n_pairs == 0 {
            return bad("n_pairs must be positive".into());
        }
        if self.base_distribution.len() != self.scale.levels() {
            return bad(format!(
                "base distribution has {} entries, scale has {} levels",
                self.base_distribution.len(),
                self.scale.levels()
            ));
        }
        if self.base_distribution.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("base distribution entries must lie in [0, 1]".into());
        }
        let total: f64 = self.base_distribution.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("base distribution sums to {total}, not 1"));
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.female_original_share) {
            return bad("female_original_share must lie in [0, 1]".into());
        }
        let effects = self.effects();
        let mut seen = Vec::new();
        for e in &effects {
            if !unit(e.delta) || !unit(e.epsilon) {
                return bad(format!("delta and epsilon must lie in [0, 1] ({})", e.condition));
            }
            if seen.contains(&e.condition) {
                return bad(format!("condition {} listed twice", e.condition));
            }
            seen.push(e.condition);
        }
        Ok(())
    }
}

fn clamp(scale: &TriageScale, v: i64) -> u8 {
    v.clamp(scale.min as i64, scale.max as i64) as u8
}

struct Draw {
    direction: Direction,
    base: u8,
    /// (female, male) per effect, in `effects()` order.
    labels: Vec<(u8, u8)>,
}

fn draw_pair(cfg: &SynthConfig, cumulative: &[f64], effects: &[ConditionEffect], i: usize) -> Draw {
    let mut rng = substream(cfg.seed, i as u64);
    let direction = if rng.random::<f64>() < cfg.female_original_share {
        Direction::FToM
    } else {
        Direction::MToF
    };
    let u: f64 = rng.random();
    let idx = cumulative.iter().position(|c| u < *c).unwrap_or(cumulative.len() - 1);
    let base = cfg.scale.min + idx as u8;
    let s = &cfg.scale;
    let noise = |rng: &mut rand_chacha::ChaCha8Rng, eps: f64, v: u8| -> u8 {
        let u: f64 = rng.random();
        if u < eps / 2.0 {
            clamp(s, v as i64 - 1)
        } else if u < eps {
            clamp(s, v as i64 + 1)
        } else {
            v
        }
    };
    let labels = effects
        .iter()
        .map(|e| {
            let female = if rng.random::<f64>() < e.delta {
                clamp(s, base as i64 + 1)
            } else {
                base
            };
            let m = noise(&mut rng, e.epsilon, base);
            let f = noise(&mut rng, e.epsilon, female);
            (f, m)
        })
        .collect();
    Draw {
        direction,
        base,
        labels,
    }
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = p
        .iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect();
    // Guard against rounding in the last bucket.
    if let Some(last) = out.iter().rposition(|_| true) {
        out[last] = f64::INFINITY;
    }
    out
}

fn pair_id(i: usize) -> String {
    format!("syn{i:07}")
}

fn outcome(draw: &Draw, i: usize) -> PairOutcome {
    let labels = draw
        .labels
        .iter()
        .map(|&(f, m)| {
            let (o, c) = match draw.direction {
                Direction::MToF => (m, f),
                Direction::FToM => (f, m),
            };
            PairedLabels {
                y_orig: TriageLabel(o),
                y_cf: TriageLabel(c),
            }
        })
        .collect();
    PairOutcome {
        pair_id: pair_id(i),
        direction: draw.direction,
        reference: Some(TriageLabel(draw.base)),
        labels,
    }
}

fn ordered(cfg: &SynthConfig) -> (Vec<ConditionEffect>, Vec<usize>) {
    let effects = cfg.effects();
    let mut order: Vec<usize> = (0..effects.len()).collect();
    order.sort_by_key(|&k| effects[k].condition);
    (effects, order)
}

/// Predictions only, without records. Deterministic for the seed, in
/// either execution mode.
pub fn simulate(cfg: &SynthConfig, exec: Execution) -> Result<PredictionSet> {
    cfg.validate()?;
    let cum = cumulative(&cfg.base_distribution);
    let (effects, order) = ordered(cfg);
    let pairs = par::map_range(cfg.n_pairs, exec, |i| {
        let mut o = outcome(&draw_pair(cfg, &cum, &effects, i), i);
        o.labels = order.iter().map(|&k| o.labels[k]).collect();
        o
    });
    PredictionSet::new(cfg.scale, order.iter().map(|&k| effects[k].condition).collect(), pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub condition: Condition,
    pub p_female_higher: f64,
    pub p_female_lower: f64,
    /// Population values keyed by metric key.
    pub metrics: BTreeMap<String, f64>,
}

impl SynthTruth {
    pub fn get(&self, metric: Metric) -> f64 {
        self.metrics[metric.key()]
    }
}

fn noise_outcomes(scale: &TriageScale, eps: f64, v: u8) -> [(u8, f64); 3] {
    [
        (clamp(scale, v as i64 - 1), eps / 2.0),
        (v, 1.0 - eps),
        (clamp(scale, v as i64 + 1), eps / 2.0),
    ]
}

/// Exact population metrics by enumerating base label, effect and noise.
pub fn closed_form_truth(cfg: &SynthConfig) -> Result<Vec<SynthTruth>> {
    cfg.validate()?;
    let s = cfg.scale;
    let (effects, order) = ordered(cfg);
    let mut out = Vec::new();
    for &k in &order {
        let e = effects[k];
        let (mut higher, mut lower, mut mean) = (0.0, 0.0, 0.0);
        for (idx, &p) in cfg.base_distribution.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let base = s.min + idx as u8;
            for (female, pe) in [(clamp(&s, base as i64 + 1), e.delta), (base, 1.0 - e.delta)] {
                for (m, pm) in noise_outcomes(&s, e.epsilon, base) {
                    for (f, pf) in noise_outcomes(&s, e.epsilon, female) {
                        let w = p * pe * pm * pf;
                        if w == 0.0 {
                            continue;
                        }
                        if f > m {
                            higher += w;
                        } else if f < m {
                            lower += w;
                        }
                        mean += w * (f as f64 - m as f64);
                    }
                }
            }
        }
        let (a, b) = (higher, lower);
        let values = [
            (Metric::Pdr, a + b),
            (Metric::PDownMf, b),
            (Metric::PUpMf, a),
            (Metric::PDownFm, a),
            (Metric::PUpFm, b),
            (Metric::DtsMGivenF, b - a),
            (Metric::DtsFGivenM, a - b),
            (Metric::NatsMinus, a - b),
            (Metric::NatsPlus, b - a),
            (Metric::Nmdf, mean),
        ];
        out.push(SynthTruth {
            condition: e.condition,
            p_female_higher: a,
            p_female_lower: b,
            metrics: values.iter().map(|(m, v)| (m.key().to_string(), *v)).collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub pairs: Vec<CounterfactualPair>,
    pub rows: Vec<PredictionRow>,
    pub predictions: PredictionSet,
    pub truth: Vec<SynthTruth>,
}

fn record(i: usize, sex: Sex, base: u8, role: &str) -> DecisionRecord {
    let mut r = DecisionRecord::new(format!("{}{}", pair_id(i), role))
        .with_sex(sex)
        .with_age(18.0 + (i % 73) as f64)
        .with_texts(
            "synthetic",
            &format!("Synthetic presentation {i}, reference level {base}."),
            "",
        )
        .with_tabular("heart_rate", 60 + (i % 50) as i64);
    r.label = Some(base);
    r
}

/// Pairs, table-predictor rows and exact truth for one configuration.
pub fn generate(cfg: &SynthConfig, exec: Execution) -> Result<SynthOutput> {
    let predictions = simulate(cfg, exec)?;
    let truth = closed_form_truth(cfg)?;
    let pairs = par::map_slice(&predictions.pairs, exec, |p| {
        let i: usize = p.pair_id[3..].parse().expect("synthetic id");
        let base = p.reference.expect("synthetic reference").0;
        let sex = p.direction.original_sex();
        let original = record(i, sex, base, "");
        let mut counterfactual = original.clone();
        counterfactual.sex = Some(sex.flip());
        counterfactual.id = format!("{}:cf", original.id);
        CounterfactualPair::new(original, counterfactual, CfQuality::Correct).expect("valid synthetic pair")
    });
    Ok(SynthOutput {
        pairs,
        rows: predictions.to_rows(),
        predictions,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::DirectionalCounts;

    fn uniform_cfg(n: usize, delta: f64, eps: f64, seed: u64) -> SynthConfig {
        SynthConfig::new(n, TriageScale::BORDEAUX, SynthConfig::unclamped_uniform(TriageScale::BORDEAUX), delta, eps, seed)
    }

    #[test]
    fn no_effect_no_noise_is_all_zero() {
        let cfg = uniform_cfg(500, 0.0, 0.0, 1);
        for t in closed_form_truth(&cfg).unwrap() {
            for m in Metric::ALL {
                assert_eq!(t.get(m), 0.0, "{m}");
            }
        }
        let set = simulate(&cfg, Execution::Parallel).unwrap();
        let c = DirectionalCounts::from_predictions(&set.paired(Condition::Full).unwrap());
        assert_eq!(c.changed(), 0);
    }

    #[test]
    fn injected_delta_closed_form() {
        let t = &closed_form_truth(&uniform_cfg(10, 0.021, 0.0, 1)).unwrap()[0];
        assert!((t.get(Metric::Nmdf) - 0.021).abs() < 1e-15);
        assert!((t.get(Metric::DtsFGivenM) - 0.021).abs() < 1e-15);
        assert!((t.get(Metric::DtsMGivenF) + 0.021).abs() < 1e-15);
        assert!((t.get(Metric::NatsMinus) - 0.021).abs() < 1e-15);
    }

    #[test]
    fn symmetric_noise_truth() {
        // Without clamping, PDR = 1 - P(same shift) = 1 - [(1-e)^2 + 2 (e/2)^2].
        let cfg = SynthConfig::new(10, TriageScale::BORDEAUX, vec![0.0, 0.5, 0.5, 0.0], 0.0, 0.05, 1);
        let t = &closed_form_truth(&cfg).unwrap()[0];
        let e: f64 = 0.05;
        let expected = 1.0 - ((1.0 - e).powi(2) + 2.0 * (e / 2.0).powi(2));
        assert!((t.get(Metric::Pdr) - expected).abs() < 1e-12);
        assert!(t.get(Metric::Nmdf).abs() < 1e-15);
        assert!(t.get(Metric::NatsPlus).abs() < 1e-15);
    }

    #[test]
    fn clamping_is_reflected_in_truth() {
        let cfg = SynthConfig::new(10, TriageScale::BORDEAUX, vec![0.0, 0.0, 0.0, 1.0], 0.5, 0.0, 1);
        let t = &closed_form_truth(&cfg).unwrap()[0];
        assert_eq!(t.get(Metric::Nmdf), 0.0);
        assert_eq!(t.get(Metric::Pdr), 0.0);
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let cfg = uniform_cfg(2000, 0.05, 0.02, 11);
        let a = simulate(&cfg, Execution::Parallel).unwrap();
        let b = simulate(&cfg, Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn delta_is_recovered() {
        let cfg = uniform_cfg(20_000, 0.021, 0.0, 5);
        let set = simulate(&cfg, Execution::Parallel).unwrap();
        let diffs: Vec<f64> = (0..set.len())
            .map(|i| {
                let (f, m) = set.pairs[i].female_male(0);
                f.0 as f64 - m.0 as f64
            })
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 0.021).abs() <= 3.0 * (var / n).sqrt(), "{mean}");
    }

    #[test]
    fn generate_emits_pairs_rows_and_truth() {
        let mut cfg = uniform_cfg(50, 0.1, 0.0, 3);
        cfg.conditions = vec![
            ConditionEffect { condition: Condition::TabIso, delta: 0.0, epsilon: 0.0 },
            ConditionEffect { condition: Condition::Full, delta: 0.1, epsilon: 0.0 },
        ];
        let out = generate(&cfg, Execution::Parallel).unwrap();
        assert_eq!(out.pairs.len(), 50);
        assert_eq!(out.rows.len(), 200);
        assert_eq!(out.predictions.conditions, vec![Condition::Full, Condition::TabIso]);
        assert_eq!(out.truth[0].condition, Condition::Full);
        let back = PredictionSet::from_rows(&out.rows, cfg.scale, None).unwrap();
        assert_eq!(back.pairs.len(), 50);
        assert!(out.pairs.iter().all(|p| p.original.tabular == p.counterfactual.tabular));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = uniform_cfg(10, 0.0, 0.0, 1);
        cfg.base_distribution = vec![0.5, 0.6, 0.0, 0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = uniform_cfg(10, 1.5, 0.0, 1);
        assert!(cfg.validate().is_err());
        cfg.delta = 0.1;
        cfg.base_distribution.pop();
        assert!(cfg.validate().is_err());
    }
}
