//! Paired percentile bootstrap.
//!
//! The resampling unit is the whole pair: both presentations and every
//! condition of a pair are drawn together. Every metric is a function of
//! how many times each distinct pair *type* (direction plus the label pair
//! under each condition) appears, so a resample is fully described by a
//! multiplicity per type. Two samplers produce that multiplicity vector:
//!
//! * `Indices` draws `N` pair indices uniformly with replacement.
//! * `Multinomial` draws the type multiplicities directly from
//!   `Multinomial(N, type frequencies)` via conditional binomials, which is
//!   the same distribution at `O(types)` cost per resample.
//!
//! Iteration `i` always uses substream `i` of one ChaCha8 seed, so parallel
//! and sequential runs agree bit for bit.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::metrics::{DirectionalCounts, Estimate, Metric};
use crate::model::{Condition, Direction, PairedLabels};
use crate::par::{self, Execution};
use crate::predictions::PredictionSet;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    #[default]
    Percentile,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    Indices,
    #[default]
    Multinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub method: CiMethod,
    #[serde(default)]
    pub resampling: Resampling,
    #[serde(default, skip_serializing)]
    pub execution: Execution,
}

fn default_iterations() -> usize {
    1000
}

fn default_confidence() -> f64 {
    0.95
}

/// Redraw budget per iteration before giving up on a statistic.
const MAX_REDRAWS_PER_ITERATION: usize = 1000;

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            iterations: default_iterations(),
            confidence: default_confidence(),
            seed: 0,
            method: CiMethod::Percentile,
            resampling: Resampling::Multinomial,
            execution: Execution::Parallel,
        }
    }
}

impl BootstrapConfig {
    pub fn with_seed(seed: u64) -> Self {
        BootstrapConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(AuditError::Config("bootstrap needs at least one iteration".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(AuditError::Config(format!(
                "confidence must lie in (0, 1), got {}",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// Distinct pair types of a prediction set and their sufficient statistics.
#[derive(Debug, Clone)]
pub struct PairTypes {
    /// Per-condition counts contributed by one pair of each type.
    contributions: Vec<Vec<DirectionalCounts>>,
    /// Number of pairs of each type.
    frequencies: Vec<u64>,
    /// Type of each pair, in pair order.
    pair_type: Vec<u32>,
    conditions: Vec<Condition>,
}

impl PairTypes {
    pub fn new(preds: &PredictionSet) -> Self {
        let mut index: HashMap<(Direction, Vec<PairedLabels>), u32> = HashMap::new();
        let mut keys: Vec<(Direction, Vec<PairedLabels>)> = Vec::new();
        let mut frequencies = Vec::new();
        let mut pair_type = Vec::with_capacity(preds.len());
        for p in &preds.pairs {
            let key = (p.direction, p.labels.clone());
            let t = *index.entry(key.clone()).or_insert_with(|| {
                keys.push(key);
                frequencies.push(0);
                (keys.len() - 1) as u32
            });
            frequencies[t as usize] += 1;
            pair_type.push(t);
        }
        let contributions = keys
            .iter()
            .map(|(d, labels)| {
                labels
                    .iter()
                    .map(|l| DirectionalCounts::from_pair(*d, l.y_orig, l.y_cf))
                    .collect()
            })
            .collect();
        PairTypes {
            contributions,
            frequencies,
            pair_type,
            conditions: preds.conditions.clone(),
        }
    }

    pub fn n_pairs(&self) -> u64 {
        self.pair_type.len() as u64
    }

    pub fn n_types(&self) -> usize {
        self.frequencies.len()
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    /// Per-condition counts for a multiplicity vector.
    pub fn counts(&self, multiplicity: &[u64]) -> Vec<DirectionalCounts> {
        let mut out = vec![DirectionalCounts::default(); self.conditions.len()];
        for (t, &m) in multiplicity.iter().enumerate() {
            if m == 0 {
                continue;
            }
            for (acc, c) in out.iter_mut().zip(&self.contributions[t]) {
                acc.add_scaled(c, m);
            }
        }
        out
    }

    pub fn observed(&self) -> Vec<DirectionalCounts> {
        self.counts(&self.frequencies)
    }

    /// Draw one resample's type multiplicities.
    pub fn resample<R: Rng>(&self, rng: &mut R, how: Resampling) -> Vec<u64> {
        let n = self.n_pairs();
        let mut m = vec![0u64; self.n_types()];
        match how {
            Resampling::Indices => {
                for _ in 0..n {
                    let i = rng.random_range(0..n as usize);
                    m[self.pair_type[i] as usize] += 1;
                }
            }
            Resampling::Multinomial => {
                let mut remaining_n = n;
                let mut remaining_mass = n;
                for (t, &f) in self.frequencies.iter().enumerate() {
                    if remaining_n == 0 {
                        break;
                    }
                    if f == remaining_mass {
                        m[t] = remaining_n;
                        break;
                    }
                    let p = f as f64 / remaining_mass as f64;
                    let k = Binomial::new(remaining_n, p)
                        .expect("probability within [0, 1]")
                        .sample(rng);
                    m[t] = k;
                    remaining_n -= k;
                    remaining_mass -= f;
                }
            }
        }
        m
    }
}

/// RNG for bootstrap iteration `iteration`.
pub fn substream(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let rank = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentile interval of replicate values.
pub fn percentile_interval(replicates: &mut [f64], confidence: f64) -> (f64, f64) {
    replicates.sort_by(|a, b| a.total_cmp(b));
    let alpha = 1.0 - confidence;
    (
        quantile_sorted(replicates, alpha / 2.0),
        quantile_sorted(replicates, 1.0 - alpha / 2.0),
    )
}

/// Bootstrap output for every (condition, metric) that is defined on the
/// observed data.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub conditions: Vec<Condition>,
    pub observed: Vec<DirectionalCounts>,
    /// `estimates[c][m]`, indexed like `conditions` and `Metric::ALL`.
    pub estimates: Vec<Vec<Option<Estimate>>>,
    /// Resamples thrown away because a requested statistic was undefined.
    pub redraws: u64,
}

impl BootstrapResult {
    pub fn estimate(&self, condition: Condition, metric: Metric) -> Option<Estimate> {
        let c = self.conditions.iter().position(|x| *x == condition)?;
        let m = Metric::ALL.iter().position(|x| *x == metric)?;
        self.estimates[c][m]
    }
}

/// Joint bootstrap of `metrics` under every condition of `preds`.
pub fn bootstrap_all(
    preds: &PredictionSet,
    metrics: &[Metric],
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult> {
    cfg.validate()?;
    if preds.is_empty() {
        return Err(AuditError::Undefined("bootstrap of an empty prediction set".into()));
    }
    let types = PairTypes::new(preds);
    let observed = types.observed();

    // (condition slot, metric) pairs that are defined on the full sample.
    let mut targets: Vec<(usize, Metric)> = Vec::new();
    for (c, counts) in observed.iter().enumerate() {
        for &m in metrics {
            if m.evaluate(counts).is_some() {
                targets.push((c, m));
            }
        }
    }

    let draws = par::map_range(cfg.iterations, cfg.execution, |i| {
        let mut rng = substream(cfg.seed, i as u64);
        let mut redraws = 0u64;
        loop {
            let m = types.resample(&mut rng, cfg.resampling);
            let counts = types.counts(&m);
            let values: Option<Vec<f64>> = targets
                .iter()
                .map(|(c, metric)| metric.evaluate(&counts[*c]))
                .collect();
            match values {
                Some(v) => return Ok((v, redraws)),
                None if (redraws as usize) < MAX_REDRAWS_PER_ITERATION => redraws += 1,
                None => {
                    return Err(AuditError::Undefined(format!(
                        "statistic undefined on {MAX_REDRAWS_PER_ITERATION} consecutive resamples"
                    )))
                }
            }
        }
    });

    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.iterations); targets.len()];
    let mut redraws = 0;
    for d in draws {
        let (values, r) = d?;
        redraws += r;
        for (col, v) in columns.iter_mut().zip(values) {
            col.push(v);
        }
    }

    let mut estimates = vec![vec![None; Metric::ALL.len()]; observed.len()];
    for ((c, metric), mut col) in targets.into_iter().zip(columns) {
        let point = metric.evaluate(&observed[c]).expect("target defined");
        let (lower, upper) = percentile_interval(&mut col, cfg.confidence);
        let mi = Metric::ALL.iter().position(|x| *x == metric).unwrap();
        estimates[c][mi] = Some(Estimate { point, lower, upper });
    }

    Ok(BootstrapResult {
        conditions: preds.conditions.clone(),
        observed,
        estimates,
        redraws,
    })
}

/// Bootstrap one statistic under one condition.
pub fn bootstrap_ci(
    preds: &PredictionSet,
    condition: Condition,
    metric: Metric,
    cfg: &BootstrapConfig,
) -> Result<(Estimate, u64)> {
    let single = preds.only(condition)?;
    let res = bootstrap_all(&single, &[metric], cfg)?;
    let est = res.estimates[0][Metric::ALL.iter().position(|x| *x == metric).unwrap()]
        .ok_or_else(|| AuditError::Undefined(format!("{metric} undefined under {condition}")))?;
    Ok((est, res.redraws))
}
