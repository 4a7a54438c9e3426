//! Impact projection, predictor comparison, run manifests and rendering of
//! metric and stratum reports as JSON, markdown and plot data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audit::AuditReport;
use crate::error::{AuditError, Result};
use crate::io;
use crate::metrics::{Estimate, Metric, MetricReport};
use crate::model::Condition;
use crate::stratified::StratumTable;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_SCHEMA: &str = "cf-audit/manifest/v1";
pub const COMPARISON_SCHEMA: &str = "cf-audit/comparison/v1";
pub const STRATA_SCHEMA: &str = "cf-audit/strata/v1";
pub const PLOT_SCHEMA: &str = "cf-audit/plot-data/v1";

// ---- impact ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactInput {
    pub annual_visits: f64,
    pub share: f64,
    pub differential: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactProjection {
    pub input: ImpactInput,
    pub raw: f64,
    /// Nearest whole number of affected visits.
    pub count: u64,
    pub two_significant: f64,
}

pub fn round_significant(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let mag = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(mag + 1 - digits);
    (x / scale).round() * scale
}

/// Visits per year affected by a differential.
pub fn project_impact(input: ImpactInput) -> Result<ImpactProjection> {
    let ok = |x: f64| x.is_finite() && x >= 0.0;
    if !ok(input.annual_visits) || !ok(input.share) || !ok(input.differential) {
        return Err(AuditError::Config("impact inputs must be finite and non-negative".into()));
    }
    if input.share > 1.0 || input.differential > 1.0 {
        return Err(AuditError::Config("share and differential are ratios at most 1".into()));
    }
    let raw = input.annual_visits * input.share * input.differential;
    Ok(ImpactProjection {
        input,
        raw,
        count: raw.round() as u64,
        two_significant: round_significant(raw.round(), 2),
    })
}

// ---- comparison ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapStatus {
    Overlap,
    /// The intervals share only an endpoint.
    Borderline,
    Disjoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroStatus {
    ExcludesZero,
    TouchesZero,
    IncludesZero,
}

pub const TOUCH_TOLERANCE: f64 = 1e-9;

pub fn overlap_status(a: &Estimate, b: &Estimate, tol: f64) -> OverlapStatus {
    let gap = a.lower.max(b.lower) - a.upper.min(b.upper);
    if gap > tol {
        OverlapStatus::Disjoint
    } else if gap >= -tol {
        OverlapStatus::Borderline
    } else {
        OverlapStatus::Overlap
    }
}

pub fn zero_status(e: &Estimate, tol: f64) -> ZeroStatus {
    if e.lower.abs() <= tol || e.upper.abs() <= tol {
        ZeroStatus::TouchesZero
    } else if e.lower < 0.0 && e.upper > 0.0 {
        ZeroStatus::IncludesZero
    } else {
        ZeroStatus::ExcludesZero
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub condition: Condition,
    pub metric: Metric,
    pub a: Option<Estimate>,
    pub b: Option<Estimate>,
    /// `a.point - b.point`.
    pub delta: Option<f64>,
    pub overlap: Option<OverlapStatus>,
    pub zero_a: Option<ZeroStatus>,
    pub zero_b: Option<ZeroStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema: String,
    pub label_a: String,
    pub label_b: String,
    pub index_set_size: usize,
    pub index_set_digest: String,
    pub rows: Vec<ComparisonRow>,
}

pub const NET_EFFECTS: [Metric; 5] = [
    Metric::DtsMGivenF,
    Metric::DtsFGivenM,
    Metric::NatsMinus,
    Metric::NatsPlus,
    Metric::Nmdf,
];

/// Side-by-side net effects of two audits of the same index set.
pub fn compare_predictors(
    label_a: &str,
    a: &AuditReport,
    label_b: &str,
    b: &AuditReport,
    tol: f64,
) -> Result<ComparisonReport> {
    if a.index_set_digest != b.index_set_digest || a.index_set_size != b.index_set_size {
        return Err(AuditError::IndexSetMismatch(
            "the two audits were run on different pair index sets".into(),
        ));
    }
    let conds_a: Vec<Condition> = a.reports.iter().map(|r| r.condition).collect();
    let conds_b: Vec<Condition> = b.reports.iter().map(|r| r.condition).collect();
    if conds_a != conds_b {
        return Err(AuditError::IndexSetMismatch(format!(
            "conditions differ: {conds_a:?} vs {conds_b:?}"
        )));
    }
    let mut rows = Vec::new();
    for (ra, rb) in a.reports.iter().zip(&b.reports) {
        for m in NET_EFFECTS {
            let (ea, eb) = (ra.get(m), rb.get(m));
            let both = ea.zip(eb);
            rows.push(ComparisonRow {
                condition: ra.condition,
                metric: m,
                a: ea,
                b: eb,
                delta: both.map(|(x, y)| x.point - y.point),
                overlap: both.map(|(x, y)| overlap_status(&x, &y, tol)),
                zero_a: ea.map(|e| zero_status(&e, tol)),
                zero_b: eb.map(|e| zero_status(&e, tol)),
            });
        }
    }
    Ok(ComparisonReport {
        schema: COMPARISON_SCHEMA.to_string(),
        label_a: label_a.to_string(),
        label_b: label_b.to_string(),
        index_set_size: a.index_set_size,
        index_set_digest: a.index_set_digest.clone(),
        rows,
    })
}

// ---- manifests ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(role: &str, path: &Path) -> Result<Self> {
        Ok(InputDigest {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: io::sha256_file(path)?,
        })
    }
}

/// Provenance of one pipeline stage. The id covers only deterministic
/// fields (no paths or clocks), so reruns on the same inputs share it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRunManifest {
    pub schema: String,
    pub manifest_id: String,
    pub stage: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub counts: BTreeMap<String, u64>,
    pub started_at: String,
    pub finished_at: String,
}

fn now_rfc3339() -> String {
    let d = SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .unwrap_or_default();
    chrono::DateTime::from_timestamp(d.as_secs() as i64, d.subsec_nanos())
        .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
        .unwrap_or_default()
}

impl AuditRunManifest {
    /// Start a manifest; `config` is hashed from its canonical JSON.
    pub fn begin<C: Serialize>(stage: &str, seed: u64, config: &C, inputs: Vec<InputDigest>) -> Result<Self> {
        let config_hash = io::sha256_hex(serde_json::to_string(config)?.as_bytes());
        let identity = json!({
            "stage": stage,
            "tool_version": TOOL_VERSION,
            "seed": seed,
            "config_hash": config_hash,
            "inputs": inputs.iter().map(|i| json!([i.role, i.sha256])).collect::<Vec<_>>(),
        });
        let id = io::sha256_hex(identity.to_string().as_bytes());
        Ok(AuditRunManifest {
            schema: MANIFEST_SCHEMA.to_string(),
            manifest_id: id[..16].to_string(),
            stage: stage.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            seed,
            config_hash,
            inputs,
            outputs: Vec::new(),
            counts: BTreeMap::new(),
            started_at: now_rfc3339(),
            finished_at: String::new(),
        })
    }

    pub fn count(&mut self, key: &str, n: u64) -> &mut Self {
        self.counts.insert(key.to_string(), n);
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn finish(&mut self) -> &mut Self {
        self.finished_at = now_rfc3339();
        self
    }
}

// ---- strata ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataReport {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_id: Option<String>,
    pub condition: Condition,
    pub skipped_without_reference: usize,
    pub strata: Vec<StratumTable>,
}

impl StrataReport {
    pub fn new(condition: Condition, strata: Vec<StratumTable>, skipped: usize) -> Self {
        StrataReport {
            schema: STRATA_SCHEMA.to_string(),
            manifest_id: None,
            condition,
            skipped_without_reference: skipped,
            strata,
        }
    }
}

// ---- formatting ----

/// Fixed-point text without a negative zero.
pub fn fixed(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn signed(x: f64, decimals: usize) -> String {
    let s = fixed(x, decimals);
    if x > 0.0 && s.chars().any(|c| c.is_ascii_digit() && c != '0') {
        format!("+{s}")
    } else {
        s
    }
}

pub fn format_p_value(p: f64) -> String {
    if p < 1e-15 {
        "<1e-15".to_string()
    } else if p < 1e-3 {
        format!("{p:.1e}")
    } else {
        format!("{p:.4}")
    }
}

/// Point and bracketed interval; proportions as percentages.
pub fn format_estimate(metric: Metric, e: Option<Estimate>, precision: usize) -> String {
    let Some(e) = e else {
        return "n/a".to_string();
    };
    if metric.is_proportion() {
        let p = |x: f64| format!("{}%", fixed(100.0 * x, precision));
        format!("{} [{}–{}]", p(e.point), p(e.lower), p(e.upper))
    } else {
        let d = precision + 2;
        format!("{} [{}–{}]", fixed(e.point, d), fixed(e.lower, d), fixed(e.upper, d))
    }
}

/// Display precision (decimals of a percentage) of a dataset profile.
pub fn profile_precision(profile: &str) -> usize {
    match profile {
        "mimic" => 2,
        _ => 1,
    }
}

pub struct Column<'a> {
    pub group: String,
    pub report: &'a MetricReport,
}

/// Side-by-side metric table, one column per (group, condition).
pub fn metrics_markdown(columns: &[Column<'_>], precision: usize) -> String {
    let mut out = String::new();
    let groups: Vec<&str> = columns.iter().map(|c| c.group.as_str()).collect();
    let distinct_groups = {
        let mut g = groups.clone();
        g.dedup();
        g.len()
    };
    out.push_str("| Metric |");
    for c in columns {
        if distinct_groups > 1 || !c.group.is_empty() {
            let _ = write!(out, " {} {} |", c.group, c.report.condition.title());
        } else {
            let _ = write!(out, " {} |", c.report.condition.title());
        }
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in columns {
        out.push_str("---|");
    }
    out.push('\n');
    let section = |out: &mut String, name: &str| {
        let _ = write!(out, "| *{name}* |");
        for _ in columns {
            out.push_str(" |");
        }
        out.push('\n');
    };
    for m in Metric::ALL {
        match m {
            Metric::PDownMf => section(&mut out, "Directional Probabilities"),
            Metric::DtsMGivenF => section(&mut out, "Net Effects"),
            _ => {}
        }
        let _ = write!(out, "| {} |", m.title());
        for c in columns {
            let _ = write!(out, " {} |", format_estimate(m, c.report.get(m), precision));
        }
        out.push('\n');
    }
    out.push_str("| Pairs (M→F / F→M) |");
    for c in columns {
        let _ = write!(
            out,
            " {} ({} / {}) |",
            thousands(c.report.n_pairs),
            thousands(c.report.n_m_to_f),
            thousands(c.report.n_f_to_m)
        );
    }
    out.push('\n');
    out
}

fn pct(x: Option<f64>, precision: usize) -> String {
    x.map(|v| format!("{}%", fixed(v, precision))).unwrap_or_else(|| "n/a".into())
}

/// Discordance percentages and odds ratios per stratum.
pub fn strata_markdown(report: &StrataReport, precision: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Discordant predictions by triage level and sex ({})\n", report.condition.title());
    out.push_str("| Triage Score | cf>orig (M) | cf<orig (M) | cf>orig (F) | cf<orig (F) | Δ M-F cf> | Δ M-F cf< |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for s in &report.strata {
        let delta = |m: Option<f64>, f: Option<f64>| match (m, f) {
            (Some(m), Some(f)) => signed(m - f, precision),
            _ => "n/a".into(),
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            s.label,
            pct(s.pct_up_male, precision),
            pct(s.pct_down_male, precision),
            pct(s.pct_up_female, precision),
            pct(s.pct_down_female, precision),
            delta(s.pct_up_male, s.pct_up_female),
            delta(s.pct_down_male, s.pct_down_female),
        );
    }
    out.push('\n');
    let _ = writeln!(out, "Odds ratios for increased severity (cf<orig) by triage level ({})\n", report.condition.title());
    out.push_str("| Triage Sc. | cf<orig (M) | cf≥orig (M) | cf<orig (F) | cf≥orig (F) | OR (M/F) | 95% CI | p-value |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for s in &report.strata {
        let (or, ci) = match s.odds_ratio {
            Some(o) => (fixed(o.value, 2), format!("[{}–{}]", fixed(o.lower, 2), fixed(o.upper, 2))),
            None => ("n/a".into(), "n/a".into()),
        };
        let p = match (&s.suppressed, s.p_value) {
            (None, Some(p)) => format_p_value(p),
            _ => "n/a".into(),
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            s.label,
            thousands(s.a),
            thousands(s.b),
            thousands(s.c),
            thousands(s.d),
            or,
            ci,
            p
        );
    }
    out
}

pub fn comparison_markdown(c: &ComparisonReport, precision: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| Condition | Metric | {} | {} | Δ | CI overlap |",
        c.label_a, c.label_b
    );
    out.push_str("|---|---|---|---|---|---|\n");
    for r in &c.rows {
        let delta = match r.delta {
            Some(d) if r.metric.is_proportion() => format!("{} pp", signed(100.0 * d, precision + 1)),
            Some(d) => signed(d, precision + 2),
            None => "n/a".into(),
        };
        let status = match r.overlap {
            Some(OverlapStatus::Overlap) => "overlap",
            Some(OverlapStatus::Borderline) => "borderline",
            Some(OverlapStatus::Disjoint) => "disjoint",
            None => "n/a",
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.condition.title(),
            r.metric.title(),
            format_estimate(r.metric, r.a, precision),
            format_estimate(r.metric, r.b, precision),
            delta,
            status
        );
    }
    out
}

/// metric key -> condition -> point and interval.
pub fn plot_data(groups: &[(String, &AuditReport)]) -> Value {
    let mut metrics = serde_json::Map::new();
    for m in Metric::ALL {
        let mut per = serde_json::Map::new();
        for (group, audit) in groups {
            for r in &audit.reports {
                let key = if group.is_empty() {
                    r.condition.as_str().to_string()
                } else {
                    format!("{group}/{}", r.condition.as_str())
                };
                let v = match r.get(m) {
                    Some(e) => json!({"point": e.point, "lower": e.lower, "upper": e.upper}),
                    None => Value::Null,
                };
                per.insert(key, v);
            }
        }
        metrics.insert(m.key().to_string(), Value::Object(per));
    }
    json!({
        "schema": PLOT_SCHEMA,
        "proportion_metrics": Metric::ALL.iter().filter(|m| m.is_proportion()).map(|m| m.key()).collect::<Vec<_>>(),
        "metrics": metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Markdown,
}

/// Rendered report files, all derived from the same inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub json: String,
    pub markdown: String,
    pub plot: String,
}

fn pretty(v: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// Render audits (each a labelled group of conditions) and optional strata.
pub fn emit_report(
    groups: &[(String, AuditReport)],
    strata: Option<&StrataReport>,
    precision: usize,
) -> Result<ReportBundle> {
    if groups.is_empty() {
        return Err(AuditError::Config("no audit reports to render".into()));
    }
    let json_value = json!({
        "schema": "cf-audit/report/v1",
        "audits": groups.iter().map(|(g, a)| json!({"group": g, "audit": a})).collect::<Vec<_>>(),
        "strata": strata,
    });
    let columns: Vec<Column<'_>> = groups
        .iter()
        .flat_map(|(g, a)| a.reports.iter().map(move |r| Column { group: g.clone(), report: r }))
        .collect();
    let mut md = String::from("# Counterfactual bias audit\n\n");
    md.push_str(&metrics_markdown(&columns, precision));
    let iterations: Vec<String> = groups
        .iter()
        .map(|(_, a)| format!("{} bootstrap iterations, {:.0}% percentile intervals, seed {}", a.bootstrap.iterations, 100.0 * a.bootstrap.confidence, a.bootstrap.seed))
        .collect();
    let _ = write!(md, "\nBrackets: {}.\n", iterations.join("; "));
    for (g, a) in groups {
        for w in &a.warnings {
            let _ = writeln!(md, "\n> warning ({}): {w}", if g.is_empty() { "audit" } else { g });
        }
    }
    if let Some(s) = strata {
        md.push('\n');
        md.push_str(&strata_markdown(s, precision));
    }
    let borrowed: Vec<(String, &AuditReport)> = groups.iter().map(|(g, a)| (g.clone(), a)).collect();
    Ok(ReportBundle {
        json: pretty(&json_value)?,
        markdown: md,
        plot: pretty(&plot_data(&borrowed))?,
    })
}

impl ReportBundle {
    /// Write `<stem>.json`, `<stem>.md` and `<stem>.plot.json` into `dir`.
    /// On any failure files already written by this call are removed.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let files = [
            (dir.join(format!("{stem}.json")), &self.json),
            (dir.join(format!("{stem}.md")), &self.markdown),
            (dir.join(format!("{stem}.plot.json")), &self.plot),
        ];
        let mut written = Vec::new();
        for (path, content) in &files {
            if let Err(e) = io::write_atomic(path, content.as_bytes()) {
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                return Err(e);
            }
            written.push(path.clone());
        }
        Ok(written)
    }
}
