use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use cf_audit_core::audit::{audit as run_audit, AuditReport};
use cf_audit_core::bootstrap::Resampling;
use cf_audit_core::counterfactual::{generate_pairs, sample_for_review, Checkpoint};
use cf_audit_core::ingest::{filter_lines, stratified_split};
use cf_audit_core::io;
use cf_audit_core::lexicon::Language;
use cf_audit_core::model::{CounterfactualPair, DecisionRecord, Role, TriageLabel, VariantKey};
use cf_audit_core::par::Execution;
use cf_audit_core::predictions::{PredictionRow, PredictionSet};
use cf_audit_core::predictor::{
    predict_paired, weighted_kappa, AgreementMatrix, BowConfig, BowModel, PredictorBinding,
};
use cf_audit_core::profile::Profile;
use cf_audit_core::report::{
    compare_predictors, comparison_markdown, emit_report, metrics_markdown, project_impact,
    strata_markdown, AuditRunManifest, Column, ImpactInput, InputDigest,
    StrataReport, TOUCH_TOLERANCE,
};
use cf_audit_core::service::{GenServiceConfig, HttpChatService};
use cf_audit_core::stratified::stratify as stratify_preds;
use cf_audit_core::synth::{generate as synth_generate, SynthConfig};
use cf_audit_core::{AuditError, Result};
use clap::{Args, ValueEnum};
use serde_json::json;

use crate::config::{read_toml, Resolved};

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// `dir/stem{suffix}` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn save_manifest(m: &mut AuditRunManifest, anchor: &Path) -> Result<()> {
    m.finish();
    io::write_json(&sibling(anchor, ".manifest.json"), m)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

// ---- filter / split ----

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Filter settings (TOML) layered over the profile preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "kept.jsonl")]
    pub kept: PathBuf,
    #[arg(long, default_value = "rejected.jsonl")]
    pub rejected: PathBuf,
    /// Run without data parallelism.
    #[arg(long)]
    pub sequential: bool,
}

pub fn filter(ctx: &Resolved, a: FilterArgs) -> Result<()> {
    let patch = a.config.as_deref().map(read_toml::<serde_json::Value>).transpose()?;
    let cfg = ctx.filter_with(patch.as_ref())?;
    let mut m = AuditRunManifest::begin("filter", ctx.seed, &cfg, vec![InputDigest::of("records", &a.input)?])?;
    let lines = io::read_lines(&a.input)?;
    let outcome = filter_lines(&lines, &cfg, exec(a.sequential));
    let (kept, rejected) = (ctx.out(&a.kept), ctx.out(&a.rejected));
    io::write_jsonl(&kept, &outcome.kept)?;
    io::write_jsonl(&rejected, &outcome.rejected)?;
    m.count("kept", outcome.kept.len() as u64)
        .count("rejected", outcome.rejected.len() as u64)
        .output(&kept)
        .output(&rejected);
    for (reason, n) in outcome.reason_counts() {
        m.count(&format!("rejected.{}", reason.as_str()), n as u64);
    }
    save_manifest(&mut m, &kept)?;
    print_json(&outcome.summary());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Share of each label assigned to the training partition.
    #[arg(long, default_value_t = 0.8)]
    pub fraction: f64,
    #[arg(long, default_value = "train.jsonl")]
    pub train: PathBuf,
    #[arg(long, default_value = "test.jsonl")]
    pub test: PathBuf,
}

pub fn split(ctx: &Resolved, a: SplitArgs) -> Result<()> {
    let records: Vec<DecisionRecord> = io::read_jsonl(&a.input)?;
    let (train, test) = stratified_split(&records, a.fraction, ctx.seed)?;
    io::write_jsonl(&ctx.out(&a.train), &train)?;
    io::write_jsonl(&ctx.out(&a.test), &test)?;
    print_json(&json!({"train": train.len(), "test": test.len()}));
    Ok(())
}

// ---- pairs ----

#[derive(Args, Debug)]
pub struct PairsArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Rewrite template language; defaults to the profile's.
    #[arg(long)]
    pub template: Option<Language>,
    #[arg(long)]
    pub endpoint: String,
    #[arg(long, default_value = "default")]
    pub model: String,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    #[arg(long, default_value_t = 120.0)]
    pub timeout: f64,
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    /// Environment variable holding a bearer token.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long, default_value = "pairs.jsonl")]
    pub out: PathBuf,
    /// Generation log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Export this many log entries per quality class for manual review.
    #[arg(long)]
    pub review: Option<usize>,
}

pub fn pairs(ctx: &Resolved, a: PairsArgs) -> Result<()> {
    let mut settings = ctx.generation()?;
    if let Some(lang) = a.template {
        if lang != settings.template.language {
            let n = settings.template.exemplars.len();
            settings.template = cf_audit_core::counterfactual::PromptTemplate::for_language(lang).with_exemplars(n)?;
            settings.terms = cf_audit_core::counterfactual::GenderedTerms::for_language(lang);
        }
    }
    let service_cfg = GenServiceConfig {
        endpoint: a.endpoint.clone(),
        model: a.model.clone(),
        max_concurrency: a.concurrency,
        timeout_secs: a.timeout,
        retries: a.retries,
        temperature: a.temperature,
        max_tokens: None,
        api_key_env: a.api_key_env.clone(),
    };
    let service = HttpChatService::new(service_cfg.clone())?;
    let records: Vec<DecisionRecord> = io::read_jsonl(&a.input)?;

    let out = ctx.out(&a.out);
    let log = a.log.as_ref().map(|p| ctx.out(p)).unwrap_or_else(|| sibling(&out, ".log.jsonl"));
    let checkpoint = Checkpoint {
        pairs_path: sibling(&out, ".partial.jsonl"),
        log_path: log.clone(),
    };
    let config_id = json!({
        "template": settings.template,
        "terms": settings.terms,
        "thresholds": settings.thresholds,
        "model": service_cfg.model,
        "temperature": service_cfg.temperature,
    });
    let mut m = AuditRunManifest::begin("pairs", ctx.seed, &config_id, vec![InputDigest::of("records", &a.input)?])?;
    let result = generate_pairs(&records, &settings, &service, Some(&checkpoint))?;

    let admissible: Vec<&CounterfactualPair> = result.admissible();
    io::write_jsonl(&out, &admissible)?;
    let _ = fs::remove_file(&checkpoint.pairs_path);
    m.count("records", records.len() as u64)
        .count("requested", result.requested as u64)
        .count("resumed", result.resumed as u64)
        .count("admissible_pairs", admissible.len() as u64)
        .output(&out)
        .output(&log);
    let hist: serde_json::Map<String, serde_json::Value> = result
        .quality_histogram()
        .into_iter()
        .map(|(q, n)| (serde_json::to_value(q).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(), json!(n)))
        .collect();
    for (k, v) in &hist {
        m.count(&format!("quality.{k}"), v.as_u64().unwrap_or(0));
    }
    if let Some(n) = a.review {
        let review = sibling(&out, ".review.jsonl");
        io::write_jsonl(&review, &sample_for_review(&result.log, n, ctx.seed))?;
        m.output(&review);
    }
    save_manifest(&mut m, &out)?;
    print_json(&json!({
        "pairs": admissible.len(),
        "quality": hist,
        "requested": result.requested,
        "resumed": result.resumed,
    }));
    Ok(())
}

// ---- predict / train / agreement ----

fn load_binding(path: &Path) -> Result<(PredictorBinding, PathBuf)> {
    let binding: PredictorBinding = read_toml(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((binding, base))
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Comma-separated list of full, text_iso, tab_iso.
    #[arg(long, default_value = "full")]
    pub conditions: String,
    #[arg(long)]
    pub binding: PathBuf,
    #[arg(long, default_value = "preds.jsonl")]
    pub out: PathBuf,
    #[arg(long)]
    pub sequential: bool,
}

pub fn predict(ctx: &Resolved, a: PredictArgs) -> Result<()> {
    let conditions = cf_audit_core::model::parse_conditions(&a.conditions)?;
    let (binding, base) = load_binding(&a.binding)?;
    let predictor = binding.load(&base)?;
    let pairs: Vec<CounterfactualPair> = io::read_jsonl(&a.pairs)?;
    let mut m = AuditRunManifest::begin(
        "predict",
        ctx.seed,
        &json!({"binding": binding, "conditions": conditions}),
        vec![InputDigest::of("pairs", &a.pairs)?, InputDigest::of("binding", &a.binding)?],
    )?;
    let run = predict_paired(&pairs, &conditions, predictor.as_ref(), exec(a.sequential))?;
    let out = ctx.out(&a.out);
    let dropped = sibling(&out, ".dropped.jsonl");
    io::write_jsonl(&out, &run.predictions.to_rows())?;
    io::write_jsonl(&dropped, &run.dropped)?;
    m.count("pairs_in", pairs.len() as u64)
        .count("index_set", run.predictions.len() as u64)
        .count("dropped", run.dropped.len() as u64)
        .output(&out)
        .output(&dropped);
    save_manifest(&mut m, &out)?;
    print_json(&json!({
        "index_set": run.predictions.len(),
        "dropped": run.dropped.len(),
        "conditions": conditions,
    }));
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long, default_value = "baseline.json")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub dim_bits: u32,
}

pub fn train(ctx: &Resolved, a: TrainArgs) -> Result<()> {
    let records: Vec<DecisionRecord> = io::read_jsonl(&a.train)?;
    let cfg = BowConfig {
        epochs: a.epochs,
        dim_bits: a.dim_bits,
        seed: ctx.seed,
        ..Default::default()
    };
    let mut m = AuditRunManifest::begin("train", ctx.seed, &cfg, vec![InputDigest::of("train", &a.train)?])?;
    let model = BowModel::train(&records, ctx.profile.scale(), cfg)?;
    let out = ctx.out(&a.out);
    model.save(&out)?;
    m.count("train_records", records.len() as u64).output(&out);
    save_manifest(&mut m, &out)?;
    print_json(&json!({"model": out.display().to_string(), "features": model.weights.len()}));
    Ok(())
}

#[derive(Args, Debug)]
pub struct AgreementArgs {
    /// Labeled records scored as originals under the full condition.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub binding: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn agreement(ctx: &Resolved, a: AgreementArgs) -> Result<()> {
    let (binding, base) = load_binding(&a.binding)?;
    let predictor = binding.load(&base)?;
    let scale = predictor.scale();
    let records: Vec<DecisionRecord> = io::read_jsonl(&a.records)?;
    let (mut reference, mut predicted, mut failed) = (Vec::new(), Vec::new(), 0usize);
    for r in &records {
        let Some(y) = r.triage_label(&scale)? else {
            failed += 1;
            continue;
        };
        let key = VariantKey {
            pair_id: r.id.clone(),
            condition: cf_audit_core::model::Condition::Full,
            role: Role::Original,
        };
        match predictor.predict(&key, r) {
            Ok(p) => {
                reference.push(y);
                predicted.push(p);
            }
            Err(AuditError::Service(s)) => return Err(AuditError::Service(s)),
            Err(_) => failed += 1,
        }
    }
    let matrix = AgreementMatrix::from_labels(&scale, &reference, &predicted)?;
    let kappa = weighted_kappa(&matrix)?;
    let v = json!({"weighted_kappa": kappa, "scored": reference.len(), "unscored": failed, "matrix": matrix.counts});
    if let Some(p) = &a.out {
        io::write_json(&ctx.out(p), &v)?;
    }
    print_json(&v);
    Ok(())
}

// ---- audit / stratify ----

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ResamplingArg {
    Multinomial,
    Indices,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long, default_value = "audit.json")]
    pub out: PathBuf,
    /// Also write the metric table as markdown.
    #[arg(long)]
    pub markdown: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub confidence: Option<f64>,
    #[arg(long, value_enum)]
    pub resampling: Option<ResamplingArg>,
    #[arg(long)]
    pub sequential: bool,
}

fn load_predictions(path: &Path, profile: Profile) -> Result<PredictionSet> {
    let rows: Vec<PredictionRow> = io::read_jsonl(path)?;
    PredictionSet::from_rows(&rows, profile.scale(), None)
}

pub fn audit(ctx: &Resolved, a: AuditArgs) -> Result<()> {
    let mut cfg = ctx.bootstrap()?;
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(c) = a.confidence {
        cfg.confidence = c;
    }
    if let Some(r) = a.resampling {
        cfg.resampling = match r {
            ResamplingArg::Multinomial => Resampling::Multinomial,
            ResamplingArg::Indices => Resampling::Indices,
        };
    }
    cfg.execution = exec(a.sequential);
    cfg.validate()?;
    let preds = load_predictions(&a.preds, ctx.profile)?;
    let mut m = AuditRunManifest::begin(
        "audit",
        ctx.seed,
        &json!({"bootstrap": cfg, "profile": ctx.profile}),
        vec![InputDigest::of("predictions", &a.preds)?],
    )?;
    let mut report = run_audit(&preds, &cfg)?;
    report.manifest_id = Some(m.manifest_id.clone());
    let out = ctx.out(&a.out);
    io::write_json(&out, &report)?;
    m.count("index_set", report.index_set_size as u64)
        .count("bootstrap_redraws", report.bootstrap.redraws)
        .output(&out);
    if let Some(md) = &a.markdown {
        let md = ctx.out(md);
        let cols: Vec<Column<'_>> = report
            .reports
            .iter()
            .map(|r| Column { group: String::new(), report: r })
            .collect();
        io::write_atomic(&md, metrics_markdown(&cols, ctx.precision()).as_bytes())?;
        m.output(&md);
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    save_manifest(&mut m, &out)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct StratifyArgs {
    #[arg(long)]
    pub preds: PathBuf,
    /// Reference labels: a records file (`id`, `label`) or a pairs file.
    #[arg(long, alias = "pairs")]
    pub labels: PathBuf,
    #[arg(long, default_value = "full")]
    pub condition: cf_audit_core::model::Condition,
    #[arg(long, default_value = "strata.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub markdown: Option<PathBuf>,
}

/// Reference label per pair id from records or pairs JSONL.
fn reference_labels(path: &Path, scale: cf_audit_core::model::TriageScale) -> Result<HashMap<String, TriageLabel>> {
    let rows: Vec<serde_json::Value> = io::read_jsonl(path)?;
    let mut refs = HashMap::new();
    for v in &rows {
        let (id, label) = match v.get("original") {
            Some(orig) => (v.get("pair_id"), orig.get("label")),
            None => (v.get("id"), v.get("label")),
        };
        let (Some(id), Some(label)) = (id.and_then(|x| x.as_str()), label.and_then(|x| x.as_i64())) else {
            continue;
        };
        if scale.contains(label) {
            refs.insert(id.to_string(), TriageLabel(label as u8));
        }
    }
    Ok(refs)
}

pub fn stratify(ctx: &Resolved, a: StratifyArgs) -> Result<()> {
    let mut preds = load_predictions(&a.preds, ctx.profile)?;
    let refs = reference_labels(&a.labels, preds.scale)?;
    preds.attach_references(&refs);
    let mut m = AuditRunManifest::begin(
        "stratify",
        ctx.seed,
        &json!({"condition": a.condition, "profile": ctx.profile}),
        vec![InputDigest::of("predictions", &a.preds)?, InputDigest::of("labels", &a.labels)?],
    )?;
    let (strata, skipped) = stratify_preds(&preds, a.condition)?;
    let mut report = StrataReport::new(a.condition, strata, skipped);
    report.manifest_id = Some(m.manifest_id.clone());
    let out = ctx.out(&a.out);
    io::write_json(&out, &report)?;
    m.count("strata", report.strata.len() as u64)
        .count("skipped_without_reference", skipped as u64)
        .output(&out);
    if let Some(md) = &a.markdown {
        let md = ctx.out(md);
        io::write_atomic(&md, strata_markdown(&report, ctx.precision()).as_bytes())?;
        m.output(&md);
    }
    save_manifest(&mut m, &out)?;
    Ok(())
}

// ---- synth / project / compare / report ----

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Generator parameters (TOML).
    #[arg(long, visible_alias = "config")]
    pub params: PathBuf,
    #[arg(long, default_value = "pairs.jsonl")]
    pub out_pairs: PathBuf,
    #[arg(long, default_value = "preds.jsonl")]
    pub out_preds: PathBuf,
    #[arg(long, default_value = "truth.json")]
    pub truth: PathBuf,
    /// Table-predictor binding over the emitted predictions.
    #[arg(long, default_value = "binding.toml")]
    pub binding: PathBuf,
    #[arg(long)]
    pub sequential: bool,
}

pub fn synth(ctx: &Resolved, a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = read_toml(&a.params)?;
    if let Some(seed) = ctx.seed_flag {
        cfg.seed = seed;
    }
    let mut m = AuditRunManifest::begin("synth", cfg.seed, &cfg, vec![])?;
    let out = synth_generate(&cfg, exec(a.sequential))?;
    let (pairs, preds, truth, binding) = (
        ctx.out(&a.out_pairs),
        ctx.out(&a.out_preds),
        ctx.out(&a.truth),
        ctx.out(&a.binding),
    );
    io::write_jsonl(&pairs, &out.pairs)?;
    io::write_jsonl(&preds, &out.rows)?;
    io::write_json(&truth, &json!({"config": cfg, "truth": out.truth}))?;
    let preds_ref = if preds.parent() == binding.parent() {
        PathBuf::from(preds.file_name().unwrap_or_default())
    } else {
        fs::canonicalize(&preds).unwrap_or_else(|_| preds.clone())
    };
    let table = PredictorBinding::Table {
        scale: cfg.scale,
        path: preds_ref,
    };
    let text = toml::to_string(&table).map_err(|e| AuditError::Config(e.to_string()))?;
    io::write_atomic(&binding, text.as_bytes())?;
    m.count("pairs", out.pairs.len() as u64)
        .count("prediction_rows", out.rows.len() as u64)
        .output(&pairs)
        .output(&preds)
        .output(&truth)
        .output(&binding);
    save_manifest(&mut m, &pairs)?;
    print_json(&json!({"pairs": out.pairs.len(), "truth": out.truth}));
    Ok(())
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[arg(long)]
    pub visits: f64,
    #[arg(long, default_value_t = 0.5)]
    pub share: f64,
    #[arg(long)]
    pub differential: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn project(ctx: &Resolved, a: ProjectArgs) -> Result<()> {
    let p = project_impact(ImpactInput {
        annual_visits: a.visits,
        share: a.share,
        differential: a.differential,
    })?;
    let v = serde_json::to_value(p)?;
    if let Some(out) = &a.out {
        io::write_json(&ctx.out(out), &v)?;
    }
    print_json(&v);
    Ok(())
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value = "a")]
    pub label_a: String,
    #[arg(long, default_value = "b")]
    pub label_b: String,
    #[arg(long, default_value = "comparison.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub markdown: Option<PathBuf>,
    /// Interval endpoints closer than this count as touching.
    #[arg(long, default_value_t = TOUCH_TOLERANCE)]
    pub tolerance: f64,
}

pub fn compare(ctx: &Resolved, a: CompareArgs) -> Result<()> {
    let ra: AuditReport = io::read_json(&a.a)?;
    let rb: AuditReport = io::read_json(&a.b)?;
    let c = compare_predictors(&a.label_a, &ra, &a.label_b, &rb, a.tolerance)?;
    let out = ctx.out(&a.out);
    io::write_json(&out, &c)?;
    if let Some(md) = &a.markdown {
        io::write_atomic(&ctx.out(md), comparison_markdown(&c, ctx.precision()).as_bytes())?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Json,
    Markdown,
    All,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Audit report, optionally labelled as `label=path`. Repeatable.
    #[arg(long = "audit", required = true)]
    pub audits: Vec<String>,
    #[arg(long)]
    pub strata: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub format: FormatArg,
    /// File stem for `<stem>.json`, `<stem>.md` and `<stem>.plot.json`.
    #[arg(long, default_value = "report")]
    pub stem: String,
}

pub fn report(ctx: &Resolved, a: ReportArgs) -> Result<()> {
    let mut groups = Vec::new();
    let mut inputs = Vec::new();
    for spec in &a.audits {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => (String::new(), PathBuf::from(spec)),
        };
        inputs.push(InputDigest::of("audit", &path)?);
        groups.push((label, io::read_json::<AuditReport>(&path)?));
    }
    let strata: Option<StrataReport> = match &a.strata {
        Some(p) => {
            inputs.push(InputDigest::of("strata", p)?);
            Some(io::read_json(p)?)
        }
        None => None,
    };
    let precision = ctx.precision();
    let mut m = AuditRunManifest::begin("report", ctx.seed, &json!({"precision": precision}), inputs)?;
    let bundle = emit_report(&groups, strata.as_ref(), precision)?;
    fs::create_dir_all(&ctx.out_dir).map_err(|e| AuditError::io(ctx.out_dir.display().to_string(), e))?;
    let written = match a.format {
        FormatArg::All => bundle.write(&ctx.out_dir, &a.stem)?,
        FormatArg::Json | FormatArg::Markdown => {
            let (path, content) = match a.format {
                FormatArg::Json => (ctx.out_dir.join(format!("{}.json", a.stem)), &bundle.json),
                _ => (ctx.out_dir.join(format!("{}.md", a.stem)), &bundle.markdown),
            };
            io::write_atomic(&path, content.as_bytes())?;
            vec![path]
        }
    };
    for p in &written {
        m.output(p);
    }
    save_manifest(&mut m, &ctx.out_dir.join(format!("{}.json", a.stem)))?;
    Ok(())
}
