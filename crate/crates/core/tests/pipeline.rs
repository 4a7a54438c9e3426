use std::sync::atomic::{AtomicUsize, Ordering};

use cf_audit_core::audit::audit;
use cf_audit_core::bootstrap::BootstrapConfig;
use cf_audit_core::counterfactual::{generate_pairs, GenerationSettings};
use cf_audit_core::ingest::{filter_records, stratified_split, FilterConfig};
use cf_audit_core::lexicon::Language;
use cf_audit_core::model::{Condition, DecisionRecord, Sex, TriageLabel};
use cf_audit_core::par::Execution;
use cf_audit_core::predictor::{predict_paired, BowConfig, BowModel, RemotePredictor, TriagePrompt};
use cf_audit_core::profile::Profile;
use cf_audit_core::report::{emit_report, StrataReport};
use cf_audit_core::service::{ChatMessage, TextService};
use cf_audit_core::stratified::stratify;
use cf_audit_core::{AuditError, Result};

const SYMPTOMS: [(&str, u8); 6] = [
    ("une douleur thoracique constrictive", 2),
    ("une dyspnée aiguë", 2),
    ("une fièvre avec frissons", 3),
    ("une douleur abdominale", 3),
    ("une plaie de la main", 4),
    ("une entorse de cheville", 5),
];

fn corpus(n: usize) -> Vec<DecisionRecord> {
    (0..n)
        .map(|i| {
            let (symptom, label) = SYMPTOMS[i % SYMPTOMS.len()];
            let male = i % 3 != 0;
            let (noun, pron) = if male { ("Patient", "il") } else { ("Patiente", "elle") };
            let age = 20 + (i * 7) % 70;
            let mut r = DecisionRecord::new(format!("v{i:04}"))
                .with_sex(if male { Sex::Male } else { Sex::Female })
                .with_age(age as f64)
                .with_label(if i % 17 == 0 { 1 } else { label })
                .with_texts("", &format!("{noun} de {age} ans, {pron} présente {symptom}."), "HTA");
            if i % 23 == 0 {
                r.hpi.push_str(" Grossesse en cours.");
            }
            r
        })
        .collect()
}

/// Rewrites the last record of the prompt by swapping French gender markers.
struct Rewriter;

impl TextService for Rewriter {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let last = messages[1].content.lines().last().unwrap_or_default();
        let out = if last.contains("Sexe patient : M") {
            last.replacen("Sexe patient : M", "Sexe patient : F", 1)
                .replace("Patient ", "Patiente ")
                .replace(" il ", " elle ")
        } else {
            last.replacen("Sexe patient : F", "Sexe patient : M", 1)
                .replace("Patiente ", "Patient ")
                .replace(" elle ", " il ")
        };
        Ok(out)
    }

    fn max_concurrency(&self) -> usize {
        4
    }
}

#[test]
fn filter_generate_predict_audit_report() {
    let raw = corpus(240);
    let cfg = FilterConfig::bordeaux();
    let filtered = filter_records(&raw, &cfg, Execution::Parallel);
    assert!(filtered.rejected.iter().any(|r| r.detail.contains("grossesse")));
    assert!(filtered.kept.iter().all(|r| r.label != Some(1)));

    let (train, test) = stratified_split(&filtered.kept, 0.5, 7).unwrap();
    let scale = Profile::Bordeaux.scale();
    let model = BowModel::train(&train, scale, BowConfig { seed: 7, ..Default::default() }).unwrap();

    let settings = GenerationSettings::for_language(Language::Fr);
    let generated = generate_pairs(&test, &settings, &Rewriter, None).unwrap();
    let admissible: Vec<_> = generated.admissible().into_iter().cloned().collect();
    assert_eq!(admissible.len(), test.len(), "{:?}", generated.quality_histogram());
    assert!(admissible.iter().all(|p| p.original.sex != p.counterfactual.sex));

    let conditions = [Condition::Full, Condition::TextIso, Condition::TabIso];
    let run = predict_paired(&admissible, &conditions, &model, Execution::Parallel).unwrap();
    assert!(run.dropped.is_empty());
    assert_eq!(run.predictions.len(), admissible.len());
    assert_eq!(run.predictions.conditions.len(), 3);

    let mut boot = BootstrapConfig::with_seed(11);
    boot.iterations = 300;
    let report = audit(&run.predictions, &boot).unwrap();
    assert_eq!(report.reports.len(), 3);
    for r in &report.reports {
        assert_eq!(r.n_pairs as usize, admissible.len());
        let pdr = r.pdr.unwrap();
        assert!(pdr.lower <= pdr.point && pdr.point <= pdr.upper);
    }

    let mut with_refs = run.predictions.clone();
    let refs = admissible
        .iter()
        .map(|p| (p.pair_id.clone(), TriageLabel(p.original.label.unwrap())))
        .collect();
    assert_eq!(with_refs.attach_references(&refs), admissible.len());
    let (strata, skipped) = stratify(&with_refs, Condition::Full).unwrap();
    assert_eq!(skipped, 0);
    let total: u64 = strata.iter().map(|s| s.male_pairs() + s.female_pairs()).sum();
    assert_eq!(total as usize, admissible.len());

    let strata = StrataReport::new(Condition::Full, strata, skipped);
    let a = emit_report(&[("bow".into(), report.clone())], Some(&strata), 1).unwrap();
    let again = audit(&run.predictions, &boot).unwrap();
    let b = emit_report(&[("bow".into(), again)], Some(&strata), 1).unwrap();
    assert_eq!(a.json, b.json);
    assert_eq!(a.markdown, b.markdown);
    assert!(a.markdown.contains("Text-Iso") && a.markdown.contains("Tab-Iso"));
}

/// Answers with a score, except for one pair whose reply has no label.
struct Scorer {
    calls: AtomicUsize,
}

impl TextService for Scorer {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = &messages.last().unwrap().content;
        if prompt.contains("entorse") && prompt.contains("Patiente de 41 ans") {
            return Ok("Je ne peux pas répondre.".into());
        }
        Ok(if prompt.contains("thoracique") { "Score : 2".into() } else { "3".into() })
    }
}

struct Down;

impl TextService for Down {
    fn complete(&self, _: &[ChatMessage]) -> Result<String> {
        Err(AuditError::Service("connection refused".into()))
    }
}

#[test]
fn remote_predictor_drops_unparseable_pairs_and_aborts_on_outage() {
    let records: Vec<DecisionRecord> = corpus(60).into_iter().filter(|r| r.label != Some(1) && !r.hpi.contains("Grossesse")).collect();
    let settings = GenerationSettings::for_language(Language::Fr);
    let pairs: Vec<_> = generate_pairs(&records, &settings, &Rewriter, None)
        .unwrap()
        .admissible()
        .into_iter()
        .cloned()
        .collect();
    let scale = Profile::Bordeaux.scale();

    let scorer = RemotePredictor::new(scale, TriagePrompt::for_language(Language::Fr), Box::new(Scorer { calls: AtomicUsize::new(0) }));
    let run = predict_paired(&pairs, &[Condition::Full], &scorer, Execution::Sequential).unwrap();
    let bad: Vec<_> = pairs
        .iter()
        .filter(|p| p.original.hpi.contains("entorse") && p.original.age == Some(41.0) && p.original.sex == Some(Sex::Female)
            || p.counterfactual.hpi.contains("Patiente de 41 ans") && p.counterfactual.hpi.contains("entorse"))
        .collect();
    assert!(!bad.is_empty());
    assert_eq!(run.dropped.len(), bad.len());
    assert_eq!(run.predictions.len() + bad.len(), pairs.len());

    let down = RemotePredictor::new(scale, TriagePrompt::for_language(Language::Fr), Box::new(Down));
    assert!(matches!(
        predict_paired(&pairs, &[Condition::Full], &down, Execution::Sequential),
        Err(AuditError::Service(_))
    ));
}
