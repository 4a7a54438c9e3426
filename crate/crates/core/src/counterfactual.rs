//! Counterfactual pair generation: tabular sex flip, few-shot text rewrite
//! through a chat service, anchored parsing and automatic validation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::io;
use crate::lexicon::Language;
use crate::model::{CfQuality, CounterfactualPair, DecisionRecord, Sex};
use crate::service::{map_bounded, ChatMessage, TextService};

/// Swap the sex field, leaving every other field untouched.
pub fn flip_tabular(record: &DecisionRecord) -> Result<DecisionRecord> {
    let sex = record
        .sex
        .ok_or_else(|| AuditError::record(&record.id, "cannot flip a record without sex"))?;
    let mut out = record.clone();
    out.sex = Some(sex.flip());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextField {
    ChiefComplaint,
    Hpi,
    Pmh,
}

impl TextField {
    pub fn get(self, r: &DecisionRecord) -> &str {
        match self {
            TextField::ChiefComplaint => &r.chief_complaint,
            TextField::Hpi => &r.hpi,
            TextField::Pmh => &r.pmh,
        }
    }

    pub fn set(self, r: &mut DecisionRecord, value: String) {
        match self {
            TextField::ChiefComplaint => r.chief_complaint = value,
            TextField::Hpi => r.hpi = value,
            TextField::Pmh => r.pmh = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub input: String,
    pub output: String,
}

/// Few-shot rewrite prompt. Records are rendered as
/// `{sex_label} : {sex}, {label_1} : {field_1}, {label_2} : {field_2}`
/// (French spacing) or `{label}: {value}` (English spacing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub language: Language,
    pub system_prompt: String,
    pub instruction: String,
    pub exemplars: Vec<Exemplar>,
    pub header: String,
    pub original_label: String,
    pub transformed_label: String,
    pub sex_label: String,
    pub fields: [(String, TextField); 2],
    /// Separator placed between a label and its value, `" : "` or `": "`.
    pub label_separator: String,
}

const FR_SYSTEM: &str = "Tu es un assistant qui va transformer des anamnèses médicales en remplaçant les références au sexe dans le texte par le sexe opposé.";
const FR_INSTRUCTION: &str = "Tu vas recevoir l'anamnèse d'un(e) patient(e). Ta tâche est de remplacer les références au sexe par le sexe opposé. Par exemple, \"patient\" devient \"patiente\", \"homme\" devient \"femme\", etc. N'effectue aucune traduction et ne corrige aucune faute d'orthographe.";
const EN_SYSTEM: &str = "You are an assistant who will transform medical notes by replacing sex references in the text with the opposite sex.";
const EN_INSTRUCTION: &str = "You will receive a patient's clinical note. Your task is to replace sex references with the opposite sex. For example, \"he\" becomes \"she\", \"man\" becomes \"woman\", etc. Do not perform any other modifications to the clinical content and do not correct any spelling errors.";

// (sex, field 1, field 2) before and after the rewrite.
type Shot = (&'static str, &'static str, &'static str, &'static str, &'static str);

const FR_SHOTS: [Shot; 10] = [
    (
        "M",
        "Patient de 45 ans amené par les pompiers pour douleur thoracique. Il est conscient et orienté.",
        "HTA, diabète de type 2",
        "Patiente de 45 ans amenée par les pompiers pour douleur thoracique. Elle est consciente et orientée.",
        "HTA, diabète de type 2",
    ),
    (
        "F",
        "Femme de 78 ans retrouvée au sol à domicile par sa fille. Elle est désorientée.",
        "FA sous anticoagulants",
        "Homme de 78 ans retrouvé au sol à domicile par sa fille. Il est désorienté.",
        "FA sous anticoagulants",
    ),
    (
        "M",
        "Chute de vélo, le patient est tombé sur l'épaule droite. Il se plaint de douleur à la mobilisation.",
        "aucun",
        "Chute de vélo, la patiente est tombée sur l'épaule droite. Elle se plaint de douleur à la mobilisation.",
        "aucun",
    ),
    (
        "F",
        "Madame X, 32 ans, consulte pour douleurs abdominales depuis 2 jours. Elle est inquiète.",
        "appendicectomie",
        "Monsieur X, 32 ans, consulte pour douleurs abdominales depuis 2 jours. Il est inquiet.",
        "appendicectomie",
    ),
    (
        "M",
        "Patient âgé, vit seul, adressé par son médecin traitant pour dyspnée.",
        "BPCO, tabagisme actif",
        "Patiente âgée, vit seule, adressée par son médecin traitant pour dyspnée.",
        "BPCO, tabagisme actif",
    ),
    (
        "F",
        "Céphalées brutales ce matin. La patiente a vomi à deux reprises, elle est fatiguée.",
        "migraines",
        "Céphalées brutales ce matin. Le patient a vomi à deux reprises, il est fatigué.",
        "migraines",
    ),
    (
        "M",
        "Homme de 60 ans, connu pour une cardiopathie, hospitalisé il y a un mois. Son épouse signale une confusion.",
        "IDM en 2019",
        "Femme de 60 ans, connue pour une cardiopathie, hospitalisée il y a un mois. Son époux signale une confusion.",
        "IDM en 2019",
    ),
    (
        "F",
        "Plaie de la main gauche en cuisinant. Patiente droitière, vaccinée contre le tétanos.",
        "",
        "Plaie de la main gauche en cuisinant. Patient droitier, vacciné contre le tétanos.",
        "",
    ),
    (
        "M",
        "Douleur lombaire depuis hier, irradiant dans la jambe. Pas de fièvre.",
        "lombalgies chroniques",
        "Douleur lombaire depuis hier, irradiant dans la jambe. Pas de fièvre.",
        "lombalgies chroniques",
    ),
    (
        "F",
        "Jeune femme de 22 ans amenée par son compagnon pour malaise avec perte de connaissance. Elle est pâle.",
        "asthme",
        "Jeune homme de 22 ans amené par sa compagne pour malaise avec perte de connaissance. Il est pâle.",
        "asthme",
    ),
];

const EN_SHOTS: [Shot; 10] = [
    (
        "M",
        "chest pain",
        "54 yo man presenting with chest pain since this morning. He reports radiation to his left arm.",
        "chest pain",
        "54 yo woman presenting with chest pain since this morning. She reports radiation to her left arm.",
    ),
    (
        "F",
        "fall",
        "82 year old female found on the floor by her son. She is confused and cannot recall the event.",
        "fall",
        "82 year old male found on the floor by his son. He is confused and cannot recall the event.",
    ),
    (
        "M",
        "abdominal pain",
        "Pt is a 37 yo gentleman with RLQ pain for 2 days. Denies fever. His appetite is decreased.",
        "abdominal pain",
        "Pt is a 37 yo lady with RLQ pain for 2 days. Denies fever. Her appetite is decreased.",
    ),
    (
        "F",
        "dyspnea",
        "Mrs. X, 68, with worsening shortness of breath. She uses home oxygen at night.",
        "dyspnea",
        "Mr. X, 68, with worsening shortness of breath. He uses home oxygen at night.",
    ),
    (
        "M",
        "headache",
        "Sudden onset headache while lifting weights. Vomited twice. No prior history of headaches.",
        "headache",
        "Sudden onset headache while lifting weights. Vomited twice. No prior history of headaches.",
    ),
    (
        "F",
        "laceration",
        "Woman cut her hand while cooking. She is right handed, tetanus up to date.",
        "laceration",
        "Man cut his hand while cooking. He is right handed, tetanus up to date.",
    ),
    (
        "M",
        "syncope",
        "Young man brought in by his girlfriend after a syncopal episode. He appears pale.",
        "syncope",
        "Young woman brought in by her boyfriend after a syncopal episode. She appears pale.",
    ),
    (
        "F",
        "back pain",
        "Low back pain radiating to the left leg since yesterday. Patient states she lifted a heavy box.",
        "back pain",
        "Low back pain radiating to the left leg since yesterday. Patient states he lifted a heavy box.",
    ),
    (
        "M",
        "altered mental status",
        "Elderly male sent from nursing home for confusion. Staff report he has not eaten in two days.",
        "altered mental status",
        "Elderly female sent from nursing home for confusion. Staff report she has not eaten in two days.",
    ),
    (
        "F",
        "fever",
        "19 yo girl with fever and sore throat for 3 days. Her mother reports poor oral intake.",
        "fever",
        "19 yo boy with fever and sore throat for 3 days. His mother reports poor oral intake.",
    ),
];

pub const DEFAULT_EXEMPLARS: usize = 10;

impl PromptTemplate {
    pub fn french() -> Self {
        Self::build(
            Language::Fr,
            FR_SYSTEM,
            FR_INSTRUCTION,
            "#### Anamnèse à changer ####",
            "Anamnèse originale:",
            "Anamnèse transformée:",
            "Sexe patient",
            [("Anamnèse", TextField::Hpi), ("Antécédents", TextField::Pmh)],
            " : ",
            &FR_SHOTS,
        )
    }

    pub fn english() -> Self {
        Self::build(
            Language::En,
            EN_SYSTEM,
            EN_INSTRUCTION,
            "#### Note to transform ####",
            "Original note:",
            "Transformed note:",
            "Patient sex",
            [("Chief complaint", TextField::ChiefComplaint), ("Clinical note", TextField::Hpi)],
            ": ",
            &EN_SHOTS,
        )
    }

    pub fn for_language(language: Language) -> Self {
        match language {
            Language::Fr => Self::french(),
            Language::En => Self::english(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        language: Language,
        system: &str,
        instruction: &str,
        header: &str,
        original_label: &str,
        transformed_label: &str,
        sex_label: &str,
        fields: [(&str, TextField); 2],
        sep: &str,
        shots: &[Shot],
    ) -> Self {
        let mut t = PromptTemplate {
            language,
            system_prompt: system.to_string(),
            instruction: instruction.to_string(),
            exemplars: Vec::new(),
            header: header.to_string(),
            original_label: original_label.to_string(),
            transformed_label: transformed_label.to_string(),
            sex_label: sex_label.to_string(),
            fields: [
                (fields[0].0.to_string(), fields[0].1),
                (fields[1].0.to_string(), fields[1].1),
            ],
            label_separator: sep.to_string(),
        };
        t.exemplars = shots
            .iter()
            .map(|(sex, a, b, a2, b2)| {
                let flipped = if *sex == "M" { "F" } else { "M" };
                Exemplar {
                    input: t.format_fields(sex, a, b),
                    output: t.format_fields(flipped, a2, b2),
                }
            })
            .collect();
        t
    }

    /// Keep the first `n` exemplars.
    pub fn with_exemplars(mut self, n: usize) -> Result<Self> {
        if n > self.exemplars.len() {
            return Err(AuditError::Config(format!(
                "{n} exemplars requested, template has {}",
                self.exemplars.len()
            )));
        }
        self.exemplars.truncate(n);
        Ok(self)
    }

    pub fn format_fields(&self, sex: &str, first: &str, second: &str) -> String {
        let s = &self.label_separator;
        format!(
            "{}{s}{sex}, {}{s}{first}, {}{s}{second}",
            self.sex_label, self.fields[0].0, self.fields[1].0
        )
    }

    pub fn format_record(&self, record: &DecisionRecord) -> String {
        let sex = record.sex.map(Sex::code).unwrap_or("");
        self.format_fields(
            sex,
            self.fields[0].1.get(record),
            self.fields[1].1.get(record),
        )
    }

    /// The user turn: instruction, exemplars, then the record to rewrite.
    pub fn user_message(&self, record: &DecisionRecord) -> String {
        let mut out = String::new();
        out.push_str(&self.instruction);
        out.push_str("\n\n");
        for ex in &self.exemplars {
            out.push_str(&format!(
                "{}\n{}\n{}\n{}\n\n",
                self.original_label, ex.input, self.transformed_label, ex.output
            ));
        }
        out.push_str(&self.header);
        out.push('\n');
        out.push_str(&self.original_label);
        out.push('\n');
        out.push_str(&self.format_record(record));
        out
    }

    pub fn messages(&self, record: &DecisionRecord) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(self.system_prompt.clone()),
            ChatMessage::user(self.user_message(record)),
        ]
    }
}

/// Flattened prompt: system prompt, instruction, exemplars, record.
pub fn build_prompt(record: &DecisionRecord, template: &PromptTemplate) -> String {
    format!("{}\n\n{}", template.system_prompt, template.user_message(record))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedGeneration {
    pub sex: Sex,
    pub first: String,
    pub second: String,
}

impl ParsedGeneration {
    /// Counterfactual record: `original` with the parsed sex and text fields.
    pub fn apply(&self, original: &DecisionRecord, template: &PromptTemplate) -> DecisionRecord {
        let mut out = original.clone();
        out.sex = Some(self.sex);
        template.fields[0].1.set(&mut out, self.first.clone());
        template.fields[1].1.set(&mut out, self.second.clone());
        out
    }
}

fn label_pattern(label: &str) -> String {
    let words: Vec<String> = label.split_whitespace().map(regex::escape).collect();
    format!(r"(?i){}\s*:", words.join(r"\s+"))
}

pub fn parse_sex(value: &str) -> Option<Sex> {
    let v = value
        .trim()
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .to_lowercase();
    match v.as_str() {
        "m" | "h" | "homme" | "masculin" | "male" | "man" => Some(Sex::Male),
        "f" | "femme" | "féminin" | "feminin" | "female" | "woman" => Some(Sex::Female),
        _ => None,
    }
}

/// Split a service reply into (sex, field 1, field 2). Parsing is anchored
/// on the labels in template order, so clinical text may contain commas.
/// When the reply echoes several records, the last one wins.
pub fn parse_generation(output: &str, template: &PromptTemplate) -> Result<ParsedGeneration> {
    let bad = |why: &str| AuditError::Parse(format!("unparseable generation: {why}"));
    let sex_re = Regex::new(&label_pattern(&template.sex_label)).expect("valid label pattern");
    let f1_re = Regex::new(&format!(r",\s*{}", label_pattern(&template.fields[0].0)))
        .expect("valid label pattern");
    let f2_re = Regex::new(&format!(r",\s*{}", label_pattern(&template.fields[1].0)))
        .expect("valid label pattern");

    let sex_m = sex_re
        .find_iter(output)
        .last()
        .ok_or_else(|| bad(&format!("missing '{}' anchor", template.sex_label)))?;
    let rest = &output[sex_m.end()..];
    let f1 = f1_re
        .find(rest)
        .ok_or_else(|| bad(&format!("missing '{}' anchor", template.fields[0].0)))?;
    let after1 = &rest[f1.end()..];
    let f2 = f2_re
        .find(after1)
        .ok_or_else(|| bad(&format!("missing '{}' anchor", template.fields[1].0)))?;

    let sex_text = &rest[..f1.start()];
    let sex = parse_sex(sex_text).ok_or_else(|| bad(&format!("unrecognized sex '{}'", sex_text.trim())))?;
    Ok(ParsedGeneration {
        sex,
        first: after1[..f2.start()].trim().to_string(),
        second: after1[f2.end()..].trim().to_string(),
    })
}

/// Gendered words used to check a rewrite. `residual` categories count as
/// leftovers when the source sex's form survives; kinship terms describe
/// other people and only count towards the flipped marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCategory {
    pub name: String,
    pub male: Vec<String>,
    pub female: Vec<String>,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderedTerms {
    pub language: Language,
    pub categories: Vec<TermCategory>,
}

fn cat(name: &str, male: &[&str], female: &[&str], residual: bool) -> TermCategory {
    TermCategory {
        name: name.to_string(),
        male: male.iter().map(|s| s.to_string()).collect(),
        female: female.iter().map(|s| s.to_string()).collect(),
        residual,
    }
}

impl GenderedTerms {
    pub fn french() -> Self {
        GenderedTerms {
            language: Language::Fr,
            categories: vec![
                cat("pronoms", &["il", "ils", "lui-même"], &["elle", "elles", "elle-même"], true),
                cat(
                    "noms",
                    &["patient", "homme", "monsieur", "mr", "garçon", "veuf", "jeune-homme"],
                    &["patiente", "femme", "madame", "mme", "fillette", "veuve", "jeune-femme"],
                    true,
                ),
                cat(
                    "accords",
                    &[
                        "né", "âgé", "connu", "hospitalisé", "opéré", "retrouvé", "tombé", "allongé",
                        "amené", "adressé", "transféré", "venu", "seul", "vacciné", "orienté",
                        "désorienté", "fatigué", "inquiet", "conscient", "droitier", "gaucher",
                        "confus", "algique", "agité", "marié", "divorcé", "ralenti", "endormi",
                        "intubé", "transporté", "accompagné", "suivi", "traité", "blessé", "stressé",
                        "sportif", "gêné", "angoissé", "essoufflé", "sorti", "rentré", "levé",
                        "installé", "calme", "perdu",
                    ],
                    &[
                        "née", "âgée", "connue", "hospitalisée", "opérée", "retrouvée", "tombée",
                        "allongée", "amenée", "adressée", "transférée", "venue", "seule", "vaccinée",
                        "orientée", "désorientée", "fatiguée", "inquiète", "consciente", "droitière",
                        "gauchère", "confuse", "algique", "agitée", "mariée", "divorcée", "ralentie",
                        "endormie", "intubée", "transportée", "accompagnée", "suivie", "traitée",
                        "blessée", "stressée", "sportive", "gênée", "angoissée", "essoufflée",
                        "sortie", "rentrée", "levée", "installée", "calme", "perdue",
                    ],
                    true,
                ),
                cat(
                    "parenté",
                    &["fils", "frère", "père", "oncle", "neveu", "grand-père", "mari", "époux", "compagnon", "conjoint"],
                    &["fille", "sœur", "soeur", "mère", "tante", "nièce", "grand-mère", "épouse", "compagne", "conjointe"],
                    false,
                ),
            ]
            .into_iter()
            .map(strip_shared)
            .collect(),
        }
    }

    pub fn english() -> Self {
        GenderedTerms {
            language: Language::En,
            categories: vec![
                cat("pronouns", &["he", "him", "his", "himself"], &["she", "her", "hers", "herself"], true),
                cat(
                    "nouns",
                    &["man", "men", "gentleman", "male", "boy", "mr", "sir", "guy"],
                    &["woman", "women", "lady", "female", "girl", "mrs", "ms", "miss", "madam"],
                    true,
                ),
                cat(
                    "kinship",
                    &["husband", "father", "son", "brother", "boyfriend", "uncle", "nephew", "grandfather", "dad"],
                    &["wife", "mother", "daughter", "sister", "girlfriend", "aunt", "niece", "grandmother", "mom"],
                    false,
                ),
            ],
        }
    }

    pub fn for_language(language: Language) -> Self {
        match language {
            Language::Fr => Self::french(),
            Language::En => Self::english(),
        }
    }

    fn terms(&self, sex: Sex, residual_only: bool) -> HashSet<&str> {
        self.categories
            .iter()
            .filter(|c| !residual_only || c.residual)
            .flat_map(|c| match sex {
                Sex::Male => c.male.iter(),
                Sex::Female => c.female.iter(),
            })
            .map(String::as_str)
            .collect()
    }

    fn all_terms(&self) -> HashSet<&str> {
        let mut s = self.terms(Sex::Male, false);
        s.extend(self.terms(Sex::Female, false));
        s
    }
}

// Invariant words (e.g. "calme", "algique") carry no gender signal.
fn strip_shared(mut c: TermCategory) -> TermCategory {
    let shared: HashSet<String> = c.male.iter().filter(|m| c.female.contains(m)).cloned().collect();
    c.male.retain(|m| !shared.contains(m));
    c.female.retain(|f| !shared.contains(f));
    c
}

/// Lowercased word tokens. Apostrophes and punctuation split words; inner
/// hyphens are kept ("grand-mère").
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .map(|t| t.trim_matches('-'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Tokens that refer to a person, with French impersonal "il" ("il y a",
/// "il faut") removed.
fn gendered_hits<'a>(tokens: &'a [String], terms: &HashSet<&str>, language: Language) -> Vec<&'a str> {
    let mut hits = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if !terms.contains(t.as_str()) {
            continue;
        }
        if language == Language::Fr && t == "il" {
            if let Some(next) = tokens.get(i + 1) {
                if matches!(next.as_str(), "y" | "faut" | "existe") {
                    continue;
                }
            }
        }
        hits.push(t.as_str());
    }
    hits
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapThresholds {
    pub correct: f64,
    pub failed: f64,
}

impl Default for OverlapThresholds {
    fn default() -> Self {
        OverlapThresholds {
            correct: 0.90,
            failed: 0.70,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub quality: CfQuality,
    pub flipped_marker_found: bool,
    pub residual_source_gender_terms: Vec<String>,
    pub non_gender_token_overlap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

impl ValidationReport {
    pub fn parse_failure(reason: impl Into<String>) -> Self {
        ValidationReport {
            quality: CfQuality::Failed,
            flipped_marker_found: false,
            residual_source_gender_terms: Vec::new(),
            non_gender_token_overlap: 0.0,
            parse_error: Some(reason.into()),
        }
    }
}

/// Multiset intersection over the longer multiset; 1 when both are empty.
pub fn multiset_overlap(a: &[&str], b: &[&str]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in a {
        *counts.entry(t).or_default() += 1;
    }
    let mut shared = 0usize;
    for t in b {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                shared += 1;
            }
        }
    }
    shared as f64 / longest as f64
}

fn joined_text(r: &DecisionRecord) -> String {
    r.texts().join("\n")
}

/// Grade a candidate rewrite against its original.
///
/// The flipped marker requires the sex field to be swapped and, when the
/// original text mentions the source sex, at least one target-sex term in
/// the candidate text. Without the marker the pair is failed, which also
/// covers an unmodified copy.
pub fn validate_cf(
    original: &DecisionRecord,
    candidate: &DecisionRecord,
    terms: &GenderedTerms,
    thresholds: OverlapThresholds,
) -> ValidationReport {
    let lang = terms.language;
    let orig_tokens = tokenize(&joined_text(original));
    let cand_tokens = tokenize(&joined_text(candidate));

    let (source, target) = match original.sex {
        Some(s) => (s, s.flip()),
        None => return ValidationReport::parse_failure("original has no sex field"),
    };
    let source_residual = terms.terms(source, true);
    let target_any = terms.terms(target, false);

    let source_in_orig = gendered_hits(&orig_tokens, &source_residual, lang).len();
    let target_in_cand = gendered_hits(&cand_tokens, &target_any, lang).len();
    let sex_flipped = candidate.sex == Some(target);
    let flipped = sex_flipped && (source_in_orig == 0 || target_in_cand > 0);

    let mut residuals: Vec<String> = gendered_hits(&cand_tokens, &source_residual, lang)
        .into_iter()
        .map(str::to_string)
        .collect();
    residuals.sort();
    residuals.dedup();

    let all = terms.all_terms();
    let neutral = |tokens: &[String]| -> Vec<String> {
        tokens.iter().filter(|t| !all.contains(t.as_str())).cloned().collect()
    };
    let a = neutral(&orig_tokens);
    let b = neutral(&cand_tokens);
    let overlap = multiset_overlap(
        &a.iter().map(String::as_str).collect::<Vec<_>>(),
        &b.iter().map(String::as_str).collect::<Vec<_>>(),
    );

    let quality = if !flipped || overlap < thresholds.failed {
        CfQuality::Failed
    } else if !residuals.is_empty() || overlap < thresholds.correct {
        CfQuality::Incomplete
    } else {
        CfQuality::Correct
    };
    ValidationReport {
        quality,
        flipped_marker_found: flipped,
        residual_source_gender_terms: residuals,
        non_gender_token_overlap: overlap,
        parse_error: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStatus {
    Ok,
    ParseError,
    InvalidRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLogEntry {
    pub pair_id: String,
    pub status: GenerationStatus,
    pub quality: CfQuality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ValidationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<Vec<ChatMessage>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GenerationSettings {
    pub template: PromptTemplate,
    pub terms: GenderedTerms,
    pub thresholds: OverlapThresholds,
    pub checkpoint_every: usize,
    /// Keep request and response bodies in the log.
    pub log_bodies: bool,
}

impl GenerationSettings {
    pub fn for_language(language: Language) -> Self {
        GenerationSettings {
            template: PromptTemplate::for_language(language),
            terms: GenderedTerms::for_language(language),
            thresholds: OverlapThresholds::default(),
            checkpoint_every: 100,
            log_bodies: false,
        }
    }
}

/// Files that let an interrupted run resume where it stopped.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub pairs_path: PathBuf,
    pub log_path: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct GenerationOutput {
    /// Every pair whose reply parsed, in input order, failed ones included.
    pub pairs: Vec<CounterfactualPair>,
    pub log: Vec<GenerationLogEntry>,
    /// Records sent to the service during this run.
    pub requested: usize,
    /// Records taken from the checkpoint instead.
    pub resumed: usize,
}

impl GenerationOutput {
    pub fn quality_histogram(&self) -> BTreeMap<CfQuality, usize> {
        let mut h = BTreeMap::new();
        for e in &self.log {
            *h.entry(e.quality).or_insert(0) += 1;
        }
        h
    }

    /// Pairs eligible for the audit index set.
    pub fn admissible(&self) -> Vec<&CounterfactualPair> {
        self.pairs.iter().filter(|p| p.cf_quality.admissible()).collect()
    }
}

type Outcome = (GenerationLogEntry, Option<CounterfactualPair>);

fn process_one(
    record: &DecisionRecord,
    settings: &GenerationSettings,
    service: &dyn TextService,
) -> Result<Outcome> {
    let entry = |status, quality, report, detail| GenerationLogEntry {
        pair_id: record.id.clone(),
        status,
        quality,
        report,
        detail,
        request: None,
        response: None,
    };
    let flipped = match flip_tabular(record) {
        Ok(f) => f,
        Err(e) => {
            return Ok((
                entry(GenerationStatus::InvalidRecord, CfQuality::Failed, None, Some(e.to_string())),
                None,
            ))
        }
    };
    let messages = settings.template.messages(record);
    let reply = service.complete(&messages)?;
    let bodies = |mut e: GenerationLogEntry| {
        if settings.log_bodies {
            e.request = Some(messages.clone());
            e.response = Some(reply.clone());
        }
        e
    };
    let parsed = match parse_generation(&reply, &settings.template) {
        Ok(p) => p,
        Err(e) => {
            let report = ValidationReport::parse_failure(e.to_string());
            let e = entry(
                GenerationStatus::ParseError,
                CfQuality::Failed,
                Some(report),
                Some(e.to_string()),
            );
            return Ok((bodies(e), None));
        }
    };
    let mut candidate = parsed.apply(&flipped, &settings.template);
    // Tabular fields always come from the deterministic flip; only the sex
    // reported by the service is checked.
    candidate.sex = Some(parsed.sex);
    let report = validate_cf(record, &candidate, &settings.terms, settings.thresholds);
    let quality = report.quality;
    candidate.sex = flipped.sex;
    candidate.id = format!("{}:cf", record.id);
    let pair = CounterfactualPair::new(record.clone(), candidate, quality)?;
    Ok((
        bodies(entry(GenerationStatus::Ok, quality, Some(report), None)),
        Some(pair),
    ))
}

/// Rewrite every record into a counterfactual pair.
///
/// Requests run with the service's concurrency bound; results are kept in
/// input order. With a checkpoint, completed records are appended every
/// `checkpoint_every` records and skipped on the next run. If the service
/// stays unreachable the run stops with a `Service` error after saving what
/// finished.
pub fn generate_pairs(
    records: &[DecisionRecord],
    settings: &GenerationSettings,
    service: &dyn TextService,
    checkpoint: Option<&Checkpoint>,
) -> Result<GenerationOutput> {
    if settings.checkpoint_every == 0 {
        return Err(AuditError::Config("checkpoint interval must be positive".into()));
    }
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(AuditError::record(&r.id, "duplicate record id"));
        }
    }

    let mut done_log: HashMap<String, GenerationLogEntry> = HashMap::new();
    let mut done_pairs: HashMap<String, CounterfactualPair> = HashMap::new();
    if let Some(cp) = checkpoint {
        if cp.log_path.exists() {
            for e in io::read_jsonl::<GenerationLogEntry>(&cp.log_path)? {
                done_log.insert(e.pair_id.clone(), e);
            }
        }
        if cp.pairs_path.exists() {
            for p in io::read_jsonl::<CounterfactualPair>(&cp.pairs_path)? {
                done_pairs.insert(p.pair_id.clone(), p);
            }
        }
    }

    let pending: Vec<&DecisionRecord> = records
        .iter()
        .filter(|r| !done_log.contains_key(&r.id))
        .collect();
    let resumed = records.len() - pending.len();
    let workers = service.max_concurrency().max(1);

    let mut requested = 0;
    for chunk in pending.chunks(settings.checkpoint_every) {
        let results = map_bounded(chunk, workers, |r| process_one(r, settings, service));
        let mut failure = None;
        let mut new_log = Vec::new();
        let mut new_pairs = Vec::new();
        for res in results {
            match res {
                Ok((entry, pair)) => {
                    if entry.status != GenerationStatus::InvalidRecord {
                        requested += 1;
                    }
                    if let Some(p) = pair {
                        new_pairs.push(p);
                    }
                    new_log.push(entry);
                }
                Err(e) => {
                    if failure.is_none() {
                        failure = Some(e);
                    }
                }
            }
        }
        if let Some(cp) = checkpoint {
            // Pairs first: a log entry must never point at a missing pair.
            io::append_jsonl(&cp.pairs_path, &new_pairs)?;
            io::append_jsonl(&cp.log_path, &new_log)?;
        }
        for p in new_pairs {
            done_pairs.insert(p.pair_id.clone(), p);
        }
        for e in new_log {
            done_log.insert(e.pair_id.clone(), e);
        }
        if let Some(e) = failure {
            let saved = match checkpoint {
                Some(cp) => format!(
                    "; {} completed record(s) checkpointed in {}",
                    done_log.len(),
                    cp.log_path.display()
                ),
                None => String::new(),
            };
            return Err(AuditError::Service(format!("{e}{saved}")));
        }
    }

    let mut out = GenerationOutput {
        requested,
        resumed,
        ..Default::default()
    };
    for r in records {
        if let Some(e) = done_log.remove(&r.id) {
            out.log.push(e);
        }
        if let Some(p) = done_pairs.remove(&r.id) {
            out.pairs.push(p);
        }
    }
    Ok(out)
}

/// Up to `per_quality` log entries of each quality, for offline review.
pub fn sample_for_review(
    log: &[GenerationLogEntry],
    per_quality: usize,
    seed: u64,
) -> Vec<GenerationLogEntry> {
    let mut by_quality: BTreeMap<CfQuality, Vec<&GenerationLogEntry>> = BTreeMap::new();
    for e in log {
        by_quality.entry(e.quality).or_default().push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, mut entries) in by_quality {
        entries.shuffle(&mut rng);
        out.extend(entries.into_iter().take(per_quality).cloned());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn fr_record(sex: Sex, hpi: &str, pmh: &str) -> DecisionRecord {
        DecisionRecord::new("r1")
            .with_sex(sex)
            .with_age(40.0)
            .with_texts("", hpi, pmh)
            .with_tabular("temperature", 37.2)
    }

    #[test]
    fn flip_is_an_involution() {
        let r = fr_record(Sex::Male, "x", "y");
        let f = flip_tabular(&r).unwrap();
        assert_eq!(f.sex, Some(Sex::Female));
        assert_eq!(f.tabular, r.tabular);
        assert_eq!(flip_tabular(&f).unwrap(), r);
        assert!(flip_tabular(&DecisionRecord::new("x")).is_err());
    }

    #[test]
    fn french_prompt_layout() {
        let t = PromptTemplate::french();
        assert_eq!(t.exemplars.len(), DEFAULT_EXEMPLARS);
        let r = fr_record(Sex::Male, "douleur", "HTA");
        let p = build_prompt(&r, &t);
        assert!(p.starts_with(FR_SYSTEM));
        assert!(p.ends_with(
            "#### Anamnèse à changer ####\nAnamnèse originale:\nSexe patient : M, Anamnèse : douleur, Antécédents : HTA"
        ));
        let empty = fr_record(Sex::Female, "douleur", "");
        assert!(build_prompt(&empty, &t).ends_with("Antécédents : "));
    }

    #[test]
    fn english_prompt_layout() {
        let t = PromptTemplate::english();
        let r = DecisionRecord::new("e").with_sex(Sex::Female).with_texts("cough", "she coughs", "");
        let p = build_prompt(&r, &t);
        assert!(p.contains("#### Note to transform ####"));
        assert!(p.ends_with("Original note:\nPatient sex: F, Chief complaint: cough, Clinical note: she coughs"));
    }

    #[test]
    fn exemplar_count_is_configurable() {
        let t = PromptTemplate::french().with_exemplars(7).unwrap();
        assert_eq!(t.exemplars.len(), 7);
        assert!(PromptTemplate::french().with_exemplars(11).is_err());
    }

    #[test]
    fn exemplars_pass_their_own_validator() {
        for lang in [Language::Fr, Language::En] {
            let t = PromptTemplate::for_language(lang);
            let terms = GenderedTerms::for_language(lang);
            for ex in &t.exemplars {
                let a = parse_generation(&ex.input, &t).unwrap();
                let b = parse_generation(&ex.output, &t).unwrap();
                let base = DecisionRecord::new("x");
                let orig = a.apply(&base, &t);
                let cand = b.apply(&base, &t);
                let rep = validate_cf(&orig, &cand, &terms, OverlapThresholds::default());
                assert_eq!(rep.quality, CfQuality::Correct, "{lang:?} {ex:?} {rep:?}");
            }
        }
    }

    #[test]
    fn anchored_parse_keeps_commas() {
        let t = PromptTemplate::french();
        let p = parse_generation("Sexe patient : F, Anamnèse : chute, douleur, Antécédents : HTA", &t).unwrap();
        assert_eq!(p.sex, Sex::Female);
        assert_eq!(p.first, "chute, douleur");
        assert_eq!(p.second, "HTA");
    }

    #[test]
    fn parse_rejects_missing_or_swapped_anchors() {
        let t = PromptTemplate::french();
        assert!(parse_generation("Sexe patient : F, Anamnèse : chute", &t).is_err());
        assert!(parse_generation("Sexe patient : F, Antécédents : HTA, Anamnèse : chute", &t).is_err());
        assert!(parse_generation("n'importe quoi", &t).is_err());
        assert!(parse_generation("Sexe patient : X, Anamnèse : a, Antécédents : b", &t).is_err());
    }

    #[test]
    fn parse_takes_last_echoed_record() {
        let t = PromptTemplate::english();
        let reply = "Original note:\nPatient sex: M, Chief complaint: a, Clinical note: he\nTransformed note:\nPatient sex: F, Chief complaint: a, Clinical note: she";
        let p = parse_generation(reply, &t).unwrap();
        assert_eq!((p.sex, p.second.as_str()), (Sex::Female, "she"));
    }

    #[test]
    fn validator_examples() {
        let fr = GenderedTerms::french();
        let th = OverlapThresholds::default();
        let o = fr_record(Sex::Male, "Patient se plaint de céphalées", "");
        let c = fr_record(Sex::Female, "Patiente se plaint de céphalées", "");
        assert_eq!(validate_cf(&o, &c, &fr, th).quality, CfQuality::Correct);

        let en = GenderedTerms::english();
        let o = DecisionRecord::new("e").with_sex(Sex::Male).with_texts("", "he reports chest pain, his ECG normal", "");
        let c = DecisionRecord::new("e").with_sex(Sex::Female).with_texts("", "she reports chest pain, his ECG normal", "");
        let rep = validate_cf(&o, &c, &en, th);
        assert_eq!(rep.quality, CfQuality::Incomplete);
        assert_eq!(rep.residual_source_gender_terms, vec!["his"]);

        let o = DecisionRecord::new("e").with_sex(Sex::Male).with_texts(
            "",
            "he reports crushing chest pain radiating to the jaw since two hours with nausea",
            "",
        );
        let c = DecisionRecord::new("e").with_sex(Sex::Female).with_texts("", "she reports chest pain since two", "");
        let rep = validate_cf(&o, &c, &en, th);
        assert!(rep.non_gender_token_overlap < 0.70);
        assert_eq!(rep.quality, CfQuality::Failed);
    }

    #[test]
    fn noop_copy_is_failed() {
        let fr = GenderedTerms::french();
        let o = fr_record(Sex::Male, "Patient de 40 ans, il est tombé", "aucun");
        let rep = validate_cf(&o, &o, &fr, OverlapThresholds::default());
        assert_eq!(rep.quality, CfQuality::Failed);
        assert!(!rep.flipped_marker_found);
    }

    #[test]
    fn impersonal_il_is_not_a_residual() {
        let fr = GenderedTerms::french();
        let o = fr_record(Sex::Male, "Douleur apparue il y a deux jours, il est fatigué", "");
        let c = fr_record(Sex::Female, "Douleur apparue il y a deux jours, elle est fatiguée", "");
        let rep = validate_cf(&o, &c, &fr, OverlapThresholds::default());
        assert_eq!(rep.quality, CfQuality::Correct, "{rep:?}");
    }

    #[test]
    fn overlap_of_multisets() {
        assert_eq!(multiset_overlap(&[], &[]), 1.0);
        assert_eq!(multiset_overlap(&["a", "a", "b"], &["a", "b", "b"]), 2.0 / 3.0);
    }

    struct Scripted {
        calls: AtomicUsize,
        garble: Option<String>,
        down_after: Option<usize>,
    }

    impl TextService for Scripted {
        fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if let Some(k) = self.down_after {
                if n >= k {
                    return Err(AuditError::Service("connection refused".into()));
                }
            }
            let user = &messages[1].content;
            let last = user.lines().last().unwrap();
            if let Some(g) = &self.garble {
                if last.contains(g.as_str()) {
                    return Ok("désolé, je ne peux pas".into());
                }
            }
            Ok(last
                .replacen("Sexe patient : M", "Sexe patient : F", 1)
                .replace("Patient ", "Patiente ")
                .replace(" il ", " elle "))
        }

        fn max_concurrency(&self) -> usize {
            3
        }
    }

    fn corpus(n: usize) -> Vec<DecisionRecord> {
        (0..n)
            .map(|i| {
                DecisionRecord::new(format!("r{i:03}"))
                    .with_sex(Sex::Male)
                    .with_age(30.0 + i as f64)
                    .with_texts("", &format!("Patient douleur numéro {i} depuis hier"), "aucun")
            })
            .collect()
    }

    #[test]
    fn garbled_reply_is_logged_and_excluded() {
        let recs = corpus(100);
        let svc = Scripted {
            calls: AtomicUsize::new(0),
            garble: Some("numéro 42 ".into()),
            down_after: None,
        };
        let out = generate_pairs(&recs, &GenerationSettings::for_language(Language::Fr), &svc, None).unwrap();
        assert_eq!(out.log.len(), 100);
        assert_eq!(out.admissible().len(), 99);
        assert_eq!(out.quality_histogram()[&CfQuality::Failed], 1);
        let bad = out.log.iter().find(|e| e.pair_id == "r042").unwrap();
        assert_eq!(bad.status, GenerationStatus::ParseError);
        let ids: Vec<_> = out.pairs.iter().map(|p| p.pair_id.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn resume_requests_only_missing_records() {
        let dir = tempfile::tempdir().unwrap();
        let cp = Checkpoint {
            pairs_path: dir.path().join("pairs.partial.jsonl"),
            log_path: dir.path().join("log.jsonl"),
        };
        let recs = corpus(250);
        let mut settings = GenerationSettings::for_language(Language::Fr);
        settings.checkpoint_every = 100;
        let down = Scripted {
            calls: AtomicUsize::new(0),
            garble: None,
            down_after: Some(120),
        };
        let err = generate_pairs(&recs, &settings, &down, Some(&cp)).unwrap_err();
        assert!(matches!(err, AuditError::Service(_)));
        let saved: Vec<GenerationLogEntry> = io::read_jsonl(&cp.log_path).unwrap();
        assert_eq!(saved.len(), 120);

        let up = Scripted {
            calls: AtomicUsize::new(0),
            garble: None,
            down_after: None,
        };
        let out = generate_pairs(&recs, &settings, &up, Some(&cp)).unwrap();
        assert_eq!(up.calls.load(Ordering::SeqCst), 130);
        assert_eq!((out.requested, out.resumed), (130, 120));
        assert_eq!(out.pairs.len(), 250);
        assert_eq!(out.pairs[0].pair_id, "r000");
        assert_eq!(out.pairs[249].pair_id, "r249");
    }

    #[test]
    fn review_sample_is_capped_per_quality() {
        let mk = |id: &str, q| GenerationLogEntry {
            pair_id: id.into(),
            status: GenerationStatus::Ok,
            quality: q,
            report: None,
            detail: None,
            request: None,
            response: None,
        };
        let log: Vec<_> = (0..10)
            .map(|i| mk(&i.to_string(), if i < 7 { CfQuality::Correct } else { CfQuality::Incomplete }))
            .collect();
        let s = sample_for_review(&log, 2, 1);
        assert_eq!(s.len(), 4);
    }
}
