//! Sex-specific exclusion lexicons (French and English stem lists).
//!
//! Matching is plain case-insensitive substring search. Stems are kept
//! exactly as published, accented and unaccented spellings side by side,
//! with no further Unicode folding.

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    Fr,
    En,
}

impl std::str::FromStr for Language {
    type Err = AuditError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fr" | "french" => Ok(Language::Fr),
            "en" | "english" => Ok(Language::En),
            other => Err(AuditError::Config(format!("unknown language {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconCategory {
    pub name: String,
    pub stems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenderLexicon {
    pub language: Language,
    pub categories: Vec<LexiconCategory>,
}

fn category(name: &str, stems: &[&str]) -> LexiconCategory {
    LexiconCategory {
        name: name.to_string(),
        stems: stems.iter().map(|s| s.to_string()).collect(),
    }
}

impl GenderLexicon {
    /// French stem list used on the Bordeaux data.
    pub fn french() -> Self {
        GenderLexicon {
            language: Language::Fr,
            categories: vec![
                category(
                    "female_reproductive_anatomy",
                    &["uter", "utér", "ovair", "ovarien", "vagin", "vulv", "mamma", "fallope"],
                ),
                category(
                    "male_reproductive_anatomy",
                    &["prostat", "testicul", "peni", "pénien", "scrot", "séminale"],
                ),
                category(
                    "pregnancy",
                    &["grossesse", "enceinte", "fausse couche", "ivg", "curetage"],
                ),
                category(
                    "female_conditions",
                    &["menopause", "ménorrhée", "règles", "endométriose", "endometriose"],
                ),
                category("male_conditions", &["andropause"]),
                category(
                    "procedures",
                    &[
                        "hystérectomie",
                        "hysterectomie",
                        "ligature trompes",
                        "cesarienne",
                        "cezarienne",
                    ],
                ),
                category("specialties", &["Gyné", "Obsté", "gyneco", "obste"]),
                category("neoplasms", &["cancer du sein", "K sein"]),
            ],
        }
    }

    /// English stem list used on MIMIC-IV.
    pub fn english() -> Self {
        GenderLexicon {
            language: Language::En,
            categories: vec![
                category(
                    "female_reproductive_anatomy",
                    &["uter", "uterin", "ovar", "ovarian", "vagin", "vulv", "mammar", "fallop"],
                ),
                category(
                    "male_reproductive_anatomy",
                    &["prostat", "testic", "penil", "scrot", "seminal"],
                ),
                category("pregnancy", &["pregnan", "miscarr", "abortion", "curettage"]),
                category(
                    "female_conditions",
                    &["menopaus", "menstruat", "menses", "endometrios"],
                ),
                category("male_conditions", &["andropaus"]),
                category(
                    "procedures",
                    &["hysterectom", "tubal ligation", "cesare", "c-section"],
                ),
                category("specialties", &["gyneco", "obstet", "ob/gyn"]),
                category("neoplasms", &["ovarian cancer", "prostate cancer"]),
            ],
        }
    }

    pub fn for_language(language: Language) -> Self {
        match language {
            Language::Fr => Self::french(),
            Language::En => Self::english(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stems().next().is_none() {
            return Err(AuditError::Config("lexicon has no stems".into()));
        }
        if self.stems().any(|s| s.trim().is_empty()) {
            return Err(AuditError::Config("lexicon contains an empty stem".into()));
        }
        Ok(())
    }

    pub fn stems(&self) -> impl Iterator<Item = &str> {
        self.categories
            .iter()
            .flat_map(|c| c.stems.iter().map(String::as_str))
    }

    /// Stems occurring in `text`, in lexicon order, without duplicates.
    pub fn matches<'a>(&'a self, text: &str) -> Vec<&'a str> {
        let haystack = text.to_lowercase();
        let mut found: Vec<&str> = Vec::new();
        for stem in self.stems() {
            if haystack.contains(&stem.to_lowercase()) && !found.contains(&stem) {
                found.push(stem);
            }
        }
        found
    }

    pub fn is_match(&self, text: &str) -> bool {
        let haystack = text.to_lowercase();
        self.stems().any(|s| haystack.contains(&s.to_lowercase()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pregnancy_stem_matches() {
        let fr = GenderLexicon::french();
        assert_eq!(fr.matches("Patiente enceinte de 12 SA"), vec!["enceinte"]);
    }

    #[test]
    fn clean_text_does_not_match() {
        let fr = GenderLexicon::french();
        assert!(fr.matches("douleur thoracique").is_empty());
        assert!(!fr.is_match("douleur thoracique"));
    }

    #[test]
    fn english_procedure_stem() {
        let en = GenderLexicon::english();
        assert_eq!(en.matches("s/p hysterectomy 2015"), vec!["hysterectom"]);
    }

    #[test]
    fn matching_is_case_insensitive() {
        let fr = GenderLexicon::french();
        assert_eq!(fr.matches("SUIVI EN GYNÉCOLOGIE"), vec!["Gyné"]);
        assert_eq!(fr.matches("atcd de k sein opéré"), vec!["K sein"]);
    }

    #[test]
    fn substring_over_matching_is_intended() {
        let en = GenderLexicon::english();
        assert_eq!(en.matches("uterine fibroids"), vec!["uter", "uterin"]);
    }

    #[test]
    fn published_stem_counts() {
        assert_eq!(GenderLexicon::french().stems().count(), 36);
        assert_eq!(GenderLexicon::english().stems().count(), 31);
        GenderLexicon::french().validate().unwrap();
        GenderLexicon::english().validate().unwrap();
    }

    #[test]
    fn empty_stem_rejected() {
        let mut lx = GenderLexicon::english();
        lx.categories[0].stems.push(" ".into());
        assert!(lx.validate().is_err());
    }
}
