//! Dataset presets: label scale, language, filters and report precision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::counterfactual::PromptTemplate;
use crate::error::AuditError;
use crate::ingest::FilterConfig;
use crate::lexicon::Language;
use crate::model::TriageScale;
use crate::predictor::TriagePrompt;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// French ED notes, CIMU levels 2-5 after removing level 1.
    #[default]
    Bordeaux,
    /// English ED notes, ESI levels 1-4.
    Mimic,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Bordeaux => "bordeaux",
            Profile::Mimic => "mimic",
        }
    }

    pub fn language(self) -> Language {
        match self {
            Profile::Bordeaux => Language::Fr,
            Profile::Mimic => Language::En,
        }
    }

    /// Scale of the labels that enter the audit.
    pub fn scale(self) -> TriageScale {
        match self {
            Profile::Bordeaux => TriageScale::BORDEAUX,
            Profile::Mimic => TriageScale::MIMIC,
        }
    }

    pub fn filter(self) -> FilterConfig {
        match self {
            Profile::Bordeaux => FilterConfig::bordeaux(),
            Profile::Mimic => FilterConfig::mimic(),
        }
    }

    pub fn rewrite_template(self) -> PromptTemplate {
        PromptTemplate::for_language(self.language())
    }

    pub fn triage_prompt(self) -> TriagePrompt {
        TriagePrompt::for_language(self.language())
    }

    /// Decimals shown on percentages.
    pub fn precision(self) -> usize {
        match self {
            Profile::Bordeaux => 1,
            Profile::Mimic => 2,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bordeaux" | "chu" | "fr" => Ok(Profile::Bordeaux),
            "mimic" | "mimic-iv" | "en" => Ok(Profile::Mimic),
            other => Err(AuditError::Config(format!(
                "unknown profile '{other}' (expected bordeaux or mimic)"
            ))),
        }
    }
}
