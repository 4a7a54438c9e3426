//! Declarative run configuration (TOML) layered over a dataset profile.

use std::fs;
use std::path::{Path, PathBuf};

use cf_audit_core::bootstrap::BootstrapConfig;
use cf_audit_core::counterfactual::{GenderedTerms, GenerationSettings, OverlapThresholds};
use cf_audit_core::ingest::FilterConfig;
use cf_audit_core::profile::Profile;
use cf_audit_core::{AuditError, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    /// Partial `FilterConfig`, merged over the profile preset.
    pub filter: Option<Value>,
    /// Partial `BootstrapConfig`.
    pub bootstrap: Option<Value>,
    pub generation: Option<GenerationSection>,
    pub report: Option<ReportSection>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    pub exemplars: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub log_bodies: Option<bool>,
    pub thresholds: Option<OverlapThresholds>,
    /// JSON file replacing the built-in gendered-term lexicon.
    pub terms: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub precision: Option<usize>,
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| AuditError::io(path.display().to_string(), e))?;
    toml::from_str(&text).map_err(|e| AuditError::Config(format!("{}: {e}", path.display())))
}

/// Recursively overlay `patch` onto `base`; tables merge, other values replace.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&Value>, what: &str) -> Result<T> {
    let Some(patch) = patch else {
        return serde_json::from_value(serde_json::to_value(base)?).map_err(AuditError::from);
    };
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, patch);
    serde_json::from_value(v).map_err(|e| AuditError::Config(format!("[{what}] {e}")))
}

/// Everything a command needs after flags, config file and profile are
/// combined. Flags win over the file, the file over the profile.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub profile: Profile,
    pub seed: u64,
    /// Seed given explicitly on the command line.
    pub seed_flag: Option<u64>,
    pub out_dir: PathBuf,
    pub config: RunConfig,
}

impl Resolved {
    pub fn new(config: RunConfig, profile: Option<Profile>, seed: Option<u64>, out_dir: PathBuf) -> Self {
        Resolved {
            profile: profile.or(config.profile).unwrap_or_default(),
            seed: seed.or(config.seed).unwrap_or(0),
            seed_flag: seed,
            out_dir,
            config,
        }
    }

    /// Output paths are placed under the output directory unless absolute.
    pub fn out(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    /// Profile preset, then the run config's `[filter]`, then `extra`.
    pub fn filter_with(&self, extra: Option<&Value>) -> Result<FilterConfig> {
        let mut f = overlay(&self.profile.filter(), self.config.filter.as_ref(), "filter")?;
        if extra.is_some() {
            f = overlay(&f, extra, "filter")?;
        }
        f.validate()?;
        Ok(f)
    }

    pub fn bootstrap(&self) -> Result<BootstrapConfig> {
        let mut b = overlay(&BootstrapConfig::default(), self.config.bootstrap.as_ref(), "bootstrap")?;
        b.seed = self.seed;
        b.validate()?;
        Ok(b)
    }

    pub fn generation(&self) -> Result<GenerationSettings> {
        let mut s = GenerationSettings::for_language(self.profile.language());
        if let Some(g) = &self.config.generation {
            if let Some(n) = g.exemplars {
                s.template = s.template.with_exemplars(n)?;
            }
            if let Some(n) = g.checkpoint_every {
                s.checkpoint_every = n;
            }
            if let Some(b) = g.log_bodies {
                s.log_bodies = b;
            }
            if let Some(t) = g.thresholds {
                s.thresholds = t;
            }
            if let Some(p) = &g.terms {
                s.terms = cf_audit_core::io::read_json::<GenderedTerms>(p)?;
            }
        }
        if !(0.0..=1.0).contains(&s.thresholds.failed) || s.thresholds.failed > s.thresholds.correct || s.thresholds.correct > 1.0 {
            return Err(AuditError::Config("overlap thresholds must satisfy 0 <= failed <= correct <= 1".into()));
        }
        Ok(s)
    }

    pub fn precision(&self) -> usize {
        self.config
            .report
            .as_ref()
            .and_then(|r| r.precision)
            .unwrap_or_else(|| self.profile.precision())
    }
}
