use std::path::{Path, PathBuf};

use ctsnmm::data::{Expansion, FeatureRecipe, StudyConfig};
use ctsnmm::harness::ScenarioConfig;
use ctsnmm::simgen::GenConfig;
use ctsnmm::snmm::EstimatorTag;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    pub schema: u32,
    pub scenarios: Vec<ScenarioConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateFile {
    pub schema: u32,
    pub generator: GenConfig,
    /// Dataset stream index, as in replicate `r` of a simulation.
    #[serde(default)]
    pub replicate: u64,
}

/// Covariates of one working model, named by CSV column.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub covariates: Vec<String>,
    #[serde(default)]
    pub visit_history: bool,
    #[serde(default)]
    pub treated: bool,
}

fn default_bootstrap() -> usize {
    100
}

fn default_estimators() -> Vec<EstimatorTag> {
    vec![
        EstimatorTag::Preliminary,
        EstimatorTag::Cont1,
        EstimatorTag::Cont2,
    ]
}

fn default_bins() -> usize {
    ctsnmm::discrete::DEFAULT_BINS
}

fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeFile {
    pub schema: u32,
    /// Long-format visit file, relative to the config file.
    #[serde(default)]
    pub long: Option<PathBuf>,
    /// Subject-level file, relative to the config file.
    #[serde(default)]
    pub subjects: Option<PathBuf>,
    pub tau: f64,
    pub time_independent: Vec<String>,
    pub time_dependent: Vec<String>,
    /// Defaults to every covariate.
    #[serde(default)]
    pub treatment_model: Option<ModelSpec>,
    #[serde(default)]
    pub censoring_model: Option<ModelSpec>,
    /// Features of the nuisance regressions and the outcome-mean model.
    #[serde(default)]
    pub nuisance_model: Option<ModelSpec>,
    #[serde(default)]
    pub expansion: Expansion,
    #[serde(default = "yes")]
    pub outcome_model: bool,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorTag>,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

impl AnalyzeFile {
    fn recipe(&self, spec: Option<&ModelSpec>, which: &str) -> Result<FeatureRecipe, CliError> {
        let Some(spec) = spec else {
            return Ok(FeatureRecipe::all(
                self.time_independent.len(),
                self.time_dependent.len(),
            ));
        };
        let mut recipe = FeatureRecipe {
            visit_history: spec.visit_history,
            treated: spec.treated,
            ..FeatureRecipe::none()
        };
        for name in &spec.covariates {
            if let Some(i) = self.time_independent.iter().position(|n| n == name) {
                recipe.time_independent.push(i);
            } else if let Some(i) = self.time_dependent.iter().position(|n| n == name) {
                recipe.time_dependent.push(i);
            } else {
                return Err(CliError::config(format!(
                    "{which}.covariates: unknown covariate '{name}'"
                )));
            }
        }
        Ok(recipe)
    }

    pub fn study(&self) -> Result<StudyConfig, CliError> {
        let mut study = StudyConfig::full(
            self.tau,
            self.time_independent.clone(),
            self.time_dependent.clone(),
        )?;
        study.treatment = self.recipe(self.treatment_model.as_ref(), "treatment_model")?;
        study.censoring = self.recipe(self.censoring_model.as_ref(), "censoring_model")?;
        study.nuisance = self.recipe(self.nuisance_model.as_ref(), "nuisance_model")?;
        study.expansion = self.expansion;
        Ok(study)
    }
}

pub fn load<T: DeserializeOwned>(path: &Path, schema: impl Fn(&T) -> u32) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
    let parsed: T = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let version = schema(&parsed);
    if version != SCHEMA_VERSION {
        return Err(CliError::config(format!(
            "{}: schema: unsupported version {version} (expected {SCHEMA_VERSION})",
            path.display()
        )));
    }
    Ok(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(extra: &str) -> AnalyzeFile {
        serde_json::from_str(&format!(
            r#"{{"schema": 1, "tau": 2.0, "time_independent": ["sex", "age"], "time_dependent": ["cd4"]{extra}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn recipes_resolve_names() {
        let f = file(r#", "censoring_model": {"covariates": ["cd4", "age"], "treated": true}"#);
        let study = f.study().unwrap();
        assert_eq!(study.treatment, FeatureRecipe::all(2, 1));
        assert_eq!(study.censoring.time_independent, vec![1]);
        assert_eq!(study.censoring.time_dependent, vec![0]);
        assert!(study.censoring.treated);
        assert_eq!(f.estimators, default_estimators());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<AnalyzeFile>(
            r#"{"schema": 1, "tau": 2, "time_independent": [], "time_dependent": [], "boot": 3}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("boot"));
        let err = serde_json::from_str::<GenerateFile>(
            r#"{"schema": 1, "generator": {"n": 3, "nn": 1}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("nn"));
    }
}
