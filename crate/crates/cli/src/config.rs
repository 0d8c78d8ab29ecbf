//! Study configuration files (TOML) for `simulate`.
//!
//! ```toml
//! scenario = "b"
//! k = 1
//! replications = 2000
//! seed = 7          # assignment streams
//! table_seed = 71   # potential outcomes
//! weights = "sample"
//! level = 0.95
//! estimands = ["tau t=1", "tau t=2 history=A"]
//!
//! [generator]
//! kind = "gaussian_model"
//! beta1 = [0.0, 0.0, 1.0, 1.0]
//! beta2 = [0.0, 1.0, 0.0, 1.0]
//! rho = 0.3
//!
//! [design]
//! AA = 100
//! AB = 100
//! BA = 100
//! BB = 100
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crossover_core::estimands::two_period_effects;
use crossover_core::simulator::{GeneratorKind, ScenarioGenerator, Study};
use crossover_core::{CrossoverDesign, FitOptions, Scenario, TreatmentSequence, WeightChoice};
use serde::Deserialize;

use crate::error::{CliError, CliResult};
use crate::grammar::parse_estimand;

fn default_replications() -> usize {
    10_000
}

fn default_level() -> f64 {
    0.95
}

fn default_weights() -> String {
    "sample".into()
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub table_seed: u64,
    #[serde(default = "default_weights")]
    pub weights: String,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub hc1: bool,
    #[serde(default)]
    pub estimands: Vec<String>,
    pub generator: GeneratorKind,
    pub design: BTreeMap<String, usize>,
}

impl StudyConfig {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Parse(format!("study config: {e}")))
    }

    pub fn design(&self) -> CliResult<CrossoverDesign> {
        let counts = self
            .design
            .iter()
            .map(|(z, n)| {
                z.parse::<TreatmentSequence>()
                    .map(|z| (z, *n))
                    .map_err(|e| CliError::Parse(format!("study config design: {e}")))
            })
            .collect::<CliResult<Vec<_>>>()?;
        Ok(CrossoverDesign::new(2, counts)?)
    }

    pub fn generator(&self) -> CliResult<ScenarioGenerator> {
        Ok(ScenarioGenerator::new(self.generator.clone(), self.scenario, self.table_seed)?)
    }

    pub fn study(&self) -> CliResult<Study> {
        let design = self.design()?;
        let specs = if self.estimands.is_empty() {
            vec![two_period_effects()]
        } else {
            self.estimands
                .iter()
                .map(|e| parse_estimand(e, design.scope()))
                .collect::<CliResult<_>>()?
        };
        let weights = match self.weights.as_str() {
            "sample" => WeightChoice::Sample,
            "pooled" => WeightChoice::Pooled,
            other => {
                return Err(CliError::Parse(format!(
                    "study config: weights must be sample or pooled, got {other:?}"
                )))
            }
        };
        Ok(Study {
            design,
            scenario: self.scenario,
            k: self.scenario.needs_order().then(|| self.k.unwrap_or(1)),
            specs,
            replications: self.replications,
            weights,
            options: FitOptions { hc1: self.hc1 },
            level: self.level,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
scenario = "c"
replications = 50
seed = 3

[generator]
kind = "constant_effect"
tau1 = 1.0
tau2_b = 1.0
carry_a = 0.0
carry_b = 0.0

[design]
AB = 10
BA = 10
"#;

    #[test]
    fn parses_and_builds_study() {
        let c = StudyConfig::parse(EXAMPLE).unwrap();
        let s = c.study().unwrap();
        assert_eq!(s.k, Some(1));
        assert_eq!(s.replications, 50);
        assert_eq!(s.design.total_units(), 20);
        assert_eq!(s.design.scope().len(), 4);
        assert_eq!(s.specs[0].dimension(), 5);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let e = StudyConfig::parse(&format!("colour = 1\n{EXAMPLE}")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
