//! Experiment configuration: a TOML file with dotted keys plus `key=value`
//! overrides applied on top.

use std::path::{Path, PathBuf};

use homcar::inference::{GammaPrior, McmcConfig, SpatialKind};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, CliError, CliResult};
use crate::graph_input::GraphSource;
use crate::io::{read_input, InputRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Bym,
    Homcar,
}

impl ModelName {
    pub fn spatial_kind(self) -> SpatialKind {
        match self {
            ModelName::Bym => SpatialKind::Icar,
            ModelName::Homcar => SpatialKind::HomCar,
        }
    }

    pub fn label(self) -> &'static str {
        self.spatial_kind().label()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub range_quantile: f64,
    pub marginal_sd: f64,
    pub baseline_expected: f64,
    pub replicates: usize,
    pub base_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            range_quantile: 0.25,
            marginal_sd: 0.2,
            baseline_expected: 5.0,
            replicates: 100,
            base_seed: 20_240_601,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSettings {
    pub chains: usize,
    pub burn_in: usize,
    pub samples_per_chain: usize,
    pub thinning: usize,
    pub adaptation_target: f64,
}

impl Default for McmcSettings {
    fn default() -> Self {
        let d = McmcConfig::default();
        Self {
            chains: d.chains,
            burn_in: d.burn_in,
            samples_per_chain: d.samples_per_chain,
            thinning: d.thinning,
            adaptation_target: d.adaptation_target,
        }
    }
}

impl McmcSettings {
    pub fn with_seed(&self, seed: u64) -> McmcConfig {
        McmcConfig {
            chains: self.chains,
            burn_in: self.burn_in,
            samples_per_chain: self.samples_per_chain,
            thinning: self.thinning,
            seed,
            adaptation_target: self.adaptation_target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub tau_u_shape: f64,
    pub tau_u_rate: f64,
    pub tau_v_shape: f64,
    pub tau_v_rate: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        let d = GammaPrior::default();
        Self {
            tau_u_shape: d.shape,
            tau_u_rate: d.rate,
            tau_v_shape: d.shape,
            tau_v_rate: d.rate,
        }
    }
}

impl PriorConfig {
    pub fn priors(&self) -> CliResult<(GammaPrior, GammaPrior)> {
        Ok((
            GammaPrior::new(self.tau_u_shape, self.tau_u_rate)?,
            GammaPrior::new(self.tau_v_shape, self.tau_v_rate)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub write_draws: bool,
    pub histogram_bins: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { write_draws: false, histogram_bins: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    /// Size of the replicate x model worker pool.
    pub jobs: usize,
    /// Restrict an experiment run to these replicate indices.
    pub only_replicates: Option<Vec<usize>>,
    pub graph: GraphSource,
    pub scenario: ScenarioConfig,
    pub models: Vec<ModelName>,
    pub mcmc: McmcSettings,
    pub priors: PriorConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            output_dir: PathBuf::from("out"),
            jobs: 1,
            only_replicates: None,
            graph: GraphSource::default(),
            scenario: ScenarioConfig::default(),
            models: vec![ModelName::Bym, ModelName::Homcar],
            mcmc: McmcSettings::default(),
            priors: PriorConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Directory holding this experiment's outputs.
    pub fn experiment_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn validate_for_simulation(&self) -> CliResult<()> {
        if self.scenario.replicates == 0 {
            return input_err("scenario.replicates must be at least 1");
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return input_err("name must be a non-empty plain directory name");
        }
        Ok(())
    }

    pub fn validate_for_experiment(&self) -> CliResult<()> {
        self.validate_for_simulation()?;
        if self.scenario.replicates < 2 {
            return input_err("an experiment needs scenario.replicates >= 2");
        }
        if self.models.is_empty() {
            return input_err("models must list at least one model");
        }
        if self.jobs == 0 {
            return input_err("jobs must be at least 1");
        }
        if let Some(only) = &self.only_replicates {
            if let Some(r) = only.iter().find(|&&r| r >= self.scenario.replicates) {
                return input_err(format!("replicate {r} is outside 0..{}", self.scenario.replicates));
            }
        }
        self.mcmc.with_seed(0).validate()?;
        self.priors.priors()?;
        Ok(())
    }
}

/// Parses `value` as a TOML scalar or array, falling back to a bare string.
pub fn parse_value(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return input_err(format!("invalid override key `{key}`"));
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = match entry {
            toml::Value::Table(t) => t,
            _ => return input_err(format!("override `{key}`: `{part}` is not a table")),
        };
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `key=value` and parses the value with [`parse_value`].
pub fn parse_override(s: &str) -> CliResult<(String, toml::Value)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), parse_value(v.trim()))),
        _ => input_err(format!("override `{s}` is not of the form key=value")),
    }
}

/// Loads the optional config file, applies overrides in order, and
/// deserialises the result. Later overrides win.
pub fn load_config(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> CliResult<(ExperimentConfig, Vec<InputRecord>)> {
    let (mut table, inputs) = match path {
        Some(p) => {
            let (text, rec) = read_input(p)?;
            let table = text
                .parse::<toml::Table>()
                .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            (table, vec![rec])
        }
        None => (toml::Table::new(), Vec::new()),
    };
    for (k, v) in overrides {
        set_dotted(&mut table, k, v.clone())?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Input(format!("config: {e}")))?;
    Ok((cfg, inputs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let (cfg, inputs) = load_config(None, &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert!(inputs.is_empty());

        let overrides: Vec<_> = [
            "scenario.replicates=7",
            "graph.lattice=4x5",
            "models=[\"homcar\"]",
            "mcmc.thinning = 2",
            "scenario.replicates=8",
        ]
        .iter()
        .map(|s| parse_override(s).unwrap())
        .collect();
        let (cfg, _) = load_config(None, &overrides).unwrap();
        assert_eq!(cfg.scenario.replicates, 8);
        assert_eq!(cfg.graph.lattice.as_deref(), Some("4x5"));
        assert_eq!(cfg.models, vec![ModelName::Homcar]);
        assert_eq!(cfg.mcmc.thinning, 2);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(load_config(None, &[parse_override("scenario.replicatez=3").unwrap()]).is_err());
        assert!(load_config(None, &[parse_override("scenario.replicates=many").unwrap()]).is_err());
        assert!(parse_override("novalue").is_err());
        assert_eq!(parse_override("a.b = 1").unwrap(), ("a.b".into(), toml::Value::Integer(1)));
    }

    #[test]
    fn validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.replicates = 0;
        assert!(cfg.validate_for_simulation().is_err());
        cfg.scenario.replicates = 1;
        assert!(cfg.validate_for_simulation().is_ok());
        assert!(cfg.validate_for_experiment().is_err());
        cfg.scenario.replicates = 2;
        assert!(cfg.validate_for_experiment().is_ok());
        cfg.only_replicates = Some(vec![5]);
        assert!(cfg.validate_for_experiment().is_err());
    }
}
