//! Strict, versioned experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coercivity::SpaceSpec;
use crate::density::{Estimator, GridSpec, McSpec};
use crate::dynamics::{Layout, SystemSpec};
use crate::error::{Error, Result};
use crate::io;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub system: SystemSpec,
    #[serde(default)]
    pub layout: Layout,
    #[serde(default)]
    pub stages: Stages,
    #[serde(default)]
    pub density: DensityStage,
    #[serde(default)]
    pub space: SpaceSpec,
    #[serde(default)]
    pub coercivity: CoercivityStage,
    #[serde(default)]
    pub learn: LearnStage,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    #[serde(default = "yes")]
    pub simulate: bool,
    #[serde(default = "yes")]
    pub density: bool,
    #[serde(default = "yes")]
    pub coercivity: bool,
    #[serde(default)]
    pub learn: bool,
}

fn yes() -> bool {
    true
}

impl Default for Stages {
    fn default() -> Self {
        Self { simulate: true, density: true, coercivity: true, learn: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityStage {
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub mc: McSpec,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    /// Snapshot times compared against the stationary density; defaults to
    /// every stored snapshot after `t = 0`.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
}

fn default_estimator() -> Estimator {
    Estimator::Histogram
}

impl Default for DensityStage {
    fn default() -> Self {
        Self { grid: GridSpec::default(), mc: McSpec::default(), estimator: default_estimator(), times: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoercivityStage {
    /// Horizons `T` for time-averaged reports.
    #[serde(default)]
    pub horizons: Vec<f64>,
    /// The constant `C` of the time threshold; the theory leaves it open.
    #[serde(default = "one")]
    pub c_constant: f64,
    /// Snapshots from this time on are pooled as stationary samples;
    /// defaults to half the horizon.
    #[serde(default)]
    pub stationary_from: Option<f64>,
    #[serde(default = "one_usize")]
    pub thin: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

impl Default for CoercivityStage {
    fn default() -> Self {
        Self { horizons: Vec::new(), c_constant: 1.0, stationary_from: None, thin: 1, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnStage {
    #[serde(default)]
    pub window: Option<(f64, f64)>,
    #[serde(default)]
    pub reg: Option<f64>,
    /// Space for the regression; defaults to the coercivity space.
    #[serde(default)]
    pub space: Option<SpaceSpec>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.system.validate()?;
        Ok(cfg)
    }

    /// Parses a file and returns the config with the SHA-256 of its bytes.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, io::sha256_hex(&bytes)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"schema_version":1,"system":{"n":3,"d":1,"potential":{"family":"pure_power","gamma":2.0},
        "dt":0.01,"t_end":1.0,"n_paths":10,"initial":{"kind":"point","x0":[0,1,2]},"seed":1,"snapshots":{"every":10}}}"#;

    #[test]
    fn defaults_fill_optional_sections() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert!(c.stages.simulate && c.stages.density && c.stages.coercivity && !c.stages.learn);
        assert_eq!(c.space, SpaceSpec::Hats { n: 8, r_max: None });
        assert_eq!(c.coercivity.c_constant, 1.0);
        assert_eq!(c.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn rejects_unknown_fields_versions_and_bad_systems() {
        let extra = MINIMAL.replacen("\"schema_version\":1", "\"schema_version\":1,\"colour\":3", 1);
        assert!(matches!(ExperimentConfig::parse(&extra), Err(Error::Json(_))));
        let version = MINIMAL.replacen("\"schema_version\":1", "\"schema_version\":2", 1);
        assert!(matches!(ExperimentConfig::parse(&version), Err(Error::Config(_))));
        let d4 = MINIMAL.replacen("\"d\":1", "\"d\":4", 1);
        assert!(matches!(ExperimentConfig::parse(&d4), Err(Error::Config(_))));
    }
}
