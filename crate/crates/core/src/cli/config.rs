use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::market::Credit;

/// Contents of a `--config` file.
///
/// ```toml
/// seed = 42
/// log_dir = "runs"
///
/// [daemon]
/// host_id = "h1"
/// cpu = 4.0
/// mem = 8192
/// ```
#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub until: Option<f64>,
    pub log_dir: Option<PathBuf>,
    #[serde(default)]
    pub daemon: DaemonConfig,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DaemonConfig {
    pub host_id: Option<String>,
    pub cpu: Option<f64>,
    pub mem: Option<u64>,
    pub disk: Option<u64>,
    pub boot: Option<f64>,
    pub heartbeat: Option<f64>,
    pub window: Option<f64>,
    pub supply: Option<Credit>,
    pub journal: Option<PathBuf>,
}

impl Config {
    /// Reads `path`, or gives the empty config when there is none.
    pub fn load(path: Option<&Path>) -> Result<Config, String> {
        let Some(path) = path else { return Ok(Config::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}
