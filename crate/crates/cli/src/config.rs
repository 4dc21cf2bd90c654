//! JSON run configuration.
//!
//! A config file is one JSON object. The keys `seed`, `threads` and `out`
//! are shared by every command; the rest must belong to the command being
//! run. Unknown keys are rejected. Relative paths inside a config resolve
//! against the config file's directory. Command-line flags win over config
//! values.

use crate::error::{CliError, CliResult};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

/// A loaded config split into its shared part and the command-specific rest.
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub dir: PathBuf,
    pub shared: SharedConfig,
    rest: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let Value::Object(mut map) = serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))? else {
            return Err(CliError::format(path, "config must be a JSON object"));
        };
        let mut shared = Map::new();
        for key in ["seed", "threads", "out"] {
            if let Some(v) = map.remove(key) {
                shared.insert(key.to_string(), v);
            }
        }
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut shared: SharedConfig =
            serde_json::from_value(Value::Object(shared)).map_err(|e| CliError::format(path, e.to_string()))?;
        shared.out = shared.out.map(|p| dir.join(p));
        Ok(Self { dir, shared, rest: map })
    }

    /// Deserializes the command-specific keys.
    pub fn command<T: DeserializeOwned + Default>(&self, command: &str) -> CliResult<T> {
        if self.rest.is_empty() {
            return Ok(T::default());
        }
        serde_json::from_value(Value::Object(self.rest.clone()))
            .map_err(|e| CliError::Usage(format!("config for '{command}': {e}")))
    }

    pub fn resolve(&self, p: PathBuf) -> PathBuf {
        self.dir.join(p)
    }
}

/// Flag value if given, else the config value, else an error naming the flag.
pub fn required<T>(flag: Option<T>, config: Option<T>, name: &str) -> CliResult<T> {
    flag.or(config).ok_or_else(|| CliError::Usage(format!("missing required --{name} (flag or config key)")))
}
