//! `key=value` run configuration with flag > file > default precedence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Ordered settings after merging defaults, an optional config file and
/// command-line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    keys: Vec<(&'static str, String)>,
}

impl RunConfig {
    /// `defaults` fixes the accepted keys and their order.
    pub fn resolve(
        defaults: &[(&'static str, &str)],
        file: Option<&Path>,
        flags: &[(&'static str, Option<String>)],
    ) -> Result<Self, CliError> {
        let mut keys: Vec<(&'static str, String)> =
            defaults.iter().map(|&(k, v)| (k, v.to_string())).collect();
        if let Some(path) = file {
            for (k, v) in parse_file(path)? {
                let slot = keys.iter_mut().find(|(name, _)| *name == k).ok_or_else(|| {
                    let known: Vec<&str> = defaults.iter().map(|(k, _)| *k).collect();
                    CliError::Usage(format!(
                        "{}: unknown key '{k}' (accepted: {})",
                        path.display(),
                        known.join(", ")
                    ))
                })?;
                slot.1 = v;
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                let slot = keys
                    .iter_mut()
                    .find(|(name, _)| name == k)
                    .expect("flag keys are declared in the defaults");
                slot.1 = v.clone();
            }
        }
        Ok(RunConfig { keys })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.keys
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| CliError::Usage(format!("invalid value for {key}: '{raw}'")))
    }

    /// Fails with a usage error naming every missing required key.
    pub fn require(&self, required: &[&str]) -> Result<(), CliError> {
        let missing: Vec<String> = required
            .iter()
            .filter(|k| self.raw(k).is_empty())
            .map(|k| format!("--{}", k.replace('_', "-")))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "missing required settings: {} (pass the flags or set them in --config)",
                missing.join(", ")
            )))
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.keys {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("resolved_config.txt");
        fs::write(&path, self.to_text()).map_err(|e| CliError::io(&path, e))
    }
}

fn parse_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{}:{}: expected key=value", path.display(), n + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
