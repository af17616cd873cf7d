//! Flat key=value run configuration: an optional config file plus
//! command-line `--key value` overrides. Every key must be consumed by
//! the command; leftovers are usage errors. Each run writes the resolved
//! snapshot next to its outputs so results are reproducible from the
//! snapshot alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl RunConfig {
    /// Build from CLI args: `--config FILE` loads the file first, then
    /// every `--key value` pair overrides it. `--flag` without a value is
    /// shorthand for `key=true` (key names use underscores).
    pub fn from_args(args: &[String]) -> Result<RunConfig, UsageError> {
        let mut values = BTreeMap::new();
        let mut overrides: Vec<(String, String)> = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| UsageError(format!("expected --key, got '{arg}'")))?
                .replace('-', "_");
            let value = if i + 1 < args.len() && !args[i + 1].starts_with("--") {
                i += 1;
                args[i].clone()
            } else {
                "true".to_string()
            };
            overrides.push((key, value));
            i += 1;
        }
        for (k, v) in &overrides {
            if k == "config" {
                let text = std::fs::read_to_string(v)
                    .map_err(|e| UsageError(format!("cannot read config {v}: {e}")))?;
                for (ln, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let (key, val) = line.split_once('=').ok_or_else(|| {
                        UsageError(format!("{v}:{}: expected key=value", ln + 1))
                    })?;
                    values.insert(key.trim().replace('-', "_"), val.trim().to_string());
                }
            }
        }
        for (k, v) in overrides {
            if k != "config" {
                values.insert(k, v);
            }
        }
        Ok(RunConfig { values, consumed: Default::default() })
    }

    fn raw(&self, key: &str) -> Option<&String> {
        let v = self.values.get(key);
        if v.is_some() {
            self.consumed.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn str_opt(&self, key: &str) -> Option<String> {
        self.raw(key).cloned()
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.raw(key).cloned().unwrap_or_else(|| default.to_string())
    }

    pub fn required(&self, key: &str) -> Result<String, UsageError> {
        self.raw(key)
            .cloned()
            .ok_or_else(|| UsageError(format!("missing required option --{key}")))
    }

    pub fn path_required(&self, key: &str) -> Result<PathBuf, UsageError> {
        Ok(PathBuf::from(self.required(key)?))
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, UsageError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| UsageError(format!("invalid value for --{key}: '{v}'"))),
        }
    }

    pub fn parse_opt<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, UsageError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| UsageError(format!("invalid value for --{key}: '{v}'"))),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool, UsageError> {
        match self.raw(key).map(|s| s.as_str()) {
            None => Ok(false),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(UsageError(format!("invalid boolean for --{key}: '{v}'"))),
        }
    }

    /// Master seed: the `seed` key, overridden by DEER_SEED when set.
    pub fn master_seed(&self, default: u64) -> Result<u64, UsageError> {
        let from_flag = self.parse_or("seed", default)?;
        if let Ok(env) = std::env::var("DEER_SEED") {
            return env
                .parse()
                .map_err(|_| UsageError(format!("invalid DEER_SEED '{env}'")));
        }
        Ok(from_flag)
    }

    /// Fail on any key no command consumed.
    pub fn reject_unknown(&self) -> Result<(), UsageError> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> =
            self.values.keys().filter(|k| !consumed.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(UsageError(format!(
                "unknown option(s): {}",
                unknown
                    .iter()
                    .map(|k| format!("--{k}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }

    /// Resolved key=value snapshot (sorted, one per line).
    pub fn snapshot(&self, extra: &[(&str, String)]) -> String {
        let mut map = self.values.clone();
        for (k, v) in extra {
            map.insert(k.to_string(), v.clone());
        }
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn write_snapshot(&self, path: &Path, extra: &[(&str, String)]) -> std::io::Result<()> {
        std::fs::write(path, self.snapshot(extra))
    }
}
