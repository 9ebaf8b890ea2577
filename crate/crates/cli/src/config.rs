//! `key=value` configuration files.
//!
//! Blank lines and `#` comments are skipped. Values given on the command line
//! win over the file, which wins over the built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ecg_tcn::Error;

pub const KEYS: [&str; 12] = [
    "epochs",
    "batch_size",
    "lr",
    "dropout",
    "val_fraction",
    "beta1",
    "beta2",
    "eps",
    "precision",
    "budget",
    "double_buffer",
    "golden",
];

#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, found {line:?}"),
            })?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Usage(format!(
                    "config line {}: unknown key {k:?}",
                    i + 1
                )));
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, msg } => {
                Error::Usage(format!("{}: line {line}: {msg}", path.display()))
            }
            other => other,
        })
    }

    /// Flag value if given, else the file's, else `default`.
    pub fn pick<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, Error> {
        debug_assert!(KEYS.contains(&key));
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Usage(format!("config value {key}={s:?} does not parse"))),
            None => Ok(default),
        }
    }
}
