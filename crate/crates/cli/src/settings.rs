//! Line-based `key = value` configuration files. Command-line flags take
//! precedence over file values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "threads",
    "out_dir",
    "data_dir",
    "corpus",
    "stopwords",
    "min_docs",
    "max_df",
    "dim",
    "window",
    "epochs",
    "batch_size",
    "lr",
    "num_topics",
    "hidden",
    "weight_decay",
    "mode",
    "embeddings",
    "patience",
    "checkpoint",
    "top_n",
    "k",
];

#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    path: Option<PathBuf>,
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{}:{}: expected key = value", path.display(), i + 1))
            })?;
            let key = key.trim().replace('-', "_");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Config(format!("{}:{}: unknown key {key:?}", path.display(), i + 1)));
            }
            values.insert(key, value.trim().to_owned());
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            values,
        })
    }

    /// The flag value if given, else the parsed file value.
    pub fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| {
                let file = self.path.as_deref().map(Path::display);
                CliError::Config(format!("{}: invalid {key} {v:?}: {e}", file.expect("values come from a file")))
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }
}
