//! Flat `key = value` experiment files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::Failure;

/// Keys accepted in config files, with the help text shown by `--help`.
pub const KEYS: [(&str, &str); 17] = [
    ("preset", "dataset preset (synth-appdx-d, em1, em2, em3)"),
    ("dataset", "path of a dataset file; overrides preset generation"),
    ("variants", "comma-separated variant ids, e.g. SM-0,HA-2"),
    ("variant", "single variant id for `run`"),
    ("seed", "model seed for `run`, generation seed for `generate`"),
    ("seeds", "comma-separated seeds or a range a..b (inclusive) for `sweep`"),
    ("data_seed", "seed used when a preset dataset is generated on the fly"),
    ("n", "instance count for generated datasets"),
    ("test_fraction", "held-out fraction for generated datasets"),
    ("out", "output file or directory"),
    ("epochs", "training epochs"),
    ("lr", "Adam learning rate"),
    ("lambda", "entropy penalty weight for ER variants"),
    ("batch_size", "minibatch size, or `full`"),
    ("arch", "network family: mlp, linear, linear-mlp"),
    ("workers", "concurrent runs in a sweep"),
    ("log_every", "epochs between dynamics records"),
];

/// Parsed config file. Blank lines and `#` comments are ignored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("config line {}: expected key = value, got {raw:?}", i + 1)))?;
            let key = key.trim();
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(Failure::usage(format!("config line {}: unknown key {key:?}", i + 1)));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Failure::usage(format!("config line {}: duplicate key {key:?}", i + 1)));
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        ConfigFile::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Typed lookup; a malformed value is a usage error naming the key.
    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Failure::usage(format!("config key {key}: cannot parse {v:?}")))
            })
            .transpose()
    }
}

pub fn help_text() -> String {
    let mut out = String::from("Config files hold one `key = value` per line (`#` starts a comment).\nCommand-line flags override file values. Keys:\n");
    for (k, h) in KEYS {
        out.push_str(&format!("  {k:<14} {h}\n"));
    }
    out
}

/// `0,1,2`, `0..4` (inclusive) or a mix of both.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, Failure> {
    let bad = || Failure::usage(format!("cannot parse seeds {text:?}; expected e.g. 0,1,2 or 0..4"));
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad())?),
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}
