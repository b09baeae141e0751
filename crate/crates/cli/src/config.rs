//! Layered configuration: command-line flags over a TOML file over built-in
//! defaults, with every resolved value echoed to stderr.

use std::collections::BTreeSet;
use std::env;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

pub const CONFIG_DIR_VAR: &str = "ADCLESS_CONFIG_DIR";

/// `p` itself when it exists, otherwise `p` under `$ADCLESS_CONFIG_DIR` when
/// that exists.
pub fn resolve(p: &Path) -> PathBuf {
    if p.exists() || p.is_absolute() {
        return p.to_path_buf();
    }
    if let Some(dir) = env::var_os(CONFIG_DIR_VAR) {
        let q = Path::new(&dir).join(p);
        if q.exists() {
            return q;
        }
    }
    p.to_path_buf()
}

pub fn read_text(p: &Path) -> Result<String> {
    let p = resolve(p);
    std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
}

pub fn read_table(p: Option<&Path>) -> Result<Table> {
    match p {
        None => Ok(Table::new()),
        Some(p) => {
            let text = read_text(p)?;
            text.parse::<Table>().map_err(|e| {
                adcless::Error::Format { kind: "config", msg: format!("{}: {e}", p.display()) }.into()
            })
        }
    }
}

pub fn defaults<T: Serialize>(v: T) -> Result<Table> {
    match Value::try_from(v)? {
        Value::Table(t) => Ok(t),
        other => anyhow::bail!("defaults serialize to {}", other.type_str()),
    }
}

/// Flags given on the command line, in the same shape as the file.
#[derive(Default)]
pub struct Overrides {
    table: Table,
}

impl Overrides {
    pub fn set<V: Into<Value>>(&mut self, key: &str, v: Option<V>) -> &mut Self {
        if let Some(v) = v {
            self.table.insert(key.to_string(), v.into());
        }
        self
    }

    pub fn keys(&self) -> BTreeSet<String> {
        self.table.keys().cloned().collect()
    }
}

/// Deserializes `base` (the defaults), overlaid by `file`, overlaid by `cli`,
/// and logs where every value came from.
pub fn layered<T: Serialize + DeserializeOwned>(section: &str, base: Table, file: &Table, cli: &Overrides) -> Result<T> {
    let mut t = base;
    t.extend(file.clone());
    t.extend(cli.table.clone());
    let out: T = Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| adcless::Error::Format { kind: "config", msg: format!("[{section}] {e}") })?;
    echo(section, &out, file, &cli.keys());
    Ok(out)
}

fn echo<T: Serialize>(section: &str, v: &T, file: &Table, cli: &BTreeSet<String>) {
    let Ok(Value::Table(t)) = Value::try_from(v) else { return };
    for (k, val) in &t {
        let src = if cli.contains(k) {
            "cli"
        } else if file.contains_key(k) {
            "file"
        } else {
            "default"
        };
        eprintln!("config [{section}] {k} = {val} ({src})");
    }
}
