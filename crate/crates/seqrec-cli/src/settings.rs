//! Config-file loading, flag merging, and output-directory plumbing.
//!
//! Every subcommand reads an optional `[section]` of a TOML file, applies
//! command-line overrides (flags win), and serializes the effective settings
//! next to its outputs so a run can always be reproduced from its artifacts.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "SEQREC_OUT";

/// Exit-code classes: usage 2, data 3, runtime 4.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

pub fn usage(msg: impl fmt::Display) -> Failure {
    Failure::Usage(msg.to_string())
}

pub fn data(msg: impl fmt::Display) -> Failure {
    Failure::Data(msg.to_string())
}

pub fn runtime(msg: impl fmt::Display) -> Failure {
    Failure::Runtime(msg.to_string())
}

/// Deserializes `[section]` of the config file, or the type's defaults when
/// no file or section is present. Partial tables are merged onto the
/// defaults, so a config file only needs the keys it changes.
pub fn load_section<T: DeserializeOwned + Serialize + Default>(
    path: Option<&Path>,
    section: &str,
) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| usage(format!("bad config {}: {e}", path.display())))?;
    let Some(over) = table.get(section) else {
        return Ok(T::default());
    };
    let mut base = toml::Value::try_from(T::default())
        .map_err(|e| runtime(format!("cannot serialize defaults: {e}")))?;
    merge_toml(&mut base, over);
    base.try_into()
        .map_err(|e| usage(format!("bad [{section}] section: {e}")))
}

fn merge_toml(base: &mut toml::Value, over: &toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Resolves the output directory: explicit flag, else `$SEQREC_OUT/<name>`,
/// else `runs/<name>`. Creates it.
pub fn out_dir(explicit: Option<&Path>, name: &str) -> Result<PathBuf, Failure> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"));
            root.join(name)
        }
    };
    fs::create_dir_all(&dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Writes the effective settings as `config.toml` under `[section]`.
pub fn write_effective<T: Serialize>(
    dir: &Path,
    section: &str,
    settings: &T,
) -> Result<(), Failure> {
    let mut table = toml::Table::new();
    let value = toml::Value::try_from(settings)
        .map_err(|e| runtime(format!("cannot serialize settings: {e}")))?;
    table.insert(section.to_string(), value);
    let path = dir.join("config.toml");
    fs::write(&path, table.to_string())
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}
