//! Layered run configuration: command defaults, then the `--config` file,
//! then `--set key=value` pairs, then dedicated flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::CliError;

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

#[derive(Debug, Default)]
pub struct Sources {
    file: Table,
    sets: Vec<(String, Value)>,
}

impl Sources {
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let sets = sets.iter().map(|s| parse_set(s)).collect::<Result<_, _>>()?;
        Ok(Self { file, sets })
    }

    pub fn is_empty(&self) -> bool {
        self.file.is_empty() && self.sets.is_empty()
    }

    /// `defaults` overlaid with every source; keys absent from the defaults
    /// are rejected.
    pub fn resolve<T: Serialize + DeserializeOwned>(&self, defaults: &T, flags: &[(&str, Option<Value>)]) -> Result<T, CliError> {
        let mut table = match Value::try_from(defaults) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("configs serialise to tables"),
        };
        merge(&mut table, &self.file, "")?;
        for (key, value) in &self.sets {
            merge(&mut table, &dotted(key, value.clone()), "")?;
        }
        for (key, value) in flags {
            if let Some(v) = value {
                merge(&mut table, &dotted(key, v.clone()), "")?;
            }
        }
        Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Usage(format!("configuration: {e}")))
    }

    /// For commands without tunable configuration.
    pub fn reject_any(&self, command: &str) -> Result<(), CliError> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!("`{command}` takes no configuration keys")))
        }
    }
}

fn parse_set(s: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("bad configuration key `{key}`")));
    }
    // bare words are strings
    let value = match format!("v = {}", raw.trim()).parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    Ok((key.to_string(), value))
}

fn dotted(key: &str, value: Value) -> Table {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut t = Table::new();
    t.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(t));
        t = outer;
    }
    t
}

fn merge(base: &mut Table, over: &Table, prefix: &str) -> Result<(), CliError> {
    for (k, v) in over {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(k), v) {
            (None, _) => return Err(CliError::Usage(format!("unknown configuration key `{path}`"))),
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o, &path)?,
            (Some(Value::Table(_)), _) => return Err(CliError::Usage(format!("`{path}` is a table"))),
            (Some(_), Value::Table(_)) => return Err(CliError::Usage(format!("`{path}` is not a table"))),
            (Some(slot), _) => *slot = v.clone(),
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Snapshot<'a> {
    command: &'a str,
    seed: u64,
    inputs: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<Value>,
}

/// Write the fully resolved run description into `out`. Thread count and the
/// output location are deliberately absent so snapshots compare equal across
/// runs that must match.
pub fn write_snapshot<I: Serialize, C: Serialize>(
    out: &Path,
    command: &str,
    seed: u64,
    inputs: &I,
    config: Option<&C>,
) -> Result<(), CliError> {
    let snap = Snapshot {
        command,
        seed,
        inputs: Value::try_from(inputs).expect("inputs serialise"),
        config: config.map(|c| Value::try_from(c).expect("config serialises")),
    };
    let text = toml::to_string(&snap).expect("snapshot serialises");
    let path = out.join(SNAPSHOT_FILE);
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}
