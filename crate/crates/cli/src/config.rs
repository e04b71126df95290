//! Run configuration: flat dotted keys from a TOML file, overridden by
//! command-line flags of the same name.
//!
//! ```toml
//! seed = 3
//! output = "runs/a"
//! data.manifest = "data/manifest.toml"
//! model.head_width = 12
//! train.epochs = 20
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lmscnet::model::ModelConfig;
use lmscnet::train::TrainConfig;
use lmscnet::{Error, Result};
use toml::{Table, Value};

/// Keys that are not part of the `model.` or `train.` sections.
const PLAIN_KEYS: [&str; 3] = ["seed", "output", "data.manifest"];
/// Model keys that fix the grid; the channel widths follow them unless set.
const GEOMETRY_KEYS: [&str; 4] = ["nx", "ny", "nz", "num_classes"];

/// Dotted key to value, before any typing.
pub type Entries = BTreeMap<String, Value>;
/// `(key, raw value)` pairs from the command line.
pub type Overrides = Vec<(String, String)>;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: u64,
}

/// Pull `--section.key value` and `--section.key=value` flags out of `args`.
///
/// Returns the remaining arguments and the overrides in order.
pub fn split_overrides(args: impl IntoIterator<Item = String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Config(format!("flag --{key} needs a value")))?,
        };
        overrides.push((key.to_string(), value));
    }
    Ok((rest, overrides))
}

fn flatten(prefix: &str, table: &Table, out: &mut Entries) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            v => {
                out.insert(key, v.clone());
            }
        }
    }
}

/// Interpret a flag value as a TOML value, falling back to a bare string.
fn parse_flag_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("single key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Read the config file (if any) and apply `overrides` on top.
pub fn load_entries(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Entries> {
    let mut entries = Entries::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading config {}: {e}", path.display())))?;
        let table: Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        flatten("", &table, &mut entries);
    }
    for (k, v) in overrides {
        entries.insert(k.clone(), parse_flag_value(v));
    }
    for key in entries.keys() {
        let known = PLAIN_KEYS.contains(&key.as_str())
            || key.starts_with("model.")
            || key.starts_with("train.");
        if !known {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        if key == "model.seed" || key == "train.seed" {
            return Err(Error::Config(format!(
                "{key} is derived from the top-level seed"
            )));
        }
    }
    Ok(entries)
}

/// A string-valued entry. Numbers and booleans given on the command line
/// are taken by their text.
fn string_entry(entries: &Entries, key: &str) -> Result<Option<String>> {
    Ok(match entries.get(key) {
        None => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(v @ (Value::Integer(_) | Value::Float(_) | Value::Boolean(_))) => Some(v.to_string()),
        Some(v) => return Err(Error::Config(format!("{key} must be a string, got {v}"))),
    })
}

/// Convert `given` to the type of `default` where that is lossless
/// (integers to floats, scalars to strings).
fn coerce(key: &str, default: Option<&Value>, given: &Value) -> Result<Value> {
    Ok(match (default, given) {
        (Some(Value::Float(_)), Value::Integer(i)) => Value::Float(*i as f64),
        (Some(Value::String(_)), v @ (Value::Integer(_) | Value::Float(_) | Value::Boolean(_))) => {
            Value::String(v.to_string())
        }
        (Some(Value::Array(d)), Value::Array(g)) => Value::Array(
            g.iter()
                .map(|x| coerce(key, d.first(), x))
                .collect::<Result<Vec<_>>>()?,
        ),
        (None, _) => return Err(Error::Config(format!("unknown config key {key:?}"))),
        (_, v) => v.clone(),
    })
}

fn apply_section<C>(base: &C, section: &str, entries: &Entries) -> Result<C>
where
    C: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut table =
        Table::try_from(base).map_err(|e| Error::Config(format!("{section} defaults: {e}")))?;
    let prefix = format!("{section}.");
    for (key, v) in entries {
        if let Some(field) = key.strip_prefix(&prefix) {
            let value = coerce(key, table.get(field), v)?;
            table.insert(field.to_string(), value);
        }
    }
    table
        .try_into()
        .map_err(|e| Error::Config(format!("{section} section: {e}")))
}

impl RunConfig {
    /// Path of the dataset manifest, if configured.
    pub fn manifest_entry(entries: &Entries) -> Result<Option<PathBuf>> {
        Ok(string_entry(entries, "data.manifest")?.map(PathBuf::from))
    }

    /// Resolve `entries` against defaults. `grid` supplies the extents and
    /// class count of the dataset, if there is one; explicit keys win.
    pub fn resolve(entries: &Entries, grid: Option<([usize; 3], usize)>) -> Result<Self> {
        let d = ModelConfig::default();
        let ([mut nx, mut ny, mut nz], mut n) = grid.unwrap_or(([d.nx, d.ny, d.nz], d.num_classes));
        for (key, slot) in GEOMETRY_KEYS
            .iter()
            .zip([&mut nx, &mut ny, &mut nz, &mut n])
        {
            match entries.get(&format!("model.{key}")) {
                None => {}
                Some(Value::Integer(v)) if *v > 0 => *slot = *v as usize,
                Some(v) => {
                    return Err(Error::Config(format!(
                        "model.{key} must be a positive integer, got {v}"
                    )))
                }
            }
        }
        let seed = match entries.get("seed") {
            None => 0,
            Some(Value::Integer(v)) if *v >= 0 => *v as u64,
            Some(v) => {
                return Err(Error::Config(format!(
                    "seed must be a non-negative integer, got {v}"
                )))
            }
        };
        let mut model: ModelConfig =
            apply_section(&ModelConfig::for_grid(nx, ny, nz, n), "model", entries)?;
        model.seed = seed;
        model.validate()?;
        let mut train: TrainConfig = apply_section(&TrainConfig::default(), "train", entries)?;
        train.seed = seed;
        train.validate()?;
        Ok(RunConfig {
            model,
            train,
            manifest: Self::manifest_entry(entries)?,
            output: string_entry(entries, "output")?.map(PathBuf::from),
            seed,
        })
    }

    /// The resolved configuration as flat `key = value` lines. Loading the
    /// text back yields the same configuration.
    pub fn to_flat_toml(&self) -> String {
        let mut flat = Entries::new();
        flat.insert("seed".into(), Value::Integer(self.seed as i64));
        if let Some(p) = &self.output {
            flat.insert("output".into(), Value::String(p.display().to_string()));
        }
        if let Some(p) = &self.manifest {
            flat.insert(
                "data.manifest".into(),
                Value::String(p.display().to_string()),
            );
        }
        for (section, table) in [
            (
                "model",
                Table::try_from(&self.model).expect("model config serializes"),
            ),
            (
                "train",
                Table::try_from(&self.train).expect("train config serializes"),
            ),
        ] {
            for (k, v) in table {
                if k != "seed" {
                    flat.insert(format!("{section}.{k}"), v);
                }
            }
        }
        flat.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
