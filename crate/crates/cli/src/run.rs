//! Run directories, manifests and layered configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use seaflow::trainer::content_hash;
use seaflow::{Error, Result};

/// Environment variable naming the directory that default run directories
/// are created under.
pub const OUTPUT_ROOT_VAR: &str = "SEAFLOW_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const MANIFEST: &str = "run.json";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.into(),
        source: e,
    }
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io(path))
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(io(path))
}

/// Overrides collected from command-line flags, keyed by dotted field path.
#[derive(Default)]
pub struct Overrides(toml::Table);

impl Overrides {
    pub fn set(&mut self, path: &str, value: Option<impl Serialize>) -> Result<&mut Self> {
        let Some(value) = value else { return Ok(self) };
        let value = toml::Value::try_from(value).map_err(|e| Error::Config(format!("--{}: {e}", path.rsplit('.').next().unwrap_or(path))))?;
        let mut table = &mut self.0;
        let mut keys: Vec<&str> = path.split('.').collect();
        let last = keys.pop().expect("non-empty path");
        for k in keys {
            table = table
                .entry(k)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("override paths do not collide");
        }
        table.insert(last.into(), value);
        Ok(self)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn merge(into: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// The config file (if any) with flag overrides applied on top, parsed with
/// unknown fields rejected.
pub fn layered<C: DeserializeOwned>(file: Option<&Path>, overrides: Overrides) -> Result<C> {
    let (mut table, origin) = match file {
        Some(p) => {
            let text = read_string(p)?;
            let t: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            (t, p.display().to_string())
        }
        None => (toml::Table::new(), "<flags>".into()),
    };
    merge(&mut table, overrides.0);
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {e}")))
}

pub fn to_toml(cfg: &impl Serialize) -> String {
    toml::to_string(cfg).expect("config serializes")
}

/// One invocation's output directory and the manifest describing it.
pub struct Run {
    pub dir: PathBuf,
}

impl Run {
    /// `out` if given, else `<command>-<hash prefix>` under the output root.
    pub fn resolve(command: &str, out: Option<&Path>, effective: &str) -> PathBuf {
        match out {
            Some(p) => p.to_path_buf(),
            None => {
                let root = std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from);
                root.join(format!("{command}-{}", &content_hash(effective.as_bytes())[..12]))
            }
        }
    }

    /// Create the directory, which must be absent or empty unless `reuse`,
    /// and write the manifest before any other output.
    pub fn start(dir: PathBuf, manifest: &Manifest, reuse: bool) -> Result<Self> {
        if !reuse && dir.read_dir().is_ok_and(|mut d| d.next().is_some()) {
            return Err(Error::InvalidArgument(format!("output directory {} is not empty", dir.display())));
        }
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let run = Self { dir };
        let body = json!({
            "command": manifest.command,
            "config_path": manifest.config_path.as_ref().map(|p| p.display().to_string()),
            "seed": manifest.seed,
            "config_hash": content_hash(manifest.effective.as_bytes()),
            "output_dir": run.dir.display().to_string(),
            "effective_config": manifest.effective,
            "inputs": manifest.inputs,
        });
        run.write(MANIFEST, serde_json::to_string_pretty(&body).expect("manifest serializes"))?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        write(&self.path(name), bytes)
    }
}

pub struct Manifest {
    pub command: &'static str,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    /// The merged configuration as TOML; its content hash names the run.
    pub effective: String,
    /// Operational inputs that are not configuration fields.
    pub inputs: serde_json::Value,
}
