//! Per-run plumbing: layered configuration, input hashing, atomic outputs and
//! the run manifest.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use musr_core::config::KeyValues;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Bad invocation; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "desk" => Ok(Self::Desk),
            other => Err(usage(format!("unknown preset {other:?} (expected full or desk)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Desk => "desk",
        }
    }
}

/// Effective settings: preset defaults, then the config file, then flags.
pub struct Settings {
    pub values: KeyValues,
}

impl Settings {
    pub fn layered(
        preset_flag: Option<&str>,
        config_file: Option<&Path>,
        flags: &KeyValues,
        defaults: impl Fn(Preset) -> KeyValues,
    ) -> Result<Self> {
        let file = match config_file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                KeyValues::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
            }
            None => KeyValues::new(),
        };
        let preset = match preset_flag.or(flags.get_str("preset")).or(file.get_str("preset")) {
            Some(p) => Preset::parse(p)?,
            None => Preset::Full,
        };
        let mut values = defaults(preset);
        values.merge(&file);
        values.merge(flags);
        values.set("preset", preset.name());
        Ok(Self { values })
    }

    pub fn get<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.values.require(key).map_err(|e| usage(e.to_string()))
    }

    pub fn get_opt<V: std::str::FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.values.get_str(key) {
            None | Some("") | Some("none") => Ok(None),
            Some(_) => self.values.get(key).map_err(|e| usage(e.to_string())),
        }
    }
}

/// Parses repeated `--set key=value` flags.
pub fn parse_overrides(items: &[String]) -> Result<KeyValues> {
    let mut kv = KeyValues::new();
    for item in items {
        let (k, v) = item.split_once('=').ok_or_else(|| usage(format!("--set expects key=value, got {item:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Collects inputs and pending outputs; nothing touches the output paths
/// until [`Run::finish`].
pub struct Run {
    command: String,
    argv: Vec<String>,
    started: Instant,
    started_unix: u64,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<(PathBuf, Vec<u8>)>,
    extra: serde_json::Map<String, Value>,
}

impl Run {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: serde_json::Map::new(),
        }
    }

    /// Records the input's hash; returns the path for chaining.
    pub fn input<'p>(&mut self, path: &'p Path) -> Result<&'p Path> {
        if !path.is_file() {
            return Err(usage(format!("input file {} does not exist", path.display())));
        }
        let digest = sha256_file(path)?;
        self.inputs.push((path.to_path_buf(), digest));
        Ok(path)
    }

    pub fn output(&mut self, path: &Path, bytes: Vec<u8>) {
        self.outputs.push((path.to_path_buf(), bytes));
    }

    pub fn note(&mut self, key: &str, value: Value) {
        self.extra.insert(key.to_string(), value);
    }

    /// Writes every output, then the manifest, each through a temporary file
    /// in the destination directory followed by a rename.
    pub fn finish(self, settings: &Settings, seed: u64, threads: Option<usize>, manifest: &Path) -> Result<()> {
        let mut outputs = Vec::new();
        for (path, bytes) in &self.outputs {
            write_atomic(path, bytes)?;
            outputs.push(json!({ "path": path.display().to_string(), "sha256": hex::encode(Sha256::digest(bytes)) }));
        }
        let config: serde_json::Map<String, Value> =
            settings.values.iter().map(|(k, v)| (k.to_string(), Value::String(v.to_string()))).collect();
        let doc = json!({
            "command": self.command,
            "argv": self.argv,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "threads": threads,
            "config": config,
            "config_text": settings.values.to_text(),
            "inputs": self.inputs.iter().map(|(p, h)| json!({ "path": p.display().to_string(), "sha256": h })).collect::<Vec<_>>(),
            "outputs": outputs,
            "results": Value::Object(self.extra),
            "timings": { "started_unix": self.started_unix, "seconds": self.started.elapsed().as_secs_f64() },
        });
        let mut text = serde_json::to_vec_pretty(&doc)?;
        text.push(b'\n');
        write_atomic(manifest, &text)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `<path><suffix>`, e.g. `model.ckpt` -> `model.ckpt.config`.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}
