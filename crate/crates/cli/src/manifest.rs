use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Record of one invocation, written beside its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema: &'static str,
    pub subcommand: String,
    pub tool_version: &'static str,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Path to sha256; directories hash their sorted file list and contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub wall_ms: u128,
}

pub struct Recorder {
    manifest: RunManifest,
    t0: Instant,
}

impl Recorder {
    pub fn start(subcommand: &str, config: &impl Serialize) -> Self {
        Self {
            manifest: RunManifest {
                schema: tab_core::SCHEMA,
                subcommand: subcommand.into(),
                tool_version: env!("CARGO_PKG_VERSION"),
                config: serde_json::to_value(config).expect("config serializes"),
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                started_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis()),
                wall_ms: 0,
            },
            t0: Instant::now(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.into(), value);
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        let h = hash_path(path)?;
        self.manifest.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        let h = hash_path(path)?;
        self.manifest.outputs.insert(path.display().to_string(), h);
        Ok(())
    }

    /// Writes the manifest into `out` when it is a directory, else next to
    /// it as `<out>.manifest.json`.
    pub fn finish(mut self, out: &Path) -> std::io::Result<PathBuf> {
        self.manifest.wall_ms = self.t0.elapsed().as_millis();
        let path = manifest_path(out);
        std::fs::write(&path, serde_json::to_string_pretty(&self.manifest).expect("manifest serializes"))?;
        Ok(path)
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join(MANIFEST_FILE)
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

fn files_under(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            files_under(root, &p, out)?;
        } else if p.file_name().is_none_or(|n| n != MANIFEST_FILE) {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

pub fn hash_path(path: &Path) -> std::io::Result<String> {
    hash_inner(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn hash_inner(path: &Path) -> std::io::Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        files_under(path, path, &mut files)?;
        for rel in files {
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(std::fs::read(path.join(&rel))?);
        }
    } else {
        h.update(std::fs::read(path)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
