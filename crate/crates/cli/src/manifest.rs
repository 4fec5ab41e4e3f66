//! Run manifests: what produced an output directory, hashed for replay
//! checks. No timestamps, so reruns with equal inputs are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub command: String,
    pub config_sha256: Option<String>,
    pub schema_id: Option<String>,
    pub index_stats_sha256: Option<String>,
    pub k: Option<usize>,
    pub mode: Option<String>,
    pub backend_kind: Option<String>,
    /// Input name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file (relative to the output directory) to content hash.
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, Value>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: "ctevidence",
            version: env!("CARGO_PKG_VERSION"),
            core_version: ctevidence_core::VERSION,
            command: command.to_string(),
            ..Self::default()
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> io::Result<()> {
        self.inputs.insert(name.to_string(), hash_path(path)?);
        Ok(())
    }

    /// Hash every file under `out` (except the manifest) and write the
    /// manifest there.
    pub fn finish(mut self, out: &Path) -> io::Result<()> {
        let mut files = Vec::new();
        collect_files(out, out, &mut files)?;
        for rel in files {
            if rel != MANIFEST_FILE {
                let digest = sha256_hex(&fs::read(out.join(&rel))?);
                self.outputs.insert(rel, digest);
            }
        }
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        fs::write(out.join(MANIFEST_FILE), text)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn collect_files(root: &Path, dir: &Path, acc: &mut Vec<String>) -> io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(root, &p, acc)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root");
            acc.push(
                rel.components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/"),
            );
        }
    }
    Ok(())
}

/// Content hash of a file, or of a directory as the hash of its sorted
/// `relative-path  file-hash` lines.
pub fn hash_path(path: &Path) -> io::Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        let mut listing = String::new();
        for rel in files {
            let h = sha256_hex(&fs::read(path.join(&rel))?);
            listing.push_str(&format!("{rel}  {h}\n"));
        }
        Ok(sha256_hex(listing.as_bytes()))
    } else {
        Ok(sha256_hex(&fs::read(path)?))
    }
}
