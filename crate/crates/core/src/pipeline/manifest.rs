//! Per-unit completion records with content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Every file below `dir`, sorted, as paths relative to `root`.
pub fn list_files(root: &Path, dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(rel(root, &p));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Completion marker of one unit of work.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub stage: String,
    pub input_hash: String,
    /// Run-relative path to SHA-256 of every file the unit wrote.
    pub outputs: BTreeMap<String, String>,
}

impl UnitRecord {
    /// One hash summarising all outputs; downstream units fold it into
    /// their own input hash.
    pub fn digest(&self) -> String {
        let mut s = String::new();
        for (p, h) in &self.outputs {
            s.push_str(p);
            s.push('\t');
            s.push_str(h);
            s.push('\n');
        }
        sha256_hex(s.as_bytes())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub units: BTreeMap<String, UnitRecord>,
}

impl RunManifest {
    /// Reads `<run_dir>/manifest.json`; a missing file is an empty manifest.
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(MANIFEST_FILE);
        let tmp = run_dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn get(&self, unit: &str) -> Option<&UnitRecord> {
        self.units.get(unit)
    }

    /// True when `unit` was completed with `input_hash` and every output it
    /// recorded is still on disk with the recorded content.
    pub fn is_current(&self, run_dir: &Path, unit: &str, input_hash: &str) -> bool {
        let Some(r) = self.units.get(unit) else {
            return false;
        };
        r.input_hash == input_hash
            && r.outputs
                .iter()
                .all(|(p, h)| sha256_file(&run_dir.join(p)).is_ok_and(|x| &x == h))
    }

    /// Hashes every file under `dirs` (plus `files`) and records the unit.
    pub fn record(
        &mut self,
        run_dir: &Path,
        unit: &str,
        stage: &str,
        input_hash: String,
        dirs: &[PathBuf],
        files: &[PathBuf],
    ) -> Result<()> {
        let mut outputs = BTreeMap::new();
        let mut paths = Vec::new();
        for d in dirs {
            paths.extend(list_files(run_dir, d)?);
        }
        paths.extend(files.iter().map(|f| rel(run_dir, f)));
        for p in paths {
            let h = sha256_file(&run_dir.join(&p))?;
            if let Some(owner) = self
                .units
                .iter()
                .find(|(n, r)| n.as_str() != unit && r.outputs.contains_key(&p))
            {
                return Err(Error::invalid(format!("`{p}` is already owned by unit `{}`", owner.0)));
            }
            outputs.insert(p, h);
        }
        self.units.insert(
            unit.to_string(),
            UnitRecord {
                stage: stage.to_string(),
                input_hash,
                outputs,
            },
        );
        Ok(())
    }
}
