//! Artifact writers. Every file carries the tool version, the config digest
//! and the seed; nothing else varies between runs of the same config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TOOL: &str = "crlab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Version of the CSV column and JSON key layout.
pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub schema: u32,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_bytes: &[u8], seed: u64) -> Self {
        let digest = Sha256::digest(config_bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        Self { tool: TOOL, version: VERSION, schema: SCHEMA, config_sha256: hex, seed }
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    task: &'a str,
    result: &'a T,
}

/// Floats as decimal scientific notation with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct Writer {
    dir: PathBuf,
    prefix: String,
    provenance: Provenance,
    written: Vec<PathBuf>,
}

impl Writer {
    pub fn new(dir: &Path, prefix: &str, provenance: Provenance) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), prefix: prefix.to_string(), provenance, written: Vec::new() })
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn file_name(&self, suffix: &str, ext: &str) -> String {
        format!("{}{suffix}.{ext}", self.prefix)
    }

    /// CSV with `#` provenance lines, one header row, then the rows.
    pub fn csv(&mut self, suffix: &str, header: &[String], rows: &[Vec<f64>]) -> std::io::Result<String> {
        let name = self.file_name(suffix, "csv");
        let mut out = String::new();
        let p = &self.provenance;
        out.push_str(&format!("# tool={} version={} schema={}\n", p.tool, p.version, p.schema));
        out.push_str(&format!("# config_sha256={} seed={}\n", p.config_sha256, p.seed));
        out.push_str(&header.join(","));
        out.push('\n');
        for r in rows {
            let cells: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        self.write(&name, out.as_bytes())?;
        Ok(name)
    }

    pub fn json<T: Serialize>(&mut self, suffix: &str, task: &str, result: &T) -> std::io::Result<String> {
        let name = self.file_name(suffix, "json");
        let env = Envelope { provenance: &self.provenance, task, result };
        let mut text = serde_json::to_string_pretty(&env).map_err(std::io::Error::other)?;
        text.push('\n');
        self.write(&name, text.as_bytes())?;
        Ok(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        let path = self.dir.join(name);
        let mut f = fs::File::create(&path)?;
        f.write_all(bytes)?;
        self.written.push(path);
        Ok(())
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn digest_is_hex_sha256() {
        let p = Provenance::new(b"", 0);
        assert_eq!(p.config_sha256, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
