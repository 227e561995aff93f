use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::EncoderConfig;
use super::params::check_shapes;
use crate::error::{Error, Result};
use crate::io::{read_string, sha256_hex, write_atomic};
use crate::tensor::{ParameterSet, Tensor};

pub const MANIFEST: &str = "manifest";
pub const WEIGHTS: &str = "weights.bin";
pub const CONFIG: &str = "config";
pub const FINGERPRINT: &str = "tokenizer.fingerprint";

/// Writes `params` as a text manifest (`name dtype shape offset sha256`,
/// tab separated) plus one concatenated little-endian blob.
pub fn write_tensors(dir: &Path, manifest: &str, blob: &str, params: &ParameterSet) -> Result<()> {
    let mut text = String::new();
    let mut bytes = Vec::with_capacity(params.num_values() * 8);
    for (name, t) in params.iter() {
        let b = t.to_le_bytes();
        let shape: Vec<String> = t.shape.iter().map(|s| s.to_string()).collect();
        writeln!(text, "{name}\tf64\t{}\t{}\t{}", shape.join(","), bytes.len(), sha256_hex(&b)).unwrap();
        bytes.extend_from_slice(&b);
    }
    write_atomic(&dir.join(blob), &bytes)?;
    write_atomic(&dir.join(manifest), text.as_bytes())
}

pub fn read_tensors(dir: &Path, manifest: &str, blob: &str) -> Result<ParameterSet> {
    let mpath = dir.join(manifest);
    let bpath = dir.join(blob);
    let text = read_string(&mpath)?;
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut params = ParameterSet::new();
    for (ln, line) in text.lines().enumerate() {
        let bad = |m: &str| Error::format(&mpath, format!("line {}: {m}", ln + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad("expected 5 tab-separated columns"));
        }
        if cols[1] != "f64" {
            return Err(bad(&format!("unsupported dtype {}", cols[1])));
        }
        let shape: Vec<usize> = if cols[2].is_empty() {
            Vec::new()
        } else {
            cols[2].split(',').map(|s| s.parse().map_err(|_| bad("bad shape"))).collect::<Result<_>>()?
        };
        let offset: usize = cols[3].parse().map_err(|_| bad("bad offset"))?;
        let n: usize = shape.iter().product();
        let end = offset + n * 8;
        if end > bytes.len() {
            return Err(bad("tensor extends past the end of the weights file"));
        }
        let raw = &bytes[offset..end];
        if sha256_hex(raw) != cols[4] {
            return Err(bad(&format!("checksum mismatch for {}", cols[0])));
        }
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(cols[0], Tensor::from_vec(&shape, data)?).map_err(|e| bad(&e.to_string()))?;
    }
    if !params.all_finite() {
        return Err(Error::format(&bpath, "non-finite parameter values"));
    }
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct EncoderCheckpoint {
    pub config: EncoderConfig,
    pub params: ParameterSet,
    pub tokenizer_fingerprint: String,
}

impl EncoderCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_dir(dir, |tmp| self.write_into(tmp))
    }

    /// Writes the checkpoint files into an existing directory.
    pub fn write_into(&self, dir: &Path) -> Result<()> {
        write_tensors(dir, MANIFEST, WEIGHTS, &self.params)?;
        write_atomic(&dir.join(CONFIG), self.config.to_toml().as_bytes())?;
        write_atomic(&dir.join(FINGERPRINT), format!("{}\n", self.tokenizer_fingerprint).as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = EncoderConfig::from_toml(&read_string(&dir.join(CONFIG))?)?;
        let params = read_tensors(dir, MANIFEST, WEIGHTS)?;
        check_shapes(&params, &config)?;
        let tokenizer_fingerprint = read_string(&dir.join(FINGERPRINT))?.trim().to_string();
        Ok(EncoderCheckpoint { config, params, tokenizer_fingerprint })
    }

    pub fn require_fingerprint(&self, expected: &str) -> Result<()> {
        if self.tokenizer_fingerprint != expected {
            return Err(Error::config(format!(
                "tokenizer fingerprint mismatch: checkpoint has {}, expected {expected}",
                short(&self.tokenizer_fingerprint)
            )));
        }
        Ok(())
    }
}

fn short(s: &str) -> &str {
    &s[..s.len().min(12)]
}

/// Builds a directory under a temporary sibling name and renames it into
/// place, so readers never observe a half-written checkpoint.
pub fn save_dir(dir: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = sibling(dir, ".partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write(&tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    dir.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EncoderConfig::toy(1, 8, 20);
        let ck = EncoderCheckpoint { params: init_params(&cfg, 2).unwrap(), config: cfg, tokenizer_fingerprint: "abc".into() };
        let d = dir.path().join("ck");
        ck.save(&d).unwrap();
        let back = EncoderCheckpoint::load(&d).unwrap();
        assert_eq!(back.params.checksum(), ck.params.checksum());
        assert_eq!(back.config, ck.config);
        assert!(back.require_fingerprint("abc").is_ok());
        assert!(matches!(back.require_fingerprint("xyz"), Err(Error::Config(_))));
        ck.save(&d).unwrap();
        assert!(!dir.path().join("ck.partial").exists());
    }

    #[test]
    fn corrupted_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EncoderConfig::toy(1, 8, 20);
        let ck = EncoderCheckpoint { params: init_params(&cfg, 2).unwrap(), config: cfg, tokenizer_fingerprint: "abc".into() };
        ck.save(dir.path()).unwrap();
        let p = dir.path().join(WEIGHTS);
        let mut b = fs::read(&p).unwrap();
        b[10] ^= 0xff;
        fs::write(&p, b).unwrap();
        assert!(matches!(EncoderCheckpoint::load(dir.path()), Err(Error::Format { .. })));
    }
}
