//! `.amck` checkpoint container: a text manifest (format version, config
//! snapshot, named tensor index) followed by raw little-endian f64 blobs and
//! a whole-file SHA-256 trailer. Serialization is canonical, so identical
//! state produces byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";
const MAGIC: &str = "amck";
const SEPARATOR: &str = "---\n";
const DIGEST_LEN: usize = 32;

/// Parsed checkpoint content: a flat config snapshot plus named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub config: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl CheckpointFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = format!("{MAGIC} {FORMAT_VERSION}\n");
        for (key, value) in &self.config {
            if key.contains(char::is_whitespace) || value.contains('\n') {
                return Err(Error::Config(format!(
                    "config entry `{key}` contains unsupported whitespace"
                )));
            }
            manifest.push_str(&format!("cfg {key} {value}\n"));
        }
        let mut blob: Vec<u8> = Vec::new();
        for (name, (shape, data)) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "tensor name `{name}` contains whitespace"
                )));
            }
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Config(format!(
                    "tensor `{name}`: shape {shape:?} does not match {} values",
                    data.len()
                )));
            }
            let dims = shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            manifest.push_str(&format!(
                "tensor {name} {} {dims} {} {}\n",
                shape.len(),
                blob.len(),
                data.len() * 8
            ));
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        manifest.push_str(&format!("blob_bytes {}\n", blob.len()));
        manifest.push_str(SEPARATOR);
        let mut bytes = manifest.into_bytes();
        bytes.extend_from_slice(&blob);
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < DIGEST_LEN {
            return Err(Error::Parse {
                offset: bytes.len(),
                msg: "file shorter than its checksum trailer".into(),
            });
        }
        let (content, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let digest = Sha256::digest(content);
        if digest.as_slice() != stored {
            return Err(Error::ChecksumMismatch);
        }
        let sep = find_subslice(content, SEPARATOR.as_bytes()).ok_or(Error::Parse {
            offset: content.len(),
            msg: "missing manifest separator".into(),
        })?;
        let manifest = std::str::from_utf8(&content[..sep]).map_err(|e| Error::Parse {
            offset: e.valid_up_to(),
            msg: "manifest is not UTF-8".into(),
        })?;
        let blob = &content[sep + SEPARATOR.len()..];

        let mut lines = manifest.lines();
        let head = lines.next().unwrap_or_default();
        let expected = format!("{MAGIC} {FORMAT_VERSION}");
        if head != expected {
            return Err(Error::CheckpointVersion {
                found: head.to_string(),
                expected,
            });
        }
        let mut config = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        let mut declared_blob = None;
        for line in lines {
            let mut parts = line.splitn(2, ' ');
            let tag = parts.next().unwrap_or_default();
            let rest = parts.next().unwrap_or_default();
            match tag {
                "cfg" => {
                    let (key, value) = rest.split_once(' ').ok_or_else(|| Error::Parse {
                        offset: 0,
                        msg: format!("malformed cfg line `{line}`"),
                    })?;
                    config.insert(key.to_string(), value.to_string());
                }
                "tensor" => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    let bad = || Error::Parse {
                        offset: 0,
                        msg: format!("malformed tensor line `{line}`"),
                    };
                    if fields.len() < 4 {
                        return Err(bad());
                    }
                    let name = fields[0].to_string();
                    let ndim: usize = fields[1].parse().map_err(|_| bad())?;
                    if fields.len() != 4 + ndim {
                        return Err(bad());
                    }
                    let shape: Vec<usize> = fields[2..2 + ndim]
                        .iter()
                        .map(|f| f.parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    let offset: usize = fields[2 + ndim].parse().map_err(|_| bad())?;
                    let byte_len: usize = fields[3 + ndim].parse().map_err(|_| bad())?;
                    if byte_len % 8 != 0
                        || shape.iter().product::<usize>() * 8 != byte_len
                        || offset + byte_len > blob.len()
                    {
                        return Err(Error::Parse {
                            offset,
                            msg: format!("tensor `{name}` index inconsistent with payload"),
                        });
                    }
                    let data: Vec<f64> = blob[offset..offset + byte_len]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    tensors.insert(name, (shape, data));
                }
                "blob_bytes" => {
                    declared_blob = Some(rest.parse::<usize>().map_err(|_| Error::Parse {
                        offset: 0,
                        msg: format!("malformed blob_bytes line `{line}`"),
                    })?);
                }
                other => {
                    return Err(Error::Parse {
                        offset: 0,
                        msg: format!("unknown manifest tag `{other}`"),
                    })
                }
            }
        }
        if declared_blob != Some(blob.len()) {
            return Err(Error::Parse {
                offset: sep,
                msg: format!(
                    "blob length {} does not match declared {:?}",
                    blob.len(),
                    declared_blob
                ),
            });
        }
        Ok(CheckpointFile { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CheckpointFile {
        let mut config = BTreeMap::new();
        config.insert("seed".into(), "7".into());
        config.insert("alpha".into(), "0.7".into());
        let mut tensors = BTreeMap::new();
        tensors.insert("w".into(), (vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]));
        tensors.insert("b".into(), (vec![2], vec![0.0, -0.0]));
        CheckpointFile { config, tensors }
    }

    #[test]
    fn roundtrip_is_bit_exact_and_canonical() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let loaded = CheckpointFile::from_bytes(&bytes).unwrap();
        assert_eq!(loaded, ck);
        // exact bit patterns, including the negative zero
        let b = &loaded.tensors["b"].1;
        assert_eq!(b[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(loaded.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn single_byte_corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        // flip one payload byte (inside the blob, before the digest)
        let idx = bytes.len() - DIGEST_LEN - 5;
        bytes[idx] ^= 0x01;
        assert!(matches!(
            CheckpointFile::from_bytes(&bytes),
            Err(Error::ChecksumMismatch)
        ));
    }

    #[test]
    fn version_mismatch_is_rejected_not_coerced() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes[..7]).into_owned();
        assert!(text.starts_with("amck 1"));
        let mut hacked = bytes.clone();
        hacked[5] = b'9'; // version digit
        // fix the digest so only the version check can fail
        let content_len = hacked.len() - DIGEST_LEN;
        let digest = Sha256::digest(&hacked[..content_len]);
        hacked[content_len..].copy_from_slice(&digest);
        assert!(matches!(
            CheckpointFile::from_bytes(&hacked),
            Err(Error::CheckpointVersion { .. })
        ));
    }
}
