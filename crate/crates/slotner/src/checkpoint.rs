//! Model persistence: a text manifest followed by raw little-endian f32
//! payloads, in one file.
//!
//! Layout: 8-byte magic `SLNR0001`, a little-endian u64 manifest byte
//! length, the UTF-8 manifest, then every named array's data concatenated
//! in manifest order. The manifest echoes the model config, template kind,
//! type inventory and vocabulary (strings JSON-quoted), and one
//! `tensor <name> <shape> <offset> <len>` line per array with offsets in
//! f32 elements. Loading validates every shape against the config.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{ModelConfig, ModelParams};
use crate::template::{TemplateKind, Vocab};

const MAGIC: &[u8; 8] = b"SLNR0001";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found}")]
    UnsupportedVersion { found: u32 },
    #[error("manifest: {detail}")]
    Manifest { detail: String },
    #[error("tensor {name}: expected shape {expected:?}, found {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor {name} missing from checkpoint")]
    MissingTensor { name: String },
    #[error("checkpoint carries unknown tensor {name}")]
    UnknownTensor { name: String },
    #[error("payload too short: need {need} f32 values, found {found}")]
    PayloadTooShort { need: usize, found: usize },
    #[error(transparent)]
    Template(#[from] crate::template::TemplateError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Everything needed to run inference later.
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub template: TemplateKind,
    pub types: Vec<String>,
    pub vocab: Vocab,
    pub params: ModelParams<f32>,
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn unquote(s: &str) -> Result<String, CheckpointError> {
    serde_json::from_str(s).map_err(|e| CheckpointError::Manifest {
        detail: format!("bad quoted string {s}: {e}"),
    })
}

pub fn save(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let as_io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut manifest = String::new();
    manifest.push_str(&format!("format_version = {FORMAT_VERSION}\n"));
    manifest.push_str(&format!("hidden = {}\n", ckpt.cfg.hidden));
    manifest.push_str(&format!("layers = {}\n", ckpt.cfg.layers));
    manifest.push_str(&format!("heads = {}\n", ckpt.cfg.heads));
    manifest.push_str(&format!("interaction = {}\n", ckpt.cfg.interaction));
    manifest.push_str(&format!("prompts = {}\n", ckpt.cfg.prompts));
    manifest.push_str(&format!("types = {}\n", ckpt.cfg.types));
    manifest.push_str(&format!("max_len = {}\n", ckpt.cfg.max_len));
    manifest.push_str(&format!("template = {}\n", ckpt.template.as_str()));
    for t in &ckpt.types {
        manifest.push_str(&format!("type_name = {}\n", quote(t)));
    }
    for w in ckpt.vocab.words() {
        manifest.push_str(&format!("vocab_word = {}\n", quote(w)));
    }
    let named = ckpt.params.named();
    let mut offset = 0usize;
    for (name, tensor) in &named {
        let shape = tensor
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!(
            "tensor {name} {shape} {offset} {}\n",
            tensor.numel()
        ));
        offset += tensor.numel();
    }

    let mut file = File::create(path).map_err(as_io)?;
    file.write_all(MAGIC).map_err(as_io)?;
    file.write_all(&(manifest.len() as u64).to_le_bytes())
        .map_err(as_io)?;
    file.write_all(manifest.as_bytes()).map_err(as_io)?;
    let mut payload = Vec::with_capacity(offset * 4);
    for (_, tensor) in &named {
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&payload).map_err(as_io)?;
    Ok(())
}

struct TensorEntry {
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let as_io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(as_io)?
        .read_to_end(&mut bytes)
        .map_err(as_io)?;
    if bytes.len() < 16 || &bytes[0..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(CheckpointError::Manifest {
            detail: "manifest extends past end of file".into(),
        });
    }
    let manifest = std::str::from_utf8(&bytes[16..16 + manifest_len]).map_err(|e| {
        CheckpointError::Manifest {
            detail: format!("manifest is not UTF-8: {e}"),
        }
    })?;
    let payload = &bytes[16 + manifest_len..];
    let floats_available = payload.len() / 4;

    let mut version = None;
    let mut fields: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    let mut template = None;
    let mut types = Vec::new();
    let mut words = Vec::new();
    let mut tensors: Vec<(String, TensorEntry)> = Vec::new();
    for line in manifest.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(CheckpointError::Manifest {
                    detail: format!("bad tensor line: {line}"),
                });
            }
            let shape: Vec<usize> = parts[1]
                .split('x')
                .map(|d| d.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| CheckpointError::Manifest {
                    detail: format!("bad shape in line: {line}"),
                })?;
            let offset: usize = parts[2].parse().map_err(|_| CheckpointError::Manifest {
                detail: format!("bad offset in line: {line}"),
            })?;
            let len: usize = parts[3].parse().map_err(|_| CheckpointError::Manifest {
                detail: format!("bad length in line: {line}"),
            })?;
            tensors.push((parts[0].to_string(), TensorEntry { shape, offset, len }));
            continue;
        }
        let (key, value) = line.split_once(" = ").ok_or_else(|| CheckpointError::Manifest {
            detail: format!("unparseable line: {line}"),
        })?;
        match key {
            "format_version" => {
                version = Some(value.parse::<u32>().map_err(|_| CheckpointError::Manifest {
                    detail: format!("bad version: {value}"),
                })?)
            }
            "template" => {
                template =
                    Some(
                        TemplateKind::parse(value).ok_or_else(|| CheckpointError::Manifest {
                            detail: format!("unknown template kind: {value}"),
                        })?,
                    )
            }
            "type_name" => types.push(unquote(value)?),
            "vocab_word" => words.push(unquote(value)?),
            _ => {
                let v = value.parse::<usize>().map_err(|_| CheckpointError::Manifest {
                    detail: format!("bad integer for {key}: {value}"),
                })?;
                fields.insert(key.to_string(), v);
            }
        }
    }
    match version {
        Some(FORMAT_VERSION) => {}
        Some(found) => return Err(CheckpointError::UnsupportedVersion { found }),
        None => {
            return Err(CheckpointError::Manifest {
                detail: "missing format_version".into(),
            })
        }
    }
    let get = |key: &str| {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| CheckpointError::Manifest {
                detail: format!("missing field {key}"),
            })
    };
    let cfg = ModelConfig {
        hidden: get("hidden")?,
        layers: get("layers")?,
        heads: get("heads")?,
        interaction: get("interaction")?,
        prompts: get("prompts")?,
        types: get("types")?,
        max_len: get("max_len")?,
    };
    cfg.validate()?;
    if types.len() != cfg.types {
        return Err(CheckpointError::Manifest {
            detail: format!(
                "{} type names for a {}-type config",
                types.len(),
                cfg.types
            ),
        });
    }
    let template = template.ok_or_else(|| CheckpointError::Manifest {
        detail: "missing template".into(),
    })?;
    let vocab = Vocab::from_saved(words, cfg.prompts)?;

    // Fill a skeleton with the payload, validating shapes against the config.
    let mut params: ModelParams<f32> = ModelParams::init(&cfg, vocab.size(), 0);
    let mut used = vec![false; tensors.len()];
    for (name, tensor) in params.named_mut() {
        let idx = tensors
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| CheckpointError::MissingTensor { name: name.clone() })?;
        let entry = &tensors[idx];
        used[idx] = true;
        if entry.1.shape != tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: tensor.shape().to_vec(),
                got: entry.1.shape.clone(),
            });
        }
        let end = entry.1.offset + entry.1.len;
        if entry.1.len != tensor.numel() || end > floats_available {
            return Err(CheckpointError::PayloadTooShort {
                need: end,
                found: floats_available,
            });
        }
        for (i, v) in tensor.data_mut().iter_mut().enumerate() {
            let at = (entry.1.offset + i) * 4;
            *v = f32::from_le_bytes(payload[at..at + 4].try_into().expect("4 bytes"));
        }
    }
    if let Some(idx) = used.iter().position(|&u| !u) {
        return Err(CheckpointError::UnknownTensor {
            name: tensors[idx].0.clone(),
        });
    }
    Ok(Checkpoint {
        cfg,
        template,
        types,
        vocab,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            interaction: 1,
            prompts: 3,
            types: 2,
            max_len: 32,
        };
        let vocab = Vocab::new(["alpha", "beta", "words with space"], cfg.prompts).unwrap();
        let params = ModelParams::init(&cfg, vocab.size(), 42);
        Checkpoint {
            cfg,
            template: TemplateKind::Soft,
            types: vec!["A".into(), "B".into()],
            vocab,
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &ckpt).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.cfg, ckpt.cfg);
        assert_eq!(loaded.template, TemplateKind::Soft);
        assert_eq!(loaded.types, ckpt.types);
        assert_eq!(loaded.vocab, ckpt.vocab);
        for ((n1, t1), (n2, t2)) in ckpt.params.named().iter().zip(loaded.params.named()) {
            assert_eq!(*n1, n2);
            assert_eq!(
                t1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                t2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "tensor {n1} changed"
            );
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxx").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn shape_tampering_is_detected() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let manifest_len =
            u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest = String::from_utf8(bytes[16..16 + manifest_len].to_vec()).unwrap();
        // Swap e_id's declared shape (3x8, same element count as 8x3).
        let tampered = manifest.replace("tensor e_id 3x8", "tensor e_id 8x3");
        assert_ne!(manifest, tampered);
        bytes.splice(16..16 + manifest_len, tampered.into_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load(&path),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        assert!(matches!(
            load(&path),
            Err(CheckpointError::PayloadTooShort { .. })
        ));
    }
}
