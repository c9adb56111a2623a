//! Binary artifact format for backbone weights and exit heads.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"BREX" | u32 version | u32 header_len | header JSON | body | u32 crc32(body)
//! ```
//!
//! The body is the concatenation of `f32` tensors. A backbone file stores
//! [`Backbone::tensors`] in order; a heads file stores gain, bias and
//! projection for every head in tap order. Tensor shapes come from the model
//! config carried in the header.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, LayerNorm, ModelConfig};
use crate::error::{Error, Result};
use crate::heads::{ExitHead, HeadBank, InitMode};
use crate::math::Matrix;

pub const MAGIC: [u8; 4] = *b"BREX";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Backbone,
    Heads,
}

/// Training provenance stored with a heads file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsMeta {
    pub init_mode: InitMode,
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: ArtifactKind,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<HeadsMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn encode(header: &Header, tensors: &[&[f32]]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let body_len: usize = tensors.iter().map(|t| t.len() * 4).sum();
    let mut out = Vec::with_capacity(16 + json.len() + body_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let body_start = out.len();
    for t in tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[body_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("truncated file while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(bytes, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Splits a file into header and verified body.
fn decode(mut bytes: &[u8]) -> Result<(Header, &[u8])> {
    if take(&mut bytes, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic (not a BREX file)".into()));
    }
    let version = read_u32(&mut bytes, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header_len = read_u32(&mut bytes, "header length")? as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, header_len, "header")?)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if bytes.len() < 4 {
        return Err(Error::Format("truncated file while reading checksum".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([trailer[0], trailer[1], trailer[2], trailer[3]]);
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }
    Ok((header, body))
}

fn fill_tensors(body: &[u8], tensors: Vec<&mut [f32]>) -> Result<()> {
    let expected: usize = tensors.iter().map(|t| t.len() * 4).sum();
    if body.len() != expected {
        return Err(Error::Format(format!(
            "body holds {} bytes, model config needs {expected}",
            body.len()
        )));
    }
    let mut chunks = body.chunks_exact(4);
    for t in tensors {
        for (v, c) in t.iter_mut().zip(chunks.by_ref()) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    Ok(())
}

pub fn backbone_to_bytes(model: &Backbone, config_hash: Option<&str>) -> Result<Vec<u8>> {
    let header = Header {
        kind: ArtifactKind::Backbone,
        model: model.config.clone(),
        heads: None,
        config_hash: config_hash.map(str::to_string),
    };
    encode(&header, &model.tensors())
}

pub fn backbone_from_bytes(bytes: &[u8]) -> Result<(Backbone, Header)> {
    let (header, body) = decode(bytes)?;
    if header.kind != ArtifactKind::Backbone {
        return Err(Error::Format("expected a backbone file, found heads".into()));
    }
    header.model.validate()?;
    let mut model = Backbone::zeroed(&header.model);
    fill_tensors(body, model.tensors_mut())?;
    Ok((model, header))
}

pub fn heads_to_bytes(
    model: &ModelConfig,
    bank: &HeadBank,
    meta: &HeadsMeta,
    config_hash: Option<&str>,
) -> Result<Vec<u8>> {
    if bank.taps() != model.exit_taps {
        return Err(Error::Configuration(format!(
            "head taps {:?} differ from model exit taps {:?}",
            bank.taps(),
            model.exit_taps
        )));
    }
    if bank.init_mode().is_some_and(|m| m != meta.init_mode) {
        return Err(Error::Configuration(format!(
            "heads were initialised as {} but metadata says {}",
            bank.init_mode().unwrap(),
            meta.init_mode
        )));
    }
    let header = Header {
        kind: ArtifactKind::Heads,
        model: model.clone(),
        heads: Some(meta.clone()),
        config_hash: config_hash.map(str::to_string),
    };
    let tensors: Vec<&[f32]> = bank.heads.iter().flat_map(|h| h.tensors()).collect();
    encode(&header, &tensors)
}

pub fn heads_from_bytes(bytes: &[u8]) -> Result<(HeadBank, Header)> {
    let (header, body) = decode(bytes)?;
    let Some(meta) = header.heads.clone() else {
        return Err(Error::Format("expected a heads file, found backbone".into()));
    };
    let c = &header.model;
    c.validate()?;
    let mut bank = HeadBank {
        heads: c
            .exit_taps
            .iter()
            .map(|&tap| ExitHead {
                tap_index: tap,
                norm: LayerNorm::identity(c.d_model),
                proj: Matrix::zeros(c.d_model, c.vocab_size),
                init_mode: meta.init_mode,
            })
            .collect(),
    };
    fill_tensors(body, bank.heads.iter_mut().flat_map(|h| h.tensors_mut()).collect())?;
    Ok((bank, header))
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn save_backbone(path: &Path, model: &Backbone, config_hash: Option<&str>) -> Result<()> {
    write_atomic(path, &backbone_to_bytes(model, config_hash)?)
}

pub fn load_backbone(path: &Path) -> Result<(Backbone, Header)> {
    backbone_from_bytes(&read_file(path)?)
}

pub fn save_heads(
    path: &Path,
    model: &ModelConfig,
    bank: &HeadBank,
    meta: &HeadsMeta,
    config_hash: Option<&str>,
) -> Result<()> {
    write_atomic(path, &heads_to_bytes(model, bank, meta, config_hash)?)
}

/// Loads heads and checks them against `model`.
pub fn load_heads(path: &Path, model: &Backbone) -> Result<(HeadBank, Header)> {
    let (bank, header) = heads_from_bytes(&read_file(path)?)?;
    if header.model != model.config {
        return Err(Error::Configuration(format!(
            "{} was trained for a different model config",
            path.display()
        )));
    }
    bank.check_consistent(model)?;
    Ok((bank, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::init_heads;
    use crate::rng::Rng;

    fn model() -> Backbone {
        Backbone::new(ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 3,
            n_attn_heads: 2,
            d_ff: 16,
            max_seq_len: 10,
            exit_taps: vec![1, 2],
            seed: 5,
        })
        .unwrap()
    }

    fn meta() -> HeadsMeta {
        HeadsMeta {
            init_mode: InitMode::Scratch,
            lambda: 0.95,
            steps: 10,
            seed: 1,
        }
    }

    #[test]
    fn backbone_round_trip_is_bitwise() {
        let m = model();
        let bytes = backbone_to_bytes(&m, Some("abc")).unwrap();
        assert_eq!(&bytes[..4], b"BREX");
        let (back, header) = backbone_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.config_hash.as_deref(), Some("abc"));
    }

    #[test]
    fn heads_round_trip_is_bitwise() {
        let m = model();
        let bank = init_heads(&m, InitMode::Scratch, &mut Rng::new(3));
        let bytes = heads_to_bytes(&m.config, &bank, &meta(), None).unwrap();
        let (back, header) = heads_from_bytes(&bytes).unwrap();
        assert_eq!(back, bank);
        assert_eq!(header.heads, Some(meta()));
    }

    #[test]
    fn corrupted_body_fails_checksum() {
        let m = model();
        let mut bytes = backbone_to_bytes(&m, None).unwrap();
        let i = bytes.len() - 20;
        bytes[i] ^= 0x40;
        let err = backbone_from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(ref s) if s.contains("checksum")), "{err}");
    }

    #[test]
    fn truncation_and_magic_are_format_errors() {
        let m = model();
        let bytes = backbone_to_bytes(&m, None).unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(backbone_from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(backbone_from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let m = model();
        let bank = init_heads(&m, InitMode::Scratch, &mut Rng::new(3));
        let heads = heads_to_bytes(&m.config, &bank, &meta(), None).unwrap();
        assert!(backbone_from_bytes(&heads).is_err());
        let weights = backbone_to_bytes(&m, None).unwrap();
        assert!(heads_from_bytes(&weights).is_err());
    }

    #[test]
    fn atomic_write_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.brex");
        let m = model();
        save_backbone(&path, &m, None).unwrap();
        assert!(!dir.path().join("sub/model.brex.tmp").exists());
        assert_eq!(load_backbone(&path).unwrap().0, m);
        let bank = init_heads(&m, InitMode::CopiedFromLmHead, &mut Rng::new(0));
        let hp = dir.path().join("heads.brex");
        assert!(save_heads(&hp, &m.config, &bank, &meta(), None).is_err());
        let copied = HeadsMeta {
            init_mode: InitMode::CopiedFromLmHead,
            ..meta()
        };
        save_heads(&hp, &m.config, &bank, &copied, None).unwrap();
        assert_eq!(load_heads(&hp, &m).unwrap().0, bank);
        let mut other = m.clone();
        other.config.seed = 99;
        assert!(matches!(load_heads(&hp, &other), Err(Error::Configuration(_))));
    }
}
