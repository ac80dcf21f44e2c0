use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustic::{self, AcousticConfig, EMBEDDING};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::flow::{self, FlowConfig};
use crate::params::{is_buffer, Param, ParamSet};
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 4] = b"TTSF";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Acoustic,
    Vocoder,
}

/// One completed stage in an archive's ancestry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub stage: String,
    /// Tensor fingerprint of the archive the stage produced.
    pub fingerprint: String,
    pub corpus: String,
    pub vocabulary_fingerprint: Option<String>,
    pub steps: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub kind: ModelKind,
    pub stage: String,
    pub step_count: u64,
    pub seed: u64,
    pub config_fingerprint: String,
    pub acoustic_config: Option<AcousticConfig>,
    pub flow_config: Option<FlowConfig>,
    /// Vocabulary in its file form (acoustic archives only).
    pub vocabulary: Option<String>,
    pub vocabulary_fingerprint: Option<String>,
    /// Non-trainable tensor names, in archive order.
    pub frozen: Vec<String>,
    pub tensor_count: usize,
    /// Earlier stages, oldest first.
    pub provenance: Vec<ProvenanceEntry>,
}

/// Named tensors plus the metadata needed to rebuild and continue a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterArchive {
    pub meta: ArchiveMeta,
    pub params: ParamSet,
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl ParameterArchive {
    pub fn acoustic(
        params: ParamSet,
        cfg: &AcousticConfig,
        vocab: &Vocabulary,
        stage: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        let mut a = Self {
            meta: ArchiveMeta {
                kind: ModelKind::Acoustic,
                stage: stage.into(),
                step_count: 0,
                seed,
                config_fingerprint: cfg.fingerprint(),
                acoustic_config: Some(cfg.clone()),
                flow_config: None,
                vocabulary: Some(vocab.to_file_string()),
                vocabulary_fingerprint: Some(vocab.fingerprint()),
                frozen: Vec::new(),
                tensor_count: 0,
                provenance: Vec::new(),
            },
            params,
        };
        a.sync_meta();
        a.validate()?;
        Ok(a)
    }

    pub fn vocoder(params: ParamSet, cfg: &FlowConfig, stage: impl Into<String>, seed: u64) -> Result<Self> {
        let mut a = Self {
            meta: ArchiveMeta {
                kind: ModelKind::Vocoder,
                stage: stage.into(),
                step_count: 0,
                seed,
                config_fingerprint: cfg.fingerprint(),
                acoustic_config: None,
                flow_config: Some(cfg.clone()),
                vocabulary: None,
                vocabulary_fingerprint: None,
                frozen: Vec::new(),
                tensor_count: 0,
                provenance: Vec::new(),
            },
            params,
        };
        a.sync_meta();
        a.validate()?;
        Ok(a)
    }

    /// Recomputes the metadata fields derived from the tensors.
    pub fn sync_meta(&mut self) {
        self.meta.tensor_count = self.params.len();
        self.meta.frozen = self
            .params
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, _)| n.clone())
            .collect();
    }

    pub fn acoustic_config(&self) -> Result<&AcousticConfig> {
        self.meta
            .acoustic_config
            .as_ref()
            .ok_or_else(|| Error::Archive(format!("{:?} archive has no acoustic config", self.meta.kind)))
    }

    pub fn flow_config(&self) -> Result<&FlowConfig> {
        self.meta
            .flow_config
            .as_ref()
            .ok_or_else(|| Error::Archive(format!("{:?} archive has no flow config", self.meta.kind)))
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let text = self
            .meta
            .vocabulary
            .as_deref()
            .ok_or_else(|| Error::Archive("archive carries no vocabulary".into()))?;
        Vocabulary::parse(text)
    }

    /// Structural checks: the tensor set matches the model layout exactly,
    /// the metadata agrees with the tensors, and buffers are never trainable.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Archive(msg));
        if self.meta.tensor_count != self.params.len() {
            return bad(format!(
                "metadata declares {} tensors, archive holds {}",
                self.meta.tensor_count,
                self.params.len()
            ));
        }
        let frozen: HashSet<&str> = self.meta.frozen.iter().map(String::as_str).collect();
        for (name, p) in self.params.iter() {
            if p.trainable == frozen.contains(name.as_str()) {
                return bad(format!("trainable flag of {name} disagrees with the frozen list"));
            }
            if p.trainable && is_buffer(name) {
                return bad(format!("buffer {name} is marked trainable"));
            }
        }
        if frozen.len() != self.meta.frozen.len() || frozen.iter().any(|n| !self.params.contains(n)) {
            return bad("frozen list names unknown or repeated tensors".into());
        }
        let expected = match self.meta.kind {
            ModelKind::Acoustic => {
                let cfg = self.acoustic_config()?;
                if cfg.fingerprint() != self.meta.config_fingerprint {
                    return bad("config fingerprint does not match the stored acoustic config".into());
                }
                let vocab = self.vocabulary()?;
                if Some(vocab.fingerprint()) != self.meta.vocabulary_fingerprint {
                    return bad("vocabulary fingerprint does not match the stored vocabulary".into());
                }
                let rows = self.params.tensor(EMBEDDING).map(|t| t.shape()[0]).unwrap_or(0);
                if rows != vocab.len() {
                    return bad(format!(
                        "embedding has {rows} rows but the vocabulary has {} symbols",
                        vocab.len()
                    ));
                }
                acoustic::param_shapes(cfg, vocab.len())?
            }
            ModelKind::Vocoder => {
                let cfg = self.flow_config()?;
                if cfg.fingerprint() != self.meta.config_fingerprint {
                    return bad("config fingerprint does not match the stored flow config".into());
                }
                flow::param_shapes(cfg)?
            }
        };
        if expected.len() != self.params.len() {
            return bad(format!(
                "layout expects {} tensors, archive holds {}",
                expected.len(),
                self.params.len()
            ));
        }
        for ((name, shape), (have, p)) in expected.iter().zip(self.params.iter()) {
            if name != have || shape.as_slice() != p.value.shape() {
                return bad(format!(
                    "expected {name} {shape:?}, found {have} {:?}",
                    p.value.shape()
                ));
            }
        }
        Ok(())
    }

    /// Serialized form: magic, version, length-prefixed JSON metadata, then
    /// one record per tensor (name, dtype, rank, extents, little-endian values).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        meta.tensor_count = self.params.len();
        meta.frozen = self
            .params
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, _)| n.clone())
            .collect();
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(json.len() + 16 + self.params.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(json.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(&json);
        write_records(&self.params, &mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Archive(format!(
                "bad magic {:02x?} (expected {:?}); not a parameter archive",
                magic,
                std::str::from_utf8(MAGIC).unwrap_or("TTSF")
            )));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Archive(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: ArchiveMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Archive(format!("metadata: {e}")))?;
        let frozen: HashSet<&str> = meta.frozen.iter().map(String::as_str).collect();
        let mut params = ParamSet::new();
        for i in 0..meta.tensor_count {
            let what = format!("tensor record {i}");
            let name_len = r.u32(&what)? as usize;
            let name = std::str::from_utf8(r.take(name_len, &what)?)
                .map_err(|_| Error::Archive(format!("{what}: name is not UTF-8")))?
                .to_string();
            let dtype = r.u8(&name)?;
            let rank = r.u8(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&name)? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let n = n.ok_or_else(|| Error::Archive(format!("{name}: extents overflow")))?;
            let data: Vec<f64> = match dtype {
                DTYPE_F64 => {
                    let raw = r.take(n.checked_mul(8).unwrap_or(usize::MAX), &name)?;
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect()
                }
                DTYPE_F32 => {
                    let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), &name)?;
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                        .collect()
                }
                other => return Err(Error::Archive(format!("{name}: unknown dtype code {other}"))),
            };
            if params.contains(&name) {
                return Err(Error::Archive(format!("duplicate tensor name {name}")));
            }
            let trainable = !frozen.contains(name.as_str());
            params.push(name, Param {
                value: Tensor::new(shape, data)?,
                trainable,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Archive(format!(
                "{} trailing bytes after the last tensor record",
                bytes.len() - r.pos
            )));
        }
        let a = Self { meta, params };
        a.validate()?;
        Ok(a)
    }

    /// Writes through a temporary file in the same directory and renames it
    /// over `path`, so readers never observe a partial archive.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
        }
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(format!(".tmp{}", std::process::id()));
        let tmp = path.with_file_name(tmp_name);
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::path(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::path(&tmp, e))?;
        f.sync_all().map_err(|e| Error::path(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::path(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::path(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Archive(msg) => Error::Archive(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(fingerprint_bytes(&self.to_bytes()?))
    }

    /// Hash of the tensor records: names, shapes and values, without trainable flags.
    pub fn tensor_fingerprint(&self) -> Result<String> {
        let mut out = Vec::with_capacity(self.params.numel() * 8);
        write_records(&self.params, &mut out)?;
        Ok(fingerprint_bytes(&out))
    }
}

fn write_records(params: &ParamSet, out: &mut Vec<u8>) -> Result<()> {
    for (name, p) in params.iter() {
        out.extend_from_slice(&len_u32(name.len(), "tensor name")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        let shape = p.value.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| Error::Archive(format!("{name}: rank too large")))?);
        for &e in shape {
            out.extend_from_slice(&len_u32(e, "extent")?.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Archive(format!("{what} length {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Archive(format!(
                "truncated: {what} needs {n} bytes at offset {} but the file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}
