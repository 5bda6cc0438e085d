//! Binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "RNICKPT\0"
//! version    u32
//! header     u32 length + UTF-8 TOML (architecture, stage, epoch, coefficients)
//! count      u32
//! per array  u16 name length, name, u8 rank, u64 dims..., f64 values...
//! digest     32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use rn_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Codec, CodecConfig, ParamSet};
use crate::io::write_atomic;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"RNICKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Pretrained,
    Teacher,
    Finetuned,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Pretrained => "pretrained",
            Stage::Teacher => "teacher",
            Stage::Finetuned => "finetuned",
        }
    }
}

/// Metadata stored in the archive header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub epoch: usize,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub seed: u64,
    pub codec: CodecConfig,
}

impl CheckpointMeta {
    pub fn new(stage: Stage, codec: &CodecConfig, lambda: f64, seed: u64) -> Self {
        Self {
            stage,
            epoch: 0,
            lambda,
            alpha: None,
            beta: None,
            seed,
            codec: codec.clone(),
        }
    }
}

/// Serialises weights and metadata into the archive format.
pub fn encode(params: &ParamSet, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = toml::to_string(meta)
        .map_err(|e| Error::ConfigParse(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(64 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint("unexpected end of archive".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses an archive, verifying its digest before anything else is read.
pub fn decode(bytes: &[u8]) -> Result<(ParamSet, CheckpointMeta)> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing magic header".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != stored {
        return Err(Error::CorruptCheckpoint("digest mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(header_len)?)
        .map_err(|_| Error::CorruptCheckpoint("header is not UTF-8".into()))?;
    let meta: CheckpointMeta = toml::from_str(header)
        .map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("weight name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("array `{name}` too large"))
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(&shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok((params, meta))
}

pub fn save_checkpoint(path: &Path, codec: &Codec, meta: &CheckpointMeta) -> Result<()> {
    if meta.codec != codec.config {
        return Err(Error::Architecture(
            "metadata architecture differs from the codec".into(),
        ));
    }
    write_atomic(path, &encode(&codec.params, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Codec, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (params, meta) = decode(&bytes)?;
    let codec = Codec::from_params(meta.codec.clone(), params)?;
    Ok((codec, meta))
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::hex(&Sha256::digest(&bytes)))
}
