//! Versioned binary model checkpoints.
//!
//! Exact layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic bytes "RSPM"
//! 4       4     u32 format version (currently 1)
//! 8       4     u32 kind: 0 = language model, 1 = vision-language model
//! 12      4     u32 vocab size
//! 16      4     u32 embedding dim
//! 20      4     u32 transformer blocks
//! 24      4     u32 attention heads
//! 28      4     u32 context length
//! 32      4     u32 patch size (0 for kind 0)
//! 36      8     u64 init seed
//! 44      4     u32 byte length of the UTF-8 vocabulary string
//! 48      n     vocabulary characters, UTF-8, in token order
//! ..      8     u64 base parameter count
//! ..      8*k   base parameters, f64 little-endian, layout order
//! ..      8     u64 patch parameter count (kind 1 only)
//! ..      8*k   patch parameters, f64 little-endian (kind 1 only)
//! ```
//!
//! Base parameter order matches the flat layout: token embedding, positional
//! embedding, then per block (ln1 gain/bias, qkv weight/bias, attention
//! projection weight/bias, ln2 gain/bias, mlp in weight/bias, mlp out
//! weight/bias), final norm gain/bias, unembedding weight/bias. Patch
//! parameters are the `(patch*patch*3) x dim` weight followed by a `dim`
//! bias.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{MicroLm, MicroVlm, ModelConfig, ModelError, Vocab};

const MAGIC: &[u8; 4] = b"RSPM";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic bytes, not a model checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("unknown model kind {0}")]
    BadKind(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Either flavor of model, as stored on disk.
#[derive(Debug, Clone)]
pub enum ModelCheckpoint {
    Lm(MicroLm),
    Vlm(MicroVlm),
}

impl ModelCheckpoint {
    pub fn as_lm(&self) -> Option<&MicroLm> {
        match self {
            Self::Lm(m) => Some(m),
            Self::Vlm(_) => None,
        }
    }

    pub fn as_vlm(&self) -> Option<&MicroVlm> {
        match self {
            Self::Vlm(m) => Some(m),
            Self::Lm(_) => None,
        }
    }
}

impl MicroLm {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        write_header(&mut buf, 0, self.config(), 0, self.seed(), self.vocab())?;
        write_params(&mut buf, self.params())?;
        fs::write(path, buf)?;
        Ok(())
    }
}

impl MicroVlm {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        write_header(
            &mut buf,
            1,
            self.config(),
            self.patch(),
            self.base().seed(),
            self.vocab(),
        )?;
        write_params(&mut buf, self.base().params())?;
        write_params(&mut buf, self.patch_params())?;
        fs::write(path, buf)?;
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, CheckpointError> {
    let data = fs::read(path)?;
    let mut r = io::Cursor::new(data);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let kind = read_u32(&mut r)?;
    let vocab_size = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let blocks = read_u32(&mut r)? as usize;
    let heads = read_u32(&mut r)? as usize;
    let context = read_u32(&mut r)? as usize;
    let patch = read_u32(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let vocab_bytes = read_u32(&mut r)? as usize;
    let mut vb = vec![0u8; vocab_bytes];
    r.read_exact(&mut vb)?;
    let vocab_str =
        String::from_utf8(vb).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let vocab = Vocab::from_chars(vocab_str.chars().collect())?;
    if vocab.size() != vocab_size {
        return Err(CheckpointError::Corrupt(format!(
            "vocab string has {} characters, header says {}",
            vocab.size(),
            vocab_size
        )));
    }
    let config = ModelConfig {
        vocab_size,
        dim,
        blocks,
        heads,
        context,
    };
    let base_params = read_params(&mut r)?;
    let lm = MicroLm::from_parts(config, vocab, base_params, seed)?;
    match kind {
        0 => Ok(ModelCheckpoint::Lm(lm)),
        1 => {
            let patch_params = read_params(&mut r)?;
            Ok(ModelCheckpoint::Vlm(MicroVlm::from_parts(
                lm,
                patch,
                patch_params,
            )?))
        }
        k => Err(CheckpointError::BadKind(k)),
    }
}

fn write_header(
    buf: &mut Vec<u8>,
    kind: u32,
    cfg: &ModelConfig,
    patch: usize,
    seed: u64,
    vocab: &Vocab,
) -> io::Result<()> {
    buf.write_all(MAGIC)?;
    for v in [
        VERSION,
        kind,
        cfg.vocab_size as u32,
        cfg.dim as u32,
        cfg.blocks as u32,
        cfg.heads as u32,
        cfg.context as u32,
        patch as u32,
    ] {
        buf.write_all(&v.to_le_bytes())?;
    }
    buf.write_all(&seed.to_le_bytes())?;
    let vocab_str: String = vocab.chars().iter().collect();
    buf.write_all(&(vocab_str.len() as u32).to_le_bytes())?;
    buf.write_all(vocab_str.as_bytes())?;
    Ok(())
}

fn write_params(buf: &mut Vec<u8>, params: &[f64]) -> io::Result<()> {
    buf.write_all(&(params.len() as u64).to_le_bytes())?;
    for &p in params {
        buf.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_params(r: &mut impl Read) -> Result<Vec<f64>, CheckpointError> {
    let count = read_u64(r)? as usize;
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
