//! Binary checkpoint format (all integers little-endian `u32`):
//!
//! ```text
//! "TGDR" | version | config_len | config text (key=value lines)
//!        | vocab_count | (len | utf8 token)*
//!        | tensor_count | (name_len | name | rank | dims... | f32 data)*
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{EncoderConfig, EncoderError, EncoderModel, Tensor};
use crate::tokenizer::WordPieceVocab;

pub const MAGIC: &[u8; 4] = b"TGDR";
const VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32, EncoderError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str<R: Read>(r: &mut R) -> Result<String, EncoderError> {
    let n = get_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(EncoderError::BadCheckpoint(format!("string length {n} too large")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| EncoderError::BadCheckpoint("invalid utf-8".into()))
}

pub fn write_checkpoint<W: Write>(model: &EncoderModel<f32>, mut w: W) -> Result<(), EncoderError> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    let config: String = model
        .config()
        .to_kv()
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    put_str(&mut w, &config)?;
    match model.vocab() {
        Some(v) => {
            put_u32(&mut w, v.len() as u32)?;
            for t in v.tokens() {
                put_str(&mut w, t)?;
            }
        }
        None => put_u32(&mut w, 0)?,
    }
    put_u32(&mut w, model.params().len() as u32)?;
    for (name, t) in model.names().iter().zip(model.params()) {
        put_str(&mut w, name)?;
        put_u32(&mut w, t.shape.len() as u32)?;
        for &d in &t.shape {
            put_u32(&mut w, d as u32)?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<EncoderModel<f32>, EncoderError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EncoderError::BadCheckpoint("bad magic".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(EncoderError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let config_text = get_str(&mut r)?;
    let config = EncoderConfig::from_kv(config_text.lines().filter_map(|l| l.split_once('=')))?;
    let vocab_count = get_u32(&mut r)? as usize;
    let vocab = if vocab_count > 0 {
        let tokens = (0..vocab_count).map(|_| get_str(&mut r)).collect::<Result<Vec<_>, _>>()?;
        Some(WordPieceVocab::from_tokens(tokens)?)
    } else {
        None
    };
    let n = get_u32(&mut r)? as usize;
    let mut named = Vec::with_capacity(n);
    for _ in 0..n {
        let name = get_str(&mut r)?;
        let rank = get_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| get_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        named.push((name, Tensor { shape, data }));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(EncoderError::BadCheckpoint("trailing bytes".into()));
    }
    EncoderModel::with_params(config, vocab, named)
}

pub fn save_checkpoint(model: &EncoderModel<f32>, path: impl AsRef<Path>) -> Result<(), EncoderError> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderModel<f32>, EncoderError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&bytes[..])
}

/// SHA-256 of the serialized checkpoint.
pub fn fingerprint(model: &EncoderModel<f32>) -> [u8; 32] {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).expect("writing to memory");
    Sha256::digest(&buf).into()
}
