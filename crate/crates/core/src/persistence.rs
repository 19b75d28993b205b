//! Versioned little-endian binary formats for models and codebooks.
//!
//! The byte layout is documented in `docs/format.md`. All floats are stored
//! as IEEE-754 single precision, so a saved model is exact for `f32`
//! parameters.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::corpus::{Entry, Vocabulary};
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Real};
use crate::model::{Fusion, GateSide, Model, ModelConfig};
use crate::quantizer::Codebook;

pub const MODEL_MAGIC: [u8; 4] = *b"MMFT";
pub const CODEBOOK_MAGIC: [u8; 4] = *b"MMPQ";
pub const MODEL_VERSION: u32 = 1;
pub const CODEBOOK_VERSION: u32 = 1;

// Elements read per allocation step, so a corrupt length fails as a
// truncation instead of a huge allocation.
const READ_CHUNK: usize = 1 << 20;

pub fn save_model<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let model = read_model(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Malformed("trailing bytes after model".into()));
    }
    Ok(model)
}

pub fn save_codebook(codebook: &Codebook, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_codebook(codebook, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let mut r = BufReader::new(File::open(path)?);
    read_codebook(&mut r)
}

pub fn write_model<T: Real, W: Write>(model: &Model<T>, w: &mut W) -> Result<()> {
    w.write_all(&MODEL_MAGIC)?;
    w.write_u32::<LE>(MODEL_VERSION)?;

    let cfg = model.config();
    let (tag, gate) = fusion_tags(cfg.fusion);
    w.write_u32::<LE>(tag)?;
    w.write_u32::<LE>(gate)?;
    w.write_f32::<LE>(cfg.fusion.alpha().unwrap_or(0.0))?;
    w.write_u32::<LE>(to_u32(cfg.dim)?)?;
    w.write_u32::<LE>(to_u32(cfg.label_count)?)?;
    w.write_u32::<LE>(to_u32(cfg.visual_dim)?)?;

    let vocab = model.vocab();
    w.write_u32::<LE>(vocab.min_count())?;
    write_entries(vocab.words(), w)?;
    write_entries(vocab.labels(), w)?;

    write_matrix(&model.u, w)?;
    match &model.v {
        Some(v) => write_matrix(v, w)?,
        None => write_matrix::<T, _>(&Matrix::zeros(0, 0), w)?,
    }
    write_matrix(&model.w, w)?;

    match model.codebook() {
        Some(cb) => {
            w.write_u8(1)?;
            write_codebook(cb, w)?;
        }
        None => w.write_u8(0)?,
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<Model> {
    read_model_inner(r).map_err(eof_is_truncation)
}

fn read_model_inner<R: Read>(r: &mut R) -> Result<Model> {
    check_header(r, MODEL_MAGIC, MODEL_VERSION)?;
    let tag = r.read_u32::<LE>()?;
    let gate = r.read_u32::<LE>()?;
    let alpha = r.read_f32::<LE>()?;
    let fusion = fusion_from_tags(tag, gate, alpha)?;
    let config = ModelConfig {
        fusion,
        dim: r.read_u32::<LE>()? as usize,
        label_count: r.read_u32::<LE>()? as usize,
        visual_dim: r.read_u32::<LE>()? as usize,
    };

    let min_count = r.read_u32::<LE>()?;
    let words = read_entries(r)?;
    let labels = read_entries(r)?;
    let vocab = Vocabulary::from_entries(words, labels, min_count);

    let u = read_matrix(r)?;
    let v = read_matrix(r)?;
    let v = (v.rows() > 0 || v.cols() > 0).then_some(v);
    let w = read_matrix(r)?;
    let codebook = match r.read_u8()? {
        0 => None,
        1 => Some(read_codebook_inner(r)?),
        other => return Err(Error::Malformed(format!("codebook flag {}", other))),
    };
    Model::from_parts(config, vocab, u, v, w, codebook)
}

pub fn write_codebook<W: Write>(cb: &Codebook, w: &mut W) -> Result<()> {
    w.write_all(&CODEBOOK_MAGIC)?;
    w.write_u32::<LE>(CODEBOOK_VERSION)?;
    w.write_u32::<LE>(to_u32(cb.source_dim())?)?;
    w.write_u32::<LE>(to_u32(cb.n())?)?;
    w.write_u32::<LE>(to_u32(cb.k())?)?;
    w.write_u32::<LE>(to_u32(cb.r())?)?;
    w.write_f32::<LE>(cb.alpha())?;
    for perm in cb.permutations() {
        for &p in perm {
            w.write_u32::<LE>(p)?;
        }
    }
    for &c in cb.centroids() {
        w.write_f32::<LE>(c)?;
    }
    Ok(())
}

pub fn read_codebook<R: Read>(r: &mut R) -> Result<Codebook> {
    read_codebook_inner(r).map_err(eof_is_truncation)
}

fn read_codebook_inner<R: Read>(r: &mut R) -> Result<Codebook> {
    check_header(r, CODEBOOK_MAGIC, CODEBOOK_VERSION)?;
    let source_dim = r.read_u32::<LE>()? as usize;
    let n = r.read_u32::<LE>()? as usize;
    let k = r.read_u32::<LE>()? as usize;
    let reps = r.read_u32::<LE>()? as usize;
    let alpha = r.read_f32::<LE>()?;
    if n == 0 || !source_dim.is_multiple_of(n) {
        return Err(Error::Malformed(format!("{} dims in {} slices", source_dim, n)));
    }
    let mut permutations = Vec::new();
    for _ in 0..reps {
        permutations.push(read_array(r, source_dim, |r| r.read_u32::<LE>())?);
    }
    let len = reps
        .checked_mul(k)
        .and_then(|x| x.checked_mul(source_dim))
        .ok_or_else(|| Error::Malformed("codebook size overflows".into()))?;
    let centroids = read_array(r, len, |r| r.read_f32::<LE>())?;
    Codebook::new(source_dim, n, k, alpha, permutations, centroids)
}

fn check_header<R: Read>(r: &mut R, magic: [u8; 4], version: u32) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    let v = r.read_u32::<LE>()?;
    if v != version {
        return Err(Error::UnsupportedVersion(v));
    }
    Ok(())
}

fn eof_is_truncation(e: Error) -> Error {
    match e {
        Error::Io(io) if io.kind() == io::ErrorKind::UnexpectedEof => Error::Truncated,
        other => other,
    }
}

fn to_u32(x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Malformed(format!("{} does not fit in u32", x)))
}

fn fusion_tags(fusion: Fusion) -> (u32, u32) {
    let gate = match fusion.gate() {
        None => 0,
        Some(GateSide::Text) => 1,
        Some(GateSide::Visual) => 2,
    };
    let tag = match fusion {
        Fusion::Text => 0,
        Fusion::Continuous => 1,
        Fusion::Additive => 2,
        Fusion::Max => 3,
        Fusion::Gated(_) => 4,
        Fusion::Bilinear => 5,
        Fusion::BilinearGated(_) => 6,
        Fusion::Discretized { .. } => 7,
    };
    (tag, gate)
}

fn fusion_from_tags(tag: u32, gate: u32, alpha: f32) -> Result<Fusion> {
    let gate = match gate {
        0 => None,
        1 => Some(GateSide::Text),
        2 => Some(GateSide::Visual),
        other => return Err(Error::Malformed(format!("gate tag {}", other))),
    };
    let name = Fusion::NAMES
        .get(tag as usize)
        .ok_or_else(|| Error::Malformed(format!("fusion tag {}", tag)))?;
    let alpha = (*name == "discretized").then_some(alpha);
    Fusion::from_parts(name, gate, alpha).map_err(|e| Error::Malformed(e.to_string()))
}

fn write_entries<W: Write>(entries: &[Entry], w: &mut W) -> Result<()> {
    w.write_u64::<LE>(entries.len() as u64)?;
    for e in entries {
        w.write_u32::<LE>(to_u32(e.token.len())?)?;
        w.write_all(e.token.as_bytes())?;
        w.write_u64::<LE>(e.count)?;
    }
    Ok(())
}

fn read_entries<R: Read>(r: &mut R) -> Result<Vec<Entry>> {
    let n = r.read_u64::<LE>()?;
    let mut entries = Vec::new();
    for _ in 0..n {
        let len = r.read_u32::<LE>()? as usize;
        let bytes = read_array(r, len, |r| r.read_u8())?;
        let token = String::from_utf8(bytes)
            .map_err(|_| Error::Malformed("vocabulary entry is not UTF-8".into()))?;
        let count = r.read_u64::<LE>()?;
        entries.push(Entry { token, count });
    }
    Ok(entries)
}

fn write_matrix<T: Real, W: Write>(m: &Matrix<T>, w: &mut W) -> Result<()> {
    w.write_u64::<LE>(m.rows() as u64)?;
    w.write_u64::<LE>(m.cols() as u64)?;
    for &x in m.as_slice() {
        w.write_f32::<LE>(x.as_f32())?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix<f32>> {
    let rows = r.read_u64::<LE>()? as usize;
    let cols = r.read_u64::<LE>()? as usize;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Malformed("matrix size overflows".into()))?;
    let data = read_array(r, len, |r| r.read_f32::<LE>())?;
    Ok(Matrix::from_vec(rows, cols, data))
}

fn read_array<R: Read, X>(
    r: &mut R,
    len: usize,
    mut read_one: impl FnMut(&mut R) -> io::Result<X>,
) -> Result<Vec<X>> {
    let mut out = Vec::with_capacity(len.min(READ_CHUNK));
    for _ in 0..len {
        out.push(read_one(r)?);
    }
    Ok(out)
}
