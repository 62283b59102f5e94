//! Versioned little-endian binary containers for model states and buffers.
//!
//! Model checkpoint:
//!
//! ```text
//! magic    8 bytes  "XRPMODEL"
//! version  u32      1
//! spec     32 bytes SHA-256 of the architecture
//! steps    u64      ModelState::version
//! classes  u32 n, then n x u64 global class ids
//! params   u32 n, then per tensor:
//!            u16 name length, UTF-8 name,
//!            u8 rank, rank x u64 dims, f64 values
//! ```
//!
//! Buffer checkpoint:
//!
//! ```text
//! magic    8 bytes  "XRPBUFFR"
//! version  u32      1
//! spec     32 bytes SHA-256 of the architecture
//! capacity u64
//! policy   u8 (0 equalized, 1 per-class), per-class adds u64 base, u64 incremental
//! entries  u64 n, then per entry:
//!            u32 task id, u64 label, u64 noise seed,
//!            u8 rank, rank x u64 dims, f64 image values,
//!            u8 method tag, u32 producing task, u32 height, u32 width,
//!            f64 map values
//! ```
//!
//! All floats are stored as raw IEEE-754 bits, so round trips are exact.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::memory::{BufferEntry, DualBuffer, QuotaPolicy};
use crate::model::{ModelState, NamedTensor};
use crate::saliency::{SaliencyMap, SaliencyMethod};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 8] = b"XRPMODEL";
pub const BUFFER_MAGIC: &[u8; 8] = b"XRPBUFFR";
pub const FORMAT_VERSION: u32 = 1;

type Decode<T> = std::result::Result<T, String>;

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.write_u8(t.shape().len() as u8).unwrap();
    for &d in t.shape() {
        out.write_u64::<LE>(d as u64).unwrap();
    }
    for &v in t.data() {
        out.write_f64::<LE>(v).unwrap();
    }
}

fn io(e: std::io::Error) -> String {
    format!("truncated or unreadable data ({e})")
}

fn get_len(r: &mut Cursor<&[u8]>, n: u64, elem: usize) -> Decode<usize> {
    let remaining = r.get_ref().len() as u64 - r.position();
    if n.saturating_mul(elem as u64) > remaining {
        return Err(format!("length {n} exceeds the remaining {remaining} bytes"));
    }
    Ok(n as usize)
}

fn get_tensor(r: &mut Cursor<&[u8]>) -> Decode<Tensor> {
    let rank = r.read_u8().map_err(io)?;
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(r.read_u64::<LE>().map_err(io)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or("tensor size overflows")?;
    let n = get_len(r, n, 8)?;
    let mut data = vec![0.0; n];
    r.read_f64_into::<LE>(&mut data).map_err(io)?;
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

fn check_header(r: &mut Cursor<&[u8]>, magic: &[u8; 8], spec_hash: &[u8; 32]) -> Decode<()> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(io)?;
    if &m != magic {
        return Err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        ));
    }
    let version = r.read_u32::<LE>().map_err(io)?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let mut h = [0u8; 32];
    r.read_exact(&mut h).map_err(io)?;
    if &h != spec_hash {
        return Err("architecture hash does not match the configured model".into());
    }
    Ok(())
}

fn check_end(r: &Cursor<&[u8]>) -> Decode<()> {
    if (r.position() as usize) != r.get_ref().len() {
        return Err("trailing bytes after the last record".into());
    }
    Ok(())
}

pub fn encode_model(state: &ModelState, spec_hash: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.write_u32::<LE>(FORMAT_VERSION).unwrap();
    out.extend_from_slice(spec_hash);
    out.write_u64::<LE>(state.version).unwrap();
    out.write_u32::<LE>(state.classes_seen.len() as u32).unwrap();
    for &c in &state.classes_seen {
        out.write_u64::<LE>(c as u64).unwrap();
    }
    out.write_u32::<LE>(state.params.len() as u32).unwrap();
    for p in &state.params {
        out.write_u16::<LE>(p.name.len() as u16).unwrap();
        out.write_all(p.name.as_bytes()).unwrap();
        put_tensor(&mut out, &p.tensor);
    }
    out
}

fn decode_model_inner(bytes: &[u8], spec_hash: &[u8; 32]) -> Decode<ModelState> {
    let mut r = Cursor::new(bytes);
    check_header(&mut r, MODEL_MAGIC, spec_hash)?;
    let version = r.read_u64::<LE>().map_err(io)?;
    let n = r.read_u32::<LE>().map_err(io)?;
    let n = get_len(&mut r, n as u64, 8)?;
    let mut classes_seen = Vec::with_capacity(n);
    for _ in 0..n {
        classes_seen.push(r.read_u64::<LE>().map_err(io)? as usize);
    }
    let n = r.read_u32::<LE>().map_err(io)?;
    let n = get_len(&mut r, n as u64, 3)?;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.read_u16::<LE>().map_err(io)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| "parameter name is not UTF-8")?;
        params.push(NamedTensor {
            name,
            tensor: get_tensor(&mut r)?,
        });
    }
    check_end(&r)?;
    Ok(ModelState {
        params,
        classes_seen,
        version,
    })
}

pub fn decode_model(bytes: &[u8], spec_hash: &[u8; 32], path: &Path) -> Result<ModelState> {
    decode_model_inner(bytes, spec_hash).map_err(|m| Error::format(path, m))
}

pub fn save_model(path: &Path, state: &ModelState, spec_hash: &[u8; 32]) -> Result<()> {
    std::fs::write(path, encode_model(state, spec_hash)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path, spec_hash: &[u8; 32]) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, spec_hash, path)
}

pub fn encode_buffer(buffer: &DualBuffer, spec_hash: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BUFFER_MAGIC);
    out.write_u32::<LE>(FORMAT_VERSION).unwrap();
    out.extend_from_slice(spec_hash);
    out.write_u64::<LE>(buffer.capacity as u64).unwrap();
    match buffer.policy {
        QuotaPolicy::Equalized => out.write_u8(0).unwrap(),
        QuotaPolicy::PerClass { base, incremental } => {
            out.write_u8(1).unwrap();
            out.write_u64::<LE>(base as u64).unwrap();
            out.write_u64::<LE>(incremental as u64).unwrap();
        }
    }
    out.write_u64::<LE>(buffer.entries.len() as u64).unwrap();
    for e in &buffer.entries {
        out.write_u32::<LE>(e.task_id as u32).unwrap();
        out.write_u64::<LE>(e.label as u64).unwrap();
        out.write_u64::<LE>(e.noise_seed).unwrap();
        put_tensor(&mut out, &e.image);
        let s = &e.saliency;
        out.write_u8(s.method.tag()).unwrap();
        out.write_u32::<LE>(s.producing_task as u32).unwrap();
        out.write_u32::<LE>(s.height as u32).unwrap();
        out.write_u32::<LE>(s.width as u32).unwrap();
        for &v in &s.values {
            out.write_f64::<LE>(v).unwrap();
        }
    }
    out
}

fn decode_buffer_inner(bytes: &[u8], spec_hash: &[u8; 32]) -> Decode<DualBuffer> {
    let mut r = Cursor::new(bytes);
    check_header(&mut r, BUFFER_MAGIC, spec_hash)?;
    let capacity = r.read_u64::<LE>().map_err(io)? as usize;
    let policy = match r.read_u8().map_err(io)? {
        0 => QuotaPolicy::Equalized,
        1 => QuotaPolicy::PerClass {
            base: r.read_u64::<LE>().map_err(io)? as usize,
            incremental: r.read_u64::<LE>().map_err(io)? as usize,
        },
        t => return Err(format!("unknown quota policy tag {t}")),
    };
    let n = r.read_u64::<LE>().map_err(io)?;
    let n = get_len(&mut r, n, 20)?;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let task_id = r.read_u32::<LE>().map_err(io)? as usize;
        let label = r.read_u64::<LE>().map_err(io)? as usize;
        let noise_seed = r.read_u64::<LE>().map_err(io)?;
        let image = get_tensor(&mut r)?;
        let tag = r.read_u8().map_err(io)?;
        let method =
            SaliencyMethod::from_tag(tag).ok_or_else(|| format!("unknown method tag {tag}"))?;
        let producing_task = r.read_u32::<LE>().map_err(io)? as usize;
        let height = r.read_u32::<LE>().map_err(io)? as usize;
        let width = r.read_u32::<LE>().map_err(io)? as usize;
        let len = get_len(&mut r, (height as u64) * (width as u64), 8)?;
        let mut values = vec![0.0; len];
        r.read_f64_into::<LE>(&mut values).map_err(io)?;
        entries.push(BufferEntry {
            image,
            task_id,
            label,
            saliency: SaliencyMap {
                values,
                height,
                width,
                method,
                producing_task,
            },
            noise_seed,
        });
    }
    check_end(&r)?;
    Ok(DualBuffer {
        capacity,
        policy,
        entries,
    })
}

pub fn decode_buffer(bytes: &[u8], spec_hash: &[u8; 32], path: &Path) -> Result<DualBuffer> {
    decode_buffer_inner(bytes, spec_hash).map_err(|m| Error::format(path, m))
}

pub fn save_buffer(path: &Path, buffer: &DualBuffer, spec_hash: &[u8; 32]) -> Result<()> {
    std::fs::write(path, encode_buffer(buffer, spec_hash)).map_err(|e| Error::io(path, e))
}

pub fn load_buffer(path: &Path, spec_hash: &[u8; 32]) -> Result<DualBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_buffer(&bytes, spec_hash, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> ModelState {
        ModelState {
            params: vec![
                NamedTensor {
                    name: "conv1.weight".into(),
                    tensor: Tensor::new(vec![1, 1, 1, 2], vec![0.1, -f64::MIN_POSITIVE]).unwrap(),
                },
                NamedTensor {
                    name: "head.bias".into(),
                    tensor: Tensor::zeros(vec![0]),
                },
            ],
            classes_seen: vec![7, 2],
            version: 42,
        }
    }

    fn buffer() -> DualBuffer {
        DualBuffer {
            capacity: 9,
            policy: QuotaPolicy::PerClass {
                base: 4,
                incremental: 1,
            },
            entries: vec![BufferEntry {
                image: Tensor::new(vec![3, 1, 1], vec![0.25, 1.0 / 3.0, 0.0]).unwrap(),
                task_id: 2,
                label: 5,
                saliency: SaliencyMap {
                    values: vec![0.0, 1.0, 0.1, 0.7],
                    height: 2,
                    width: 2,
                    method: SaliencyMethod::Smoothgrad,
                    producing_task: 2,
                },
                noise_seed: u64::MAX,
            }],
        }
    }

    #[test]
    fn model_round_trip_is_exact() {
        let h = [3u8; 32];
        let s = state();
        let bytes = encode_model(&s, &h);
        assert_eq!(decode_model(&bytes, &h, Path::new("m")).unwrap(), s);
    }

    #[test]
    fn buffer_round_trip_is_exact() {
        let h = [1u8; 32];
        let b = buffer();
        let bytes = encode_buffer(&b, &h);
        assert_eq!(decode_buffer(&bytes, &h, Path::new("b")).unwrap(), b);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let h = [0u8; 32];
        let bytes = encode_model(&state(), &h);
        let p = Path::new("x");
        assert!(decode_model(&bytes, &[9u8; 32], p).is_err());
        assert!(decode_model(&bytes[..bytes.len() - 1], &h, p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_model(&extra, &h, p).is_err());
        assert!(decode_buffer(&bytes, &h, p).is_err());
    }
}
