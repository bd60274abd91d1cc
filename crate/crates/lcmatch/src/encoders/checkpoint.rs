//! Flat binary container of named tensors.
//!
//! Layout: magic `LCM1`, then one record per tensor in canonical order:
//! name length (u64 LE), UTF-8 name bytes, rank (u64 LE), dims (u64 LE each),
//! then the values as row-major f32 LE. Records run to end of file. Values
//! are held as f64 in memory; the stored f32 image round-trips bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{EncoderConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"LCM1";

pub fn write_to(params: &ModelParams, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    for (name, tensor) in params.named_tensors() {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.dims().len() as u64).to_le_bytes())?;
        for &dim in tensor.dims() {
            out.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Atomic save: write to a sibling temp file, then rename into place.
pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let as_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut file = std::fs::File::create(&tmp).map_err(as_err)?;
    write_to(params, &mut file).map_err(as_err)?;
    file.sync_all().map_err(as_err)?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(as_err)?;
    Ok(())
}

struct RawTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Truncated(format!("while reading {what}")))
}

pub fn read_from(mut input: impl Read, cfg: &EncoderConfig) -> Result<ModelParams> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut input, &mut magic, "magic bytes")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}, expected {MAGIC:?}")));
    }

    let mut raw: Vec<(String, RawTensor)> = Vec::new();
    let mut u64buf = [0u8; 8];
    loop {
        // a record starts with the name length; EOF here means a clean end
        match input.read_exact(&mut u64buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(_) => return Err(Error::Truncated("while reading record header".into())),
        }
        let name_len = u64::from_le_bytes(u64buf) as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("implausible tensor name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact_or(&mut input, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        read_exact_or(&mut input, &mut u64buf, "tensor rank")?;
        let rank = u64::from_le_bytes(u64buf) as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            read_exact_or(&mut input, &mut u64buf, "tensor dims")?;
            dims.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut f32buf = [0u8; 4];
        for _ in 0..numel {
            read_exact_or(&mut input, &mut f32buf, &format!("values of {name}"))?;
            data.push(f32::from_le_bytes(f32buf) as f64);
        }
        raw.push((name, RawTensor { dims, data }));
    }

    let mut params = ModelParams::zeros(cfg);
    let mut consumed = vec![false; raw.len()];
    for (name, tensor) in params.named_tensors_mut() {
        let idx = raw
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::shape(format!("checkpoint is missing tensor {name}")))?;
        let entry = &raw[idx];
        if entry.1.dims != tensor.dims() {
            return Err(Error::shape(format!(
                "tensor {name} has dims {:?} in checkpoint, config expects {:?}",
                entry.1.dims,
                tensor.dims()
            )));
        }
        tensor.data_mut().copy_from_slice(&entry.1.data);
        consumed[idx] = true;
    }
    if let Some(pos) = consumed.iter().position(|&c| !c) {
        return Err(Error::shape(format!("checkpoint holds unknown tensor {}", raw[pos].0)));
    }
    if !params.all_finite() {
        return Err(Error::Format("checkpoint contains non-finite values".into()));
    }
    Ok(params)
}

pub fn load(path: &Path, cfg: &EncoderConfig) -> Result<ModelParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_from(std::io::BufReader::new(file), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            context_len: 8,
            vocab_size: 12,
            text_layers: 1,
            text_heads: 2,
            text_width: 8,
            image_size: 8,
            patch_size: 4,
            image_layers: 1,
            image_heads: 2,
            image_width: 8,
            embed_dim: 4,
            pool_kernel: 1,
        }
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let cfg = cfg();
        let params = ModelParams::init(&cfg, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lcm");
        save(&params, &path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();

        let loaded = load(&path, &cfg).unwrap();
        save(&loaded, &path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2, "save(load(file)) must reproduce the file bit for bit");
    }

    #[test]
    fn loaded_params_match_f32_image_of_saved() {
        let cfg = cfg();
        let params = ModelParams::init(&cfg, 9);
        let mut buf = Vec::new();
        write_to(&params, &mut buf).unwrap();
        let loaded = read_from(buf.as_slice(), &cfg).unwrap();
        for ((name, a), (_, b)) in params.named_tensors().iter().zip(loaded.named_tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32, "{name}");
            }
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let cfg = cfg();
        let err = read_from(&b"NOPE"[..], &cfg).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn truncated_stream_is_truncation_error() {
        let cfg = cfg();
        let params = ModelParams::init(&cfg, 3);
        let mut buf = Vec::new();
        write_to(&params, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_from(buf.as_slice(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)));
    }

    #[test]
    fn shape_mismatch_against_config_is_rejected() {
        let cfg = cfg();
        let params = ModelParams::init(&cfg, 3);
        let mut buf = Vec::new();
        write_to(&params, &mut buf).unwrap();
        let mut other = cfg.clone();
        other.embed_dim = 6;
        let err = read_from(buf.as_slice(), &other).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
