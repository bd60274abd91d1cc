//! Image decoding: binary PPM (P6, 8-bit) and the raw float tensor container
//! (magic `LCI1`, rank + dims as u64 LE, row-major f32 LE values).

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

use super::PixelImage;

pub const LCI_MAGIC: &[u8; 4] = b"LCI1";

/// Decodes a PPM or LCI file to [0, 1] floats and resizes to
/// `target_size x target_size` (nearest neighbor) when needed. Single-channel
/// LCI inputs are replicated to 3 channels.
pub fn load_image(path: &Path, target_size: usize) -> Result<PixelImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let image = decode(&bytes)?;
    Ok(resize_nearest(&image, target_size))
}

pub fn decode(bytes: &[u8]) -> Result<PixelImage> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(LCI_MAGIC) {
        decode_lci(&bytes[4..])
    } else {
        Err(Error::Format("not a P6 PPM or LCI1 tensor file".into()))
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<PixelImage> {
    let mut pos = 2; // past "P6"
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        // skip whitespace and '#' comments between header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::Truncated("PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(Error::Format("malformed PPM header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text.parse().map_err(|_| Error::Format("malformed PPM header".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval} unsupported, expected 255")));
    }
    // exactly one whitespace byte separates the header from pixel data
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(Error::Format("malformed PPM header".into())),
        None => return Err(Error::Truncated("PPM header".into())),
    }
    let needed = width * height * 3;
    let pixels = &bytes[pos..];
    if pixels.len() < needed {
        return Err(Error::Truncated(format!(
            "PPM data holds {} bytes, needs {needed}",
            pixels.len()
        )));
    }
    let data = pixels[..needed].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(PixelImage { height, width, data })
}

fn decode_lci(body: &[u8]) -> Result<PixelImage> {
    let mut cursor = body;
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |cursor: &mut &[u8]| -> Result<u64> {
        cursor
            .read_exact(&mut u64buf)
            .map_err(|_| Error::Truncated("LCI header".into()))?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let rank = read_u64(&mut cursor)? as usize;
    if rank != 3 {
        return Err(Error::Format(format!("LCI image must be rank 3 (H x W x C), got rank {rank}")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = read_u64(&mut cursor)? as usize;
    }
    let [height, width, channels] = dims;
    if channels != 1 && channels != 3 {
        return Err(Error::Format(format!("LCI image needs 1 or 3 channels, got {channels}")));
    }
    let numel = height * width * channels;
    if cursor.len() < numel * 4 {
        return Err(Error::Truncated(format!(
            "LCI data holds {} bytes, needs {}",
            cursor.len(),
            numel * 4
        )));
    }
    let mut values = Vec::with_capacity(numel);
    for chunk in cursor[..numel * 4].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let data = if channels == 3 {
        values
    } else {
        // grayscale: replicate to 3 channels
        values.iter().flat_map(|&v| [v, v, v]).collect()
    };
    Ok(PixelImage { height, width, data })
}

/// Writes the raw tensor container for a 3-channel image.
pub fn write_lci(path: &Path, image: &PixelImage) -> Result<()> {
    let mut out = Vec::with_capacity(4 + 8 * 4 + image.data.len() * 4);
    out.extend_from_slice(LCI_MAGIC);
    out.extend_from_slice(&3u64.to_le_bytes());
    for dim in [image.height as u64, image.width as u64, 3u64] {
        out.extend_from_slice(&dim.to_le_bytes());
    }
    for &v in &image.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes an 8-bit binary PPM from raw RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = Vec::with_capacity(rgb.len() + 32);
    out.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(rgb);
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Nearest-neighbor resize with floor scaling:
/// src index = floor(dst index * src size / dst size).
pub fn resize_nearest(image: &PixelImage, target_size: usize) -> PixelImage {
    if image.height == target_size && image.width == target_size {
        return image.clone();
    }
    let mut out = PixelImage::zeros(target_size, target_size);
    for y in 0..target_size {
        let sy = y * image.height / target_size;
        for x in 0..target_size {
            let sx = x * image.width / target_size;
            for c in 0..3 {
                out.set_pixel(y, x, c, image.pixel(sy, sx, c));
            }
        }
    }
    out
}
