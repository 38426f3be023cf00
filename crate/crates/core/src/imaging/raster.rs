//! Raster decoding and encoding: portable any-maps (P2/P3/P5/P6) and PNG.
//!
//! Samples are mapped linearly to `[0, 1]` by `x / maxval` (so `x / 255` for
//! 8-bit data). Alpha channels are dropped. Other formats are detected by their
//! magic bytes and rejected with a pointer to the conversion recipe.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::map::{BinaryMap, Map, RealMap};
use crate::tensor::Tensor;

/// File extensions the decoder accepts, in lookup preference order.
pub const SUPPORTED_EXTENSIONS: &[&str] = &["png", "ppm", "pgm", "pnm"];

/// A decoded `(C, H, W)` image with samples in `[0, 1]`.
pub fn decode_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes, path)
}

pub fn decode_bytes(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        return decode_png(bytes, path);
    }
    if bytes.len() >= 2 && bytes[0] == b'P' && matches!(bytes[1], b'2' | b'3' | b'5' | b'6') {
        return decode_pnm(bytes, path);
    }
    let format = sniff_format(bytes, path);
    Err(Error::UnsupportedFormat { path: path.to_path_buf(), format })
}

fn sniff_format(bytes: &[u8], path: &Path) -> String {
    let known: &[(&[u8], &str)] = &[
        (b"GIF87a", "GIF"),
        (b"GIF89a", "GIF"),
        (b"II*\0", "TIFF"),
        (b"MM\0*", "TIFF"),
        (b"\xff\xd8\xff", "JPEG"),
        (b"BM", "BMP"),
        (b"\x1f\x8b", "gzip"),
        (b"P1", "PBM (ASCII bitmap)"),
        (b"P4", "PBM (binary bitmap)"),
    ];
    known
        .iter()
        .find(|(magic, _)| bytes.starts_with(magic))
        .map(|(_, name)| name.to_string())
        .or_else(|| path.extension().map(|e| e.to_string_lossy().to_uppercase()))
        .unwrap_or_else(|| "unknown".into())
}

fn malformed(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: malformed image: {detail}", path.display()))
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| malformed(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| malformed(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| malformed(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(malformed(path, "palette was not expanded")),
    };
    let wide = match info.bit_depth {
        png::BitDepth::Eight => false,
        png::BitDepth::Sixteen => true,
        other => return Err(malformed(path, format!("unexpected bit depth {other:?} after expansion"))),
    };
    let sample = |i: usize| -> f32 {
        if wide {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f32 / 65535.0
        } else {
            buf[i] as f32 / 255.0
        }
    };
    let mut values = vec![0.0f32; keep * h * w];
    for p in 0..h * w {
        for c in 0..keep {
            values[c * h * w + p] = sample(p * channels + c);
        }
    }
    Tensor::new(&[keep, h, w], values)
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn pnm_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(malformed(path, "truncated header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| malformed(path, "non-ASCII header"))
}

fn pnm_number(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<usize> {
    let tok = pnm_token(bytes, pos, path)?;
    tok.parse().map_err(|_| malformed(path, format!("expected a number, found {tok:?}")))
}

fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let kind = bytes[1];
    let mut pos = 2;
    let w = pnm_number(bytes, &mut pos, path)?;
    let h = pnm_number(bytes, &mut pos, path)?;
    let maxval = pnm_number(bytes, &mut pos, path)?;
    if w == 0 || h == 0 {
        return Err(malformed(path, "zero image extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(malformed(path, format!("maxval {maxval} outside 1..=65535")));
    }
    let channels = if matches!(kind, b'3' | b'6') { 3 } else { 1 };
    let count = w * h * channels;
    let scale = maxval as f32;
    let raw: Vec<u32> = if matches!(kind, b'5' | b'6') {
        // Exactly one whitespace byte separates the header from binary data.
        pos += 1;
        let width = if maxval > 255 { 2 } else { 1 };
        let data = bytes
            .get(pos..pos + count * width)
            .ok_or_else(|| malformed(path, format!("expected {} bytes of samples", count * width)))?;
        if width == 2 {
            data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect()
        } else {
            data.iter().map(|&b| b as u32).collect()
        }
    } else {
        (0..count).map(|_| pnm_number(bytes, &mut pos, path).map(|v| v as u32)).collect::<Result<_>>()?
    };
    if let Some(&bad) = raw.iter().find(|&&v| v as usize > maxval) {
        return Err(malformed(path, format!("sample {bad} exceeds maxval {maxval}")));
    }
    let mut values = vec![0.0f32; count];
    for p in 0..w * h {
        for c in 0..channels {
            values[c * w * h + p] = raw[p * channels + c] as f32 / scale;
        }
    }
    Tensor::new(&[channels, h, w], values)
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Container {
    Png,
    Pnm,
}

fn container_for(path: &Path) -> Result<Container> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(Container::Png),
        Some("pgm" | "ppm" | "pnm") => Ok(Container::Pnm),
        _ => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            format: path.extension().map_or("none".into(), |e| e.to_string_lossy().into_owned()),
        }),
    }
}

/// Encodes interleaved samples. `channels` is 1 or 3; `bits` is 8 or 16.
fn encode(path: &Path, width: usize, height: usize, channels: usize, bits: u8, samples: &[u16]) -> Result<Vec<u8>> {
    let to_bytes = |out: &mut Vec<u8>| {
        for &s in samples {
            if bits == 16 {
                out.extend_from_slice(&s.to_be_bytes());
            } else {
                out.push(s as u8);
            }
        }
    };
    match container_for(path)? {
        Container::Pnm => {
            let magic = if channels == 3 { "P6" } else { "P5" };
            let maxval = if bits == 16 { 65535 } else { 255 };
            let mut out = format!("{magic}\n{width} {height}\n{maxval}\n").into_bytes();
            to_bytes(&mut out);
            Ok(out)
        }
        Container::Png => {
            let mut out = Vec::new();
            {
                let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
                enc.set_color(if channels == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
                enc.set_depth(if bits == 16 { png::BitDepth::Sixteen } else { png::BitDepth::Eight });
                let mut writer = enc.write_header().map_err(|e| malformed(path, e))?;
                let mut data = Vec::with_capacity(samples.len() * (bits as usize / 8));
                to_bytes(&mut data);
                writer.write_image_data(&data).map_err(|e| malformed(path, e))?;
                writer.finish().map_err(|e| malformed(path, e))?;
            }
            Ok(out)
        }
    }
}

fn quantize(v: f32, bits: u8) -> u16 {
    let max = ((1u32 << bits) - 1) as f32;
    (v.clamp(0.0, 1.0) * max).round() as u16
}

/// Writes a `(C, H, W)` tensor (`C` = 1 or 3) with 8-bit samples `round(x × 255)`.
pub fn encode_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let [n, c, h, w] = image.dims4();
    if n != 1 || !(c == 1 || c == 3) {
        return Err(Error::Shape(format!("cannot encode {} as an image", image.shape())));
    }
    let mut samples = vec![0u16; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            samples[p * c + ch] = quantize(image.values()[ch * h * w + p], 8);
        }
    }
    write_atomic(path, &encode(path, w, h, c, 8, &samples)?)
}

/// Grayscale map quantized as `round(p × (2^bits − 1))`; `bits` is 8 or 16.
pub fn save_real_map(path: impl AsRef<Path>, map: &RealMap, bits: u8) -> Result<()> {
    let path = path.as_ref();
    if bits != 8 && bits != 16 {
        return Err(Error::Config(format!("sample depth must be 8 or 16 bits, got {bits}")));
    }
    let samples: Vec<u16> = map.data().iter().map(|&v| quantize(v, bits)).collect();
    write_atomic(path, &encode(path, map.width(), map.height(), 1, bits, &samples)?)
}

/// Mask written as 8-bit `{0, 255}`.
pub fn save_mask(path: impl AsRef<Path>, mask: &BinaryMap) -> Result<()> {
    let path = path.as_ref();
    let samples: Vec<u16> = mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect();
    write_atomic(path, &encode(path, mask.width(), mask.height(), 1, 8, &samples)?)
}

/// Class-index image written as raw 8-bit values.
pub fn save_labels(path: impl AsRef<Path>, labels: &Map<u8>) -> Result<()> {
    let path = path.as_ref();
    let samples: Vec<u16> = labels.data().iter().map(|&v| v as u16).collect();
    write_atomic(path, &encode(path, labels.width(), labels.height(), 1, 8, &samples)?)
}

/// A single-channel image as a real map; colour images are averaged across channels.
pub fn load_real_map(path: impl AsRef<Path>) -> Result<RealMap> {
    let t = decode_image(path)?;
    let [_, c, h, w] = t.dims4();
    let hw = h * w;
    let data = (0..hw).map(|p| (0..c).map(|ch| t.values()[ch * hw + p]).sum::<f32>() / c as f32).collect();
    RealMap::from_vec(h, w, data)
}

/// Mask pixels are those whose (channel-averaged) intensity is at least one half.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMap> {
    Ok(load_real_map(path)?.threshold(0.5))
}
