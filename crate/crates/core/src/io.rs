//! File formats: Middlebury `.flo`, binary PPM/PGM, the weights container and
//! flat `key=value` configuration.
//!
//! Weights container layout (all integers little-endian `u32`):
//!
//! | field        | bytes                                   |
//! |--------------|-----------------------------------------|
//! | magic        | `MFWT`                                  |
//! | version      | `1`                                     |
//! | header       | length, then JSON of the model config   |
//! | entry count  | `n`                                     |
//! | entry × n    | name length, UTF-8 name, rank, dims, f32 payload |
//! | checksum     | CRC-32 of every preceding byte          |

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{param_specs, ModelWeights};
use matchflow_tensor::Tensor;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

pub const FLO_MAGIC: &[u8; 4] = b"PIEH";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"MFWT";
pub const WEIGHTS_VERSION: u32 = 1;

fn format_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset: offset as u64, msg: msg.into() })
}

/// Cursor over a byte slice whose errors name the failing offset.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return format_err(self.bytes.len(), format!("truncated {what}: need {n} bytes at offset {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).unwrap_or(usize::MAX), what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

// ---- .flo ----

/// Encodes `[2×H×W]` flow as `.flo` bytes.
pub fn encode_flo(flow: &Tensor<f32>) -> Result<Vec<u8>> {
    if flow.ndim() != 3 || flow.shape()[0] != 2 {
        return Err(Error::Contract(format!("flow must be [2,H,W], got {:?}", flow.shape())));
    }
    if let Some(i) = flow.first_non_finite() {
        return Err(Error::Contract(format!("flow value {i} is not finite")));
    }
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    let d = flow.data();
    for i in 0..h * w {
        out.extend_from_slice(&d[i].to_le_bytes());
        out.extend_from_slice(&d[h * w + i].to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != FLO_MAGIC {
        return format_err(0, format!("bad .flo magic {magic:?}"));
    }
    let w = r.u32("width")? as i32;
    let h = r.u32("height")? as i32;
    if w <= 0 || h <= 0 {
        return format_err(4, format!("invalid dimensions {w}x{h}"));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = (w * h).checked_mul(8).filter(|&n| n <= isize::MAX as usize);
    match expected {
        Some(n) if bytes.len() - 12 == n => {}
        Some(n) => {
            return format_err(12 + n.min(bytes.len() - 12), format!("payload is {} bytes, expected {n}", bytes.len() - 12))
        }
        None => return format_err(4, "dimensions overflow"),
    }
    let vals = r.f32s(2 * h * w, "payload")?;
    let n = h * w;
    let mut out = Tensor::zeros(&[2, h, w]);
    for i in 0..n {
        out.data_mut()[i] = vals[2 * i];
        out.data_mut()[n + i] = vals[2 * i + 1];
    }
    Ok(out)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_flo(&std::fs::read(path)?)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &Tensor<f32>) -> Result<()> {
    let bytes = encode_flo(flow)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

// ---- PPM / PGM ----

fn skip_space(b: &[u8], mut i: usize) -> usize {
    loop {
        while i < b.len() && b[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < b.len() && b[i] == b'#' {
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
        } else {
            return i;
        }
    }
}

fn header_int(b: &[u8], i: &mut usize, what: &str) -> Result<usize> {
    *i = skip_space(b, *i);
    let start = *i;
    while *i < b.len() && b[*i].is_ascii_digit() {
        *i += 1;
    }
    if start == *i {
        return format_err(start, format!("expected {what}"));
    }
    std::str::from_utf8(&b[start..*i])
        .ok()
        .and_then(|s| s.parse().ok())
        .map_or_else(|| format_err(start, format!("{what} out of range")), Ok)
}

/// Decodes 8-bit P5/P6 into `[3×H×W]` values in [0,1]; grayscale is
/// replicated to three channels.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return format_err(0, "unsupported image format token; expected P5 or P6"),
    };
    let mut i = 2;
    if bytes.get(i).is_some_and(|c| !c.is_ascii_whitespace() && *c != b'#') {
        return format_err(i, "unsupported image format token; expected P5 or P6");
    }
    let w = header_int(bytes, &mut i, "width")?;
    let h = header_int(bytes, &mut i, "height")?;
    let maxval = header_int(bytes, &mut i, "maxval")?;
    if w == 0 || h == 0 {
        return format_err(3, format!("invalid dimensions {w}x{h}"));
    }
    if maxval == 0 || maxval > 255 {
        return format_err(i, format!("maxval {maxval} is not an 8-bit depth"));
    }
    if !bytes.get(i).is_some_and(|c| c.is_ascii_whitespace()) {
        return format_err(i, "missing whitespace before raster");
    }
    i += 1;
    let n = w * h * channels;
    if bytes.len() - i != n {
        return format_err(i + n.min(bytes.len() - i), format!("raster is {} bytes, expected {n}", bytes.len() - i));
    }
    let raster = &bytes[i..];
    let scale = maxval as f32;
    Ok(Tensor::from_fn(&[3, h, w], |k| {
        let (c, p) = (k / (h * w), k % (h * w));
        let src = if channels == 3 { p * 3 + c } else { p };
        raster[src] as f32 / scale
    }))
}

/// Encodes `[3×H×W]` as P6, or `[1×H×W]` / `[H×W]` as P5.
pub fn encode_image(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    let (c, h, w) = match *s {
        [3, h, w] => (3, h, w),
        [1, h, w] | [h, w] => (1, h, w),
        _ => return Err(Error::Contract(format!("cannot encode image of shape {s:?}"))),
    };
    let mut out = format!("P{}\n{w} {h}\n255\n", if c == 3 { 6 } else { 5 }).into_bytes();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for p in 0..h * w {
        for ci in 0..c {
            out.push(q(img.data()[ci * h * w + p]));
        }
    }
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_image(&std::fs::read(path)?)
}

pub fn write_image(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let bytes = encode_image(img)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Binary `[H×W]` mask from a P5/P6 file: 1 where the first channel exceeds one half.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let img = read_image(path)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    Ok(Tensor::from_fn(&[h, w], |i| if img.data()[i] > 0.5 { 1.0 } else { 0.0 }))
}

// ---- weights container ----

pub fn encode_weights(weights: &ModelWeights) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&weights.config).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, t) in weights.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses a container. The checksum is verified before anything else; each
/// stored entry must exist in the header's architecture with the same shape.
/// A container may hold a subset of the architecture's parameters.
pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() < 4 + 4 + 4 + 4 + 4 {
        return Err(Error::Corruption(format!("file is only {} bytes", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Corruption(format!("checksum {stored:08x} does not match contents {actual:08x}")));
    }
    let mut r = Reader::new(body);
    if r.take(4, "magic")? != WEIGHTS_MAGIC {
        return format_err(0, "bad weights magic");
    }
    let version = r.u32("version")?;
    if version != WEIGHTS_VERSION {
        return format_err(4, format!("unsupported weights version {version}"));
    }
    let hlen = r.u32("header length")? as usize;
    let hpos = r.pos;
    let config: ModelConfig =
        serde_json::from_slice(r.take(hlen, "header")?).or_else(|e| format_err(hpos, format!("bad config header: {e}")))?;
    config.validate()?;
    let expected: HashMap<String, Vec<usize>> = param_specs(&config).into_iter().map(|s| (s.name, s.shape)).collect();
    let count = r.u32("entry count")? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos;
        let nlen = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?).or_else(|_| format_err(at + 4, "entry name is not UTF-8"))?.to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return format_err(r.pos - 4, format!("entry `{name}` has rank {rank}"));
        }
        let shape = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
        let data = r.f32s(numel, "payload")?;
        match expected.get(&name) {
            None => return Err(Error::Shape { name, expected: vec![], found: shape }),
            Some(e) if *e != shape => return Err(Error::Shape { name, expected: e.clone(), found: shape }),
            _ => {}
        }
        if entries.contains_key(&name) {
            return format_err(at, format!("duplicate entry `{name}`"));
        }
        entries.insert(name, Tensor::new(&shape, data)?);
    }
    if r.pos != body.len() {
        return format_err(r.pos, format!("{} trailing bytes before checksum", body.len() - r.pos));
    }
    Ok(ModelWeights::from_entries(config, entries))
}

pub fn save_weights(path: impl AsRef<Path>, weights: &ModelWeights) -> Result<()> {
    let bytes = encode_weights(weights)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    decode_weights(&std::fs::read(path)?)
}

// ---- key=value ----

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value", n + 1)));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Formats a report as `key=value` lines in the given order.
pub fn format_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}
