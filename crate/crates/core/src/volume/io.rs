//! The `.v3` volume container.
//!
//! A file is a 16-byte preamble `V3VOL1 NNNNNNNN\n` (the decimal byte length
//! of the text header that follows), a text header of `key = value` lines and
//! a little-endian raw payload:
//!
//! ```text
//! V3VOL1 00000093
//! kind = image
//! shape = 4 4 4
//! channels = 1
//! classes = 0
//! spacing = 0.625 0.625 0.625
//! dtype = float32
//! byte_order = little
//! <payload: shape.w * shape.h * shape.z * channels values, x fastest, channel-major>
//! ```
//!
//! `kind` is `image` (Volume, float32/float64), `label` (LabelMap, uint8,
//! `classes` = K) or `prob` (ProbMap, float32/float64, `channels` = K).

use std::fs;
use std::path::Path;

use super::types::{LabelMap, ProbMap, Shape3, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const EXTENSION: &str = "v3";
const MAGIC: &str = "V3VOL1";
const PREAMBLE_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Image,
    Label,
    Prob,
}

impl Kind {
    fn as_str(self) -> &'static str {
        match self {
            Kind::Image => "image",
            Kind::Label => "label",
            Kind::Prob => "prob",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Float32,
    Float64,
    Uint8,
}

impl Dtype {
    fn as_str(self) -> &'static str {
        match self {
            Dtype::Float32 => "float32",
            Dtype::Float64 => "float64",
            Dtype::Uint8 => "uint8",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Float64 => 8,
            Dtype::Uint8 => 1,
        }
    }

    fn for_scalar<T: Scalar>() -> Self {
        if T::NAME == "f64" {
            Dtype::Float64
        } else {
            Dtype::Float32
        }
    }
}

/// Parsed header of a `.v3` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub kind: Kind,
    pub shape: Shape3,
    pub channels: usize,
    pub classes: usize,
    pub spacing: [f64; 3],
    pub dtype: Dtype,
}

impl Header {
    pub fn payload_len(&self) -> usize {
        self.shape.len() * self.channels * self.dtype.size()
    }

    fn render(&self) -> String {
        format!(
            "kind = {}\nshape = {} {} {}\nchannels = {}\nclasses = {}\nspacing = {} {} {}\ndtype = {}\nbyte_order = little\n",
            self.kind.as_str(),
            self.shape.w,
            self.shape.h,
            self.shape.z,
            self.channels,
            self.classes,
            self.spacing[0],
            self.spacing[1],
            self.spacing[2],
            self.dtype.as_str(),
        )
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason,
        };
        let mut kind = None;
        let mut shape = None;
        let mut channels = None;
        let mut classes = None;
        let mut spacing = None;
        let mut dtype = None;
        let mut little = false;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line without '=': {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let nums = |n: usize| -> Result<Vec<f64>> {
                let v: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(format!("{key}: {e}")))?;
                if v.len() != n {
                    return Err(bad(format!("{key}: expected {n} numbers, got {}", v.len())));
                }
                Ok(v)
            };
            let int = || -> Result<usize> { value.parse().map_err(|e| bad(format!("{key}: {e}"))) };
            match key {
                "kind" => {
                    kind = Some(match value {
                        "image" => Kind::Image,
                        "label" => Kind::Label,
                        "prob" => Kind::Prob,
                        other => return Err(bad(format!("unknown kind {other:?}"))),
                    })
                }
                "shape" => {
                    let mut dims = [0usize; 3];
                    for (d, t) in dims.iter_mut().zip(value.split_whitespace()) {
                        *d = t.parse().map_err(|e| bad(format!("shape: {e}")))?;
                    }
                    if value.split_whitespace().count() != 3 || dims.contains(&0) {
                        return Err(bad(format!("shape must be three positive integers, got {value:?}")));
                    }
                    shape = Some(Shape3::from_array(dims));
                }
                "channels" => channels = Some(int()?),
                "classes" => classes = Some(int()?),
                "spacing" => {
                    let v = nums(3)?;
                    spacing = Some([v[0], v[1], v[2]]);
                }
                "dtype" => {
                    dtype = Some(match value {
                        "float32" => Dtype::Float32,
                        "float64" => Dtype::Float64,
                        "uint8" => Dtype::Uint8,
                        other => return Err(bad(format!("unknown dtype {other:?}"))),
                    })
                }
                "byte_order" => {
                    if value != "little" {
                        return Err(bad(format!("unsupported byte order {value:?}")));
                    }
                    little = true;
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        let missing = |k: &str| bad(format!("missing key {k:?}"));
        if !little {
            return Err(missing("byte_order"));
        }
        let header = Header {
            kind: kind.ok_or_else(|| missing("kind"))?,
            shape: shape.ok_or_else(|| missing("shape"))?,
            channels: channels.ok_or_else(|| missing("channels"))?,
            classes: classes.ok_or_else(|| missing("classes"))?,
            spacing: spacing.ok_or_else(|| missing("spacing"))?,
            dtype: dtype.ok_or_else(|| missing("dtype"))?,
        };
        if header.channels == 0 {
            return Err(bad("channels must be positive".into()));
        }
        Ok(header)
    }
}

fn write_container(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    debug_assert_eq!(payload.len(), header.payload_len());
    let text = header.render();
    let mut bytes = Vec::with_capacity(PREAMBLE_LEN + text.len() + payload.len());
    bytes.extend_from_slice(format!("{MAGIC} {:08}\n", text.len()).as_bytes());
    bytes.extend_from_slice(text.as_bytes());
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads and validates a container, returning the header and raw payload.
pub fn read_container(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < PREAMBLE_LEN {
        return Err(bad("file shorter than preamble"));
    }
    let pre = std::str::from_utf8(&bytes[..PREAMBLE_LEN]).map_err(|_| bad("preamble is not ASCII"))?;
    let rest = pre
        .strip_prefix(MAGIC)
        .and_then(|r| r.strip_prefix(' '))
        .and_then(|r| r.strip_suffix('\n'))
        .ok_or_else(|| bad("bad magic"))?;
    let header_len: usize = rest.parse().map_err(|_| bad("bad header length"))?;
    let end = PREAMBLE_LEN + header_len;
    if bytes.len() < end {
        return Err(bad("file shorter than declared header"));
    }
    let text = std::str::from_utf8(&bytes[PREAMBLE_LEN..end]).map_err(|_| bad("header is not UTF-8"))?;
    let header = Header::parse(text, path)?;
    let payload = bytes[end..].to_vec();
    if payload.len() != header.payload_len() {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected: header.payload_len(),
            found: payload.len(),
        });
    }
    Ok((header, payload))
}

fn encode_floats<T: Scalar>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    match Dtype::for_scalar::<T>() {
        Dtype::Float64 => values.iter().for_each(|v| out.extend_from_slice(&v.as_f64().to_le_bytes())),
        _ => values
            .iter()
            .for_each(|v| out.extend_from_slice(&(v.to_f32().expect("finite")).to_le_bytes())),
    }
    out
}

fn decode_floats<T: Scalar>(payload: &[u8], dtype: Dtype, path: &Path) -> Result<Vec<T>> {
    match dtype {
        Dtype::Float32 => Ok(payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect()),
        Dtype::Float64 => Ok(payload
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect()),
        Dtype::Uint8 => Ok(payload.iter().map(|&b| T::lit(b as f64)).collect()),
    }
    .and_then(|v: Vec<T>| {
        if v.iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: "payload contains non-finite values".into(),
            })
        }
    })
}

/// Writes a volume as `float32` (or `float64` when `T = f64`).
pub fn save_volume<T: Scalar>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        kind: Kind::Image,
        shape: v.shape(),
        channels: 1,
        classes: 0,
        spacing: v.spacing(),
        dtype: Dtype::for_scalar::<T>(),
    };
    write_container(path.as_ref(), &header, &encode_floats(v.values()))
}

pub fn load_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    let (h, payload) = read_container(path)?;
    if h.kind != Kind::Image || h.channels != 1 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("expected a single-channel image, found kind {:?}", h.kind),
        });
    }
    let values = decode_floats(&payload, h.dtype, path)?;
    Ok(Volume::new(h.shape, h.spacing, values)?)
}

pub fn save_labels(l: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        kind: Kind::Label,
        shape: l.shape(),
        channels: 1,
        classes: l.classes(),
        spacing: [1.0; 3],
        dtype: Dtype::Uint8,
    };
    write_container(path.as_ref(), &header, l.values())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let (h, payload) = read_container(path)?;
    if h.kind != Kind::Label || h.dtype != Dtype::Uint8 || h.channels != 1 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "expected a uint8 label map".into(),
        });
    }
    LabelMap::new(h.shape, h.classes, payload)
}

pub fn save_probs<T: Scalar>(p: &ProbMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        kind: Kind::Prob,
        shape: p.shape(),
        channels: p.classes(),
        classes: p.classes(),
        spacing: [1.0; 3],
        dtype: Dtype::for_scalar::<T>(),
    };
    write_container(path.as_ref(), &header, &encode_floats(p.data()))
}

pub fn load_probs<T: Scalar>(path: impl AsRef<Path>) -> Result<ProbMap<T>> {
    let path = path.as_ref();
    let (h, payload) = read_container(path)?;
    if h.kind != Kind::Prob {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "expected a probability map".into(),
        });
    }
    let data = decode_floats(&payload, h.dtype, path)?;
    ProbMap::new(h.shape, h.channels, data)
}
