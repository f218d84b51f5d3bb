//! Binary PGM (`P5`) and PPM (`P6`) with 8-bit samples.

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Error)]
pub enum NetpbmError {
    #[error("bad magic {0:?}, expected P5 or P6")]
    BadMagic(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("image dimensions {width}×{height} overflow")]
    DimensionOverflow { width: u64, height: u64 },
    #[error("unsupported maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u64),
    #[error("truncated body: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("cannot encode {0}-channel image (PGM needs 1, PPM needs 3)")]
    Channels(usize),
}

/// Width, height, channel count and raw 8-bit samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bytes: Vec<u8>,
}

impl RawImage {
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        }
    }

    pub fn from_image(image: &Image) -> Self {
        Self {
            width: image.width,
            height: image.height,
            channels: image.channels,
            bytes: image.data.iter().map(|&v| quantize(v)).collect(),
        }
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct HeaderReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.buf.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.buf.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64, NetpbmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(NetpbmError::Header(format!("missing {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| NetpbmError::Header(format!("{what} too large")))
    }
}

pub fn decode(buf: &[u8]) -> Result<RawImage, NetpbmError> {
    let channels = match buf.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        other => {
            return Err(NetpbmError::BadMagic(
                String::from_utf8_lossy(other.unwrap_or(buf)).into_owned(),
            ))
        }
    };
    let mut r = HeaderReader { buf, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(NetpbmError::UnsupportedMaxval(maxval));
    }
    match buf.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => {
            return Err(NetpbmError::Header(
                "missing whitespace after maxval".into(),
            ))
        }
    }
    let len = usize::try_from(width)
        .ok()
        .zip(usize::try_from(height).ok())
        .and_then(|(w, h)| w.checked_mul(h))
        .and_then(|p| p.checked_mul(channels))
        .filter(|&n| n <= isize::MAX as usize)
        .ok_or(NetpbmError::DimensionOverflow { width, height })?;
    if width == 0 || height == 0 {
        return Err(NetpbmError::Header("zero image dimension".into()));
    }
    let body = &buf[r.pos..];
    if body.len() < len {
        return Err(NetpbmError::Truncated {
            expected: len,
            found: body.len(),
        });
    }
    Ok(RawImage {
        width: width as usize,
        height: height as usize,
        channels,
        bytes: body[..len].to_vec(),
    })
}

pub fn encode(raw: &RawImage) -> Result<Vec<u8>, NetpbmError> {
    let magic = match raw.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(NetpbmError::Channels(c)),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", raw.width, raw.height).into_bytes();
    out.extend_from_slice(&raw.bytes);
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?.to_image())
}

pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(&RawImage::from_image(image))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
