//! Binary netpbm (P5 greyscale, P6 RGB) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::refine::PseudoMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (P5) or 3 (P6).
    pub channels: usize,
    /// Interleaved, row-major.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Param(format!("{channels} channels; netpbm images have 1 or 3")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Data(format!(
                "{}x{}x{channels} image needs {} bytes, got {}",
                width,
                height,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(mask: &PseudoMask) -> Self {
        Image {
            width: mask.width,
            height: mask.height,
            channels: 1,
            data: mask.labels.clone(),
        }
    }

    pub fn to_mask(&self) -> Result<PseudoMask> {
        if self.channels != 1 {
            return Err(Error::Data("label maps must be greyscale".into()));
        }
        PseudoMask::new(self.height, self.width, self.data.clone())
    }

    /// Planar `[3 × H × W]` in `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.channels != 3 {
            return Err(Error::Data("expected an RGB image".into()));
        }
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new([3, self.height, self.width], out)
    }

    /// Inverse of [`Image::to_tensor`], rounding and clamping.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape("from_tensor", t.shape(), &[3, h, w]));
        }
        let n = h * w;
        let mut data = Vec::with_capacity(3 * n);
        for i in 0..n {
            for ch in 0..3 {
                data.push((t.data()[ch * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Image::new(w, h, 3, data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = HeaderReader { bytes, pos: 0 };
        if bytes.len() < 2 || bytes[0] != b'P' {
            return Err(Error::Format {
                offset: 0,
                msg: "missing netpbm magic".into(),
            });
        }
        let channels = match bytes[1] {
            b'5' => 1,
            b'6' => 3,
            _ => {
                return Err(Error::Format {
                    offset: 1,
                    msg: format!("unsupported magic P{}; only P5 and P6 are read", bytes[1] as char),
                })
            }
        };
        r.pos = 2;
        let (width, _) = r.number("width")?;
        let (height, _) = r.number("height")?;
        let (maxval, maxval_at) = r.number("maxval")?;
        if maxval != 255 {
            return Err(Error::Format {
                offset: maxval_at,
                msg: format!("maxval {maxval} is not supported; only 255"),
            });
        }
        match bytes.get(r.pos) {
            Some(b) if b.is_ascii_whitespace() => r.pos += 1,
            _ => {
                return Err(Error::Format {
                    offset: r.pos,
                    msg: "expected a single whitespace byte before the pixel data".into(),
                })
            }
        }
        if width == 0 || height == 0 {
            return Err(Error::Format {
                offset: maxval_at,
                msg: format!("empty image {width}x{height}"),
            });
        }
        let need = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::Format {
                offset: maxval_at,
                msg: format!("image {width}x{height} is too large"),
            })?;
        let payload = &bytes[r.pos..];
        if payload.len() < need {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: format!("truncated pixel data: need {need} bytes from offset {}, have {}", r.pos, payload.len()),
            });
        }
        Image::new(width, height, channels, payload[..need].to_vec())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode(&bytes).map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format {
                offset,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    /// Whitespace-preceded decimal field; returns the value and its offset.
    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        let before = self.pos;
        self.skip_space_and_comments();
        if self.pos == before {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("expected whitespace before {what}"),
            });
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format {
                offset: start,
                msg: format!("expected {what}"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map(|v| (v, start))
            .ok_or_else(|| Error::Format {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# c\n4 4\n255\n".to_vec();
        bytes.extend(0..16u8);
        let img = Image::decode(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (4, 4, 1));
        assert_eq!(img.data[15], 15);
    }

    #[test]
    fn rejections_carry_offsets() {
        let err = Image::decode(b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 7, ref msg } if msg.contains("65535")));
        assert!(matches!(Image::decode(b"P3\n1 1\n255\n"), Err(Error::Format { offset: 1, .. })));
        assert!(matches!(Image::decode(b"P6\n2 2\n255\n\0\0"), Err(Error::Format { offset: 13, .. })));
        assert!(matches!(Image::decode(b"P6\nx 2\n255\n"), Err(Error::Format { offset: 3, .. })));
        assert!(matches!(Image::decode(b""), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::new(2, 1, 3, vec![0, 128, 255, 10, 20, 30]).unwrap();
        let t = img.to_tensor().unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }

    proptest! {
        #[test]
        fn encode_decode_is_byte_exact(w in 1usize..9, h in 1usize..9, rgb in any::<bool>(), seed in any::<u64>()) {
            let c = if rgb { 3 } else { 1 };
            let data: Vec<u8> = (0..w * h * c).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let img = Image::new(w, h, c, data).unwrap();
            let bytes = img.encode();
            let back = Image::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
            prop_assert_eq!(back, img);
        }
    }
}
