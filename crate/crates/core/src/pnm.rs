//! Minimal Netpbm codec: reads P2/P3/P5/P6, writes binary P5/P6 with maxval 255.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for graymaps, 3 for pixmaps.
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub samples: Vec<u16>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> std::result::Result<u32, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("expected a number at byte {start}"))
    }
}

impl PnmImage {
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 2 || bytes[0] != b'P' {
            return Err("not a Netpbm file".into());
        }
        let (channels, binary) = match bytes[1] {
            b'2' => (1, false),
            b'3' => (3, false),
            b'5' => (1, true),
            b'6' => (3, true),
            other => return Err(format!("unsupported Netpbm variant P{}", other as char)),
        };
        let mut cur = Cursor { bytes, pos: 2 };
        let width = cur.number()? as usize;
        let height = cur.number()? as usize;
        let maxval = cur.number()?;
        if maxval == 0 || maxval > 65535 {
            return Err(format!("invalid maxval {maxval}"));
        }
        let count = width * height * channels;
        let samples: Vec<u16> = if binary {
            // exactly one whitespace byte separates the header from the raster
            if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
                return Err("missing whitespace after header".into());
            }
            let raster = &bytes[cur.pos + 1..];
            let wide = maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            if raster.len() < need {
                return Err(format!("raster truncated: need {need} bytes, have {}", raster.len()));
            }
            if wide {
                raster[..need].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
            } else {
                raster[..need].iter().map(|&b| b as u16).collect()
            }
        } else {
            (0..count).map(|_| cur.number().map(|v| v as u16)).collect::<std::result::Result<_, _>>()?
        };
        if samples.iter().any(|&s| s as u32 > maxval) {
            return Err("sample exceeds maxval".into());
        }
        Ok(Self {
            width,
            height,
            channels,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        let scale = 255.0 / self.maxval as f64;
        out.extend(self.samples.iter().map(|&s| (s as f64 * scale).round() as u8));
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingImage(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::decode(&bytes).map_err(|message| Error::Format {
            file: path.to_path_buf(),
            line: None,
            message,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.encode())?)
    }

    /// Planar `[C, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, hw) = (self.channels, self.width * self.height);
        let scale = self.maxval as f64;
        let mut data = vec![0.0; c * hw];
        for (i, &s) in self.samples.iter().enumerate() {
            data[(i % c) * hw + i / c] = s as f64 / scale;
        }
        Tensor::new(vec![c, self.height, self.width], data).expect("sizes agree")
    }

    /// Quantises a `[C, H, W]` tensor (C = 1 or 3) with values clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[c, h, w] = t.shape() else {
            return Err(Error::shape(format!("image tensor must be [C,H,W], got {:?}", t.shape())));
        };
        if c != 1 && c != 3 {
            return Err(Error::shape(format!("Netpbm supports 1 or 3 channels, got {c}")));
        }
        let hw = h * w;
        let mut samples = vec![0u16; c * hw];
        for (i, s) in samples.iter_mut().enumerate() {
            let v = t.data()[(i % c) * hw + i / c].clamp(0.0, 1.0);
            *s = (v * 255.0).round() as u16;
        }
        Ok(Self {
            width: w,
            height: h,
            channels: c,
            maxval: 255,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_ascii_graymap_with_comments() {
        let img = PnmImage::decode(b"P2\n# hi\n3 1\n# mid\n10\n0 5 10\n").unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 1, 1));
        assert_eq!(img.to_tensor().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn binary_pixmap_is_planarised() {
        let mut bytes = b"P6 2 1 255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let t = PnmImage::decode(&bytes).unwrap().to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_samples() {
        let mut bytes = b"P5 1 1 65535\n".to_vec();
        bytes.extend([0xff, 0xff]);
        assert_eq!(PnmImage::decode(&bytes).unwrap().samples, vec![65535]);
    }

    #[test]
    fn rejects_truncated_and_unknown() {
        assert!(PnmImage::decode(b"P5 2 2 255\n\x00").is_err());
        assert!(PnmImage::decode(b"P4 1 1\n\x00").is_err());
        assert!(PnmImage::decode(b"GIF89a").is_err());
    }

    #[test]
    fn encode_roundtrip_of_quantised_tensor() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.0, 64.0 / 255.0, 128.0 / 255.0, 1.0]).unwrap();
        let img = PnmImage::from_tensor(&t).unwrap();
        let back = PnmImage::decode(&img.encode()).unwrap().to_tensor();
        assert_eq!(back, t);
    }
}
