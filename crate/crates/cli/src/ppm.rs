//! Binary PPM (P6, maxval 255) reading and writing.

use tome_core::vit::Image;
use tome_core::Scalar;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

fn ppm_err<T>(offset: usize, reason: impl Into<String>) -> Result<T> {
    Err(CliError::Ppm {
        offset,
        reason: reason.into(),
    })
}

impl Ppm {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.repeat(width * height),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if !bytes.starts_with(b"P6") {
            return ppm_err(0, "expected magic `P6`");
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for (k, field) in fields.iter_mut().enumerate() {
            // whitespace and `#` comments may separate header fields
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return ppm_err(pos, format!("expected {}", ["width", "height", "maxval"][k]));
            }
            let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
            *field = match text.parse() {
                Ok(v) => v,
                Err(_) => return ppm_err(start, "number out of range"),
            };
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return ppm_err(pos, format!("only maxval 255 is supported, got {maxval}"));
        }
        if width == 0 || height == 0 {
            return ppm_err(pos, "image has no pixels");
        }
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return ppm_err(pos, "expected a single whitespace byte before pixel data"),
        }
        let need = width * height * 3;
        let have = bytes.len() - pos;
        if have < need {
            return ppm_err(bytes.len(), format!("pixel data truncated: need {need} bytes, found {have}"));
        }
        if have > need {
            return ppm_err(pos + need, "trailing bytes after pixel data");
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Channel-major image with values scaled to `[0, 1]`.
    pub fn to_image<T: Scalar>(&self) -> Image<T> {
        let plane = self.width * self.height;
        let mut data = vec![T::zero(); 3 * plane];
        let scale = T::lit(1.0 / 255.0);
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = T::of_f32(px[c] as f32) * scale;
            }
        }
        Image::new(3, self.height, self.width, data).expect("sizes agree")
    }
}
