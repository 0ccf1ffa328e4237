//! Square RGB images with binary PPM (P6) persistence, plus the rectangle
//! type shared by pattern regions, occluders, and annotation boxes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned half-open rectangle: pixels with `x0 <= x < x1` and
/// `y0 <= y < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Rect {
        Rect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Intersection with a square canvas.
    pub fn clip(&self, side: usize) -> Rect {
        Rect {
            x0: self.x0.min(side),
            y0: self.y0.min(side),
            x1: self.x1.min(side),
            y1: self.y1.min(side),
        }
    }

    pub fn validate_within(&self, side: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > side || self.y1 > side {
            return Err(Error::InvalidInput(format!(
                "rectangle ({}, {})-({}, {}) does not fit a {side}x{side} canvas",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(())
    }
}

/// A square RGB image, 8 bits per channel, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    side: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(side: usize, data: Vec<u8>) -> Result<RgbImage> {
        if side == 0 {
            return Err(Error::InvalidInput("image side must be positive".into()));
        }
        if data.len() != side * side * 3 {
            return Err(Error::DimensionMismatch {
                what: "image bytes",
                expected: side * side * 3,
                actual: data.len(),
            });
        }
        Ok(RgbImage { side, data })
    }

    pub fn filled(side: usize, rgb: [u8; 3]) -> RgbImage {
        let mut data = Vec::with_capacity(side * side * 3);
        for _ in 0..side * side {
            data.extend_from_slice(&rgb);
        }
        RgbImage { side, data }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.side + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.side + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the pixels of `rect` (clipped to the canvas) from `source`,
    /// which must have the same side.
    pub fn fill_rect_from(&mut self, rect: &Rect, source: &RgbImage) -> Result<()> {
        if source.side != self.side {
            return Err(Error::DimensionMismatch {
                what: "fill source side",
                expected: self.side,
                actual: source.side,
            });
        }
        let rect = rect.clip(self.side);
        for y in rect.y0..rect.y1 {
            let from = (y * self.side + rect.x0) * 3;
            let to = (y * self.side + rect.x1) * 3;
            self.data[from..to].copy_from_slice(&source.data[from..to]);
        }
        Ok(())
    }

    pub fn fill_rect_solid(&mut self, rect: &Rect, rgb: [u8; 3]) {
        let rect = rect.clip(self.side);
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                self.set_pixel(x, y, rgb);
            }
        }
    }

    /// Writes a binary PPM (P6, maxval 255).
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.side, self.side).into_bytes();
        bytes.extend_from_slice(&self.data);
        crate::util::atomic_write(path, &bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads a binary PPM. Only square P6 images with maxval 255 are
    /// supported; `#` comments in the header are honored.
    pub fn read_ppm(path: &Path) -> Result<RgbImage> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let format_err = |message: &str| Error::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let mut pos = 0usize;
        let mut next_token = || -> Option<String> {
            // Skip whitespace and comments.
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos > start {
                Some(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
            } else {
                None
            }
        };
        let magic = next_token().ok_or_else(|| format_err("missing magic"))?;
        if magic != "P6" {
            return Err(format_err(&format!("expected P6, got {magic:?}")));
        }
        let mut dim = |name: &str| -> Result<usize> {
            next_token()
                .ok_or_else(|| format_err(&format!("missing {name}")))?
                .parse()
                .map_err(|_| format_err(&format!("{name} is not an integer")))
        };
        let width = dim("width")?;
        let height = dim("height")?;
        let maxval = dim("maxval")?;
        if width != height {
            return Err(format_err(&format!(
                "image is {width}x{height}, expected square"
            )));
        }
        if maxval != 255 {
            return Err(format_err(&format!(
                "maxval {maxval} unsupported, expected 255"
            )));
        }
        // Exactly one whitespace byte separates the header from the payload.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(format_err("missing whitespace after maxval"));
        }
        pos += 1;
        let expected = width * height * 3;
        let payload = &bytes[pos..];
        if payload.len() != expected {
            return Err(format_err(&format!(
                "payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        RgbImage::new(width, payload.to_vec())
    }
}

/// Pixel-wise mean of same-sized images, rounded to nearest.
pub fn mean_image<'a, I>(images: I) -> Result<RgbImage>
where
    I: IntoIterator<Item = &'a RgbImage>,
{
    let mut iter = images.into_iter();
    let first = iter.next().ok_or(Error::EmptyInput {
        what: "mean image inputs",
    })?;
    let mut sums: Vec<u64> = first.data.iter().map(|&b| u64::from(b)).collect();
    let mut count = 1u64;
    for image in iter {
        if image.side != first.side {
            return Err(Error::DimensionMismatch {
                what: "mean image side",
                expected: first.side,
                actual: image.side,
            });
        }
        for (acc, &b) in sums.iter_mut().zip(image.data.iter()) {
            *acc += u64::from(b);
        }
        count += 1;
    }
    let data = sums
        .iter()
        .map(|&s| u8::try_from((s + count / 2) / count).expect("mean of u8 fits u8"))
        .collect();
    RgbImage::new(first.side, data)
}
