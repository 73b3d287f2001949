//! Portable graymap (P2 ASCII and P5 binary) reading and P5 writing.

use std::path::Path;

use super::DataError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples in `0..=maxval`.
    pub pixels: Vec<u16>,
}

impl GrayImage {
    /// Samples scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        let m = f64::from(self.maxval.max(1));
        self.pixels.iter().map(|&p| f64::from(p) / m).collect()
    }

    /// P5 encoding (two bytes per sample, big-endian, when `maxval > 255`).
    pub fn to_p5(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            out.extend(self.pixels.iter().flat_map(|p| p.to_be_bytes()));
        } else {
            out.extend(self.pixels.iter().map(|&p| p as u8));
        }
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("expected {what} at byte {start}"))
    }
}

/// Decodes graymap bytes; `path` only labels errors.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage, DataError> {
    let fail = |reason: String| DataError::Pgm { path: path.to_path_buf(), reason };
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(fail("missing P2/P5 magic".into())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width").map_err(fail)?;
    let height = cur.number("height").map_err(fail)?;
    let maxval = cur.number("maxval").map_err(fail)?;
    if maxval == 0 || maxval > 65535 {
        return Err(fail(format!("maxval {maxval} outside 1..=65535")));
    }
    if width == 0 || height == 0 {
        return Err(DataError::EmptyImage { path: path.to_path_buf(), width, height });
    }
    let n = width * height;
    let pixels: Vec<u16> = if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = cur.pos + 1;
        let wide = maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        let raster = bytes
            .get(start..start + need)
            .ok_or_else(|| fail(format!("raster truncated: need {need} bytes")))?;
        if wide {
            raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            raster.iter().map(|&b| u16::from(b)).collect()
        }
    } else {
        (0..n).map(|i| cur.number(&format!("sample {i}")).map(|v| v as u16)).collect::<Result<_, _>>().map_err(fail)?
    };
    if let Some(p) = pixels.iter().find(|&&p| usize::from(p) > maxval) {
        return Err(fail(format!("sample {p} exceeds maxval {maxval}")));
    }
    Ok(GrayImage { width, height, maxval: maxval as u16, pixels })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    parse_pgm(&bytes, path)
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<(), DataError> {
    std::fs::write(path, image.to_p5()).map_err(|e| DataError::io(path, e))
}
