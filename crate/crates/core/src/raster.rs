//! RGB image container, HSV conversion and the six-component pixel feature
//! vector used by the segmentation tree.
//!
//! Images are stored row-major as `[R, G, B]` triples. PPM (binary `P6`) is
//! the canonical on-disk format for fixtures; PNG is supported for
//! interchange and rendered output.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed image file: {0}")]
    Format(String),
    #[error("pixel buffer of length {len} does not match {width}x{height}")]
    Dimensions { width: usize, height: usize, len: usize },
    #[error("image dimensions must be at least 1x1")]
    Empty,
    #[error("PNG codec error: {0}")]
    Png(#[from] image::ImageError),
}

/// An 8-bit RGB image.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    /// Black image of the given size.
    pub fn new(width: usize, height: usize) -> Result<Self, RasterError> {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Empty);
        }
        Ok(Self {
            width,
            height,
            pixels: vec![color; width * height],
        })
    }

    pub fn from_pixels(
        width: usize,
        height: usize,
        pixels: Vec<[u8; 3]>,
    ) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Empty);
        }
        if pixels.len() != width * height {
            return Err(RasterError::Dimensions {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, px: [u8; 3]) {
        self.pixels[y * self.width + x] = px;
    }

    /// Copy of the inclusive rectangle `[x0, x1] x [y0, y1]`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> RasterImage {
        assert!(x0 <= x1 && x1 < self.width && y0 <= y1 && y1 < self.height);
        let w = x1 - x0 + 1;
        let mut pixels = Vec::with_capacity(w * (y1 - y0 + 1));
        for y in y0..=y1 {
            let row = y * self.width;
            pixels.extend_from_slice(&self.pixels[row + x0..=row + x1]);
        }
        RasterImage {
            width: w,
            height: y1 - y0 + 1,
            pixels,
        }
    }

    pub fn write_ppm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.pixels.len() * 3);
        for px in &self.pixels {
            buf.extend_from_slice(px);
        }
        out.write_all(&buf)
    }

    pub fn read_ppm<R: Read>(input: R) -> Result<Self, RasterError> {
        let mut reader = BufReader::new(input);
        let magic = read_pnm_token(&mut reader)?;
        if magic != "P6" {
            return Err(RasterError::Format(format!("expected P6, found {magic:?}")));
        }
        let width = parse_pnm_number(&mut reader)?;
        let height = parse_pnm_number(&mut reader)?;
        let maxval = parse_pnm_number(&mut reader)?;
        if maxval != 255 {
            return Err(RasterError::Format(format!(
                "only 8-bit PPM is supported (maxval {maxval})"
            )));
        }
        let mut raw = vec![0u8; width * height * 3];
        reader
            .read_exact(&mut raw)
            .map_err(|e| RasterError::Format(format!("truncated pixel data: {e}")))?;
        let pixels = raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::from_pixels(width, height, pixels)
    }

    pub fn write_png<W: Write>(&self, out: W) -> Result<(), RasterError> {
        use image::ImageEncoder;
        let mut raw = Vec::with_capacity(self.pixels.len() * 3);
        for px in &self.pixels {
            raw.extend_from_slice(px);
        }
        image::codecs::png::PngEncoder::new(out).write_image(
            &raw,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    pub fn read_png<R: BufRead + io::Seek>(input: R) -> Result<Self, RasterError> {
        let decoded = image::ImageReader::with_format(input, image::ImageFormat::Png)
            .decode()?
            .into_rgb8();
        let (w, h) = decoded.dimensions();
        let pixels = decoded.pixels().map(|p| p.0).collect();
        Self::from_pixels(w as usize, h as usize, pixels)
    }

    /// Load a `.ppm` or `.png` file, dispatching on the extension.
    pub fn load(path: &Path) -> Result<Self, RasterError> {
        let ext = extension(path);
        let file = fs::File::open(path)?;
        match ext.as_str() {
            "png" => Self::read_png(BufReader::new(file)),
            _ => Self::read_ppm(file),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), RasterError> {
        let file = io::BufWriter::new(fs::File::create(path)?);
        match extension(path).as_str() {
            "png" => self.write_png(file),
            _ => Ok(self.write_ppm(file)?),
        }
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default()
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
pub(crate) fn read_pnm_token<R: BufRead>(reader: &mut R) -> Result<String, RasterError> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte)? == 0 {
            break;
        }
        let c = byte[0];
        if c == b'#' && token.is_empty() {
            let mut discard = Vec::new();
            reader.read_until(b'\n', &mut discard)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(c as char);
    }
    if token.is_empty() {
        return Err(RasterError::Format("unexpected end of header".into()));
    }
    Ok(token)
}

pub(crate) fn parse_pnm_number<R: BufRead>(reader: &mut R) -> Result<usize, RasterError> {
    let token = read_pnm_token(reader)?;
    token
        .parse()
        .map_err(|_| RasterError::Format(format!("bad header number {token:?}")))
}

/// Hexcone HSV: `h` in degrees `[0, 360)`, `s` and `v` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsvPixel {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

pub fn rgb_to_hsv(px: [u8; 3]) -> HsvPixel {
    let [r, g, b] = px.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let v = max / 255.0;
    if chroma == 0.0 {
        return HsvPixel { h: 0.0, s: 0.0, v };
    }
    let s = chroma / max;
    let sector = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    let mut h = 60.0 * sector;
    if h >= 360.0 {
        h -= 360.0;
    }
    HsvPixel { h, s, v }
}

/// Inverse of [`rgb_to_hsv`], rounding each channel to the nearest integer.
pub fn hsv_to_rgb(hsv: HsvPixel) -> [u8; 3] {
    let c = hsv.v * hsv.s;
    let hp = (hsv.h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = hsv.v - c;
    [r1, g1, b1].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// `[h/360, s, v, R/(R+G+B), G/(R+G+B), (max-min)/255]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelFeatures(pub [f64; 6]);

impl PixelFeatures {
    pub const LEN: usize = 6;

    #[inline]
    pub fn get(&self, index: usize) -> f64 {
        self.0[index]
    }
}

#[inline]
pub fn pixel_features(px: [u8; 3]) -> PixelFeatures {
    let hsv = rgb_to_hsv(px);
    let [r, g, b] = px.map(f64::from);
    let sum = r + g + b;
    // Black: the achromatic limit of gray, 1/3 each.
    let (r_frac, g_frac) = if sum == 0.0 {
        (1.0 / 3.0, 1.0 / 3.0)
    } else {
        (r / sum, g / sum)
    };
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    PixelFeatures([
        hsv.h / 360.0,
        hsv.s,
        hsv.v,
        r_frac,
        g_frac,
        (max - min) / 255.0,
    ])
}
