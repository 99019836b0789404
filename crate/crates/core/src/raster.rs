//! Plain image and mask grids, resampling, and binary PGM/PPM I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::nn::bilinear_taps;

/// Channel-major (`C×H×W`) real image, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Binary `H×W` grid; values are 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!(
                    "{channels}x{height}x{width} needs {} values, got {}",
                    channels * height * width,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        self.data[(c * self.height + row) * self.width + col] = v;
    }

    /// Replicate a single band to `channels` bands.
    pub fn replicate(&self, channels: usize) -> Self {
        assert_eq!(self.channels, 1, "replicate needs a single band");
        let mut data = Vec::with_capacity(channels * self.data.len());
        for _ in 0..channels {
            data.extend_from_slice(&self.data);
        }
        Self {
            channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at
    /// integer positions), clamped at the borders.
    pub fn sample_bilinear(&self, c: usize, row: f64, col: f64) -> f64 {
        let r = row.clamp(0.0, (self.height - 1) as f64);
        let q = col.clamp(0.0, (self.width - 1) as f64);
        let r0 = r.floor() as usize;
        let q0 = q.floor() as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        let q1 = (q0 + 1).min(self.width - 1);
        let (fr, fq) = (r - r0 as f64, q - q0 as f64);
        let top = self.get(c, r0, q0) * (1.0 - fq) + self.get(c, r0, q1) * fq;
        let bot = self.get(c, r1, q0) * (1.0 - fq) + self.get(c, r1, q1) * fq;
        top * (1.0 - fr) + bot * fr
    }

    /// Half-pixel-centred bilinear resize.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let ty = bilinear_taps(self.height, height);
        let tx = bilinear_taps(self.width, width);
        let mut out = Image::new(self.channels, height, width);
        for c in 0..self.channels {
            let src = self.plane(c);
            let w = self.width;
            let dst = out.plane_mut(c);
            for (oy, t) in ty.iter().enumerate() {
                for (ox, s) in tx.iter().enumerate() {
                    let top = src[t.lo * w + s.lo] * (1.0 - s.frac) + src[t.lo * w + s.hi] * s.frac;
                    let bot = src[t.hi * w + s.lo] * (1.0 - s.frac) + src[t.hi * w + s.hi] * s.frac;
                    dst[oy * width + ox] = top * (1.0 - t.frac) + bot * t.frac;
                }
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let mut out = Image::new(self.channels, height, width);
        for c in 0..self.channels {
            for r in 0..height {
                let src = &self.plane(c)[(top + r) * self.width + left..][..width];
                out.plane_mut(c)[r * width..(r + 1) * width].copy_from_slice(src);
            }
        }
        out
    }
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || data.iter().any(|&v| v > 1) {
            return Err(Error::shape("mask", "mask must be H×W with values in {0,1}"));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.data[row * self.width + col] = v;
    }

    pub fn popcount(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Nearest-neighbour resize (source index `floor((i + 0.5)·src/dst)`).
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let mut out = Mask::zeros(height, width);
        for r in 0..height {
            let sr = (((r as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for c in 0..width {
                let sc = (((c as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                out.set(r, c, self.get(sr, sc));
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let mut out = Mask::zeros(height, width);
        for r in 0..height {
            let src = &self.data[(top + r) * self.width + left..][..width];
            out.data[r * width..(r + 1) * width].copy_from_slice(src);
        }
        out
    }

    pub fn to_image(&self) -> Image {
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

/// Quantize `[0,1]` to `0..=255` (round half up, clamped).
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode an image as binary PGM (1 channel) or PPM (3 channels). Each
/// `comments` entry becomes a `# ...` header line.
pub fn encode_pnm(img: &Image, comments: &[String]) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format(format!("cannot encode {c}-channel image as PNM"))),
    };
    let mut out = format!("{magic}\n").into_bytes();
    for c in comments {
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    out.extend_from_slice(format!("{} {}\n255\n", img.width, img.height).as_bytes());
    let n = img.height * img.width;
    for i in 0..n {
        for c in 0..img.channels {
            out.push(to_byte(img.data[c * n + i]));
        }
    }
    Ok(out)
}

pub fn encode_mask_pgm(mask: &Mask, comments: &[String]) -> Vec<u8> {
    let img = Image {
        channels: 1,
        height: mask.height,
        width: mask.width,
        data: mask.data.iter().map(|&v| f64::from(v)).collect(),
    };
    encode_pnm(&img, comments).expect("single channel always encodes")
}

fn header_tokens(bytes: &[u8]) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        if i >= bytes.len() {
            return Err(Error::Format("truncated PNM header".into()));
        }
        let b = bytes[i];
        if b == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else if b.is_ascii_whitespace() {
            i += 1;
        } else {
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
                i += 1;
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
        }
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((tokens, i + 1))
}

/// Decode binary PGM/PPM with maxval 255 into `[0,1]` values.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let (tokens, start) = header_tokens(bytes)?;
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic {m}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PNM header field {s}")))
    };
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported (need 255)")));
    }
    let n = width * height;
    let body = bytes
        .get(start..start + n * channels)
        .ok_or_else(|| Error::Format("truncated PNM raster".into()))?;
    let mut data = vec![0.0; n * channels];
    for i in 0..n {
        for c in 0..channels {
            data[c * n + i] = f64::from(body[i * channels + c]) / 255.0;
        }
    }
    Image::from_vec(channels, height, width, data)
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

/// Read a PGM mask; any nonzero pixel is foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = read_pnm(path)?;
    if img.channels != 1 {
        return Err(Error::Format(format!("{} is not a single-band mask", path.display())));
    }
    Ok(Mask {
        height: img.height,
        width: img.width,
        data: img.data.iter().map(|&v| u8::from(v > 0.0)).collect(),
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
