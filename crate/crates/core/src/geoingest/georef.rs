//! Affine georeferencing in world-file convention.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const EPSG_WEB_MERCATOR: u32 = 3857;

/// Maps pixel centre `(col, row)` to world `(x, y)`:
/// `x = A·col + B·row + C`, `y = D·col + E·row + F`.
/// Field order follows the six lines of a world file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoRef {
    pub a: f64,
    pub d: f64,
    pub b: f64,
    pub e: f64,
    pub c: f64,
    pub f: f64,
    pub epsg: u32,
}

impl GeoRef {
    pub fn new(a: f64, d: f64, b: f64, e: f64, c: f64, f: f64) -> Result<Self> {
        let g = Self {
            a,
            d,
            b,
            e,
            c,
            f,
            epsg: EPSG_WEB_MERCATOR,
        };
        g.validate()?;
        Ok(g)
    }

    /// North-up raster with square pixels; `(c, f)` is the top-left pixel centre.
    pub fn north_up(pixel_size: f64, c: f64, f: f64) -> Result<Self> {
        Self::new(pixel_size, 0.0, 0.0, -pixel_size, c, f)
    }

    pub fn determinant(&self) -> f64 {
        self.a * self.e - self.b * self.d
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.a, self.b, self.c, self.d, self.e, self.f]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Geometry("non-finite affine coefficient".into()));
        }
        if self.determinant() == 0.0 {
            return Err(Error::Geometry("singular affine transform".into()));
        }
        if !(self.a > 0.0 && self.e < 0.0) {
            return Err(Error::Geometry(format!(
                "raster must be north-up with A > 0 and E < 0 (A={}, E={})",
                self.a, self.e
            )));
        }
        if self.epsg != EPSG_WEB_MERCATOR {
            return Err(Error::Geometry(format!("unsupported EPSG:{}", self.epsg)));
        }
        Ok(())
    }

    /// Ground area of one pixel in m².
    pub fn pixel_area(&self) -> f64 {
        self.determinant().abs()
    }

    pub fn pixel_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.a * col + self.b * row + self.c,
            self.d * col + self.e * row + self.f,
        )
    }

    pub fn world_to_pixel(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let det = self.determinant();
        if det == 0.0 {
            return Err(Error::Geometry("singular affine transform".into()));
        }
        let (dx, dy) = (x - self.c, y - self.f);
        Ok(((self.e * dx - self.b * dy) / det, (self.a * dy - self.d * dx) / det))
    }

    /// Six-line ASCII world file, 17 significant digits per value.
    pub fn to_world_file(&self) -> String {
        let mut out = String::new();
        for v in [self.a, self.d, self.b, self.e, self.c, self.f] {
            let _ = writeln!(out, "{}", sig17(v));
        }
        out
    }

    pub fn from_world_file(text: &str) -> Result<Self> {
        let vals = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.parse::<f64>()
                    .map_err(|_| Error::Format(format!("world file value {l:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 6 {
            return Err(Error::Format(format!("world file has {} values, need 6", vals.len())));
        }
        Self::new(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5])
    }
}

/// Fixed-point decimal with 17 significant digits.
fn sig17(v: f64) -> String {
    if v == 0.0 {
        return format!("{:.16}", 0.0);
    }
    let sci = format!("{v:.16e}");
    let exp: i32 = sci
        .rsplit('e')
        .next()
        .and_then(|e| e.parse().ok())
        .expect("scientific formatting has an exponent");
    let decimals = (16 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}
