//! Square sample windows, truth-mask rasterization and negative sampling.

use rand::Rng;

use super::georef::GeoRef;
use super::shape::{centroid, edges, point_in_ring, segments_intersect, SiteShape, Vertex};
use crate::error::{Error, Result};
use crate::raster::Mask;

pub const DEFAULT_SIDE_M: f64 = 2000.0;
pub const DEFAULT_CLEARANCE_M: f64 = 100.0;
pub const MAX_NEGATIVE_ATTEMPTS: usize = 100_000;

/// Axis-aligned world rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Rect {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        if !(xmin < xmax && ymin < ymax) {
            return Err(Error::Geometry(format!(
                "empty rectangle [{xmin}, {ymin}, {xmax}, {ymax}]"
            )));
        }
        Ok(Self { xmin, ymin, xmax, ymax })
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn contains(&self, p: Vertex) -> bool {
        p.0 >= self.xmin && p.0 <= self.xmax && p.1 >= self.ymin && p.1 <= self.ymax
    }

    fn corners(&self) -> [Vertex; 4] {
        [
            (self.xmin, self.ymin),
            (self.xmax, self.ymin),
            (self.xmax, self.ymax),
            (self.xmin, self.ymax),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleWindow {
    pub center: Vertex,
    pub side: f64,
    pub resolution: usize,
}

impl SampleWindow {
    pub fn new(center: Vertex, side: f64, resolution: usize) -> Result<Self> {
        if !(side > 0.0 && side.is_finite()) {
            return Err(Error::Config(format!("window side must be > 0, got {side}")));
        }
        if resolution < 8 {
            return Err(Error::Config(format!(
                "window resolution must be ≥ 8, got {resolution}"
            )));
        }
        if !(center.0.is_finite() && center.1.is_finite()) {
            return Err(Error::Geometry("non-finite window centre".into()));
        }
        Ok(Self {
            center,
            side,
            resolution,
        })
    }

    pub fn pixel_size(&self) -> f64 {
        self.side / self.resolution as f64
    }

    pub fn bounds(&self) -> Rect {
        let h = self.side / 2.0;
        Rect {
            xmin: self.center.0 - h,
            ymin: self.center.1 - h,
            xmax: self.center.0 + h,
            ymax: self.center.1 + h,
        }
    }

    pub fn georef(&self) -> GeoRef {
        let px = self.pixel_size();
        let h = self.side / 2.0;
        GeoRef::north_up(px, self.center.0 - h + px / 2.0, self.center.1 + h - px / 2.0)
            .expect("window pixel size is positive")
    }

    /// World coordinate of the centre of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> Vertex {
        let px = self.pixel_size();
        let h = self.side / 2.0;
        (
            self.center.0 - h + (col as f64 + 0.5) * px,
            self.center.1 + h - (row as f64 + 0.5) * px,
        )
    }
}

pub fn make_window(shape: &SiteShape, side: f64, resolution: usize) -> Result<SampleWindow> {
    SampleWindow::new(centroid(shape)?, side, resolution)
}

fn rasterize_into(mask: &mut Mask, shape: &SiteShape, window: &SampleWindow) -> bool {
    let (bx0, by0, bx1, by1) = shape.bbox();
    let n = window.resolution;
    let px = window.pixel_size();
    let b = window.bounds();
    // rows/cols whose centres can fall inside the shape's bbox
    let col_lo = (((bx0 - b.xmin) / px - 0.5).floor().max(0.0)) as usize;
    let col_hi = (((bx1 - b.xmin) / px - 0.5).ceil().min(n as f64 - 1.0)).max(-1.0);
    let row_lo = (((b.ymax - by1) / px - 0.5).floor().max(0.0)) as usize;
    let row_hi = (((b.ymax - by0) / px - 0.5).ceil().min(n as f64 - 1.0)).max(-1.0);
    if col_hi < 0.0 || row_hi < 0.0 {
        return false;
    }
    let mut any = false;
    for row in row_lo..=row_hi as usize {
        for col in col_lo..=col_hi as usize {
            if point_in_ring(window.pixel_center(row, col), shape.outer()) {
                mask.set(row, col, 1);
                any = true;
            }
        }
    }
    any
}

/// Pixel is 1 iff its centre lies inside some shape's outer ring.
pub fn rasterize_mask(shapes: &[SiteShape], window: &SampleWindow) -> Mask {
    rasterize_with_cover(shapes, window).0
}

/// Mask plus ids of the shapes that contributed at least one pixel.
pub fn rasterize_with_cover(shapes: &[SiteShape], window: &SampleWindow) -> (Mask, Vec<String>) {
    let mut mask = Mask::zeros(window.resolution, window.resolution);
    let mut covered = Vec::new();
    for s in shapes {
        if rasterize_into(&mut mask, s, window) {
            covered.push(s.id.clone());
        }
    }
    (mask, covered)
}

fn point_segment_dist(p: Vertex, a: Vertex, b: Vertex) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Euclidean distance between a rectangle and a polygon's outer ring
/// (0 when they overlap).
pub fn rect_polygon_distance(rect: &Rect, shape: &SiteShape) -> f64 {
    let ring = shape.outer();
    if ring.iter().any(|&v| rect.contains(v)) {
        return 0.0;
    }
    let corners = rect.corners();
    if corners.iter().any(|&c| point_in_ring(c, ring)) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for k in 0..4 {
        let (a, b) = (corners[k], corners[(k + 1) % 4]);
        for (p, q) in edges(ring) {
            if segments_intersect(a, b, p, q) {
                return 0.0;
            }
            best = best
                .min(point_segment_dist(a, p, q))
                .min(point_segment_dist(b, p, q))
                .min(point_segment_dist(p, a, b))
                .min(point_segment_dist(q, a, b));
        }
    }
    best
}

/// Windows inside `bounds` whose area stays at least `min_clearance` away
/// from every exclusion polygon.
#[allow(clippy::too_many_arguments)]
pub fn sample_negatives<R: Rng + ?Sized>(
    bounds: &Rect,
    count: usize,
    exclusions: &[SiteShape],
    min_clearance: f64,
    side: f64,
    resolution: usize,
    rng: &mut R,
) -> Result<Vec<SampleWindow>> {
    sample_negatives_where(bounds, count, exclusions, min_clearance, side, resolution, rng, |_| {
        true
    })
}

/// As [`sample_negatives`], additionally requiring `accept(window)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_negatives_where<R: Rng + ?Sized>(
    bounds: &Rect,
    count: usize,
    exclusions: &[SiteShape],
    min_clearance: f64,
    side: f64,
    resolution: usize,
    rng: &mut R,
    accept: impl Fn(&SampleWindow) -> bool,
) -> Result<Vec<SampleWindow>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if !(min_clearance >= 0.0) {
        return Err(Error::Config(format!("clearance must be ≥ 0, got {min_clearance}")));
    }
    if bounds.width() < side || bounds.height() < side {
        return Err(Error::Capacity(format!(
            "bounds {:.1} × {:.1} m cannot hold a {side} m window",
            bounds.width(),
            bounds.height()
        )));
    }
    let h = side / 2.0;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts >= MAX_NEGATIVE_ATTEMPTS {
            return Err(Error::Capacity(format!(
                "placed {} of {count} negative windows after {MAX_NEGATIVE_ATTEMPTS} attempts",
                out.len()
            )));
        }
        attempts += 1;
        let cx = if bounds.width() == side {
            bounds.xmin + h
        } else {
            rng.random_range(bounds.xmin + h..=bounds.xmax - h)
        };
        let cy = if bounds.height() == side {
            bounds.ymin + h
        } else {
            rng.random_range(bounds.ymin + h..=bounds.ymax - h)
        };
        let w = SampleWindow::new((cx, cy), side, resolution)?;
        let area = w.bounds();
        let clear = exclusions.iter().all(|s| {
            let (x0, y0, x1, y1) = s.bbox();
            let far = x0 > area.xmax + min_clearance
                || x1 < area.xmin - min_clearance
                || y0 > area.ymax + min_clearance
                || y1 < area.ymin - min_clearance;
            far || rect_polygon_distance(&area, s) > min_clearance
        });
        if clear && accept(&w) {
            out.push(w);
        }
    }
    Ok(out)
}
