//! Site polygons: validation, centroid, point-in-polygon, and the two
//! on-disk formats (plain text and the ESRI `.shp` polygon subset).

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `(x, y)` in EPSG:3857 meters.
pub type Vertex = (f64, f64);

/// A named site outline. `rings[0]` is the outer boundary; further rings
/// are holes, parsed and kept but ignored by rasterization.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteShape {
    pub id: String,
    pub rings: Vec<Vec<Vertex>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteFormat {
    Shp,
    Text,
}

fn cross(o: Vertex, a: Vertex, b: Vertex) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn on_segment(p: Vertex, a: Vertex, b: Vertex) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

/// Closed-segment intersection test (touching counts).
pub(crate) fn segments_intersect(a: Vertex, b: Vertex, c: Vertex, d: Vertex) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(a, c, d))
        || (d2 == 0.0 && on_segment(b, c, d))
        || (d3 == 0.0 && on_segment(c, a, b))
        || (d4 == 0.0 && on_segment(d, a, b))
}

/// Even-odd point-in-ring test. The ring may or may not repeat its first
/// vertex at the end.
pub fn point_in_ring(p: Vertex, ring: &[Vertex]) -> bool {
    let n = ring.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = ring[i];
        let (xj, yj) = ring[j];
        if (yi > p.1) != (yj > p.1) {
            let x_cross = (xj - xi) * (p.1 - yi) / (yj - yi) + xi;
            if p.0 < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Signed shoelace area of a closed ring (positive when counter-clockwise).
pub fn signed_area(ring: &[Vertex]) -> f64 {
    let Some(&origin) = ring.first() else {
        return 0.0;
    };
    let mut acc = 0.0;
    for w in ring.windows(2) {
        let (a, b) = (
            (w[0].0 - origin.0, w[0].1 - origin.1),
            (w[1].0 - origin.0, w[1].1 - origin.1),
        );
        acc += a.0 * b.1 - b.0 * a.1;
    }
    acc / 2.0
}

/// Edges of a closed ring, as vertex pairs.
pub(crate) fn edges(ring: &[Vertex]) -> impl Iterator<Item = (Vertex, Vertex)> + '_ {
    ring.windows(2).map(|w| (w[0], w[1]))
}

fn check_ring(id: &str, ring: &[Vertex], outer: bool) -> Result<()> {
    if ring.len() < 4 {
        return Err(Error::Geometry(format!(
            "{id}: ring has {} vertices, need ≥ 4",
            ring.len()
        )));
    }
    if ring.first() != ring.last() {
        return Err(Error::Geometry(format!("{id}: ring is not closed")));
    }
    if ring.iter().any(|v| !v.0.is_finite() || !v.1.is_finite()) {
        return Err(Error::Geometry(format!("{id}: non-finite coordinate")));
    }
    let mut distinct: Vec<Vertex> = ring[..ring.len() - 1].to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Geometry(format!("{id}: fewer than 3 distinct vertices")));
    }
    if !outer {
        return Ok(());
    }
    if signed_area(ring) == 0.0 {
        return Err(Error::Geometry(format!("{id}: zero-area outer ring")));
    }
    let segs: Vec<(Vertex, Vertex)> = edges(ring).collect();
    let n = segs.len();
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // neighbours share one endpoint; they must not fold back over each other
                let (a, b) = segs[i];
                let (c, d) = segs[j];
                let shared = if j == i + 1 { b } else { a };
                let (p, q) = if j == i + 1 { (a, d) } else { (b, c) };
                if cross(shared, p, q) == 0.0
                    && (p.0 - shared.0) * (q.0 - shared.0) + (p.1 - shared.1) * (q.1 - shared.1) > 0.0
                {
                    return Err(Error::Geometry(format!("{id}: outer ring folds back on itself")));
                }
                continue;
            }
            if segments_intersect(segs[i].0, segs[i].1, segs[j].0, segs[j].1) {
                return Err(Error::Geometry(format!("{id}: outer ring self-intersects")));
            }
        }
    }
    Ok(())
}

impl SiteShape {
    /// Validated site; the outer ring must be closed and simple.
    pub fn new(id: impl Into<String>, rings: Vec<Vec<Vertex>>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.contains(|c: char| c.is_whitespace() || c == ';') {
            return Err(Error::Format(format!("invalid site id {id:?}")));
        }
        let Some(outer) = rings.first() else {
            return Err(Error::Geometry(format!("{id}: no rings")));
        };
        check_ring(&id, outer, true)?;
        for ring in &rings[1..] {
            check_ring(&id, ring, false)?;
        }
        Ok(Self { id, rings })
    }

    pub fn outer(&self) -> &[Vertex] {
        &self.rings[0]
    }

    /// Unsigned area of the outer ring in m².
    pub fn area(&self) -> f64 {
        signed_area(self.outer()).abs()
    }

    /// Axis-aligned bounds of the outer ring `(xmin, ymin, xmax, ymax)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        self.outer().iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |b, v| (b.0.min(v.0), b.1.min(v.1), b.2.max(v.0), b.3.max(v.1)),
        )
    }

    pub fn contains(&self, p: Vertex) -> bool {
        point_in_ring(p, self.outer())
    }
}

/// Area-weighted (shoelace) centroid of the outer ring.
pub fn centroid(shape: &SiteShape) -> Result<Vertex> {
    let ring = shape.outer();
    let origin = ring[0];
    let (mut a2, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for (p, q) in edges(ring) {
        let (x0, y0) = (p.0 - origin.0, p.1 - origin.1);
        let (x1, y1) = (q.0 - origin.0, q.1 - origin.1);
        let c = x0 * y1 - x1 * y0;
        a2 += c;
        cx += (x0 + x1) * c;
        cy += (y0 + y1) * c;
    }
    if a2 == 0.0 {
        return Err(Error::Geometry(format!("{}: degenerate zero-area ring", shape.id)));
    }
    Ok((origin.0 + cx / (3.0 * a2), origin.1 + cy / (3.0 * a2)))
}

/// Parse sites from either on-disk format.
pub fn parse_sites(bytes: &[u8], format: SiteFormat) -> Result<Vec<SiteShape>> {
    match format {
        SiteFormat::Text => {
            let text =
                std::str::from_utf8(bytes).map_err(|e| Error::Format(format!("sites file is not UTF-8: {e}")))?;
            parse_sites_text(text)
        }
        SiteFormat::Shp => parse_shp(bytes),
    }
}

/// `id;x1 y1,x2 y2,...` per line; `#` starts a comment line; the closing
/// vertex is optional.
pub fn parse_sites_text(text: &str) -> Result<Vec<SiteShape>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, coords) = line
            .split_once(';')
            .ok_or_else(|| Error::Format(format!("line {}: missing ';' after id", lineno + 1)))?;
        let mut ring = coords
            .split(',')
            .map(|pair| {
                let mut it = pair.split_whitespace();
                let parse = |s: Option<&str>| {
                    s.and_then(|s| s.parse::<f64>().ok())
                        .ok_or_else(|| Error::Format(format!("line {}: bad vertex {pair:?}", lineno + 1)))
                };
                let v = (parse(it.next())?, parse(it.next())?);
                if it.next().is_some() {
                    return Err(Error::Format(format!("line {}: bad vertex {pair:?}", lineno + 1)));
                }
                Ok(v)
            })
            .collect::<Result<Vec<Vertex>>>()?;
        if ring.first() != ring.last() {
            ring.push(ring[0]);
        }
        out.push(SiteShape::new(id.trim(), vec![ring])?);
    }
    Ok(out)
}

/// Canonical text form: outer ring only, closing vertex included, shortest
/// round-trip decimal for every coordinate.
pub fn emit_sites(shapes: &[SiteShape]) -> String {
    let mut out = String::new();
    for s in shapes {
        let _ = write!(out, "{};", s.id);
        for (i, (x, y)) in s.outer().iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{x} {y}");
        }
        out.push('\n');
    }
    out
}

const SHP_MAGIC: i32 = 9994;
const SHP_VERSION: i32 = 1000;
const SHP_NULL: i32 = 0;
const SHP_POLYGON: i32 = 5;

fn be_i32(b: &[u8], at: usize) -> Result<i32> {
    b.get(at..at + 4)
        .map(|s| i32::from_be_bytes(s.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("truncated .shp at byte {at}")))
}

fn le_i32(b: &[u8], at: usize) -> Result<i32> {
    b.get(at..at + 4)
        .map(|s| i32::from_le_bytes(s.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("truncated .shp at byte {at}")))
}

fn le_f64(b: &[u8], at: usize) -> Result<f64> {
    b.get(at..at + 8)
        .map(|s| f64::from_le_bytes(s.try_into().expect("8 bytes")))
        .ok_or_else(|| Error::Format(format!("truncated .shp at byte {at}")))
}

/// Main `.shp` file with null and polygon records. Sites are named
/// `GHR.<record number, 3 digits>`.
pub fn parse_shp(bytes: &[u8]) -> Result<Vec<SiteShape>> {
    if bytes.len() < 100 {
        return Err(Error::Format("shapefile shorter than its 100-byte header".into()));
    }
    let magic = be_i32(bytes, 0)?;
    if magic != SHP_MAGIC {
        return Err(Error::Format(format!("bad file code {magic}, expected {SHP_MAGIC}")));
    }
    let file_len = be_i32(bytes, 24)? as usize * 2;
    let end = file_len.min(bytes.len());
    let mut at = 100;
    let mut shapes = Vec::new();
    let mut index = 0;
    while at + 8 <= end {
        let number = be_i32(bytes, at)?;
        let content_len = be_i32(bytes, at + 4)? as usize * 2;
        let body = at + 8;
        if body + content_len > bytes.len() {
            return Err(Error::Format(format!("record {number} overruns the file")));
        }
        let shape_type = le_i32(bytes, body)?;
        match shape_type {
            SHP_NULL => {}
            SHP_POLYGON => {
                let num_parts = le_i32(bytes, body + 36)?;
                let num_points = le_i32(bytes, body + 40)?;
                if num_parts < 1 || num_points < 0 {
                    return Err(Error::Format(format!("record {number}: bad part/point counts")));
                }
                let (num_parts, num_points) = (num_parts as usize, num_points as usize);
                let parts_at = body + 44;
                let points_at = parts_at + 4 * num_parts;
                if points_at + 16 * num_points > body + content_len {
                    return Err(Error::Format(format!("record {number}: content too short")));
                }
                let mut starts = Vec::with_capacity(num_parts);
                for p in 0..num_parts {
                    let s = le_i32(bytes, parts_at + 4 * p)?;
                    if s < 0 || s as usize > num_points {
                        return Err(Error::Format(format!("record {number}: bad part index")));
                    }
                    starts.push(s as usize);
                }
                let mut rings = Vec::with_capacity(num_parts);
                for (p, &start) in starts.iter().enumerate() {
                    let stop = starts.get(p + 1).copied().unwrap_or(num_points);
                    if stop < start {
                        return Err(Error::Format(format!("record {number}: parts out of order")));
                    }
                    let ring = (start..stop)
                        .map(|k| {
                            let off = points_at + 16 * k;
                            Ok((le_f64(bytes, off)?, le_f64(bytes, off + 8)?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    rings.push(ring);
                }
                let id = format!("GHR.{number:03}");
                if rings.iter().any(|r| r.first() != r.last()) {
                    return Err(Error::Geometry(format!("{id}: open ring in record {number}")));
                }
                if rings.len() > 1 {
                    log::warn!("{id}: {} inner rings parsed but ignored", rings.len() - 1);
                }
                shapes.push(SiteShape::new(id, rings)?);
            }
            other => {
                return Err(Error::UnsupportedGeometry {
                    index,
                    shape_type: other,
                })
            }
        }
        index += 1;
        at = body + content_len;
    }
    Ok(shapes)
}

/// Encode records (`None` = null record) as a `.shp` main file.
pub fn encode_shp(records: &[Option<SiteShape>]) -> Vec<u8> {
    let mut body = Vec::new();
    let mut bbox = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (i, rec) in records.iter().enumerate() {
        let mut content = Vec::new();
        match rec {
            None => content.extend_from_slice(&SHP_NULL.to_le_bytes()),
            Some(shape) => {
                let pts: Vec<Vertex> = shape.rings.iter().flatten().copied().collect();
                let b = pts.iter().fold(
                    (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                    |b, v| (b.0.min(v.0), b.1.min(v.1), b.2.max(v.0), b.3.max(v.1)),
                );
                bbox = (bbox.0.min(b.0), bbox.1.min(b.1), bbox.2.max(b.2), bbox.3.max(b.3));
                content.extend_from_slice(&SHP_POLYGON.to_le_bytes());
                for v in [b.0, b.1, b.2, b.3] {
                    content.extend_from_slice(&v.to_le_bytes());
                }
                content.extend_from_slice(&(shape.rings.len() as i32).to_le_bytes());
                content.extend_from_slice(&(pts.len() as i32).to_le_bytes());
                let mut start = 0i32;
                for r in &shape.rings {
                    content.extend_from_slice(&start.to_le_bytes());
                    start += r.len() as i32;
                }
                for (x, y) in pts {
                    content.extend_from_slice(&x.to_le_bytes());
                    content.extend_from_slice(&y.to_le_bytes());
                }
            }
        }
        body.extend_from_slice(&(i as i32 + 1).to_be_bytes());
        body.extend_from_slice(&((content.len() / 2) as i32).to_be_bytes());
        body.extend_from_slice(&content);
    }
    if !bbox.0.is_finite() {
        bbox = (0.0, 0.0, 0.0, 0.0);
    }
    let mut out = Vec::with_capacity(100 + body.len());
    out.extend_from_slice(&SHP_MAGIC.to_be_bytes());
    out.extend_from_slice(&[0u8; 20]);
    out.extend_from_slice(&(((100 + body.len()) / 2) as i32).to_be_bytes());
    out.extend_from_slice(&SHP_VERSION.to_le_bytes());
    out.extend_from_slice(&SHP_POLYGON.to_le_bytes());
    for v in [bbox.0, bbox.1, bbox.2, bbox.3, 0.0, 0.0, 0.0, 0.0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&body);
    out
}
