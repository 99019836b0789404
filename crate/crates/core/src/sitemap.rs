//! Heatmap export, candidate extraction and the site registry.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, SystemTime};

use crate::components;
use crate::error::{Error, Result};
use crate::geoingest::{world_file_path, GeoRef};
use crate::metrics::binarize;
use crate::raster::{encode_pnm, write_bytes, Image};

pub const DEFAULT_DEDUPE_M: f64 = 250.0;

/// Probability map of one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub prob: Image,
    pub georef: GeoRef,
    pub window_id: String,
    pub lineage: String,
}

impl Heatmap {
    pub fn new(prob: Image, georef: GeoRef, window_id: impl Into<String>, lineage: impl Into<String>) -> Result<Self> {
        if prob.channels != 1 {
            return Err(Error::shape(
                "heatmap",
                format!("expected 1 band, got {}", prob.channels),
            ));
        }
        if let Some(v) = prob.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("heatmap value {v} outside [0, 1]")));
        }
        georef.validate()?;
        Ok(Self {
            prob,
            georef,
            window_id: window_id.into(),
            lineage: lineage.into(),
        })
    }
}

/// Blue→red ramp: red rises with `p`, blue falls, green peaks at 0.5.
pub fn palette(p: f64) -> [f64; 3] {
    let p = p.clamp(0.0, 1.0);
    [p, 0.5 * (1.0 - (2.0 * p - 1.0).abs()), 1.0 - p]
}

pub fn heatmap_image(h: &Heatmap) -> Image {
    let (rows, cols) = (h.prob.height, h.prob.width);
    let mut img = Image::new(3, rows, cols);
    for (i, &p) in h.prob.data.iter().enumerate() {
        for (c, v) in palette(p).into_iter().enumerate() {
            img.data[c * rows * cols + i] = v;
        }
    }
    img
}

/// Write `<dir>/<window_id>_heat.ppm` and its world file.
pub fn render_heatmap(h: &Heatmap, dir: &Path, comments: &[String]) -> Result<(PathBuf, PathBuf)> {
    let path = dir.join(format!("{}_heat.ppm", h.window_id));
    let mut notes = comments.to_vec();
    notes.push(format!("window={} model={}", h.window_id, h.lineage));
    write_bytes(&path, &encode_pnm(&heatmap_image(h), &notes)?)?;
    let world = world_file_path(&path);
    write_bytes(&world, h.georef.to_world_file().as_bytes())?;
    Ok((path, world))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Status {
    Predicted,
    Confirmed,
    Rejected,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Predicted => "PREDICTED",
            Status::Confirmed => "CONFIRMED",
            Status::Rejected => "REJECTED",
        })
    }
}

impl FromStr for Status {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PREDICTED" => Ok(Status::Predicted),
            "CONFIRMED" => Ok(Status::Confirmed),
            "REJECTED" => Ok(Status::Rejected),
            _ => Err(Error::Format(format!("unknown status {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Ai,
    RemoteSensing,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Ai => "AI",
            Provenance::RemoteSensing => "REMOTE_SENSING",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AI" => Ok(Provenance::Ai),
            "REMOTE_SENSING" => Ok(Provenance::RemoteSensing),
            _ => Err(Error::Format(format!("unknown provenance {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteCandidate {
    pub id: String,
    /// EPSG:3857 meters.
    pub centroid: (f64, f64),
    pub area_m2: f64,
    pub peak: f64,
    pub status: Status,
    pub provenance: Provenance,
}

impl SiteCandidate {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(char::is_whitespace) {
            return Err(Error::Contract(format!("bad candidate id {:?}", self.id)));
        }
        if !(self.area_m2 > 0.0) || !(self.peak > 0.0 && self.peak <= 1.0) {
            return Err(Error::Contract(format!(
                "{}: area {} and peak {} must be positive (peak ≤ 1)",
                self.id, self.area_m2, self.peak
            )));
        }
        if !(self.centroid.0.is_finite() && self.centroid.1.is_finite()) {
            return Err(Error::Contract(format!("{}: centroid not finite", self.id)));
        }
        Ok(())
    }

    fn distance(&self, o: &SiteCandidate) -> f64 {
        (self.centroid.0 - o.centroid.0).hypot(self.centroid.1 - o.centroid.1)
    }
}

/// Components of the binarized map whose ground area reaches `min_area_m2`,
/// sorted by peak probability (highest first). Ids are
/// `<window_id>.C<rank>`.
pub fn extract_candidates(h: &Heatmap, threshold: f64, min_area_m2: f64) -> Result<Vec<SiteCandidate>> {
    let mask = binarize(&h.prob, threshold)?;
    let px_area = h.georef.pixel_area();
    let mut out = Vec::new();
    for comp in components::components(&mask) {
        let area = comp.area_px() as f64 * px_area;
        if area < min_area_m2 || area <= 0.0 {
            continue;
        }
        let n = comp.area_px() as f64;
        let (sr, sc) = comp
            .pixels
            .iter()
            .fold((0.0, 0.0), |(r, c), &(pr, pc)| (r + pr as f64, c + pc as f64));
        let peak = comp
            .pixels
            .iter()
            .map(|&(r, c)| h.prob.get(0, r, c))
            .fold(0.0, f64::max);
        if peak <= 0.0 {
            continue;
        }
        out.push(SiteCandidate {
            id: String::new(),
            centroid: h.georef.pixel_to_world(sc / n, sr / n),
            area_m2: area,
            peak,
            status: Status::Predicted,
            provenance: Provenance::Ai,
        });
    }
    out.sort_by(|a, b| b.peak.total_cmp(&a.peak));
    for (k, c) in out.iter_mut().enumerate() {
        c.id = format!("{}.C{:02}", h.window_id, k + 1);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEvent {
    /// RFC 3339, UTC seconds.
    pub timestamp: String,
    pub action: String,
    pub id: String,
    pub detail: String,
}

/// Deduplicated candidates with an append-only audit log.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    pub dedupe_distance: f64,
    entries: Vec<SiteCandidate>,
    audit: Vec<AuditEvent>,
}

pub fn timestamp(unix_seconds: u64) -> String {
    humantime::format_rfc3339_seconds(SystemTime::UNIX_EPOCH + Duration::from_secs(unix_seconds)).to_string()
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Single-linkage clusters at `distance`; each cluster is a list of input
/// indices in input order, clusters ordered by their first member.
pub fn single_linkage(items: &[SiteCandidate], distance: f64) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..items.len()).collect();
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            if items[i].distance(&items[j]) <= distance {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; items.len()];
    for i in 0..items.len() {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[slot[r]].push(i);
    }
    clusters
}

impl Registry {
    pub fn new(dedupe_distance: f64) -> Self {
        Self {
            dedupe_distance,
            entries: Vec::new(),
            audit: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[SiteCandidate] {
        &self.entries
    }

    pub fn audit(&self) -> &[AuditEvent] {
        &self.audit
    }

    pub fn get(&self, id: &str) -> Option<&SiteCandidate> {
        self.entries.iter().find(|e| e.id == id)
    }

    fn log(&mut self, ts: &str, action: &str, id: &str, detail: String) {
        self.audit.push(AuditEvent {
            timestamp: ts.to_string(),
            action: action.to_string(),
            id: id.to_string(),
            detail,
        });
    }

    /// Cluster existing entries together with `candidates`. Each cluster
    /// keeps its highest-peak member (ties: earliest); a verified status
    /// already present in the cluster is carried over. Entries end up sorted
    /// by peak, then id.
    pub fn merge(&mut self, candidates: &[SiteCandidate], unix_seconds: u64) -> Result<()> {
        for c in candidates {
            c.validate()?;
        }
        let ts = timestamp(unix_seconds);
        let before: Vec<SiteCandidate> = self.entries.clone();
        let mut pool = before.clone();
        pool.extend(candidates.iter().cloned());
        let mut merged = Vec::new();
        let mut events = Vec::new();
        for cluster in single_linkage(&pool, self.dedupe_distance) {
            let mut rep = cluster[0];
            for &i in &cluster[1..] {
                if pool[i].peak > pool[rep].peak {
                    rep = i;
                }
            }
            let mut entry = pool[rep].clone();
            if let Some(v) = cluster
                .iter()
                .map(|&i| &pool[i])
                .find(|c| c.status != Status::Predicted)
            {
                entry.status = v.status;
            }
            if cluster.len() > 1 {
                let others: Vec<&str> = cluster
                    .iter()
                    .filter(|&&i| i != rep)
                    .map(|&i| pool[i].id.as_str())
                    .collect();
                let detail = format!("absorbed {}", others.join(","));
                events.push(("MERGE", entry.id.clone(), detail));
            } else if !before.iter().any(|b| b.id == entry.id) {
                let detail = format!("x={} y={} peak={}", entry.centroid.0, entry.centroid.1, entry.peak);
                events.push(("ADD", entry.id.clone(), detail));
            }
            merged.push(entry);
        }
        merged.sort_by(|a, b| b.peak.total_cmp(&a.peak).then_with(|| a.id.cmp(&b.id)));
        let mut seen = std::collections::HashSet::new();
        for e in &merged {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Contract(format!("duplicate registry id {}", e.id)));
            }
        }
        for (action, id, detail) in events {
            self.log(&ts, action, &id, detail);
        }
        self.entries = merged;
        Ok(())
    }

    /// Field verification: PREDICTED → CONFIRMED or REJECTED.
    pub fn update(&mut self, id: &str, status: Status, unix_seconds: u64) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Lookup(id.to_string()))?;
        if entry.status != Status::Predicted || status == Status::Predicted {
            return Err(Error::State(format!(
                "{id}: {} → {status} is not allowed",
                entry.status
            )));
        }
        let from = entry.status;
        entry.status = status;
        self.log(&timestamp(unix_seconds), "UPDATE", id, format!("{from}->{status}"));
        Ok(())
    }

    /// `(predicted, confirmed, rejected)`
    pub fn counts(&self) -> (usize, usize, usize) {
        let n = |s: Status| self.entries.iter().filter(|e| e.status == s).count();
        (n(Status::Predicted), n(Status::Confirmed), n(Status::Rejected))
    }

    pub fn export(&self) -> String {
        let mut s = String::from("#id\tx\ty\tarea_m2\tpeak\tstatus\tprovenance\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.id, e.centroid.0, e.centroid.1, e.area_m2, e.peak, e.status, e.provenance
            );
        }
        s
    }

    pub fn audit_text(&self) -> String {
        let mut s = String::new();
        for e in &self.audit {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", e.timestamp, e.action, e.id, e.detail);
        }
        s
    }

    /// Registry from an export and its audit log.
    pub fn parse(export: &str, audit: &str, dedupe_distance: f64) -> Result<Self> {
        let mut entries = Vec::new();
        for line in export.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!("registry line needs 7 fields: {line:?}")));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("registry value {s:?} is not a number")))
            };
            let c = SiteCandidate {
                id: f[0].to_string(),
                centroid: (num(f[1])?, num(f[2])?),
                area_m2: num(f[3])?,
                peak: num(f[4])?,
                status: f[5].parse()?,
                provenance: f[6].parse()?,
            };
            c.validate()?;
            entries.push(c);
        }
        let mut events = Vec::new();
        for line in audit.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let f: Vec<&str> = line.splitn(4, '\t').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("audit line needs 4 fields: {line:?}")));
            }
            events.push(AuditEvent {
                timestamp: f[0].to_string(),
                action: f[1].to_string(),
                id: f[2].to_string(),
                detail: f[3].to_string(),
            });
        }
        Ok(Self {
            dedupe_distance,
            entries,
            audit: events,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: &str, x: f64, y: f64, peak: f64) -> SiteCandidate {
        SiteCandidate {
            id: id.into(),
            centroid: (x, y),
            area_m2: 5000.0,
            peak,
            status: Status::Predicted,
            provenance: Provenance::Ai,
        }
    }

    #[test]
    fn palette_is_monotone_in_red() {
        let mut last = -1.0;
        for i in 0..=100 {
            let r = palette(i as f64 / 100.0)[0];
            assert!(r >= last);
            last = r;
        }
        assert_eq!(palette(0.0), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn close_candidates_merge() {
        let mut r = Registry::new(DEFAULT_DEDUPE_M);
        r.merge(&[cand("a", 0.0, 0.0, 0.7), cand("b", 100.0, 0.0, 0.9)], 0)
            .unwrap();
        assert_eq!(r.entries().len(), 1);
        assert_eq!(r.entries()[0].id, "b");
        assert_eq!(r.audit()[0].action, "MERGE");
    }

    #[test]
    fn transitions() {
        let mut r = Registry::new(DEFAULT_DEDUPE_M);
        r.merge(&[cand("a", 0.0, 0.0, 0.7)], 0).unwrap();
        assert!(matches!(r.update("zz", Status::Confirmed, 1), Err(Error::Lookup(_))));
        r.update("a", Status::Rejected, 1).unwrap();
        assert!(matches!(r.update("a", Status::Confirmed, 2), Err(Error::State(_))));
        assert_eq!(r.counts(), (0, 0, 1));
        assert_eq!(r.audit().last().unwrap().timestamp, "1970-01-01T00:00:01Z");
    }

    #[test]
    fn export_round_trip() {
        let mut r = Registry::new(DEFAULT_DEDUPE_M);
        r.merge(&[cand("a", 4910150.9, 3931922.3, 0.7), cand("b", 0.0, 0.0, 0.2)], 5)
            .unwrap();
        r.update("b", Status::Confirmed, 6).unwrap();
        let back = Registry::parse(&r.export(), &r.audit_text(), DEFAULT_DEDUPE_M).unwrap();
        assert_eq!(back, r);
    }
}
