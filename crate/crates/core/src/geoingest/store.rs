//! Local raster store: PGM/PPM images with sidecar world files.

use std::fs;
use std::path::{Path, PathBuf};

use super::georef::GeoRef;
use super::window::{Rect, SampleWindow};
use crate::error::{Error, Result};
use crate::raster::{self, Image};

/// Coordinates within this many pixels of an integer are snapped, so aligned
/// windows resample exactly.
const SNAP: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct StoredRaster {
    /// Path (or logical name) used for tie-breaking.
    pub name: String,
    pub image: Image,
    pub georef: GeoRef,
}

impl StoredRaster {
    /// World extent of the pixel-edge footprint.
    pub fn extent(&self) -> Rect {
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        let corners = [(-0.5, -0.5), (w - 0.5, -0.5), (-0.5, h - 0.5), (w - 0.5, h - 0.5)];
        let pts: Vec<(f64, f64)> = corners.iter().map(|&(c, r)| self.georef.pixel_to_world(c, r)).collect();
        Rect {
            xmin: pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
            ymin: pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
            xmax: pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
            ymax: pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn covers(&self, area: &Rect) -> bool {
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        let tol = 1e-6;
        [
            (area.xmin, area.ymin),
            (area.xmax, area.ymin),
            (area.xmin, area.ymax),
            (area.xmax, area.ymax),
        ]
        .iter()
        .all(|&(x, y)| match self.georef.world_to_pixel(x, y) {
            Ok((c, r)) => c >= -0.5 - tol && c <= w - 0.5 + tol && r >= -0.5 - tol && r <= h - 0.5 + tol,
            Err(_) => false,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RasterStore {
    rasters: Vec<StoredRaster>,
}

fn world_file_candidates(path: &Path) -> Vec<PathBuf> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let mut out = Vec::new();
    if ext.len() >= 2 {
        let b = ext.as_bytes();
        out.push(path.with_extension(format!("{}{}w", b[0] as char, b[1] as char)));
    }
    out.push(path.with_extension("wld"));
    out
}

/// Sidecar world-file path for a raster (`x.pgm` → `x.pgw`, `x.ppm` → `x.ppw`).
pub fn world_file_path(path: &Path) -> PathBuf {
    world_file_candidates(path).remove(0)
}

impl RasterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rasters(rasters: Vec<StoredRaster>) -> Self {
        Self { rasters }
    }

    pub fn push(&mut self, raster: StoredRaster) {
        self.rasters.push(raster);
    }

    pub fn rasters(&self) -> &[StoredRaster] {
        &self.rasters
    }

    pub fn len(&self) -> usize {
        self.rasters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rasters.is_empty()
    }

    /// Load every `.pgm`/`.ppm` in `dir` (non-recursive).
    pub fn open(dir: &Path) -> Result<Self> {
        let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<PathBuf> = listing
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension()
                        .and_then(|e| e.to_str())
                        .map(str::to_ascii_lowercase)
                        .as_deref(),
                    Some("pgm") | Some("ppm")
                )
            })
            .collect();
        paths.sort();
        let mut rasters = Vec::with_capacity(paths.len());
        for path in paths {
            let wf = world_file_candidates(&path)
                .into_iter()
                .find(|p| p.exists())
                .ok_or_else(|| Error::Format(format!("{} has no sidecar world file", path.display())))?;
            let text = fs::read_to_string(&wf).map_err(|e| Error::io(&wf, e))?;
            let georef = GeoRef::from_world_file(&text).map_err(|e| Error::Format(format!("{}: {e}", wf.display())))?;
            rasters.push(StoredRaster {
                name: path.to_string_lossy().into_owned(),
                image: raster::read_pnm(&path)?,
                georef,
            });
        }
        Ok(Self { rasters })
    }

    /// Write each raster as `<dir>/<file name of its name>` plus world file.
    pub fn write(&self, dir: &Path, comments: &[String]) -> Result<()> {
        for r in &self.rasters {
            let file = Path::new(&r.name)
                .file_name()
                .ok_or_else(|| Error::Format(format!("raster name {:?} has no file name", r.name)))?;
            let path = dir.join(file);
            raster::write_bytes(&path, &raster::encode_pnm(&r.image, comments)?)?;
            raster::write_bytes(&world_file_path(&path), r.georef.to_world_file().as_bytes())?;
        }
        Ok(())
    }

    /// Highest-resolution raster fully covering `area`; ties go to the
    /// lexicographically smallest name.
    pub fn select(&self, area: &Rect) -> Option<&StoredRaster> {
        self.rasters.iter().filter(|r| r.covers(area)).min_by(|a, b| {
            a.georef
                .pixel_area()
                .total_cmp(&b.georef.pixel_area())
                .then_with(|| a.name.cmp(&b.name))
        })
    }

    fn gap_report(&self, area: &Rect) -> String {
        let overlap = |e: &Rect| {
            let w = (e.xmax.min(area.xmax) - e.xmin.max(area.xmin)).max(0.0);
            let h = (e.ymax.min(area.ymax) - e.ymin.max(area.ymin)).max(0.0);
            w * h
        };
        let head = format!(
            "window [{}, {}, {}, {}] not covered by any raster",
            area.xmin, area.ymin, area.xmax, area.ymax
        );
        let best = self
            .rasters
            .iter()
            .map(|r| (r, r.extent()))
            .filter(|(_, e)| overlap(e) > 0.0)
            .max_by(|a, b| overlap(&a.1).total_cmp(&overlap(&b.1)));
        match best {
            None => format!("{head}; no raster intersects it"),
            Some((r, e)) => {
                let strips = [
                    ("west", e.xmin - area.xmin),
                    ("east", area.xmax - e.xmax),
                    ("south", e.ymin - area.ymin),
                    ("north", area.ymax - e.ymax),
                ];
                let gaps: Vec<String> = strips
                    .iter()
                    .filter(|(_, d)| *d > 0.0)
                    .map(|(side, d)| format!("{side} {d:.3} m"))
                    .collect();
                format!("{head}; nearest {} leaves gap {}", r.name, gaps.join(", "))
            }
        }
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Resample the window (bilinear) from the best covering raster; output is
/// always 3 channels in `[0,1]`.
pub fn extract_tile(store: &RasterStore, window: &SampleWindow) -> Result<(Image, GeoRef)> {
    let area = window.bounds();
    let src = store
        .select(&area)
        .ok_or_else(|| Error::Coverage(store.gap_report(&area)))?;
    let n = window.resolution;
    let mut out = Image::new(src.image.channels, n, n);
    for row in 0..n {
        for col in 0..n {
            let (x, y) = window.pixel_center(row, col);
            let (c, r) = src.georef.world_to_pixel(x, y)?;
            let (c, r) = (snap(c), snap(r));
            for ch in 0..src.image.channels {
                out.set(ch, row, col, src.image.sample_bilinear(ch, r, c));
            }
        }
    }
    let mut out = if out.channels == 1 { out.replicate(3) } else { out };
    out.clamp01();
    Ok((out, window.georef()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster(name: &str, img: Image, px: f64, x0: f64, y0: f64) -> StoredRaster {
        // (x0, y0) = top-left corner of the footprint
        StoredRaster {
            name: name.into(),
            image: img,
            georef: GeoRef::north_up(px, x0 + px / 2.0, y0 - px / 2.0).unwrap(),
        }
    }

    #[test]
    fn aligned_window_is_exact_crop() {
        let data: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let img = Image::from_vec(3, 32, 32, data).unwrap();
        let store = RasterStore::from_rasters(vec![raster("a.ppm", img.clone(), 10.0, 0.0, 320.0)]);
        // 16-pixel window whose top-left pixel is raster (row 4, col 8)
        let w = SampleWindow::new((80.0 + 80.0, 320.0 - 40.0 - 80.0), 160.0, 16).unwrap();
        let (tile, _) = extract_tile(&store, &w).unwrap();
        assert_eq!(tile, img.crop(4, 8, 16, 16));
    }

    #[test]
    fn constant_raster_constant_output() {
        let img = Image::filled(1, 20, 20, 0.4);
        let store = RasterStore::from_rasters(vec![raster("a.pgm", img, 7.0, 0.0, 140.0)]);
        let w = SampleWindow::new((70.0, 70.0), 100.0, 9).unwrap();
        let (tile, _) = extract_tile(&store, &w).unwrap();
        assert_eq!(tile.channels, 3);
        assert!(tile.data.iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn checkerboard_downsample_is_half() {
        let mut img = Image::new(1, 16, 16);
        for r in 0..16 {
            for c in 0..16 {
                img.set(0, r, c, ((r + c) % 2) as f64);
            }
        }
        let store = RasterStore::from_rasters(vec![raster("a.pgm", img, 1.0, 0.0, 16.0)]);
        let w = SampleWindow::new((8.0, 8.0), 16.0, 8).unwrap();
        let (tile, _) = extract_tile(&store, &w).unwrap();
        assert!(tile.data.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn finer_raster_wins_then_name() {
        let coarse = raster("a.pgm", Image::filled(1, 10, 10, 0.1), 20.0, 0.0, 200.0);
        let fine = raster("z.pgm", Image::filled(1, 40, 40, 0.9), 5.0, 0.0, 200.0);
        let fine_b = raster("m.pgm", Image::filled(1, 40, 40, 0.5), 5.0, 0.0, 200.0);
        let store = RasterStore::from_rasters(vec![coarse, fine, fine_b]);
        let w = SampleWindow::new((100.0, 100.0), 100.0, 8).unwrap();
        assert_eq!(store.select(&w.bounds()).unwrap().name, "m.pgm");
        assert_eq!(extract_tile(&store, &w).unwrap().0.get(0, 0, 0), 0.5);
    }

    #[test]
    fn uncovered_window_reports_gap() {
        let store = RasterStore::from_rasters(vec![raster("a.pgm", Image::filled(1, 10, 10, 0.1), 10.0, 0.0, 100.0)]);
        let w = SampleWindow::new((90.0, 50.0), 40.0, 8).unwrap();
        match extract_tile(&store, &w) {
            Err(Error::Coverage(msg)) => assert!(msg.contains("east 10.000 m"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(3, 4, 6, 100.0 / 255.0);
        let store = RasterStore::from_rasters(vec![raster("r1.ppm", img.clone(), 2.5, 10.0, 20.0)]);
        store.write(dir.path(), &[]).unwrap();
        assert!(dir.path().join("r1.ppw").exists());
        let back = RasterStore::open(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.rasters()[0].image, img);
        assert_eq!(back.rasters()[0].georef, store.rasters()[0].georef);
    }

    #[test]
    fn missing_world_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = raster::encode_pnm(&Image::filled(1, 2, 2, 0.0), &[]).unwrap();
        raster::write_bytes(&dir.path().join("x.pgm"), &bytes).unwrap();
        assert!(matches!(RasterStore::open(dir.path()), Err(Error::Format(_))));
    }
}
