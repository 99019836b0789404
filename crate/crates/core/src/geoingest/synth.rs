//! Desk-scale synthetic imagery: bright elliptical mounds with soft
//! shoulders over correlated noise, plus matching site polygons.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::{
    assemble_dataset, write_sample, DatasetManifest, SampleRecord, Source, TileSample, DEFAULT_FRACTIONS,
};
use super::georef::GeoRef;
use super::shape::{emit_sites, SiteShape, Vertex};
use super::store::{extract_tile, RasterStore, StoredRaster};
use super::window::{rasterize_with_cover, SampleWindow, DEFAULT_SIDE_M};
use crate::error::{Error, Result};
use crate::raster::{self, Image};
use crate::seed;

/// Normalized radius where the mound starts to fall off / reaches background.
const SHOULDER_IN: f64 = 0.85;
const SHOULDER_OUT: f64 = 1.15;
const POLYGON_VERTICES: usize = 32;
/// Coarse noise lattice cells per raster side.
const NOISE_CELLS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    /// Colour tiles tagged SYNTHETIC.
    Synthetic,
    /// Colour tiles tagged BING.
    Bing,
    /// Single-band tiles tagged CORONA.
    Corona,
    /// Alternating BING and CORONA tiles.
    Mixed,
}

impl FromStr for Flavor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "synthetic" => Ok(Flavor::Synthetic),
            "bing" => Ok(Flavor::Bing),
            "corona" => Ok(Flavor::Corona),
            "mixed" => Ok(Flavor::Mixed),
            _ => Err(Error::Config(format!("unknown synthetic flavor {s:?}"))),
        }
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flavor::Synthetic => "synthetic",
            Flavor::Bing => "bing",
            Flavor::Corona => "corona",
            Flavor::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub tiles: usize,
    pub positive_fraction: f64,
    pub resolution: usize,
    pub side: f64,
    /// Semi-axis range in meters.
    pub blob_radius: (f64, f64),
    pub noise_level: f64,
    pub flavor: Flavor,
    pub max_blobs: usize,
    /// World position of the first tile centre.
    pub origin: Vertex,
    pub fractions: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tiles: 208,
            positive_fraction: 88.0 / 208.0,
            resolution: 64,
            side: DEFAULT_SIDE_M,
            blob_radius: (150.0, 350.0),
            noise_level: 0.06,
            flavor: Flavor::Synthetic,
            max_blobs: 2,
            origin: (4_900_000.0, 3_940_000.0),
            fractions: DEFAULT_FRACTIONS,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config(format!(
                "positive_fraction {} outside [0, 1]",
                self.positive_fraction
            )));
        }
        let (lo, hi) = self.blob_radius;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("blob radius range ({lo}, {hi}) is invalid")));
        }
        if hi * SHOULDER_OUT >= self.side / 2.0 {
            return Err(Error::Config(format!(
                "blob radius {hi} m does not fit a {} m window",
                self.side
            )));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::Config("noise level must be ≥ 0".into()));
        }
        if self.max_blobs == 0 {
            return Err(Error::Config("max_blobs must be ≥ 1".into()));
        }
        SampleWindow::new(self.origin, self.side, self.resolution)?;
        Ok(())
    }

    pub fn positives(&self) -> usize {
        (self.tiles as f64 * self.positive_fraction).round() as usize
    }

    fn source_for(&self, tile: usize) -> Source {
        match self.flavor {
            Flavor::Synthetic => Source::Synthetic,
            Flavor::Bing => Source::Bing,
            Flavor::Corona => Source::Corona,
            Flavor::Mixed if tile.is_multiple_of(2) => Source::Bing,
            Flavor::Mixed => Source::Corona,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Blob {
    center: Vertex,
    a: f64,
    b: f64,
    theta: f64,
}

impl Blob {
    fn rho(&self, p: Vertex) -> f64 {
        let (dx, dy) = (p.0 - self.center.0, p.1 - self.center.1);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    fn profile(&self, p: Vertex) -> f64 {
        let t = ((SHOULDER_OUT - self.rho(p)) / (SHOULDER_OUT - SHOULDER_IN)).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }

    fn polygon(&self, id: String) -> Result<SiteShape> {
        let (s, c) = self.theta.sin_cos();
        let cm = |v: f64| (v * 100.0).round() / 100.0;
        let mut ring: Vec<Vertex> = (0..POLYGON_VERTICES)
            .map(|k| {
                let phi = 2.0 * PI * k as f64 / POLYGON_VERTICES as f64;
                let (u, v) = (self.a * phi.cos(), self.b * phi.sin());
                (cm(self.center.0 + u * c - v * s), cm(self.center.1 + u * s + v * c))
            })
            .collect();
        ring.push(ring[0]);
        SiteShape::new(id, vec![ring])
    }
}

fn colors(source: Source) -> (Vec<f64>, Vec<f64>) {
    match source {
        Source::Corona => (vec![0.42], vec![0.82]),
        _ => (vec![0.40, 0.43, 0.33], vec![0.80, 0.74, 0.60]),
    }
}

/// In-memory synthetic dataset.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub store: RasterStore,
    pub sites: Vec<SiteShape>,
    pub tiles: Vec<TileSample>,
    pub windows: Vec<SampleWindow>,
}

fn place_blobs<R: Rng>(cfg: &SynthConfig, center: Vertex, rng: &mut R) -> Vec<Blob> {
    let (lo, hi) = cfg.blob_radius;
    let px = cfg.side / cfg.resolution as f64;
    let mut blobs: Vec<Blob> = Vec::new();
    let wanted = if cfg.max_blobs > 1 && rng.random_bool(0.25) {
        2
    } else {
        1
    };
    for _ in 0..20 {
        if blobs.len() == wanted.min(cfg.max_blobs) {
            break;
        }
        let a = rng.random_range(lo..=hi);
        let b = rng.random_range(lo..=hi);
        let theta = rng.random_range(0.0..PI);
        let reach = a.max(b) * SHOULDER_OUT + px;
        let slack = (cfg.side / 2.0 - reach).max(0.0);
        let cx = center.0 + rng.random_range(-slack..=slack);
        let cy = center.1 + rng.random_range(-slack..=slack);
        let blob = Blob {
            center: (cx, cy),
            a,
            b,
            theta,
        };
        let clear = blobs.iter().all(|o| {
            let d = ((o.center.0 - cx).powi(2) + (o.center.1 - cy).powi(2)).sqrt();
            d > (o.a.max(o.b) + a.max(b)) * SHOULDER_OUT + 2.0 * px
        });
        if clear {
            blobs.push(blob);
        }
    }
    blobs
}

fn render_raster<R: Rng>(
    cfg: &SynthConfig,
    center: Vertex,
    source: Source,
    blobs: &[Blob],
    rng: &mut R,
) -> Result<StoredRaster> {
    let n = 2 * cfg.resolution;
    let px = cfg.side / cfg.resolution as f64;
    let georef = GeoRef::north_up(px, center.0 - cfg.side + px / 2.0, center.1 + cfg.side - px / 2.0)?;
    let (base, mound) = colors(source);
    let channels = base.len();

    let mut coarse = Image::new(1, NOISE_CELLS, NOISE_CELLS);
    for v in &mut coarse.data {
        *v = StandardNormal.sample(rng);
    }
    let coarse = coarse.resize_bilinear(n, n);
    let mut img = Image::new(channels, n, n);
    for row in 0..n {
        for col in 0..n {
            let p = georef.pixel_to_world(col as f64, row as f64);
            let prof = blobs.iter().map(|b| b.profile(p)).fold(0.0, f64::max);
            let fine: f64 = StandardNormal.sample(rng);
            let noise = cfg.noise_level * (0.7 * coarse.get(0, row, col) + 0.3 * fine);
            for ch in 0..channels {
                let v = base[ch] * (1.0 - prof) + mound[ch] * prof + noise;
                img.set(ch, row, col, f64::from(raster::to_byte(v)) / 255.0);
            }
        }
    }
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    Ok(StoredRaster {
        name: String::new() + ext,
        image: img,
        georef,
    })
}

fn tile_id(i: usize) -> String {
    format!("SYN.{:04}", i + 1)
}

/// Generate `config.tiles` tiles; each lives in its own padded raster of
/// twice the window side.
pub fn synth_generate(config: &SynthConfig, seed_value: u64) -> Result<SynthDataset> {
    config.validate()?;
    let positives = config.positives();
    let mut labels: Vec<bool> = (0..config.tiles).map(|i| i < positives).collect();
    labels.shuffle(&mut seed::stream(seed_value, "synth.layout"));

    let cols = (config.tiles as f64).sqrt().ceil().max(1.0) as usize;
    let spacing = 2.5 * config.side;
    let mut store = RasterStore::new();
    let mut sites = Vec::new();
    let mut windows = Vec::with_capacity(config.tiles);
    let mut sources = Vec::with_capacity(config.tiles);
    for (i, &positive) in labels.iter().enumerate() {
        let id = tile_id(i);
        let mut rng = seed::item_stream(seed_value, "synth.tile", &id);
        let center = (
            config.origin.0 + (i % cols) as f64 * spacing,
            config.origin.1 - (i / cols) as f64 * spacing,
        );
        let blobs = if positive {
            place_blobs(config, center, &mut rng)
        } else {
            Vec::new()
        };
        for b in &blobs {
            sites.push(b.polygon(format!("GHR.{:03}", sites.len() + 1))?);
        }
        let source = config.source_for(i);
        let mut raster = render_raster(config, center, source, &blobs, &mut rng)?;
        raster.name = format!("{id}.{}", raster.name);
        store.push(raster);
        windows.push(SampleWindow::new(center, config.side, config.resolution)?);
        sources.push(source);
    }

    let mut tiles = Vec::with_capacity(config.tiles);
    for (i, w) in windows.iter().enumerate() {
        let (image, georef) = extract_tile(&store, w)?;
        let (mask, covered) = rasterize_with_cover(&sites, w);
        let tile = TileSample::new(tile_id(i), image, mask, georef, sources[i], covered)?;
        if tile.label != labels[i] {
            return Err(Error::Data(format!(
                "{}: generated mound rasterizes to an empty mask",
                tile.id
            )));
        }
        tiles.push(tile);
    }
    Ok(SynthDataset {
        config: config.clone(),
        seed: seed_value,
        store,
        sites,
        tiles,
        windows,
    })
}

impl SynthDataset {
    pub fn records(&self) -> Vec<(bool, SampleRecord)> {
        self.tiles
            .iter()
            .zip(&self.windows)
            .map(|(t, w)| {
                (
                    t.label,
                    SampleRecord {
                        id: t.id.clone(),
                        image_path: format!("tiles/{}.ppm", t.id),
                        mask_path: format!("tiles/{}_mask.pgm", t.id),
                        source: t.source,
                        center: w.center,
                    },
                )
            })
            .collect()
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let (pos, neg): (Vec<_>, Vec<_>) = self.records().into_iter().partition(|(l, _)| *l);
        let strip = |v: Vec<(bool, SampleRecord)>| v.into_iter().map(|(_, r)| r).collect::<Vec<_>>();
        assemble_dataset(&strip(pos), &strip(neg), self.config.fractions, self.seed)
    }

    /// Write `store/`, `sites.txt`, `tiles/` and `manifest.tsv` under `dir`.
    pub fn write(&self, dir: &Path, comments: &[String], meta: &[(String, String)]) -> Result<DatasetManifest> {
        self.store.write(&dir.join("store"), comments)?;
        raster::write_bytes(&dir.join("sites.txt"), emit_sites(&self.sites).as_bytes())?;
        for (t, w) in self.tiles.iter().zip(&self.windows) {
            write_sample(dir, t, w.center, comments)?;
        }
        let mut manifest = self.manifest()?;
        manifest.meta.extend_from_slice(meta);
        manifest.write(&dir.join("manifest.tsv"))?;
        Ok(manifest)
    }
}
