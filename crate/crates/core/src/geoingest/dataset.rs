//! Tile samples, stratified splits, the manifest file, and the ingest
//! pipeline that turns a store plus site list into a dataset on disk.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::georef::GeoRef;
use super::shape::{SiteShape, Vertex};
use super::store::{extract_tile, world_file_path, RasterStore};
use super::window::{make_window, rasterize_with_cover, sample_negatives_where, Rect, SampleWindow};
use crate::error::{Error, Result};
use crate::raster::{self, Image, Mask};
use crate::seed;

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.75, 0.15, 0.10];
const MANIFEST_TAG: &str = "#tellscan-manifest";
const COLUMNS: &str = "id\tsplit\tlabel\timage\tmask\tsource\tcenter_x\tcenter_y";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Bing,
    Corona,
    Synthetic,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Bing => "BING",
            Source::Corona => "CORONA",
            Source::Synthetic => "SYNTHETIC",
        })
    }
}

impl FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BING" => Ok(Source::Bing),
            "CORONA" => Ok(Source::Corona),
            "SYNTHETIC" => Ok(Source::Synthetic),
            _ => Err(Error::Format(format!("unknown source {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TRAIN" => Ok(Split::Train),
            "VAL" => Ok(Split::Val),
            "TEST" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileSample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub georef: GeoRef,
    pub source: Source,
    pub label: bool,
    pub covered_sites: Vec<String>,
}

impl TileSample {
    /// Label is derived from the mask.
    pub fn new(
        id: impl Into<String>,
        image: Image,
        mask: Mask,
        georef: GeoRef,
        source: Source,
        covered_sites: Vec<String>,
    ) -> Result<Self> {
        let id = id.into();
        if image.channels != 3 {
            return Err(Error::Contract(format!(
                "{id}: tile has {} channels, need 3",
                image.channels
            )));
        }
        if (image.height, image.width) != (mask.height, mask.width) {
            return Err(Error::Contract(format!(
                "{id}: image {}×{} vs mask {}×{}",
                image.height, image.width, mask.height, mask.width
            )));
        }
        if mask.data.iter().any(|&v| v > 1) {
            return Err(Error::Contract(format!("{id}: mask is not binary")));
        }
        let label = mask.popcount() > 0;
        Ok(Self {
            id,
            image,
            mask,
            georef,
            source,
            label,
            covered_sites,
        })
    }
}

/// A sample before split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub source: Source,
    pub center: Vertex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub label: bool,
    pub image_path: String,
    pub mask_path: String,
    pub source: Source,
    pub center: Vertex,
}

/// Counts indexed `[split][label as usize]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SplitCounts(pub [[usize; 2]; 3]);

impl SplitCounts {
    pub fn split_total(&self, split: Split) -> usize {
        self.0[split.index()].iter().sum()
    }

    pub fn get(&self, split: Split, label: bool) -> usize {
        self.0[split.index()][usize::from(label)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub fractions: [f64; 3],
    /// Extra `key=value` header fields (values without whitespace).
    pub meta: Vec<(String, String)>,
}

pub fn validate_fractions(fractions: [f64; 3]) -> Result<()> {
    for f in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("split fraction {f} outside [0, 1]")));
        }
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {sum}, need 1")));
    }
    Ok(())
}

/// Cumulative split boundaries `[b_train, b_train+val]` for `n` items.
fn boundaries(n: usize, fractions: [f64; 3]) -> [usize; 2] {
    let cum = |f: f64| ((n as f64 * f - 1e-9).ceil().max(0.0) as usize).min(n);
    let b1 = cum(fractions[0]);
    let b2 = cum(fractions[0] + fractions[1]).max(b1);
    [b1, b2]
}

fn split_of(rank: usize, bounds: [usize; 2]) -> Split {
    if rank < bounds[0] {
        Split::Train
    } else if rank < bounds[1] {
        Split::Val
    } else {
        Split::Test
    }
}

/// Stratified split: overall split sizes follow the cumulative-ceiling
/// rule, positives follow it within their class, negatives take the rest.
pub fn assemble_dataset(
    positives: &[SampleRecord],
    negatives: &[SampleRecord],
    fractions: [f64; 3],
    seed_value: u64,
) -> Result<DatasetManifest> {
    validate_fractions(fractions)?;
    let total = boundaries(positives.len() + negatives.len(), fractions);
    let pos = boundaries(positives.len(), fractions);
    let mut neg = [0usize; 2];
    let mut prev = 0;
    for k in 0..2 {
        neg[k] = total[k].saturating_sub(pos[k]).clamp(prev, negatives.len());
        prev = neg[k];
    }

    let mut entries = Vec::with_capacity(positives.len() + negatives.len());
    for (records, bounds, label, stage) in [
        (positives, pos, true, "dataset.split.positive"),
        (negatives, neg, false, "dataset.split.negative"),
    ] {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut seed::stream(seed_value, stage));
        let mut rank = vec![0; records.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        for (i, rec) in records.iter().enumerate() {
            entries.push(ManifestEntry {
                id: rec.id.clone(),
                split: split_of(rank[i], bounds),
                label,
                image_path: rec.image_path.clone(),
                mask_path: rec.mask_path.clone(),
                source: rec.source,
                center: rec.center,
            });
        }
    }
    let manifest = DatasetManifest {
        entries,
        seed: seed_value,
        fractions,
        meta: Vec::new(),
    };
    manifest.check_ids()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for e in &self.entries {
            c.0[e.split.index()][usize::from(e.label)] += 1;
        }
        c
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn check_ids(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("duplicate sample id {}", w[0])));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{MANIFEST_TAG} seed={} fractions={},{},{}",
            self.seed, self.fractions[0], self.fractions[1], self.fractions[2]
        );
        for (k, v) in &self.meta {
            let _ = write!(out, " {k}={v}");
        }
        out.push('\n');
        out.push_str(COLUMNS);
        out.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.id,
                e.split,
                u8::from(e.label),
                e.image_path,
                e.mask_path,
                e.source,
                e.center.0,
                e.center.1
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty manifest".into()))?;
        let rest = header
            .strip_prefix(MANIFEST_TAG)
            .ok_or_else(|| Error::Format(format!("manifest must start with {MANIFEST_TAG}")))?;
        let (mut seed_value, mut fractions) = (None, None);
        let mut meta = Vec::new();
        for field in rest.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad manifest header field {field:?}")))?;
            match k {
                "seed" => seed_value = Some(v.parse::<u64>().map_err(|_| Error::Format(format!("bad seed {v:?}")))?),
                "fractions" => {
                    let parts = v
                        .split(',')
                        .map(|p| {
                            p.parse::<f64>()
                                .map_err(|_| Error::Format(format!("bad fraction {p:?}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let arr: [f64; 3] = parts
                        .try_into()
                        .map_err(|_| Error::Format("fractions need 3 values".into()))?;
                    fractions = Some(arr);
                }
                _ => meta.push((k.to_string(), v.to_string())),
            }
        }
        let seed_value = seed_value.ok_or_else(|| Error::Format("manifest header lacks seed".into()))?;
        let fractions = fractions.ok_or_else(|| Error::Format("manifest header lacks fractions".into()))?;
        validate_fractions(fractions)?;
        if lines.next() != Some(COLUMNS) {
            return Err(Error::Format("manifest column line missing or malformed".into()));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(Error::Format(format!(
                    "manifest row {}: {} fields, need 8",
                    i + 1,
                    f.len()
                )));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("manifest row {}: bad number {s:?}", i + 1)))
            };
            let label = match f[2] {
                "0" => false,
                "1" => true,
                other => return Err(Error::Format(format!("manifest row {}: bad label {other:?}", i + 1))),
            };
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                split: f[1].parse()?,
                label,
                image_path: f[3].to_string(),
                mask_path: f[4].to_string(),
                source: f[5].parse()?,
                center: (num(f[6])?, num(f[7])?),
            });
        }
        let m = Self {
            entries,
            seed: seed_value,
            fractions,
            meta,
        };
        m.check_ids()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        raster::write_bytes(path, self.to_text().as_bytes())
    }
}

/// Load the tile behind a manifest entry; paths are relative to `base`.
pub fn load_sample(base: &Path, entry: &ManifestEntry) -> Result<TileSample> {
    let image_path = base.join(&entry.image_path);
    let mut image = raster::read_pnm(&image_path)?;
    if image.channels == 1 {
        image = image.replicate(3);
    }
    let mask = raster::read_mask(&base.join(&entry.mask_path))?;
    let wf = world_file_path(&image_path);
    let georef = GeoRef::from_world_file(&fs::read_to_string(&wf).map_err(|e| Error::io(&wf, e))?)?;
    let sample = TileSample::new(entry.id.clone(), image, mask, georef, entry.source, Vec::new())?;
    if sample.label != entry.label {
        return Err(Error::Data(format!(
            "{}: manifest label {} disagrees with mask",
            entry.id,
            u8::from(entry.label)
        )));
    }
    Ok(sample)
}

/// Write a tile (image, mask, world file) under `out_dir/tiles/` and return
/// its manifest record.
pub fn write_sample(out_dir: &Path, sample: &TileSample, center: Vertex, comments: &[String]) -> Result<SampleRecord> {
    let image_rel = format!("tiles/{}.ppm", sample.id);
    let mask_rel = format!("tiles/{}_mask.pgm", sample.id);
    let image_path = out_dir.join(&image_rel);
    raster::write_bytes(&image_path, &raster::encode_pnm(&sample.image, comments)?)?;
    raster::write_bytes(&world_file_path(&image_path), sample.georef.to_world_file().as_bytes())?;
    raster::write_bytes(
        &out_dir.join(&mask_rel),
        &raster::encode_mask_pgm(&sample.mask, comments),
    )?;
    Ok(SampleRecord {
        id: sample.id.clone(),
        image_path: image_rel,
        mask_path: mask_rel,
        source: sample.source,
        center,
    })
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub side: f64,
    pub resolution: usize,
    pub negatives: usize,
    pub clearance: f64,
    pub fractions: [f64; 3],
    /// `None`: infer from the source raster (1 band → CORONA, 3 → BING).
    pub source: Option<Source>,
    /// Header comments for written images.
    pub comments: Vec<String>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            side: super::window::DEFAULT_SIDE_M,
            resolution: 64,
            negatives: 120,
            clearance: super::window::DEFAULT_CLEARANCE_M,
            fractions: DEFAULT_FRACTIONS,
            source: None,
            comments: Vec::new(),
        }
    }
}

fn tile_for(
    store: &RasterStore,
    sites: &[SiteShape],
    id: String,
    window: &SampleWindow,
    source: Option<Source>,
) -> Result<TileSample> {
    let (image, georef) = extract_tile(store, window)?;
    let source = source.unwrap_or_else(|| match store.select(&window.bounds()) {
        Some(r) if r.image.channels == 1 => Source::Corona,
        _ => Source::Bing,
    });
    let (mask, covered) = rasterize_with_cover(sites, window);
    TileSample::new(id, image, mask, georef, source, covered)
}

/// One positive window per site (centred on its centroid), `negatives`
/// random windows clear of all sites, all written under `out_dir`.
pub fn ingest(
    store: &RasterStore,
    sites: &[SiteShape],
    opts: &IngestOptions,
    seed_value: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let mut positives = Vec::with_capacity(sites.len());
    for site in sites {
        let w = make_window(site, opts.side, opts.resolution)?;
        let sample = tile_for(store, sites, site.id.clone(), &w, opts.source)?;
        positives.push(write_sample(out_dir, &sample, w.center, &opts.comments)?);
    }
    let extent = store.rasters().iter().map(|r| r.extent()).reduce(|a, b| Rect {
        xmin: a.xmin.min(b.xmin),
        ymin: a.ymin.min(b.ymin),
        xmax: a.xmax.max(b.xmax),
        ymax: a.ymax.max(b.ymax),
    });
    let mut negatives = Vec::with_capacity(opts.negatives);
    if opts.negatives > 0 {
        let extent = extent.ok_or_else(|| Error::Coverage("raster store is empty".into()))?;
        let mut rng = seed::stream(seed_value, "geoingest.negatives");
        let windows = sample_negatives_where(
            &extent,
            opts.negatives,
            sites,
            opts.clearance,
            opts.side,
            opts.resolution,
            &mut rng,
            |w| store.select(&w.bounds()).is_some(),
        )?;
        for (k, w) in windows.iter().enumerate() {
            let sample = tile_for(store, sites, format!("NEG.{:03}", k + 1), w, opts.source)?;
            negatives.push(write_sample(out_dir, &sample, w.center, &opts.comments)?);
        }
    }
    assemble_dataset(&positives, &negatives, opts.fractions, seed_value)
}

/// Directory holding a manifest file (paths inside it are relative to it).
pub fn manifest_base(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
