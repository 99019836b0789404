//! Site geometry, sample windows, the local raster store, dataset
//! manifests and synthetic data.

mod dataset;
mod georef;
mod shape;
mod store;
mod synth;
mod window;

pub use dataset::{
    assemble_dataset, ingest, load_sample, manifest_base, validate_fractions, write_sample, DatasetManifest,
    IngestOptions, ManifestEntry, SampleRecord, Source, Split, SplitCounts, TileSample, DEFAULT_FRACTIONS,
};
pub use georef::{GeoRef, EPSG_WEB_MERCATOR};
pub use shape::{
    centroid, emit_sites, encode_shp, parse_shp, parse_sites, parse_sites_text, point_in_ring, signed_area, SiteFormat,
    SiteShape, Vertex,
};
pub use store::{extract_tile, world_file_path, RasterStore, StoredRaster};
pub use synth::{synth_generate, Flavor, SynthConfig, SynthDataset};
pub use window::{
    make_window, rasterize_mask, rasterize_with_cover, rect_polygon_distance, sample_negatives, sample_negatives_where,
    Rect, SampleWindow, DEFAULT_CLEARANCE_M, DEFAULT_SIDE_M, MAX_NEGATIVE_ATTEMPTS,
};
