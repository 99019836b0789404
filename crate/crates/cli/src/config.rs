//! Run configuration: defaults, overlaid by a TOML file, overlaid by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tellscan::augment::AugmentSpec;
use tellscan::manet::ManetConfig;
use tellscan::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub paths: Paths,
    pub window: Window,
    pub model: Model,
    pub train: Train,
    pub augment: Augment,
    pub metrics: Metrics,
    pub sites: Sites,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub sites: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Window {
    pub side: f64,
    pub resolution: usize,
    pub negatives: usize,
    pub clearance: f64,
    pub fractions: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Model {
    /// `desk` or `reference`.
    pub preset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Train {
    pub sources: String,
    pub base_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub dice_weight: f64,
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct Augment {
    pub flip_p: Option<f64>,
    pub rotate_p: Option<f64>,
    pub geometric_p: Option<f64>,
    pub color_space_p: Option<f64>,
    pub kernel_filters_p: Option<f64>,
    pub crop_fraction: Option<f64>,
    pub mask_photometric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Metrics {
    pub threshold: f64,
    pub min_area_m2: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sites {
    pub dedupe_m: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            paths: Paths::default(),
            window: Window::default(),
            model: Model::default(),
            train: Train::default(),
            augment: Augment::default(),
            metrics: Metrics::default(),
            sites: Sites::default(),
        }
    }
}

impl Default for Window {
    fn default() -> Self {
        Self {
            side: 2000.0,
            resolution: 64,
            negatives: 120,
            clearance: 100.0,
            fractions: tellscan::geoingest::DEFAULT_FRACTIONS,
        }
    }
}

impl Default for Model {
    fn default() -> Self {
        Self { preset: "desk".into() }
    }
}

impl Default for Train {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            sources: "SYNTHETIC".into(),
            base_lr: t.base_lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            min_delta: t.min_delta,
            dice_weight: t.dice_weight,
            augment: true,
        }
    }
}

impl Default for Metrics {
    fn default() -> Self {
        Self {
            threshold: tellscan::metrics::DEFAULT_THRESHOLD,
            min_area_m2: tellscan::metrics::DEFAULT_MIN_AREA_M2,
            repeats: 1,
        }
    }
}

impl Default for Sites {
    fn default() -> Self {
        Self {
            dedupe_m: tellscan::sitemap::DEFAULT_DEDUPE_M,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {}", path.display(), e.message()))
    }

    /// Canonical TOML of the effective configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical form, with the
    /// output directory left out.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let hash = Sha256::digest(c.canonical().as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn manet(&self) -> Result<ManetConfig, String> {
        let mut cfg = match self.model.preset.as_str() {
            "desk" => ManetConfig::desk(),
            "reference" => ManetConfig::reference(),
            other => return Err(format!("unknown model preset {other:?} (desk, reference)")),
        };
        if cfg.input_resolution != self.window.resolution {
            // keep the stage stack, rescale the input and bottleneck sides
            let factor: usize = cfg.downsample.iter().product();
            if !self.window.resolution.is_multiple_of(factor) {
                return Err(format!(
                    "window resolution {} is not divisible by the model's total downsampling {factor}",
                    self.window.resolution
                ));
            }
            cfg.input_resolution = self.window.resolution;
            cfg.bottleneck_resolution = self.window.resolution / factor;
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.train.base_lr,
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            min_delta: self.train.min_delta,
            dice_weight: self.train.dice_weight,
            seed: self.seed,
            threshold: self.metrics.threshold,
            min_area_m2: self.metrics.min_area_m2,
            ..TrainConfig::default()
        }
    }

    pub fn augment_spec(&self) -> AugmentSpec {
        let mut spec = AugmentSpec::standard(self.window.resolution);
        let a = &self.augment;
        if let Some(p) = a.flip_p {
            spec.flip_p = p;
        }
        if let Some(p) = a.rotate_p {
            spec.rotate_p = p;
        }
        for (name, p) in [
            ("Geometric", a.geometric_p),
            ("ColorSpace", a.color_space_p),
            ("KernelFilters", a.kernel_filters_p),
        ] {
            if let Some(p) = p {
                if let Some(g) = spec.groups.iter_mut().find(|g| g.name == name) {
                    g.probability = p;
                }
            }
        }
        if let Some(f) = a.crop_fraction {
            spec.params.crop_fraction = f;
        }
        spec.mask_photometric = a.mask_photometric;
        spec
    }

    /// Header lines stamped into written artifacts.
    pub fn stamp(&self) -> Vec<String> {
        vec![format!("tellscan seed={} config={}", self.seed, self.digest())]
    }
}
