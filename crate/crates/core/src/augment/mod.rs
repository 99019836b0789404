//! Grouped probabilistic augmentation: plan a trace of transforms with
//! sampled parameters, then replay it on an image/mask pair.

pub mod kernels;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};
use crate::seed;
pub use kernels::FlipAxis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransformKind {
    RandomCrop,
    Flip,
    RandomRotate90,
    GridDistortion,
    RandomGridShuffle,
    Clahe,
    RandomBrightnessContrast,
    ChannelShuffle,
    ColorJitter,
    HueSaturationValue,
    Blur,
    GaussNoise,
    MotionBlur,
    Sharpen,
    Resize,
}

impl TransformKind {
    pub const ALL: [TransformKind; 15] = [
        TransformKind::RandomCrop,
        TransformKind::Flip,
        TransformKind::RandomRotate90,
        TransformKind::GridDistortion,
        TransformKind::RandomGridShuffle,
        TransformKind::Clahe,
        TransformKind::RandomBrightnessContrast,
        TransformKind::ChannelShuffle,
        TransformKind::ColorJitter,
        TransformKind::HueSaturationValue,
        TransformKind::Blur,
        TransformKind::GaussNoise,
        TransformKind::MotionBlur,
        TransformKind::Sharpen,
        TransformKind::Resize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::RandomCrop => "RandomCrop",
            TransformKind::Flip => "Flip",
            TransformKind::RandomRotate90 => "RandomRotate90",
            TransformKind::GridDistortion => "GridDistortion",
            TransformKind::RandomGridShuffle => "RandomGridShuffle",
            TransformKind::Clahe => "CLAHE",
            TransformKind::RandomBrightnessContrast => "RandomBrightnessContrast",
            TransformKind::ChannelShuffle => "ChannelShuffle",
            TransformKind::ColorJitter => "ColorJitter",
            TransformKind::HueSaturationValue => "HueSaturationValue",
            TransformKind::Blur => "Blur",
            TransformKind::GaussNoise => "GaussNoise",
            TransformKind::MotionBlur => "MotionBlur",
            TransformKind::Sharpen => "Sharpen",
            TransformKind::Resize => "Resize",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Format(format!("unknown transform {name:?}")))
    }

    pub fn is_geometric(self) -> bool {
        matches!(
            self,
            TransformKind::RandomCrop
                | TransformKind::Flip
                | TransformKind::RandomRotate90
                | TransformKind::GridDistortion
                | TransformKind::RandomGridShuffle
                | TransformKind::Resize
        )
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameter ranges for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub crop_fraction: f64,
    pub distortion_steps: usize,
    pub distortion_limit: f64,
    pub shuffle_grid: usize,
    pub clahe_clip: f64,
    pub clahe_tiles: usize,
    pub brightness_limit: f64,
    pub contrast_limit: f64,
    /// Brightness, contrast, saturation, hue.
    pub jitter: [f64; 4],
    /// Hue, saturation, value shift limits on the 0..255 scale.
    pub hsv_limits: [f64; 3],
    pub blur_kernels: Vec<usize>,
    pub noise_sigma: (f64, f64),
    pub sharpen_amount: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            crop_fraction: 0.875,
            distortion_steps: 5,
            distortion_limit: 0.3,
            shuffle_grid: 3,
            clahe_clip: 4.0,
            clahe_tiles: 8,
            brightness_limit: 0.2,
            contrast_limit: 0.2,
            jitter: [0.2, 0.2, 0.2, 0.1],
            hsv_limits: [20.0, 30.0, 20.0],
            blur_kernels: vec![3, 5, 7],
            noise_sigma: (0.01, 0.05),
            sharpen_amount: (0.2, 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentGroup {
    pub name: String,
    pub probability: f64,
    pub members: Vec<(TransformKind, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub flip_p: f64,
    pub rotate_p: f64,
    pub groups: Vec<AugmentGroup>,
    /// Resize target `(height, width)`; equals the model input dims.
    pub resize: (usize, usize),
    pub params: AugmentParams,
    /// Also apply photometric and kernel transforms to masks (re-binarized).
    pub mask_photometric: bool,
}

impl AugmentSpec {
    /// Default group and transform probabilities with the given resize target.
    pub fn standard(resize: usize) -> Self {
        use TransformKind::*;
        Self {
            flip_p: 0.5,
            rotate_p: 0.5,
            groups: vec![
                AugmentGroup {
                    name: "Geometric".into(),
                    probability: 0.2,
                    members: vec![(GridDistortion, 0.4), (RandomGridShuffle, 0.6)],
                },
                AugmentGroup {
                    name: "ColorSpace".into(),
                    probability: 0.5,
                    members: vec![
                        (Clahe, 0.4),
                        (RandomBrightnessContrast, 0.8),
                        (ChannelShuffle, 0.1),
                        (ColorJitter, 0.2),
                        (HueSaturationValue, 0.2),
                    ],
                },
                AugmentGroup {
                    name: "KernelFilters".into(),
                    probability: 0.5,
                    members: vec![(Blur, 0.4), (GaussNoise, 0.4), (MotionBlur, 0.2), (Sharpen, 0.1)],
                },
            ],
            resize: (resize, resize),
            params: AugmentParams::default(),
            mask_photometric: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("probability of {name} is {p}, outside [0, 1]")))
            }
        };
        prob("Flip", self.flip_p)?;
        prob("RandomRotate90", self.rotate_p)?;
        for g in &self.groups {
            prob(&g.name, g.probability)?;
            for (k, p) in &g.members {
                prob(k.name(), *p)?;
                if matches!(
                    k,
                    TransformKind::RandomCrop
                        | TransformKind::Flip
                        | TransformKind::RandomRotate90
                        | TransformKind::Resize
                ) {
                    return Err(Error::Config(format!("{k} belongs to the fixed pre/post stages")));
                }
            }
        }
        let p = &self.params;
        if !(p.crop_fraction > 0.0 && p.crop_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "crop fraction {} outside (0, 1]",
                p.crop_fraction
            )));
        }
        if self.resize.0 == 0 || self.resize.1 == 0 {
            return Err(Error::Config("resize target must be non-empty".into()));
        }
        if p.blur_kernels.is_empty() || p.blur_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("blur kernels must be odd sizes".into()));
        }
        if p.noise_sigma.0 > p.noise_sigma.1 || p.noise_sigma.0 < 0.0 {
            return Err(Error::Config("noise sigma range is invalid".into()));
        }
        if p.sharpen_amount.0 > p.sharpen_amount.1 || p.sharpen_amount.0 < 0.0 || p.sharpen_amount.1 > 1.0 {
            return Err(Error::Config("sharpen amount range is invalid".into()));
        }
        if p.distortion_steps == 0 || !(0.0..1.0).contains(&p.distortion_limit) {
            return Err(Error::Config("grid distortion parameters are invalid".into()));
        }
        if p.shuffle_grid == 0 || p.clahe_tiles == 0 || p.clahe_clip <= 0.0 {
            return Err(Error::Config("grid/tile counts must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// A transform with its realized parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    RandomCrop {
        fraction: f64,
        top: f64,
        left: f64,
    },
    Flip {
        axis: FlipAxis,
    },
    RandomRotate90 {
        k: u8,
    },
    GridDistortion {
        steps_x: Vec<f64>,
        steps_y: Vec<f64>,
    },
    RandomGridShuffle {
        grid: usize,
        perm: Vec<usize>,
    },
    Clahe {
        clip: f64,
        tiles: usize,
    },
    RandomBrightnessContrast {
        brightness: f64,
        contrast: f64,
    },
    ChannelShuffle {
        perm: Vec<usize>,
    },
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
    HueSaturationValue {
        hue: f64,
        sat: f64,
        val: f64,
    },
    Blur {
        k: usize,
    },
    GaussNoise {
        sigma: f64,
        seed: u64,
    },
    MotionBlur {
        k: usize,
        angle: u16,
    },
    Sharpen {
        amount: f64,
    },
    Resize {
        height: usize,
        width: usize,
    },
}

impl Transform {
    pub fn kind(&self) -> TransformKind {
        match self {
            Transform::RandomCrop { .. } => TransformKind::RandomCrop,
            Transform::Flip { .. } => TransformKind::Flip,
            Transform::RandomRotate90 { .. } => TransformKind::RandomRotate90,
            Transform::GridDistortion { .. } => TransformKind::GridDistortion,
            Transform::RandomGridShuffle { .. } => TransformKind::RandomGridShuffle,
            Transform::Clahe { .. } => TransformKind::Clahe,
            Transform::RandomBrightnessContrast { .. } => TransformKind::RandomBrightnessContrast,
            Transform::ChannelShuffle { .. } => TransformKind::ChannelShuffle,
            Transform::ColorJitter { .. } => TransformKind::ColorJitter,
            Transform::HueSaturationValue { .. } => TransformKind::HueSaturationValue,
            Transform::Blur { .. } => TransformKind::Blur,
            Transform::GaussNoise { .. } => TransformKind::GaussNoise,
            Transform::MotionBlur { .. } => TransformKind::MotionBlur,
            Transform::Sharpen { .. } => TransformKind::Sharpen,
            Transform::Resize { .. } => TransformKind::Resize,
        }
    }

    fn sample<R: Rng + ?Sized>(kind: TransformKind, spec: &AugmentSpec, rng: &mut R) -> Self {
        let p = &spec.params;
        let sym = |rng: &mut R, lim: f64| if lim > 0.0 { rng.random_range(-lim..=lim) } else { 0.0 };
        match kind {
            TransformKind::RandomCrop => Transform::RandomCrop {
                fraction: p.crop_fraction,
                top: rng.random(),
                left: rng.random(),
            },
            TransformKind::Flip => Transform::Flip {
                axis: if rng.random_bool(0.5) {
                    FlipAxis::Horizontal
                } else {
                    FlipAxis::Vertical
                },
            },
            TransformKind::RandomRotate90 => Transform::RandomRotate90 {
                k: rng.random_range(1..=3),
            },
            TransformKind::GridDistortion => {
                let mut steps = || {
                    (0..p.distortion_steps)
                        .map(|_| 1.0 + sym(rng, p.distortion_limit))
                        .collect()
                };
                let steps_x = steps();
                let steps_y = steps();
                Transform::GridDistortion { steps_x, steps_y }
            }
            TransformKind::RandomGridShuffle => {
                let mut perm: Vec<usize> = (0..p.shuffle_grid * p.shuffle_grid).collect();
                perm.shuffle(rng);
                Transform::RandomGridShuffle {
                    grid: p.shuffle_grid,
                    perm,
                }
            }
            TransformKind::Clahe => Transform::Clahe {
                clip: p.clahe_clip,
                tiles: p.clahe_tiles,
            },
            TransformKind::RandomBrightnessContrast => Transform::RandomBrightnessContrast {
                brightness: sym(rng, p.brightness_limit),
                contrast: sym(rng, p.contrast_limit),
            },
            TransformKind::ChannelShuffle => {
                let mut perm = vec![0, 1, 2];
                perm.shuffle(rng);
                Transform::ChannelShuffle { perm }
            }
            TransformKind::ColorJitter => Transform::ColorJitter {
                brightness: 1.0 + sym(rng, p.jitter[0]),
                contrast: 1.0 + sym(rng, p.jitter[1]),
                saturation: 1.0 + sym(rng, p.jitter[2]),
                hue: sym(rng, p.jitter[3]),
            },
            TransformKind::HueSaturationValue => Transform::HueSaturationValue {
                hue: sym(rng, p.hsv_limits[0]),
                sat: sym(rng, p.hsv_limits[1]),
                val: sym(rng, p.hsv_limits[2]),
            },
            TransformKind::Blur => Transform::Blur {
                k: *p.blur_kernels.choose(rng).expect("validated non-empty"),
            },
            TransformKind::GaussNoise => Transform::GaussNoise {
                sigma: rng.random_range(p.noise_sigma.0..=p.noise_sigma.1),
                seed: rng.random(),
            },
            TransformKind::MotionBlur => Transform::MotionBlur {
                k: *p.blur_kernels.choose(rng).expect("validated non-empty"),
                angle: 45 * rng.random_range(0..4u16),
            },
            TransformKind::Sharpen => Transform::Sharpen {
                amount: rng.random_range(p.sharpen_amount.0..=p.sharpen_amount.1),
            },
            TransformKind::Resize => Transform::Resize {
                height: spec.resize.0,
                width: spec.resize.1,
            },
        }
    }

    fn params(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
        let ulist = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        match self {
            Transform::RandomCrop { fraction, top, left } => {
                vec![
                    ("fraction", fraction.to_string()),
                    ("top", top.to_string()),
                    ("left", left.to_string()),
                ]
            }
            Transform::Flip { axis } => vec![(
                "axis",
                match axis {
                    FlipAxis::Horizontal => "horizontal".into(),
                    FlipAxis::Vertical => "vertical".into(),
                },
            )],
            Transform::RandomRotate90 { k } => vec![("k", k.to_string())],
            Transform::GridDistortion { steps_x, steps_y } => vec![("x", list(steps_x)), ("y", list(steps_y))],
            Transform::RandomGridShuffle { grid, perm } => vec![("grid", grid.to_string()), ("perm", ulist(perm))],
            Transform::Clahe { clip, tiles } => vec![("clip", clip.to_string()), ("tiles", tiles.to_string())],
            Transform::RandomBrightnessContrast { brightness, contrast } => {
                vec![
                    ("brightness", brightness.to_string()),
                    ("contrast", contrast.to_string()),
                ]
            }
            Transform::ChannelShuffle { perm } => vec![("perm", ulist(perm))],
            Transform::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
            } => vec![
                ("brightness", brightness.to_string()),
                ("contrast", contrast.to_string()),
                ("saturation", saturation.to_string()),
                ("hue", hue.to_string()),
            ],
            Transform::HueSaturationValue { hue, sat, val } => {
                vec![
                    ("hue", hue.to_string()),
                    ("sat", sat.to_string()),
                    ("val", val.to_string()),
                ]
            }
            Transform::Blur { k } => vec![("k", k.to_string())],
            Transform::GaussNoise { sigma, seed } => vec![("sigma", sigma.to_string()), ("seed", seed.to_string())],
            Transform::MotionBlur { k, angle } => vec![("k", k.to_string()), ("angle", angle.to_string())],
            Transform::Sharpen { amount } => vec![("amount", amount.to_string())],
            Transform::Resize { height, width } => vec![("height", height.to_string()), ("width", width.to_string())],
        }
    }

    /// Parse `Name(key=value, ...)`.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let (name, rest) = text
            .split_once('(')
            .ok_or_else(|| Error::Format(format!("transform {text:?} lacks parameters")))?;
        let body = rest
            .strip_suffix(')')
            .ok_or_else(|| Error::Format(format!("transform {text:?} is not closed")))?;
        let mut kv = BTreeMap::new();
        for field in body.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad parameter {field:?} in {name}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("{name} lacks {k}")))
        };
        fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
            s.parse().map_err(|_| Error::Format(format!("bad number {s:?}")))
        }
        let flist = |s: &str| s.split(';').map(num::<f64>).collect::<Result<Vec<_>>>();
        let ulist = |s: &str| s.split(';').map(num::<usize>).collect::<Result<Vec<_>>>();
        Ok(match TransformKind::from_name(name.trim())? {
            TransformKind::RandomCrop => Transform::RandomCrop {
                fraction: num(get("fraction")?)?,
                top: num(get("top")?)?,
                left: num(get("left")?)?,
            },
            TransformKind::Flip => Transform::Flip {
                axis: match get("axis")? {
                    "horizontal" => FlipAxis::Horizontal,
                    "vertical" => FlipAxis::Vertical,
                    a => return Err(Error::Format(format!("bad flip axis {a:?}"))),
                },
            },
            TransformKind::RandomRotate90 => Transform::RandomRotate90 { k: num(get("k")?)? },
            TransformKind::GridDistortion => Transform::GridDistortion {
                steps_x: flist(get("x")?)?,
                steps_y: flist(get("y")?)?,
            },
            TransformKind::RandomGridShuffle => Transform::RandomGridShuffle {
                grid: num(get("grid")?)?,
                perm: ulist(get("perm")?)?,
            },
            TransformKind::Clahe => Transform::Clahe {
                clip: num(get("clip")?)?,
                tiles: num(get("tiles")?)?,
            },
            TransformKind::RandomBrightnessContrast => Transform::RandomBrightnessContrast {
                brightness: num(get("brightness")?)?,
                contrast: num(get("contrast")?)?,
            },
            TransformKind::ChannelShuffle => Transform::ChannelShuffle {
                perm: ulist(get("perm")?)?,
            },
            TransformKind::ColorJitter => Transform::ColorJitter {
                brightness: num(get("brightness")?)?,
                contrast: num(get("contrast")?)?,
                saturation: num(get("saturation")?)?,
                hue: num(get("hue")?)?,
            },
            TransformKind::HueSaturationValue => Transform::HueSaturationValue {
                hue: num(get("hue")?)?,
                sat: num(get("sat")?)?,
                val: num(get("val")?)?,
            },
            TransformKind::Blur => Transform::Blur { k: num(get("k")?)? },
            TransformKind::GaussNoise => Transform::GaussNoise {
                sigma: num(get("sigma")?)?,
                seed: num(get("seed")?)?,
            },
            TransformKind::MotionBlur => Transform::MotionBlur {
                k: num(get("k")?)?,
                angle: num(get("angle")?)?,
            },
            TransformKind::Sharpen => Transform::Sharpen {
                amount: num(get("amount")?)?,
            },
            TransformKind::Resize => Transform::Resize {
                height: num(get("height")?)?,
                width: num(get("width")?)?,
            },
        })
    }

    pub fn apply_image(&self, img: &Image) -> Result<Image> {
        use kernels::*;
        match self {
            Transform::RandomCrop { fraction, top, left } => random_crop(img, *fraction, *top, *left),
            Transform::Flip { axis } => Ok(flip(img, *axis)),
            Transform::RandomRotate90 { k } => Ok(rotate90(img, *k)),
            Transform::GridDistortion { steps_x, steps_y } => grid_distortion(img, steps_x, steps_y),
            Transform::RandomGridShuffle { grid, perm } => grid_shuffle(img, *grid, perm),
            Transform::Clahe { clip, tiles } => clahe(img, *clip, *tiles),
            Transform::RandomBrightnessContrast { brightness, contrast } => {
                brightness_contrast(img, *brightness, *contrast)
            }
            Transform::ChannelShuffle { perm } => channel_shuffle(img, perm),
            Transform::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
            } => color_jitter(img, *brightness, *contrast, *saturation, *hue),
            Transform::HueSaturationValue { hue, sat, val } => hue_saturation_value(img, *hue, *sat, *val),
            Transform::Blur { k } => blur(img, *k),
            Transform::GaussNoise { sigma, seed } => gauss_noise(img, *sigma, *seed),
            Transform::MotionBlur { k, angle } => motion_blur(img, *k, *angle),
            Transform::Sharpen { amount } => sharpen(img, *amount),
            Transform::Resize { height, width } => resize(img, *height, *width),
        }
    }

    /// Geometric transforms only; `None` for photometric ones.
    pub fn apply_mask(&self, mask: &Mask) -> Option<Result<Mask>> {
        use kernels::*;
        Some(match self {
            Transform::RandomCrop { fraction, top, left } => random_crop_mask(mask, *fraction, *top, *left),
            Transform::Flip { axis } => Ok(flip_mask(mask, *axis)),
            Transform::RandomRotate90 { k } => Ok(rotate90_mask(mask, *k)),
            Transform::GridDistortion { steps_x, steps_y } => grid_distortion_mask(mask, steps_x, steps_y),
            Transform::RandomGridShuffle { grid, perm } => grid_shuffle_mask(mask, *grid, perm),
            Transform::Resize { height, width } => resize_mask(mask, *height, *width),
            _ => return None,
        })
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let params: Vec<String> = self.params().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        write!(f, "{}({})", self.kind(), params.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentTrace {
    pub steps: Vec<Transform>,
    /// Names of the groups whose group draw fired (members may still all miss).
    pub fired_groups: Vec<String>,
    pub seed: Option<u64>,
    pub mask_photometric: bool,
}

impl AugmentTrace {
    pub fn kinds(&self) -> Vec<TransformKind> {
        self.steps.iter().map(Transform::kind).collect()
    }

    pub fn is_geometric_only(&self) -> bool {
        self.steps.iter().all(|t| t.kind().is_geometric())
    }

    /// `sample_id: Name(params), Name(params), ...`
    pub fn log_line(&self, sample_id: &str) -> String {
        let steps: Vec<String> = self.steps.iter().map(Transform::to_string).collect();
        format!("{sample_id}: {}", steps.join(", "))
    }

    /// Inverse of [`AugmentTrace::log_line`].
    pub fn parse_log_line(line: &str) -> Result<(String, Self)> {
        let (id, rest) = line
            .split_once(": ")
            .ok_or_else(|| Error::Format(format!("trace line lacks 'id: ' prefix: {line:?}")))?;
        let mut steps = Vec::new();
        let mut depth = 0usize;
        let mut start = 0;
        for (i, ch) in rest.char_indices() {
            match ch {
                '(' => depth += 1,
                ')' => depth = depth.saturating_sub(1),
                ',' if depth == 0 => {
                    steps.push(Transform::parse(&rest[start..i])?);
                    start = i + 1;
                }
                _ => {}
            }
        }
        if !rest[start..].trim().is_empty() {
            steps.push(Transform::parse(&rest[start..])?);
        }
        Ok((
            id.to_string(),
            Self {
                steps,
                fired_groups: Vec::new(),
                seed: None,
                mask_photometric: false,
            },
        ))
    }
}

/// Plan with explicit decisions: `fire(name, p)` decides every
/// probabilistic inclusion (pre-stage transforms, groups, then members, in
/// stage order); `rng` samples parameters.
pub fn plan_with<R: Rng + ?Sized>(
    spec: &AugmentSpec,
    rng: &mut R,
    mut fire: impl FnMut(&str, f64, &mut R) -> bool,
) -> AugmentTrace {
    let mut steps = vec![Transform::sample(TransformKind::RandomCrop, spec, rng)];
    if fire(TransformKind::Flip.name(), spec.flip_p, rng) {
        steps.push(Transform::sample(TransformKind::Flip, spec, rng));
    }
    if fire(TransformKind::RandomRotate90.name(), spec.rotate_p, rng) {
        steps.push(Transform::sample(TransformKind::RandomRotate90, spec, rng));
    }
    let mut fired_groups = Vec::new();
    for g in &spec.groups {
        if !fire(&g.name, g.probability, rng) {
            continue;
        }
        fired_groups.push(g.name.clone());
        for &(kind, p) in &g.members {
            if fire(kind.name(), p, rng) {
                steps.push(Transform::sample(kind, spec, rng));
            }
        }
    }
    steps.push(Transform::sample(TransformKind::Resize, spec, rng));
    AugmentTrace {
        steps,
        fired_groups,
        seed: None,
        mask_photometric: spec.mask_photometric,
    }
}

fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < p
}

pub fn plan<R: Rng + ?Sized>(spec: &AugmentSpec, rng: &mut R) -> AugmentTrace {
    plan_with(spec, rng, |_, p, rng| bernoulli(p, rng))
}

/// Plan from a seed (recorded in the trace).
pub fn plan_seeded(spec: &AugmentSpec, seed_value: u64) -> AugmentTrace {
    let mut trace = plan(spec, &mut seed::stream(seed_value, "augment.plan"));
    trace.seed = Some(seed_value);
    trace
}

/// Per-sample seed for a training epoch, independent of scheduling.
pub fn sample_seed(global: u64, epoch: usize, sample_id: &str) -> u64 {
    global ^ seed::fnv1a64(&format!("augment/{epoch}/{sample_id}")).rotate_left(17)
}

/// Replay a trace on an image/mask pair.
pub fn apply(trace: &AugmentTrace, image: &Image, mask: &Mask) -> Result<(Image, Mask)> {
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(Error::shape(
            "augment",
            format!(
                "image {}×{} vs mask {}×{}",
                image.height, image.width, mask.height, mask.width
            ),
        ));
    }
    // the mask travels as a real grid through the same resampling as the
    // image and is binarized once at the end
    let mut img = image.clone();
    let mut m = mask.to_image();
    for t in &trace.steps {
        img = t.apply_image(&img)?;
        if t.kind().is_geometric() || trace.mask_photometric {
            m = t.apply_image(&m)?;
        }
    }
    let m = Mask {
        height: m.height,
        width: m.width,
        data: m.data.iter().map(|&v| u8::from(v >= 0.5)).collect(),
    };
    Ok((img, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scripted(hits: &'static [&'static str]) -> impl FnMut(&str, f64, &mut crate::seed::Rng) -> bool {
        move |name, _, _| hits.contains(&name)
    }

    fn names(t: &AugmentTrace) -> Vec<&'static str> {
        t.kinds().iter().map(|k| k.name()).collect()
    }

    #[test]
    fn published_sequences() {
        let spec = AugmentSpec::standard(64);
        let mut rng = seed::stream(0, "t");
        let t = plan_with(
            &spec,
            &mut rng,
            scripted(&["Flip", "RandomRotate90", "KernelFilters", "GaussNoise", "Sharpen"]),
        );
        assert_eq!(
            names(&t),
            [
                "RandomCrop",
                "Flip",
                "RandomRotate90",
                "GaussNoise",
                "Sharpen",
                "Resize"
            ]
        );
        let t = plan_with(
            &spec,
            &mut rng,
            scripted(&[
                "Flip",
                "RandomRotate90",
                "ColorSpace",
                "CLAHE",
                "KernelFilters",
                "GaussNoise",
                "Sharpen",
            ]),
        );
        assert_eq!(
            names(&t),
            [
                "RandomCrop",
                "Flip",
                "RandomRotate90",
                "CLAHE",
                "GaussNoise",
                "Sharpen",
                "Resize"
            ]
        );
        let t = plan_with(
            &spec,
            &mut rng,
            scripted(&[
                "Flip",
                "RandomRotate90",
                "ColorSpace",
                "RandomBrightnessContrast",
                "KernelFilters",
                "MotionBlur",
                "Sharpen",
            ]),
        );
        assert_eq!(
            names(&t),
            [
                "RandomCrop",
                "Flip",
                "RandomRotate90",
                "RandomBrightnessContrast",
                "MotionBlur",
                "Sharpen",
                "Resize"
            ]
        );
    }

    #[test]
    fn minimal_trace() {
        let spec = AugmentSpec::standard(64);
        let t = plan_with(&spec, &mut seed::stream(0, "t"), scripted(&[]));
        assert_eq!(names(&t), ["RandomCrop", "Resize"]);
        // members never fire without their group
        let t = plan_with(&spec, &mut seed::stream(0, "t"), scripted(&["CLAHE", "Blur"]));
        assert_eq!(names(&t), ["RandomCrop", "Resize"]);
    }

    #[test]
    fn log_line_round_trips() {
        let spec = AugmentSpec::standard(64);
        for s in 0..50 {
            let t = plan_seeded(&spec, s);
            let line = t.log_line("SYN.0001");
            let (id, back) = AugmentTrace::parse_log_line(&line).unwrap();
            assert_eq!(id, "SYN.0001");
            assert_eq!(back.steps, t.steps);
        }
    }

    #[test]
    fn probability_validation() {
        let mut spec = AugmentSpec::standard(64);
        spec.groups[1].probability = 1.5;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        assert!(AugmentSpec::standard(64).validate().is_ok());
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let spec = AugmentSpec::standard(16);
        let t = plan_seeded(&spec, 1);
        let r = apply(&t, &Image::new(3, 16, 16), &Mask::zeros(8, 16));
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
