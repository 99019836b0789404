use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Architecture dimensions of the segmentation network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManetConfig {
    pub in_channels: usize,
    pub input_resolution: usize,
    /// Output width of each encoder stage, finest first.
    pub stage_widths: Vec<usize>,
    /// Spatial reduction applied at the end of each stage.
    pub downsample: Vec<usize>,
    pub bottleneck_channels: usize,
    pub bottleneck_resolution: usize,
    pub pab_reduction: usize,
    pub mfab_count: usize,
    pub mfab_reduction: usize,
    pub head_channels: usize,
}

/// Keys of the `key=value` config block, in emission order.
pub const CONFIG_KEYS: [&str; 10] = [
    "model.in_channels",
    "model.input_resolution",
    "model.stage_widths",
    "model.downsample",
    "model.bottleneck_channels",
    "model.bottleneck_resolution",
    "model.pab_reduction",
    "model.mfab_count",
    "model.mfab_reduction",
    "model.head_channels",
];

impl ManetConfig {
    /// 512×512 input reduced ×32 to a 16×16×384 bottleneck, with
    /// EfficientNet-b3-like stage widths.
    pub fn reference() -> Self {
        Self {
            in_channels: 3,
            input_resolution: 512,
            stage_widths: vec![24, 32, 48, 136, 384],
            downsample: vec![2; 5],
            bottleneck_channels: 384,
            bottleneck_resolution: 16,
            pab_reduction: 8,
            mfab_count: 4,
            mfab_reduction: 4,
            head_channels: 1,
        }
    }

    /// 64×64 input, four ×2 stages, 4×4 bottleneck.
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            input_resolution: 64,
            stage_widths: vec![8, 16, 24, 32],
            downsample: vec![2; 4],
            bottleneck_channels: 32,
            bottleneck_resolution: 4,
            pab_reduction: 8,
            mfab_count: 3,
            mfab_reduction: 4,
            head_channels: 1,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Spatial side of every pyramid level, finest first.
    pub fn level_resolutions(&self) -> Vec<usize> {
        let mut side = self.input_resolution;
        self.downsample
            .iter()
            .map(|f| {
                side /= f;
                side
            })
            .collect()
    }

    pub fn pab_inner(&self) -> usize {
        (self.bottleneck_channels / self.pab_reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.input_resolution == 0 {
            return bad("in_channels and input_resolution must be positive".into());
        }
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.downsample.len() {
            return bad(format!(
                "{} stage widths for {} downsample factors",
                self.stage_widths.len(),
                self.downsample.len()
            ));
        }
        if self.stage_widths.contains(&0) || self.downsample.contains(&0) {
            return bad("stage widths and downsample factors must be ≥ 1".into());
        }
        let mut side = self.input_resolution;
        for (i, f) in self.downsample.iter().enumerate() {
            if !side.is_multiple_of(*f) {
                return bad(format!("stage {i}: side {side} not divisible by factor {f}"));
            }
            side /= f;
        }
        if side != self.bottleneck_resolution {
            return bad(format!(
                "input {} reduced by {:?} gives {side}, not bottleneck {}",
                self.input_resolution, self.downsample, self.bottleneck_resolution
            ));
        }
        if self.stage_widths.last() != Some(&self.bottleneck_channels) {
            return bad(format!(
                "last stage width {:?} differs from bottleneck channels {}",
                self.stage_widths.last(),
                self.bottleneck_channels
            ));
        }
        if self.mfab_count + 1 != self.stages() {
            return bad(format!(
                "mfab count {} needs {} pyramid levels, have {}",
                self.mfab_count,
                self.mfab_count + 1,
                self.stages()
            ));
        }
        if self.pab_reduction == 0 || self.mfab_reduction == 0 {
            return bad("reduction ratios must be ≥ 1".into());
        }
        if self.head_channels != 1 {
            return bad(format!("head must have 1 channel, got {}", self.head_channels));
        }
        Ok(())
    }

    pub fn to_block(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let values = [
            self.in_channels.to_string(),
            self.input_resolution.to_string(),
            join(&self.stage_widths),
            join(&self.downsample),
            self.bottleneck_channels.to_string(),
            self.bottleneck_resolution.to_string(),
            self.pab_reduction.to_string(),
            self.mfab_count.to_string(),
            self.mfab_reduction.to_string(),
            self.head_channels.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Build from `(key, value)` pairs; every key in [`CONFIG_KEYS`] is required.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut slots: [Option<&str>; 10] = [None; 10];
        for (k, v) in pairs {
            let idx = CONFIG_KEYS
                .iter()
                .position(|key| *key == k)
                .ok_or_else(|| Error::Format(format!("unknown model config key {k}")))?;
            slots[idx] = Some(v);
        }
        let get =
            |i: usize| slots[i].ok_or_else(|| Error::Format(format!("missing model config key {}", CONFIG_KEYS[i])));
        let num = |i: usize| -> Result<usize> {
            get(i)?
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("{} is not an integer", CONFIG_KEYS[i])))
        };
        let list = |i: usize| -> Result<Vec<usize>> {
            get(i)?
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Format(format!("{} has a non-integer entry", CONFIG_KEYS[i])))
                })
                .collect()
        };
        let cfg = Self {
            in_channels: num(0)?,
            input_resolution: num(1)?,
            stage_widths: list(2)?,
            downsample: list(3)?,
            bottleneck_channels: num(4)?,
            bottleneck_resolution: num(5)?,
            pab_reduction: num(6)?,
            mfab_count: num(7)?,
            mfab_reduction: num(8)?,
            head_channels: num(9)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_block(text: &str) -> Result<Self> {
        let pairs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once('=')
                    .ok_or_else(|| Error::Format(format!("config line without '=': {l}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_pairs(pairs)
    }
}
