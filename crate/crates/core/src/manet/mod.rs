//! Multi-scale attention segmentation network.
//!
//! Encoder: a stack of stages, each `conv3×3 → BN → swish` followed by a
//! strided `conv3×3 → BN → swish` downsample. Every stage output is one level
//! of the [`FeaturePyramid`]; the last level is the bottleneck.
//!
//! Decoder: a position-wise attention block (PAB) on the bottleneck, then a
//! cascade of multi-scale fusion attention blocks (MFAB), one per remaining
//! pyramid level, coarse to fine.
//!
//! Head: `conv1×1` to one logit channel, bilinear upsampling back to the
//! input resolution, sigmoid.

mod config;
mod context;

use rand::Rng as _;

pub use config::{ManetConfig, CONFIG_KEYS};
pub use context::{Forward, Mode};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::nn::{self, Conv2dSpec};
use crate::tensor::{concat, ParamKind, ParamStore, Tensor};

/// Name prefix of the segmentation head; everything else is a deep layer.
pub const HEAD_PREFIX: &str = "head.";

/// Encoder stage outputs, finest first; the last one is the bottleneck.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn bottleneck(&self) -> &Tensor {
        self.levels.last().expect("pyramid has at least one level")
    }

    pub fn finest(&self) -> &Tensor {
        &self.levels[0]
    }
}

#[derive(Debug, Clone)]
pub struct PabOutput {
    pub feature: Tensor,
    /// `(N, HW, HW)`; row `i` is the distribution of query position `i`
    /// over key positions.
    pub attention: Tensor,
}

#[derive(Debug, Clone)]
pub struct SegmentOutput {
    /// Pre-sigmoid map at input resolution, `(N, 1, n, n)`.
    pub logits: Tensor,
    /// Probabilities in `(0, 1)`, `(N, 1, n, n)`.
    pub probs: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manet {
    config: ManetConfig,
    params: ParamStore,
}

fn stage(i: usize) -> String {
    format!("encoder.stage{i}")
}

fn mfab(j: usize) -> String {
    format!("decoder.mfab{j}")
}

fn he_uniform(rng: &mut seed::Rng, fan_in: usize, count: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..count).map(|_| rng.random_range(-limit..limit)).collect()
}

struct Builder<'r> {
    store: ParamStore,
    rng: &'r mut seed::Rng,
}

impl Builder<'_> {
    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize, bias: bool) -> Result<()> {
        let fan_in = cin * k * k;
        let w = he_uniform(self.rng, fan_in, cout * fan_in);
        self.store
            .insert(&format!("{prefix}.weight"), &[cout, cin, k, k], w, ParamKind::Trainable)?;
        if bias {
            self.store.insert(
                &format!("{prefix}.bias"),
                &[cout],
                vec![0.0; cout],
                ParamKind::Trainable,
            )?;
        }
        Ok(())
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.store
            .insert(&format!("{prefix}.gamma"), &[c], vec![1.0; c], ParamKind::Trainable)?;
        self.store
            .insert(&format!("{prefix}.beta"), &[c], vec![0.0; c], ParamKind::Trainable)?;
        self.store
            .insert(&format!("{prefix}.running_mean"), &[c], vec![0.0; c], ParamKind::Buffer)?;
        self.store
            .insert(&format!("{prefix}.running_var"), &[c], vec![1.0; c], ParamKind::Buffer)?;
        Ok(())
    }

    fn conv_bn(&mut self, prefix: &str, cout: usize, cin: usize) -> Result<()> {
        self.conv(&format!("{prefix}.conv"), cout, cin, 3, false)?;
        self.bn(&format!("{prefix}.bn"), cout)
    }
}

impl Manet {
    /// Fresh model with He-uniform convolutions, unit/zero batch-norm affine,
    /// PAB residual gate 0 and zero biases.
    pub fn new(config: ManetConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(init_seed, "manet.init");
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let mut cin = config.in_channels;
        for (i, &width) in config.stage_widths.iter().enumerate() {
            b.conv_bn(&stage(i), width, cin)?;
            b.conv_bn(&format!("{}.down", stage(i)), width, width)?;
            cin = width;
        }
        let c = config.bottleneck_channels;
        let inner = config.pab_inner();
        b.conv("decoder.pab.query", inner, c, 1, true)?;
        b.conv("decoder.pab.key", inner, c, 1, true)?;
        b.conv("decoder.pab.value", c, c, 1, true)?;
        b.store
            .insert("decoder.pab.gamma", &[1], vec![0.0], ParamKind::Trainable)?;
        for j in (0..config.mfab_count).rev() {
            let coarse = config.stage_widths[j + 1];
            let width = config.stage_widths[j];
            let hidden = (width / config.mfab_reduction).max(1);
            b.conv_bn(&format!("{}.fuse", mfab(j)), width, coarse + width)?;
            b.conv(&format!("{}.gate.fc1", mfab(j)), hidden, width, 1, true)?;
            b.conv(&format!("{}.gate.fc2", mfab(j)), width, hidden, 1, true)?;
        }
        b.conv("head.conv", config.head_channels, config.stage_widths[0], 1, true)?;
        Ok(Self {
            config,
            params: b.store,
        })
    }

    /// Model from an existing parameter set; the layout must match `config`.
    pub fn from_params(config: ManetConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        let bad = template.params.layout_mismatches(&params);
        if !bad.is_empty() {
            return Err(Error::Compatibility(format!(
                "parameter layout mismatch: {}",
                bad.join(", ")
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ManetConfig {
        &self.config
    }

    /// The ordered `name → value` registry.
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let n = self.config.input_resolution;
        match image.shape() {
            &[_, c, h, w] if c == self.config.in_channels && h == n && w == n => Ok(()),
            s => Err(Error::shape(
                "manet.input",
                format!("expected (N, {}, {n}, {n}), got {s:?}", self.config.in_channels),
            )),
        }
    }

    fn conv_bn_swish(&self, fw: &Forward<'_>, prefix: &str, x: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
        let w = fw.param(&format!("{prefix}.conv.weight"))?;
        let y = nn::conv2d(x, &w, None, spec)?;
        Ok(fw.batch_norm(&format!("{prefix}.bn"), &y)?.swish())
    }

    fn conv1x1(&self, fw: &Forward<'_>, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let w = fw.param(&format!("{prefix}.weight"))?;
        let b = fw.param(&format!("{prefix}.bias"))?;
        nn::conv2d(x, &w, Some(&b), Conv2dSpec::default())
    }

    /// Run one encoder stage on its input.
    pub fn encoder_stage(&self, fw: &Forward<'_>, index: usize, x: &Tensor) -> Result<Tensor> {
        let same = Conv2dSpec { stride: 1, padding: 1 };
        let down = Conv2dSpec {
            stride: self.config.downsample[index],
            padding: 1,
        };
        let h = self.conv_bn_swish(fw, &stage(index), x, same)?;
        self.conv_bn_swish(fw, &format!("{}.down", stage(index)), &h, down)
    }

    pub fn encode(&self, fw: &Forward<'_>, image: &Tensor) -> Result<FeaturePyramid> {
        self.check_input(image)?;
        let mut levels = Vec::with_capacity(self.config.stages());
        let mut x = image.clone();
        for i in 0..self.config.stages() {
            x = self.encoder_stage(fw, i, &x)?;
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels })
    }

    /// Spatial self-attention with a learnable residual gate:
    /// `out = γ · (V · Aᵀ) + F`, `A = softmax_keys(Qᵀ K / √d)`.
    pub fn pab_forward(&self, fw: &Forward<'_>, feature: &Tensor) -> Result<PabOutput> {
        let (n, c, h, w) = match feature.shape() {
            &[n, c, h, w] if c == self.config.bottleneck_channels => (n, c, h, w),
            s => {
                return Err(Error::shape(
                    "pab",
                    format!("expected {} channels, got {s:?}", self.config.bottleneck_channels),
                ))
            }
        };
        let hw = h * w;
        let d = self.config.pab_inner();
        let q = self.conv1x1(fw, "decoder.pab.query", feature)?.reshape(&[n, d, hw])?;
        let k = self.conv1x1(fw, "decoder.pab.key", feature)?.reshape(&[n, d, hw])?;
        let v = self.conv1x1(fw, "decoder.pab.value", feature)?.reshape(&[n, c, hw])?;
        let logits = q.transpose_last2()?.matmul(&k)?.scale(1.0 / (d as f64).sqrt());
        let attention = logits.softmax(2)?;
        let attended = v.matmul(&attention.transpose_last2()?)?.reshape(&[n, c, h, w])?;
        let gamma = fw.param("decoder.pab.gamma")?;
        let out = attended.mul(&gamma)?.add(feature)?;
        Ok(PabOutput {
            feature: out,
            attention,
        })
    }

    /// Fuse a decoder feature with the skip feature one level finer, then
    /// gate channels: `out = fused · σ(fc2(swish(fc1(gap(fused)))))`.
    pub fn mfab_forward(&self, fw: &Forward<'_>, index: usize, decoder: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let factor = self.config.downsample.get(index + 1).copied().unwrap_or(0);
        let (ds, ss) = (decoder.shape(), skip.shape());
        let ok = ds.len() == 4 && ss.len() == 4 && ds[0] == ss[0] && ss[2] == ds[2] * factor && ss[3] == ds[3] * factor;
        if !ok {
            return Err(Error::shape(
                "mfab",
                format!("decoder {ds:?} and skip {ss:?} are not one pyramid level apart"),
            ));
        }
        let prefix = mfab(index);
        let up = nn::bilinear_resize(decoder, ss[2], ss[3])?;
        let cat = concat(&[&up, skip], 1)?;
        let fused = self.conv_bn_swish(
            fw,
            &format!("{prefix}.fuse"),
            &cat,
            Conv2dSpec { stride: 1, padding: 1 },
        )?;
        let pooled = nn::global_avg_pool(&fused)?;
        let hidden = self.conv1x1(fw, &format!("{prefix}.gate.fc1"), &pooled)?.swish();
        let gates = self.conv1x1(fw, &format!("{prefix}.gate.fc2"), &hidden)?.sigmoid();
        fused.mul(&gates)
    }

    pub fn decode(&self, fw: &Forward<'_>, pyramid: &FeaturePyramid) -> Result<Tensor> {
        if pyramid.levels.len() != self.config.mfab_count + 1 {
            return Err(Error::Config(format!(
                "{} MFABs cannot decode a {}-level pyramid",
                self.config.mfab_count,
                pyramid.levels.len()
            )));
        }
        let mut x = self.pab_forward(fw, pyramid.bottleneck())?.feature;
        for j in (0..self.config.mfab_count).rev() {
            x = self.mfab_forward(fw, j, &x, &pyramid.levels[j])?;
        }
        Ok(x)
    }

    /// Head on a decoder feature: 1×1 conv, upsample to input size, sigmoid.
    pub fn head(&self, fw: &Forward<'_>, decoded: &Tensor) -> Result<SegmentOutput> {
        let n = self.config.input_resolution;
        let coarse = self.conv1x1(fw, "head.conv", decoded)?;
        let logits = nn::bilinear_resize(&coarse, n, n)?;
        let probs = logits.sigmoid();
        Ok(SegmentOutput { logits, probs })
    }

    pub fn segment(&self, fw: &Forward<'_>, image: &Tensor) -> Result<SegmentOutput> {
        let pyramid = self.encode(fw, image)?;
        let decoded = self.decode(fw, &pyramid)?;
        self.head(fw, &decoded)
    }

    /// Eval-mode probabilities for a batch, no graph recorded.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let fw = Forward::eval(&self.params);
        Ok(self.segment(&fw, image)?.probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| ((i * 7919 % 997) as f64 / 997.0 - 0.5) * scale)
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn desk_shapes() {
        let m = Manet::new(ManetConfig::desk(), 1).unwrap();
        let fw = Forward::eval(m.params());
        let x = ramp(&[2, 3, 64, 64], 1.0);
        let pyr = m.encode(&fw, &x).unwrap();
        let sides: Vec<_> = pyr.levels.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sides, vec![32, 16, 8, 4]);
        assert_eq!(pyr.bottleneck().shape(), &[2, 32, 4, 4]);
        let dec = m.decode(&fw, &pyr).unwrap();
        assert_eq!(dec.shape(), &[2, 8, 32, 32]);
        let out = m.head(&fw, &dec).unwrap();
        assert_eq!(out.probs.shape(), &[2, 1, 64, 64]);
        assert!(out.probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn three_mfabs_for_four_stages() {
        let m = Manet::new(ManetConfig::desk(), 1).unwrap();
        let mfabs: std::collections::BTreeSet<_> = m
            .params()
            .names()
            .filter_map(|n| n.strip_prefix("decoder.mfab"))
            .map(|rest| rest.split('.').next().unwrap().to_string())
            .collect();
        assert_eq!(mfabs.len(), 3);
    }

    #[test]
    fn wrong_input_is_shape_error() {
        let m = Manet::new(ManetConfig::desk(), 1).unwrap();
        let fw = Forward::eval(m.params());
        let err = m.segment(&fw, &Tensor::zeros(&[1, 3, 32, 32])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn zero_image_gives_finite_outputs() {
        let m = Manet::new(ManetConfig::desk(), 3).unwrap();
        let p = m.predict(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert!(p.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pab_is_identity_at_init() {
        let m = Manet::new(ManetConfig::desk(), 5).unwrap();
        let fw = Forward::eval(m.params());
        let f = ramp(&[1, 32, 4, 4], 3.0);
        let out = m.pab_forward(&fw, &f).unwrap();
        assert_eq!(out.feature.data(), f.data());
        assert_eq!(out.attention.shape(), &[1, 16, 16]);
        for row in out.attention.data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn uniform_feature_gives_uniform_attention() {
        let m = Manet::new(ManetConfig::desk(), 5).unwrap();
        let fw = Forward::eval(m.params());
        let mut data = Vec::new();
        for c in 0..32 {
            data.extend(std::iter::repeat_n(c as f64 * 0.1 - 1.0, 16));
        }
        let f = Tensor::new(&[1, 32, 4, 4], data).unwrap();
        let out = m.pab_forward(&fw, &f).unwrap();
        for &a in out.attention.data() {
            assert!((a - 1.0 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_gates_pass_fused_feature() {
        let mut m = Manet::new(ManetConfig::desk(), 9).unwrap();
        m.params_mut()
            .get_mut("decoder.mfab2.gate.fc2.bias")
            .unwrap()
            .data
            .fill(1e3);
        let fw = Forward::eval(m.params());
        let d = ramp(&[1, 32, 4, 4], 2.0);
        let s = ramp(&[1, 24, 8, 8], 2.0);
        let gated = m.mfab_forward(&fw, 2, &d, &s).unwrap();
        assert_eq!(gated.shape(), &[1, 24, 8, 8]);

        let up = nn::bilinear_resize(&d, 8, 8).unwrap();
        let cat = concat(&[&up, &s], 1).unwrap();
        let fused = m
            .conv_bn_swish(&fw, "decoder.mfab2.fuse", &cat, Conv2dSpec { stride: 1, padding: 1 })
            .unwrap();
        assert_eq!(gated.data(), fused.data());
    }

    #[test]
    fn mfab_rejects_level_mismatch() {
        let m = Manet::new(ManetConfig::desk(), 9).unwrap();
        let fw = Forward::eval(m.params());
        let err = m
            .mfab_forward(&fw, 2, &Tensor::zeros(&[1, 32, 4, 4]), &Tensor::zeros(&[1, 24, 16, 16]))
            .unwrap_err();
        assert!(matches!(err, Error::Shape { op: "mfab", .. }));
    }

    #[test]
    fn zero_head_gives_half() {
        let mut m = Manet::new(ManetConfig::desk(), 2).unwrap();
        for name in ["head.conv.weight", "head.conv.bias"] {
            m.params_mut().get_mut(name).unwrap().data.fill(0.0);
        }
        let p = m.predict(&ramp(&[1, 3, 64, 64], 1.0)).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn same_seed_same_model() {
        let a = Manet::new(ManetConfig::desk(), 11).unwrap();
        let b = Manet::new(ManetConfig::desk(), 11).unwrap();
        assert_eq!(a, b);
        let x = ramp(&[1, 3, 64, 64], 1.0);
        assert_eq!(a.predict(&x).unwrap().data(), b.predict(&x).unwrap().data());
        assert!(a.params().names().any(|n| n.starts_with(HEAD_PREFIX)));
    }
}
