//! Convolution, normalization, pooling and resampling kernels on `NCHW` tensors.

use super::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

/// `floor((n + 2p − k)/s) + 1`
pub fn conv_out_dim(n: usize, k: usize, spec: Conv2dSpec) -> Option<usize> {
    let padded = n + 2 * spec.padding;
    (padded >= k && spec.stride > 0).then(|| (padded - k) / spec.stride + 1)
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(Error::shape(op, format!("expected NCHW, got {s:?}"))),
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfold one image `(cin,h,w)` into `(cin·kh·kw, oh·ow)`.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.cols();
        for c in 0..self.cin {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatter-add columns back into an image.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.cols();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = c * self.h * self.w + iy as usize * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                img[base + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding. `weight` is `(cout, cin, kh, kw)`,
/// `bias` is `(cout)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
    let [n, cin, h, w] = dims4("conv2d", x)?;
    let [cout, wcin, kh, kw] = dims4("conv2d", weight)?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {:?} has {cin} channels, weight {:?} expects {wcin}",
                x.shape(),
                weight.shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {cout} outputs", b.shape()),
            ));
        }
    }
    let oh = conv_out_dim(h, kh, spec);
    let ow = conv_out_dim(w, kw, spec);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} does not fit input {h}x{w} with {spec:?}"),
        ));
    };
    let geom = ConvGeom {
        cin,
        h,
        w,
        kh,
        kw,
        oh,
        ow,
        stride: spec.stride,
        pad: spec.padding,
    };
    let (q, p) = (geom.rows(), geom.cols());
    let mut out = vec![0.0; n * cout * p];
    let mut cols = vec![0.0; q * p];
    for b in 0..n {
        geom.im2col(&x.data()[b * cin * h * w..(b + 1) * cin * h * w], &mut cols);
        let dst = &mut out[b * cout * p..(b + 1) * cout * p];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        gemm_nn(cout, q, p, weight.data(), &cols, dst);
    }

    let has_bias = bias.is_some();
    let backward = Box::new(move |g: &[f64], parents: &[Tensor], _: &[f64]| {
        let (x, weight) = (&parents[0], &parents[1]);
        let mut gx = x.requires_grad().then(|| vec![0.0; x.numel()]);
        let mut gw = weight.requires_grad().then(|| vec![0.0; weight.numel()]);
        let mut cols = vec![0.0; q * p];
        let mut dcols = vec![0.0; q * p];
        for b in 0..n {
            let gb = &g[b * cout * p..(b + 1) * cout * p];
            if let Some(gw) = gw.as_mut() {
                geom.im2col(&x.data()[b * cin * h * w..(b + 1) * cin * h * w], &mut cols);
                gemm_nt(cout, p, q, gb, &cols, gw);
            }
            if let Some(gx) = gx.as_mut() {
                dcols.fill(0.0);
                gemm_tn(q, cout, p, weight.data(), gb, &mut dcols);
                geom.col2im(&dcols, &mut gx[b * cin * h * w..(b + 1) * cin * h * w]);
            }
        }
        let mut grads = vec![gx, gw];
        if has_bias {
            let gbias = parents[2].requires_grad().then(|| {
                let mut acc = vec![0.0; cout];
                for b in 0..n {
                    for (co, a) in acc.iter_mut().enumerate() {
                        let start = (b * cout + co) * p;
                        *a += g[start..start + p].iter().sum::<f64>();
                    }
                }
                acc
            });
            grads.push(gbias);
        }
        grads
    });
    let parents: Vec<&Tensor> = match bias {
        Some(b) => vec![x, weight, b],
        None => vec![x, weight],
    };
    Ok(Tensor::from_op(
        "conv2d",
        vec![n, cout, oh, ow],
        out,
        &parents,
        backward,
    ))
}

/// Normalization statistics source for [`batch_norm2d`].
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

/// Per-channel statistics observed on a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n−1) variance, the quantity folded into running estimates.
    pub var_unbiased: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over `(N, H, W)` per channel, followed by the affine
/// `gamma·x̂ + beta`. Returns the batch statistics in train mode.
pub fn batch_norm2d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: NormMode<'_>,
) -> Result<(Tensor, Option<BatchStats>)> {
    let [n, c, h, w] = dims4("batch_norm2d", x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batch_norm2d",
            format!("affine {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    let hw = h * w;
    let m = n * hw;
    let xd = x.data();
    let channel = move |ch: usize| (0..n).flat_map(move |b| (b * c + ch) * hw..(b * c + ch + 1) * hw);

    let (mean, inv_std, stats) = match mode {
        NormMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mu = channel(ch).map(|i| xd[i]).sum::<f64>() / m as f64;
                let v = channel(ch).map(|i| (xd[i] - mu).powi(2)).sum::<f64>() / m as f64;
                mean[ch] = mu;
                var[ch] = v;
            }
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let correction = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            let stats = BatchStats {
                mean: mean.clone(),
                var_unbiased: var.iter().map(|v| v * correction).collect(),
            };
            (mean, inv, Some(stats))
        }
        NormMode::Eval {
            running_mean,
            running_var,
        } => {
            if running_mean.len() != c || running_var.len() != c {
                return Err(Error::shape("batch_norm2d", "running statistics length mismatch"));
            }
            let inv = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (running_mean.to_vec(), inv, None)
        }
    };

    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for ch in 0..c {
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for i in channel(ch) {
            let v = (xd[i] - mean[ch]) * inv_std[ch];
            xhat[i] = v;
            out[i] = g * v + bt;
        }
    }

    let train = matches!(mode, NormMode::Train);
    let backward = Box::new(move |gy: &[f64], parents: &[Tensor], _: &[f64]| {
        let gamma = &parents[1];
        let mut gx = parents[0].requires_grad().then(|| vec![0.0; gy.len()]);
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in channel(ch) {
                sum_g += gy[i];
                sum_gx += gy[i] * xhat[i];
            }
            ggamma[ch] = sum_gx;
            gbeta[ch] = sum_g;
            if let Some(gx) = gx.as_mut() {
                let scale = gamma.data()[ch] * inv_std[ch];
                if train {
                    let mf = m as f64;
                    for i in channel(ch) {
                        gx[i] = scale * (gy[i] - sum_g / mf - xhat[i] * sum_gx / mf);
                    }
                } else {
                    for i in channel(ch) {
                        gx[i] = scale * gy[i];
                    }
                }
            }
        }
        vec![
            gx,
            parents[1].requires_grad().then_some(ggamma),
            parents[2].requires_grad().then_some(gbeta),
        ]
    });
    let y = Tensor::from_op("batch_norm2d", x.shape().to_vec(), out, &[x, gamma, beta], backward);
    Ok((y, stats))
}

/// `(N,C,H,W) -> (N,C,1,1)` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = dims4("global_avg_pool", x)?;
    let hw = h * w;
    let out: Vec<f64> = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    let backward = Box::new(move |g: &[f64], _: &[Tensor], _: &[f64]| {
        let mut gx = Vec::with_capacity(n * c * hw);
        for &gv in g {
            gx.extend(std::iter::repeat_n(gv / hw as f64, hw));
        }
        vec![Some(gx)]
    });
    Ok(Tensor::from_op(
        "global_avg_pool",
        vec![n, c, 1, 1],
        out,
        &[x],
        backward,
    ))
}

/// Source taps along one axis for half-pixel-centred bilinear resampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Taps for resizing `src` samples to `dst` samples (`align_corners = false`).
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of every `(H, W)` plane to `(out_h, out_w)`.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = dims4("bilinear_resize", x)?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape("bilinear_resize", "zero-sized plane"));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let planes = n * c;
    let mut out = vec![0.0; planes * out_h * out_w];
    for (pl, dst) in out.chunks_mut(out_h * out_w).enumerate() {
        let src = &x.data()[pl * h * w..(pl + 1) * h * w];
        for (oy, t) in ty.iter().enumerate() {
            let r0 = &src[t.lo * w..(t.lo + 1) * w];
            let r1 = &src[t.hi * w..(t.hi + 1) * w];
            for (ox, s) in tx.iter().enumerate() {
                let top = r0[s.lo] * (1.0 - s.frac) + r0[s.hi] * s.frac;
                let bot = r1[s.lo] * (1.0 - s.frac) + r1[s.hi] * s.frac;
                dst[oy * out_w + ox] = top * (1.0 - t.frac) + bot * t.frac;
            }
        }
    }
    let backward = Box::new(move |g: &[f64], _: &[Tensor], _: &[f64]| {
        let mut gx = vec![0.0; planes * h * w];
        for pl in 0..planes {
            let gsrc = &g[pl * out_h * out_w..(pl + 1) * out_h * out_w];
            let dst = &mut gx[pl * h * w..(pl + 1) * h * w];
            for (oy, t) in ty.iter().enumerate() {
                for (ox, s) in tx.iter().enumerate() {
                    let gv = gsrc[oy * out_w + ox];
                    let (wy0, wy1) = (1.0 - t.frac, t.frac);
                    let (wx0, wx1) = (1.0 - s.frac, s.frac);
                    dst[t.lo * w + s.lo] += gv * wy0 * wx0;
                    dst[t.lo * w + s.hi] += gv * wy0 * wx1;
                    dst[t.hi * w + s.lo] += gv * wy1 * wx0;
                    dst[t.hi * w + s.hi] += gv * wy1 * wx1;
                }
            }
        }
        vec![Some(gx)]
    });
    Ok(Tensor::from_op(
        "bilinear_resize",
        vec![n, c, out_h, out_w],
        out,
        &[x],
        backward,
    ))
}
