//! The individual transforms. Every function is pure given its parameters.
//!
//! Geometric kernels come in image and mask flavours; masks are resampled
//! with the same geometry as images and re-binarized at 0.5.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};
use crate::seed::Rng;

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(what()))
    }
}

fn binarize(img: &Image) -> Mask {
    Mask {
        height: img.height,
        width: img.width,
        data: img.data.iter().map(|&v| u8::from(v >= 0.5)).collect(),
    }
}

/// Remap every plane of `img` by an index function `(row, col) -> (src_row, src_col)`.
fn remap_exact(img: &Image, h: usize, w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Image {
    let mut out = Image::new(img.channels, h, w);
    for c in 0..img.channels {
        for r in 0..h {
            for q in 0..w {
                let (sr, sq) = f(r, q);
                out.set(c, r, q, img.get(c, sr, sq));
            }
        }
    }
    out
}

fn remap_mask(mask: &Mask, h: usize, w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Mask {
    let mut out = Mask::zeros(h, w);
    for r in 0..h {
        for q in 0..w {
            let (sr, sq) = f(r, q);
            out.set(r, q, mask.get(sr, sq));
        }
    }
    out
}

/// Crop window for a side-fraction crop with offsets given as fractions of
/// the available slack: `(top, left, height, width)`.
pub fn crop_box(h: usize, w: usize, fraction: f64, top: f64, left: f64) -> Result<(usize, usize, usize, usize)> {
    check(fraction > 0.0 && fraction <= 1.0, || {
        format!("crop fraction {fraction} outside (0, 1]")
    })?;
    check((0.0..=1.0).contains(&top) && (0.0..=1.0).contains(&left), || {
        format!("crop offsets ({top}, {left}) outside [0, 1]")
    })?;
    let ch = ((h as f64 * fraction).round() as usize).clamp(1, h);
    let cw = ((w as f64 * fraction).round() as usize).clamp(1, w);
    let t = ((top * (h - ch + 1) as f64).floor() as usize).min(h - ch);
    let l = ((left * (w - cw + 1) as f64).floor() as usize).min(w - cw);
    Ok((t, l, ch, cw))
}

pub fn random_crop(img: &Image, fraction: f64, top: f64, left: f64) -> Result<Image> {
    let (t, l, ch, cw) = crop_box(img.height, img.width, fraction, top, left)?;
    Ok(img.crop(t, l, ch, cw))
}

pub fn random_crop_mask(mask: &Mask, fraction: f64, top: f64, left: f64) -> Result<Mask> {
    let (t, l, ch, cw) = crop_box(mask.height, mask.width, fraction, top, left)?;
    Ok(mask.crop(t, l, ch, cw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

pub fn flip(img: &Image, axis: FlipAxis) -> Image {
    let (h, w) = (img.height, img.width);
    remap_exact(img, h, w, |r, q| match axis {
        FlipAxis::Horizontal => (r, w - 1 - q),
        FlipAxis::Vertical => (h - 1 - r, q),
    })
}

pub fn flip_mask(mask: &Mask, axis: FlipAxis) -> Mask {
    let (h, w) = (mask.height, mask.width);
    remap_mask(mask, h, w, |r, q| match axis {
        FlipAxis::Horizontal => (r, w - 1 - q),
        FlipAxis::Vertical => (h - 1 - r, q),
    })
}

type SourceIndex = Box<dyn Fn(usize, usize) -> (usize, usize)>;

/// Counter-clockwise rotation by `k · 90°`.
fn rot_src(k: u8, h: usize, w: usize) -> (usize, usize, SourceIndex) {
    match k % 4 {
        0 => (h, w, Box::new(|r, q| (r, q))),
        1 => (w, h, Box::new(move |r, q| (q, w - 1 - r))),
        2 => (h, w, Box::new(move |r, q| (h - 1 - r, w - 1 - q))),
        _ => (w, h, Box::new(move |r, q| (h - 1 - q, r))),
    }
}

pub fn rotate90(img: &Image, k: u8) -> Image {
    let (oh, ow, f) = rot_src(k, img.height, img.width);
    remap_exact(img, oh, ow, f)
}

pub fn rotate90_mask(mask: &Mask, k: u8) -> Mask {
    let (oh, ow, f) = rot_src(k, mask.height, mask.width);
    remap_mask(mask, oh, ow, f)
}

/// Piecewise-linear source coordinate for each output pixel centre. Cell `i`
/// of the output is stretched by `steps[i]`; knots are renormalized so the
/// map spans the full axis.
pub fn distortion_map(n: usize, steps: &[f64]) -> Result<Vec<f64>> {
    check(!steps.is_empty(), || "grid distortion needs ≥ 1 step".into())?;
    check(steps.iter().all(|&s| s > 0.0 && s.is_finite()), || {
        "grid distortion steps must be positive".into()
    })?;
    let total: f64 = steps.iter().sum();
    let cells = steps.len() as f64;
    let mut knots = vec![0.0];
    for s in steps {
        knots.push(knots.last().unwrap() + s / total * n as f64);
    }
    Ok((0..n)
        .map(|i| {
            let x = i as f64 + 0.5;
            let pos = x / n as f64 * cells;
            let cell = (pos.floor() as usize).min(steps.len() - 1);
            let frac = pos - cell as f64;
            knots[cell] + frac * (knots[cell + 1] - knots[cell]) - 0.5
        })
        .collect())
}

fn sample_separable(img: &Image, map_r: &[f64], map_c: &[f64]) -> Image {
    let mut out = Image::new(img.channels, map_r.len(), map_c.len());
    for c in 0..img.channels {
        for (r, &sr) in map_r.iter().enumerate() {
            for (q, &sq) in map_c.iter().enumerate() {
                out.set(c, r, q, img.sample_bilinear(c, sr, sq));
            }
        }
    }
    out
}

pub fn grid_distortion(img: &Image, steps_x: &[f64], steps_y: &[f64]) -> Result<Image> {
    let map_c = distortion_map(img.width, steps_x)?;
    let map_r = distortion_map(img.height, steps_y)?;
    Ok(sample_separable(img, &map_r, &map_c))
}

pub fn grid_distortion_mask(mask: &Mask, steps_x: &[f64], steps_y: &[f64]) -> Result<Mask> {
    Ok(binarize(&grid_distortion(&mask.to_image(), steps_x, steps_y)?))
}

fn shuffle_src(h: usize, w: usize, grid: usize, perm: &[usize]) -> Result<impl Fn(usize, usize) -> (usize, usize)> {
    check(grid >= 1 && perm.len() == grid * grid, || {
        format!("grid shuffle needs a permutation of {} cells", grid * grid)
    })?;
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        check(p < perm.len() && !seen[p], || {
            "grid shuffle order is not a permutation".into()
        })?;
        seen[p] = true;
    }
    let (ch, cw) = (h / grid, w / grid);
    let perm = perm.to_vec();
    Ok(move |r: usize, q: usize| {
        if ch == 0 || cw == 0 || r >= ch * grid || q >= cw * grid {
            return (r, q);
        }
        let cell = (r / ch) * grid + q / cw;
        let src = perm[cell];
        ((src / grid) * ch + r % ch, (src % grid) * cw + q % cw)
    })
}

/// Output cell `i` takes source cell `perm[i]`. Rows/columns beyond the
/// largest multiple of `grid` stay in place.
pub fn grid_shuffle(img: &Image, grid: usize, perm: &[usize]) -> Result<Image> {
    let f = shuffle_src(img.height, img.width, grid, perm)?;
    Ok(remap_exact(img, img.height, img.width, f))
}

pub fn grid_shuffle_mask(mask: &Mask, grid: usize, perm: &[usize]) -> Result<Mask> {
    let f = shuffle_src(mask.height, mask.width, grid, perm)?;
    Ok(remap_mask(mask, mask.height, mask.width, f))
}

pub fn resize(img: &Image, height: usize, width: usize) -> Result<Image> {
    check(height > 0 && width > 0, || "resize target must be non-empty".into())?;
    Ok(img.resize_bilinear(height, width))
}

pub fn resize_mask(mask: &Mask, height: usize, width: usize) -> Result<Mask> {
    Ok(binarize(&resize(&mask.to_image(), height, width)?))
}

fn luma(img: &Image) -> Vec<f64> {
    if img.channels < 3 {
        return img.plane(0).to_vec();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..r.len())
        .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
        .collect()
}

fn clahe_plane(plane: &[f64], h: usize, w: usize, clip_limit: f64, tiles: usize) -> Vec<f64> {
    const BINS: usize = 256;
    let ty = tiles.min(h).max(1);
    let tx = tiles.min(w).max(1);
    let bound = |k: usize, n: usize, t: usize| k * n / t;
    let bin = |v: f64| ((v.clamp(0.0, 1.0) * 255.0).round() as usize).min(BINS - 1);
    let mut luts = vec![vec![0.0; BINS]; ty * tx];
    for a in 0..ty {
        for b in 0..tx {
            let (r0, r1) = (bound(a, h, ty), bound(a + 1, h, ty));
            let (c0, c1) = (bound(b, w, tx), bound(b + 1, w, tx));
            let mut hist = vec![0.0f64; BINS];
            for r in r0..r1 {
                for c in c0..c1 {
                    hist[bin(plane[r * w + c])] += 1.0;
                }
            }
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            let limit = (clip_limit * count / BINS as f64).max(1.0);
            let mut excess = 0.0;
            for v in &mut hist {
                if *v > limit {
                    excess += *v - limit;
                    *v = limit;
                }
            }
            let share = excess / BINS as f64;
            let lut = &mut luts[a * tx + b];
            let mut acc = 0.0;
            for (k, v) in hist.iter().enumerate() {
                acc += v + share;
                lut[k] = (acc / count).min(1.0);
            }
        }
    }
    // bilinear blend between the four nearest tile mappings
    let centre = |k: usize, n: usize, t: usize| (bound(k, n, t) + bound(k + 1, n, t)) as f64 / 2.0 - 0.5;
    let locate = |x: f64, n: usize, t: usize| -> (usize, usize, f64) {
        if x <= centre(0, n, t) {
            return (0, 0, 0.0);
        }
        for k in 0..t - 1 {
            let (lo, hi) = (centre(k, n, t), centre(k + 1, n, t));
            if x <= hi {
                return (k, k + 1, (x - lo) / (hi - lo));
            }
        }
        (t - 1, t - 1, 0.0)
    };
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let (a0, a1, fa) = locate(r as f64, h, ty);
        for c in 0..w {
            let (b0, b1, fb) = locate(c as f64, w, tx);
            let k = bin(plane[r * w + c]);
            let top = luts[a0 * tx + b0][k] * (1.0 - fb) + luts[a0 * tx + b1][k] * fb;
            let bot = luts[a1 * tx + b0][k] * (1.0 - fb) + luts[a1 * tx + b1][k] * fb;
            out[r * w + c] = top * (1.0 - fa) + bot * fa;
        }
    }
    out
}

/// Contrast-limited adaptive histogram equalization on a `tiles × tiles`
/// grid, applied to luma; colour images are shifted by the luma change.
pub fn clahe(img: &Image, clip_limit: f64, tiles: usize) -> Result<Image> {
    check(clip_limit > 0.0, || {
        format!("CLAHE clip limit {clip_limit} must be > 0")
    })?;
    check(tiles >= 1, || "CLAHE needs ≥ 1 tile".into())?;
    let y = luma(img);
    let eq = clahe_plane(&y, img.height, img.width, clip_limit, tiles);
    let mut out = img.clone();
    for c in 0..img.channels {
        for (i, v) in out.plane_mut(c).iter_mut().enumerate() {
            *v = if img.channels < 3 { eq[i] } else { *v + eq[i] - y[i] };
        }
    }
    out.clamp01();
    Ok(out)
}

/// `v·(1 + contrast) + brightness`, clipped.
pub fn brightness_contrast(img: &Image, brightness: f64, contrast: f64) -> Result<Image> {
    check(
        brightness.abs() <= 1.0 && contrast > -1.0 && contrast.is_finite(),
        || format!("brightness {brightness} / contrast {contrast} out of range"),
    )?;
    let mut out = img.clone();
    out.data
        .iter_mut()
        .for_each(|v| *v = *v * (1.0 + contrast) + brightness);
    out.clamp01();
    Ok(out)
}

/// Output channel `i` is input channel `perm[i]`.
pub fn channel_shuffle(img: &Image, perm: &[usize]) -> Result<Image> {
    if img.channels != perm.len() {
        if img.channels == 1 {
            return Ok(img.clone());
        }
        return Err(Error::Config(format!(
            "channel permutation of length {} for {} channels",
            perm.len(),
            img.channels
        )));
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        check(p < perm.len() && !seen[p], || {
            "channel order is not a permutation".into()
        })?;
        seen[p] = true;
    }
    let mut out = img.clone();
    for (i, &p) in perm.iter().enumerate() {
        out.plane_mut(i).copy_from_slice(img.plane(p));
    }
    Ok(out)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn map_hsv(img: &Image, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) -> Image {
    let mut out = img.clone();
    if img.channels < 3 {
        for v in &mut out.data {
            *v = f(0.0, 0.0, *v).2;
        }
        out.clamp01();
        return out;
    }
    let n = img.height * img.width;
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(img.data[i], img.data[n + i], img.data[2 * n + i]);
        let (h, s, v) = f(h, s, v);
        let (r, g, b) = hsv_to_rgb(h, s.clamp(0.0, 1.0), v.clamp(0.0, 1.0));
        out.data[i] = r;
        out.data[n + i] = g;
        out.data[2 * n + i] = b;
    }
    out.clamp01();
    out
}

/// Brightness, contrast and saturation factors around 1 and a hue shift
/// in turns, applied in that order.
pub fn color_jitter(img: &Image, brightness: f64, contrast: f64, saturation: f64, hue: f64) -> Result<Image> {
    check(brightness >= 0.0 && contrast >= 0.0 && saturation >= 0.0, || {
        "colour jitter factors must be ≥ 0".into()
    })?;
    check(hue.abs() <= 0.5, || format!("hue shift {hue} outside [-0.5, 0.5]"))?;
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v *= brightness);
    out.clamp01();
    let y = luma(&out);
    let mean = y.iter().sum::<f64>() / y.len().max(1) as f64;
    out.data.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean);
    out.clamp01();
    if out.channels >= 3 {
        let y = luma(&out);
        for c in 0..out.channels {
            for (i, v) in out.plane_mut(c).iter_mut().enumerate() {
                *v = y[i] + (*v - y[i]) * saturation;
            }
        }
        out.clamp01();
        out = map_hsv(&out, |h, s, v| (h + hue, s, v));
    }
    Ok(out)
}

/// Additive shifts on the 0..255 scale: hue (of a full turn), saturation
/// and value.
pub fn hue_saturation_value(img: &Image, hue: f64, sat: f64, val: f64) -> Result<Image> {
    check(hue.abs() <= 255.0 && sat.abs() <= 255.0 && val.abs() <= 255.0, || {
        "HSV shifts must lie within ±255".into()
    })?;
    Ok(map_hsv(img, |h, s, v| {
        (h + hue / 255.0, s + sat / 255.0, v + val / 255.0)
    }))
}

/// Correlate each plane with a `k×k` kernel, replicating border pixels.
pub fn convolve(img: &Image, kernel: &[f64], k: usize) -> Image {
    let (h, w) = (img.height as isize, img.width as isize);
    let half = (k / 2) as isize;
    let mut out = Image::new(img.channels, img.height, img.width);
    for c in 0..img.channels {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for r in 0..h {
            for q in 0..w {
                let mut acc = 0.0;
                for i in 0..k as isize {
                    let rr = (r + i - half).clamp(0, h - 1);
                    for j in 0..k as isize {
                        let qq = (q + j - half).clamp(0, w - 1);
                        acc += kernel[(i * k as isize + j) as usize] * src[(rr * w + qq) as usize];
                    }
                }
                dst[(r * w + q) as usize] = acc;
            }
        }
    }
    out
}

fn check_kernel(k: usize) -> Result<()> {
    check(k >= 1 && k % 2 == 1, || format!("kernel size {k} must be odd and ≥ 1"))
}

/// Box blur.
pub fn blur(img: &Image, k: usize) -> Result<Image> {
    check_kernel(k)?;
    let kernel = vec![1.0 / (k * k) as f64; k * k];
    Ok(convolve(img, &kernel, k))
}

/// Normalized line kernel through the centre at `angle` degrees (a multiple of 45).
pub fn motion_kernel(k: usize, angle: u16) -> Result<Vec<f64>> {
    check_kernel(k)?;
    check(angle.is_multiple_of(45) && angle < 180, || {
        format!("motion angle {angle} must be 0, 45, 90 or 135")
    })?;
    let mut kernel = vec![0.0; k * k];
    let m = k / 2;
    for t in 0..k {
        let (r, c) = match angle {
            0 => (m, t),
            45 => (k - 1 - t, t),
            90 => (t, m),
            _ => (t, t),
        };
        kernel[r * k + c] = 1.0 / k as f64;
    }
    Ok(kernel)
}

pub fn motion_blur(img: &Image, k: usize, angle: u16) -> Result<Image> {
    Ok(convolve(img, &motion_kernel(k, angle)?, k))
}

/// Zero-mean Gaussian noise from a seeded stream, clipped to `[0, 1]`.
pub fn gauss_noise(img: &Image, sigma: f64, noise_seed: u64) -> Result<Image> {
    check(sigma >= 0.0 && sigma.is_finite(), || {
        format!("noise sigma {sigma} must be ≥ 0")
    })?;
    let mut out = img.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = Rng::seed_from_u64(noise_seed);
    for v in &mut out.data {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = (*v + sigma * z).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Unsharp masking against a 3×3 box blur.
pub fn sharpen(img: &Image, amount: f64) -> Result<Image> {
    check((0.0..=1.0).contains(&amount), || {
        format!("sharpen amount {amount} outside [0, 1]")
    })?;
    let soft = blur(img, 3)?;
    let mut out = img.clone();
    for (v, s) in out.data.iter_mut().zip(&soft.data) {
        *v += amount * (*v - s);
    }
    out.clamp01();
    Ok(out)
}
