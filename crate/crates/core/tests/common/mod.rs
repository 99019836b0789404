//! Independent oracles and check routines shared by the integration tests
//! and the acceptance runner.
#![allow(dead_code)]

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use tellscan::augment::{apply, plan_seeded, plan_with, AugmentSpec, AugmentTrace};
use tellscan::components;
use tellscan::geoingest::{rasterize_mask, signed_area, GeoRef, SampleWindow, SiteShape, Vertex};
use tellscan::manet::{Forward, Manet, ManetConfig, Mode};
use tellscan::metrics::{self, PixelConfusion, SiteConfusion};
use tellscan::raster::{Image, Mask};
use tellscan::seed;
use tellscan::tensor::nn::{self, Conv2dSpec, NormMode};
use tellscan::tensor::{concat, Tensor};
use tellscan::trainer::loss_from_logits;

pub type Check = Result<(), String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- components

pub fn random_grid(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> Mask {
    let data = (0..h * w).map(|_| u8::from(rng.random::<f64>() < density)).collect();
    Mask::from_vec(h, w, data).unwrap()
}

/// Breadth-first flood fill over the 8-neighbourhood; components in
/// first-pixel scan order, pixels sorted.
pub fn flood_fill(mask: &Mask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if mask.get(r0, c0) == 0 || seen[r0 * w + c0] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(r0, c0)]);
            seen[r0 * w + c0] = true;
            while let Some((r, c)) = queue.pop_front() {
                comp.push((r, c));
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if mask.get(nr, nc) != 0 && !seen[nr * w + nc] {
                            seen[nr * w + nc] = true;
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
    }
    out
}

pub fn check_components(grids: usize, seed_value: u64) -> Check {
    let mut rng = seed::stream(seed_value, "test.components");
    for g in 0..grids {
        let (h, w) = (rng.random_range(1..=128), rng.random_range(1..=128));
        let density = rng.random_range(0.05..0.7);
        let mask = random_grid(&mut rng, h, w, density);
        let expected = flood_fill(&mask);
        let mut got: Vec<Vec<(usize, usize)>> = components::components(&mask)
            .into_iter()
            .map(|c| {
                let mut p = c.pixels;
                p.sort_unstable();
                p
            })
            .collect();
        got.sort_by_key(|c| c[0]);
        ensure(got == expected, || {
            format!(
                "grid {g} ({h}x{w}): {} components vs flood fill {}",
                got.len(),
                expected.len()
            )
        })?;
        let labels = components::label(&mask);
        ensure(labels.count == expected.len(), || format!("grid {g}: label count"))?;
    }
    Ok(())
}

// ------------------------------------------------------------------- metrics

fn brute_confusion(pred: &Mask, truth: &Mask) -> [u64; 4] {
    let mut c = [0u64; 4];
    for r in 0..pred.height {
        for col in 0..pred.width {
            let (p, t) = (pred.get(r, col) == 1, truth.get(r, col) == 1);
            let k = match (p, t) {
                (true, true) => 0,
                (false, false) => 1,
                (true, false) => 2,
                (false, true) => 3,
            };
            c[k] += 1;
        }
    }
    c
}

fn brute_iou(c: [u64; 4]) -> f64 {
    let u = c[0] + c[2] + c[3];
    if u == 0 {
        1.0
    } else {
        c[0] as f64 / u as f64
    }
}

fn brute_mcc(c: [u64; 4]) -> f64 {
    let [tp, tn, fp, fn_] = c.map(|v| v as f64);
    let d = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if d == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / d.sqrt()
    }
}

/// A blobby random probability map so components of varied size occur.
fn random_prob(rng: &mut impl Rng, n: usize) -> Image {
    let mut img = Image::new(1, n, n);
    let blobs = rng.random_range(0..4);
    let centers: Vec<(f64, f64, f64)> = (0..blobs)
        .map(|_| {
            (
                rng.random_range(0.0..n as f64),
                rng.random_range(0.0..n as f64),
                rng.random_range(1.0..5.0),
            )
        })
        .collect();
    for r in 0..n {
        for c in 0..n {
            let mut v: f64 = rng.random_range(0.0..0.45);
            for &(cr, cc, rad) in &centers {
                let d = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
                if d < rad {
                    v = v.max(rng.random_range(0.5..1.0));
                }
            }
            img.set(0, r, c, v);
        }
    }
    img
}

pub fn check_metric_oracles(cases: usize, seed_value: u64) -> Check {
    let mut rng = seed::stream(seed_value, "test.metrics");
    let n = 16;
    let georef = GeoRef::north_up(31.25, 4_910_000.0, 3_932_000.0).unwrap();
    let px_area = 31.25 * 31.25;
    let mut confusions = Vec::new();
    let mut brute = Vec::new();
    let mut sites = SiteConfusion::default();
    let mut brute_sites = [0u64; 4];
    for case in 0..cases {
        let prob = random_prob(&mut rng, n);
        let density = rng.random_range(0.0..0.5);
        let truth = random_grid(&mut rng, n, n, density);
        let t = [0.3, 0.5, 0.7][case % 3];
        let min_area = [0.0, 2500.0, 10_000.0][case % 3];
        let pred = metrics::binarize(&prob, t).map_err(|e| e.to_string())?;
        // independent binarization
        for r in 0..n {
            for c in 0..n {
                let want = u8::from(prob.get(0, r, c) >= t);
                ensure(pred.get(r, c) == want, || format!("case {case}: binarize at ({r},{c})"))?;
            }
        }
        let got = metrics::pixel_confusion(&pred, &truth).map_err(|e| e.to_string())?;
        let b = brute_confusion(&pred, &truth);
        ensure([got.tp, got.tn, got.fp, got.fn_] == b, || {
            format!("case {case}: confusion {got:?} vs {b:?}")
        })?;
        ensure((got.iou() - brute_iou(b)).abs() <= 1e-12, || {
            format!("case {case}: iou")
        })?;
        let m = metrics::mcc(&got);
        ensure((m - brute_mcc(b)).abs() <= 1e-12, || {
            format!("case {case}: mcc {m} vs {}", brute_mcc(b))
        })?;

        let detected = metrics::detect_site(&prob, &georef, t, min_area).map_err(|e| e.to_string())?;
        let brute_detected = flood_fill(&pred)
            .iter()
            .any(|comp| comp.len() as f64 * px_area >= min_area);
        ensure(detected == brute_detected, || format!("case {case}: site detection"))?;
        let label = truth.popcount() > 0;
        sites.record(label, detected);
        brute_sites[match (label, brute_detected) {
            (true, true) => 0,
            (false, false) => 1,
            (false, true) => 2,
            (true, false) => 3,
        }] += 1;
        confusions.push(got);
        brute.push(b);
    }
    ensure([sites.tp, sites.tn, sites.fp, sites.fn_] == brute_sites, || {
        "site confusion".into()
    })?;

    let mean_iou = brute.iter().map(|&c| brute_iou(c)).sum::<f64>() / brute.len() as f64;
    let got = metrics::iou(&confusions).map_err(|e| e.to_string())?;
    ensure((got - mean_iou).abs() <= 1e-12, || {
        format!("mean IoU {got} vs {mean_iou}")
    })?;
    let pooled = brute
        .iter()
        .fold([0u64; 4], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2], a[3] + c[3]]);
    let got = metrics::biou(&confusions).map_err(|e| e.to_string())?;
    ensure((got - brute_iou(pooled)).abs() <= 1e-12, || "pooled bIoU".into())?;
    let p = metrics::pooled(&confusions);
    ensure((metrics::mcc(&p) - brute_mcc(pooled)).abs() <= 1e-12, || {
        "pooled MCC".into()
    })?;
    let scores = metrics::site_scores(&sites).map_err(|e| e.to_string())?;
    let [tp, tn, fp, fn_] = brute_sites;
    let acc = (tp + tn) as f64 / (tp + tn + fp + fn_) as f64;
    ensure((scores.accuracy - acc).abs() <= 1e-12, || "site accuracy".into())?;
    if tp + fn_ > 0 {
        let rec = tp as f64 / (tp + fn_) as f64;
        ensure(scores.recall.is_some_and(|r| (r - rec).abs() <= 1e-12), || {
            "site recall".into()
        })?;
    }
    Ok(())
}

pub fn check_site_rows() -> Check {
    let rows = [
        ((7, 11, 1, 1), 0.90, 0.88),
        ((4, 11, 1, 4), 0.75, 0.50),
        ((4, 10, 4, 2), 0.70, 0.67),
    ];
    for ((tp, tn, fp, fn_), acc, rec) in rows {
        let s = metrics::site_scores(&SiteConfusion { tp, tn, fp, fn_ }).map_err(|e| e.to_string())?;
        let (a, r) = (
            metrics::round2(s.accuracy),
            metrics::round2(s.recall.unwrap_or(f64::NAN)),
        );
        ensure(a == acc && r == rec, || {
            format!("({tp},{tn},{fp},{fn_}) gives {a:.2}/{r:.2}, expected {acc:.2}/{rec:.2}")
        })?;
        ensure(format!("{a:.2}") == format!("{acc:.2}"), || "formatting".into())?;
    }
    Ok(())
}

// ----------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`; errors on an all-zero gradient, which
/// would make the comparison vacuous.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> Result<f64, String> {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-9 {
        return Err("gradient is identically zero".into());
    }
    Ok(diff / scale)
}

fn weighted(out: &Tensor, w: &[f64]) -> f64 {
    out.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

fn normal_vec(rng: &mut impl Rng, n: usize, sd: f64) -> Vec<f64> {
    let d = Normal::new(0.0, sd).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Central-difference check of `f` with respect to every input.
pub fn fd_check<F>(inputs: &[(Vec<usize>, Vec<f64>)], rng: &mut impl Rng, f: F) -> Result<f64, String>
where
    F: Fn(&[Tensor]) -> tellscan::Result<Tensor>,
{
    let tracked: Vec<Tensor> = inputs
        .iter()
        .map(|(s, d)| Tensor::param(s, d.clone()).unwrap())
        .collect();
    let out = f(&tracked).map_err(|e| e.to_string())?;
    let w = normal_vec(rng, out.numel(), 1.0);
    let loss = out
        .mul(&Tensor::new(out.shape(), w.clone()).unwrap())
        .map_err(|e| e.to_string())?
        .sum();
    let grads = loss.backward().map_err(|e| e.to_string())?;
    let eval = |vals: &[Vec<f64>]| -> Result<f64, String> {
        let ts: Vec<Tensor> = inputs
            .iter()
            .zip(vals)
            .map(|((s, _), d)| Tensor::new(s, d.clone()).unwrap())
            .collect();
        Ok(weighted(&f(&ts).map_err(|e| e.to_string())?, &w))
    };
    let mut worst: f64 = 0.0;
    for (i, t) in tracked.iter().enumerate() {
        let analytic = grads.get_or_zeros(t);
        let mut vals: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..numeric.len() {
            let x = vals[i][j];
            vals[i][j] = x + FD_STEP;
            let up = eval(&vals)?;
            vals[i][j] = x - FD_STEP;
            let down = eval(&vals)?;
            vals[i][j] = x;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric).map_err(|e| format!("input {i}: {e}"))?);
    }
    Ok(worst)
}

fn rand_input(rng: &mut impl Rng, shape: &[usize], sd: f64) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape.to_vec(), normal_vec(rng, n, sd))
}

fn positive_input(rng: &mut impl Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.random_range(0.5..2.0)).collect())
}

pub const KERNELS: [&str; 24] = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "sigmoid",
    "swish",
    "sum",
    "mean",
    "reshape",
    "transpose_last2",
    "matmul",
    "matmul_batched",
    "softmax",
    "concat",
    "conv2d",
    "conv2d_strided",
    "conv2d_nobias",
    "batch_norm2d_train",
    "batch_norm2d_eval",
    "global_avg_pool",
    "bilinear_up",
    "bilinear_down",
    "loss",
];

/// Worst relative error of one kernel for one seed.
pub fn grad_kernel(name: &str, seed_value: u64) -> Result<f64, String> {
    let mut rng = seed::item_stream(seed_value, "test.grad.kernel", name);
    let r = &mut rng;
    let pad1 = Conv2dSpec { stride: 1, padding: 1 };
    match name {
        "add" => {
            let inp = [rand_input(r, &[2, 3, 4], 1.0), rand_input(r, &[3, 1], 1.0)];
            fd_check(&inp, r, |t| t[0].add(&t[1]))
        }
        "sub" => {
            let inp = [rand_input(r, &[2, 3], 1.0), rand_input(r, &[3], 1.0)];
            fd_check(&inp, r, |t| t[0].sub(&t[1]))
        }
        "mul" => {
            let inp = [rand_input(r, &[2, 3, 4], 1.0), rand_input(r, &[1, 3, 1], 1.0)];
            fd_check(&inp, r, |t| t[0].mul(&t[1]))
        }
        "scale" => fd_check(&[rand_input(r, &[3, 4], 1.0)], r, |t| Ok(t[0].scale(-1.7))),
        "add_scalar" => fd_check(&[rand_input(r, &[3, 4], 1.0)], r, |t| t[0].add_scalar(0.3).mul(&t[0])),
        "sigmoid" => fd_check(&[rand_input(r, &[2, 8], 2.0)], r, |t| Ok(t[0].sigmoid())),
        "swish" => fd_check(&[rand_input(r, &[2, 8], 2.0)], r, |t| Ok(t[0].swish())),
        "sum" => fd_check(&[rand_input(r, &[2, 3, 4], 1.0)], r, |t| Ok(t[0].mul(&t[0])?.sum())),
        "mean" => fd_check(&[rand_input(r, &[2, 3, 4], 1.0)], r, |t| Ok(t[0].sigmoid().mean())),
        "reshape" => fd_check(&[rand_input(r, &[2, 3, 4], 1.0)], r, |t| {
            Ok(t[0].reshape(&[6, 4])?.sigmoid())
        }),
        "transpose_last2" => fd_check(&[rand_input(r, &[2, 3, 4], 1.0)], r, |t| {
            Ok(t[0].transpose_last2()?.swish())
        }),
        "matmul" => {
            let inp = [rand_input(r, &[3, 4], 1.0), rand_input(r, &[4, 5], 1.0)];
            fd_check(&inp, r, |t| t[0].matmul(&t[1]))
        }
        "matmul_batched" => {
            let inp = [rand_input(r, &[2, 3, 4], 1.0), rand_input(r, &[2, 4, 5], 1.0)];
            fd_check(&inp, r, |t| t[0].matmul(&t[1]))
        }
        "softmax" => {
            let axis = (seed_value % 3) as usize;
            fd_check(&[rand_input(r, &[2, 3, 4], 1.5)], r, move |t| t[0].softmax(axis))
        }
        "concat" => {
            let inp = [rand_input(r, &[2, 2, 3], 1.0), rand_input(r, &[2, 3, 3], 1.0)];
            fd_check(&inp, r, |t| Ok(concat(&[&t[0], &t[1]], 1)?.sigmoid()))
        }
        "conv2d" => {
            let inp = [
                rand_input(r, &[2, 3, 6, 6], 1.0),
                rand_input(r, &[4, 3, 3, 3], 0.5),
                rand_input(r, &[4], 0.5),
            ];
            fd_check(&inp, r, move |t| nn::conv2d(&t[0], &t[1], Some(&t[2]), pad1))
        }
        "conv2d_strided" => {
            let inp = [
                rand_input(r, &[2, 2, 7, 7], 1.0),
                rand_input(r, &[3, 2, 3, 3], 0.5),
                rand_input(r, &[3], 0.5),
            ];
            let spec = Conv2dSpec { stride: 2, padding: 1 };
            fd_check(&inp, r, move |t| nn::conv2d(&t[0], &t[1], Some(&t[2]), spec))
        }
        "conv2d_nobias" => {
            let inp = [rand_input(r, &[1, 4, 5, 5], 1.0), rand_input(r, &[2, 4, 1, 1], 0.5)];
            fd_check(&inp, r, |t| nn::conv2d(&t[0], &t[1], None, Conv2dSpec::default()))
        }
        "batch_norm2d_train" => {
            let inp = [
                rand_input(r, &[3, 2, 3, 3], 1.5),
                positive_input(r, &[2]),
                rand_input(r, &[2], 0.5),
            ];
            fd_check(&inp, r, |t| {
                Ok(nn::batch_norm2d(&t[0], &t[1], &t[2], NormMode::Train)?.0)
            })
        }
        "batch_norm2d_eval" => {
            let mean = normal_vec(r, 2, 0.5);
            let var: Vec<f64> = (0..2).map(|_| r.random_range(0.5..2.0)).collect();
            let inp = [
                rand_input(r, &[3, 2, 3, 3], 1.5),
                positive_input(r, &[2]),
                rand_input(r, &[2], 0.5),
            ];
            fd_check(&inp, r, move |t| {
                let mode = NormMode::Eval {
                    running_mean: &mean,
                    running_var: &var,
                };
                Ok(nn::batch_norm2d(&t[0], &t[1], &t[2], mode)?.0)
            })
        }
        "global_avg_pool" => fd_check(&[rand_input(r, &[2, 3, 4, 4], 1.0)], r, |t| {
            Ok(nn::global_avg_pool(&t[0])?.swish())
        }),
        "bilinear_up" => fd_check(&[rand_input(r, &[1, 2, 3, 3], 1.0)], r, |t| {
            nn::bilinear_resize(&t[0], 5, 7)
        }),
        "bilinear_down" => fd_check(&[rand_input(r, &[1, 2, 8, 8], 1.0)], r, |t| {
            nn::bilinear_resize(&t[0], 3, 5)
        }),
        "loss" => {
            let lambda = [0.0, 0.5, 1.0, 0.25, 0.75][(seed_value % 5) as usize];
            let truth: Vec<f64> = (0..32).map(|_| f64::from(u8::from(r.random::<f64>() < 0.4))).collect();
            fd_check(&[rand_input(r, &[2, 1, 4, 4], 2.0)], r, move |t| {
                loss_from_logits(&t[0], &truth, lambda)
            })
        }
        _ => Err(format!("unknown kernel {name}")),
    }
}

/// Small network: 3×8×8 input, two stages (4×4×4, 8×2×2), one MFAB.
pub fn tiny_config() -> ManetConfig {
    ManetConfig {
        in_channels: 3,
        input_resolution: 8,
        stage_widths: vec![4, 8],
        downsample: vec![2, 2],
        bottleneck_channels: 8,
        bottleneck_resolution: 2,
        pab_reduction: 4,
        mfab_count: 1,
        mfab_reduction: 2,
        head_channels: 1,
    }
}

/// Tiny model with every trainable parameter jittered away from its
/// initial value (so gates and residual weights are active).
pub fn tiny_model(seed_value: u64) -> Manet {
    let mut m = Manet::new(tiny_config(), seed_value).unwrap();
    let mut rng = seed::stream(seed_value, "test.tiny.jitter");
    let names: Vec<String> = m.params().trainable().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let v = m.params_mut().get_mut(&name).unwrap();
        for x in v.data.iter_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
        if name == "decoder.pab.gamma" {
            v.data[0] = rng.random_range(0.5..1.5);
        }
    }
    m
}

pub const BLOCKS: [&str; 7] = [
    "encoder_stage0",
    "encoder_stage1",
    "pab",
    "mfab",
    "head",
    "segment_loss",
    "encoder_eval",
];

type BlockFn = Box<dyn Fn(&Manet, &Forward<'_>, &[Tensor]) -> tellscan::Result<Tensor>>;
type BlockCase = (Mode, Vec<(Vec<usize>, Vec<f64>)>, BlockFn);

/// Worst relative error over a block's inputs and parameters for one seed.
pub fn grad_block(name: &str, seed_value: u64) -> Result<f64, String> {
    let model = tiny_model(seed_value);
    let mut rng = seed::item_stream(seed_value, "test.grad.block", name);
    let truth: Vec<f64> = (0..2 * 64)
        .map(|_| f64::from(u8::from(rng.random::<f64>() < 0.3)))
        .collect();
    let (mode, inputs, f): BlockCase = match name {
        "encoder_stage0" => (
            Mode::Train,
            vec![rand_input(&mut rng, &[2, 3, 8, 8], 1.0)],
            Box::new(|m, fw, x| m.encoder_stage(fw, 0, &x[0])),
        ),
        "encoder_stage1" => (
            Mode::Train,
            vec![rand_input(&mut rng, &[2, 4, 4, 4], 1.0)],
            Box::new(|m, fw, x| m.encoder_stage(fw, 1, &x[0])),
        ),
        "encoder_eval" => (
            Mode::Eval,
            vec![rand_input(&mut rng, &[2, 3, 8, 8], 1.0)],
            Box::new(|m, fw, x| m.encoder_stage(fw, 0, &x[0])),
        ),
        "pab" => (
            Mode::Train,
            vec![rand_input(&mut rng, &[2, 8, 2, 2], 1.0)],
            Box::new(|m, fw, x| Ok(m.pab_forward(fw, &x[0])?.feature)),
        ),
        "mfab" => (
            Mode::Train,
            vec![
                rand_input(&mut rng, &[2, 8, 2, 2], 1.0),
                rand_input(&mut rng, &[2, 4, 4, 4], 1.0),
            ],
            Box::new(|m, fw, x| m.mfab_forward(fw, 0, &x[0], &x[1])),
        ),
        "head" => (
            Mode::Train,
            vec![rand_input(&mut rng, &[2, 4, 4, 4], 1.0)],
            Box::new(|m, fw, x| Ok(m.head(fw, &x[0])?.logits)),
        ),
        "segment_loss" => (
            Mode::Train,
            vec![rand_input(&mut rng, &[2, 3, 8, 8], 1.0)],
            Box::new(move |m, fw, x| loss_from_logits(&m.segment(fw, &x[0])?.logits, &truth, 0.5)),
        ),
        _ => return Err(format!("unknown block {name}")),
    };

    // analytic
    let tracked: Vec<Tensor> = inputs
        .iter()
        .map(|(s, d)| Tensor::param(s, d.clone()).unwrap())
        .collect();
    let fw = Forward::new(model.params(), mode, |_| true);
    let out = f(&model, &fw, &tracked).map_err(|e| e.to_string())?;
    let w = normal_vec(&mut rng, out.numel(), 1.0);
    let loss = out
        .mul(&Tensor::new(out.shape(), w.clone()).unwrap())
        .map_err(|e| e.to_string())?
        .sum();
    let grads = loss.backward().map_err(|e| e.to_string())?;
    let leaves = fw.leaves();
    drop(fw);

    let eval = |m: &Manet, vals: &[Vec<f64>]| -> Result<f64, String> {
        let ts: Vec<Tensor> = inputs
            .iter()
            .zip(vals)
            .map(|((s, _), d)| Tensor::new(s, d.clone()).unwrap())
            .collect();
        let fw = Forward::new(m.params(), mode, |_| true);
        Ok(weighted(&f(m, &fw, &ts).map_err(|e| e.to_string())?, &w))
    };
    let base_vals: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let mut worst: f64 = 0.0;

    for (i, t) in tracked.iter().enumerate() {
        let analytic = grads.get_or_zeros(t);
        let mut vals = base_vals.clone();
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..numeric.len() {
            let x = vals[i][j];
            vals[i][j] = x + FD_STEP;
            let up = eval(&model, &vals)?;
            vals[i][j] = x - FD_STEP;
            let down = eval(&model, &vals)?;
            vals[i][j] = x;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric).map_err(|e| format!("{name} input {i}: {e}"))?);
    }

    let mut probe = model.clone();
    let mut checked = 0;
    for (pname, leaf) in &leaves {
        let analytic = grads.get_or_zeros(leaf);
        let mut numeric = vec![0.0; analytic.len()];
        for (j, nj) in numeric.iter_mut().enumerate() {
            let x = probe.params().get(pname).unwrap().data[j];
            probe.params_mut().get_mut(pname).unwrap().data[j] = x + FD_STEP;
            let up = eval(&probe, &base_vals)?;
            probe.params_mut().get_mut(pname).unwrap().data[j] = x - FD_STEP;
            let down = eval(&probe, &base_vals)?;
            probe.params_mut().get_mut(pname).unwrap().data[j] = x;
            *nj = (up - down) / (2.0 * FD_STEP);
        }
        let scale = analytic.iter().chain(&numeric).map(|v| v.abs()).fold(0.0, f64::max);
        if scale < 1e-9 {
            // invariant direction (e.g. a key bias under softmax): both sides vanish
            continue;
        }
        let e = rel_err(&analytic, &numeric).map_err(|e| format!("{name} param {pname}: {e}"))?;
        if e >= FD_TOL {
            return Err(format!("{name} param {pname}: relative error {e:.3e}"));
        }
        worst = worst.max(e);
        checked += 1;
    }
    ensure(checked > 0, || format!("{name}: no parameters reached"))?;
    Ok(worst)
}

pub fn check_gradients(seeds: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for s in 0..seeds {
        for k in KERNELS {
            let e = grad_kernel(k, s).map_err(|e| format!("{k} seed {s}: {e}"))?;
            ensure(e < FD_TOL, || format!("{k} seed {s}: relative error {e:.3e}"))?;
            worst = worst.max(e);
        }
        for b in BLOCKS {
            let e = grad_block(b, s).map_err(|e| format!("seed {s}: {e}"))?;
            ensure(e < FD_TOL, || format!("{b} seed {s}: relative error {e:.3e}"))?;
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

// -------------------------------------------------------------- augmentation

pub fn textured(c: usize, n: usize, s: u64) -> Image {
    let mut rng = seed::stream(s, "test.texture");
    let data = (0..c * n * n).map(|_| rng.random::<f64>()).collect();
    Image::from_vec(c, n, n, data).unwrap()
}

pub fn blob_mask(n: usize, s: u64) -> Mask {
    let mut rng = seed::stream(s, "test.blob");
    let (cr, cc) = (
        rng.random_range(0.3..0.7) * n as f64,
        rng.random_range(0.3..0.7) * n as f64,
    );
    let rad = rng.random_range(0.1..0.3) * n as f64;
    let mut m = Mask::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            if (r as f64 - cr).hypot(c as f64 - cc) < rad {
                m.set(r, c, 1);
            }
        }
    }
    m
}

pub fn check_augment_determinism(samples: u64) -> Check {
    let spec = AugmentSpec::standard(32);
    for s in 0..samples {
        let (img, mask) = (textured(3, 32, s), blob_mask(32, s));
        let a = apply(&plan_seeded(&spec, s), &img, &mask).map_err(|e| e.to_string())?;
        let b = apply(&plan_seeded(&spec, s), &img, &mask).map_err(|e| e.to_string())?;
        let bits = |i: &Image| i.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&a.0) == bits(&b.0) && a.1 == b.1, || {
            format!("seed {s}: outputs differ")
        })?;
    }
    Ok(())
}

pub fn check_mask_binarity(traces: u64) -> Check {
    let spec = AugmentSpec::standard(16);
    let mut photometric = spec.clone();
    photometric.mask_photometric = true;
    for s in 0..traces {
        let sp = if s % 2 == 0 { &spec } else { &photometric };
        let (img, mask) = (textured(3, 16, s % 97), blob_mask(16, s));
        let (_, m) = apply(&plan_seeded(sp, s), &img, &mask).map_err(|e| e.to_string())?;
        ensure(m.data.iter().all(|&v| v <= 1), || format!("trace {s}: mask not binary"))?;
        ensure((m.height, m.width) == (16, 16), || format!("trace {s}: mask dims"))?;
    }
    Ok(())
}

/// Firing frequencies of the fixed stages, groups and group members over
/// `plans` draws, each within three standard errors of its probability.
pub fn check_frequencies(plans: usize, seed_value: u64) -> Check {
    let spec = AugmentSpec::standard(64);
    let mut rng = seed::stream(seed_value, "test.freq");
    let mut counts: std::collections::BTreeMap<String, usize> = Default::default();
    let mut group_fired: std::collections::BTreeMap<String, usize> = Default::default();
    for _ in 0..plans {
        let mut fired = Vec::new();
        let _t: AugmentTrace = plan_with(&spec, &mut rng, |name, p, rng| {
            let hit = rng.random::<f64>() < p;
            if hit {
                fired.push(name.to_string());
            }
            hit
        });
        for f in fired {
            *counts.entry(f).or_default() += 1;
        }
    }
    let within = |name: &str, hits: usize, n: usize, p: f64| -> Check {
        let freq = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        ensure((freq - p).abs() <= 3.0 * se, || {
            format!("{name}: frequency {freq:.4} vs {p} (3 SE = {:.4})", 3.0 * se)
        })
    };
    within("Flip", counts.get("Flip").copied().unwrap_or(0), plans, spec.flip_p)?;
    within(
        "RandomRotate90",
        counts.get("RandomRotate90").copied().unwrap_or(0),
        plans,
        spec.rotate_p,
    )?;
    for g in &spec.groups {
        let n_g = counts.get(&g.name).copied().unwrap_or(0);
        group_fired.insert(g.name.clone(), n_g);
        within(&g.name, n_g, plans, g.probability)?;
        for (kind, p) in &g.members {
            within(kind.name(), counts.get(kind.name()).copied().unwrap_or(0), n_g, *p)?;
        }
    }
    Ok(())
}

pub fn check_published_sequences() -> Check {
    let spec = AugmentSpec::standard(64);
    let sequences: [&[&str]; 3] = [
        &[
            "RandomCrop",
            "Flip",
            "RandomRotate90",
            "GaussNoise",
            "Sharpen",
            "Resize",
        ],
        &[
            "RandomCrop",
            "Flip",
            "RandomRotate90",
            "CLAHE",
            "GaussNoise",
            "Sharpen",
            "Resize",
        ],
        &[
            "RandomCrop",
            "Flip",
            "RandomRotate90",
            "RandomBrightnessContrast",
            "MotionBlur",
            "Sharpen",
            "Resize",
        ],
    ];
    let group_of = |name: &str| {
        spec.groups
            .iter()
            .find(|g| g.members.iter().any(|(k, _)| k.name() == name))
            .map(|g| g.name.clone())
    };
    for (i, seq) in sequences.iter().enumerate() {
        // fire exactly the named transforms and the groups that hold them
        let mut wanted: Vec<String> = seq.iter().map(|s| s.to_string()).collect();
        wanted.extend(seq.iter().filter_map(|s| group_of(s)));
        let mut rng = seed::stream(i as u64, "test.sequences");
        let t = plan_with(&spec, &mut rng, |name, _, _| wanted.iter().any(|w| w == name));
        let got: Vec<&str> = t.kinds().iter().map(|k| k.name()).collect();
        ensure(got == *seq, || format!("sequence {}: got {got:?}", i + 1))?;
        let img = textured(3, 64, i as u64);
        let (out, _) = apply(&t, &img, &blob_mask(64, i as u64)).map_err(|e| e.to_string())?;
        ensure((out.height, out.width) == (64, 64), || "resize target".into())?;
    }
    Ok(())
}

// ------------------------------------------------------------------ geometry

/// Vertices on an ellipse at sorted random angles: convex by construction.
pub fn convex_polygon(rng: &mut impl Rng, center: Vertex, rx: f64, ry: f64, k: usize) -> Vec<Vertex> {
    let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup();
    let mut ring: Vec<Vertex> = angles
        .iter()
        .map(|a| (center.0 + rx * a.cos(), center.1 + ry * a.sin()))
        .collect();
    ring.push(ring[0]);
    ring
}

/// Random convex polygons (5 to 23 vertices on an ellipse with semi-axes
/// 40 to 950 m) in a 2000 m window of `resolution` pixels. Returns the
/// relative area errors `(mask − shoelace) / shoelace` of those covering
/// at least 100 pixels.
pub fn mask_area_errors(polygons: usize, seed_value: u64, resolution: usize) -> Result<Vec<f64>, String> {
    let mut rng = seed::stream(seed_value, "test.mask_area");
    let center = (4_910_000.0, 3_932_000.0);
    let window = SampleWindow::new(center, 2000.0, resolution).map_err(|e| e.to_string())?;
    let px_area = window.pixel_size().powi(2);
    let mut out = Vec::new();
    for i in 0..polygons {
        let (rx, ry) = (rng.random_range(40.0..950.0), rng.random_range(40.0..950.0));
        let k = rng.random_range(5..24);
        let ring = convex_polygon(&mut rng, center, rx, ry, k);
        let shape = SiteShape::new(format!("GHR.{i:03}"), vec![ring]).map_err(|e| e.to_string())?;
        let area = signed_area(shape.outer()).abs();
        if area / px_area < 100.0 {
            continue;
        }
        let mask_area = rasterize_mask(std::slice::from_ref(&shape), &window).popcount() as f64 * px_area;
        out.push((mask_area - area) / area);
    }
    Ok(out)
}

/// Every polygon of at least 100 px within 2%; returns how many were checked.
pub fn check_mask_area(polygons: usize, seed_value: u64, resolution: usize) -> Result<usize, String> {
    let errs = mask_area_errors(polygons, seed_value, resolution)?;
    if let Some((i, e)) = errs.iter().enumerate().find(|(_, e)| e.abs() >= 0.02) {
        return Err(format!("polygon {i}: relative area error {e:.4}"));
    }
    Ok(errs.len())
}

/// Pixel → world → pixel on random georeferences; error measured in meters.
pub fn check_geo_round_trip(points: usize, seed_value: u64) -> Check {
    let mut rng = seed::stream(seed_value, "test.geo");
    for i in 0..points {
        let size = rng.random_range(0.5..60.0);
        let c = rng.random_range(4_800_000.0..5_000_000.0);
        let f = rng.random_range(3_850_000.0..4_000_000.0);
        let g = if i % 2 == 0 {
            GeoRef::north_up(size, c, f)
        } else {
            let rot = rng.random_range(-0.2..0.2f64);
            GeoRef::new(
                size * rot.cos(),
                size * rot.sin(),
                size * rot.sin(),
                -size * rot.cos(),
                c,
                f,
            )
        }
        .map_err(|e| e.to_string())?;
        let (col, row) = (rng.random_range(-10.0..600.0), rng.random_range(-10.0..600.0));
        let (x, y) = g.pixel_to_world(col, row);
        let (col2, row2) = g.world_to_pixel(x, y).map_err(|e| e.to_string())?;
        let err = (col2 - col).hypot(row2 - row) * size;
        ensure(err <= 1e-9, || format!("point {i}: round trip off by {err:.3e} m"))?;
    }
    let g = GeoRef::north_up(2000.0 / 64.0, 4_910_000.0, 3_932_000.0).map_err(|e| e.to_string())?;
    ensure(g.pixel_to_world(0.0, 0.0) == (4_910_000.0, 3_932_000.0), || {
        "(0,0) is not (C,F)".into()
    })?;
    ensure(g.pixel_to_world(1.0, 0.0) == (4_910_031.25, 3_932_000.0), || {
        "31.25 m step".into()
    })?;
    Ok(())
}

// -------------------------------------------------------------------- timing

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, std::time::Duration) {
    let t = std::time::Instant::now();
    let v = f();
    (v, t.elapsed())
}

pub fn pixel_confusion_of(c: [u64; 4]) -> PixelConfusion {
    PixelConfusion {
        tp: c[0],
        tn: c[1],
        fp: c[2],
        fn_: c[3],
    }
}

// ------------------------------------------------------------------ training

/// Synthetic tiles grouped by split (TRAIN, VAL, TEST).
pub fn synth_splits(
    cfg: &tellscan::geoingest::SynthConfig,
    seed_value: u64,
) -> Result<[Vec<tellscan::geoingest::TileSample>; 3], String> {
    use tellscan::geoingest::synth_generate;
    let ds = synth_generate(cfg, seed_value).map_err(|e| e.to_string())?;
    let manifest = ds.manifest().map_err(|e| e.to_string())?;
    let mut out: [Vec<_>; 3] = Default::default();
    for e in &manifest.entries {
        let tile = ds
            .tiles
            .iter()
            .find(|t| t.id == e.id)
            .ok_or("manifest id without tile")?;
        out[e.split.index()].push(tile.clone());
    }
    Ok(out)
}

pub fn small_synth(tiles: usize, resolution: usize) -> tellscan::geoingest::SynthConfig {
    tellscan::geoingest::SynthConfig {
        tiles,
        resolution,
        ..Default::default()
    }
}

/// The desk network resized to `resolution` inputs.
pub fn desk_at(resolution: usize) -> ManetConfig {
    let mut c = ManetConfig::desk();
    c.bottleneck_resolution = resolution / c.downsample.iter().product::<usize>();
    c.input_resolution = resolution;
    c
}

// ------------------------------------------------------------------ registry

pub fn candidate(id: &str, x: f64, y: f64, peak: f64) -> tellscan::sitemap::SiteCandidate {
    tellscan::sitemap::SiteCandidate {
        id: id.into(),
        centroid: (x, y),
        area_m2: 4.0 * 976.5625,
        peak,
        status: tellscan::sitemap::Status::Predicted,
        provenance: tellscan::sitemap::Provenance::Ai,
    }
}

/// Eight candidates 400 m apart around GHR.079; four confirmed, four
/// rejected; checks counts and the exported row of GHR.079.
pub fn check_registry_scenario() -> Check {
    use tellscan::sitemap::{Registry, Status, DEFAULT_DEDUPE_M};
    let (x0, y0) = (4_910_150.9, 3_931_922.3);
    let cands: Vec<_> = (0..8)
        .map(|i| {
            let id = if i == 0 {
                "GHR.079".to_string()
            } else {
                format!("GHR.{:03}", 79 + i)
            };
            candidate(
                &id,
                x0 + 400.0 * i as f64,
                y0 - 150.0 * (i % 2) as f64,
                0.9 - 0.05 * i as f64,
            )
        })
        .collect();
    let mut reg = Registry::new(DEFAULT_DEDUPE_M);
    reg.merge(&cands, 0).map_err(|e| e.to_string())?;
    ensure(reg.entries().len() == 8, || {
        format!("{} entries after merge", reg.entries().len())
    })?;
    ensure(reg.counts() == (8, 0, 0), || "all PREDICTED after merge".into())?;
    for (i, c) in cands.iter().enumerate() {
        let s = if i < 4 { Status::Confirmed } else { Status::Rejected };
        reg.update(&c.id, s, 60 + i as u64).map_err(|e| e.to_string())?;
    }
    ensure(reg.counts() == (0, 4, 4), || format!("counts {:?}", reg.counts()))?;
    let export = reg.export();
    let row = export
        .lines()
        .find(|l| l.starts_with("GHR.079\t"))
        .ok_or("GHR.079 missing from export")?;
    let want = "GHR.079\t4910150.9\t3931922.3\t3906.25\t0.9\tCONFIRMED\tAI";
    ensure(row == want, || format!("row {row:?}"))?;
    ensure(reg.update("GHR.079", Status::Rejected, 99).is_err(), || {
        "verified status changed".into()
    })?;
    let back = Registry::parse(&export, &reg.audit_text(), DEFAULT_DEDUPE_M).map_err(|e| e.to_string())?;
    ensure(back.export() == export, || "export round trip".into())?;
    Ok(())
}
