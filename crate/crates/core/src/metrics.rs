//! Pixel scores, site-level detection and repeated-run aggregation.
//!
//! IoU is the per-image mean with the empty-vs-empty convention (both empty
//! scores 1); bIoU pools counts over the whole set. Aggregate MCC is computed
//! on the pooled confusion matrix.

use std::fmt::Write as _;

use crate::components;
use crate::error::{Error, Result};
use crate::geoingest::GeoRef;
use crate::raster::{Image, Mask};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_AREA_M2: f64 = 2500.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PixelConfusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PixelConfusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn add(&self, o: &PixelConfusion) -> PixelConfusion {
        PixelConfusion {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    /// Foreground IoU; 1 when neither prediction nor truth has foreground.
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

/// Sample-level counts of the tell/no-tell decision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SiteConfusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl SiteConfusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn record(&mut self, truth: bool, detected: bool) {
        match (truth, detected) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteScores {
    pub accuracy: f64,
    pub recall: Option<f64>,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(())
}

/// 1 where the (single-band) probability is at least `threshold`.
pub fn binarize(prob: &Image, threshold: f64) -> Result<Mask> {
    check_threshold(threshold)?;
    if prob.channels != 1 {
        return Err(Error::shape(
            "binarize",
            format!("expected 1 band, got {}", prob.channels),
        ));
    }
    let data = prob.data.iter().map(|&p| u8::from(p >= threshold)).collect();
    Mask::from_vec(prob.height, prob.width, data)
}

pub fn pixel_confusion(pred: &Mask, truth: &Mask) -> Result<PixelConfusion> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::shape(
            "pixel_confusion",
            format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height, pred.width, truth.height, truth.width
            ),
        ));
    }
    let mut c = PixelConfusion::default();
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn nonempty(per_image: &[PixelConfusion]) -> Result<()> {
    if per_image.is_empty() {
        return Err(Error::Data("no images to score".into()));
    }
    Ok(())
}

/// Mean of per-image IoU.
pub fn iou(per_image: &[PixelConfusion]) -> Result<f64> {
    nonempty(per_image)?;
    Ok(per_image.iter().map(PixelConfusion::iou).sum::<f64>() / per_image.len() as f64)
}

pub fn pooled(per_image: &[PixelConfusion]) -> PixelConfusion {
    per_image.iter().fold(PixelConfusion::default(), |acc, c| acc.add(c))
}

/// IoU of the pooled counts.
pub fn biou(per_image: &[PixelConfusion]) -> Result<f64> {
    nonempty(per_image)?;
    Ok(pooled(per_image).iou())
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn mcc(c: &PixelConfusion) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0.0) {
        return 0.0;
    }
    let denom = (factors[0] * factors[1]).sqrt() * (factors[2] * factors[3]).sqrt();
    ((tp * tn - fp * fn_) / denom).clamp(-1.0, 1.0)
}

/// True iff some 8-connected component of the binarized map covers at least
/// `min_area_m2` of ground.
pub fn detect_site(prob: &Image, georef: &GeoRef, threshold: f64, min_area_m2: f64) -> Result<bool> {
    let mask = binarize(prob, threshold)?;
    let px = georef.pixel_area();
    Ok(components::components(&mask)
        .iter()
        .any(|c| c.area_px() as f64 * px >= min_area_m2))
}

pub fn site_scores(c: &SiteConfusion) -> Result<SiteScores> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Data("site confusion has no samples".into()));
    }
    let positives = c.tp + c.fn_;
    Ok(SiteScores {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        recall: (positives > 0).then(|| c.tp as f64 / positives as f64),
    })
}

/// Half-away-from-zero rounding to two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub confusion: PixelConfusion,
    pub truth: bool,
    pub detected: bool,
}

/// Scores of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub threshold: f64,
    pub min_area_m2: f64,
    pub images: Vec<ImageScore>,
    pub iou: f64,
    pub biou: f64,
    pub mcc: f64,
    pub sites: SiteConfusion,
    pub accuracy: f64,
    pub recall: Option<f64>,
}

/// One image to evaluate: probability map, truth mask, georeference, label.
pub struct Evaluated<'a> {
    pub id: &'a str,
    pub prob: &'a Image,
    pub truth: &'a Mask,
    pub georef: &'a GeoRef,
    pub label: bool,
}

impl MetricsReport {
    pub fn from_scores(model: &str, threshold: f64, min_area_m2: f64, images: Vec<ImageScore>) -> Result<Self> {
        let confusions: Vec<PixelConfusion> = images.iter().map(|i| i.confusion).collect();
        let mut sites = SiteConfusion::default();
        for i in &images {
            sites.record(i.truth, i.detected);
        }
        let scores = site_scores(&sites)?;
        Ok(Self {
            model: model.to_string(),
            threshold,
            min_area_m2,
            iou: iou(&confusions)?,
            biou: biou(&confusions)?,
            mcc: mcc(&pooled(&confusions)),
            sites,
            accuracy: scores.accuracy,
            recall: scores.recall,
            images,
        })
    }

    pub fn evaluate(model: &str, items: &[Evaluated<'_>], threshold: f64, min_area_m2: f64) -> Result<Self> {
        let mut scores = Vec::with_capacity(items.len());
        for it in items {
            let pred = binarize(it.prob, threshold)?;
            scores.push(ImageScore {
                id: it.id.to_string(),
                confusion: pixel_confusion(&pred, it.truth)?,
                truth: it.label,
                detected: detect_site(it.prob, it.georef, threshold, min_area_m2)?,
            });
        }
        Self::from_scores(model, threshold, min_area_m2, scores)
    }

    /// `key=value` lines: summary keys, then one `image=` line per image.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Model={}", self.model);
        let _ = writeln!(s, "threshold={}", self.threshold);
        let _ = writeln!(s, "min_area_m2={}", self.min_area_m2);
        let _ = writeln!(s, "IoU={}", self.iou);
        let _ = writeln!(s, "MCC={}", self.mcc);
        let _ = writeln!(s, "bIoU={}", self.biou);
        let _ = writeln!(s, "Accuracy={}", self.accuracy);
        let _ = writeln!(s, "Recall={}", self.recall.map_or("NA".to_string(), |r| r.to_string()));
        let _ = writeln!(
            s,
            "TP={}\nTN={}\nFP={}\nFN={}",
            self.sites.tp, self.sites.tn, self.sites.fp, self.sites.fn_
        );
        for i in &self.images {
            let c = i.confusion;
            let _ = writeln!(
                s,
                "image={},{},{},{},{},{},{}",
                i.id,
                c.tp,
                c.tn,
                c.fp,
                c.fn_,
                u8::from(i.truth),
                u8::from(i.detected)
            );
        }
        s
    }

    /// Inverse of [`to_kv`](Self::to_kv); summary values are recomputed from
    /// the image lines.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("metrics report: {m}"));
        let (mut model, mut threshold, mut area) = (None, None, None);
        let mut images = Vec::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {line:?} is not key=value")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("{k}: {v:?} is not a number")));
            match k {
                "Model" => model = Some(v.to_string()),
                "threshold" => threshold = Some(num(v)?),
                "min_area_m2" => area = Some(num(v)?),
                "image" => {
                    let f: Vec<&str> = v.split(',').collect();
                    if f.len() != 7 {
                        return Err(bad(format!("image line {v:?} needs 7 fields")));
                    }
                    let n = |s: &str| s.parse::<u64>().map_err(|_| bad(format!("count {s:?}")));
                    images.push(ImageScore {
                        id: f[0].to_string(),
                        confusion: PixelConfusion {
                            tp: n(f[1])?,
                            tn: n(f[2])?,
                            fp: n(f[3])?,
                            fn_: n(f[4])?,
                        },
                        truth: f[5] == "1",
                        detected: f[6] == "1",
                    });
                }
                "IoU" | "MCC" | "bIoU" | "Accuracy" | "Recall" | "TP" | "TN" | "FP" | "FN" => {}
                _ => return Err(bad(format!("unknown key {k}"))),
            }
        }
        Self::from_scores(
            &model.ok_or_else(|| bad("missing Model".into()))?,
            threshold.ok_or_else(|| bad("missing threshold".into()))?,
            area.ok_or_else(|| bad("missing min_area_m2".into()))?,
            images,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Welford mean and sample standard deviation; needs two values.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Config(format!("need at least 2 runs, got {}", values.len())));
        }
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, &v) in values.iter().enumerate() {
            let d = v - mean;
            mean += d / (i + 1) as f64;
            m2 += d * (v - mean);
        }
        Ok(Self {
            mean,
            std: (m2 / (values.len() - 1) as f64).max(0.0).sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunAggregate {
    pub model: String,
    pub runs: usize,
    pub iou: MeanStd,
    pub mcc: MeanStd,
    pub biou: MeanStd,
    pub accuracy: MeanStd,
    /// Over runs where recall is defined; absent if fewer than two.
    pub recall: Option<MeanStd>,
}

pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<RunAggregate> {
    let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let recalls: Vec<f64> = reports.iter().filter_map(|r| r.recall).collect();
    Ok(RunAggregate {
        model: reports.first().map(|r| r.model.clone()).unwrap_or_default(),
        runs: reports.len(),
        iou: col(|r| r.iou)?,
        mcc: col(|r| r.mcc)?,
        biou: col(|r| r.biou)?,
        accuracy: col(|r| r.accuracy)?,
        recall: MeanStd::of(&recalls).ok(),
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

/// One validation row: scores at the best epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRow {
    pub model: String,
    pub iou: f64,
    pub mcc: f64,
    pub biou: f64,
    pub epoch: usize,
}

/// Validation rows: `Model IoU MCC bIoU Epoch`, percentages.
pub fn validation_table(rows: &[ValidationRow]) -> String {
    let mut s = String::from("Model\tIoU\tMCC\tbIoU\tEpoch\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            r.model,
            pct(r.iou),
            pct(r.mcc),
            pct(r.biou),
            r.epoch
        );
    }
    s
}

/// Test pixel-metric rows with sample standard deviations, percentages.
pub fn pixel_table(rows: &[RunAggregate]) -> String {
    let mut s = String::from("Model\tIoU\tSt.d.\tMCC\tSt.d.\tbIoU\tSt.d.\n");
    for a in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            a.model,
            pct(a.iou.mean),
            pct(a.iou.std),
            pct(a.mcc.mean),
            pct(a.mcc.std),
            pct(a.biou.mean),
            pct(a.biou.std)
        );
    }
    s
}

/// Site detection rows, two-decimal scores.
pub fn site_table(rows: &[&MetricsReport]) -> String {
    let mut s = String::from("Model\tAccuracy\tRecall\tTP\tTN\tFP\tFN\n");
    for r in rows {
        let recall = r.recall.map_or("NA".to_string(), |v| format!("{:.2}", round2(v)));
        let c = r.sites;
        let _ = writeln!(
            s,
            "{}\t{:.2}\t{}\t{}\t{}\t{}\t{}",
            r.model,
            round2(r.accuracy),
            recall,
            c.tp,
            c.tn,
            c.fp,
            c.fn_
        );
    }
    s
}
