//! Two-stage fine-tuning: head-only at the base learning rate, then the
//! whole network at a tenth of it, each stage with early stopping on the
//! validation loss and best-weight restoration.

mod adam;
mod checkpoint;
mod loss;

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;

pub use adam::{Adam, AdamConfig, Moments};
pub use checkpoint::{transfer_load, Checkpoint, MAGIC, VERSION};
pub use loss::{loss, loss_from_logits, DICE_EPS};

use crate::augment::{self, AugmentSpec};
use crate::error::{Error, Result};
use crate::geoingest::{Source, TileSample};
use crate::manet::{Forward, Manet, ManetConfig, Mode, HEAD_PREFIX};
use crate::metrics::{self, Evaluated, MetricsReport};
use crate::raster::Image;
use crate::seed;
use crate::tensor::{ParamKind, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Per stage.
    pub max_epochs: usize,
    pub patience: usize,
    /// Relative improvement required to reset patience.
    pub min_delta: f64,
    /// Dice weight λ.
    pub dice_weight: f64,
    pub seed: u64,
    /// Threshold and area gate for validation metrics.
    pub threshold: f64,
    pub min_area_m2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            batch_size: 8,
            adam: AdamConfig::default(),
            max_epochs: 30,
            patience: 5,
            min_delta: 1e-4,
            dice_weight: 0.0,
            seed: 0,
            threshold: metrics::DEFAULT_THRESHOLD,
            min_area_m2: metrics::DEFAULT_MIN_AREA_M2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.min_delta >= 0.0) {
            return bad(format!("min_delta must be nonnegative, got {}", self.min_delta));
        }
        if !(0.0..=1.0).contains(&self.dice_weight) {
            return bad(format!("dice weight {} outside [0, 1]", self.dice_weight));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        Ok(())
    }
}

/// Which parameters stay fixed during a stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Freeze {
    None,
    /// Everything except names starting with the prefix.
    AllExcept(String),
    All,
}

impl Freeze {
    pub fn is_frozen(&self, name: &str) -> bool {
        match self {
            Freeze::None => false,
            Freeze::AllExcept(prefix) => !name.starts_with(prefix.as_str()),
            Freeze::All => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage: u8,
    pub lr: f64,
    pub freeze: Freeze,
}

impl StagePlan {
    pub fn stage1(cfg: &TrainConfig) -> Self {
        Self {
            stage: 1,
            lr: cfg.base_lr,
            freeze: Freeze::AllExcept(HEAD_PREFIX.to_string()),
        }
    }

    pub fn stage2(cfg: &TrainConfig) -> Self {
        Self {
            stage: 2,
            lr: cfg.base_lr / 10.0,
            freeze: Freeze::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
    pub val_biou: f64,
    pub val_mcc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageHistory {
    pub stage: u8,
    pub lr: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the lowest validation loss.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl StageHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    /// Tab-separated lines; a `#` header carries stage, lr and best epoch.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# stage={} lr={} best_epoch={} stopped_early={}\nepoch\ttrain_loss\tval_loss\tval_IoU\tval_bIoU\tval_MCC\n",
            self.stage, self.lr, self.best_epoch, self.stopped_early
        );
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.4}",
                e.epoch, e.train_loss, e.val_loss, e.val_iou, e.val_biou, e.val_mcc
            );
        }
        s
    }
}

/// Validation-loss early stopping with a relative improvement threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
    seen: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: None,
            best_epoch: 0,
            since_best: 0,
            seen: 0,
        }
    }

    /// Record the next epoch's loss; true if it is the new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.seen += 1;
        let improved = match self.best {
            None => !loss.is_nan(),
            Some(b) => loss < b - b.abs() * self.min_delta,
        };
        if improved {
            self.best = Some(loss);
            self.best_epoch = self.seen;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Validation outcome of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValScore {
    pub loss: f64,
    pub iou: f64,
    pub biou: f64,
    pub mcc: f64,
}

/// Stack images into `(N, C, H, W)` and masks into a flat label vector.
pub fn batch_tensors(samples: &[(Image, Vec<f64>)]) -> Result<(Tensor, Vec<f64>)> {
    let first = &samples.first().ok_or_else(|| Error::Data("empty batch".into()))?.0;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    let mut truth = Vec::with_capacity(samples.len() * h * w);
    for (img, t) in samples {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::shape("batch", "images of different sizes in one batch"));
        }
        data.extend_from_slice(&img.data);
        truth.extend_from_slice(t);
    }
    Ok((Tensor::new(&[samples.len(), c, h, w], data)?, truth))
}

fn mask_values(sample: &TileSample) -> Vec<f64> {
    sample.mask.data.iter().map(|&v| f64::from(v)).collect()
}

/// Everything a training epoch needs besides the model and the data.
pub struct EpochSetup<'a> {
    pub plan: &'a StagePlan,
    pub config: &'a TrainConfig,
    pub augment: Option<&'a AugmentSpec>,
    /// 1-based epoch within the stage.
    pub epoch: usize,
}

/// One pass over `data` in a shuffled order derived from `(seed, stage,
/// epoch)`; one optimizer step per batch. Returns the mean train loss.
pub fn train_epoch(model: &mut Manet, data: &[TileSample], opt: &mut Adam, setup: &EpochSetup<'_>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let EpochSetup {
        plan,
        config,
        augment,
        epoch,
    } = *setup;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::item_stream(
        config.seed,
        "train.shuffle",
        &format!("{}/{epoch}", plan.stage),
    ));
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in order.chunks(config.batch_size) {
        let mut items = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let s = &data[i];
            if let Some(spec) = augment {
                let ep = usize::from(plan.stage) * 100_000 + epoch;
                let trace = augment::plan_seeded(spec, augment::sample_seed(config.seed, ep, &s.id));
                let (img, m) = augment::apply(&trace, &s.image, &s.mask)?;
                items.push((img, m.data.iter().map(|&v| f64::from(v)).collect()));
            } else {
                items.push((s.image.clone(), mask_values(s)));
            }
        }
        let (x, truth) = batch_tensors(&items)?;
        let (loss_value, grads, bn) = {
            let store = model.params();
            let freeze = &plan.freeze;
            let fw = Forward::new(store, Mode::Train, move |name| {
                !freeze.is_frozen(name) && store.get(name).is_some_and(|v| v.kind == ParamKind::Trainable)
            });
            let out = model.segment(&fw, &x)?;
            let l = loss_from_logits(&out.logits, &truth, config.dice_weight)?;
            let value = l.item()?;
            let grads = if l.requires_grad() {
                let g = l.backward()?;
                fw.leaves()
                    .into_iter()
                    .filter(|(_, t)| t.requires_grad())
                    .map(|(name, t)| (name, g.get_or_zeros(&t)))
                    .collect()
            } else {
                Vec::new()
            };
            (value, grads, fw.take_bn_updates())
        };
        let params = model.params_mut();
        for (name, g) in grads {
            let p = params.get_mut(&name).expect("leaf comes from the store");
            opt.step(&name, &mut p.data, &g, plan.lr);
        }
        for (prefix, stats) in bn {
            for (key, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var_unbiased)] {
                let p = params
                    .get_mut(&format!("{prefix}.{key}"))
                    .expect("batch-norm buffers exist");
                for (r, &b) in p.data.iter_mut().zip(batch.iter()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        total += loss_value * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Eval-mode probability maps, one single-band image per sample.
pub fn predict_maps(model: &Manet, data: &[TileSample], batch_size: usize) -> Result<Vec<Image>> {
    let n = model.config().input_resolution;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let items: Vec<(Image, Vec<f64>)> = chunk.iter().map(|s| (s.image.clone(), Vec::new())).collect();
        let (x, _) = batch_tensors(&items)?;
        let probs = model.predict(&x)?;
        for p in probs.data().chunks(n * n) {
            out.push(Image::from_vec(1, n, n, p.to_vec())?);
        }
    }
    Ok(out)
}

/// Validation loss (eval mode) and metrics over `data`.
pub fn evaluate_split(
    model: &Manet,
    data: &[TileSample],
    config: &TrainConfig,
    name: &str,
) -> Result<(f64, MetricsReport)> {
    if data.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let maps = predict_maps(model, data, config.batch_size)?;
    let (mut total, mut pixels) = (0.0, 0usize);
    for (m, s) in maps.iter().zip(data) {
        let t = mask_values(s);
        let p: Vec<f64> = m.data.iter().map(|&p| p.clamp(1e-15, 1.0 - 1e-15)).collect();
        total += loss(&p, &t, config.dice_weight)? * t.len() as f64;
        pixels += t.len();
    }
    let items: Vec<Evaluated<'_>> = maps
        .iter()
        .zip(data)
        .map(|(m, s)| Evaluated {
            id: &s.id,
            prob: m,
            truth: &s.mask,
            georef: &s.georef,
            label: s.label,
        })
        .collect();
    let report = MetricsReport::evaluate(name, &items, config.threshold, config.min_area_m2)?;
    Ok((total / pixels as f64, report))
}

/// Generic stage loop: train, validate, track the best weights, stop on
/// stagnation, restore the best weights.
pub fn run_stage<T, V>(
    model: &mut Manet,
    plan: &StagePlan,
    config: &TrainConfig,
    mut train: T,
    mut validate: V,
) -> Result<StageHistory>
where
    T: FnMut(&mut Manet, usize) -> Result<f64>,
    V: FnMut(&Manet, usize) -> Result<ValScore>,
{
    let mut stopper = EarlyStopper::new(config.patience, config.min_delta);
    let mut best_params = model.params().clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let train_loss = train(model, epoch)?;
        let v = validate(model, epoch)?;
        log::info!(
            "stage {} epoch {epoch}: train {train_loss:.6} val {:.6} bIoU {:.4}",
            plan.stage,
            v.loss,
            v.biou
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: v.loss,
            val_iou: v.iou,
            val_biou: v.biou,
            val_mcc: v.mcc,
        });
        if stopper.observe(v.loss) {
            best_params = model.params().clone();
        }
        if stopper.should_stop() {
            stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    *model.params_mut() = best_params;
    Ok(StageHistory {
        stage: plan.stage,
        lr: plan.lr,
        epochs,
        best_epoch: stopper.best_epoch(),
        stopped_early,
    })
}

/// Stage 1 (head only, base lr) then stage 2 (everything, base lr / 10).
pub fn two_stage_finetune(
    model: &mut Manet,
    train: &[TileSample],
    val: &[TileSample],
    config: &TrainConfig,
    augment: Option<&AugmentSpec>,
) -> Result<[StageHistory; 2]> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(
            "two-stage fine-tuning needs nonempty TRAIN and VAL splits".into(),
        ));
    }
    let run = |model: &mut Manet, plan: StagePlan| {
        let mut opt = Adam::new(config.adam);
        run_stage(
            model,
            &plan,
            config,
            |m, epoch| {
                let setup = EpochSetup {
                    plan: &plan,
                    config,
                    augment,
                    epoch,
                };
                train_epoch(m, train, &mut opt, &setup)
            },
            |m, _| {
                let (loss, r) = evaluate_split(m, val, config, "val")?;
                Ok(ValScore {
                    loss,
                    iou: r.iou,
                    biou: r.biou,
                    mcc: r.mcc,
                })
            },
        )
    };
    let first = run(model, StagePlan::stage1(config))?;
    let second = run(model, StagePlan::stage2(config))?;
    Ok([first, second])
}

/// Imagery selection for a registry run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sources {
    Bing,
    Corona,
    /// Union of Bing and CORONA samples.
    Both,
    /// Generated tiles tagged SYNTHETIC.
    Synthetic,
}

impl Sources {
    /// Name fragment used in lineage names.
    pub fn token(self) -> &'static str {
        match self {
            Sources::Bing => "Bing",
            Sources::Corona => "CORONA",
            Sources::Both => "BingCORONA",
            Sources::Synthetic => "Synthetic",
        }
    }

    pub fn accepts(self, source: Source) -> bool {
        matches!(
            (self, source),
            (Sources::Bing, Source::Bing)
                | (Sources::Corona, Source::Corona)
                | (Sources::Both, Source::Bing | Source::Corona)
                | (Sources::Synthetic, Source::Synthetic)
        )
    }
}

impl FromStr for Sources {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BING" => Ok(Sources::Bing),
            "CORONA" => Ok(Sources::Corona),
            "BOTH" => Ok(Sources::Both),
            "SYNTHETIC" => Ok(Sources::Synthetic),
            _ => Err(Error::Config(format!(
                "unknown sources {s:?} (BING, CORONA, BOTH, SYNTHETIC)"
            ))),
        }
    }
}

impl fmt::Display for Sources {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sources::Bing => "BING",
            Sources::Corona => "CORONA",
            Sources::Both => "BOTH",
            Sources::Synthetic => "SYNTHETIC",
        })
    }
}

/// Name of a training event on `sources` after the events in `lineage`:
/// the source token for a fresh model, `<previous>_<token>` otherwise.
pub fn lineage_name(lineage: &[String], sources: Sources) -> String {
    match lineage.last() {
        None => sources.token().to_string(),
        Some(prev) => format!("{prev}_{}", sources.token()),
    }
}

pub fn filter_sources(data: &[TileSample], sources: Sources) -> Vec<TileSample> {
    data.iter().filter(|s| sources.accepts(s.source)).cloned().collect()
}

/// Inputs of a registry run.
pub struct RegistryRun<'a> {
    pub sources: Sources,
    /// Fresh model from `model_config` when absent.
    pub base: Option<&'a Checkpoint>,
    pub model_config: &'a ManetConfig,
    pub train: &'a [TileSample],
    pub val: &'a [TileSample],
    pub config: &'a TrainConfig,
    pub augment: Option<&'a AugmentSpec>,
}

/// Filter to the requested sources, fine-tune in two stages and return the
/// named checkpoint with the extended lineage.
pub fn run_registry(run: &RegistryRun<'_>) -> Result<Checkpoint> {
    let train = filter_sources(run.train, run.sources);
    let val = filter_sources(run.val, run.sources);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "no {} samples after filtering ({} train, {} val)",
            run.sources,
            train.len(),
            val.len()
        )));
    }
    let (mut model, mut lineage, mut histories) = match run.base {
        Some(ckpt) => (
            transfer_load(ckpt, run.model_config)?,
            ckpt.lineage.clone(),
            ckpt.histories.clone(),
        ),
        None => (
            Manet::new(run.model_config.clone(), run.config.seed)?,
            Vec::new(),
            Vec::new(),
        ),
    };
    let name = lineage_name(&lineage, run.sources);
    log::info!("training {name} on {} train / {} val tiles", train.len(), val.len());
    let stages = two_stage_finetune(&mut model, &train, &val, run.config, run.augment)?;
    for h in stages {
        histories.push((name.clone(), h));
    }
    lineage.push(name);
    let mut ckpt = Checkpoint::from_model(&model, lineage);
    ckpt.histories = histories;
    if let Some(base) = run.base {
        ckpt.meta = base.meta.clone();
    }
    Ok(ckpt)
}
