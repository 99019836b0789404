//! Subcommand bodies.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use tellscan::augment::{apply, plan_seeded, sample_seed};
use tellscan::geoingest::{
    self, load_sample, manifest_base, parse_sites, synth_generate, world_file_path, DatasetManifest, Flavor, GeoRef,
    IngestOptions, RasterStore, SiteFormat, Source, Split, SynthConfig, TileSample,
};
use tellscan::manet::Manet;
use tellscan::metrics::{aggregate_runs, pixel_table, site_table, validation_table, MetricsReport, ValidationRow};
use tellscan::raster::{encode_mask_pgm, encode_pnm, read_pnm, write_bytes, Mask};
use tellscan::sitemap::{extract_candidates, render_heatmap, Heatmap, Registry, Status};
use tellscan::trainer::{evaluate_split, predict_maps, run_registry, Checkpoint, RegistryRun, Sources};
use tellscan::Error;

use crate::config::RunConfig;
use crate::{
    CliError, EvaluateArgs, IngestArgs, PredictArgs, PreviewArgs, ReportArgs, SitesArgs, SynthArgs, TrainArgs,
};

type CliResult<T = ()> = Result<T, CliError>;

/// Flag values that fail to parse are usage errors.
fn flag<T: FromStr<Err = Error>>(name: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|e: Error| CliError::Usage(format!("--{name}: {e}")))
}

fn existing(path: PathBuf, what: &str) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn required(flag: Option<&PathBuf>, fallback: Option<&PathBuf>, what: &str, name: &str) -> CliResult<PathBuf> {
    match flag.or(fallback) {
        Some(p) => existing(p.clone(), what),
        None => Err(CliError::Usage(format!("{what} required (--{name} or config)"))),
    }
}

fn manifest_path(cfg: &RunConfig, flag: Option<&PathBuf>) -> CliResult<PathBuf> {
    let default = cfg.out.join("manifest.tsv");
    existing(
        flag.or(cfg.paths.manifest.as_ref()).cloned().unwrap_or(default),
        "manifest",
    )
}

fn write_text(path: &Path, text: &str) -> CliResult {
    write_bytes(path, text.as_bytes())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn stamped(cfg: &RunConfig, body: &str) -> String {
    let mut s = String::new();
    for line in cfg.stamp() {
        let _ = writeln!(s, "# {line}");
    }
    s.push_str(body);
    s
}

fn load_split(path: &Path, split: Split) -> CliResult<Vec<TileSample>> {
    let manifest = DatasetManifest::read(path)?;
    let base = manifest_base(path);
    let samples = manifest
        .split(split)
        .map(|e| load_sample(&base, e))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(samples)
}

fn load_model(path: &Path) -> CliResult<(Checkpoint, Manet)> {
    let ckpt = Checkpoint::load(path)?;
    let model = Manet::from_params(ckpt.config.clone(), ckpt.params.clone())?;
    Ok((ckpt, model))
}

fn model_name(ckpt: &Checkpoint) -> String {
    ckpt.name().unwrap_or("untrained").to_string()
}

pub fn synth(cfg: &mut RunConfig, a: &SynthArgs) -> CliResult {
    if a.tiles == 0 || a.positive > a.tiles {
        return Err(CliError::Usage(format!(
            "--positive {} must not exceed --tiles {} (> 0)",
            a.positive, a.tiles
        )));
    }
    if let Some(r) = a.resolution {
        cfg.window.resolution = r;
    }
    let sc = SynthConfig {
        tiles: a.tiles,
        positive_fraction: a.positive as f64 / a.tiles as f64,
        resolution: cfg.window.resolution,
        side: cfg.window.side,
        flavor: flag::<Flavor>("flavor", &a.flavor)?,
        fractions: cfg.window.fractions,
        ..SynthConfig::default()
    };
    sc.validate()?;
    let data = synth_generate(&sc, cfg.seed)?;
    let manifest = data.write(&cfg.out, &cfg.stamp(), &[("config".into(), cfg.digest())])?;
    let c = manifest.counts();
    log::info!(
        "synthetic dataset in {}: {} tiles, splits {}/{}/{}",
        cfg.out.display(),
        manifest.entries.len(),
        c.split_total(Split::Train),
        c.split_total(Split::Val),
        c.split_total(Split::Test)
    );
    Ok(())
}

pub fn ingest(cfg: &mut RunConfig, a: &IngestArgs) -> CliResult {
    let sites_path = required(a.sites.as_ref(), cfg.paths.sites.as_ref(), "site file", "sites")?;
    let store_path = required(a.store.as_ref(), cfg.paths.store.as_ref(), "raster store", "store")?;
    if let Some(n) = a.negatives {
        cfg.window.negatives = n;
    }
    if let Some(c) = a.clearance {
        cfg.window.clearance = c;
    }
    let source = a.source.as_deref().map(|s| flag::<Source>("source", s)).transpose()?;
    let format = match sites_path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("shp") => SiteFormat::Shp,
        _ => SiteFormat::Text,
    };
    let bytes = fs::read(&sites_path).map_err(|e| Error::io(&sites_path, e))?;
    let sites = parse_sites(&bytes, format)?;
    let store = RasterStore::open(&store_path)?;
    let opts = IngestOptions {
        side: cfg.window.side,
        resolution: cfg.window.resolution,
        negatives: cfg.window.negatives,
        clearance: cfg.window.clearance,
        fractions: cfg.window.fractions,
        source,
        comments: cfg.stamp(),
    };
    let mut manifest = geoingest::ingest(&store, &sites, &opts, cfg.seed, &cfg.out)?;
    manifest.meta.push(("config".into(), cfg.digest()));
    let path = cfg.out.join("manifest.tsv");
    manifest.write(&path)?;
    log::info!("wrote {} ({} tiles)", path.display(), manifest.entries.len());
    Ok(())
}

pub fn augment_preview(cfg: &mut RunConfig, a: &PreviewArgs) -> CliResult {
    let path = manifest_path(cfg, a.manifest.as_ref())?;
    let spec = cfg.augment_spec();
    spec.validate()?;
    let manifest = DatasetManifest::read(&path)?;
    let base = manifest_base(&path);
    let dir = cfg.out.join("preview");
    let mut log_text = String::new();
    for entry in manifest.split(Split::Train).take(a.count) {
        let sample = load_sample(&base, entry)?;
        let trace = plan_seeded(&spec, sample_seed(cfg.seed, 0, &sample.id));
        let (img, mask) = apply(&trace, &sample.image, &sample.mask)?;
        write_bytes(
            &dir.join(format!("{}_aug.ppm", sample.id)),
            &encode_pnm(&img, &cfg.stamp())?,
        )?;
        write_bytes(
            &dir.join(format!("{}_aug_mask.pgm", sample.id)),
            &encode_mask_pgm(&mask, &cfg.stamp()),
        )?;
        let _ = writeln!(log_text, "{}", trace.log_line(&sample.id));
    }
    write_text(&dir.join("traces.log"), &stamped(cfg, &log_text))
}

pub fn train(cfg: &mut RunConfig, a: &TrainArgs) -> CliResult {
    let path = manifest_path(cfg, a.manifest.as_ref())?;
    if let Some(s) = &a.sources {
        cfg.train.sources = s.clone();
    }
    if let Some(n) = a.max_epochs {
        cfg.train.max_epochs = n;
    }
    if let Some(lr) = a.lr {
        cfg.train.base_lr = lr;
    }
    if a.no_augment {
        cfg.train.augment = false;
    }
    let sources = flag::<Sources>("sources", &cfg.train.sources)?;
    let base_path = a.base.clone().map(|p| existing(p, "base checkpoint")).transpose()?;
    let model_config = cfg.manet().map_err(CliError::Usage)?;
    let tc = cfg.train_config();
    tc.validate()?;
    let spec = cfg.augment_spec();
    spec.validate()?;

    let train = load_split(&path, Split::Train)?;
    let val = load_split(&path, Split::Val)?;
    let base = base_path.as_deref().map(Checkpoint::load).transpose()?;
    let run = RegistryRun {
        sources,
        base: base.as_ref(),
        model_config: &model_config,
        train: &train,
        val: &val,
        config: &tc,
        augment: cfg.train.augment.then_some(&spec),
    };
    let mut ckpt = run_registry(&run)?;
    ckpt.meta.insert("seed".into(), cfg.seed.to_string());
    ckpt.meta.insert("config".into(), cfg.digest());
    let name = model_name(&ckpt);
    let ckpt_path = cfg.out.join(format!("{name}.tell"));
    ckpt.save(&ckpt_path)?;
    log::info!("wrote {}", ckpt_path.display());

    let mut hist = String::new();
    for (event, h) in &ckpt.histories {
        let _ = writeln!(hist, "# event={event}");
        hist.push_str(&h.to_text());
    }
    write_text(&cfg.out.join(format!("{name}_history.txt")), &stamped(cfg, &hist))
}

/// Seeded augmented copy of a split for repeat `k` (k ≥ 1); the georeference
/// stays that of the source tile.
fn augmented(cfg: &RunConfig, data: &[TileSample], k: usize) -> CliResult<Vec<TileSample>> {
    let spec = cfg.augment_spec();
    spec.validate()?;
    let mut out = Vec::with_capacity(data.len());
    for s in data {
        let trace = plan_seeded(&spec, sample_seed(cfg.seed, 1_000_000 + k, &s.id));
        let (img, mask) = apply(&trace, &s.image, &s.mask)?;
        out.push(TileSample::new(
            s.id.clone(),
            img,
            mask,
            s.georef,
            s.source,
            s.covered_sites.clone(),
        )?);
    }
    Ok(out)
}

pub fn evaluate(cfg: &mut RunConfig, a: &EvaluateArgs) -> CliResult {
    let ckpt_path = required(
        a.checkpoint.as_ref(),
        cfg.paths.checkpoint.as_ref(),
        "checkpoint",
        "checkpoint",
    )?;
    let path = manifest_path(cfg, a.manifest.as_ref())?;
    let split = flag::<Split>("split", &a.split)?;
    if let Some(r) = a.repeats {
        cfg.metrics.repeats = r;
    }
    if cfg.metrics.repeats == 0 {
        return Err(CliError::Usage("repeats must be ≥ 1".into()));
    }
    let tc = cfg.train_config();
    tc.validate()?;
    let (ckpt, model) = load_model(&ckpt_path)?;
    let name = model_name(&ckpt);
    let data = load_split(&path, split)?;
    if data.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")).into());
    }
    let dir = cfg.out.join("eval");
    let mut reports = Vec::new();
    for k in 0..cfg.metrics.repeats {
        let run_data = if k == 0 {
            data.clone()
        } else {
            augmented(cfg, &data, k)?
        };
        let (loss, report) = evaluate_split(&model, &run_data, &tc, &name)?;
        let body = format!("# split={split} repeat={} loss={loss}\n{}", k + 1, report.to_kv());
        write_text(&dir.join(format!("{name}_r{:02}.txt", k + 1)), &stamped(cfg, &body))?;
        reports.push(report);
    }
    let mut summary = format!("# split={split} repeats={}\n", reports.len());
    summary.push_str(&pixel_section(&[reports.clone()])?);
    summary.push('\n');
    summary.push_str(&site_table(&[&reports[0]]));
    write_text(&dir.join(format!("{name}_summary.txt")), &stamped(cfg, &summary))
}

/// Pixel metrics per model: mean ± std when a model has several runs, plain
/// values with a notice otherwise.
fn pixel_section(groups: &[Vec<MetricsReport>]) -> CliResult<String> {
    let mut aggs = Vec::new();
    let mut singles = Vec::new();
    for g in groups {
        if g.len() >= 2 {
            aggs.push(aggregate_runs(g)?);
        } else if let Some(r) = g.first() {
            singles.push(r);
        }
    }
    let mut s = String::new();
    if !aggs.is_empty() {
        let runs: Vec<String> = aggs.iter().map(|a| format!("{}={}", a.model, a.runs)).collect();
        let _ = writeln!(s, "runs: {}", runs.join(" "));
        s.push_str(&pixel_table(&aggs));
    }
    if !singles.is_empty() {
        let names: Vec<&str> = singles.iter().map(|r| r.model.as_str()).collect();
        let _ = writeln!(
            s,
            "notice: single evaluation run for {}; standard deviation omitted",
            names.join(", ")
        );
        s.push_str("Model\tIoU\tMCC\tbIoU\n");
        for r in singles {
            let _ = writeln!(
                s,
                "{}\t{:.2}\t{:.2}\t{:.2}",
                r.model,
                r.iou * 100.0,
                r.mcc * 100.0,
                r.biou * 100.0
            );
        }
    }
    Ok(s)
}

fn read_tile(path: &Path) -> CliResult<TileSample> {
    let mut image = read_pnm(path)?;
    if image.channels == 1 {
        image = image.replicate(3);
    }
    let wf = world_file_path(path);
    let georef = GeoRef::from_world_file(&fs::read_to_string(&wf).map_err(|e| Error::io(&wf, e))?)?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("tile").to_string();
    let mask = Mask::zeros(image.height, image.width);
    Ok(TileSample::new(id, image, mask, georef, Source::Synthetic, Vec::new())?)
}

pub fn predict(cfg: &mut RunConfig, a: &PredictArgs) -> CliResult {
    let ckpt_path = required(
        a.checkpoint.as_ref(),
        cfg.paths.checkpoint.as_ref(),
        "model checkpoint",
        "checkpoint",
    )?;
    let tiles = if a.tile.is_empty() {
        let path = manifest_path(cfg, a.manifest.as_ref())?;
        let split = flag::<Split>("split", &a.split)?;
        load_split(&path, split)?
    } else {
        a.tile
            .iter()
            .map(|p| existing(p.clone(), "tile").and_then(|p| read_tile(&p)))
            .collect::<CliResult<Vec<_>>>()?
    };
    let (ckpt, model) = load_model(&ckpt_path)?;
    let name = model_name(&ckpt);
    let maps = predict_maps(&model, &tiles, cfg.train.batch_size)?;
    let dir = cfg.out.join("heatmaps");
    let mut notes = cfg.stamp();
    notes.push(format!("model={name}"));
    for (t, p) in tiles.iter().zip(maps) {
        let h = Heatmap::new(p, t.georef, t.id.clone(), name.clone())?;
        render_heatmap(&h, &dir, &cfg.stamp())?;
        let prob_path = dir.join(format!("{}_prob.pgm", t.id));
        write_bytes(&prob_path, &encode_pnm(&h.prob, &notes)?)?;
        write_bytes(&world_file_path(&prob_path), h.georef.to_world_file().as_bytes())?;
    }
    log::info!("wrote {} heatmaps to {}", tiles.len(), dir.display());
    Ok(())
}

fn audit_path(registry: &Path) -> PathBuf {
    let stem = registry.file_stem().and_then(|s| s.to_str()).unwrap_or("registry");
    registry.with_file_name(format!("{stem}_audit.log"))
}

fn now_unix() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return t;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn read_heatmaps(dir: &Path) -> CliResult<Vec<Heatmap>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with("_prob.pgm")))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let prob = read_pnm(&p)?;
        let wf = world_file_path(&p);
        let georef = GeoRef::from_world_file(&fs::read_to_string(&wf).map_err(|e| Error::io(&wf, e))?)?;
        let id = p
            .file_name()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_suffix("_prob.pgm"))
            .unwrap_or_default()
            .to_string();
        out.push(Heatmap::new(prob, georef, id, "")?);
    }
    Ok(out)
}

pub fn sites(cfg: &mut RunConfig, a: &SitesArgs) -> CliResult {
    if let Some(t) = a.threshold {
        cfg.metrics.threshold = t;
    }
    if let Some(m) = a.min_area {
        cfg.metrics.min_area_m2 = m;
    }
    if let Some(d) = a.dedupe {
        cfg.sites.dedupe_m = d;
    }
    if !(0.0..=1.0).contains(&cfg.metrics.threshold) {
        return Err(CliError::Usage(format!(
            "threshold {} outside [0, 1]",
            cfg.metrics.threshold
        )));
    }
    if !(cfg.sites.dedupe_m >= 0.0) {
        return Err(CliError::Usage("dedupe distance must be ≥ 0".into()));
    }
    let heat_dir = match &a.heatmaps {
        Some(d) => Some(existing(d.clone(), "heatmap directory")?),
        None => Some(cfg.out.join("heatmaps")).filter(|d| d.is_dir()),
    };
    let out_path = cfg.out.join("registry.tsv");
    let reg_path = match &a.registry {
        Some(p) => Some(existing(p.clone(), "registry")?),
        None => Some(out_path.clone()).filter(|p| p.exists()),
    };
    if heat_dir.is_none() && reg_path.is_none() {
        return Err(Error::Data("no heatmaps and no registry to work on".into()).into());
    }
    let ts = a.timestamp.unwrap_or_else(now_unix);

    let mut registry = match &reg_path {
        Some(p) => {
            let export = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let ap = audit_path(p);
            let audit = if ap.exists() {
                fs::read_to_string(&ap).map_err(|e| Error::io(&ap, e))?
            } else {
                String::new()
            };
            Registry::parse(&export, &audit, cfg.sites.dedupe_m)?
        }
        None => Registry::new(cfg.sites.dedupe_m),
    };
    if let Some(dir) = &heat_dir {
        let mut candidates = Vec::new();
        for h in read_heatmaps(dir)? {
            candidates.extend(extract_candidates(&h, cfg.metrics.threshold, cfg.metrics.min_area_m2)?);
        }
        log::info!("{} candidates from {}", candidates.len(), dir.display());
        registry.merge(&candidates, ts)?;
    }
    for id in &a.confirm {
        registry.update(id, Status::Confirmed, ts)?;
    }
    for id in &a.reject {
        registry.update(id, Status::Rejected, ts)?;
    }
    let (p, c, r) = registry.counts();
    log::info!("registry: {p} predicted, {c} confirmed, {r} rejected");
    write_text(&out_path, &stamped(cfg, &registry.export()))?;
    write_text(&audit_path(&out_path), &stamped(cfg, &registry.audit_text()))
}

fn eval_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.rsplit_once("_r"))
                .is_some_and(|(_, n)| n.len() == 2 && n.bytes().all(|b| b.is_ascii_digit()))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn report(cfg: &mut RunConfig, a: &ReportArgs) -> CliResult {
    let dir = a.evals.clone().unwrap_or_else(|| cfg.out.join("eval"));
    if !dir.is_dir() {
        return Err(Error::Data(format!("evaluation directory {} does not exist", dir.display())).into());
    }
    let files = eval_files(&dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no evaluation outputs in {}", dir.display())).into());
    }
    let mut groups: Vec<Vec<MetricsReport>> = Vec::new();
    let mut origins: Vec<String> = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        for line in text.lines().filter_map(|l| l.strip_prefix("# tellscan ")) {
            if !origins.iter().any(|o| o == line) {
                origins.push(line.to_string());
            }
        }
        let r = MetricsReport::parse_kv(&text)?;
        match groups.iter_mut().find(|g| g[0].model == r.model) {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }

    let ckpts = if a.checkpoint.is_empty() {
        let mut v: Vec<PathBuf> = fs::read_dir(&cfg.out)
            .map_err(|e| Error::io(&cfg.out, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "tell"))
            .collect();
        v.sort();
        v
    } else {
        a.checkpoint.clone()
    };
    let mut rows: Vec<ValidationRow> = Vec::new();
    let mut lineages = Vec::new();
    for p in &ckpts {
        let ckpt = Checkpoint::load(p)?;
        lineages.push(format!("{}: {}", model_name(&ckpt), ckpt.lineage.join(" > ")));
        for (event, h) in &ckpt.histories {
            // the last stage of an event carries its final validation scores
            if ckpt.histories.iter().rev().find(|(e, _)| e == event).map(|(_, l)| l) != Some(h) {
                continue;
            }
            if rows.iter().any(|r| &r.model == event) {
                continue;
            }
            if let Some(b) = h.best() {
                rows.push(ValidationRow {
                    model: event.clone(),
                    iou: b.val_iou,
                    mcc: b.val_mcc,
                    biou: b.val_biou,
                    epoch: b.epoch,
                });
            }
        }
    }

    let mut s = String::from("tellscan report\n");
    let _ = writeln!(s, "seed={}", cfg.seed);
    let _ = writeln!(s, "config={}", cfg.digest());
    for o in &origins {
        let _ = writeln!(s, "evaluated with {o}");
    }
    for l in &lineages {
        let _ = writeln!(s, "lineage {l}");
    }
    s.push_str("\nValidation\n");
    if rows.is_empty() {
        s.push_str("notice: no checkpoint histories found\n");
    } else {
        s.push_str(&validation_table(&rows));
    }
    s.push_str("\nTest pixel metrics\n");
    s.push_str(&pixel_section(&groups)?);
    s.push_str("\nSite detection\n");
    let firsts: Vec<&MetricsReport> = groups.iter().map(|g| &g[0]).collect();
    s.push_str(&site_table(&firsts));
    write_text(&cfg.out.join("report.txt"), &s)
}
