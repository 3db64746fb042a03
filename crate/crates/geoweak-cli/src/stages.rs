//! Pipeline stages. Each one reads upstream artifacts from the run
//! directory, writes its own under a stage subdirectory, and records a
//! completion mark so unchanged re-runs skip it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use geoweak::autolabel::{
    autolabel_tiles, write_outcomes_csv, AutolabelOutcome, RemoteSegmentBackend, SegmentBackend,
    SyntheticSceneBackend,
};
use geoweak::dataset::{
    assemble_auto, check_split_separation, make_regime, read_labels, split, write_labels, Dataset,
    RegimeSpec, Split,
};
use geoweak::eval::{evaluate, write_predictions_jsonl, EvalReport, ImageEval};
use geoweak::filtering::{
    calibrate_thresholds, center_crop, exceeded_metrics, region_metrics, write_metrics_csv,
    ColorRules, MetricsRow,
};
use geoweak::geo::{dedupe_and_space, read_points_csv, write_points_csv, GeoBBox, GeoPoint, PointLabel};
use geoweak::hpo::{strategy_by_name, Config as HpoConfig, HyperParamSpace};
use geoweak::imagery::{
    fetch_tile, load_png, tile_filename, ImageTile, ImageryAdapter, LocalDirAdapter, RemoteAdapter,
    UreqTransport,
};
use geoweak::overpass::{fetch_negative_points, OverpassClient};
use geoweak::report::{write_regime_plots, write_report_csv, ResultRow};
use geoweak::training::{
    resolve_space, tune_backend, two_stage, DetectorBackend, EarlyStop, SubprocessBackend,
    TrainRunOptions, TrainedModel, TuneMetric, TuneRequest, TwoStageMode,
};
use geoweak::{Error, Result};

use crate::config::{ImagerySource, RunConfig, SegmenterKind, TrainerKind};
use crate::runlog::{run_stage, Fingerprint, RunLog, StageLedger};

pub struct Ctx<'a> {
    pub config: &'a RunConfig,
    pub log: &'a RunLog,
    /// seeds.train, unless --seed overrode it.
    pub train_seed: u64,
}

impl Ctx<'_> {
    fn run_dir(&self) -> &Path {
        self.log.run_dir()
    }

    fn parent_fp(&self, stage: &str) -> Result<String> {
        let ledger = StageLedger::load(self.run_dir())?;
        Ok(ledger.require(stage)?.fingerprint.clone())
    }

    fn stage_dir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.run_dir().join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn is_golden_point(&self, point: &GeoPoint) -> bool {
        self.config.points.golden_categories.contains(&point.category)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TileRow {
    id: String,
    lat: f64,
    lon: f64,
    path: PathBuf,
}

fn run_points_path(ctx: &Ctx) -> PathBuf {
    ctx.run_dir().join("points").join("points.csv")
}

fn tiles_manifest_path(ctx: &Ctx) -> PathBuf {
    ctx.run_dir().join("tiles").join("tiles.jsonl")
}

fn read_tile_rows(ctx: &Ctx) -> Result<BTreeMap<String, TileRow>> {
    let path = tiles_manifest_path(ctx);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: TileRow = serde_json::from_str(line)
            .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
        rows.insert(row.id.clone(), row);
    }
    Ok(rows)
}

fn load_tile(ctx: &Ctx, point: &GeoPoint, row: &TileRow) -> Result<ImageTile> {
    let pixels = load_png(&row.path)?;
    ImageTile::new(pixels, ctx.config.imagery.mpp, point.clone(), point.id.clone())
}

/// Collects school-candidate points: school label, not golden-pool.
fn candidate_points(ctx: &Ctx, points: &[GeoPoint]) -> Vec<GeoPoint> {
    points
        .iter()
        .filter(|p| p.label == PointLabel::School && !ctx.is_golden_point(p))
        .cloned()
        .collect()
}

pub fn fetch_points(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.config;
    let fingerprint = Fingerprint::new("fetch-points")
        .config(&cfg.points)?
        .file(&cfg.points.csv)?
        .finish();
    let out_path = run_points_path(ctx);
    run_stage(ctx.log, "fetch-points", fingerprint, || {
        let mut points = read_points_csv(&cfg.points.csv)?;
        let input_count = points.len();
        if let Some(neg) = &cfg.points.negatives {
            let client = OverpassClient::new(
                neg.endpoint.clone(),
                cfg.paths.cache_dir.join("overpass"),
                Box::new(UreqTransport::new(Duration::from_secs(60))),
            );
            let [min_lat, min_lon, max_lat, max_lon] = neg.bbox;
            let region = GeoBBox::new(min_lat, min_lon, max_lat, max_lon)?;
            let extra = fetch_negative_points(&client, &region, &neg.categories)?;
            ctx.log.info("fetch-points", &format!("{} background points fetched", extra.len()))?;
            points.extend(extra);
        }
        let spaced = dedupe_and_space(&points, cfg.points.min_separation_m)?;
        ctx.log.info(
            "fetch-points",
            &format!(
                "{} points in, {} kept after {} m spacing",
                input_count,
                spaced.len(),
                cfg.points.min_separation_m
            ),
        )?;
        ctx.stage_dir("points")?;
        write_points_csv(&spaced, &out_path)?;
        Ok(vec![out_path.clone()])
    })?;
    Ok(())
}

fn build_imagery_adapter(cfg: &RunConfig) -> Result<Box<dyn ImageryAdapter>> {
    match cfg.imagery.source {
        ImagerySource::Local => {
            let dir = cfg.imagery.tiles_dir.as_ref().expect("validated");
            Ok(Box::new(LocalDirAdapter::new(dir)))
        }
        ImagerySource::Remote => {
            let template = cfg.imagery.url_template.as_ref().expect("validated");
            Ok(Box::new(RemoteAdapter::from_env(
                template.clone(),
                Box::new(UreqTransport::new(Duration::from_secs(60))),
            )))
        }
    }
}

pub fn fetch_tiles(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.config;
    let fingerprint = Fingerprint::new("fetch-tiles")
        .text(&ctx.parent_fp("fetch-points")?)
        .config(&cfg.imagery)?
        .finish();
    let manifest = tiles_manifest_path(ctx);
    run_stage(ctx.log, "fetch-tiles", fingerprint, || {
        let points = read_points_csv(&run_points_path(ctx))?;
        let adapter = build_imagery_adapter(cfg)?;
        let cache = cfg.paths.cache_dir.join("tiles");
        std::fs::create_dir_all(&cache).map_err(|e| Error::io(&cache, e))?;
        let size = (cfg.imagery.tile_px, cfg.imagery.tile_px);

        let mut lines = String::new();
        let mut fetched = 0usize;
        for point in &points {
            let path = cache.join(tile_filename(point.lat, point.lon));
            if !path.exists() {
                let tile = fetch_tile(adapter.as_ref(), point, size, cfg.imagery.mpp)?;
                tile.save_png(&path)?;
                fetched += 1;
            }
            let row = TileRow {
                id: point.id.clone(),
                lat: point.lat,
                lon: point.lon,
                path: path.clone(),
            };
            lines.push_str(&serde_json::to_string(&row).expect("tile row serializes"));
            lines.push('\n');
        }
        ctx.stage_dir("tiles")?;
        std::fs::write(&manifest, lines).map_err(|e| Error::io(&manifest, e))?;
        ctx.log.info(
            "fetch-tiles",
            &format!("{} tiles ready ({} fetched, {} cached)", points.len(), fetched, points.len() - fetched),
        )?;
        Ok(vec![manifest.clone()])
    })?;
    Ok(())
}

pub fn filter(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.config;
    let fingerprint = Fingerprint::new("filter")
        .text(&ctx.parent_fp("fetch-tiles")?)
        .config(&cfg.filtering)?
        .config(&cfg.points.golden_categories)?
        .finish();
    let dir = ctx.run_dir().join("filter");
    let metrics_csv = dir.join("metrics.csv");
    let thresholds_path = dir.join("thresholds.toml");
    let kept_path = dir.join("kept.txt");
    run_stage(ctx.log, "filter", fingerprint, || {
        let points = read_points_csv(&run_points_path(ctx))?;
        let tile_rows = read_tile_rows(ctx)?;
        let candidates = candidate_points(ctx, &points);
        if candidates.is_empty() {
            return Err(Error::InvalidInput("no school-candidate tiles to filter".into()));
        }

        let rules = ColorRules::default();
        let crop = (cfg.filtering.crop_px, cfg.filtering.crop_px);
        let mut metrics = Vec::with_capacity(candidates.len());
        for point in &candidates {
            let row = tile_rows
                .get(&point.id)
                .ok_or_else(|| Error::NotFound(format!("tile manifest entry for {}", point.id)))?;
            let tile = load_tile(ctx, point, row)?;
            metrics.push(region_metrics(&center_crop(&tile, crop)?.pixels, &rules));
        }

        let thresholds = calibrate_thresholds(&metrics)?;
        ctx.stage_dir("filter")?;
        thresholds.write_toml(&thresholds_path)?;

        let mut rows = Vec::with_capacity(candidates.len());
        let mut kept_ids = String::new();
        let mut kept = 0usize;
        for (point, m) in candidates.iter().zip(&metrics) {
            let reasons = exceeded_metrics(m, &thresholds);
            if reasons.is_empty() {
                kept += 1;
                kept_ids.push_str(&point.id);
                kept_ids.push('\n');
            }
            rows.push(MetricsRow {
                tile_id: point.id.clone(),
                metrics: *m,
                kept: reasons.is_empty(),
                reasons,
            });
        }
        write_metrics_csv(&metrics_csv, &rows)?;
        std::fs::write(&kept_path, kept_ids).map_err(|e| Error::io(&kept_path, e))?;
        ctx.log.info(
            "filter",
            &format!("{} candidates, {} kept, {} rejected", candidates.len(), kept, candidates.len() - kept),
        )?;
        ctx.log.event(
            "filter",
            "thresholds",
            serde_json::json!({
                "vegetation": thresholds.vegetation,
                "desert": thresholds.desert,
                "sea": thresholds.sea,
            }),
        )?;
        Ok(vec![metrics_csv.clone(), thresholds_path.clone(), kept_path.clone()])
    })?;
    Ok(())
}

fn build_segment_backend(cfg: &RunConfig) -> Box<dyn SegmentBackend> {
    match cfg.autolabel.backend {
        SegmenterKind::Scene => {
            let dir = cfg.autolabel.scenes_dir.as_ref().expect("validated");
            Box::new(SyntheticSceneBackend::new(dir))
        }
        SegmenterKind::Remote => {
            let endpoint = cfg.autolabel.endpoint.as_ref().expect("validated");
            Box::new(RemoteSegmentBackend::new(
                endpoint.clone(),
                Box::new(UreqTransport::new(Duration::from_secs(120))),
            ))
        }
    }
}

fn outcomes_jsonl_path(ctx: &Ctx) -> PathBuf {
    ctx.run_dir().join("autolabel").join("outcomes.jsonl")
}

pub fn autolabel(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.config;
    let kept_path = ctx.run_dir().join("filter").join("kept.txt");
    let mut fp = Fingerprint::new("autolabel")
        .text(&ctx.parent_fp("filter")?)
        .config(&cfg.autolabel)?;
    // Scene sidecars are stage inputs; hash them so edits invalidate the mark.
    if cfg.autolabel.backend == SegmenterKind::Scene && kept_path.exists() {
        let scenes = cfg.autolabel.scenes_dir.as_ref().expect("validated");
        let kept = std::fs::read_to_string(&kept_path).map_err(|e| Error::io(&kept_path, e))?;
        for id in kept.lines().filter(|l| !l.is_empty()) {
            let scene = scenes.join(format!("{id}.json"));
            if scene.exists() {
                fp = fp.file(&scene)?;
            }
        }
    }
    let fingerprint = fp.finish();

    let dir = ctx.run_dir().join("autolabel");
    let csv_path = dir.join("outcomes.csv");
    let jsonl_path = outcomes_jsonl_path(ctx);
    run_stage(ctx.log, "autolabel", fingerprint, || {
        let points = read_points_csv(&run_points_path(ctx))?;
        let tile_rows = read_tile_rows(ctx)?;
        let kept = std::fs::read_to_string(&kept_path).map_err(|e| Error::io(&kept_path, e))?;
        let mut tiles = Vec::new();
        for id in kept.lines().filter(|l| !l.is_empty()) {
            let point = points
                .iter()
                .find(|p| p.id == id)
                .ok_or_else(|| Error::NotFound(format!("point {id} from kept list")))?;
            let row = tile_rows
                .get(id)
                .ok_or_else(|| Error::NotFound(format!("tile manifest entry for {id}")))?;
            tiles.push(load_tile(ctx, point, row)?);
        }

        let backend = build_segment_backend(cfg);
        let results = autolabel_tiles(&tiles, backend.as_ref(), &cfg.autolabel.params);
        let mut outcomes = Vec::with_capacity(results.len());
        for (tile, result) in tiles.iter().zip(results) {
            match result {
                Ok(outcome) => outcomes.push(outcome),
                Err(e) => {
                    return Err(Error::Backend(format!("labeling tile {}: {e}", tile.source_id)))
                }
            }
        }

        ctx.stage_dir("autolabel")?;
        write_outcomes_csv(&csv_path, &outcomes)?;
        let mut lines = String::new();
        for outcome in &outcomes {
            lines.push_str(
                &serde_json::to_string(outcome)
                    .map_err(|e| Error::Decode(format!("serialize outcome: {e}")))?,
            );
            lines.push('\n');
        }
        std::fs::write(&jsonl_path, lines).map_err(|e| Error::io(&jsonl_path, e))?;

        let labeled = outcomes.iter().filter(|o| o.bbox.is_some()).count();
        let mut by_reason: BTreeMap<String, usize> = BTreeMap::new();
        for outcome in &outcomes {
            if let Some(reason) = outcome.reason {
                *by_reason.entry(reason.to_string()).or_default() += 1;
            }
        }
        ctx.log.info(
            "autolabel",
            &format!("{} tiles labeled, {} rejected", labeled, outcomes.len() - labeled),
        )?;
        ctx.log.event("autolabel", "rejections", serde_json::json!(by_reason))?;
        Ok(vec![csv_path.clone(), jsonl_path.clone()])
    })?;
    Ok(())
}

fn read_outcomes(ctx: &Ctx) -> Result<Vec<AutolabelOutcome>> {
    let path = outcomes_jsonl_path(ctx);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Decode(format!("outcome line: {e}"))))
        .collect()
}

fn auto_manifest_path(ctx: &Ctx) -> PathBuf {
    ctx.run_dir().join("dataset").join("auto").join("manifest.jsonl")
}

fn golden_manifest_path(ctx: &Ctx) -> PathBuf {
    ctx.run_dir().join("dataset").join("golden").join("manifest.jsonl")
}

fn regime_dir(ctx: &Ctx, total: usize) -> PathBuf {
    ctx.run_dir().join("dataset").join("regimes").join(format!("r{total:03}"))
}

pub fn build_dataset(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.config;
    // The training seed is deliberately absent: it must not invalidate
    // splits or regimes.
    let fingerprint = Fingerprint::new("build-dataset")
        .text(&ctx.parent_fp("autolabel")?)
        .config(&cfg.dataset)?
        .config(&[cfg.seeds.split, cfg.seeds.regime])?
        .file(&cfg.dataset.golden_manifest)?
        .finish();
    run_stage(ctx.log, "build-dataset", fingerprint, || {
        let points = read_points_csv(&run_points_path(ctx))?;
        let tile_rows = read_tile_rows(ctx)?;
        let outcomes = read_outcomes(ctx)?;

        let mut labeled_pairs = Vec::with_capacity(outcomes.len());
        for outcome in outcomes {
            let row = tile_rows.get(&outcome.tile_id).ok_or_else(|| {
                Error::NotFound(format!("tile manifest entry for {}", outcome.tile_id))
            })?;
            labeled_pairs.push((outcome, row.path.clone()));
        }
        let negatives: Vec<(String, PathBuf)> = points
            .iter()
            .filter(|p| p.label == PointLabel::NonSchool && !ctx.is_golden_point(p))
            .filter_map(|p| tile_rows.get(&p.id).map(|row| (p.id.clone(), row.path.clone())))
            .collect();

        let (auto, summary) = assemble_auto(&labeled_pairs, &negatives);
        if let Some(warning) = summary.warning() {
            ctx.log.info("build-dataset", &warning)?;
        }
        let [train_f, val_f, test_f] = cfg.dataset.auto_fractions;
        let auto = split(auto, (train_f, val_f, test_f), cfg.seeds.split)?;
        let written_auto = write_labels(&auto, &ctx.run_dir().join("dataset").join("auto"))?;

        let golden_src = read_labels(&cfg.dataset.golden_manifest)?;
        let presplit = golden_src.images.iter().any(|i| i.split != Split::Unassigned);
        let golden = if presplit {
            ctx.log.info("build-dataset", "golden pool arrives pre-split, keeping its splits")?;
            golden_src
        } else {
            let [train_f, val_f, test_f] = cfg.dataset.golden_fractions;
            split(golden_src, (train_f, val_f, test_f), cfg.seeds.split)?
        };
        let written_golden = write_labels(&golden, &ctx.run_dir().join("dataset").join("golden"))?;

        let train_pool = golden.subset(Split::Train);
        let mut outputs = vec![written_auto, written_golden];
        let mut datasets_for_check = vec![auto.clone(), golden.clone()];
        for [total, school, non_school] in cfg.dataset.regimes.iter().copied() {
            let spec = RegimeSpec::new(total, school, non_school)?;
            let regime = make_regime(&train_pool, spec, cfg.seeds.regime)?;
            let manifest = write_labels(&regime, &regime_dir(ctx, total))?;
            ctx.log.info(
                "build-dataset",
                &format!("regime {total}: {school} school + {non_school} background sites"),
            )?;
            outputs.push(manifest);
            datasets_for_check.push(regime);
        }

        let refs: Vec<&Dataset> = datasets_for_check.iter().collect();
        check_split_separation(&refs)?;
        ctx.log.info("build-dataset", "split separation verified: no image crosses splits")?;
        ctx.log.event(
            "build-dataset",
            "composition",
            serde_json::json!({
                "auto_school": summary.school_labeled,
                "auto_rejected": summary.school_rejected,
                "auto_negatives": summary.negatives,
                "golden_images": golden.len(),
            }),
        )?;
        Ok(outputs)
    })?;
    Ok(())
}

/// Which golden subset fine-tuning trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeSel {
    /// A configured regime, by total size.
    Total(usize),
    /// The whole golden train pool.
    FullPool,
}

impl RegimeSel {
    fn stage_suffix(&self) -> String {
        match self {
            RegimeSel::Total(t) => format!("r{t:03}"),
            RegimeSel::FullPool => "full".into(),
        }
    }
}

/// Default selection: the largest configured regime, or the whole pool.
pub fn default_regime(cfg: &RunConfig) -> RegimeSel {
    cfg.dataset
        .regimes
        .iter()
        .map(|r| r[0])
        .max()
        .map_or(RegimeSel::FullPool, RegimeSel::Total)
}

/// Maps an optional --regime total to a configured regime.
pub fn select_regime(cfg: &RunConfig, total: Option<usize>) -> Result<RegimeSel> {
    match total {
        None => Ok(default_regime(cfg)),
        Some(t) if cfg.dataset.regimes.iter().any(|r| r[0] == t) => Ok(RegimeSel::Total(t)),
        Some(t) => {
            let available: Vec<usize> = cfg.dataset.regimes.iter().map(|r| r[0]).collect();
            Err(Error::InvalidInput(format!(
                "regime {t} is not configured (dataset.regimes totals: {available:?})"
            )))
        }
    }
}

/// Parses a --mode flag for train and evaluate.
pub fn parse_train_mode(mode: &str) -> Result<TwoStageMode> {
    match mode {
        "full" => Ok(TwoStageMode::Full),
        "skip_pretrain" => Ok(TwoStageMode::SkipPretrain),
        "skip_finetune" => Ok(TwoStageMode::SkipFinetune),
        other => Err(Error::InvalidInput(format!(
            "mode '{other}' must be full, skip_pretrain, or skip_finetune"
        ))),
    }
}

fn mode_suffix(mode: TwoStageMode) -> &'static str {
    match mode {
        TwoStageMode::Full => "full",
        TwoStageMode::SkipPretrain => "skip_pretrain",
        TwoStageMode::SkipFinetune => "skip_finetune",
    }
}

pub fn parse_tune_mode(mode: &str) -> Result<TwoStageMode> {
    match mode {
        "full" => Ok(TwoStageMode::Full),
        "skip_pretrain" => Ok(TwoStageMode::SkipPretrain),
        other => Err(Error::Config(format!("hpo.mode '{other}' must be full or skip_pretrain"))),
    }
}

fn build_detector_backend(cfg: &RunConfig) -> Box<dyn DetectorBackend> {
    match cfg.training.backend {
        TrainerKind::Mock => Box::new(cfg.training.mock.clone()),
        TrainerKind::Subprocess => {
            let program = cfg.training.program.as_ref().expect("validated");
            let mut backend = SubprocessBackend::new(
                cfg.training.backend_name.clone(),
                cfg.training.space.clone(),
                program,
            );
            backend.extra_args = cfg.training.extra_args.clone();
            Box::new(backend)
        }
    }
}

/// The hyperparameters a training run uses: space midpoints, overridden by
/// config values, overridden by the tuned incumbent when one exists.
fn resolve_hparams(ctx: &Ctx, space: &HyperParamSpace) -> Result<(HpoConfig, &'static str)> {
    let midpoint = space.to_config(&vec![0.5; space.ndim()]);
    let mut config = midpoint;
    for (key, value) in &ctx.config.training.hparams {
        config.insert(key.clone(), *value);
    }
    let best_path = ctx.run_dir().join("tune").join("best.json");
    if best_path.exists() {
        let text = std::fs::read_to_string(&best_path).map_err(|e| Error::io(&best_path, e))?;
        let best: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Decode(format!("{}: {e}", best_path.display())))?;
        let tuned: HpoConfig = serde_json::from_value(best["config"].clone())
            .map_err(|e| Error::Decode(format!("tuned config: {e}")))?;
        for (key, value) in tuned {
            config.insert(key, value);
        }
        return Ok((config, "tuned incumbent"));
    }
    Ok((config, "config defaults"))
}

/// Fine-tuning data: the regime subset plus the golden val split, so
/// backends with a validation loop can early-stop.
fn finetune_dataset(ctx: &Ctx, golden: &Dataset, regime: RegimeSel) -> Result<Dataset> {
    let mut images = match regime {
        RegimeSel::Total(total) => read_labels(&regime_dir(ctx, total).join("manifest.jsonl"))?.images,
        RegimeSel::FullPool => golden.subset(Split::Train).images,
    };
    images.extend(golden.by_split(Split::Val).cloned());
    Ok(Dataset::new(images))
}

/// School-site count of the fine-tuning train split, the x coordinate in
/// regime plots.
fn regime_school_count(dataset: &Dataset) -> usize {
    dataset.by_split(Split::Train).filter(|i| i.is_school()).count()
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    regime: String,
    mode: String,
    backend: String,
    strategy: String,
    school_sites: usize,
    hparam_source: String,
    run_id: String,
    model_path: PathBuf,
    pretrained_run_id: Option<String>,
    final_f1: f64,
    final_map50: f64,
}

fn train_summary_path(ctx: &Ctx, regime: RegimeSel, mode: TwoStageMode) -> PathBuf {
    ctx.run_dir()
        .join("train")
        .join(format!("summary_{}_{}.json", regime.stage_suffix(), mode_suffix(mode)))
}

pub fn train(ctx: &Ctx, regime: RegimeSel, mode: TwoStageMode) -> Result<()> {
    let cfg = ctx.config;
    let stage = format!("train_{}_{}", regime.stage_suffix(), mode_suffix(mode));
    let best_path = ctx.run_dir().join("tune").join("best.json");
    let mut fp = Fingerprint::new(&stage)
        .text(&ctx.parent_fp("build-dataset")?)
        .config(&cfg.training)?
        .text(&format!("{}|{}|{}", regime.stage_suffix(), mode_suffix(mode), ctx.train_seed));
    if best_path.exists() {
        fp = fp.file(&best_path)?;
    }
    let fingerprint = fp.finish();
    let summary_path = train_summary_path(ctx, regime, mode);

    run_stage(ctx.log, &stage, fingerprint, || {
        let auto = read_labels(&auto_manifest_path(ctx))?;
        let golden = read_labels(&golden_manifest_path(ctx))?;
        let finetune_ds = finetune_dataset(ctx, &golden, regime)?;
        let school_sites = regime_school_count(&finetune_ds);

        let space = resolve_space(&cfg.training.space)?;
        let (hparams, hparam_source) = resolve_hparams(ctx, &space)?;
        let backend = build_detector_backend(cfg);
        let train_dir = ctx.stage_dir("train")?;
        let options = TrainRunOptions {
            seed: ctx.train_seed,
            artifact_dir: train_dir.clone(),
            augmentation: cfg.training.augmentation,
            early_stop: EarlyStop::new(cfg.training.patience, cfg.training.max_rounds)?,
        };
        ctx.log.info(&stage, &format!("hyperparameters from {hparam_source}"))?;

        let outcome = two_stage(backend.as_ref(), &auto, &finetune_ds, &hparams, mode, &options)?;
        let model_path = train_dir.join(format!("{}.model.json", outcome.model.run_id()));
        outcome.model.save_json(&model_path)?;
        let mut outputs = vec![model_path.clone()];
        if let Some(pretrained) = &outcome.pretrained {
            let p = train_dir.join(format!("{}.model.json", pretrained.run_id()));
            pretrained.save_json(&p)?;
            outputs.push(p);
        }

        let (final_f1, final_map50) =
            outcome.model.metrics_history.last().map_or((0.0, 0.0), |m| (m.f1, m.map50));
        let summary = TrainSummary {
            regime: regime.stage_suffix(),
            mode: mode_suffix(mode).into(),
            backend: backend.name().to_string(),
            strategy: outcome.model.lineage.to_string(),
            school_sites,
            hparam_source: hparam_source.into(),
            run_id: outcome.model.run_id().to_string(),
            model_path: model_path.clone(),
            pretrained_run_id: outcome.pretrained.as_ref().map(|m| m.run_id().to_string()),
            final_f1,
            final_map50,
        };
        let text = serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Decode(format!("serialize train summary: {e}")))?;
        std::fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
        outputs.push(summary_path.clone());
        ctx.log.info(
            &stage,
            &format!(
                "{} rounds, final f1 {final_f1:.3}, map50 {final_map50:.3}",
                outcome.model.metrics_history.len(),
            ),
        )?;
        Ok(outputs)
    })?;
    Ok(())
}

#[derive(Default)]
pub struct TuneArgs {
    pub budget: Option<usize>,
    pub metric: Option<String>,
    pub space: Option<String>,
}

pub fn tune(ctx: &Ctx, args: &TuneArgs) -> Result<()> {
    let cfg = ctx.config;
    let budget = args.budget.unwrap_or(cfg.hpo.budget);
    let metric_name = args.metric.clone().unwrap_or_else(|| cfg.hpo.metric.clone());
    let space_arg = args.space.clone().unwrap_or_else(|| cfg.training.space.clone());
    let seed = ctx.train_seed;

    let fingerprint = Fingerprint::new("tune")
        .text(&ctx.parent_fp("build-dataset")?)
        .config(&cfg.training)?
        .config(&cfg.hpo)?
        .text(&format!("{budget}|{metric_name}|{space_arg}|{seed}"))
        .finish();
    let work_dir = ctx.run_dir().join("tune");
    let ledger_path = work_dir.join("ledger.jsonl");
    let best_path = work_dir.join("best.json");
    run_stage(ctx.log, "tune", fingerprint, || {
        let auto = read_labels(&auto_manifest_path(ctx))?;
        let golden = read_labels(&golden_manifest_path(ctx))?;
        let space = resolve_space(&space_arg)?;
        let metric = TuneMetric::from_str(&metric_name)?;
        let strategy = strategy_by_name(&cfg.hpo.strategy)?;
        let mode = parse_tune_mode(&cfg.hpo.mode)?;
        let backend = build_detector_backend(cfg);

        let request = TuneRequest {
            space: &space,
            metric,
            budget,
            seed,
            mode,
            work_dir: work_dir.clone(),
        };
        let outcome = tune_backend(backend.as_ref(), &auto, &golden, strategy.as_ref(), &request)?;
        ctx.log.info(
            "tune",
            &format!(
                "{} trials, best {} {:.4}",
                outcome.ledger.calls.len(),
                metric_name,
                outcome.best_value
            ),
        )?;
        Ok(vec![ledger_path.clone(), best_path.clone()])
    })?;
    Ok(())
}

pub fn evaluate_stage(ctx: &Ctx, regime: RegimeSel, mode: TwoStageMode) -> Result<()> {
    let cfg = ctx.config;
    let train_stage = format!("train_{}_{}", regime.stage_suffix(), mode_suffix(mode));
    let stage = format!("evaluate_{}_{}", regime.stage_suffix(), mode_suffix(mode));
    let fingerprint = Fingerprint::new(&stage)
        .text(&ctx.parent_fp(&train_stage)?)
        .config(&cfg.eval)?
        .finish();
    let dir = ctx
        .run_dir()
        .join("eval")
        .join(format!("{}_{}", regime.stage_suffix(), mode_suffix(mode)));
    let report_path = dir.join("report.json");
    let predictions_path = dir.join("predictions.jsonl");
    let row_path = dir.join("row.json");

    run_stage(ctx.log, &stage, fingerprint, || {
        let summary_file = train_summary_path(ctx, regime, mode);
        let summary_text =
            std::fs::read_to_string(&summary_file).map_err(|e| Error::io(&summary_file, e))?;
        let summary: TrainSummary = serde_json::from_str(&summary_text)
            .map_err(|e| Error::Decode(format!("train summary: {e}")))?;
        let model = TrainedModel::load_json(&summary.model_path)?;

        let golden = read_labels(&golden_manifest_path(ctx))?;
        let test = golden.subset(Split::Test);
        if test.is_empty() {
            return Err(Error::InvalidInput("golden dataset has an empty test split".into()));
        }
        let backend = build_detector_backend(cfg);
        let predictions = backend.predict(&model, &test.images)?;

        let images: Vec<ImageEval> = test
            .images
            .iter()
            .zip(predictions)
            .map(|(image, (id, preds))| {
                debug_assert_eq!(image.id, id);
                ImageEval {
                    image_id: id,
                    preds,
                    gts: image.boxes.clone(),
                }
            })
            .collect();
        let report = evaluate(&images, &cfg.eval, regime.stage_suffix());

        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_predictions_jsonl(&predictions_path, &images)?;
        let report_text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Decode(format!("serialize report: {e}")))?;
        std::fs::write(&report_path, report_text).map_err(|e| Error::io(&report_path, e))?;

        let row = ResultRow::from_report(
            &summary.backend,
            &summary.strategy,
            summary.school_sites as u32,
            &report,
        );
        let row_text = serde_json::to_string_pretty(&row)
            .map_err(|e| Error::Decode(format!("serialize row: {e}")))?;
        std::fs::write(&row_path, row_text).map_err(|e| Error::io(&row_path, e))?;

        ctx.log.info(
            &stage,
            &format!(
                "P {:.3} R {:.3} F1 {:.3} mAP50 {:.3} mAP50:95 {:.3} on {} images",
                report.precision, report.recall, report.f1, report.map50, report.map50_95, report.n_images
            ),
        )?;
        Ok(vec![report_path.clone(), predictions_path.clone(), row_path.clone()])
    })?;
    Ok(())
}

fn collect_rows(ctx: &Ctx) -> Result<Vec<(PathBuf, ResultRow)>> {
    let eval_root = ctx.run_dir().join("eval");
    let mut rows = Vec::new();
    if !eval_root.exists() {
        return Ok(rows);
    }
    let entries = std::fs::read_dir(&eval_root).map_err(|e| Error::io(&eval_root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let row_path = dir.join("row.json");
        if !row_path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&row_path).map_err(|e| Error::io(&row_path, e))?;
        let row: ResultRow = serde_json::from_str(&text)
            .map_err(|e| Error::Decode(format!("{}: {e}", row_path.display())))?;
        rows.push((row_path, row));
    }
    Ok(rows)
}

pub fn report(ctx: &Ctx) -> Result<()> {
    let rows = collect_rows(ctx)?;
    if rows.is_empty() {
        return Err(Error::InvalidInput(
            "no evaluation rows found; run evaluate first".into(),
        ));
    }
    let mut fp = Fingerprint::new("report");
    for (path, _) in &rows {
        fp = fp.file(path)?;
    }
    let fingerprint = fp.finish();
    let dir = ctx.run_dir().join("report");
    let csv_path = dir.join("summary.csv");
    run_stage(ctx.log, "report", fingerprint, || {
        let mut result_rows: Vec<ResultRow> = rows.iter().map(|(_, r)| r.clone()).collect();
        result_rows.sort_by(|a, b| {
            (&a.model, &a.strategy, a.regime_size).cmp(&(&b.model, &b.strategy, b.regime_size))
        });
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_report_csv(&csv_path, &result_rows)?;
        let mut outputs = write_regime_plots(&dir, &result_rows)?;
        ctx.log.info(
            "report",
            &format!("{} rows -> {} and {} plots", result_rows.len(), csv_path.display(), outputs.len()),
        )?;
        outputs.push(csv_path.clone());
        Ok(outputs)
    })?;
    Ok(())
}

/// Reads the headline metrics of one evaluation.
pub fn read_eval_report(ctx: &Ctx, regime: RegimeSel, mode: TwoStageMode) -> Result<EvalReport> {
    let path = ctx
        .run_dir()
        .join("eval")
        .join(format!("{}_{}", regime.stage_suffix(), mode_suffix(mode)))
        .join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}
