//! Hyperparameter tuning for detector backends: each objective call is a
//! full training run scored on the golden validation split.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport, ImageEval};
use crate::hpo::{Config, EvaluationLedger, HyperParamSpace, SearchStrategy};

use super::{two_stage, DetectorBackend, TrainRunOptions, TwoStageMode, TwoStageOutcome};

/// Which validation metric the tuner maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMetric {
    F1,
    Map50,
}

impl TuneMetric {
    pub fn extract(&self, report: &EvalReport) -> f64 {
        match self {
            TuneMetric::F1 => report.f1,
            TuneMetric::Map50 => report.map50,
        }
    }
}

impl FromStr for TuneMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(TuneMetric::F1),
            "map50" => Ok(TuneMetric::Map50),
            other => Err(Error::InvalidInput(format!(
                "unknown tune metric '{other}' (expected f1 or map50)"
            ))),
        }
    }
}

impl std::fmt::Display for TuneMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TuneMetric::F1 => "f1",
            TuneMetric::Map50 => "map50",
        })
    }
}

/// Tuning run settings.
#[derive(Debug, Clone)]
pub struct TuneRequest<'a> {
    pub space: &'a HyperParamSpace,
    pub metric: TuneMetric,
    pub budget: usize,
    pub seed: u64,
    /// Which stages each trial trains (golden-only trials skip pretrain).
    pub mode: TwoStageMode,
    pub work_dir: PathBuf,
}

/// Tuning result: incumbent plus the full call trace.
#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub best_config: Config,
    pub best_value: f64,
    pub ledger: EvaluationLedger,
}

/// Scores predictions against the golden validation split.
pub fn validation_report(
    backend: &dyn DetectorBackend,
    model: &super::TrainedModel,
    golden: &Dataset,
    regime: &str,
) -> Result<EvalReport> {
    let val_images = golden.subset(Split::Val).images;
    if val_images.is_empty() {
        return Err(Error::InvalidInput("golden dataset has an empty val split".into()));
    }
    let preds = backend.predict(model, &val_images)?;
    let images: Vec<ImageEval> = val_images
        .into_iter()
        .zip(preds)
        .map(|(image, (_, boxes))| ImageEval {
            image_id: image.id.clone(),
            preds: boxes,
            gts: image.boxes,
        })
        .collect();
    Ok(evaluate(&images, &EvalConfig::default(), regime))
}

/// Maximizes the chosen metric over the search space. Each call trains with
/// the candidate configuration and evaluates on the fixed golden validation
/// split. Individual training failures are absorbed into the ledger as
/// failed calls; the tune itself fails only when setup is invalid or no
/// call ever succeeds. Best config and ledger are persisted in `work_dir`.
pub fn tune_backend(
    backend: &dyn DetectorBackend,
    auto_dataset: &Dataset,
    golden: &Dataset,
    strategy: &dyn SearchStrategy,
    request: &TuneRequest,
) -> Result<TuneOutcome> {
    if golden.by_split(Split::Val).next().is_none() {
        return Err(Error::InvalidInput("golden dataset has an empty val split".into()));
    }
    std::fs::create_dir_all(&request.work_dir).map_err(|e| Error::io(&request.work_dir, e))?;

    let mut trial = 0usize;
    let mut objective = |config: &Config| -> Result<f64> {
        let trial_dir = request.work_dir.join("trials").join(format!("t{trial:04}"));
        trial += 1;
        let options = TrainRunOptions::new(trial_dir, request.seed);
        let TwoStageOutcome { model, .. } =
            two_stage(backend, auto_dataset, golden, config, request.mode, &options)?;
        let report = validation_report(backend, &model, golden, "tune")?;
        Ok(request.metric.extract(&report))
    };

    let ledger = strategy.run(&mut objective, request.space, request.budget, request.seed)?;
    ledger.write_jsonl(&request.work_dir.join("ledger.jsonl"))?;

    let (best_config, best_value) = ledger
        .incumbent()
        .map(|(c, v)| (c.clone(), v))
        .ok_or_else(|| Error::Backend("every tuning trial failed to train".into()))?;
    let best = serde_json::json!({
        "backend": backend.name(),
        "metric": request.metric.to_string(),
        "value": best_value,
        "config": best_config,
    });
    let best_path = request.work_dir.join("best.json");
    std::fs::write(&best_path, serde_json::to_string_pretty(&best).unwrap())
        .map_err(|e| Error::io(&best_path, e))?;

    Ok(TuneOutcome { best_config, best_value, ledger })
}

/// Resolves a space argument: a builtin name or a TOML file path.
pub fn resolve_space(arg: &str) -> Result<HyperParamSpace> {
    if matches!(arg, "yolo" | "frcnn" | "satlas") {
        crate::hpo::builtin_space(arg)
    } else {
        HyperParamSpace::read_toml(Path::new(arg))
    }
}
