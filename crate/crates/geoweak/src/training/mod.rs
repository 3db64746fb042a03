//! Two-stage detector training over a pluggable backend interface:
//! pretrain on auto-labeled tiles, then fine-tune on a golden regime.
//!
//! Models are content-addressed (backend, stage, parent, hyperparameters,
//! dataset content, seed) so lineage claims are checkable from artifacts
//! alone. Either stage can be skipped to realize the golden-only and
//! auto-only baselines.

pub mod mock;
pub mod subprocess;
pub mod tune;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bbox::BBox;
use crate::dataset::{AugmentationSpec, Dataset, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::hpo::Config;

pub use mock::{MockDetector, QualitySpec};
pub use subprocess::SubprocessBackend;
pub use tune::{resolve_space, tune_backend, TuneMetric, TuneOutcome, TuneRequest};

/// How a model came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lineage {
    /// Trained directly on golden labels (golden-only baseline).
    Scratch,
    /// Trained on auto-generated labels (auto-only baseline).
    PretrainedAuto,
    /// Pretrained on auto labels, then fine-tuned on a golden regime.
    FinetunedTwoStage,
}

impl std::fmt::Display for Lineage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Lineage::Scratch => "scratch",
            Lineage::PretrainedAuto => "pretrained_auto",
            Lineage::FinetunedTwoStage => "finetuned_two_stage",
        };
        f.write_str(s)
    }
}

/// One validation evaluation during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsPoint {
    pub round: usize,
    pub f1: f64,
    pub map50: f64,
}

/// A trained artifact plus everything needed to verify where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub backend: String,
    /// Opaque artifact location owned by the backend.
    pub weights_ref: PathBuf,
    pub lineage: Lineage,
    /// Hyperparameters the model was trained with.
    pub train_config: Config,
    pub metrics_history: Vec<MetricsPoint>,
    /// Content hash of the parent model, present iff fine-tuned.
    pub parent_hash: Option<String>,
    /// Content hash of this model.
    pub model_hash: String,
    /// Hash of the dataset the final stage trained on.
    pub dataset_hash: String,
    pub seed: u64,
}

impl TrainedModel {
    pub fn run_id(&self) -> &str {
        &self.model_hash[..12.min(self.model_hash.len())]
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Decode(format!("serialize model: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
    }
}

/// Early-stopping policy: stop when the validation metric fails to improve
/// for `patience` consecutive rounds; never run more than `max_rounds`
/// rounds, and `max_rounds` itself is capped at 50.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub max_rounds: usize,
}

pub const MAX_TRAIN_ROUNDS: usize = 50;

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop { patience: 5, max_rounds: MAX_TRAIN_ROUNDS }
    }
}

impl EarlyStop {
    pub fn new(patience: usize, max_rounds: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::InvalidInput("early-stop patience must be at least 1".into()));
        }
        if max_rounds == 0 || max_rounds > MAX_TRAIN_ROUNDS {
            return Err(Error::InvalidInput(format!(
                "round budget must be in 1..={MAX_TRAIN_ROUNDS}, got {max_rounds}"
            )));
        }
        Ok(EarlyStop { patience, max_rounds })
    }

    /// Runs `eval_round` until the policy says stop, returning every value
    /// observed. Improvement means strictly greater than the best so far.
    pub fn drive(&self, mut eval_round: impl FnMut(usize) -> f64) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        let mut strikes = 0;
        let mut history = Vec::new();
        for round in 0..self.max_rounds {
            let value = eval_round(round);
            history.push(value);
            if value > best {
                best = value;
                strikes = 0;
            } else {
                strikes += 1;
                if strikes >= self.patience {
                    break;
                }
            }
        }
        history
    }
}

/// Per-run settings shared by both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunOptions {
    pub seed: u64,
    pub artifact_dir: PathBuf,
    pub augmentation: AugmentationSpec,
    pub early_stop: EarlyStop,
}

impl TrainRunOptions {
    pub fn new(artifact_dir: impl Into<PathBuf>, seed: u64) -> Self {
        TrainRunOptions {
            seed,
            artifact_dir: artifact_dir.into(),
            augmentation: AugmentationSpec::default(),
            early_stop: EarlyStop::default(),
        }
    }
}

/// What a backend is asked to do for one stage.
pub struct TrainContext<'a> {
    pub dataset: &'a Dataset,
    pub hparams: &'a Config,
    pub options: &'a TrainRunOptions,
    pub lineage: Lineage,
}

/// A detector family. Implementations own their training loop and artifact
/// format; predictions must carry scores in [0, 1].
pub trait DetectorBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Which builtin hyperparameter space fits this backend.
    fn space_id(&self) -> &str;

    /// Trains from scratch on `ctx.dataset`'s train split.
    fn train(&self, ctx: &TrainContext) -> Result<TrainedModel>;

    /// Continues from `parent` on a new dataset.
    fn finetune(&self, parent: &TrainedModel, ctx: &TrainContext) -> Result<TrainedModel>;

    /// Detects boxes on each image, in input order.
    fn predict(&self, model: &TrainedModel, images: &[LabeledImage]) -> Result<Vec<(String, Vec<BBox>)>>;
}

/// Content address for a model: every input that determines the artifact.
pub fn model_content_hash(
    backend: &str,
    lineage: Lineage,
    parent_hash: Option<&str>,
    hparams: &Config,
    dataset_hash: &str,
    seed: u64,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(backend.as_bytes());
    hasher.update([0]);
    hasher.update(lineage.to_string().as_bytes());
    hasher.update([0]);
    hasher.update(parent_hash.unwrap_or("").as_bytes());
    hasher.update([0]);
    for (k, v) in hparams {
        hasher.update(k.as_bytes());
        hasher.update(v.to_bits().to_le_bytes());
    }
    hasher.update(dataset_hash.as_bytes());
    hasher.update(seed.to_le_bytes());
    hex::encode(hasher.finalize())
}

/// On-disk record of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub backend: String,
    pub stage: Lineage,
    pub parent_run: Option<String>,
    pub dataset_manifest_hash: String,
    pub hparams: Config,
    pub metrics_history: Vec<MetricsPoint>,
    pub seed: u64,
    pub augmentation: AugmentationSpec,
}

/// Writes `{run_id}.run.json` into the artifact directory.
pub fn write_run_record(model: &TrainedModel, options: &TrainRunOptions) -> Result<PathBuf> {
    let record = RunRecord {
        run_id: model.run_id().to_string(),
        backend: model.backend.clone(),
        stage: model.lineage,
        parent_run: model.parent_hash.clone(),
        dataset_manifest_hash: model.dataset_hash.clone(),
        hparams: model.train_config.clone(),
        metrics_history: model.metrics_history.clone(),
        seed: model.seed,
        augmentation: options.augmentation,
    };
    std::fs::create_dir_all(&options.artifact_dir).map_err(|e| Error::io(&options.artifact_dir, e))?;
    let path = options.artifact_dir.join(format!("{}.run.json", record.run_id));
    let text = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::Decode(format!("serialize run record: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_run_record(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}

fn require_nonempty_train_split(dataset: &Dataset, what: &str) -> Result<()> {
    if dataset.by_split(Split::Train).next().is_none() {
        return Err(Error::InvalidInput(format!("{what} has an empty train split")));
    }
    Ok(())
}

/// Stage one: train on the auto-labeled dataset.
pub fn pretrain(
    backend: &dyn DetectorBackend,
    auto_dataset: &Dataset,
    hparams: &Config,
    options: &TrainRunOptions,
) -> Result<TrainedModel> {
    require_nonempty_train_split(auto_dataset, "auto-labeled dataset")?;
    let ctx = TrainContext {
        dataset: auto_dataset,
        hparams,
        options,
        lineage: Lineage::PretrainedAuto,
    };
    let model = backend.train(&ctx)?;
    write_run_record(&model, options)?;
    Ok(model)
}

/// Stage two: continue from a pretrained model on a golden regime.
pub fn finetune(
    backend: &dyn DetectorBackend,
    parent: &TrainedModel,
    golden_train: &Dataset,
    hparams: &Config,
    options: &TrainRunOptions,
) -> Result<TrainedModel> {
    if parent.backend != backend.name() {
        return Err(Error::InvalidInput(format!(
            "parent model was trained by '{}', not '{}'",
            parent.backend,
            backend.name()
        )));
    }
    if parent.lineage != Lineage::PretrainedAuto {
        return Err(Error::InvalidInput(format!(
            "fine-tuning needs a pretrained parent, got lineage {}",
            parent.lineage
        )));
    }
    require_nonempty_train_split(golden_train, "golden dataset")?;
    let ctx = TrainContext {
        dataset: golden_train,
        hparams,
        options,
        lineage: Lineage::FinetunedTwoStage,
    };
    let model = backend.finetune(parent, &ctx)?;
    write_run_record(&model, options)?;
    Ok(model)
}

/// Which stages a two-stage run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoStageMode {
    /// Pretrain on auto labels, fine-tune on golden.
    Full,
    /// Golden-only baseline: train from scratch on the golden regime.
    SkipPretrain,
    /// Auto-only baseline: keep the pretrained model as final.
    SkipFinetune,
}

/// Final model plus the intermediate pretrained model when one was built.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageOutcome {
    pub model: TrainedModel,
    pub pretrained: Option<TrainedModel>,
}

/// Runs the selected stages and records provenance for each.
pub fn two_stage(
    backend: &dyn DetectorBackend,
    auto_dataset: &Dataset,
    golden_regime: &Dataset,
    hparams: &Config,
    mode: TwoStageMode,
    options: &TrainRunOptions,
) -> Result<TwoStageOutcome> {
    match mode {
        TwoStageMode::SkipPretrain => {
            require_nonempty_train_split(golden_regime, "golden dataset")?;
            let ctx = TrainContext {
                dataset: golden_regime,
                hparams,
                options,
                lineage: Lineage::Scratch,
            };
            let model = backend.train(&ctx)?;
            write_run_record(&model, options)?;
            Ok(TwoStageOutcome { model, pretrained: None })
        }
        TwoStageMode::SkipFinetune => {
            let model = pretrain(backend, auto_dataset, hparams, options)?;
            Ok(TwoStageOutcome { model, pretrained: None })
        }
        TwoStageMode::Full => {
            let pretrained = pretrain(backend, auto_dataset, hparams, options)?;
            let model = finetune(backend, &pretrained, golden_regime, hparams, options)?;
            Ok(TwoStageOutcome { model, pretrained: Some(pretrained) })
        }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::dataset::Provenance;

    /// Builds an in-memory dataset: `n_train`/`n_val`/`n_test` images with
    /// `boxes_per_image` ground-truth boxes each, on a grid.
    pub fn synthetic_dataset(
        n_train: usize,
        n_val: usize,
        n_test: usize,
        boxes_per_image: usize,
    ) -> Dataset {
        let mut images = Vec::new();
        let splits = [
            (Split::Train, n_train),
            (Split::Val, n_val),
            (Split::Test, n_test),
        ];
        let mut serial = 0usize;
        for (split, count) in splits {
            for _ in 0..count {
                let id = format!("img{serial:04}");
                let boxes = (0..boxes_per_image)
                    .map(|b| {
                        let col = b % 3;
                        let row = b / 3;
                        BBox::new(
                            0,
                            0.2 + 0.3 * col as f64,
                            0.2 + 0.25 * row as f64,
                            0.15,
                            0.12,
                        )
                        .unwrap()
                    })
                    .collect();
                images.push(LabeledImage {
                    id,
                    image_path: PathBuf::from(format!("images/img{serial:04}.png")),
                    boxes,
                    provenance: Provenance::Golden,
                    split,
                });
                serial += 1;
            }
        }
        Dataset { images }
    }
}
