//! Adapter that drives an external trainer process.
//!
//! The child is invoked as `program [extra args] <command> --manifest M
//! --params P [--weights W] --out DIR --seed N` with command one of
//! `train`, `finetune`, or `predict`. Success means exit status zero plus
//! the expected output file in DIR: `metrics.json` for training stages
//! (`{"rounds": [{round, f1, map50}], "weights": "path"}`) or
//! `predictions.jsonl` for predict. Anything else surfaces as a backend
//! error carrying the tail of the child's stderr.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bbox::BBox;
use crate::dataset::{write_labels, Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::eval::read_predictions_jsonl;

use super::{
    model_content_hash, DetectorBackend, MetricsPoint, TrainContext, TrainedModel,
    MAX_TRAIN_ROUNDS,
};

/// External trainer described by an executable path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubprocessBackend {
    pub backend_name: String,
    pub space: String,
    pub program: PathBuf,
    #[serde(default)]
    pub extra_args: Vec<String>,
}

impl SubprocessBackend {
    pub fn new(backend_name: impl Into<String>, space: impl Into<String>, program: impl Into<PathBuf>) -> Self {
        SubprocessBackend {
            backend_name: backend_name.into(),
            space: space.into(),
            program: program.into(),
            extra_args: Vec::new(),
        }
    }
}

/// Everything the child needs beyond the manifest.
#[derive(Serialize)]
struct ParamsFile<'a> {
    hparams: &'a crate::hpo::Config,
    augmentation: &'a crate::dataset::AugmentationSpec,
    early_stop: &'a super::EarlyStop,
    seed: u64,
}

#[derive(Deserialize)]
struct MetricsFile {
    rounds: Vec<MetricsPoint>,
    weights: String,
}

fn stderr_excerpt(stderr: &[u8]) -> String {
    let text = String::from_utf8_lossy(stderr);
    let trimmed = text.trim();
    if trimmed.len() > 800 {
        format!("...{}", &trimmed[trimmed.len() - 800..])
    } else {
        trimmed.to_string()
    }
}

impl SubprocessBackend {
    fn invoke(&self, command: &str, args: &[(&str, &Path)], seed: u64) -> Result<()> {
        let mut cmd = Command::new(&self.program);
        cmd.args(&self.extra_args);
        cmd.arg(command);
        for (flag, value) in args {
            cmd.arg(flag).arg(value);
        }
        cmd.arg("--seed").arg(seed.to_string());
        let output = cmd.output().map_err(|e| {
            Error::Backend(format!("failed to launch {}: {e}", self.program.display()))
        })?;
        if !output.status.success() {
            return Err(Error::Backend(format!(
                "{} {} exited with {}: {}",
                self.program.display(),
                command,
                output.status,
                stderr_excerpt(&output.stderr)
            )));
        }
        Ok(())
    }

    fn run_stage(&self, parent: Option<&TrainedModel>, ctx: &TrainContext) -> Result<TrainedModel> {
        let dataset_hash = ctx.dataset.content_hash();
        let model_hash = model_content_hash(
            &self.backend_name,
            ctx.lineage,
            parent.map(|p| p.model_hash.as_str()),
            ctx.hparams,
            &dataset_hash,
            ctx.options.seed,
        );
        let stage_dir = ctx.options.artifact_dir.join(&model_hash[..12]);
        std::fs::create_dir_all(&stage_dir).map_err(|e| Error::io(&stage_dir, e))?;

        let manifest_path = write_labels(ctx.dataset, &stage_dir.join("data"))?;
        let params_path = stage_dir.join("params.json");
        let params = ParamsFile {
            hparams: ctx.hparams,
            augmentation: &ctx.options.augmentation,
            early_stop: &ctx.options.early_stop,
            seed: ctx.options.seed,
        };
        let text = serde_json::to_string_pretty(&params)
            .map_err(|e| Error::Decode(format!("serialize params: {e}")))?;
        std::fs::write(&params_path, text).map_err(|e| Error::io(&params_path, e))?;

        let command = if parent.is_some() { "finetune" } else { "train" };
        let mut args: Vec<(&str, &Path)> = vec![
            ("--manifest", manifest_path.as_path()),
            ("--params", params_path.as_path()),
            ("--out", stage_dir.as_path()),
        ];
        if let Some(p) = parent {
            args.push(("--weights", p.weights_ref.as_path()));
        }
        self.invoke(command, &args, ctx.options.seed)?;

        let metrics_path = stage_dir.join("metrics.json");
        let metrics_text = std::fs::read_to_string(&metrics_path).map_err(|_| {
            Error::Backend(format!(
                "trainer exited cleanly but left no {}",
                metrics_path.display()
            ))
        })?;
        let metrics: MetricsFile = serde_json::from_str(&metrics_text)
            .map_err(|e| Error::Decode(format!("{}: {e}", metrics_path.display())))?;
        if metrics.rounds.len() > MAX_TRAIN_ROUNDS {
            return Err(Error::Backend(format!(
                "trainer reported {} rounds, cap is {MAX_TRAIN_ROUNDS}",
                metrics.rounds.len()
            )));
        }
        let weights_ref = stage_dir.join(&metrics.weights);
        if !weights_ref.exists() {
            return Err(Error::Backend(format!(
                "metrics file names missing weights artifact {}",
                weights_ref.display()
            )));
        }
        Ok(TrainedModel {
            backend: self.backend_name.clone(),
            weights_ref,
            lineage: ctx.lineage,
            train_config: ctx.hparams.clone(),
            metrics_history: metrics.rounds,
            parent_hash: parent.map(|p| p.model_hash.clone()),
            model_hash,
            dataset_hash,
            seed: ctx.options.seed,
        })
    }
}

impl DetectorBackend for SubprocessBackend {
    fn name(&self) -> &str {
        &self.backend_name
    }

    fn space_id(&self) -> &str {
        &self.space
    }

    fn train(&self, ctx: &TrainContext) -> Result<TrainedModel> {
        self.run_stage(None, ctx)
    }

    fn finetune(&self, parent: &TrainedModel, ctx: &TrainContext) -> Result<TrainedModel> {
        self.run_stage(Some(parent), ctx)
    }

    fn predict(
        &self,
        model: &TrainedModel,
        images: &[LabeledImage],
    ) -> Result<Vec<(String, Vec<BBox>)>> {
        let parent_dir = model
            .weights_ref
            .parent()
            .ok_or_else(|| Error::InvalidInput("weights path has no parent directory".into()))?;
        // Separate output dir per distinct image set, stable across calls.
        let mut hasher = Sha256::new();
        for image in images {
            hasher.update(image.id.as_bytes());
            hasher.update([0]);
        }
        let batch = hex::encode(&hasher.finalize()[..6]);
        let out_dir = parent_dir.join(format!("predict_{batch}"));
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let manifest_path = write_labels(&Dataset::new(images.to_vec()), &out_dir.join("data"))?;

        self.invoke(
            "predict",
            &[
                ("--manifest", manifest_path.as_path()),
                ("--weights", model.weights_ref.as_path()),
                ("--out", out_dir.as_path()),
            ],
            model.seed,
        )?;

        let predictions_path = out_dir.join("predictions.jsonl");
        if !predictions_path.exists() {
            return Err(Error::Backend(format!(
                "predictor exited cleanly but left no {}",
                predictions_path.display()
            )));
        }
        let by_image: HashMap<String, Vec<BBox>> =
            read_predictions_jsonl(&predictions_path)?.into_iter().collect();
        Ok(images
            .iter()
            .map(|image| {
                let boxes = by_image.get(&image.id).cloned().unwrap_or_default();
                (image.id.clone(), boxes)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::synthetic_dataset;
    use super::super::{pretrain, Lineage, TrainRunOptions};
    use super::*;
    use crate::hpo::Config;
    use std::os::unix::fs::PermissionsExt;

    fn write_script(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        let mut perms = std::fs::metadata(&path).unwrap().permissions();
        perms.set_mode(0o755);
        std::fs::set_permissions(&path, perms).unwrap();
        path
    }

    const FAKE_TRAINER: &str = r#"#!/bin/sh
command="$1"
out=""
prev=""
for a in "$@"; do
  if [ "$prev" = "--out" ]; then out="$a"; fi
  prev="$a"
done
if [ "$command" = "predict" ]; then
  printf '%s\n' '{"image_id":"img0000","class_id":0,"cx":0.5,"cy":0.5,"w":0.2,"h":0.2,"score":0.9}' > "$out/predictions.jsonl"
else
  printf '%s' '{"rounds":[{"round":0,"f1":0.4,"map50":0.35},{"round":1,"f1":0.6,"map50":0.5}],"weights":"weights.bin"}' > "$out/metrics.json"
  echo fakeweights > "$out/weights.bin"
fi
exit 0
"#;

    #[test]
    fn trains_through_external_program() {
        let dir = tempfile::tempdir().unwrap();
        let program = write_script(dir.path(), "fake_trainer.sh", FAKE_TRAINER);
        let backend = SubprocessBackend::new("yolo", "yolo", &program);
        let dataset = synthetic_dataset(3, 1, 0, 1);
        let opts = TrainRunOptions::new(dir.path().join("artifacts"), 5);
        let model = pretrain(&backend, &dataset, &Config::new(), &opts).unwrap();
        assert_eq!(model.backend, "yolo");
        assert_eq!(model.lineage, Lineage::PretrainedAuto);
        assert_eq!(model.metrics_history.len(), 2);
        assert_eq!(model.metrics_history[1].f1, 0.6);
        assert!(model.weights_ref.exists());

        let params_path = model.weights_ref.parent().unwrap().join("params.json");
        let params: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(params_path).unwrap()).unwrap();
        assert_eq!(params["seed"], 5);
        assert!(params["early_stop"]["max_rounds"].as_u64().unwrap() <= 50);
    }

    #[test]
    fn failing_child_surfaces_stderr() {
        let dir = tempfile::tempdir().unwrap();
        let program = write_script(
            dir.path(),
            "broken.sh",
            "#!/bin/sh\necho 'device lost: CUDA exploded' >&2\nexit 3\n",
        );
        let backend = SubprocessBackend::new("yolo", "yolo", &program);
        let dataset = synthetic_dataset(2, 1, 0, 1);
        let opts = TrainRunOptions::new(dir.path().join("artifacts"), 1);
        let err = pretrain(&backend, &dataset, &Config::new(), &opts).unwrap_err();
        match err {
            Error::Backend(msg) => assert!(msg.contains("CUDA exploded"), "msg: {msg}"),
            other => panic!("expected backend error, got {other:?}"),
        }
    }

    #[test]
    fn clean_exit_without_metrics_is_backend_error() {
        let dir = tempfile::tempdir().unwrap();
        let program = write_script(dir.path(), "silent.sh", "#!/bin/sh\nexit 0\n");
        let backend = SubprocessBackend::new("yolo", "yolo", &program);
        let dataset = synthetic_dataset(2, 1, 0, 1);
        let opts = TrainRunOptions::new(dir.path().join("artifacts"), 1);
        let err = pretrain(&backend, &dataset, &Config::new(), &opts).unwrap_err();
        assert!(matches!(err, Error::Backend(_)));
    }

    #[test]
    fn predict_reads_child_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let program = write_script(dir.path(), "fake_trainer.sh", FAKE_TRAINER);
        let backend = SubprocessBackend::new("yolo", "yolo", &program);
        let dataset = synthetic_dataset(1, 0, 1, 1);
        let opts = TrainRunOptions::new(dir.path().join("artifacts"), 2);
        let model = pretrain(&backend, &dataset, &Config::new(), &opts).unwrap();
        let images = dataset.images.clone();
        let preds = backend.predict(&model, &images).unwrap();
        assert_eq!(preds.len(), 2);
        // The fake predictor only knows img0000; the other image get none.
        assert_eq!(preds[0].0, "img0000");
        assert_eq!(preds[0].1.len(), 1);
        assert_eq!(preds[0].1[0].score, Some(0.9));
        assert!(preds[1].1.is_empty());
    }
}
