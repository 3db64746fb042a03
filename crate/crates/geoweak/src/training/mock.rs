//! Deterministic stand-in detector for desk-scale verification.
//!
//! Predictions are derived from ground truth with configurable corruption:
//! box dropping, center jitter, and spurious detections. With every noise
//! parameter at zero, predictions equal ground truth exactly. All
//! randomness is hashed from (seed, image id, box index), so results are a
//! pure function of the model and inputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bbox::BBox;
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::hpo::Config;

use super::{
    model_content_hash, DetectorBackend, MetricsPoint, TrainContext, TrainedModel,
};

/// Makes the mock's skill a known smooth function of one hyperparameter:
/// quality = exp(-((value - optimum) / width)^2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualitySpec {
    pub param: String,
    pub optimum: f64,
    pub width: f64,
}

impl QualitySpec {
    fn eval(&self, hparams: &Config) -> Result<f64> {
        let v = *hparams.get(&self.param).ok_or_else(|| {
            Error::Backend(format!("mock quality parameter '{}' missing from config", self.param))
        })?;
        Ok((-((v - self.optimum) / self.width).powi(2)).exp())
    }
}

/// Ground-truth-echoing detector with tunable corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockDetector {
    /// Center jitter amplitude in pixels.
    pub noise_px: f64,
    /// Probability each ground-truth box is missed.
    pub drop_rate: f64,
    /// Expected false detections per image.
    pub spurious_rate: f64,
    /// Pixel size used to normalize `noise_px`.
    pub img_px: u32,
    /// Validation metric stops improving after this round.
    pub metric_plateau_round: Option<usize>,
    /// Optional hyperparameter response; `None` means full quality.
    /// Declared last so TOML serializers can emit it as a sub-table.
    pub quality: Option<QualitySpec>,
}

impl Default for MockDetector {
    fn default() -> Self {
        MockDetector {
            noise_px: 0.0,
            drop_rate: 0.0,
            spurious_rate: 0.0,
            img_px: 500,
            metric_plateau_round: None,
            quality: None,
        }
    }
}

impl MockDetector {
    /// Zero-noise detector: predictions reproduce ground truth.
    pub fn exact() -> Self {
        MockDetector::default()
    }

    pub fn new(noise_px: f64, drop_rate: f64, spurious_rate: f64) -> Result<Self> {
        let detector = MockDetector { noise_px, drop_rate, spurious_rate, ..Self::default() };
        detector.validate()?;
        Ok(detector)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::InvalidInput(format!("drop_rate must be in [0,1], got {}", self.drop_rate)));
        }
        if self.noise_px < 0.0 || !self.noise_px.is_finite() {
            return Err(Error::InvalidInput(format!("noise_px must be >= 0, got {}", self.noise_px)));
        }
        if self.spurious_rate < 0.0 || !self.spurious_rate.is_finite() {
            return Err(Error::InvalidInput(format!(
                "spurious_rate must be >= 0, got {}",
                self.spurious_rate
            )));
        }
        if self.img_px == 0 {
            return Err(Error::InvalidInput("img_px must be positive".into()));
        }
        Ok(())
    }

    pub fn with_quality(mut self, quality: QualitySpec) -> Self {
        self.quality = Some(quality);
        self
    }

    pub fn with_plateau(mut self, round: usize) -> Self {
        self.metric_plateau_round = Some(round);
        self
    }

    fn quality_of(&self, hparams: &Config) -> Result<f64> {
        match &self.quality {
            Some(spec) => spec.eval(hparams),
            None => Ok(1.0),
        }
    }

    /// Validation metric at a training round: approaches `q` geometrically,
    /// frozen after the plateau round when one is set.
    fn metric_at(&self, round: usize, q: f64) -> f64 {
        let effective = self.metric_plateau_round.map_or(round, |p| round.min(p));
        q * (1.0 - 0.5f64.powi(effective as i32 + 1))
    }

    fn build_model(&self, ctx: &TrainContext, parent: Option<&TrainedModel>) -> Result<TrainedModel> {
        self.validate()?;
        let q = self.quality_of(ctx.hparams)?;
        let values = ctx.options.early_stop.drive(|round| self.metric_at(round, q));
        let metrics_history: Vec<MetricsPoint> = values
            .iter()
            .enumerate()
            .map(|(round, &f1)| MetricsPoint { round, f1, map50: f1 })
            .collect();
        let dataset_hash = ctx.dataset.content_hash();
        let model_hash = model_content_hash(
            self.name(),
            ctx.lineage,
            parent.map(|p| p.model_hash.as_str()),
            ctx.hparams,
            &dataset_hash,
            ctx.options.seed,
        );
        std::fs::create_dir_all(&ctx.options.artifact_dir)
            .map_err(|e| Error::io(&ctx.options.artifact_dir, e))?;
        let weights_ref = ctx
            .options
            .artifact_dir
            .join(format!("{}.weights.json", &model_hash[..12]));
        let weights = serde_json::json!({
            "backend": self.name(),
            "quality": q,
            "seed": ctx.options.seed,
            "hparams": ctx.hparams,
        });
        std::fs::write(&weights_ref, weights.to_string()).map_err(|e| Error::io(&weights_ref, e))?;
        Ok(TrainedModel {
            backend: self.name().to_string(),
            weights_ref,
            lineage: ctx.lineage,
            train_config: ctx.hparams.clone(),
            metrics_history,
            parent_hash: parent.map(|p| p.model_hash.clone()),
            model_hash,
            dataset_hash,
            seed: ctx.options.seed,
        })
    }
}

/// Uniform value in [0, 1) hashed from the model seed and a stream key.
/// Separate `stream` values give independent draws.
fn hash01(seed: u64, image_id: &str, index: u64, stream: u64) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(image_id.as_bytes());
    hasher.update(index.to_le_bytes());
    hasher.update(stream.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

impl DetectorBackend for MockDetector {
    fn name(&self) -> &str {
        "mock"
    }

    fn space_id(&self) -> &str {
        "yolo"
    }

    fn train(&self, ctx: &TrainContext) -> Result<TrainedModel> {
        self.build_model(ctx, None)
    }

    fn finetune(&self, parent: &TrainedModel, ctx: &TrainContext) -> Result<TrainedModel> {
        self.build_model(ctx, Some(parent))
    }

    fn predict(
        &self,
        model: &TrainedModel,
        images: &[LabeledImage],
    ) -> Result<Vec<(String, Vec<BBox>)>> {
        self.validate()?;
        let q = self.quality_of(&model.train_config)?;
        // Quality degrades recall beyond the configured drop rate.
        let effective_drop = 1.0 - (1.0 - self.drop_rate) * q;
        let mut out = Vec::with_capacity(images.len());
        for image in images {
            let mut boxes = Vec::new();
            for (bi, gt) in image.boxes.iter().enumerate() {
                let bi = bi as u64;
                if hash01(model.seed, &image.id, bi, 0) < effective_drop {
                    continue;
                }
                let (mut cx, mut cy) = (gt.cx, gt.cy);
                if self.noise_px > 0.0 {
                    let amp = self.noise_px / f64::from(self.img_px);
                    cx += (2.0 * hash01(model.seed, &image.id, bi, 1) - 1.0) * amp;
                    cy += (2.0 * hash01(model.seed, &image.id, bi, 2) - 1.0) * amp;
                    cx = cx.clamp(gt.w / 2.0, 1.0 - gt.w / 2.0);
                    cy = cy.clamp(gt.h / 2.0, 1.0 - gt.h / 2.0);
                }
                let score = 0.6 + 0.4 * hash01(model.seed, &image.id, bi, 3);
                boxes.push(BBox::new(gt.class_id, cx, cy, gt.w, gt.h)?.with_score(score)?);
            }
            let whole = self.spurious_rate.floor() as u64;
            let fractional = self.spurious_rate - self.spurious_rate.floor();
            let extra = u64::from(hash01(model.seed, &image.id, u64::MAX, 4) < fractional);
            for si in 0..whole + extra {
                let u = |stream: u64| hash01(model.seed, &image.id, 1_000_000 + si, stream);
                let w = 0.05 + 0.15 * u(5);
                let h = 0.05 + 0.15 * u(6);
                let cx = w / 2.0 + (1.0 - w) * u(7);
                let cy = h / 2.0 + (1.0 - h) * u(8);
                let score = 0.3 + 0.3 * u(9);
                boxes.push(BBox::new(0, cx, cy, w, h)?.with_score(score)?);
            }
            out.push((image.id.clone(), boxes));
        }
        Ok(out)
    }
}
