//! Run configuration: one TOML file drives every subcommand.
//!
//! Parsing is strict. Unknown keys anywhere in the file are rejected so a
//! typo in a threshold name fails loudly instead of silently running with
//! the default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use geoweak::autolabel::AutolabelParams;
use geoweak::dataset::AugmentationSpec;
use geoweak::eval::EvalConfig;
use geoweak::training::MockDetector;
use geoweak::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsCfg,
    pub points: PointsCfg,
    pub imagery: ImageryCfg,
    pub filtering: FilteringCfg,
    pub autolabel: AutolabelCfg,
    pub dataset: DatasetCfg,
    pub training: TrainingCfg,
    pub hpo: HpoCfg,
    pub eval: EvalConfig,
    pub seeds: SeedsCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: PathsCfg::default(),
            points: PointsCfg::default(),
            imagery: ImageryCfg::default(),
            filtering: FilteringCfg::default(),
            autolabel: AutolabelCfg::default(),
            dataset: DatasetCfg::default(),
            training: TrainingCfg::default(),
            hpo: HpoCfg::default(),
            eval: EvalConfig::default(),
            seeds: SeedsCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsCfg {
    /// Tile and query cache, shared across runs.
    pub cache_dir: PathBuf,
    /// Base directory for relative input paths.
    pub data_dir: PathBuf,
    /// Default run directory when --run-dir is not given.
    pub artifacts_dir: PathBuf,
}

impl Default for PathsCfg {
    fn default() -> Self {
        PathsCfg {
            cache_dir: "cache".into(),
            data_dir: ".".into(),
            artifacts_dir: "artifacts".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointsCfg {
    /// Input CSV of school and background points.
    pub csv: PathBuf,
    pub min_separation_m: f64,
    /// Categories whose points carry trusted labels; they bypass filtering
    /// and auto-labeling entirely.
    pub golden_categories: Vec<String>,
    /// Optional amenity query for extra background points.
    pub negatives: Option<NegativesCfg>,
}

impl Default for PointsCfg {
    fn default() -> Self {
        PointsCfg {
            csv: "points.csv".into(),
            min_separation_m: 300.0,
            golden_categories: Vec::new(),
            negatives: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativesCfg {
    pub endpoint: String,
    /// [min_lat, min_lon, max_lat, max_lon]
    pub bbox: [f64; 4],
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImagerySource {
    Local,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageryCfg {
    pub source: ImagerySource,
    /// PNG directory for the local source.
    pub tiles_dir: Option<PathBuf>,
    /// URL template for the remote source; {lat} {lon} {w} {h} {mpp} {key}
    /// placeholders.
    pub url_template: Option<String>,
    pub tile_px: u32,
    pub mpp: f64,
}

impl Default for ImageryCfg {
    fn default() -> Self {
        ImageryCfg {
            source: ImagerySource::Local,
            tiles_dir: None,
            url_template: None,
            tile_px: 500,
            mpp: 0.6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilteringCfg {
    /// Square center-crop side the color metrics are computed on.
    pub crop_px: u32,
}

impl Default for FilteringCfg {
    fn default() -> Self {
        FilteringCfg { crop_px: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    /// Deterministic scene-sidecar backend; fully offline.
    Scene,
    /// Remote prompt-segmentation server.
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutolabelCfg {
    pub backend: SegmenterKind,
    pub scenes_dir: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub params: AutolabelParams,
}

impl Default for AutolabelCfg {
    fn default() -> Self {
        AutolabelCfg {
            backend: SegmenterKind::Scene,
            scenes_dir: None,
            endpoint: None,
            params: AutolabelParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetCfg {
    /// Manifest of the trusted golden pool.
    pub golden_manifest: PathBuf,
    pub auto_fractions: [f64; 3],
    pub golden_fractions: [f64; 3],
    /// Training regimes as [total, school, non_school].
    pub regimes: Vec<[usize; 3]>,
}

impl Default for DatasetCfg {
    fn default() -> Self {
        DatasetCfg {
            golden_manifest: "golden/manifest.jsonl".into(),
            auto_fractions: [0.70, 0.15, 0.15],
            golden_fractions: [0.60, 0.20, 0.20],
            regimes: vec![[50, 32, 18], [100, 65, 35], [300, 195, 105], [443, 288, 155]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    Mock,
    Subprocess,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingCfg {
    pub backend: TrainerKind,
    /// Reported detector family name for subprocess backends.
    pub backend_name: String,
    /// Builtin hyperparameter space name or a TOML file path.
    pub space: String,
    pub program: Option<PathBuf>,
    pub extra_args: Vec<String>,
    pub patience: usize,
    pub max_rounds: usize,
    /// Explicit hyperparameters; dimensions left out fall back to the
    /// midpoint of their space.
    pub hparams: BTreeMap<String, f64>,
    pub augmentation: AugmentationSpec,
    pub mock: MockDetector,
}

impl Default for TrainingCfg {
    fn default() -> Self {
        TrainingCfg {
            backend: TrainerKind::Mock,
            backend_name: "yolo".into(),
            space: "yolo".into(),
            program: None,
            extra_args: Vec::new(),
            patience: 5,
            max_rounds: 20,
            hparams: BTreeMap::new(),
            augmentation: AugmentationSpec::default(),
            mock: MockDetector::exact(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoCfg {
    pub budget: usize,
    /// "f1" or "map50".
    pub metric: String,
    /// "ecp" or "random".
    pub strategy: String,
    /// "full" or "skip_pretrain": which stages each tuning trial trains.
    pub mode: String,
}

impl Default for HpoCfg {
    fn default() -> Self {
        HpoCfg {
            budget: 30,
            metric: "map50".into(),
            strategy: "ecp".into(),
            mode: "full".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsCfg {
    pub split: u64,
    pub regime: u64,
    pub train: u64,
}

impl Default for SeedsCfg {
    fn default() -> Self {
        SeedsCfg { split: 7, regime: 7, train: 7 }
    }
}

impl RunConfig {
    /// Parses and validates; `base` anchors relative paths (normally the
    /// config file's directory).
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        // message() keeps the reason on one line; the full rendering spans
        // several with a source snippet.
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.anchor(base);
        config.validate()?;
        Ok(config)
    }

    /// Makes every relative path absolute. Inputs resolve under data_dir;
    /// the cache, artifacts, and data dirs themselves resolve under `base`.
    pub fn anchor(&mut self, base: &Path) {
        let join = |root: &Path, p: &PathBuf| -> PathBuf {
            if p.is_absolute() {
                p.clone()
            } else {
                root.join(p)
            }
        };
        self.paths.cache_dir = join(base, &self.paths.cache_dir);
        self.paths.data_dir = join(base, &self.paths.data_dir);
        self.paths.artifacts_dir = join(base, &self.paths.artifacts_dir);
        let data = self.paths.data_dir.clone();
        self.points.csv = join(&data, &self.points.csv);
        if let Some(dir) = &self.imagery.tiles_dir {
            self.imagery.tiles_dir = Some(join(&data, dir));
        }
        if let Some(dir) = &self.autolabel.scenes_dir {
            self.autolabel.scenes_dir = Some(join(&data, dir));
        }
        self.dataset.golden_manifest = join(&data, &self.dataset.golden_manifest);
        if let Some(program) = &self.training.program {
            self.training.program = Some(join(base, program));
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));

        if !self.points.min_separation_m.is_finite() || self.points.min_separation_m < 0.0 {
            return fail(format!(
                "points.min_separation_m = {} must be finite and >= 0",
                self.points.min_separation_m
            ));
        }
        if self.imagery.tile_px == 0 {
            return fail("imagery.tile_px must be positive".into());
        }
        if !self.imagery.mpp.is_finite() || self.imagery.mpp <= 0.0 {
            return fail(format!("imagery.mpp = {} must be finite and > 0", self.imagery.mpp));
        }
        match self.imagery.source {
            ImagerySource::Local if self.imagery.tiles_dir.is_none() => {
                return fail("imagery.source = local requires imagery.tiles_dir".into());
            }
            ImagerySource::Remote if self.imagery.url_template.is_none() => {
                return fail("imagery.source = remote requires imagery.url_template".into());
            }
            _ => {}
        }
        if self.filtering.crop_px == 0 || self.filtering.crop_px > self.imagery.tile_px {
            return fail(format!(
                "filtering.crop_px = {} must be in 1..={}",
                self.filtering.crop_px, self.imagery.tile_px
            ));
        }

        let p = &self.autolabel.params;
        if p.crop_px == 0 || p.crop_px > self.imagery.tile_px {
            return fail(format!(
                "autolabel.params.crop_px = {} must be in 1..={}",
                p.crop_px, self.imagery.tile_px
            ));
        }
        if p.prompts.is_empty() {
            return fail("autolabel.params.prompts must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&p.min_area_frac)
            || !(0.0..=1.0).contains(&p.max_area_frac)
            || p.min_area_frac > p.max_area_frac
        {
            return fail(format!(
                "autolabel area band [{}, {}] must satisfy 0 <= min <= max <= 1",
                p.min_area_frac, p.max_area_frac
            ));
        }
        if !(0.0..=1.0).contains(&p.fuse_iou) {
            return fail(format!("autolabel.params.fuse_iou = {} out of [0, 1]", p.fuse_iou));
        }
        if !(0.0..=1.0).contains(&p.solidity_min) {
            return fail(format!("autolabel.params.solidity_min = {} out of [0, 1]", p.solidity_min));
        }
        if !p.aspect_max.is_finite() || p.aspect_max < 1.0 {
            return fail(format!("autolabel.params.aspect_max = {} must be >= 1", p.aspect_max));
        }
        if !p.center_max_px.is_finite() || p.center_max_px < 0.0 {
            return fail(format!("autolabel.params.center_max_px = {} must be >= 0", p.center_max_px));
        }
        match self.autolabel.backend {
            SegmenterKind::Scene if self.autolabel.scenes_dir.is_none() => {
                return fail("autolabel.backend = scene requires autolabel.scenes_dir".into());
            }
            SegmenterKind::Remote if self.autolabel.endpoint.is_none() => {
                return fail("autolabel.backend = remote requires autolabel.endpoint".into());
            }
            _ => {}
        }

        for (name, fr) in [
            ("dataset.auto_fractions", &self.dataset.auto_fractions),
            ("dataset.golden_fractions", &self.dataset.golden_fractions),
        ] {
            if fr.iter().any(|f| !f.is_finite() || *f < 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return fail(format!("{name} = {fr:?} must be non-negative and sum to 1"));
            }
        }
        for row in &self.dataset.regimes {
            let [total, school, non_school] = *row;
            if school + non_school != total {
                return fail(format!(
                    "dataset.regimes entry {row:?}: {school}+{non_school} != {total}"
                ));
            }
        }

        if self.training.backend == TrainerKind::Subprocess && self.training.program.is_none() {
            return fail("training.backend = subprocess requires training.program".into());
        }
        if self.training.patience == 0 {
            return fail("training.patience must be >= 1".into());
        }
        if self.training.max_rounds == 0 || self.training.max_rounds > 50 {
            return fail(format!(
                "training.max_rounds = {} must be in 1..=50",
                self.training.max_rounds
            ));
        }
        self.training.mock.validate().map_err(|e| Error::Config(format!("training.mock: {e}")))?;

        if self.hpo.budget == 0 {
            return fail("hpo.budget must be >= 1".into());
        }
        if !matches!(self.hpo.metric.as_str(), "f1" | "map50") {
            return fail(format!("hpo.metric = '{}' must be f1 or map50", self.hpo.metric));
        }
        if !matches!(self.hpo.strategy.as_str(), "ecp" | "random") {
            return fail(format!("hpo.strategy = '{}' must be ecp or random", self.hpo.strategy));
        }
        if !matches!(self.hpo.mode.as_str(), "full" | "skip_pretrain") {
            return fail(format!("hpo.mode = '{}' must be full or skip_pretrain", self.hpo.mode));
        }

        if !(0.0..=1.0).contains(&self.eval.score_cutoff) {
            return fail(format!("eval.score_cutoff = {} out of [0, 1]", self.eval.score_cutoff));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("run.toml");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "[imagery]\ntiles_dir = \"tiles\"\n[autolabel]\nscenes_dir = \"scenes\"\n",
        );
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.seeds.train, 7);
        assert_eq!(config.hpo.budget, 30);
        assert_eq!(config.dataset.regimes.len(), 4);
        // Relative inputs anchored under the config directory.
        assert!(config.points.csv.is_absolute());
        assert!(config.imagery.tiles_dir.unwrap().starts_with(dir.path()));
    }

    #[test]
    fn unknown_key_is_rejected_and_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[filtering]\ncorp_px = 200\n");
        let err = RunConfig::load(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("corp_px"), "{err}");
    }

    #[test]
    fn unknown_nested_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "[autolabel.params]\nsolidty_min = 0.7\n",
        );
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("solidty_min"), "{err}");
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let cases = [
            ("[imagery]\ntiles_dir = \"t\"\nmpp = 0.0\n[autolabel]\nscenes_dir = \"s\"\n", "mpp"),
            (
                "[imagery]\ntiles_dir = \"t\"\n[autolabel]\nscenes_dir = \"s\"\n[hpo]\nbudget = 0\n",
                "budget",
            ),
            (
                "[imagery]\ntiles_dir = \"t\"\n[autolabel]\nscenes_dir = \"s\"\n[training]\nmax_rounds = 99\n",
                "max_rounds",
            ),
            (
                "[imagery]\ntiles_dir = \"t\"\n[autolabel]\nscenes_dir = \"s\"\n[dataset]\nregimes = [[10, 4, 4]]\n",
                "regimes",
            ),
            (
                "[imagery]\ntiles_dir = \"t\"\n[autolabel]\nscenes_dir = \"s\"\n[eval]\nscore_cutoff = 1.5\n",
                "score_cutoff",
            ),
        ];
        for (body, needle) in cases {
            let dir = tempfile::tempdir().unwrap();
            let path = write_config(dir.path(), body);
            let err = RunConfig::load(&path).unwrap_err();
            assert!(err.to_string().contains(needle), "{needle}: {err}");
        }
    }

    #[test]
    fn missing_source_dependent_path_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[autolabel]\nscenes_dir = \"s\"\n");
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("tiles_dir"), "{err}");
    }

    #[test]
    fn config_roundtrips_through_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = RunConfig::default();
        config.imagery.tiles_dir = Some("tiles".into());
        config.autolabel.scenes_dir = Some("scenes".into());
        config.hpo.budget = 5;
        let path = dir.path().join("saved.toml");
        config.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.hpo.budget, 5);
        assert_eq!(back.training.backend, TrainerKind::Mock);
    }
}
