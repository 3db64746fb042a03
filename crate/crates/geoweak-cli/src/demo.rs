//! End-to-end demonstration on a generated corpus: every pipeline stage
//! runs offline against the scene segmenter and the mock detector, ending
//! with real metrics on the golden test split.

use std::path::{Path, PathBuf};

use geoweak::dataset::{read_labels, split, Split};
use geoweak::eval::EvalReport;
use geoweak::synth::{generate_corpus, CorpusSpec, CATEGORY_GOLDEN};
use geoweak::training::{MockDetector, TwoStageMode};
use geoweak::{Error, Result};

use crate::config::RunConfig;
use crate::runlog::RunLog;
use crate::stages::{self, Ctx, RegimeSel, TuneArgs};

pub struct DemoArgs {
    /// Probability the mock detector misses each ground-truth box.
    pub drop_rate: f64,
    /// Reuse an already-generated corpus instead of writing one.
    pub corpus: Option<PathBuf>,
}

/// Corpus sized so the filter calibration isolates the vegetation tile,
/// every rejection reason appears once, and the golden test split carries
/// enough boxes for stable recall statistics.
fn demo_spec() -> CorpusSpec {
    CorpusSpec {
        n_school_auto: 14,
        n_negative_auto: 8,
        n_school_golden: 24,
        n_negative_golden: 8,
        n_vegetation: 1,
        with_reject_scenes: true,
        golden_boxes_per_site: 5,
        tile_px: 500,
        seed: 7,
    }
}

/// Two regimes computed from the golden train pool the build stage will
/// realize: roughly two thirds of it, and all of it.
fn demo_regimes(config: &RunConfig) -> Result<Vec<[usize; 3]>> {
    let golden = read_labels(&config.dataset.golden_manifest)?;
    let [train_f, val_f, test_f] = config.dataset.golden_fractions;
    let pool = split(golden, (train_f, val_f, test_f), config.seeds.split)?.subset(Split::Train);
    let school = pool.school_count();
    let non_school = pool.non_school_count();
    if school == 0 {
        return Err(Error::InvalidInput("golden train pool has no school sites".into()));
    }
    let school_small = (school * 2).div_ceil(3);
    let non_small = non_school * 2 / 3;
    let mut regimes = vec![
        [school_small + non_small, school_small, non_small],
        [school + non_school, school, non_school],
    ];
    regimes.dedup();
    Ok(regimes)
}

fn demo_config(run_dir: &Path, corpus_root: &Path, seed: u64, drop_rate: f64) -> RunConfig {
    let mut config = RunConfig::default();
    config.paths.cache_dir = run_dir.join("cache");
    config.paths.data_dir = corpus_root.to_path_buf();
    config.paths.artifacts_dir = run_dir.to_path_buf();
    config.points.csv = corpus_root.join("points.csv");
    config.points.golden_categories = vec![CATEGORY_GOLDEN.to_string()];
    config.imagery.tiles_dir = Some(corpus_root.join("tiles"));
    config.autolabel.scenes_dir = Some(corpus_root.join("scenes"));
    config.dataset.golden_manifest = corpus_root.join("golden").join("manifest.jsonl");
    config.dataset.golden_fractions = [0.5, 0.2, 0.3];
    config.training.max_rounds = 8;
    config.training.mock = MockDetector { drop_rate, ..MockDetector::exact() };
    config.hpo.budget = 4;
    config.seeds.train = seed;
    config
}

/// Runs the whole pipeline and returns the evaluation of the largest
/// regime, also saved as `demo_report.json` in the run directory.
pub fn e2e_demo(run_dir: &Path, seed: u64, args: &DemoArgs) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&args.drop_rate) {
        return Err(Error::Config(format!(
            "drop_rate = {} out of [0, 1]",
            args.drop_rate
        )));
    }
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let corpus_root = match &args.corpus {
        Some(dir) if dir.join("points.csv").exists() => dir.clone(),
        Some(dir) => generate_corpus(dir, &demo_spec())?.root,
        None => generate_corpus(&run_dir.join("corpus"), &demo_spec())?.root,
    };

    let mut config = demo_config(run_dir, &corpus_root, seed, args.drop_rate);
    config.dataset.regimes = demo_regimes(&config)?;
    config.validate()?;
    config.save(&run_dir.join("config.toml"))?;

    let log = RunLog::open(run_dir)?;
    let ctx = Ctx {
        config: &config,
        log: &log,
        train_seed: seed,
    };
    log.info(
        "demo",
        &format!("corpus at {}, drop_rate {}, seed {seed}", corpus_root.display(), args.drop_rate),
    )?;

    stages::fetch_points(&ctx)?;
    stages::fetch_tiles(&ctx)?;
    stages::filter(&ctx)?;
    stages::autolabel(&ctx)?;
    stages::build_dataset(&ctx)?;
    stages::tune(&ctx, &TuneArgs::default())?;
    for row in &config.dataset.regimes {
        let regime = RegimeSel::Total(row[0]);
        stages::train(&ctx, regime, TwoStageMode::Full)?;
        stages::evaluate_stage(&ctx, regime, TwoStageMode::Full)?;
    }
    stages::report(&ctx)?;

    let final_regime = RegimeSel::Total(config.dataset.regimes.last().expect("validated")[0]);
    let report = stages::read_eval_report(&ctx, final_regime, TwoStageMode::Full)?;
    let report_path = run_dir.join("demo_report.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Decode(format!("serialize report: {e}")))?;
    std::fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;

    println!(
        "demo final ({}): precision {:.3} recall {:.3} f1 {:.3} map50 {:.3} map50_95 {:.3}",
        report.regime, report.precision, report.recall, report.f1, report.map50, report.map50_95
    );
    println!("artifacts in {}", run_dir.display());
    Ok(report)
}
