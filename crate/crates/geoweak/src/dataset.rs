//! Dataset assembly, splitting, regime subsets, and label serialization.
//!
//! Images either carry boxes (schools) or none (backgrounds). Labels are
//! written one text file per image in the normalized `class cx cy w h`
//! format with a JSON-lines manifest carrying identity, provenance, and
//! split, which the text format cannot.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autolabel::AutolabelOutcome;
use crate::bbox::BBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Boxes came from the automatic labeling pipeline.
    Auto,
    /// Boxes were drawn by hand.
    Golden,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Auto => "auto",
            Provenance::Golden => "golden",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        };
        f.write_str(name)
    }
}

/// One image with its boxes. Background (non-school) images have no boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub id: String,
    pub image_path: PathBuf,
    pub boxes: Vec<BBox>,
    pub provenance: Provenance,
    pub split: Split,
}

impl LabeledImage {
    pub fn is_school(&self) -> bool {
        !self.boxes.is_empty()
    }
}

/// An ordered collection of labeled images.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn new(images: Vec<LabeledImage>) -> Self {
        Dataset { images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn school_count(&self) -> usize {
        self.images.iter().filter(|i| i.is_school()).count()
    }

    pub fn non_school_count(&self) -> usize {
        self.len() - self.school_count()
    }

    pub fn by_split(&self, split: Split) -> impl Iterator<Item = &LabeledImage> {
        self.images.iter().filter(move |i| i.split == split)
    }

    /// Keeps only one split, as its own dataset.
    pub fn subset(&self, split: Split) -> Dataset {
        Dataset::new(self.by_split(split).cloned().collect())
    }

    /// Hash of the semantic content: ids, provenance, splits, and box
    /// geometry. File paths are excluded so relocating a run directory
    /// does not change identity.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for image in &self.images {
            hasher.update(image.id.as_bytes());
            hasher.update([0]);
            hasher.update(image.provenance.to_string().as_bytes());
            hasher.update(image.split.to_string().as_bytes());
            for b in &image.boxes {
                hasher.update(b.class_id.to_le_bytes());
                for v in [b.cx, b.cy, b.w, b.h] {
                    hasher.update(v.to_bits().to_le_bytes());
                }
            }
            hasher.update([1]);
        }
        hex::encode(hasher.finalize())
    }
}

/// Counts emitted by auto-assembly, for run summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembleSummary {
    pub school_labeled: usize,
    pub school_rejected: usize,
    pub negatives: usize,
}

impl AssembleSummary {
    pub fn total_images(&self) -> usize {
        self.school_labeled + self.negatives
    }

    /// A caution worth logging; present when no school image survived.
    pub fn warning(&self) -> Option<String> {
        (self.school_labeled == 0)
            .then(|| "auto-labeled dataset has no school images, only backgrounds".to_string())
    }
}

/// Builds the auto-labeled dataset: every labeled outcome becomes a one-box
/// school image, rejected outcomes are dropped (but counted), and negatives
/// join as box-free backgrounds. Everything is provenance=auto, unassigned.
pub fn assemble_auto(
    outcomes: &[(AutolabelOutcome, PathBuf)],
    negatives: &[(String, PathBuf)],
) -> (Dataset, AssembleSummary) {
    let mut images = Vec::new();
    let mut rejected = 0usize;
    for (outcome, image_path) in outcomes {
        match &outcome.bbox {
            Some(bbox) => images.push(LabeledImage {
                id: outcome.tile_id.clone(),
                image_path: image_path.clone(),
                boxes: vec![*bbox],
                provenance: Provenance::Auto,
                split: Split::Unassigned,
            }),
            None => rejected += 1,
        }
    }
    let school_labeled = images.len();
    for (id, image_path) in negatives {
        images.push(LabeledImage {
            id: id.clone(),
            image_path: image_path.clone(),
            boxes: Vec::new(),
            provenance: Provenance::Auto,
            split: Split::Unassigned,
        });
    }
    let summary = AssembleSummary {
        school_labeled,
        school_rejected: rejected,
        negatives: negatives.len(),
    };
    (Dataset::new(images), summary)
}

/// Assigns splits by deterministic shuffle. Train and val sizes are floored
/// fractions of the total; test takes the remainder.
pub fn split(dataset: Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let (f_train, f_val, f_test) = fractions;
    let sum = f_train + f_val + f_test;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("split fractions sum to {sum}, expected 1")));
    }
    if f_train < 0.0 || f_val < 0.0 || f_test < 0.0 {
        return Err(Error::InvalidInput("split fractions must be non-negative".into()));
    }
    let mut seen = HashSet::new();
    for image in &dataset.images {
        if !seen.insert(image.id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate image id {:?} in dataset", image.id)));
        }
    }
    let n = dataset.len();
    let n_train = (n as f64 * f_train).floor() as usize;
    let n_val = (n as f64 * f_val).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut images = dataset.images;
    for (rank, &idx) in order.iter().enumerate() {
        images[idx].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(Dataset::new(images))
}

/// Target composition of one training regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub total: usize,
    pub school: usize,
    pub non_school: usize,
}

impl RegimeSpec {
    pub fn new(total: usize, school: usize, non_school: usize) -> Result<Self> {
        if school + non_school != total {
            return Err(Error::InvalidInput(format!(
                "regime {school}+{non_school} != total {total}"
            )));
        }
        Ok(RegimeSpec { total, school, non_school })
    }
}

/// The four standard training regimes of the default run config.
pub fn default_regimes() -> [RegimeSpec; 4] {
    [
        RegimeSpec { total: 50, school: 32, non_school: 18 },
        RegimeSpec { total: 100, school: 65, non_school: 35 },
        RegimeSpec { total: 300, school: 195, non_school: 105 },
        RegimeSpec { total: 443, school: 288, non_school: 155 },
    ]
}

/// Samples a stratified regime subset from a golden training pool. For a
/// fixed seed, subsets are nested: a smaller regime is always contained in
/// every larger one, because both take prefixes of the same shuffled order.
pub fn make_regime(pool: &Dataset, spec: RegimeSpec, seed: u64) -> Result<Dataset> {
    let school_idx: Vec<usize> = (0..pool.len()).filter(|&i| pool.images[i].is_school()).collect();
    let non_school_idx: Vec<usize> = (0..pool.len()).filter(|&i| !pool.images[i].is_school()).collect();
    if school_idx.len() < spec.school {
        return Err(Error::InvalidInput(format!(
            "regime needs {} school images, pool has {}",
            spec.school,
            school_idx.len()
        )));
    }
    if non_school_idx.len() < spec.non_school {
        return Err(Error::InvalidInput(format!(
            "regime needs {} non-school images, pool has {}",
            spec.non_school,
            non_school_idx.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut school_order = school_idx;
    let mut non_school_order = non_school_idx;
    school_order.shuffle(&mut rng);
    non_school_order.shuffle(&mut rng);

    let mut picked: Vec<usize> = school_order[..spec.school]
        .iter()
        .chain(&non_school_order[..spec.non_school])
        .copied()
        .collect();
    picked.sort_unstable();
    Ok(Dataset::new(picked.into_iter().map(|i| pool.images[i].clone()).collect()))
}

/// How the training backend should augment, carried as data so stored label
/// files stay augmentation-free.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub rotate: bool,
    pub flip: bool,
    /// Max translation as a fraction of image size, in [0, 0.5].
    pub translate_max: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec { rotate: true, flip: true, translate_max: 0.1 }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.translate_max) {
            return Err(Error::InvalidInput(format!(
                "translate_max {} outside [0, 0.5]",
                self.translate_max
            )));
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub label_path: String,
    pub provenance: Provenance,
    pub split: Split,
    pub n_boxes: usize,
}

/// Serializes one box as a label-file line.
fn label_line(b: &BBox) -> String {
    format!("{} {:.6} {:.6} {:.6} {:.6}", b.class_id, b.cx, b.cy, b.w, b.h)
}

/// Writes per-image label files plus `manifest.jsonl` under `out_dir`,
/// returning the manifest path. Box-free images get an empty label file.
pub fn write_labels(dataset: &Dataset, out_dir: &Path) -> Result<PathBuf> {
    let labels_dir = out_dir.join("labels");
    std::fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;
    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest =
        std::io::BufWriter::new(std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?);
    for image in &dataset.images {
        let label_path = labels_dir.join(format!("{}.txt", image.id));
        let mut lines = String::new();
        for b in &image.boxes {
            lines.push_str(&label_line(b));
            lines.push('\n');
        }
        std::fs::write(&label_path, lines).map_err(|e| Error::io(&label_path, e))?;
        let record = ManifestRecord {
            id: image.id.clone(),
            image_path: image.image_path.to_string_lossy().into_owned(),
            label_path: label_path.to_string_lossy().into_owned(),
            provenance: image.provenance,
            split: image.split,
            n_boxes: image.boxes.len(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Decode(format!("serialize manifest record {}: {e}", image.id)))?;
        writeln!(manifest, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Parses one label file into boxes (no scores).
pub fn read_label_file(path: &Path) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut boxes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Decode(format!(
                "{}:{}: expected `class cx cy w h`, got {line:?}",
                path.display(),
                lineno + 1
            )));
        }
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Decode(format!("{}:{}: {e}", path.display(), lineno + 1)))
        };
        let class_id = fields[0]
            .parse::<u32>()
            .map_err(|e| Error::Decode(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        boxes.push(BBox::new(
            class_id,
            parse_f(fields[1])?,
            parse_f(fields[2])?,
            parse_f(fields[3])?,
            parse_f(fields[4])?,
        )?);
    }
    Ok(boxes)
}

/// Reads a manifest and its label files back into a dataset.
pub fn read_labels(manifest_path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut images = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Decode(format!("{}:{}: {e}", manifest_path.display(), lineno + 1))
        })?;
        let boxes = read_label_file(Path::new(&record.label_path))?;
        if boxes.len() != record.n_boxes {
            return Err(Error::Decode(format!(
                "manifest says {} boxes for {}, label file has {}",
                record.n_boxes,
                record.id,
                boxes.len()
            )));
        }
        images.push(LabeledImage {
            id: record.id,
            image_path: PathBuf::from(record.image_path),
            boxes,
            provenance: record.provenance,
            split: record.split,
        });
    }
    Ok(Dataset::new(images))
}

/// Verifies that no image id sits in two different splits across all given
/// datasets (auto and golden combined). Repeats within one split are fine;
/// nested regimes share training images by design.
pub fn check_split_separation(datasets: &[&Dataset]) -> Result<()> {
    let mut assignment: HashMap<&str, Split> = HashMap::new();
    for ds in datasets {
        for image in &ds.images {
            if let Some(&prior) = assignment.get(image.id.as_str()) {
                if prior != image.split {
                    return Err(Error::InvalidInput(format!(
                        "image {:?} appears in both {} and {}",
                        image.id, prior, image.split
                    )));
                }
            } else {
                assignment.insert(&image.id, image.split);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autolabel::RejectReason;
    use std::collections::HashSet;

    fn bbox(cx: f64) -> BBox {
        BBox::new(0, cx, 0.5, 0.2, 0.2).unwrap()
    }

    fn school_image(id: &str, split: Split) -> LabeledImage {
        LabeledImage {
            id: id.into(),
            image_path: PathBuf::from(format!("tiles/{id}.png")),
            boxes: vec![bbox(0.5)],
            provenance: Provenance::Golden,
            split,
        }
    }

    fn background_image(id: &str, split: Split) -> LabeledImage {
        LabeledImage {
            id: id.into(),
            image_path: PathBuf::from(format!("tiles/{id}.png")),
            boxes: Vec::new(),
            provenance: Provenance::Golden,
            split,
        }
    }

    fn outcome_labeled(id: &str) -> (AutolabelOutcome, PathBuf) {
        (
            AutolabelOutcome::labeled(id, bbox(0.5), None),
            PathBuf::from(format!("tiles/{id}.png")),
        )
    }

    fn outcome_rejected(id: &str) -> (AutolabelOutcome, PathBuf) {
        (
            AutolabelOutcome::rejected(id, RejectReason::NoValidMask, None),
            PathBuf::from(format!("tiles/{id}.png")),
        )
    }

    #[test]
    fn assemble_excludes_rejected_and_counts() {
        let outcomes = vec![
            outcome_labeled("s1"),
            outcome_labeled("s2"),
            outcome_labeled("s3"),
            outcome_rejected("r1"),
            outcome_rejected("r2"),
        ];
        let negatives = vec![
            ("n1".to_string(), PathBuf::from("tiles/n1.png")),
            ("n2".to_string(), PathBuf::from("tiles/n2.png")),
        ];
        let (ds, summary) = assemble_auto(&outcomes, &negatives);
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.school_count(), 3);
        assert_eq!(summary.school_rejected, 2);
        assert_eq!(summary.total_images(), 5);
        assert!(summary.warning().is_none());
        assert!(ds.images.iter().all(|i| i.provenance == Provenance::Auto));
        assert!(ds.images.iter().all(|i| i.split == Split::Unassigned));
    }

    #[test]
    fn assemble_with_no_labels_warns() {
        let outcomes = vec![outcome_rejected("r1")];
        let negatives = vec![("n1".to_string(), PathBuf::from("tiles/n1.png"))];
        let (ds, summary) = assemble_auto(&outcomes, &negatives);
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.school_count(), 0);
        assert!(summary.warning().is_some());
    }

    #[test]
    fn assemble_at_one_hundredth_scale() {
        // 87 school + 30 background images mirror the full-scale corpus
        // shrunk one hundred fold.
        let outcomes: Vec<_> = (0..87).map(|i| outcome_labeled(&format!("s{i}"))).collect();
        let negatives: Vec<_> = (0..30)
            .map(|i| (format!("n{i}"), PathBuf::from(format!("tiles/n{i}.png"))))
            .collect();
        let (ds, summary) = assemble_auto(&outcomes, &negatives);
        assert_eq!(ds.len(), 117);
        assert_eq!(summary.school_labeled, 87);
        assert_eq!(summary.negatives, 30);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let images: Vec<_> = (0..10).map(|i| school_image(&format!("im{i}"), Split::Unassigned)).collect();
        let a = split(Dataset::new(images.clone()), (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(a.by_split(Split::Train).count(), 8);
        assert_eq!(a.by_split(Split::Val).count(), 1);
        assert_eq!(a.by_split(Split::Test).count(), 1);
        let b = split(Dataset::new(images.clone()), (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(a, b);

        let c = split(Dataset::new(images), (0.8, 0.1, 0.1), 8).unwrap();
        assert_eq!(c.by_split(Split::Train).count(), 8);
        assert_eq!(c.by_split(Split::Val).count(), 1);
    }

    #[test]
    fn split_partition_is_exact() {
        let images: Vec<_> = (0..53).map(|i| school_image(&format!("im{i}"), Split::Unassigned)).collect();
        let input_ids: HashSet<String> = images.iter().map(|i| i.id.clone()).collect();
        let ds = split(Dataset::new(images), (0.6, 0.2, 0.2), 3).unwrap();
        let train: HashSet<String> = ds.by_split(Split::Train).map(|i| i.id.clone()).collect();
        let val: HashSet<String> = ds.by_split(Split::Val).map(|i| i.id.clone()).collect();
        let test: HashSet<String> = ds.by_split(Split::Test).map(|i| i.id.clone()).collect();
        assert!(train.is_disjoint(&val));
        assert!(train.is_disjoint(&test));
        assert!(val.is_disjoint(&test));
        let union: HashSet<String> = train.union(&val).cloned().chain(test.iter().cloned()).collect();
        assert_eq!(union, input_ids);
        assert_eq!(ds.by_split(Split::Unassigned).count(), 0);
    }

    #[test]
    fn split_rejects_duplicates_and_bad_fractions() {
        let dup = vec![
            school_image("same", Split::Unassigned),
            school_image("same", Split::Unassigned),
        ];
        assert!(matches!(
            split(Dataset::new(dup), (0.8, 0.1, 0.1), 1),
            Err(Error::InvalidInput(_))
        ));
        let ok = vec![school_image("a", Split::Unassigned)];
        assert!(split(Dataset::new(ok), (0.5, 0.2, 0.2), 1).is_err());
    }

    fn golden_pool(n_school: usize, n_background: usize) -> Dataset {
        let mut images = Vec::new();
        for i in 0..n_school {
            images.push(school_image(&format!("gs{i}"), Split::Train));
        }
        for i in 0..n_background {
            images.push(background_image(&format!("gn{i}"), Split::Train));
        }
        Dataset::new(images)
    }

    #[test]
    fn regime_counts_match_spec() {
        let pool = golden_pool(288, 155);
        let r50 = make_regime(&pool, RegimeSpec::new(50, 32, 18).unwrap(), 11).unwrap();
        assert_eq!(r50.school_count(), 32);
        assert_eq!(r50.non_school_count(), 18);
        let r100 = make_regime(&pool, RegimeSpec::new(100, 65, 35).unwrap(), 11).unwrap();
        assert_eq!(r100.school_count(), 65);
        assert_eq!(r100.non_school_count(), 35);
    }

    #[test]
    fn regimes_nest_for_a_fixed_seed() {
        let pool = golden_pool(288, 155);
        let seed = 23;
        let ids = |ds: &Dataset| ds.images.iter().map(|i| i.id.clone()).collect::<HashSet<_>>();
        let sets: Vec<HashSet<String>> = default_regimes()
            .iter()
            .map(|spec| ids(&make_regime(&pool, *spec, seed).unwrap()))
            .collect();
        for w in sets.windows(2) {
            assert!(w[0].is_subset(&w[1]), "regimes must nest");
        }
        assert_eq!(sets[3].len(), 443);
    }

    #[test]
    fn regime_deficit_is_a_named_error() {
        let pool = golden_pool(5, 20);
        let err = make_regime(&pool, RegimeSpec::new(10, 9, 1).unwrap(), 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('9') && msg.contains('5'), "{msg}");
    }

    #[test]
    fn regime_spec_arithmetic_enforced() {
        assert!(RegimeSpec::new(50, 30, 18).is_err());
        assert!(RegimeSpec::new(50, 32, 18).is_ok());
    }

    #[test]
    fn label_line_formatting_contract() {
        let b = BBox::new(0, 0.45, 0.50, 0.20, 0.20).unwrap();
        assert_eq!(label_line(&b), "0 0.450000 0.500000 0.200000 0.200000");
    }

    #[test]
    fn labels_roundtrip_within_tolerance() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut images = Vec::new();
        for i in 0..40 {
            let n_boxes = rng.gen_range(0..4);
            let boxes = (0..n_boxes)
                .map(|_| {
                    let w = rng.gen_range(0.01..0.4);
                    let h = rng.gen_range(0.01..0.4);
                    let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
                    let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
                    BBox::new(0, cx, cy, w, h).unwrap()
                })
                .collect();
            images.push(LabeledImage {
                id: format!("rt{i}"),
                image_path: PathBuf::from(format!("tiles/rt{i}.png")),
                boxes,
                provenance: if i % 2 == 0 { Provenance::Auto } else { Provenance::Golden },
                split: Split::Train,
            });
        }
        let ds = Dataset::new(images);
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_labels(&ds, dir.path()).unwrap();
        let back = read_labels(&manifest).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.images.iter().zip(&back.images) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.provenance, b.provenance);
            assert_eq!(a.split, b.split);
            assert_eq!(a.boxes.len(), b.boxes.len());
            for (ba, bb) in a.boxes.iter().zip(&b.boxes) {
                assert!((ba.cx - bb.cx).abs() <= 1e-6);
                assert!((ba.cy - bb.cy).abs() <= 1e-6);
                assert!((ba.w - bb.w).abs() <= 1e-6);
                assert!((ba.h - bb.h).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn one_label_file_per_image() {
        let mut images: Vec<_> = (0..87).map(|i| school_image(&format!("s{i}"), Split::Train)).collect();
        images.extend((0..30).map(|i| background_image(&format!("n{i}"), Split::Train)));
        let ds = Dataset::new(images);
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_labels(&ds, dir.path()).unwrap();
        let n_files = std::fs::read_dir(dir.path().join("labels")).unwrap().count();
        assert_eq!(n_files, 117);
        // Background label files are empty.
        let empty = std::fs::read_to_string(dir.path().join("labels/n0.txt")).unwrap();
        assert!(empty.is_empty());
        let lines = std::fs::read_to_string(&manifest).unwrap().lines().count();
        assert_eq!(lines, 117);
    }

    #[test]
    fn separation_checker_catches_cross_split_reuse() {
        let auto = Dataset::new(vec![school_image("shared", Split::Train)]);
        let golden = Dataset::new(vec![school_image("shared", Split::Val)]);
        let err = check_split_separation(&[&auto, &golden]).unwrap_err();
        assert!(err.to_string().contains("shared"));

        let golden_ok = Dataset::new(vec![school_image("shared", Split::Train)]);
        assert!(check_split_separation(&[&auto, &golden_ok]).is_ok());
    }

    #[test]
    fn augmentation_bounds_enforced() {
        assert!(AugmentationSpec::default().validate().is_ok());
        let bad = AugmentationSpec { rotate: false, flip: false, translate_max: 0.7 };
        assert!(bad.validate().is_err());
    }
}
