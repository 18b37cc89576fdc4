//! Synthetic textile defect datasets: generation, augmentation, splitting
//! and on-disk storage (PGM images plus `annotations.jsonl`).

pub mod augment;
pub mod pgm;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{crop_tiles, rotate, rotate_box, translate};
pub use pgm::{images_to_tensor, GrayImage};
pub use synth::{generate_sample, SUNDRIES_MAX_SIDE};

use crate::classes::DefectClass;
use crate::config;
use crate::detector::BBox;
use crate::error::{invalid, Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const IMAGE_DIR: &str = "images";
/// Smallest collection `split_dataset` accepts.
pub const MIN_SPLIT_SAMPLES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub class: DefectClass,
}

/// One grayscale image with its boxes. No annotations means defect-free.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub annotations: Vec<Annotation>,
}

impl Sample {
    /// Distinct classes present, in class order.
    pub fn label_set(&self) -> Vec<DefectClass> {
        let mut v: Vec<DefectClass> = self.annotations.iter().map(|a| a.class).collect();
        v.sort_by_key(|c| c.index());
        v.dedup();
        v
    }

    pub fn ground_truth(&self) -> Vec<(BBox, DefectClass)> {
        self.annotations.iter().map(|a| (a.bbox, a.class)).collect()
    }
}

/// Label combination written as abbreviations joined by `+`; `n` is the
/// defect-free set.
pub fn combination_key(labels: &[DefectClass]) -> String {
    if labels.is_empty() {
        return "n".into();
    }
    labels.iter().map(|c| c.abbrev()).collect::<Vec<_>>().join("+")
}

pub fn parse_combination(key: &str) -> Result<Vec<DefectClass>> {
    if key == "n" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for part in key.split('+') {
        let class: DefectClass = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("unknown class {part:?} in combination {key:?}")))?;
        if out.contains(&class) {
            return Err(Error::Config(format!("class {part:?} repeated in combination {key:?}")));
        }
        out.push(class);
    }
    Ok(out)
}

/// How many samples of each label combination to render.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub combinations: Vec<(Vec<DefectClass>, usize)>,
    pub tile: usize,
    pub seed: u64,
    /// Share of samples that are translated or rotated copies.
    pub augment_fraction: f64,
}

impl DatasetSpec {
    fn from_keys(keys: &[(&str, usize)], seed: u64, augment_fraction: f64) -> Self {
        let combinations = keys
            .iter()
            .map(|(k, n)| (parse_combination(k).expect("built-in combination"), *n))
            .collect();
        Self {
            combinations,
            tile: 320,
            seed,
            augment_fraction,
        }
    }

    /// 1,000 samples shaped like the reference textile collection: 50
    /// normal, 150 single-label, 775 two-label and 25 three-label.
    pub fn standard() -> Self {
        Self::from_keys(
            &[
                ("n", 50),
                ("be", 30),
                ("bp", 30),
                ("f", 30),
                ("o", 30),
                ("s", 30),
                ("be+s", 155),
                ("bp+s", 155),
                ("f+s", 155),
                ("o+bp", 155),
                ("s+f", 155),
                ("f+s+o", 5),
                ("f+bp+o", 5),
                ("s+bp+be", 5),
                ("f+s+be", 5),
                ("s+be+o", 5),
            ],
            7,
            0.5,
        )
    }

    /// 20 samples covering every combination kind, for quick runs.
    pub fn tiny() -> Self {
        Self::from_keys(
            &[
                ("n", 2),
                ("be", 1),
                ("bp", 1),
                ("f", 1),
                ("o", 1),
                ("s", 1),
                ("be+s", 2),
                ("bp+s", 2),
                ("f+s", 2),
                ("o+bp", 2),
                ("s+f", 2),
                ("f+s+o", 1),
                ("f+bp+o", 1),
                ("s+bp+be", 1),
            ],
            7,
            0.5,
        )
    }

    /// Eight unaugmented images, each with at least two defects and one
    /// sundries cluster.
    pub fn harness() -> Self {
        Self::from_keys(
            &[
                ("be+s", 1),
                ("bp+s", 1),
                ("f+s", 1),
                ("o+s", 1),
                ("f+s+o", 1),
                ("s+bp+be", 1),
                ("f+s+be", 1),
                ("s+be+o", 1),
            ],
            11,
            0.0,
        )
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" | "default" => Ok(Self::standard()),
            "tiny" => Ok(Self::tiny()),
            "harness" => Ok(Self::harness()),
            other => Err(Error::Config(format!("unknown dataset preset {other:?} (standard, tiny, harness)"))),
        }
    }

    pub fn total(&self) -> usize {
        self.combinations.iter().map(|(_, n)| n).sum()
    }

    pub fn multi_label_fraction(&self) -> f64 {
        let multi: usize = self.combinations.iter().filter(|(c, _)| c.len() > 1).map(|(_, n)| n).sum();
        multi as f64 / self.total().max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile < 64 || self.tile % 32 != 0 {
            return Err(Error::Config(format!("data.tile must be a multiple of 32 and at least 64, got {}", self.tile)));
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) {
            return Err(Error::Config(format!(
                "data.augment_fraction must lie in [0, 1], got {}",
                self.augment_fraction
            )));
        }
        // rows are keyed by their written order: the reference table lists
        // f+s and s+f as separate rows of the same label set
        for (i, (a, _)) in self.combinations.iter().enumerate() {
            if self.combinations[..i].iter().any(|(b, _)| a == b) {
                return Err(Error::Config(format!("combination {} listed twice", combination_key(a))));
            }
        }
        if self.total() == 0 {
            return Err(Error::Config("dataset spec has no samples".into()));
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("data.tile".to_string(), self.tile.to_string()),
            ("data.seed".to_string(), self.seed.to_string()),
            ("data.augment_fraction".to_string(), self.augment_fraction.to_string()),
        ];
        for (c, n) in &self.combinations {
            out.push((format!("data.count.{}", combination_key(c)), n.to_string()));
        }
        out
    }

    /// Applies one `data.*` key. Returns false for keys outside this
    /// namespace. A count for a new combination key appends a row.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "data.tile" => self.tile = config::value(key, raw)?,
            "data.seed" => self.seed = config::value(key, raw)?,
            "data.augment_fraction" => self.augment_fraction = config::value(key, raw)?,
            _ => {
                let Some(combo) = key.strip_prefix("data.count.") else {
                    return Ok(false);
                };
                let labels = parse_combination(combo)?;
                let n: usize = config::value(key, raw)?;
                match self.combinations.iter_mut().find(|(c, _)| *c == labels) {
                    Some(slot) => slot.1 = n,
                    None => self.combinations.push((labels, n)),
                }
            }
        }
        Ok(true)
    }

    /// Parses a spec file. Counts listed in the file replace the preset's
    /// combination list entirely.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = Self::standard();
        let entries = config::parse(text)?;
        if entries.iter().any(|e| e.key.starts_with("data.count.")) {
            spec.combinations.clear();
        }
        for e in entries {
            if !spec.set(&e.key, &e.value).map_err(|err| Error::parse(e.line, err.to_string()))? {
                return Err(Error::parse(e.line, format!("unknown key {:?}", e.key)));
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Renders sample `index` of `labels`. Each sample draws from its own
/// stream of the spec seed, so samples are independent of one another.
pub fn render_sample(spec: &DatasetSpec, index: usize, labels: &[DefectClass]) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let id = format!("img{index:04}");
    let base = generate_sample(&mut rng, labels, spec.tile, id);
    if rng.gen::<f64>() >= spec.augment_fraction {
        return Ok(base);
    }
    // draws that would push a defect out of frame are redrawn so the label
    // composition stays exact
    for _ in 0..8 {
        let out = if rng.gen_bool(0.5) {
            translate(&base, rng.gen_range(0..=augment::MAX_SHIFT), rng.gen_range(0..=augment::MAX_SHIFT))?
        } else {
            let mag = rng.gen_range(augment::MIN_ANGLE_DEG..=augment::MAX_ANGLE_DEG);
            rotate(&base, if rng.gen_bool(0.5) { mag } else { -mag })?
        };
        if out.annotations.len() == base.annotations.len() {
            return Ok(out);
        }
    }
    Ok(base)
}

pub fn generate_samples(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.total());
    for (labels, n) in &spec.combinations {
        for _ in 0..*n {
            out.push(render_sample(spec, out.len(), labels)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid!("unknown split {other:?} (train, val, test)")),
        }
    }
}

/// Sample indices per split, each list ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Hands out `target − Σ floors` extra slots by largest remainder. Ties go
/// to the earlier stratum; strata already at `cap` are skipped.
fn largest_remainder(floors: &mut [usize], rems: &[usize], caps: &[usize], target: usize) {
    let mut order: Vec<usize> = (0..floors.len()).collect();
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    let mut missing = target.saturating_sub(floors.iter().sum());
    for &i in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if rems[i] > 0 && floors[i] < caps[i] {
            floors[i] += 1;
            missing -= 1;
        }
    }
}

/// Stratified 80/10/10 split keyed on each sample's label combination.
///
/// Totals are `⌊0.8·N⌋` train and `⌊0.1·N⌋` val. Each stratum first gets
/// the floor of its share; leftover slots go to the strata with the
/// largest fractional parts (ties to the stratum whose key sorts first).
/// A stratum of 5 therefore gets 4 train and 0 or 1 val. Members are
/// drawn from a seeded shuffle within the stratum.
pub fn split_dataset(samples: &[Sample], seed: u64) -> Result<SplitIndices> {
    let n = samples.len();
    if n < MIN_SPLIT_SAMPLES {
        return Err(invalid!("splitting needs at least {MIN_SPLIT_SAMPLES} samples, got {n}"));
    }
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        strata.entry(combination_key(&s.label_set())).or_default().push(i);
    }
    let sizes: Vec<usize> = strata.values().map(|v| v.len()).collect();

    let mut train: Vec<usize> = sizes.iter().map(|s| 8 * s / 10).collect();
    let train_rem: Vec<usize> = sizes.iter().map(|s| 8 * s % 10).collect();
    largest_remainder(&mut train, &train_rem, &sizes, 8 * n / 10);

    let mut val: Vec<usize> = sizes.iter().zip(&train).map(|(s, t)| (s / 10).min(s - t)).collect();
    let val_rem: Vec<usize> = sizes.iter().map(|s| s % 10).collect();
    let room: Vec<usize> = sizes.iter().zip(&train).map(|(s, t)| s - t).collect();
    largest_remainder(&mut val, &val_rem, &room, n / 10);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitIndices::default();
    for (k, members) in strata.values().enumerate() {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        out.train.extend_from_slice(&m[..train[k]]);
        out.val.extend_from_slice(&m[train[k]..train[k] + val[k]]);
        out.test.extend_from_slice(&m[train[k] + val[k]..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Samples with their split membership.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, indices: &SplitIndices) -> Result<Self> {
        let mut splits = vec![None; samples.len()];
        for (split, list) in [(Split::Train, &indices.train), (Split::Val, &indices.val), (Split::Test, &indices.test)] {
            for &i in list {
                let slot = splits.get_mut(i).ok_or_else(|| invalid!("split index {i} out of range"))?;
                if slot.replace(split).is_some() {
                    return Err(invalid!("sample {i} assigned to two splits"));
                }
            }
        }
        let splits = splits
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| invalid!("sample {i} has no split")))
            .collect::<Result<_>>()?;
        Ok(Self { samples, splits })
    }

    /// Everything in the training split.
    pub fn train_only(samples: Vec<Sample>) -> Self {
        let splits = vec![Split::Train; samples.len()];
        Self { samples, splits }
    }

    pub fn split(&self, which: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(x, _)| x)
            .collect()
    }

    pub fn indices(&self) -> SplitIndices {
        let mut out = SplitIndices::default();
        for (i, s) in self.splits.iter().enumerate() {
            match s {
                Split::Train => out.train.push(i),
                Split::Val => out.val.push(i),
                Split::Test => out.test.push(i),
            }
        }
        out
    }

    pub fn multi_label_fraction(&self) -> f64 {
        let multi = self.samples.iter().filter(|s| s.label_set().len() > 1).count();
        multi as f64 / self.samples.len().max(1) as f64
    }
}

/// Renders, augments and splits a dataset. Collections too small to split
/// go entirely to training.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let samples = generate_samples(spec)?;
    if samples.len() < MIN_SPLIT_SAMPLES {
        log::warn!("{} samples is too few to split; all go to train", samples.len());
        return Ok(Dataset::train_only(samples));
    }
    let idx = split_dataset(&samples, spec.seed)?;
    Dataset::new(samples, &idx)
}

/// Per-row counts of a freshly generated dataset, laid out by label
/// count, with split totals. Samples are matched to spec rows by
/// generation order.
pub fn composition_table(spec: &DatasetSpec, data: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>8} {:>6} {:>6} {:>6} {:>6}", "labels", "kind", "total", "train", "val", "test");
    let mut start = 0;
    for (labels, n) in &spec.combinations {
        let end = (start + n).min(data.splits.len());
        let mut counts = [0usize; 3];
        for split in &data.splits[start.min(end)..end] {
            counts[*split as usize] += 1;
        }
        start += n;
        let kind = match labels.len() {
            0 => "normal".to_string(),
            1 => "single".to_string(),
            k => format!("{k}-label"),
        };
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>6} {:>6} {:>6} {:>6}",
            combination_key(labels),
            kind,
            counts.iter().sum::<usize>(),
            counts[0],
            counts[1],
            counts[2]
        );
    }
    let idx = data.indices();
    let _ = writeln!(
        out,
        "{:<10} {:>8} {:>6} {:>6} {:>6} {:>6}",
        "total",
        "",
        data.samples.len(),
        idx.train.len(),
        idx.val.len(),
        idx.test.len()
    );
    let _ = writeln!(out, "multi-label fraction: {:.1}%", 100.0 * data.multi_label_fraction());
    out
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    image: String,
    boxes: Vec<[f64; 4]>,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

pub fn annotations_jsonl(data: &Dataset) -> String {
    let mut out = String::new();
    for (s, split) in data.samples.iter().zip(&data.splits) {
        let rec = Record {
            id: s.id.clone(),
            image: format!("{IMAGE_DIR}/{}.pgm", s.id),
            boxes: s.annotations.iter().map(|a| a.bbox.to_array()).collect(),
            labels: s.annotations.iter().map(|a| a.class.name().to_string()).collect(),
            split: Some(split.as_str().to_string()),
        };
        out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Parsed annotation line: sample id, image path, annotations and split.
pub type AnnotationLine = (String, String, Vec<Annotation>, Split);

/// Lines without a `split` field count as training data.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationLine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::parse(line_no, e.to_string()))?;
        if rec.boxes.len() != rec.labels.len() {
            return Err(Error::parse(
                line_no,
                format!("{} boxes but {} labels", rec.boxes.len(), rec.labels.len()),
            ));
        }
        let mut anns = Vec::with_capacity(rec.boxes.len());
        for (b, l) in rec.boxes.iter().zip(&rec.labels) {
            let class: DefectClass = l.parse().map_err(|_| Error::parse(line_no, format!("unknown label {l:?}")))?;
            let bbox = BBox::new(b[0], b[1], b[2], b[3]);
            if !bbox.is_valid() {
                return Err(Error::parse(line_no, format!("degenerate box {b:?}")));
            }
            anns.push(Annotation { bbox, class });
        }
        let split = match rec.split.as_deref() {
            None => Split::Train,
            Some(s) => s.parse().map_err(|e: Error| Error::parse(line_no, e.to_string()))?,
        };
        out.push((rec.id, rec.image, anns, split));
    }
    Ok(out)
}

pub fn save_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&images).map_err(|e| Error::file(&images, e))?;
    for s in &data.samples {
        s.image.save(images.join(format!("{}.pgm", s.id)))?;
    }
    let path = dir.join(ANNOTATIONS_FILE);
    std::fs::write(&path, annotations_jsonl(data)).map_err(|e| Error::file(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(ANNOTATIONS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let mut samples = Vec::new();
    let mut splits = Vec::new();
    for (id, image, annotations, split) in parse_annotations(&text)? {
        let img_path = dir.join(&image);
        let image = GrayImage::load(&img_path).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Config(format!("{}: line {line}: {msg}", img_path.display())),
            other => other,
        })?;
        for a in &annotations {
            if a.bbox.x1 < 0.0 || a.bbox.y1 < 0.0 || a.bbox.x2 > image.width as f64 || a.bbox.y2 > image.height as f64 {
                return Err(invalid!("sample {id}: box {:?} outside the image", a.bbox));
            }
        }
        samples.push(Sample { id, image, annotations });
        splits.push(split);
    }
    Ok(Dataset { samples, splits })
}
