//! Datasets: manifest-backed grayscale image collections and split views.
//!
//! A dataset is a flat list of records, each one grayscale image with a
//! class id, an acquisition-angle id, and a train/test split tag. Class
//! membership decides the split (no class may appear in both), matching the
//! few-shot convention that test classes are never seen in training.

pub mod pgm;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::DataError;

pub use synth::{calibrate_deviation, nearest_mean_cross_angle_accuracy, synth_generate, SynthSpec};

pub const MANIFEST_HEADER: &str = "path,class_name,class_id,angle_id,split";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Record {
    pub path: String,
    pub class_id: usize,
    pub angle_id: u32,
    pub split: Split,
    /// Pixels in [0,1], row-major, side×side.
    pub pixels: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub side: usize,
    /// Class names indexed by class id.
    pub class_names: Vec<String>,
    pub records: Vec<Record>,
}

/// Borrowed per-class grouping of a subset of a dataset's records.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    pub dataset: &'a Dataset,
    /// (class id, record indices); classes in ascending id order.
    pub classes: Vec<(usize, Vec<usize>)>,
}

impl<'a> DatasetView<'a> {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn min_samples_per_class(&self) -> usize {
        self.classes.iter().map(|(_, v)| v.len()).min().unwrap_or(0)
    }

    /// Every angle id present in this view.
    pub fn angle_ids(&self) -> Vec<u32> {
        let mut angles: Vec<u32> = self
            .classes
            .iter()
            .flat_map(|(_, idxs)| idxs.iter().map(|&i| self.dataset.records[i].angle_id))
            .collect();
        angles.sort_unstable();
        angles.dedup();
        angles
    }
}

impl Dataset {
    /// Group record indices by class for the records matching `split`.
    pub fn view(&self, split: Split) -> DatasetView<'_> {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.split == split {
                by_class.entry(r.class_id).or_default().push(i);
            }
        }
        DatasetView { dataset: self, classes: by_class.into_iter().collect() }
    }

    /// View over all records regardless of stored split.
    pub fn view_all(&self) -> DatasetView<'_> {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            by_class.entry(r.class_id).or_default().push(i);
        }
        DatasetView { dataset: self, classes: by_class.into_iter().collect() }
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.records.is_empty() {
            return Err(DataError::Manifest("no records".into()));
        }
        let c = self.class_names.len();
        let mut split_of_class: Vec<Option<Split>> = vec![None; c];
        for r in &self.records {
            if r.class_id >= c {
                return Err(DataError::Manifest(format!(
                    "class id {} out of range (classes 0..{c})",
                    r.class_id
                )));
            }
            match split_of_class[r.class_id] {
                None => split_of_class[r.class_id] = Some(r.split),
                Some(s) if s != r.split => {
                    return Err(DataError::Manifest(format!(
                        "class {} ({}) appears in both train and test splits",
                        r.class_id, self.class_names[r.class_id]
                    )))
                }
                _ => {}
            }
            if r.pixels.len() != self.side * self.side {
                return Err(DataError::Image(format!(
                    "{}: expected {0}x{0} pixels",
                    self.side
                )));
            }
        }
        if split_of_class.iter().any(|s| s.is_none()) {
            return Err(DataError::Manifest(
                "class ids are not dense in 0..C (a class has no records)".into(),
            ));
        }
        Ok(())
    }
}

/// Class positions reserved for evaluation, following the conventional
/// 10-class ground-target ordering where positions 1, 5, 8 are the 3-way
/// test trio and 1, 5, 7, 8, 9 the 5-way test set. Synthetic classes map to
/// these roles by position.
pub const TEST_POSITIONS_3WAY: [usize; 3] = [1, 5, 8];
pub const TEST_POSITIONS_5WAY: [usize; 5] = [1, 5, 7, 8, 9];

/// Fixed positional class partition for an N-way preset, mixing every angle
/// within each class. Needs ≥8 classes for 3-way (3 test + 7 train from a
/// 10-class pool) and ≥10 for 5-way.
pub fn hybrid_split(
    dataset: &Dataset,
    n_way: usize,
) -> Result<(DatasetView<'_>, DatasetView<'_>), DataError> {
    let c = dataset.class_count();
    let test_positions: &[usize] = match n_way {
        3 => {
            if c < 8 {
                return Err(DataError::Manifest(format!(
                    "3-way preset needs >= 8 classes, dataset has {c}"
                )));
            }
            &TEST_POSITIONS_3WAY
        }
        5 => {
            if c < 10 {
                return Err(DataError::Manifest(format!(
                    "5-way preset needs >= 10 classes, dataset has {c}"
                )));
            }
            &TEST_POSITIONS_5WAY
        }
        _ => {
            return Err(DataError::Manifest(format!(
                "no positional split preset for {n_way}-way"
            )))
        }
    };
    let mut train: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut test: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.records.iter().enumerate() {
        if test_positions.contains(&r.class_id) {
            test.entry(r.class_id).or_default().push(i);
        } else {
            train.entry(r.class_id).or_default().push(i);
        }
    }
    Ok((
        DatasetView { dataset, classes: train.into_iter().collect() },
        DatasetView { dataset, classes: test.into_iter().collect() },
    ))
}

/// Parse a manifest CSV and load every referenced image.
///
/// Pixel values are normalized to [0,1]. All images must be square and of
/// equal side; errors carry the 1-based manifest row number.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| {
        DataError::Manifest(format!("{}: {e}", manifest_path.display()))
    })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == MANIFEST_HEADER => {}
        Some((_, header)) => {
            return Err(DataError::Manifest(format!(
                "row 1: bad header {header:?}, expected {MANIFEST_HEADER:?}"
            )))
        }
        None => return Err(DataError::Manifest("no records".into())),
    }
    let mut names: BTreeMap<usize, String> = BTreeMap::new();
    let mut records = Vec::new();
    let mut side: Option<usize> = None;
    for (idx, line) in lines {
        let row = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(DataError::Manifest(format!(
                "row {row}: expected 5 fields, got {}",
                fields.len()
            )));
        }
        let class_id: usize = fields[2]
            .parse()
            .map_err(|_| DataError::Manifest(format!("row {row}: bad class_id {:?}", fields[2])))?;
        let angle_id: u32 = fields[3]
            .parse()
            .map_err(|_| DataError::Manifest(format!("row {row}: bad angle_id {:?}", fields[3])))?;
        let split = Split::parse(fields[4])
            .ok_or_else(|| DataError::Manifest(format!("row {row}: bad split {:?}", fields[4])))?;
        match names.get(&class_id) {
            Some(existing) if existing != fields[1] => {
                return Err(DataError::Manifest(format!(
                    "row {row}: class {class_id} renamed {existing:?} -> {:?}",
                    fields[1]
                )))
            }
            None => {
                names.insert(class_id, fields[1].to_string());
            }
            _ => {}
        }
        let img_path = dir.join(fields[0]);
        let (w, h, bytes) = pgm::read_pgm(&img_path)
            .map_err(|e| DataError::Manifest(format!("row {row}: {e}")))?;
        if w != h {
            return Err(DataError::Manifest(format!(
                "row {row}: image {w}x{h} is not square"
            )));
        }
        match side {
            None => side = Some(w),
            Some(s) if s != w => {
                return Err(DataError::Manifest(format!(
                    "row {row}: image side {w} differs from {s}"
                )))
            }
            _ => {}
        }
        records.push(Record {
            path: fields[0].to_string(),
            class_id,
            angle_id,
            split,
            pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        });
    }
    if records.is_empty() {
        return Err(DataError::Manifest("no records".into()));
    }
    let max_id = *names.keys().max().unwrap();
    let mut class_names = Vec::with_capacity(max_id + 1);
    for id in 0..=max_id {
        match names.get(&id) {
            Some(n) => class_names.push(n.clone()),
            None => {
                return Err(DataError::Manifest(format!(
                    "class ids are not dense: id {id} missing"
                )))
            }
        }
    }
    let ds = Dataset { side: side.unwrap(), class_names, records };
    ds.validate()?;
    Ok(ds)
}

/// Write a manifest for records whose images already exist under `dir`.
pub fn save_manifest(dataset: &Dataset, manifest_path: &Path) -> Result<(), DataError> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in &dataset.records {
        let name = &dataset.class_names[r.class_id];
        if name.contains(',') || r.path.contains(',') {
            return Err(DataError::Manifest(format!(
                "manifest fields may not contain commas: {name:?} / {:?}",
                r.path
            )));
        }
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.path,
            name,
            r.class_id,
            r.angle_id,
            r.split.as_str()
        ));
    }
    std::fs::write(manifest_path, out)?;
    Ok(())
}

pub fn manifest_path_in(dir: &Path) -> PathBuf {
    dir.join("manifest.csv")
}
