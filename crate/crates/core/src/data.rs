//! CIFAR-10/100 binary readers, named class subsets and label remapping.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::InputShape;

pub const IMAGE_BYTES: usize = 3 * 32 * 32;
pub const DATA_ROOT_ENV: &str = "DDC_DATA_ROOT";

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

pub const CIFAR100_CLASSES: [&str; 100] = [
    "apple", "aquarium_fish", "baby", "bear", "beaver", "bed", "bee", "beetle", "bicycle", "bottle",
    "bowl", "boy", "bridge", "bus", "butterfly", "camel", "can", "castle", "caterpillar", "cattle",
    "chair", "chimpanzee", "clock", "cloud", "cockroach", "couch", "crab", "crocodile", "cup", "dinosaur",
    "dolphin", "elephant", "flatfish", "forest", "fox", "girl", "hamster", "house", "kangaroo", "keyboard",
    "lamp", "lawn_mower", "leopard", "lion", "lizard", "lobster", "man", "maple_tree", "motorcycle", "mountain",
    "mouse", "mushroom", "oak_tree", "orange", "orchid", "otter", "palm_tree", "pear", "pickup_truck", "pine_tree",
    "plain", "plate", "poppy", "porcupine", "possum", "rabbit", "raccoon", "ray", "road", "rocket",
    "rose", "sea", "seal", "shark", "shrew", "skunk", "skyscraper", "snail", "snake", "spider",
    "squirrel", "streetcar", "sunflower", "sweet_pepper", "table", "tank", "telephone", "television", "tiger", "tractor",
    "train", "trout", "tulip", "turtle", "wardrobe", "whale", "willow_tree", "wolf", "woman", "worm",
];

/// CIFAR-100 superclasses in coarse-label order, with their fine labels.
pub const CIFAR100_SUPERCLASSES: [(&str, [&str; 5]); 20] = [
    ("aquatic_mammals", ["beaver", "dolphin", "otter", "seal", "whale"]),
    ("fish", ["aquarium_fish", "flatfish", "ray", "shark", "trout"]),
    ("flowers", ["orchid", "poppy", "rose", "sunflower", "tulip"]),
    ("food_containers", ["bottle", "bowl", "can", "cup", "plate"]),
    ("fruit_and_vegetables", ["apple", "mushroom", "orange", "pear", "sweet_pepper"]),
    ("household_electrical_devices", ["clock", "keyboard", "lamp", "telephone", "television"]),
    ("household_furniture", ["bed", "chair", "couch", "table", "wardrobe"]),
    ("insects", ["bee", "beetle", "butterfly", "caterpillar", "cockroach"]),
    ("large_carnivores", ["bear", "leopard", "lion", "tiger", "wolf"]),
    ("large_man-made_outdoor_things", ["bridge", "castle", "house", "road", "skyscraper"]),
    ("large_natural_outdoor_scenes", ["cloud", "forest", "mountain", "plain", "sea"]),
    ("large_omnivores_and_herbivores", ["camel", "cattle", "chimpanzee", "elephant", "kangaroo"]),
    ("medium_mammals", ["fox", "porcupine", "possum", "raccoon", "skunk"]),
    ("non-insect_invertebrates", ["crab", "lobster", "snail", "spider", "worm"]),
    ("people", ["baby", "boy", "girl", "man", "woman"]),
    ("reptiles", ["crocodile", "dinosaur", "lizard", "snake", "turtle"]),
    ("small_mammals", ["hamster", "mouse", "rabbit", "shrew", "squirrel"]),
    ("trees", ["maple_tree", "oak_tree", "palm_tree", "pine_tree", "willow_tree"]),
    ("vehicles_1", ["bicycle", "bus", "motorcycle", "pickup_truck", "train"]),
    ("vehicles_2", ["lawn_mower", "rocket", "streetcar", "tank", "tractor"]),
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset files missing: {path} not found. {instruction}")]
    Missing { path: String, instruction: String },
    #[error("unknown class {class:?} for {base}")]
    UnknownClass { class: String, base: &'static str },
    #[error("unknown subset {0:?}")]
    UnknownSubset(String),
    #[error("invalid subset {name}: {reason}")]
    InvalidSubset { name: String, reason: String },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("logit width {width} cannot hold class index {index}")]
    Width { width: usize, index: usize },
    #[error("logit buffer of {len} values is not a multiple of width {width}")]
    Ragged { len: usize, width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseDataset {
    Cifar10,
    Cifar100,
}

impl BaseDataset {
    pub fn name(self) -> &'static str {
        match self {
            BaseDataset::Cifar10 => "cifar10",
            BaseDataset::Cifar100 => "cifar100",
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            BaseDataset::Cifar10 => &CIFAR10_CLASSES,
            BaseDataset::Cifar100 => &CIFAR100_CLASSES,
        }
    }

    pub fn class_index(self, name: &str) -> Result<usize, DataError> {
        self.class_names()
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| DataError::UnknownClass {
                class: name.to_string(),
                base: self.name(),
            })
    }

    fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (BaseDataset::Cifar10, Split::Train) => vec![
                "cifar-10-batches-bin/data_batch_1.bin",
                "cifar-10-batches-bin/data_batch_2.bin",
                "cifar-10-batches-bin/data_batch_3.bin",
                "cifar-10-batches-bin/data_batch_4.bin",
                "cifar-10-batches-bin/data_batch_5.bin",
            ],
            (BaseDataset::Cifar10, Split::Test) => vec!["cifar-10-batches-bin/test_batch.bin"],
            (BaseDataset::Cifar100, Split::Train) => vec!["cifar-100-binary/train.bin"],
            (BaseDataset::Cifar100, Split::Test) => vec!["cifar-100-binary/test.bin"],
        }
    }

    /// Label bytes preceding each image.
    fn header_bytes(self) -> usize {
        match self {
            BaseDataset::Cifar10 => 1,
            BaseDataset::Cifar100 => 2,
        }
    }

    fn fetch_instruction(self, root: &Path) -> String {
        let url = match self {
            BaseDataset::Cifar10 => "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
            BaseDataset::Cifar100 => "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
        };
        format!(
            "Download the binary distribution from {url} and extract it into {} \
             (or point {DATA_ROOT_ENV} / data.root at an existing copy; \
             `compressnet synth-data` writes a synthetic stand-in)",
            root.display()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A named, ordered selection of classes from a base dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub base_dataset: BaseDataset,
    pub name: String,
    pub classes: Vec<String>,
}

impl SubsetSpec {
    pub fn new(base_dataset: BaseDataset, name: &str, classes: &[&str]) -> Result<Self, DataError> {
        let spec = SubsetSpec {
            base_dataset,
            name: name.to_string(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
        };
        spec.class_indices()?;
        Ok(spec)
    }

    pub fn full(base: BaseDataset) -> Self {
        SubsetSpec {
            base_dataset: base,
            name: base.name().to_string(),
            classes: base.class_names().iter().map(|c| c.to_string()).collect(),
        }
    }

    /// Original label of every class, in remapped order.
    pub fn class_indices(&self) -> Result<Vec<usize>, DataError> {
        if self.classes.is_empty() {
            return Err(DataError::InvalidSubset {
                name: self.name.clone(),
                reason: "no classes".into(),
            });
        }
        let mut seen = vec![false; self.base_dataset.class_names().len()];
        self.classes
            .iter()
            .map(|c| {
                let i = self.base_dataset.class_index(c)?;
                if std::mem::replace(&mut seen[i], true) {
                    return Err(DataError::InvalidSubset {
                        name: self.name.clone(),
                        reason: format!("class {c} listed twice"),
                    });
                }
                Ok(i)
            })
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Column of each of this subset's classes within the logits of a model
    /// trained on `teacher`.
    pub fn columns_in(&self, teacher: &SubsetSpec) -> Result<Vec<usize>, DataError> {
        if self.base_dataset != teacher.base_dataset {
            return Err(DataError::InvalidSubset {
                name: self.name.clone(),
                reason: format!("teacher trained on {}", teacher.base_dataset.name()),
            });
        }
        self.classes
            .iter()
            .map(|c| {
                teacher.classes.iter().position(|t| t == c).ok_or_else(|| DataError::InvalidSubset {
                    name: self.name.clone(),
                    reason: format!("class {c} not among the teacher's classes"),
                })
            })
            .collect()
    }
}

fn superclass(name: &str) -> &'static [&'static str; 5] {
    &CIFAR100_SUPERCLASSES
        .iter()
        .find(|(n, _)| *n == name)
        .expect("known superclass")
        .1
}

/// The named subsets plus `cifar10` and `cifar100`.
pub fn builtin_subsets() -> HashMap<String, SubsetSpec> {
    let c10 = BaseDataset::Cifar10;
    let c100 = BaseDataset::Cifar100;
    let mut out = vec![
        SubsetSpec::new(c10, "animals", &["bird", "cat", "deer", "dog", "frog", "horse"]),
        SubsetSpec::new(c10, "vehicles10", &["airplane", "automobile", "ship", "truck"]),
    ];
    for (name, superclass_name) in [
        ("insects", "insects"),
        ("fruits", "fruit_and_vegetables"),
        ("trees", "trees"),
        ("vehicles1", "vehicles_1"),
        ("vehicles2", "vehicles_2"),
        ("people", "people"),
        ("reptiles", "reptiles"),
    ] {
        out.push(SubsetSpec::new(c100, name, superclass(superclass_name)));
    }
    let mut map: HashMap<String, SubsetSpec> = out
        .into_iter()
        .map(|s| s.expect("builtin subset"))
        .map(|s| (s.name.clone(), s))
        .collect();
    for base in [c10, c100] {
        map.insert(base.name().to_string(), SubsetSpec::full(base));
    }
    map
}

pub fn subset_by_name(name: &str) -> Result<SubsetSpec, DataError> {
    builtin_subsets()
        .remove(name)
        .ok_or_else(|| DataError::UnknownSubset(name.to_string()))
}

/// Per-channel mean and standard deviation of raw pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// Images and remapped labels of one split. Pixels stay as bytes and are
/// normalized on access.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SubsetSpec,
    pub split: Split,
    pixels: Vec<u8>,
    labels: Vec<usize>,
    original_labels: Vec<usize>,
    norm: Normalization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape::CIFAR
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn original_label(&self, i: usize) -> usize {
        self.original_labels[i]
    }

    pub fn normalization(&self) -> Normalization {
        self.norm
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// Writes the normalized CHW image `i` into `out`.
    pub fn image_into(&self, i: usize, out: &mut [f32]) {
        let raw = self.raw_image(i);
        for c in 0..3 {
            let (m, s) = (self.norm.mean[c], self.norm.std[c]);
            for (o, &v) in out[c * 1024..(c + 1) * 1024].iter_mut().zip(&raw[c * 1024..(c + 1) * 1024]) {
                *o = (v as f32 - m) / s;
            }
        }
    }

    pub fn image(&self, i: usize) -> Vec<f32> {
        let mut out = vec![0.0; IMAGE_BYTES];
        self.image_into(i, &mut out);
        out
    }

    /// Horizontally flipped copy of image `i`, normalized.
    pub fn flipped_image_into(&self, i: usize, out: &mut [f32]) {
        self.image_into(i, out);
        for row in out.chunks_exact_mut(32) {
            row.reverse();
        }
    }

    fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in indices {
            pixels.extend_from_slice(self.raw_image(i));
        }
        Dataset {
            spec: self.spec.clone(),
            split: self.split,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            original_labels: indices.iter().map(|&i| self.original_labels[i]).collect(),
            norm: self.norm,
        }
    }

    /// The same examples in a seeded random order.
    pub fn shuffled(&self, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.select(&idx)
    }

    /// The first `per_class` examples of each class, in file order.
    pub fn take_per_class(&self, per_class: usize) -> Dataset {
        let mut counts = vec![0usize; self.num_classes()];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut counts[self.labels[i]];
                *c += 1;
                *c <= per_class
            })
            .collect();
        self.select(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_records(base: BaseDataset, split: Split, root: &Path) -> Result<(Vec<u8>, Vec<usize>), DataError> {
    let header = base.header_bytes();
    let record = header + IMAGE_BYTES;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for rel in base.files(split) {
        let path = root.join(rel);
        if !path.exists() {
            return Err(DataError::Missing {
                path: path.display().to_string(),
                instruction: base.fetch_instruction(root),
            });
        }
        let bytes = fs::read(&path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if bytes.len() % record != 0 {
            return Err(DataError::Format {
                path: path.display().to_string(),
                reason: format!("{} bytes is not a whole number of {record}-byte records", bytes.len()),
            });
        }
        let n_classes = base.class_names().len();
        for rec in bytes.chunks_exact(record) {
            // CIFAR-100 records start with the coarse label, then the fine one.
            let label = rec[header - 1] as usize;
            if label >= n_classes {
                return Err(DataError::Format {
                    path: path.display().to_string(),
                    reason: format!("label {label} out of range"),
                });
            }
            labels.push(label);
            pixels.extend_from_slice(&rec[header..]);
        }
    }
    Ok((pixels, labels))
}

fn channel_stats(pixels: &[u8]) -> Normalization {
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    for img in pixels.chunks_exact(IMAGE_BYTES) {
        for c in 0..3 {
            for &v in &img[c * 1024..(c + 1) * 1024] {
                let v = v as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let n = (pixels.len() / 3).max(1) as f64;
    let mut norm = Normalization { mean: [0.0; 3], std: [1.0; 3] };
    for c in 0..3 {
        let mean = sum[c] / n;
        let var = (sq[c] / n - mean * mean).max(0.0);
        norm.mean[c] = mean as f32;
        norm.std[c] = var.sqrt().max(1e-3) as f32;
    }
    norm
}

type StatsKey = (PathBuf, BaseDataset);

fn stats_cache() -> &'static Mutex<HashMap<StatsKey, Normalization>> {
    static CACHE: OnceLock<Mutex<HashMap<StatsKey, Normalization>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Channel statistics of the full training split of `base` under `root`.
pub fn training_statistics(base: BaseDataset, root: &Path) -> Result<Normalization, DataError> {
    let key = (root.to_path_buf(), base);
    if let Some(n) = stats_cache().lock().expect("stats cache").get(&key) {
        return Ok(*n);
    }
    let (pixels, _) = read_records(base, Split::Train, root)?;
    let norm = channel_stats(&pixels);
    stats_cache().lock().expect("stats cache").insert(key, norm);
    Ok(norm)
}

/// Loads the examples of `spec`'s classes with labels remapped to positions
/// in `spec.classes`, normalized with full-training-split statistics.
pub fn load_split(spec: &SubsetSpec, split: Split, root: &Path) -> Result<Dataset, DataError> {
    let columns = spec.class_indices()?;
    let mut remap = vec![None; spec.base_dataset.class_names().len()];
    for (new, &orig) in columns.iter().enumerate() {
        remap[orig] = Some(new);
    }
    let (all_pixels, all_labels) = read_records(spec.base_dataset, split, root)?;
    let norm = match split {
        Split::Train => {
            let key = (root.to_path_buf(), spec.base_dataset);
            let norm = channel_stats(&all_pixels);
            stats_cache().lock().expect("stats cache").insert(key, norm);
            norm
        }
        Split::Test => training_statistics(spec.base_dataset, root)?,
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut original_labels = Vec::new();
    for (i, &orig) in all_labels.iter().enumerate() {
        if let Some(new) = remap[orig] {
            pixels.extend_from_slice(&all_pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]);
            labels.push(new);
            original_labels.push(orig);
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        split,
        pixels,
        labels,
        original_labels,
        norm,
    })
}

/// Dataset root from `DDC_DATA_ROOT`, falling back to `configured`.
pub fn resolve_root(configured: Option<&Path>) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => configured.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("data")),
    }
}

/// Selects `columns` from each row of a row-major logit buffer.
pub fn select_columns(logits: &[f32], width: usize, columns: &[usize]) -> Result<Vec<f32>, DataError> {
    if width == 0 || logits.len() % width != 0 {
        return Err(DataError::Ragged { len: logits.len(), width });
    }
    if let Some(&index) = columns.iter().find(|&&c| c >= width) {
        return Err(DataError::Width { width, index });
    }
    Ok(logits
        .chunks_exact(width)
        .flat_map(|row| columns.iter().map(move |&c| row[c]))
        .collect())
}

/// Restricts full-dataset teacher logits to the columns of `spec`.
pub fn restrict_teacher_logits(logits: &[f32], width: usize, spec: &SubsetSpec) -> Result<Vec<f32>, DataError> {
    select_columns(logits, width, &spec.class_indices()?)
}

/// Writers for synthetic stand-ins in the CIFAR binary layouts. Each class
/// is an oriented sinusoidal grating with a random phase, a faint class
/// tint and pixel noise, so a small CNN can learn it but not trivially.
pub mod synth {
    use super::*;
    use std::io::Write;

    fn class_image(class: usize, n_classes: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<u8> {
        let angle = std::f64::consts::PI * class as f64 / n_classes as f64;
        let freq = 2.0 + (class % 3) as f64;
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let (ca, sa) = (angle.cos(), angle.sin());
        let mut img = vec![0u8; IMAGE_BYTES];
        for c in 0..3 {
            let tint = 12.0 * (((class + c) % 3) as f64 - 1.0);
            for y in 0..32 {
                for x in 0..32 {
                    let u = (x as f64 * ca + y as f64 * sa) / 32.0;
                    let v = 128.0 + tint + 55.0 * (std::f64::consts::TAU * freq * u + phase).sin() + noise.sample(rng);
                    img[c * 1024 + y * 32 + x] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        img
    }

    fn write(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
        let mut f = fs::File::create(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        f.write_all(bytes).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    fn records(base: BaseDataset, per_class: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
        let n_classes = base.class_names().len();
        let noise = Normal::new(0.0, 40.0).expect("valid normal");
        let coarse: Vec<u8> = (0..n_classes)
            .map(|fine| {
                let name = base.class_names()[fine];
                CIFAR100_SUPERCLASSES
                    .iter()
                    .position(|(_, members)| members.contains(&name))
                    .unwrap_or(0) as u8
            })
            .collect();
        // Interleave classes so every batch file holds every class.
        let mut out = Vec::with_capacity(per_class * n_classes);
        for _ in 0..per_class {
            for class in 0..n_classes {
                let mut rec = Vec::with_capacity(IMAGE_BYTES + 2);
                if base == BaseDataset::Cifar100 {
                    rec.push(coarse[class]);
                }
                rec.push(class as u8);
                rec.extend(class_image(class, n_classes, rng, &noise));
                out.push(rec);
            }
        }
        out
    }

    /// Writes `per_class_train` and `per_class_test` synthetic images per
    /// class under `root` in the layout [`load_split`] reads.
    pub fn write_dataset(
        base: BaseDataset,
        root: &Path,
        per_class_train: usize,
        per_class_test: usize,
        seed: u64,
    ) -> Result<(), DataError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = records(base, per_class_train, &mut rng);
        let test = records(base, per_class_test, &mut rng);
        let train_files = base.files(Split::Train);
        let dir = root.join(Path::new(train_files[0]).parent().expect("nested path"));
        fs::create_dir_all(&dir).map_err(|source| DataError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let chunk = train.len().div_ceil(train_files.len()).max(1);
        let mut parts = train.chunks(chunk);
        for rel in &train_files {
            let bytes: Vec<u8> = parts.next().unwrap_or(&[]).concat();
            write(&root.join(rel), &bytes)?;
        }
        write(&root.join(base.files(Split::Test)[0]), &test.concat())?;
        stats_cache()
            .lock()
            .expect("stats cache")
            .remove(&(root.to_path_buf(), base));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_tables() {
        let mut fine: Vec<&str> = CIFAR100_SUPERCLASSES.iter().flat_map(|(_, m)| m.iter().copied()).collect();
        fine.sort_unstable();
        let mut all = CIFAR100_CLASSES.to_vec();
        all.sort_unstable();
        assert_eq!(fine, all);
        assert_eq!(CIFAR100_CLASSES.len(), 100);
        let mut sorted = CIFAR100_CLASSES.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, CIFAR100_CLASSES.to_vec());
    }

    #[test]
    fn builtins() {
        let b = builtin_subsets();
        assert_eq!(b.len(), 11);
        assert_eq!(b["animals"].num_classes(), 6);
        assert_eq!(b["vehicles10"].num_classes(), 4);
        for name in ["insects", "fruits", "trees", "vehicles1", "vehicles2", "people", "reptiles"] {
            assert_eq!(b[name].num_classes(), 5, "{name}");
            assert_eq!(b[name].base_dataset, BaseDataset::Cifar100);
        }
        assert_eq!(b["fruits"].classes, ["apple", "mushroom", "orange", "pear", "sweet_pepper"]);
        assert_eq!(b["cifar100"].num_classes(), 100);
        assert_eq!(b["animals"].class_indices().unwrap(), [2, 3, 4, 5, 6, 7]);
        assert!(subset_by_name("nope").is_err());
        assert!(SubsetSpec::new(BaseDataset::Cifar10, "x", &["cat", "cat"]).is_err());
        assert!(SubsetSpec::new(BaseDataset::Cifar10, "x", &["unicorn"]).is_err());
    }

    #[test]
    fn restrict() {
        let row: Vec<f32> = (0..10).map(|v| v as f32).collect();
        let full = SubsetSpec::full(BaseDataset::Cifar10);
        assert_eq!(restrict_teacher_logits(&row, 10, &full).unwrap(), row);
        let animals = subset_by_name("animals").unwrap();
        assert_eq!(restrict_teacher_logits(&row, 10, &animals).unwrap(), vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert!(restrict_teacher_logits(&row[..5], 5, &animals).is_err());
        assert!(select_columns(&row[..7], 2, &[0]).is_err());

        let pair = SubsetSpec::new(BaseDataset::Cifar10, "pair", &["ship", "airplane"]).unwrap();
        let vehicles = subset_by_name("vehicles10").unwrap();
        assert_eq!(pair.columns_in(&vehicles).unwrap(), [2, 0]);
        assert!(animals.columns_in(&vehicles).is_err());
    }

    #[test]
    fn missing_files_explain_fetch() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_split(&SubsetSpec::full(BaseDataset::Cifar10), Split::Train, dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, DataError::Missing { .. }));
        assert!(msg.contains("cifar-10-binary.tar.gz"), "{msg}");
    }

    #[test]
    fn synthetic_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        synth::write_dataset(BaseDataset::Cifar10, dir.path(), 7, 3, 1).unwrap();
        let full = load_split(&SubsetSpec::full(BaseDataset::Cifar10), Split::Train, dir.path()).unwrap();
        assert_eq!(full.len(), 70);
        assert_eq!(full.class_counts(), vec![7; 10]);
        let animals = subset_by_name("animals").unwrap();
        let test = load_split(&animals, Split::Test, dir.path()).unwrap();
        assert_eq!(test.len(), 18);
        for i in 0..test.len() {
            assert_eq!(animals.classes[test.label(i)], CIFAR10_CLASSES[test.original_label(i)]);
        }
        // Subsets reuse the full-split statistics.
        assert_eq!(test.normalization(), full.normalization());
        let x = full.image(0);
        let mean: f32 = x.iter().sum::<f32>() / x.len() as f32;
        assert!(mean.abs() < 1.0);

        let a = full.shuffled(4);
        let b = full.shuffled(4);
        assert_eq!(a.labels(), b.labels());
        assert_ne!(a.labels(), full.labels());
        assert_eq!(full.take_per_class(2).class_counts(), vec![2; 10]);
    }

    #[test]
    fn synthetic_cifar100_labels() {
        let dir = tempfile::tempdir().unwrap();
        synth::write_dataset(BaseDataset::Cifar100, dir.path(), 1, 1, 2).unwrap();
        let people = subset_by_name("people").unwrap();
        let d = load_split(&people, Split::Train, dir.path()).unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.labels(), [0, 1, 2, 3, 4]);
        let raw = fs::read(dir.path().join("cifar-100-binary/train.bin")).unwrap();
        let baby = BaseDataset::Cifar100.class_index("baby").unwrap();
        assert_eq!(raw[baby * (IMAGE_BYTES + 2)], 14);
    }

    #[test]
    fn flip_reverses_rows() {
        let dir = tempfile::tempdir().unwrap();
        synth::write_dataset(BaseDataset::Cifar10, dir.path(), 1, 1, 3).unwrap();
        let d = load_split(&SubsetSpec::full(BaseDataset::Cifar10), Split::Test, dir.path()).unwrap();
        let x = d.image(0);
        let mut f = vec![0.0; IMAGE_BYTES];
        d.flipped_image_into(0, &mut f);
        assert_eq!(f[0], x[31]);
        assert_eq!(f[1024 + 32 * 5 + 2], x[1024 + 32 * 5 + 29]);
    }
}
