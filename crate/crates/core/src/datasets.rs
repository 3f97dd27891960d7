//! Open-world datasets: synthetic mixtures, the seen/novel split, class
//! imbalance, CSV ingestion and the binary dataset container.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Feature matrix plus the transductive open-world partition.
///
/// Seen head `h` is bound to `seen_classes[h]`; `seen_classes` is kept in
/// ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenWorldDataset {
    pub features: Matrix,
    /// Ground-truth class per row. Only labeled rows may be used for training.
    pub labels: Vec<usize>,
    pub labeled_mask: Vec<bool>,
    pub seen_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
}

impl OpenWorldDataset {
    /// Assembles a dataset and checks every structural invariant.
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        labeled_mask: Vec<bool>,
        seen_classes: Vec<usize>,
        novel_classes: Vec<usize>,
    ) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            labeled_mask,
            seen_classes,
            novel_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if self.labels.len() != n || self.labeled_mask.len() != n {
            return Err(Error::usage(format!(
                "dataset has {n} rows but {} labels and {} mask entries",
                self.labels.len(),
                self.labeled_mask.len()
            )));
        }
        let seen: BTreeSet<usize> = self.seen_classes.iter().copied().collect();
        let novel: BTreeSet<usize> = self.novel_classes.iter().copied().collect();
        if seen.len() != self.seen_classes.len() || novel.len() != self.novel_classes.len() {
            return Err(Error::usage("class sets contain duplicates"));
        }
        if !self.seen_classes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::usage("seen classes must be in ascending order"));
        }
        if seen.intersection(&novel).next().is_some() {
            return Err(Error::usage("seen and novel class sets overlap"));
        }
        for (i, (&y, &labeled)) in self.labels.iter().zip(&self.labeled_mask).enumerate() {
            if labeled && !seen.contains(&y) {
                return Err(Error::usage(format!(
                    "labeled row {i} has class {y}, which is not a seen class"
                )));
            }
            if !seen.contains(&y) && !novel.contains(&y) {
                return Err(Error::usage(format!(
                    "row {i} has class {y}, which is neither seen nor novel"
                )));
            }
        }
        if self.num_labeled() == 0 || self.num_unlabeled() == 0 {
            return Err(Error::usage(
                "dataset needs at least one labeled and one unlabeled row",
            ));
        }
        Ok(())
    }

    pub fn num_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled_mask.iter().filter(|&&m| m).count()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.num_rows() - self.num_labeled()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.num_rows()).filter(|&i| self.labeled_mask[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.num_rows()).filter(|&i| !self.labeled_mask[i]).collect()
    }

    /// Head index bound to a seen class.
    pub fn seen_head_of(&self, class: usize) -> Option<usize> {
        self.seen_classes.binary_search(&class).ok()
    }

    /// Per-row supervised target: the seen head for labeled rows, `None` otherwise.
    pub fn training_targets(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .zip(&self.labeled_mask)
            .map(|(&y, &m)| if m { self.seen_head_of(y) } else { None })
            .collect()
    }

    /// Number of rows per class id, in ascending id order.
    pub fn class_sizes(&self) -> BTreeMap<usize, usize> {
        class_counts(&self.labels)
    }
}

fn class_counts(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub seen_class_fraction: f64,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seen_class_fraction: 0.5,
            labeled_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("seen_class_fraction", self.seen_class_fraction),
            ("labeled_fraction", self.labeled_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::usage(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Samples an isotropic Gaussian mixture with rows grouped by class.
///
/// Class means are drawn uniformly on a sphere and rejected until every pair
/// is at least `separation · cluster_std` apart; the sphere radius starts at
/// `separation · cluster_std` and grows by 10% whenever 1000 draws in a row fail.
pub fn generate_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    cluster_std: f64,
    rng: &mut Rng,
) -> Result<(Matrix, Vec<usize>)> {
    if num_classes < 2 {
        return Err(Error::usage("num_classes must be at least 2"));
    }
    if dim == 0 {
        return Err(Error::usage("dim must be at least 1"));
    }
    if per_class == 0 {
        return Err(Error::usage("per_class must be at least 1"));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::usage("separation must be a finite value >= 0"));
    }
    if !(cluster_std > 0.0) || !cluster_std.is_finite() {
        return Err(Error::usage("cluster_std must be > 0"));
    }
    if dim == 1 && num_classes > 2 && separation > 0.0 {
        // A 0-sphere only has two points.
        return Err(Error::usage(
            "dim 1 supports at most 2 separated classes",
        ));
    }

    let min_dist = separation * cluster_std;
    let mut radius = min_dist.max(cluster_std);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut failures = 0usize;
    while means.len() < num_classes {
        let candidate = random_on_sphere(dim, radius, rng);
        let ok = means.iter().all(|m| {
            let d2: f64 = m.iter().zip(&candidate).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() >= min_dist
        });
        if ok {
            means.push(candidate);
            failures = 0;
        } else {
            failures += 1;
            if failures >= 1000 {
                radius *= 1.1;
                means.clear();
                failures = 0;
            }
        }
    }

    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &mu in mean {
                data.push(mu + cluster_std * rng.normal());
            }
            labels.push(k);
        }
    }
    Ok((Matrix::from_vec(n, dim, data)?, labels))
}

fn random_on_sphere(dim: usize, radius: f64, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = crate::numerics::norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| radius * x / n).collect();
        }
    }
}

/// Partitions classes into seen/novel and marks a stratified labeled subset.
///
/// `⌈seen_class_fraction · K⌉` classes (clamped to `[1, K-1]`) of a seeded
/// class shuffle become seen. Within each seen class `round(labeled_fraction · n_c)`
/// rows, clamped to `[1, n_c - 1]`, are labeled.
pub fn apply_open_world_split(
    features: Matrix,
    labels: Vec<usize>,
    cfg: &SplitConfig,
) -> Result<OpenWorldDataset> {
    cfg.validate()?;
    if labels.len() != features.rows() {
        return Err(Error::usage(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    let counts = class_counts(&labels);
    let k = counts.len();
    if k < 2 {
        return Err(Error::usage(format!(
            "open-world split needs at least 2 classes, found {k}"
        )));
    }

    let mut rng = Rng::new(cfg.seed);
    let mut classes: Vec<usize> = counts.keys().copied().collect();
    rng.shuffle(&mut classes);
    let num_seen = ((cfg.seen_class_fraction * k as f64).ceil() as usize).clamp(1, k - 1);
    let mut seen: Vec<usize> = classes[..num_seen].to_vec();
    let mut novel: Vec<usize> = classes[num_seen..].to_vec();
    seen.sort_unstable();
    novel.sort_unstable();

    let mut labeled_mask = vec![false; labels.len()];
    for &c in &seen {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let n_c = rows.len();
        if n_c < 2 {
            return Err(Error::usage(format!(
                "seen class {c} has {n_c} row(s); at least 2 are needed to split it"
            )));
        }
        let take = ((cfg.labeled_fraction * n_c as f64).round() as usize).clamp(1, n_c - 1);
        rng.shuffle(&mut rows);
        for &i in &rows[..take] {
            labeled_mask[i] = true;
        }
    }

    OpenWorldDataset::new(features, labels, labeled_mask, seen, novel)
}

/// Long-tailed subsampling: the class of rank `k` (ascending id) keeps
/// `round(n_max · ratio^(-k/(K-1)))` rows, at least 1 and at most its size.
/// Kept rows stay in their original order and are not modified.
pub fn apply_exponential_imbalance(
    features: &Matrix,
    labels: &[usize],
    imbalance_ratio: f64,
    rng: &mut Rng,
) -> Result<(Matrix, Vec<usize>)> {
    if !(imbalance_ratio >= 1.0) || !imbalance_ratio.is_finite() {
        return Err(Error::usage(format!(
            "imbalance_ratio must be >= 1, got {imbalance_ratio}"
        )));
    }
    if labels.len() != features.rows() {
        return Err(Error::usage("labels and feature rows differ in length"));
    }
    let counts = class_counts(labels);
    let k = counts.len();
    let n_max = counts.values().copied().max().unwrap_or(0);
    let mut keep = vec![false; labels.len()];
    for (rank, (&class, &size)) in counts.iter().enumerate() {
        let target = if k <= 1 {
            size
        } else {
            let exponent = -(rank as f64) / (k as f64 - 1.0);
            ((n_max as f64 * imbalance_ratio.powf(exponent)).round() as usize).clamp(1, size)
        };
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rng.shuffle(&mut rows);
        for &i in &rows[..target] {
            keep[i] = true;
        }
    }
    let kept: Vec<usize> = (0..labels.len()).filter(|&i| keep[i]).collect();
    let new_labels = kept.iter().map(|&i| labels[i]).collect();
    Ok((features.select_rows(&kept), new_labels))
}

/// Per-feature z-scoring in place. Constant columns are only centered.
pub fn standardize_features(features: &mut Matrix) {
    let (n, d) = features.shape();
    if n == 0 {
        return;
    }
    for c in 0..d {
        let col = features.column(c);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for r in 0..n {
            let v = features.get(r, c) - mean;
            features.set(r, c, if sd > 0.0 { v / sd } else { v });
        }
    }
}

/// How the label column of a CSV file is selected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularData {
    pub features: Matrix,
    /// Dense class ids in first-appearance order.
    pub labels: Vec<usize>,
    /// `class_names[id]` is the raw label text for class `id`.
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
}

/// Reads a comma-separated file. Every non-label column must hold finite reals.
/// Rows and columns in error messages are 1-based as shown in a text editor,
/// counting the header line when present.
pub fn load_tabular_csv(
    path: impl AsRef<Path>,
    label_column: &LabelColumn,
    has_header: bool,
) -> Result<TabularData> {
    let file = File::open(path.as_ref())?;
    read_tabular_csv(file, label_column, has_header)
}

pub fn read_tabular_csv<R: Read>(
    reader: R,
    label_column: &LabelColumn,
    has_header: bool,
) -> Result<TabularData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let header: Option<Vec<String>> = if has_header {
        Some(rdr.headers()?.iter().map(str::to_owned).collect())
    } else {
        None
    };

    let label_idx = match (label_column, &header) {
        (LabelColumn::Index(i), _) => *i,
        (LabelColumn::Name(name), Some(h)) => h.iter().position(|c| c == name).ok_or_else(|| {
            Error::usage(format!("label column {name:?} not found in header"))
        })?,
        (LabelColumn::Name(name), None) => {
            return Err(Error::usage(format!(
                "label column {name:?} given by name but the file has no header"
            )))
        }
    };

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let mut width: Option<usize> = header.as_ref().map(|h| h.len());
    let row_offset = if has_header { 2 } else { 1 };

    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row_no = r + row_offset;
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Parse {
                row: row_no,
                column: record.len().min(w) + 1,
                message: format!("expected {w} fields, found {}", record.len()),
            });
        }
        if label_idx >= w {
            return Err(Error::usage(format!(
                "label column index {label_idx} out of range for {w} columns"
            )));
        }
        for (c, cell) in record.iter().enumerate() {
            if c == label_idx {
                let next = class_names.len();
                let id = *class_ids.entry(cell.to_owned()).or_insert_with(|| {
                    class_names.push(cell.to_owned());
                    next
                });
                labels.push(id);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: row_no,
                column: c + 1,
                message: format!("cannot parse {cell:?} as a real number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: row_no,
                    column: c + 1,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            data.push(v);
        }
    }

    let n = labels.len();
    let w = width.unwrap_or(0);
    if n > 0 && label_idx >= w {
        return Err(Error::usage(format!(
            "label column index {label_idx} out of range for {w} columns"
        )));
    }
    let d = w.saturating_sub(1);
    let feature_names = match header {
        Some(h) => h
            .into_iter()
            .enumerate()
            .filter(|&(i, _)| i != label_idx)
            .map(|(_, s)| s)
            .collect(),
        None => (0..w).filter(|&i| i != label_idx).map(|i| format!("x{i}")).collect(),
    };
    Ok(TabularData {
        features: Matrix::from_vec(n, d, data)?,
        labels,
        class_names,
        feature_names,
    })
}

const DATASET_MAGIC: &[u8; 4] = b"OWDS";
pub const DATASET_FORMAT_VERSION: u8 = 1;

/// Writes the binary dataset container.
///
/// Layout (all integers `u64` little-endian, reals IEEE-754 `f64` little-endian):
///
/// ```text
/// "OWDS" | version: u8 | rows | cols | features[rows·cols] (row-major)
/// | labels[rows] | mask[rows] (one byte, 0/1)
/// | n_seen | seen[n_seen] | n_novel | novel[n_novel]
/// ```
pub fn write_dataset<W: Write>(ds: &OpenWorldDataset, mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&[DATASET_FORMAT_VERSION])?;
    let put = |w: &mut W, v: u64| w.write_all(&v.to_le_bytes());
    put(&mut w, ds.features.rows() as u64)?;
    put(&mut w, ds.features.cols() as u64)?;
    for v in ds.features.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    for &y in &ds.labels {
        put(&mut w, y as u64)?;
    }
    let mask: Vec<u8> = ds.labeled_mask.iter().map(|&m| m as u8).collect();
    w.write_all(&mask)?;
    for set in [&ds.seen_classes, &ds.novel_classes] {
        put(&mut w, set.len() as u64)?;
        for &c in set {
            put(&mut w, c as u64)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<OpenWorldDataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated dataset header".into()))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {} (expected {DATASET_FORMAT_VERSION})",
            version[0]
        )));
    }
    let mut buf = [0u8; 8];
    let mut get = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated dataset file".into()))?;
        Ok(u64::from_le_bytes(buf))
    };
    let rows = get(&mut r)? as usize;
    let cols = get(&mut r)? as usize;
    let cells = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("dataset dimensions overflow".into()))?;
    let mut data = Vec::with_capacity(cells);
    for _ in 0..cells {
        data.push(f64::from_bits(get(&mut r)?));
    }
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        labels.push(get(&mut r)? as usize);
    }
    let mut mask = vec![0u8; rows];
    r.read_exact(&mut mask)
        .map_err(|_| Error::Format("truncated dataset mask".into()))?;
    let mut sets = Vec::with_capacity(2);
    for _ in 0..2 {
        let len = get(&mut r)? as usize;
        let mut set = Vec::with_capacity(len.min(1 << 20));
        for _ in 0..len {
            set.push(get(&mut r)? as usize);
        }
        sets.push(set);
    }
    let novel = sets.pop().unwrap_or_default();
    let seen = sets.pop().unwrap_or_default();
    let ds = OpenWorldDataset {
        features: Matrix::from_vec(rows, cols, data)?,
        labels,
        labeled_mask: mask.into_iter().map(|b| b != 0).collect(),
        seen_classes: seen,
        novel_classes: novel,
    };
    ds.validate().map_err(|e| Error::Format(format!("invalid dataset: {e}")))?;
    Ok(ds)
}

pub fn save_dataset(ds: &OpenWorldDataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(ds, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<OpenWorldDataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{kmeans, matched_accuracy};
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn mixture_counts_and_determinism() {
        let (x, y) = generate_gaussian_mixture(2, 2, 10, 8.0, 1.0, &mut Rng::new(1)).unwrap();
        assert_eq!(x.shape(), (20, 2));
        let counts = class_counts(&y);
        assert_eq!(counts.get(&0), Some(&10));
        assert_eq!(counts.get(&1), Some(&10));
        let (x2, y2) = generate_gaussian_mixture(2, 2, 10, 8.0, 1.0, &mut Rng::new(1)).unwrap();
        assert_eq!(x, x2);
        assert_eq!(y, y2);
        assert!(generate_gaussian_mixture(2, 0, 10, 8.0, 1.0, &mut Rng::new(1)).is_err());
        assert!(generate_gaussian_mixture(2, 2, 0, 8.0, 1.0, &mut Rng::new(1)).is_err());
        assert!(generate_gaussian_mixture(1, 2, 5, 8.0, 1.0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn mixture_means_are_separated() {
        let (x, y) = generate_gaussian_mixture(6, 2, 400, 8.0, 1.0, &mut Rng::new(9)).unwrap();
        let mut means = vec![[0.0f64; 2]; 6];
        for (r, &c) in y.iter().enumerate() {
            means[c][0] += x.get(r, 0) / 400.0;
            means[c][1] += x.get(r, 1) / 400.0;
        }
        for a in 0..6 {
            for b in a + 1..6 {
                let d = ((means[a][0] - means[b][0]).powi(2) + (means[a][1] - means[b][1]).powi(2)).sqrt();
                // sample means wander by about 1/sqrt(400) per axis
                assert!(d > 8.0 - 0.5, "classes {a},{b} at distance {d}");
            }
        }
    }

    #[test]
    fn kmeans_recovers_separable_mixture() {
        let (x, y) = generate_gaussian_mixture(3, 2, 100, 8.0, 1.0, &mut Rng::new(5)).unwrap();
        let km = kmeans(&x, 3, 100, 5, &mut Rng::new(6)).unwrap();
        let acc = matched_accuracy(&km.assignments, &y).unwrap().accuracy;
        assert!(acc >= 0.99, "k-means accuracy {acc}");
    }

    #[test]
    fn split_paper_fractions() {
        let (x, y) = generate_gaussian_mixture(10, 3, 20, 4.0, 1.0, &mut Rng::new(2)).unwrap();
        let ds = apply_open_world_split(x.clone(), y.clone(), &SplitConfig::default()).unwrap();
        assert_eq!(ds.seen_classes.len(), 5);
        assert_eq!(ds.novel_classes.len(), 5);
        for &c in &ds.seen_classes {
            let labeled = (0..ds.num_rows()).filter(|&i| ds.labels[i] == c && ds.labeled_mask[i]).count();
            assert_eq!(labeled, 10);
        }
        let cfg = SplitConfig { labeled_fraction: 0.1, ..SplitConfig::default() };
        let ds = apply_open_world_split(x, y, &cfg).unwrap();
        for &c in &ds.seen_classes {
            let labeled = (0..ds.num_rows()).filter(|&i| ds.labels[i] == c && ds.labeled_mask[i]).count();
            assert_eq!(labeled, 2);
        }
    }

    #[test]
    fn split_small_counts() {
        let x = Matrix::zeros(8, 1);
        let y = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let ds = apply_open_world_split(x, y, &SplitConfig::default()).unwrap();
        assert_eq!(ds.num_labeled(), 2);
        assert_eq!(ds.num_unlabeled(), 6);
    }

    #[test]
    fn split_rejects_tiny_seen_class_and_single_class() {
        let x = Matrix::zeros(3, 1);
        assert!(apply_open_world_split(x.clone(), vec![0, 0, 0], &SplitConfig::default()).is_err());
        // both classes singletons: whichever becomes seen cannot be split
        let x = Matrix::zeros(2, 1);
        let err = apply_open_world_split(x, vec![0, 1], &SplitConfig::default()).unwrap_err();
        assert!(err.is_usage());
        let bad = SplitConfig { labeled_fraction: 1.0, ..SplitConfig::default() };
        assert!(apply_open_world_split(Matrix::zeros(4, 1), vec![0, 0, 1, 1], &bad).is_err());
    }

    #[test]
    fn imbalance_examples() {
        let x = Matrix::from_vec(200, 1, (0..200).map(f64::from).collect()).unwrap();
        let y: Vec<usize> = (0..200).map(|i| i / 100).collect();
        let (x2, y2) = apply_exponential_imbalance(&x, &y, 10.0, &mut Rng::new(0)).unwrap();
        let c = class_counts(&y2);
        assert_eq!((c[&0], c[&1]), (100, 10));
        // subsampling only: every kept row is an original row
        for (r, &yy) in y2.iter().enumerate() {
            let v = x2.get(r, 0) as usize;
            assert_eq!(y[v], yy);
        }

        let y3: Vec<usize> = (0..3000).map(|i| i / 1000).collect();
        let x3 = Matrix::zeros(3000, 1);
        let (_, y4) = apply_exponential_imbalance(&x3, &y3, 10.0, &mut Rng::new(0)).unwrap();
        let c = class_counts(&y4);
        assert_eq!((c[&0], c[&1], c[&2]), (1000, 316, 100));

        let (x5, y5) = apply_exponential_imbalance(&x, &y, 1.0, &mut Rng::new(0)).unwrap();
        assert_eq!((x5, y5), (x.clone(), y.clone()));
        assert!(apply_exponential_imbalance(&x, &y, 0.5, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn csv_loading() {
        let text = "f1,f2,label\n1.0,2.0,a\n3.5,-1,b\n0,0,a\n";
        let t = read_tabular_csv(text.as_bytes(), &LabelColumn::Name("label".into()), true).unwrap();
        assert_eq!(t.features.shape(), (3, 2));
        assert_eq!(t.features.as_slice(), &[1.0, 2.0, 3.5, -1.0, 0.0, 0.0]);
        assert_eq!(t.labels, vec![0, 1, 0]);
        assert_eq!(t.class_names, vec!["a", "b"]);
        assert_eq!(t.feature_names, vec!["f1", "f2"]);

        let noheader = "a,1.0,2.0\nb,3.0,4.0\n";
        let t = read_tabular_csv(noheader.as_bytes(), &LabelColumn::Index(0), false).unwrap();
        assert_eq!(t.features.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.labels, vec![0, 1]);

        let nan = "f1,f2,label\n1.0,NaN,a\n";
        match read_tabular_csv(nan.as_bytes(), &LabelColumn::Name("label".into()), true) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("expected parse error, got {other:?}"),
        }
        let junk = "1.0,x,a\n";
        assert!(matches!(
            read_tabular_csv(junk.as_bytes(), &LabelColumn::Index(2), false),
            Err(Error::Parse { row: 1, column: 2, .. })
        ));
        assert!(matches!(
            read_tabular_csv(text.as_bytes(), &LabelColumn::Name("cls".into()), true),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn standardize_centers_and_scales() {
        let mut m = Matrix::from_rows(&[[1.0, 5.0], [3.0, 5.0]]).unwrap();
        standardize_features(&mut m);
        assert_eq!(m.as_slice(), &[-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn container_round_trip_and_corruption() {
        let (x, y) = generate_gaussian_mixture(4, 3, 5, 4.0, 1.0, &mut Rng::new(7)).unwrap();
        let ds = apply_open_world_split(x, y, &SplitConfig::default()).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&ds, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"OWDS");
        assert_eq!(bytes[4], DATASET_FORMAT_VERSION);
        assert_eq!(read_dataset(bytes.as_slice()).unwrap(), ds);

        let mut bad = bytes.clone();
        bad[4] = 99;
        assert!(matches!(read_dataset(bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_dataset(&bytes[..20]), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn split_invariants(seed in 0u64..1_000_000, k in 2usize..8, per in 2usize..12,
                            seen_f in 0.05f64..0.95, lab_f in 0.05f64..0.95) {
            let n = k * per;
            let x = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
            let y: Vec<usize> = (0..n).map(|i| i % k).collect();
            let cfg = SplitConfig { seen_class_fraction: seen_f, labeled_fraction: lab_f, seed };
            let ds = apply_open_world_split(x.clone(), y.clone(), &cfg).unwrap();
            for i in 0..n {
                if ds.labeled_mask[i] {
                    prop_assert!(ds.seen_classes.contains(&ds.labels[i]));
                }
            }
            prop_assert_eq!(ds.labeled_indices().len() + ds.unlabeled_indices().len(), n);
            let again = apply_open_world_split(x, y, &cfg).unwrap();
            prop_assert_eq!(ds.labeled_mask, again.labeled_mask);
        }
    }
}
