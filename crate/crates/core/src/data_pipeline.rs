//! Desk-scale classification datasets: seeded Gaussian blobs and CSV files.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(seed)`. Normal deviates
//! use the cosine branch of Box–Muller on two consecutive uniform draws
//! (`u1 = 1 − U`, `u2 = U`, with `U = rng.gen::<f64>()`), so every draw
//! consumes exactly two `f64`s and the stream is easy to reproduce elsewhere.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Fraction of each class assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Seed used to split CSV datasets, which carry no seed of their own.
pub const CSV_SPLIT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    n_classes: usize,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset and a stratified train/validation split.
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        n_classes: usize,
        split_seed: u64,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: features.len(),
                right: labels.len(),
            });
        }
        let dims = features.first().map_or(0, Vec::len);
        for (row, f) in features.iter().enumerate() {
            if f.len() != dims {
                return Err(Error::ShapeMismatch {
                    expected: format!("{dims} features"),
                    got: format!("{} features in sample {row}", f.len()),
                });
            }
            if let Some(col) = f.iter().position(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    row,
                    col,
                    msg: "non-finite feature".into(),
                });
            }
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: n_classes,
            });
        }
        let (train, val) = stratified_split(&labels, n_classes, split_seed);
        Ok(Self {
            features,
            labels,
            n_classes,
            train,
            val,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn empty_classes(&self) -> Vec<usize> {
        self.class_counts()
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Row-major `f32` copy of the selected samples' features.
    pub fn gather_f32(&self, indices: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.dims());
        for &i in indices {
            out.extend(self.features[i].iter().map(|&v| v as f32));
        }
        out
    }

    /// Writes `x0..x{D-1},label` rows with a header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dims()).map(|d| format!("x{d}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (f, l) in self.features.iter().zip(&self.labels) {
            let mut rec: Vec<String> = f.iter().map(|v| v.to_string()).collect();
            rec.push(l.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn stratified_split(labels: &[usize], n_classes: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for members in &mut by_class {
        members.shuffle(&mut rng);
        let n_train = (members.len() as f64 * TRAIN_FRACTION).round() as usize;
        train.extend_from_slice(&members[..n_train]);
        val.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Box-Muller (cosine branch) with `u1 = 1 − U`, `u2 = U`, drawing two `f64`s.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = 1.0 - rng.gen::<f64>();
    let u2 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `classes` isotropic Gaussian clusters in `dims` dimensions.
///
/// Centers are standard normal per coordinate; samples add `spread`-scaled
/// standard normal noise. Samples are stored class by class.
pub fn generate_blobs(
    classes: usize,
    per_class: usize,
    dims: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidParams(format!("need at least 2 classes, got {classes}")));
    }
    if per_class < 2 {
        return Err(Error::InvalidParams(format!(
            "need at least 2 samples per class, got {per_class}"
        )));
    }
    if dims < 1 {
        return Err(Error::InvalidParams("need at least 1 dimension".into()));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::InvalidParams(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dims).map(|_| standard_normal(&mut rng)).collect())
        .collect();
    let mut features = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            features.push(
                center
                    .iter()
                    .map(|m| m + spread * standard_normal(&mut rng))
                    .collect(),
            );
            labels.push(c);
        }
    }
    Dataset::new(features, labels, classes, seed.wrapping_add(1))
}

/// How to pick the label column of a CSV file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

fn parse_cell(cell: &str, row: usize, col: usize) -> Result<f64> {
    let t = cell.trim();
    if t.is_empty() {
        return Err(Error::Parse {
            row,
            col,
            msg: "missing value".into(),
        });
    }
    let v: f64 = t.parse().map_err(|_| Error::Parse {
        row,
        col,
        msg: format!("not a number: {t:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            col,
            msg: format!("non-finite value {t:?}"),
        });
    }
    Ok(v)
}

/// Loads a comma-separated file. The first row is treated as a header when
/// any of its cells is non-numeric. Rows and columns in errors are 1-based.
pub fn load_csv(path: &Path, label_column: &LabelColumn) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let records: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>()?;
    let Some(first) = records.first() else {
        return Err(Error::EmptyFile(path.to_path_buf()));
    };
    let has_header = first.iter().any(|c| c.trim().parse::<f64>().is_err());
    let width = first.len();
    let label_idx = match label_column {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(name) => {
            if !has_header {
                return Err(Error::InvalidParams(format!(
                    "label column {name:?} requested but the file has no header row"
                )));
            }
            first
                .iter()
                .position(|c| c.trim() == name)
                .ok_or_else(|| Error::InvalidParams(format!("no column named {name:?}")))?
        }
    };
    if label_idx >= width {
        return Err(Error::InvalidParams(format!(
            "label column {label_idx} out of range for {width} columns"
        )));
    }
    let body = if has_header { &records[1..] } else { &records[..] };
    if body.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let mut features = Vec::with_capacity(body.len());
    let mut labels = Vec::with_capacity(body.len());
    for (i, rec) in body.iter().enumerate() {
        let row = i + 1 + usize::from(has_header);
        if rec.len() != width {
            return Err(Error::Parse {
                row,
                col: rec.len().min(width) + 1,
                msg: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        let mut f = Vec::with_capacity(width - 1);
        for (col, cell) in rec.iter().enumerate() {
            let v = parse_cell(cell, row, col + 1)?;
            if col == label_idx {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::Parse {
                        row,
                        col: col + 1,
                        msg: format!("label must be a non-negative integer, got {v}"),
                    });
                }
                labels.push(v as usize);
            } else {
                f.push(v);
            }
        }
        features.push(f);
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let dataset = Dataset::new(features, labels, n_classes, CSV_SPLIT_SEED)?;
    let empty = dataset.empty_classes();
    if !empty.is_empty() {
        log::warn!(
            "{}: classes {:?} have no samples (K inferred as {})",
            path.display(),
            empty,
            n_classes
        );
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let d = generate_blobs(3, 10, 4, 0.5, 9).unwrap();
        assert_eq!(d.len(), 30);
        assert_eq!(d.class_counts(), vec![10, 10, 10]);
        assert_eq!(d, generate_blobs(3, 10, 4, 0.5, 9).unwrap());
        assert_ne!(d, generate_blobs(3, 10, 4, 0.5, 10).unwrap());
    }

    #[test]
    fn zero_spread_duplicates_points() {
        let d = generate_blobs(2, 5, 3, 0.0, 1).unwrap();
        assert!(d.features()[..5].iter().all(|f| f == &d.features()[0]));
    }

    #[test]
    fn blob_guards() {
        assert!(generate_blobs(1, 10, 2, 1.0, 0).is_err());
        assert!(generate_blobs(3, 1, 2, 1.0, 0).is_err());
        assert!(generate_blobs(3, 10, 0, 1.0, 0).is_err());
        assert!(generate_blobs(3, 10, 2, -1.0, 0).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let d = generate_blobs(7, 33, 2, 1.0, 4).unwrap();
        assert_eq!(d.train_indices().len() + d.val_indices().len(), d.len());
        for c in 0..7 {
            let n_train = d.train_indices().iter().filter(|&&i| d.labels()[i] == c).count();
            let expected = 33.0 * TRAIN_FRACTION;
            assert!((n_train as f64 - expected).abs() <= 1.0);
        }
    }

    #[test]
    fn csv_basic() {
        let f = write("1.0,2.0,0\n3.5,-1,1\n");
        let d = load_csv(f.path(), &LabelColumn::Index(2)).unwrap();
        assert_eq!((d.len(), d.dims(), d.n_classes()), (2, 2, 2));
        assert_eq!(d.features()[1], vec![3.5, -1.0]);
    }

    #[test]
    fn csv_header_by_name() {
        let f = write("label,a,b\n0,1,2\n1,3,4\n1,5,6\n");
        let d = load_csv(f.path(), &LabelColumn::Name("label".into())).unwrap();
        assert_eq!(d.labels(), &[0, 1, 1]);
        assert_eq!(d.features()[2], vec![5.0, 6.0]);
    }

    #[test]
    fn csv_reports_bad_cell() {
        let f = write("1.0,2.0,0\n3.5,abc,1\n");
        match load_csv(f.path(), &LabelColumn::Index(2)) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
        let f = write("1.0,2.0,0\n1.0,,0\n");
        assert!(matches!(
            load_csv(f.path(), &LabelColumn::Index(2)),
            Err(Error::Parse { row: 2, col: 2, .. })
        ));
    }

    #[test]
    fn csv_label_gap_keeps_empty_class() {
        let f = write("1,0\n2,2\n3,0\n");
        let d = load_csv(f.path(), &LabelColumn::Index(1)).unwrap();
        assert_eq!(d.n_classes(), 3);
        assert_eq!(d.empty_classes(), vec![1]);
    }

    #[test]
    fn csv_empty() {
        let f = write("");
        assert!(matches!(load_csv(f.path(), &LabelColumn::Index(0)), Err(Error::EmptyFile(_))));
        let f = write("a,b,label\n");
        assert!(matches!(load_csv(f.path(), &LabelColumn::Index(2)), Err(Error::EmptyFile(_))));
    }

    #[test]
    fn csv_round_trip() {
        let d = generate_blobs(4, 6, 3, 1.3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blobs.csv");
        d.write_csv(&path).unwrap();
        let back = load_csv(&path, &LabelColumn::Name("label".into())).unwrap();
        assert_eq!(back.labels(), d.labels());
        for (a, b) in back.features().iter().zip(d.features()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        let bytes = std::fs::read(&path).unwrap();
        d.write_csv(&path).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
    }
}
