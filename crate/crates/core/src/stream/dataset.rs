use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::rng::stream;
use crate::math::{RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// One labelled input; `index` is its row in the originating dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    pub index: usize,
}

/// Per-feature affine standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics per column; constant columns keep unit scale.
    pub fn fit(inputs: &Tensor) -> Self {
        let (n, d) = (inputs.rows() as f64, inputs.cols());
        let mut mean = vec![0.0; d];
        for r in 0..inputs.rows() {
            for (m, v) in mean.iter_mut().zip(inputs.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in 0..inputs.rows() {
            for ((s, v), m) in var.iter_mut().zip(inputs.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, inputs: &mut Tensor) {
        for r in 0..inputs.rows() {
            for ((v, m), s) in inputs.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn invert(&self, inputs: &mut Tensor) {
        for r in 0..inputs.rows() {
            for ((v, m), s) in inputs.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `n x d` inputs.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Set when the inputs were standardized at load time.
    pub standardizer: Option<Standardizer>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if inputs.rank() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Data(format!("row {i}: label {y} outside {num_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            split,
            standardizer: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            x: self.inputs.row(i).to_vec(),
            label: self.labels[i],
            index: i,
        }
    }

    /// Row indices of class `c`, ascending.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }
}

fn sphere_point(rng: &mut RngState, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit-sphere class means: the best of several random draws by minimum
/// pairwise distance, so no two classes land on top of each other.
fn class_means(classes: usize, dims: usize, rng: &mut RngState) -> Vec<Vec<f64>> {
    const CANDIDATES: usize = 64;
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..CANDIDATES {
        let means: Vec<Vec<f64>> = (0..classes).map(|_| sphere_point(rng, dims)).collect();
        let mut min_dist = f64::INFINITY;
        for a in 0..classes {
            for b in a + 1..classes {
                let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                min_dist = min_dist.min(d);
            }
        }
        if best.as_ref().map_or(true, |(d, _)| min_dist > *d) {
            best = Some((min_dist, means));
        }
    }
    best.expect("at least one candidate").1
}

fn blob_samples(means: &[Vec<f64>], per_class: usize, spread: f64, rng: &mut RngState, split: Split) -> Result<Dataset> {
    let d = means[0].len();
    let mut data = Vec::with_capacity(means.len() * per_class * d);
    let mut labels = Vec::with_capacity(means.len() * per_class);
    for (c, mu) in means.iter().enumerate() {
        for _ in 0..per_class {
            for m in mu {
                data.push(m + spread * rng.gaussian());
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::from_vec(&[labels.len(), d], data)?, labels, means.len(), split)
}

fn check_synthetic(classes: usize, dims: usize, per_class: usize, spread: f64) -> Result<()> {
    if classes == 0 || dims == 0 || per_class == 0 {
        return Err(Error::Config("synthetic classes, dims and per_class must be >= 1".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config("synthetic spread must be >= 0".into()));
    }
    Ok(())
}

/// Gaussian blobs around unit-sphere class means; rows are grouped by class.
pub fn make_synthetic(classes: usize, dims: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    check_synthetic(classes, dims, per_class, spread)?;
    let root = RngState::new(seed);
    let means = class_means(classes, dims, &mut root.substream(stream::DATA, 0));
    blob_samples(&means, per_class, spread, &mut root.substream(stream::DATA, 1), Split::Train)
}

/// Train split as [`make_synthetic`] plus a disjoint test split drawn around
/// the same class means.
pub fn make_synthetic_split(
    classes: usize,
    dims: usize,
    per_class: usize,
    test_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    check_synthetic(classes, dims, test_per_class.max(1), spread)?;
    let train = make_synthetic(classes, dims, per_class, spread, seed)?;
    let root = RngState::new(seed);
    let means = class_means(classes, dims, &mut root.substream(stream::DATA, 0));
    let test = blob_samples(&means, test_per_class, spread, &mut root.substream(stream::TEST_DATA, 0), Split::Test)?;
    Ok((train, test))
}

/// Reads `label,f1,...,fd` rows and standardizes with the file's own statistics.
pub fn load_csv_dataset(path: &Path, has_header: bool, num_classes: Option<usize>) -> Result<Dataset> {
    let mut ds = read_csv_rows(path, has_header, num_classes, Split::Train)?;
    let st = Standardizer::fit(&ds.inputs);
    st.apply(&mut ds.inputs);
    ds.standardizer = Some(st);
    Ok(ds)
}

/// Reads an evaluation file and standardizes it with training statistics.
pub fn load_csv_dataset_with(
    path: &Path,
    has_header: bool,
    num_classes: Option<usize>,
    standardizer: &Standardizer,
) -> Result<Dataset> {
    let mut ds = read_csv_rows(path, has_header, num_classes, Split::Test)?;
    if standardizer.mean.len() != ds.dim() {
        return Err(Error::Data(format!(
            "{}: {} features but standardizer expects {}",
            path.display(),
            ds.dim(),
            standardizer.mean.len()
        )));
    }
    standardizer.apply(&mut ds.inputs);
    ds.standardizer = Some(standardizer.clone());
    Ok(ds)
}

fn read_csv_rows(path: &Path, has_header: bool, num_classes: Option<usize>, split: Split) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if record.len() < 2 {
            return Err(Error::Data(format!(
                "{}:{line}: expected a label and at least one feature",
                path.display()
            )));
        }
        if let Some(w) = width {
            if record.len() - 1 != w {
                return Err(Error::Data(format!(
                    "{}:{line}: {} features, expected {w}",
                    path.display(),
                    record.len() - 1
                )));
            }
        }
        width = Some(record.len() - 1);
        let label: usize = record[0].parse().map_err(|_| {
            Error::Data(format!(
                "{}:{line}: label '{}' is not a non-negative integer",
                path.display(),
                &record[0]
            ))
        })?;
        if let Some(c) = num_classes {
            if label >= c {
                return Err(Error::Data(format!(
                    "{}:{line}: label {label} outside declared {c} classes",
                    path.display()
                )));
            }
        }
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| {
                Error::Data(format!("{}:{line}: feature '{field}' is not a number", path.display()))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("{}:{line}: non-finite feature", path.display())));
            }
            data.push(v);
        }
    }
    let Some(d) = width else {
        return Err(Error::Data(format!("{}: empty dataset", path.display())));
    };
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let inputs = Tensor::from_vec(&[labels.len(), d], data)?;
    Dataset::new(inputs, labels, classes, split)
}

#[derive(Debug, Serialize, Deserialize)]
struct BinarySidecar {
    rows: usize,
    cols: usize,
    num_classes: usize,
    labels: Vec<usize>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Raw little-endian `f64` matrix at `path` plus a `<path>.json` sidecar.
pub fn write_binary_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = ds.inputs.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = BinarySidecar {
        rows: ds.len(),
        cols: ds.dim(),
        num_classes: ds.num_classes,
        labels: ds.labels.clone(),
    };
    let sp = sidecar_path(path);
    let json = serde_json::to_string_pretty(&side).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&sp, json).map_err(|e| Error::io(sp, e))
}

pub fn read_binary_dataset(path: &Path, split: Split) -> Result<Dataset> {
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: BinarySidecar =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", sp.display())))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != side.rows * side.cols * 8 || side.labels.len() != side.rows {
        return Err(Error::Data(format!(
            "{}: size does not match sidecar shape {}x{}",
            path.display(),
            side.rows,
            side.cols
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let inputs = Tensor::from_vec(&[side.rows, side.cols], data).map_err(|e| Error::Data(e.to_string()))?;
    Dataset::new(inputs, side.labels, side.num_classes, split)
}
