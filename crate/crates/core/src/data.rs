//! Synthetic tasks, CSV and IDX ingestion, and seeded train/validation/test splits.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Validation,
    Test,
    Unsplit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        if labels.is_empty() || inputs.rows() != labels.len() || inputs.shape().len() != 2 {
            return Err(Error::arg(format!(
                "{} label(s) for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if class_count < 2 {
            return Err(Error::arg("need at least two classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Data(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            class_count,
            split,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
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

    /// Row indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        LabeledDataset::new(
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
            split,
        )
    }

    pub fn with_inputs(&self, inputs: Tensor) -> Result<Self> {
        LabeledDataset::new(inputs, self.labels.clone(), self.class_count, self.split)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    GaussianBlobs,
    OverlappingRings,
    File,
}

/// Overlap at which three unit-circle classes have Bayes accuracy ≈ 0.851.
pub const DEFAULT_OVERLAP: f64 = 0.64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub classes: usize,
    pub dim: usize,
    /// Split sizes; classes are balanced within each split.
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Noise scale. Class means sit on the unit circle (blobs) or at radius `k + 1` (rings).
    pub overlap: f64,
    /// Displacement of every class mean along the first axis.
    pub shift: f64,
    pub seed: u64,
    /// CSV source for `kind = "file"`.
    pub path: Option<PathBuf>,
    /// Train/validation/test fractions for `kind = "file"`.
    pub fractions: [f64; 3],
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::GaussianBlobs,
            classes: 3,
            dim: 2,
            train: 3000,
            validation: 1000,
            test: 1000,
            overlap: DEFAULT_OVERLAP,
            shift: 0.0,
            seed: 0,
            path: None,
            fractions: [0.6, 0.2, 0.2],
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == TaskKind::File {
            if self.path.is_none() {
                return Err(Error::arg("file task needs a path"));
            }
            return Ok(());
        }
        if self.classes < 2 {
            return Err(Error::arg("task needs at least two classes"));
        }
        if self.dim < 2 {
            return Err(Error::arg("synthetic tasks need at least two dimensions"));
        }
        if self.train == 0 || self.validation == 0 || self.test == 0 {
            return Err(Error::arg("split sizes must be positive"));
        }
        if !(self.overlap >= 0.0) || !self.overlap.is_finite() || !self.shift.is_finite() {
            return Err(Error::arg("overlap must be finite and non-negative"));
        }
        Ok(())
    }

    fn means(&self) -> Vec<[f64; 2]> {
        let k = self.classes as f64;
        (0..self.classes)
            .map(|c| {
                let a = 2.0 * PI * c as f64 / k;
                [a.cos() + self.shift, a.sin()]
            })
            .collect()
    }

    fn noise(&self) -> f64 {
        self.overlap.max(1e-3)
    }
}

fn gen_split(spec: &TaskSpec, n: usize, split: Split, rng: &mut Rng) -> Result<LabeledDataset> {
    let d = spec.dim;
    let sigma = spec.noise();
    let means = spec.means();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        labels.push(c);
        match spec.kind {
            TaskKind::GaussianBlobs => {
                data.push(means[c][0] + sigma * rng.normal());
                data.push(means[c][1] + sigma * rng.normal());
            }
            _ => {
                let r = (c + 1) as f64 + sigma * rng.normal();
                let a = rng.uniform_range(0.0, 2.0 * PI);
                data.push(r * a.cos() + spec.shift);
                data.push(r * a.sin());
            }
        }
        for _ in 2..d {
            data.push(sigma * rng.normal());
        }
    }
    LabeledDataset::new(Tensor::from_parts(n, d, data), labels, spec.classes, split)
}

/// Draws the three splits i.i.d. from the task's generative law.
pub fn gen_gaussian_task(spec: &TaskSpec) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    if spec.kind == TaskKind::File {
        return Err(Error::arg("file tasks are loaded, not generated"));
    }
    let root = Rng::new(spec.seed);
    Ok((
        gen_split(spec, spec.train, Split::Train, &mut root.split(0))?,
        gen_split(spec, spec.validation, Split::Validation, &mut root.split(1))?,
        gen_split(spec, spec.test, Split::Test, &mut root.split(2))?,
    ))
}

/// Generated or loaded splits; file tasks are standardized with train statistics.
pub fn load_task(spec: &TaskSpec) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    match spec.kind {
        TaskKind::File => {
            let path = spec.path.as_deref().ok_or_else(|| Error::arg("file task needs a path"))?;
            let schema = CsvSchema {
                class_count: (spec.classes >= 2).then_some(spec.classes),
            };
            let all = load_csv(path, &schema)?;
            let (train, val, test) = split(&all, spec.fractions, spec.seed)?;
            let st = Standardizer::fit(&train);
            Ok((st.apply(&train)?, st.apply(&val)?, st.apply(&test)?))
        }
        _ => gen_gaussian_task(spec),
    }
}

/// Bayes accuracy of a blob task.
///
/// With equal priors and isotropic noise the Bayes cell of each class is the wedge
/// of angle `2π/K` around its mean direction. Extra dimensions carry no signal. In
/// polar coordinates the radial integral has a closed form, leaving a 1-D Simpson
/// rule over the wedge angle.
pub fn gaussian_bayes_accuracy(spec: &TaskSpec) -> f64 {
    let s = spec.noise();
    let half = PI / spec.classes as f64;
    let phi = |z: f64| 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
    let f = |th: f64| {
        let a = th.cos() / s;
        let b = th.sin() / s;
        ((-0.5 / (s * s)).exp() + a * (2.0 * PI).sqrt() * phi(a) * (-0.5 * b * b).exp()) / (2.0 * PI)
    };
    let n = 4000;
    let h = 2.0 * half / n as f64;
    let mut acc = f(-half) + f(half);
    for i in 1..n {
        acc += f(-half + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Inferred as `max(label) + 1` when absent.
    pub class_count: Option<usize>,
}

/// Header row, feature columns, then a `label` column. Row numbers in errors
/// count data rows from 1.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| Error::Parse { row: 0, message: e.to_string() })?.clone();
    if headers.len() < 2 || headers.get(headers.len() - 1) != Some("label") {
        return Err(Error::Parse {
            row: 0,
            message: "header must list feature columns followed by `label`".into(),
        });
    }
    let d = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        if rec.len() != d + 1 {
            return Err(Error::Parse {
                row,
                message: format!("expected {} fields, found {}", d + 1, rec.len()),
            });
        }
        for (j, cell) in rec.iter().take(d).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                message: format!("column {:?}: {cell:?} is not a number", &headers[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("column {:?} is not finite", &headers[j]),
                });
            }
            data.push(v);
        }
        let label: usize = rec[d].parse().map_err(|_| Error::Parse {
            row,
            message: format!("label {:?} is not a class index", &rec[d]),
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    let k = schema
        .class_count
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
    let n = labels.len();
    LabeledDataset::new(Tensor::from_parts(n, d, data), labels, k, Split::Unsplit)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn idx_header(bytes: &[u8], magic: u32, dims: usize, path: &Path) -> Result<Vec<usize>> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))
    };
    let found = word(0)?;
    if found != magic {
        return Err(Error::Format(format!(
            "{}: magic {found:#010x}, expected {magic:#010x}",
            path.display()
        )));
    }
    let shape: Vec<usize> = (1..=dims).map(|i| word(i).map(|w| w as usize)).collect::<Result<_>>()?;
    let body = 4 * (dims + 1);
    let expected = shape.iter().product::<usize>();
    if bytes.len() - body.min(bytes.len()) != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} payload byte(s), found {}",
            path.display(),
            bytes.len().saturating_sub(body)
        )));
    }
    Ok(shape)
}

/// Unsigned-byte IDX image and label files; pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, class_count: Option<usize>) -> Result<LabeledDataset> {
    let ib = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let ishape = idx_header(&ib, IDX_IMAGES, 3, images)?;
    let lshape = idx_header(&lb, IDX_LABELS, 1, labels)?;
    if ishape[0] != lshape[0] {
        return Err(Error::Data(format!("{} image(s) but {} label(s)", ishape[0], lshape[0])));
    }
    let n = ishape[0];
    let d = ishape[1] * ishape[2];
    let pixels = ib[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let ys: Vec<usize> = lb[8..].iter().map(|&b| b as usize).collect();
    let k = class_count.unwrap_or_else(|| ys.iter().max().map_or(0, |m| m + 1).max(2));
    LabeledDataset::new(Tensor::from_parts(n, d, pixels), ys, k, Split::Unsplit)
}

/// Seeded partition. Each split takes `floor(fraction · N)` rows; when the
/// fractions sum to one the test split takes the remainder.
pub fn split(dataset: &LabeledDataset, fractions: [f64; 3], seed: u64) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    if fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::arg("split fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::arg(format!("split fractions sum to {total}")));
    }
    let n = dataset.len();
    let take = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let n_train = take(fractions[0]);
    let n_val = take(fractions[1]);
    let n_test = if (total - 1.0).abs() <= 1e-9 {
        n.saturating_sub(n_train + n_val)
    } else {
        take(fractions[2])
    };
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::arg(format!(
            "split of {n} rows gives sizes ({n_train}, {n_val}, {n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let (a, rest) = order.split_at(n_train);
    let (b, rest) = rest.split_at(n_val);
    Ok((
        dataset.subset(a, Split::Train)?,
        dataset.subset(b, Split::Validation)?,
        dataset.subset(&rest[..n_test], Split::Test)?,
    ))
}

/// Per-column affine map to mean 0, variance 1, fitted on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &LabeledDataset) -> Self {
        let x = train.inputs();
        let (n, d) = (x.rows() as f64, x.cols());
        let mut mean = vec![0.0; d];
        for row in x.row_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x.row_iter() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        // constant columns are centered but left unscaled
        let scale = var.iter().map(|s| if *s > 0.0 { (s / n).sqrt() } else { 1.0 }).collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        if ds.dim() != self.mean.len() {
            return Err(Error::arg("standardizer width mismatch"));
        }
        let d = ds.dim();
        let data = ds
            .inputs()
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.scale[i % d])
            .collect();
        ds.with_inputs(Tensor::from_parts(ds.len(), d, data))
    }
}
