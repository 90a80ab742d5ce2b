//! Dataset ingestion, seeded splitting and train-only standardization.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{Likelihood, Target};

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Target {
        match self {
            Targets::Classes(v) => Target::Class(v[i]),
            Targets::Values(v) => Target::Value(v[i]),
        }
    }

    fn select(&self, indices: &[usize]) -> Self {
        match self {
            Targets::Classes(v) => Targets::Classes(indices.iter().map(|&i| v[i]).collect()),
            Targets::Values(v) => Targets::Values(indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Per-feature affine standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Population statistics of the rows of `x`; constant features keep
    /// scale 1.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(if var > 1e-24 { var.sqrt() } else { 1.0 });
        }
        Standardization { mean, std }
    }

    pub fn apply(&self, x: &mut DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                context: "Standardization::apply",
                expected: self.mean.len(),
                found: x.ncols(),
            });
        }
        for (j, mut col) in x.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.apply(|v| *v = (*v - m) / s);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `N × D` inputs.
    pub x: DMatrix<f64>,
    pub targets: Targets,
    /// Number of classes; 0 for regression.
    pub num_classes: usize,
    /// Original label strings, indexed by class.
    pub class_names: Vec<String>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn regression(name: impl Into<String>, x: DMatrix<f64>, y: Vec<f64>) -> Self {
        Dataset {
            name: name.into(),
            x,
            targets: Targets::Values(y),
            num_classes: 0,
            class_names: Vec::new(),
            standardization: None,
        }
    }

    pub fn classification(name: impl Into<String>, x: DMatrix<f64>, y: Vec<usize>, num_classes: usize) -> Self {
        Dataset {
            name: name.into(),
            x,
            targets: Targets::Classes(y),
            num_classes,
            class_names: (0..num_classes).map(|c| c.to_string()).collect(),
            standardization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn target(&self, i: usize) -> Target {
        self.targets.get(i)
    }

    pub fn targets_vec(&self) -> Vec<Target> {
        (0..self.len()).map(|i| self.target(i)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(indices),
            targets: self.targets.select(indices),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            standardization: self.standardization.clone(),
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if other.input_dim() != self.input_dim() && !other.is_empty() && !self.is_empty() {
            return Err(Error::DimensionMismatch {
                context: "Dataset::concat",
                expected: self.input_dim(),
                found: other.input_dim(),
            });
        }
        let d = self.input_dim().max(other.input_dim());
        let mut x = DMatrix::zeros(self.len() + other.len(), d);
        for i in 0..self.len() {
            x.row_mut(i).copy_from(&self.x.row(i));
        }
        for i in 0..other.len() {
            x.row_mut(self.len() + i).copy_from(&other.x.row(i));
        }
        let targets = match (&self.targets, &other.targets) {
            (Targets::Classes(a), Targets::Classes(b)) => Targets::Classes(a.iter().chain(b).copied().collect()),
            (Targets::Values(a), Targets::Values(b)) => Targets::Values(a.iter().chain(b).copied().collect()),
            _ => return Err(Error::Config("cannot concatenate classification and regression data".into())),
        };
        Ok(Dataset {
            name: self.name.clone(),
            x,
            targets,
            num_classes: self.num_classes.max(other.num_classes),
            class_names: self.class_names.clone(),
            standardization: self.standardization.clone(),
        })
    }

    /// Renumbers class labels against a fixed class list, so files read
    /// separately share one encoding. Labels outside `names` are rejected.
    pub fn with_class_names(&self, names: &[String]) -> Result<Dataset> {
        let Targets::Classes(y) = &self.targets else {
            return Ok(self.clone());
        };
        let y = y
            .iter()
            .map(|&k| {
                let label = &self.class_names[k];
                names.iter().position(|n| n == label).ok_or_else(|| Error::InvalidLabel {
                    family: "the stored class list",
                    label: label.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            targets: Targets::Classes(y),
            num_classes: names.len(),
            class_names: names.to_vec(),
            ..self.clone()
        })
    }

    /// Likelihood implied by the task: Gaussian for regression, a single
    /// logit for two classes, softmax otherwise.
    pub fn default_likelihood(&self, noise_variance: f64) -> Likelihood {
        match (&self.targets, self.num_classes) {
            (Targets::Values(_), _) => Likelihood::Gaussian { noise_variance },
            (Targets::Classes(_), c) if c <= 2 => Likelihood::BernoulliLogit,
            (Targets::Classes(_), c) => Likelihood::CategoricalSoftmax { num_classes: c },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

impl Default for LabelColumn {
    fn default() -> Self {
        LabelColumn::Name("label".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub label_column: LabelColumn,
    pub delimiter: char,
    pub header: bool,
    pub task: Task,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: LabelColumn::default(),
            delimiter: ',',
            header: true,
            task: Task::Classification,
        }
    }
}

/// Reads a numeric CSV with one label column. Rows keep their on-disk order
/// and class labels are numbered in order of first appearance.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, &name, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, name: &str, schema: &CsvSchema) -> Result<Dataset> {
    if !schema.delimiter.is_ascii() {
        return Err(Error::Config(format!("delimiter {:?} is not ASCII", schema.delimiter)));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(schema.header)
        .delimiter(schema.delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let label_idx = match &schema.label_column {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(n) => {
            if !schema.header {
                return Err(Error::MissingLabelColumn(n.clone()));
            }
            rdr.headers()?
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| Error::MissingLabelColumn(n.clone()))?
        }
    };

    let first_row = if schema.header { 2 } else { 1 };
    let mut features: Vec<f64> = Vec::new();
    let mut width = None;
    let mut labels: Vec<String> = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = first_row + r;
        if label_idx >= record.len() {
            return Err(Error::MissingLabelColumn(format!("{} (row {row} has {} fields)", label_idx, record.len())));
        }
        let w = record.len() - 1;
        match width {
            None => width = Some(w),
            Some(prev) if prev != w => {
                return Err(Error::Parse {
                    row,
                    column: record.len(),
                    message: format!("expected {} fields, found {}", prev + 1, record.len()),
                })
            }
            _ => {}
        }
        for (c, cell) in record.iter().enumerate() {
            if c == label_idx {
                labels.push(cell.to_string());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("non-numeric feature {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("non-finite feature {cell:?}"),
                });
            }
            features.push(v);
        }
    }
    let n = labels.len();
    let d = width.unwrap_or(0);
    let x = DMatrix::from_row_slice(n, d, &features);

    match schema.task {
        Task::Classification => {
            let mut class_names: Vec<String> = Vec::new();
            let y = labels
                .iter()
                .map(|l| match class_names.iter().position(|c| c == l) {
                    Some(k) => k,
                    None => {
                        class_names.push(l.clone());
                        class_names.len() - 1
                    }
                })
                .collect();
            Ok(Dataset {
                name: name.to_string(),
                x,
                targets: Targets::Classes(y),
                num_classes: class_names.len(),
                class_names,
                standardization: None,
            })
        }
        Task::Regression => {
            let y = labels
                .iter()
                .enumerate()
                .map(|(r, l)| {
                    l.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                        row: first_row + r,
                        column: label_idx + 1,
                        message: format!("non-numeric target {l:?}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset::regression(name, x, y))
        }
    }
}

/// Reads feature rows for prediction. A file with `input_dim + 1` columns is
/// taken to carry the schema's label column, which is dropped; a file with
/// `input_dim` columns is read whole.
pub fn load_features(path: impl AsRef<Path>, schema: &CsvSchema, input_dim: usize) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(schema.header)
        .delimiter(schema.delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(file);
    let named_label = match &schema.label_column {
        LabelColumn::Name(n) if schema.header => rdr.headers()?.iter().position(|h| h == n),
        _ => None,
    };
    let first_row = if schema.header { 2 } else { 1 };
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = first_row + r;
        let skip = if record.len() == input_dim {
            None
        } else if record.len() == input_dim + 1 {
            match (&schema.label_column, named_label) {
                (_, Some(i)) => Some(i),
                (LabelColumn::Index(i), None) => Some(*i),
                (LabelColumn::Name(n), None) => return Err(Error::MissingLabelColumn(n.clone())),
            }
        } else {
            return Err(Error::Parse {
                row,
                column: record.len(),
                message: format!("expected {input_dim} features, found {} fields", record.len()),
            });
        };
        for (c, cell) in record.iter().enumerate() {
            if Some(c) == skip {
                continue;
            }
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::Parse {
                row,
                column: c + 1,
                message: format!("non-numeric feature {cell:?}"),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, input_dim, &values))
}

/// Train/validation/test partition. Index lists refer to rows of the source.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub indices: [Vec<usize>; 3],
}

/// Seeded shuffle followed by contiguous splits; all three splits are
/// standardized with training statistics.
pub fn split_standardize(d: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::Config(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
    }
    let n = d.len();
    let n_train = (n as f64 * fractions[0]).round() as usize;
    let n_valid = ((n as f64 * fractions[1]).round() as usize).min(n - n_train.min(n));
    let n_test = n.saturating_sub(n_train + n_valid);
    for (split, size) in [("train", n_train), ("valid", n_valid), ("test", n_test)] {
        if size == 0 {
            return Err(Error::EmptySplit { split, n });
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_idx = order[..n_train].to_vec();
    let valid_idx = order[n_train..n_train + n_valid].to_vec();
    let test_idx = order[n_train + n_valid..].to_vec();

    let mut train = d.subset(&train_idx);
    let stats = Standardization::fit(&train.x);
    let mut valid = d.subset(&valid_idx);
    let mut test = d.subset(&test_idx);
    for part in [&mut train, &mut valid, &mut test] {
        stats.apply(&mut part.x)?;
        part.standardization = Some(stats.clone());
    }
    Ok(Splits {
        train,
        valid,
        test,
        indices: [train_idx, valid_idx, test_idx],
    })
}
