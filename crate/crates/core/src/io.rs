//! CSV and JSON persistence plus per-task PCA preprocessing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::SymmetricEigen;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gmm::TaskData;
use crate::linalg::{Matrix, Vector};
use crate::sim::MetricRow;

fn csv_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a task from a CSV file with a header row. Every column is a
/// feature except an optional final column named `label` (values 1 or 2).
pub fn read_task_csv(path: impl AsRef<Path>) -> Result<TaskData> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(csv_err(path, "empty file"));
    }
    let has_label = headers.iter().next_back() == Some("label");
    let p = headers.len() - usize::from(has_label);
    if p == 0 {
        return Err(csv_err(path, "no feature columns"));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| csv_err(path, format!("line {line}: {e}")))?;
        for (j, cell) in record.iter().take(p).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_err(path, format!("line {line}, column {}: `{cell}` is not a number", j + 1)))?;
            if !v.is_finite() {
                return Err(csv_err(path, format!("line {line}, column {}: non-finite value", j + 1)));
            }
            values.push(v);
        }
        if has_label {
            let cell = &record[p];
            match cell {
                "1" => labels.push(1u8),
                "2" => labels.push(2u8),
                _ => return Err(csv_err(path, format!("line {line}: label `{cell}` not in {{1, 2}}"))),
            }
        }
    }
    let n = values.len() / p;
    if n == 0 {
        return Err(csv_err(path, "no data rows"));
    }
    let z = Matrix::from_row_slice(n, p, &values);
    TaskData::new(z, has_label.then_some(labels)).map_err(|e| csv_err(path, e.to_string()))
}

/// Writes a task with header `x1, ..., xp` (plus `label` when present).
pub fn write_task_csv(path: impl AsRef<Path>, task: &TaskData) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e.to_string()))?;
    let mut header: Vec<String> = (1..=task.p()).map(|j| format!("x{j}")).collect();
    if task.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(|e| csv_err(path, e.to_string()))?;
    for i in 0..task.n() {
        let mut rec: Vec<String> = task.z.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(l) = &task.labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e.to_string())))
        .collect()
}

/// Pretty-printed JSON. Floats use the shortest representation that parses
/// back to the same bits.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

/// Principal-component projection fitted on one task's training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vector,
    /// `p x m`; column `j` is the `j`-th leading eigenvector of the training covariance.
    pub loadings: Matrix,
    /// Leading eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    /// Fits `m` components. Each loading is signed so that its largest-magnitude
    /// entry is positive.
    pub fn fit(train: &TaskData, m: usize) -> Result<PcaModel> {
        let (n, p) = (train.n(), train.p());
        if m == 0 || m > p {
            return Err(Error::InvalidParameter(format!("{m} components requested for {p} features")));
        }
        if n <= m {
            return Err(Error::InvalidData(format!("{n} observations cannot support {m} components")));
        }
        let mean = train.z.row_mean().transpose();
        let mut centered = train.z.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let mut loadings = Matrix::zeros(p, m);
        let mut eigenvalues = Vec::with_capacity(m);
        for (j, &idx) in order.iter().take(m).enumerate() {
            let lambda = eig.eigenvalues[idx];
            if !(lambda > 1e-12 * top.max(f64::MIN_POSITIVE)) {
                return Err(Error::InvalidData(format!(
                    "training data has rank below {m} (component {} has variance {lambda:e})",
                    j + 1
                )));
            }
            let mut v = eig.eigenvectors.column(idx).into_owned();
            let lead = v.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
            if v[lead] < 0.0 {
                v = -v;
            }
            loadings.set_column(j, &v);
            eigenvalues.push(lambda);
        }
        Ok(PcaModel { mean, loadings, eigenvalues })
    }

    pub fn components(&self) -> usize {
        self.loadings.ncols()
    }

    /// Centers by the training mean and projects; labels are kept.
    pub fn transform(&self, data: &TaskData) -> Result<TaskData> {
        check_dim(self.mean.len(), data.p())?;
        let mut centered = data.z.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        TaskData::new(centered * &self.loadings, data.labels.clone())
    }
}

/// Fits a separate PCA on each training task and projects it.
pub fn pca_preprocess(tasks: &[TaskData], m: usize) -> Result<(Vec<TaskData>, Vec<PcaModel>)> {
    let mut out = Vec::with_capacity(tasks.len());
    let mut models = Vec::with_capacity(tasks.len());
    for (k, t) in tasks.iter().enumerate() {
        let model = PcaModel::fit(t, m).map_err(|e| e.in_task(k))?;
        out.push(model.transform(t)?);
        models.push(model);
    }
    Ok((out, models))
}
