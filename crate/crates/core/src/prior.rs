//! Batch-level soft prior built from per-task label similarity.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::taxonomy::{SimTable, TaskId, TaxonomyCatalog};

/// Symmetric `B x B` affinity matrix with the number of tasks behind each entry.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMatrix {
    matrix: Tensor,
    coverage: Vec<usize>,
}

impl PriorMatrix {
    pub fn new(matrix: Tensor, coverage: Vec<usize>) -> Result<Self> {
        let (r, c) = matrix.shape();
        if r != c || coverage.len() != r * c {
            return Err(Error::dim(
                "prior",
                format!("matrix {r}x{c} with {} coverage entries", coverage.len()),
            ));
        }
        for i in 0..r {
            if matrix.get(i, i) != 1.0 {
                return Err(Error::Validation(format!("prior diagonal entry {i} is not 1")));
            }
            for j in 0..r {
                let v = matrix.get(i, j);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Validation(format!("prior entry ({i},{j}) = {v} outside [0, 1]")));
                }
                if (v - matrix.get(j, i)).abs() > 1e-12 || coverage[i * r + j] != coverage[j * r + i] {
                    return Err(Error::Validation(format!("prior is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(PriorMatrix { matrix, coverage })
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn coverage(&self, i: usize, j: usize) -> usize {
        self.coverage[i * self.size() + j]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn into_matrix(self) -> Tensor {
        self.matrix
    }
}

/// Mean pairwise similarity between two label sets, summed in ascending index order.
pub fn task_affinity(a: &BTreeSet<usize>, b: &BTreeSet<usize>, sim: &SimTable) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("task_affinity needs two non-empty label sets".into()));
    }
    if let Some(bad) = a.iter().chain(b).find(|&&i| i >= sim.size()) {
        return Err(Error::InvalidArgument(format!(
            "label index {bad} outside a {}-label similarity table",
            sim.size()
        )));
    }
    let mut total = 0.0;
    for &x in a {
        for &y in b {
            total += sim.get(x, y);
        }
    }
    Ok(total / (a.len() * b.len()) as f64)
}

/// Prior for a batch: off-diagonal entries average the task affinity over the
/// tasks both samples annotate (0 when they share none); the diagonal is 1.
pub fn prior_matrix<R: AsRef<SampleRecord>>(batch: &[R], catalog: &TaxonomyCatalog) -> Result<PriorMatrix> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::InvalidArgument("prior_matrix needs a non-empty batch".into()));
    }
    let mut matrix = Tensor::identity(b);
    let mut coverage = vec![0; b * b];
    for i in 0..b {
        let ri = batch[i].as_ref();
        for j in i + 1..b {
            let rj = batch[j].as_ref();
            let mut sum = 0.0;
            let mut shared = 0;
            for task in TaskId::all() {
                if let (Some(li), Some(lj)) = (ri.labels_for(task), rj.labels_for(task)) {
                    sum += task_affinity(li, lj, catalog.task(task).similarity())?;
                    shared += 1;
                }
            }
            let value = if shared == 0 { 0.0 } else { sum / shared as f64 };
            matrix.set(i, j, value);
            matrix.set(j, i, value);
            coverage[i * b + j] = shared;
            coverage[j * b + i] = shared;
        }
    }
    Ok(PriorMatrix { matrix, coverage })
}

/// Path of the coverage sidecar written next to a prior CSV.
pub fn coverage_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.coverage.csv"))
}

fn write_rows<T>(path: &Path, n: usize, cell: impl Fn(usize, usize) -> T) -> Result<()>
where
    T: ToString,
{
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    for i in 0..n {
        w.write_record((0..n).map(|j| cell(i, j).to_string()))
            .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    r.records()
        .map(|rec| {
            rec.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| csv_io(path, e))
        })
        .collect()
}

/// Writes the matrix (17 significant digits) and a `<stem>.coverage.csv` sidecar.
pub fn export_prior(prior: &PriorMatrix, path: &Path) -> Result<()> {
    let n = prior.size();
    write_rows(path, n, |i, j| format!("{:.16e}", prior.get(i, j)))?;
    write_rows(&coverage_path(path), n, |i, j| prior.coverage(i, j))
}

pub fn load_prior(path: &Path) -> Result<PriorMatrix> {
    let parse_err = |p: &Path, i: usize, msg: String| Error::Validation(format!("{}: row {}: {msg}", p.display(), i + 1));
    let values = read_rows(path)?;
    let n = values.len();
    let mut data = Vec::with_capacity(n * n);
    for (i, row) in values.iter().enumerate() {
        if row.len() != n {
            return Err(parse_err(path, i, format!("{} values, expected {n}", row.len())));
        }
        for v in row {
            data.push(v.trim().parse::<f64>().map_err(|e| parse_err(path, i, format!("{v:?}: {e}")))?);
        }
    }
    let cov_path = coverage_path(path);
    let counts = read_rows(&cov_path)?;
    let mut coverage = Vec::with_capacity(n * n);
    for (i, row) in counts.iter().enumerate() {
        for v in row {
            coverage.push(v.trim().parse::<usize>().map_err(|e| parse_err(&cov_path, i, format!("{v:?}: {e}")))?);
        }
    }
    PriorMatrix::new(Tensor::new(n, n, data)?, coverage)
}
