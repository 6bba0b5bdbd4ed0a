use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// `T` load profiles of common length `N`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("dataset"))?;
        let n = first.as_ref().len();
        if n == 0 {
            return Err(Error::Empty("load profile"));
        }
        let mut values = Vec::with_capacity(n * rows.len());
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n {
                return Err(Error::Row {
                    row: i,
                    message: format!("expected {n} values, got {}", row.len()),
                });
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Row {
                    row: i,
                    message: format!("non-finite value in column {j}"),
                });
            }
            values.extend_from_slice(row);
        }
        Ok(Dataset { n, values })
    }

    pub fn from_flat(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || values.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if values.len() % n != 0 {
            return Err(Error::DimensionMismatch {
                expected: n * (values.len() / n + 1),
                actual: values.len(),
            });
        }
        Ok(Dataset { n, values })
    }

    /// Profile length `N`.
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of profiles `T`.
    pub fn len(&self) -> usize {
        self.values.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.n)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.n);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Dataset { n: self.n, values }
    }

    pub(crate) fn check_dim(&self, n: usize) -> Result<()> {
        check_len(n, self.n)
    }
}
