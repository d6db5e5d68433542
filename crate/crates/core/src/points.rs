use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix of `len()` points in `dim()` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::Shape { expected: dim, got: row.len() });
            }
            data.extend_from_slice(row);
        }
        Self::from_flat(dim, data)
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 && !data.is_empty() {
            return Err(Error::Shape { expected: 1, got: 0 });
        }
        if dim > 0 && data.len() % dim != 0 {
            return Err(Error::Shape { expected: dim, got: data.len() % dim });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("point coordinates must be finite".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on zero; an empty matrix has no rows anyway
        self.data.chunks_exact(self.dim.max(1))
    }

    pub(crate) fn check_dim(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::Shape { expected: self.dim, got: query.len() });
        }
        Ok(())
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let p = Points::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.row(1), &[3.0, 4.0]);
        assert_eq!(p.rows().count(), 2);
    }

    #[test]
    fn ragged_rows_rejected() {
        let err = Points::from_rows(&[vec![1.0, 2.0], vec![3.0]]).unwrap_err();
        assert!(matches!(err, Error::Shape { expected: 2, got: 1 }));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Points::from_rows(&[vec![f64::NAN]]).is_err());
    }
}
