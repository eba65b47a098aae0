use crate::error::{Error, Result};

/// Row-sparse weight matrix used for neighbor aggregation.
///
/// Row `r` lists `(source_row, weight)` pairs; multiplying it with a dense
/// `sources×d` matrix yields a `rows×d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    sources: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(sources: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for (r, entries) in rows.iter().enumerate() {
            for &(s, w) in entries {
                if s >= sources {
                    return Err(Error::Shape(format!(
                        "row {r} references source {s} of {sources}"
                    )));
                }
                if !w.is_finite() {
                    return Err(Error::Numeric(format!("row {r} has non-finite weight {w}")));
                }
            }
        }
        Ok(Self { sources, rows })
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_sources(&self) -> usize {
        self.sources
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    pub(crate) fn apply(&self, h: &[f64], d: usize, out: &mut [f64]) {
        for (r, entries) in self.rows.iter().enumerate() {
            let dst = &mut out[r * d..(r + 1) * d];
            for &(s, w) in entries {
                let src = &h[s * d..(s + 1) * d];
                for (o, x) in dst.iter_mut().zip(src) {
                    *o += w * x;
                }
            }
        }
    }

    pub(crate) fn apply_transpose(&self, g: &[f64], d: usize, out: &mut [f64]) {
        for (r, entries) in self.rows.iter().enumerate() {
            let src = &g[r * d..(r + 1) * d];
            for &(s, w) in entries {
                let dst = &mut out[s * d..(s + 1) * d];
                for (o, x) in dst.iter_mut().zip(src) {
                    *o += w * x;
                }
            }
        }
    }
}
