//! CSR batches of basic-feature vectors and the sparse fully connected layer.
//!
//! Forward and backward cost `O(nnz * out)`: only weight rows named by a
//! nonzero column index are read or updated.

use crate::error::{Error, Result};
use crate::nn::LayerParams;
use crate::tensor::{axpy, Tensor};

/// A batch of sparse rows in compressed sparse row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBatch {
    dim: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseBatch {
    pub fn empty(dim: usize) -> Self {
        SparseBatch {
            dim,
            row_offsets: vec![0],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from raw CSR arrays, validating every invariant.
    pub fn from_parts(dim: usize, row_offsets: Vec<usize>, col_indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if row_offsets.first() != Some(&0) {
            return Err(Error::invalid("row_offsets must start at 0"));
        }
        if row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("row_offsets must be nondecreasing"));
        }
        if *row_offsets.last().unwrap() != col_indices.len() || col_indices.len() != values.len() {
            return Err(Error::invalid("row_offsets, col_indices and values disagree in length"));
        }
        for r in row_offsets.windows(2) {
            let cols = &col_indices[r[0]..r[1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(
                    "column indices must be strictly increasing within a row",
                ));
            }
            if let Some(&c) = cols.last() {
                if c >= dim {
                    return Err(Error::invalid(format!("index {} out of range for dim {}", c, dim)));
                }
            }
        }
        Ok(SparseBatch {
            dim,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(indices, values)` of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        (&self.col_indices[span.clone()], &self.values[span])
    }

    pub fn row_pairs(&self, r: usize) -> Vec<(usize, f64)> {
        let (idx, val) = self.row(r);
        idx.iter().copied().zip(val.iter().copied()).collect()
    }

    /// Appends one already-canonical row.
    pub(crate) fn push_row_unchecked(&mut self, indices: &[usize], values: &[f64]) {
        self.col_indices.extend_from_slice(indices);
        self.values.extend_from_slice(values);
        self.row_offsets.push(self.col_indices.len());
    }

    /// Selects rows (with repetition) into a new batch.
    pub fn gather_rows(&self, rows: &[usize]) -> SparseBatch {
        let mut out = SparseBatch::empty(self.dim);
        for &r in rows {
            let (i, v) = self.row(r);
            out.push_row_unchecked(i, v);
        }
        out
    }

    /// Materializes the `[rows x dim]` dense matrix. Test and benchmark use only.
    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.num_rows(), self.dim]);
        for r in 0..self.num_rows() {
            let (idx, val) = self.row(r);
            let row = t.row_mut(r);
            for (&c, &v) in idx.iter().zip(val) {
                row[c] = v;
            }
        }
        t
    }

    /// Inverse of [`SparseBatch::to_dense`]; zero entries are dropped.
    pub fn from_dense(t: &Tensor) -> Result<SparseBatch> {
        let (rows, dim) = t.dims2()?;
        let mut out = SparseBatch::empty(dim);
        for r in 0..rows {
            let (idx, val): (Vec<usize>, Vec<f64>) = t
                .row(r)
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .unzip();
            out.push_row_unchecked(&idx, &val);
        }
        Ok(out)
    }
}

/// Canonical CSR from per-row `(index, value)` lists; sorts each row.
pub fn csr_from_rows(rows: &[Vec<(usize, f64)>], dim: usize) -> Result<SparseBatch> {
    let mut out = SparseBatch::empty(dim);
    let mut scratch: Vec<(usize, f64)> = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        scratch.clear();
        scratch.extend_from_slice(row);
        scratch.sort_by_key(|&(i, _)| i);
        for w in scratch.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::invalid(format!("duplicate index {} in row {}", w[0].0, r)));
            }
        }
        if let Some(&(i, _)) = scratch.last() {
            if i >= dim {
                return Err(Error::invalid(format!(
                    "index {} out of range for dim {} in row {}",
                    i, dim, r
                )));
            }
        }
        out.col_indices.extend(scratch.iter().map(|p| p.0));
        out.values.extend(scratch.iter().map(|p| p.1));
        out.row_offsets.push(out.col_indices.len());
    }
    Ok(out)
}

fn check(v: &SparseBatch, p: &LayerParams) -> Result<usize> {
    let (rows, out) = p.weights.value.dims2()?;
    if rows != v.dim() {
        return Err(Error::shape(format!(
            "sparse batch dim {} vs weight rows {}",
            v.dim(),
            rows
        )));
    }
    if p.bias.value.len() != out {
        return Err(Error::shape("sparse fc bias length != outputs"));
    }
    Ok(out)
}

/// `V W + b` for CSR `V`.
pub fn sparse_fc_forward(v: &SparseBatch, p: &LayerParams) -> Result<Tensor> {
    let out = check(v, p)?;
    let w = p.weights.value.data();
    let mut y = Vec::with_capacity(v.num_rows() * out);
    for r in 0..v.num_rows() {
        let start = y.len();
        y.extend_from_slice(p.bias.value.data());
        let dst = &mut y[start..];
        let (idx, val) = v.row(r);
        for (&c, &x) in idx.iter().zip(val) {
            axpy(x, &w[c * out..(c + 1) * out], dst);
        }
    }
    Tensor::new(&[v.num_rows(), out], y)
}

/// Accumulates `grad_W[j] += value * grad_out[row]` for each nonzero and the
/// column sums into the bias gradient. The sparse input is a leaf, so no input
/// gradient is produced.
pub fn sparse_fc_backward(v: &SparseBatch, p: &mut LayerParams, grad_out: &Tensor) -> Result<()> {
    let out = check(v, p)?;
    if grad_out.shape() != [v.num_rows(), out] {
        return Err(Error::shape(format!(
            "sparse fc grad_out {:?}, expected [{}, {}]",
            grad_out.shape(),
            v.num_rows(),
            out
        )));
    }
    let gw = p.weights.grad.data_mut();
    for r in 0..v.num_rows() {
        let g = grad_out.row(r);
        let (idx, val) = v.row(r);
        for (&c, &x) in idx.iter().zip(val) {
            axpy(x, g, &mut gw[c * out..(c + 1) * out]);
        }
    }
    let gb = p.bias.grad.data_mut();
    for r in 0..v.num_rows() {
        for (b, g) in gb.iter_mut().zip(grad_out.row(r)) {
            *b += g;
        }
    }
    Ok(())
}
