//! Observation masks and masked rating matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, ensure_same_shape, DenseMatrix};

/// Binary observation indicator `T` with at least one observed entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    matrix: DenseMatrix,
    /// Observed positions in row-major order.
    observed: Vec<(usize, usize)>,
}

impl Mask {
    pub fn from_matrix(matrix: DenseMatrix) -> Result<Self> {
        let mut observed = Vec::new();
        for i in 0..matrix.nrows() {
            for j in 0..matrix.ncols() {
                let t = matrix[(i, j)];
                if t == 1.0 {
                    observed.push((i, j));
                } else if t != 0.0 {
                    return Err(Error::invalid(format!(
                        "mask entry ({i},{j}) = {t} is not 0 or 1"
                    )));
                }
            }
        }
        if observed.is_empty() {
            return Err(Error::invalid("mask has no observed entries"));
        }
        Ok(Mask { matrix, observed })
    }

    pub fn from_indices(n1: usize, n2: usize, idx: &[(usize, usize)]) -> Result<Self> {
        let mut m = DenseMatrix::zeros(n1, n2);
        for &(i, j) in idx {
            if i >= n1 || j >= n2 {
                return Err(Error::invalid(format!("index ({i},{j}) outside {n1}x{n2}")));
            }
            m[(i, j)] = 1.0;
        }
        Mask::from_matrix(m)
    }

    pub fn full(n1: usize, n2: usize) -> Self {
        Mask::from_matrix(DenseMatrix::from_element(n1, n2, 1.0)).expect("nonempty full mask")
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.matrix.shape()
    }

    pub fn count(&self) -> usize {
        self.observed.len()
    }

    pub fn is_full(&self) -> bool {
        self.count() == self.nrows() * self.ncols()
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.matrix[(i, j)] == 1.0
    }

    pub fn observed(&self) -> &[(usize, usize)] {
        &self.observed
    }

    pub fn as_matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    /// `T ∘ M`.
    pub fn apply(&self, m: &DenseMatrix) -> DenseMatrix {
        self.matrix.component_mul(m)
    }

    pub(crate) fn check_conformable(&self, what: &'static str, m: &DenseMatrix) -> Result<()> {
        ensure_same_shape(what, &self.matrix, m)
    }
}

/// Observed values `Y` paired with their mask `T`; unobserved values are held at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMatrix {
    pub values: DenseMatrix,
    pub mask: Mask,
}

impl MaskedMatrix {
    pub fn new(values: &DenseMatrix, mask: Mask) -> Result<Self> {
        mask.check_conformable("values", values)?;
        let values = mask.apply(values);
        ensure_finite(&values, "observed values")?;
        Ok(MaskedMatrix { values, mask })
    }

    pub fn n1(&self) -> usize {
        self.mask.nrows()
    }

    pub fn n2(&self) -> usize {
        self.mask.ncols()
    }
}

/// One observed cell with its value and weight, the sparse view the solvers iterate over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub(crate) struct Cell {
    pub i: usize,
    pub j: usize,
    pub y: f64,
    pub w: f64,
}

pub(crate) fn observed_cells(y: &DenseMatrix, mask: &Mask, w: &DenseMatrix) -> Result<Vec<Cell>> {
    mask.check_conformable("Y", y)?;
    mask.check_conformable("W", w)?;
    let mut cells = Vec::with_capacity(mask.count());
    for &(i, j) in mask.observed() {
        let (yv, wv) = (y[(i, j)], w[(i, j)]);
        if !yv.is_finite() || !wv.is_finite() {
            return Err(Error::invalid(format!("non-finite Y or W at observed ({i},{j})")));
        }
        if wv < 0.0 {
            return Err(Error::invalid(format!("negative weight {wv} at ({i},{j})")));
        }
        cells.push(Cell { i, j, y: yv, w: wv });
    }
    Ok(cells)
}
