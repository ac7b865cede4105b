//! Dense per-cell maps over the `[H_f][W_f][N_C][N_A]` output lattice.

/// Extent of the output lattice. Cells are laid out row-major with the anchor
/// index varying fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub anchors: usize,
}

impl GridDims {
    pub fn new(h: usize, w: usize, classes: usize, anchors: usize) -> Self {
        GridDims { h, w, classes, anchors }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.classes * self.anchors
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of `(class, anchor)` grids, `N_C * N_A`.
    pub fn grids(&self) -> usize {
        self.classes * self.anchors
    }

    pub fn index(&self, i: usize, j: usize, c: usize, a: usize) -> usize {
        ((i * self.w + j) * self.classes + c) * self.anchors + a
    }

    /// `(class, anchor)` of a flat cell index.
    pub fn grid_of(&self, idx: usize) -> (usize, usize) {
        let k = idx % self.grids();
        (k / self.anchors, k % self.anchors)
    }

    /// `(row, col)` of a flat cell index.
    pub fn position_of(&self, idx: usize) -> (usize, usize) {
        let p = idx / self.grids();
        (p / self.w, p % self.w)
    }
}

/// A value per anchor cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMap<T> {
    dims: GridDims,
    data: Vec<T>,
}

impl<T: Clone> CellMap<T> {
    pub fn filled(dims: GridDims, value: T) -> Self {
        CellMap {
            dims,
            data: vec![value; dims.len()],
        }
    }
}

impl<T> CellMap<T> {
    pub fn from_vec(dims: GridDims, data: Vec<T>) -> Self {
        assert_eq!(data.len(), dims.len(), "cell map length does not match grid");
        CellMap { dims, data }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize, c: usize, a: usize) -> &T {
        &self.data[self.dims.index(i, j, c, a)]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> CellMap<U> {
        CellMap {
            dims: self.dims,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> std::ops::Index<usize> for CellMap<T> {
    type Output = T;
    fn index(&self, idx: usize) -> &T {
        &self.data[idx]
    }
}
