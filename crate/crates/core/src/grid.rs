//! 8×8 grid tensors, per-cell argmax keypoints and the mutually consistent
//! correspondence set between two score maps.

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::map::DenseMap;
use crate::scalar::Scalar;

/// Side length of one grid cell in pixels.
pub const CELL: usize = 8;
/// Number of pixels in one grid cell.
pub const CELL_AREA: usize = CELL * CELL;

/// A `64 × h × w` view of an `8h × 8w` map. Entry `(k, i, j)` is the source
/// pixel at `y = 8i + k / 8`, `x = 8j + k % 8`.
///
/// Stored cell-major so that each 64-vector is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> GridTensor<T> {
    /// Grid rows `h`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Grid columns `w`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Dimensions `(8h, 8w)` of the source map.
    pub fn origin_shape(&self) -> (usize, usize) {
        (self.rows * CELL, self.cols * CELL)
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> T {
        self.data[(i * self.cols + j) * CELL_AREA + k]
    }

    /// The 64 responses of cell `(i, j)`.
    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &[T] {
        let start = (i * self.cols + j) * CELL_AREA;
        &self.data[start..start + CELL_AREA]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(CELL_AREA)
    }

    pub(crate) fn from_cells(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols * CELL_AREA);
        Self { rows, cols, data }
    }

    /// Inverse of [`to_grid_tensor`].
    pub fn to_map(&self) -> DenseMap<T> {
        let (h, w) = self.origin_shape();
        let mut out = DenseMap::zeros(h, w);
        for i in 0..self.rows {
            for j in 0..self.cols {
                for (k, &v) in self.cell(i, j).iter().enumerate() {
                    out.set(i * CELL + k / CELL, j * CELL + k % CELL, v);
                }
            }
        }
        out
    }
}

pub fn check_grid_aligned(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % CELL != 0 || width % CELL != 0 {
        return Err(Error::NotGridAligned { height, width });
    }
    Ok(())
}

/// Reshapes a map whose sides are multiples of 8 into a grid tensor.
pub fn to_grid_tensor<T: Scalar>(m: &DenseMap<T>) -> Result<GridTensor<T>> {
    check_grid_aligned(m.height(), m.width())?;
    let (rows, cols) = (m.height() / CELL, m.width() / CELL);
    let mut data = Vec::with_capacity(m.height() * m.width());
    for i in 0..rows {
        for j in 0..cols {
            for dy in 0..CELL {
                for dx in 0..CELL {
                    data.push(m.get(i * CELL + dy, j * CELL + dx));
                }
            }
        }
    }
    Ok(GridTensor { rows, cols, data })
}

/// Per-cell argmax index in `0..64`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridIndexMatrix {
    rows: usize,
    cols: usize,
    indices: Vec<u8>,
}

impl GridIndexMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.indices[i * self.cols + j] as usize
    }

    /// Pixel location of the selected point in cell `(i, j)`.
    pub fn point(&self, i: usize, j: usize) -> (usize, usize) {
        let k = self.get(i, j);
        (CELL * j + k % CELL, CELL * i + k / CELL)
    }
}

/// Index of the largest response per cell; ties go to the lowest index.
pub fn grid_argmax<T: Scalar>(g: &GridTensor<T>) -> GridIndexMatrix {
    let indices = g
        .cells()
        .map(|cell| {
            let mut best = 0usize;
            for (k, &v) in cell.iter().enumerate().skip(1) {
                if v > cell[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    GridIndexMatrix { rows: g.rows, cols: g.cols, indices }
}

/// Pixel coordinates `(x, y)` of in-cell index `k` of grid `(i, j)`.
pub fn grid_to_image_coords(k: usize, i: usize, j: usize) -> Result<(usize, usize)> {
    if k >= CELL_AREA {
        return Err(Error::InvalidArgument(format!("cell index {k} outside 0..64")));
    }
    Ok((CELL * j + k % CELL, CELL * i + k / CELL))
}

/// Grid quadruple: cell `(a, b)` in image 1 corresponds to cell `(c, d)` in
/// image 2 (row, column order on both sides).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Quad {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
}

/// The mutually consistent grid correspondences between two score maps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub quads: Vec<Quad>,
    /// Argmax pixel `(x, y)` of cell `(a, b)` in image 1.
    pub coords_1: Vec<(usize, usize)>,
    /// Argmax pixel `(p, q)` of cell `(c, d)` in image 2.
    pub coords_2: Vec<(usize, usize)>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.quads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quads.is_empty()
    }
}

/// Cell `(row, col)` containing the projection of `p`, or `None` when the
/// projection is at infinity or outside a `rows × cols` grid.
pub fn projected_cell(h: &Homography, p: (usize, usize), rows: usize, cols: usize) -> Option<(usize, usize)> {
    let [x, y] = h.project([p.0 as f64, p.1 as f64]).ok()?;
    let (gx, gy) = ((x / CELL as f64).floor(), (y / CELL as f64).floor());
    if gx >= 0.0 && gy >= 0.0 && gx < cols as f64 && gy < rows as f64 {
        Some((gy as usize, gx as usize))
    } else {
        None
    }
}

/// Builds set A from the per-cell argmax points of `s1` and `s2`: `(a,b,c,d)`
/// is kept iff the image-1 point of `(a,b)` projects by `h` into `(c,d)` and
/// the image-2 point of `(c,d)` projects by `h⁻¹` back into `(a,b)`.
pub fn build_correspondence_set<T: Scalar>(
    s1: &DenseMap<T>,
    s2: &DenseMap<T>,
    h: &Homography,
) -> Result<CorrespondenceSet> {
    if s1.dims() != s2.dims() {
        return Err(Error::Shape(format!("score maps {:?} vs {:?}", s1.dims(), s2.dims())));
    }
    let k1 = grid_argmax(&to_grid_tensor(s1)?);
    let k2 = grid_argmax(&to_grid_tensor(s2)?);
    correspondence_from_indices(&k1, &k2, h)
}

pub fn correspondence_from_indices(
    k1: &GridIndexMatrix,
    k2: &GridIndexMatrix,
    h: &Homography,
) -> Result<CorrespondenceSet> {
    let inv = h.inverse()?;
    let (rows, cols) = (k1.rows(), k1.cols());
    let mut set = CorrespondenceSet::default();
    for a in 0..rows {
        for b in 0..cols {
            let p1 = k1.point(a, b);
            let Some((c, d)) = projected_cell(h, p1, k2.rows(), k2.cols()) else {
                continue;
            };
            let p2 = k2.point(c, d);
            if projected_cell(&inv, p2, rows, cols) == Some((a, b)) {
                set.quads.push(Quad { a, b, c, d });
                set.coords_1.push(p1);
                set.coords_2.push(p2);
            }
        }
    }
    Ok(set)
}
