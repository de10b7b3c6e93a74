//! Same-size 2D convolution with kernels indexed relative to their centre.
//!
//! Output pixel `(i, j)` is `sum_r a_r * img[(i, j) + r]` over the offsets `r`
//! whose target pixel lies inside the image. Pixels outside the image
//! contribute nothing, which is the same as zero-extending the input.

use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`, used for images, responses and weight slabs.
#[derive(Clone, PartialEq)]
pub struct Matrix2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix2D {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn sum_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.sum_squares().sqrt()
    }
}

impl fmt::Debug for Matrix2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix2D {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}

/// Square kernel of side `2k+1` whose entries are addressed by offsets
/// `(di, dj)` in `-k..=k`, with `(0, 0)` the central element.
#[derive(Clone, Debug, PartialEq)]
pub struct RelKernel {
    halfwidth: usize,
    entries: Vec<f64>,
}

impl RelKernel {
    /// Kernel from its `(2k+1) x (2k+1)` entries in row-major order, top-left first.
    pub fn new(halfwidth: usize, entries: Vec<f64>) -> Result<Self> {
        let side = 2 * halfwidth + 1;
        if entries.len() != side * side {
            return Err(Error::Shape(format!(
                "kernel with halfwidth {halfwidth} needs {} entries, got {}",
                side * side,
                entries.len()
            )));
        }
        Ok(Self { halfwidth, entries })
    }

    /// Kernel from a square grid with odd side.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let side = rows.len();
        if side.is_multiple_of(2) {
            return Err(Error::Shape(format!("kernel side must be odd, got {side}")));
        }
        if rows.iter().any(|r| r.as_ref().len() != side) {
            return Err(Error::Shape("kernel must be square".into()));
        }
        let entries = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(side / 2, entries)
    }

    /// The 3x3 Laplacian stencil: 8 at the centre, -1 on all eight neighbours.
    pub fn laplacian() -> Self {
        let mut entries = vec![-1.0; 9];
        entries[4] = 8.0;
        Self {
            halfwidth: 1,
            entries,
        }
    }

    /// 3x3 four-neighbour Laplacian: 4 at the centre, -1 on the axis neighbours.
    pub fn laplacian4() -> Self {
        Self {
            halfwidth: 1,
            entries: vec![0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0],
        }
    }

    /// `1x1` kernel holding a single value; with value 1 the convolution is the identity.
    pub fn scalar(value: f64) -> Self {
        Self {
            halfwidth: 0,
            entries: vec![value],
        }
    }

    /// Look up a kernel by name (`laplacian`, `laplacian4`, `identity`).
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "laplacian" | "laplacian8" => Ok(Self::laplacian()),
            "laplacian4" => Ok(Self::laplacian4()),
            "identity" => Ok(Self::scalar(1.0)),
            other => Err(Error::Config(format!(
                "unknown kernel {other:?} (expected laplacian, laplacian4 or identity)"
            ))),
        }
    }

    pub fn halfwidth(&self) -> usize {
        self.halfwidth
    }

    pub fn side(&self) -> usize {
        2 * self.halfwidth + 1
    }

    /// Number of entries, `(2k+1)^2`.
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Entry at relative offset `(di, dj)`; both must lie in `-k..=k`.
    #[inline]
    pub fn at(&self, di: isize, dj: isize) -> f64 {
        let k = self.halfwidth as isize;
        debug_assert!(di.abs() <= k && dj.abs() <= k);
        self.entries[((di + k) as usize) * self.side() + (dj + k) as usize]
    }

    /// Iterates `(di, dj, a)` over all kernel entries.
    pub fn offsets(&self) -> impl Iterator<Item = (isize, isize, f64)> + '_ {
        let k = self.halfwidth as isize;
        let side = self.side();
        self.entries.iter().enumerate().map(move |(idx, &a)| {
            ((idx / side) as isize - k, (idx % side) as isize - k, a)
        })
    }
}

/// Same-size convolution with implicit zero extension.
pub fn conv_same(img: &Matrix2D, ker: &RelKernel) -> Matrix2D {
    let mut out = vec![0.0; img.len()];
    conv_same_into(img.rows, img.cols, &img.data, ker, &mut out);
    Matrix2D {
        rows: img.rows,
        cols: img.cols,
        data: out,
    }
}

/// Slice form of [`conv_same`]; `out` is overwritten.
///
/// Loops over kernel offsets outermost so the inner loop is a contiguous
/// axpy over the rows the offset keeps in bounds.
pub fn conv_same_into(rows: usize, cols: usize, img: &[f64], ker: &RelKernel, out: &mut [f64]) {
    debug_assert_eq!(img.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    out.fill(0.0);
    let (n, m) = (rows as isize, cols as isize);
    for (di, dj, a) in ker.offsets() {
        if a == 0.0 {
            continue;
        }
        // Output rows i with 0 <= i + di < n, columns j with 0 <= j + dj < m.
        let i_lo = (-di).max(0);
        let i_hi = (n - di).min(n);
        let j_lo = (-dj).max(0);
        let j_hi = (m - dj).min(m);
        if i_lo >= i_hi || j_lo >= j_hi {
            continue;
        }
        let width = (j_hi - j_lo) as usize;
        for i in i_lo..i_hi {
            let src_start = ((i + di) * m + j_lo + dj) as usize;
            let dst_start = (i * m + j_lo) as usize;
            let src = &img[src_start..src_start + width];
            let dst = &mut out[dst_start..dst_start + width];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
        }
    }
}

/// Kernel reflected horizontally and vertically: entry `(i, j)` of the result
/// is entry `(-i, -j)` of the input.
pub fn flip(ker: &RelKernel) -> RelKernel {
    RelKernel {
        halfwidth: ker.halfwidth,
        entries: ker.entries.iter().rev().copied().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dimension_rejected() {
        assert!(Matrix2D::zeros(0, 3).is_err());
        assert!(Matrix2D::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn kernel_centre_lookup() {
        let k = RelKernel::laplacian();
        assert_eq!(k.at(0, 0), 8.0);
        assert_eq!(k.at(-1, 1), -1.0);
        assert_eq!(k.side(), 3);
        assert!(RelKernel::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).is_err());
    }

    #[test]
    fn zero_image_gives_zero() {
        let img = Matrix2D::zeros(3, 3).unwrap();
        let out = conv_same(&img, &RelKernel::laplacian());
        assert!(out.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn impulse_response_is_flipped_kernel() {
        let mut img = Matrix2D::zeros(3, 3).unwrap();
        img.set(1, 1, 1.0);
        let lap = RelKernel::laplacian();
        assert_eq!(conv_same(&img, &lap).as_slice(), lap.entries());

        let ker = RelKernel::new(1, (1..=9).map(f64::from).collect()).unwrap();
        assert_eq!(conv_same(&img, &ker).as_slice(), flip(&ker).entries());
    }

    #[test]
    fn ones_image_with_laplacian() {
        // Interior 8 - 8 = 0; corners keep 3 neighbours (8 - 3 = 5); edges keep 5 (8 - 5 = 3).
        let img = Matrix2D::filled(3, 3, 1.0).unwrap();
        let out = conv_same(&img, &RelKernel::laplacian());
        assert_eq!(out.as_slice(), &[5.0, 3.0, 5.0, 3.0, 0.0, 3.0, 5.0, 3.0, 5.0]);
    }

    #[test]
    fn flip_negates_offsets() {
        let lap = RelKernel::laplacian();
        assert_eq!(flip(&lap), lap);

        let mut e = vec![0.0; 9];
        e[0] = 1.0; // a_{-1,-1}
        let f = flip(&RelKernel::new(1, e).unwrap());
        assert_eq!(f.at(1, 1), 1.0);
        assert_eq!(f.offsets().filter(|t| t.2 != 0.0).count(), 1);
    }

    #[test]
    fn kernel_wider_than_image() {
        let img = Matrix2D::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let ker = RelKernel::new(2, (0..25).map(f64::from).collect()).unwrap();
        let out = conv_same(&img, &ker);
        // out(0,0) = a(0,0)*1 + a(0,1)*2 ; out(0,1) = a(0,-1)*1 + a(0,0)*2
        assert_eq!(out.as_slice(), &[12.0 + 13.0 * 2.0, 11.0 + 12.0 * 2.0]);
    }
}
