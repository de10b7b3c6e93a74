//! Sparse Tikhonov matrix `Gamma` with `VL2(M) = ||Gamma w||^2`.
//!
//! One row per output pixel of every slab's convolution. Row `(s, i, j)` holds
//! the kernel coefficient `a_r` at the column of weight `(s, (i, j) + r)` for
//! every in-bounds offset `r`, so `Gamma` is block-diagonal across slabs with
//! at most `(2k+1)^2` nonzeros per row.
//!
//! Columns follow the canonical weight order: slab-major, then row-major.

use std::io::Write;
use std::path::Path;

use crate::conv::RelKernel;
use crate::error::{Error, Result};

/// Slab geometry of the regularized layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlabGeometry {
    pub slab_count: usize,
    pub rows: usize,
    pub cols: usize,
}

impl SlabGeometry {
    pub fn weight_count(&self) -> usize {
        self.slab_count * self.rows * self.cols
    }
}

/// Concatenated regularized-layer weights in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatWeights(pub Vec<f64>);

impl FlatWeights {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<&crate::visloss::VrWeights> for FlatWeights {
    fn from(w: &crate::visloss::VrWeights) -> Self {
        FlatWeights(w.flat().to_vec())
    }
}

/// Row-list sparse matrix: each row keeps `(column, value)` pairs sorted by column.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMat {
    n_rows: usize,
    n_cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseStats {
    pub nnz: usize,
    pub density: f64,
}

impl SparseMat {
    /// Validates sorted, in-bounds, strictly increasing columns and drops explicit zeros.
    pub fn from_rows(n_rows: usize, n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() != n_rows {
            return Err(Error::DimensionMismatch {
                expected: n_rows,
                actual: rows.len(),
            });
        }
        let mut cleaned = Vec::with_capacity(n_rows);
        for (r, row) in rows.into_iter().enumerate() {
            let mut prev: Option<usize> = None;
            for &(c, _) in &row {
                if c >= n_cols {
                    return Err(Error::Shape(format!("row {r}: column {c} out of bounds ({n_cols})")));
                }
                if prev.is_some_and(|p| p >= c) {
                    return Err(Error::Shape(format!("row {r}: columns not strictly increasing")));
                }
                prev = Some(c);
            }
            cleaned.push(row.into_iter().filter(|&(_, v)| v != 0.0).collect());
        }
        Ok(Self {
            n_rows,
            n_cols,
            rows: cleaned,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn stats(&self) -> SparseStats {
        let nnz = self.nnz();
        SparseStats {
            nnz,
            density: nnz as f64 / (self.n_rows as f64 * self.n_cols as f64),
        }
    }

    /// `y = A x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_cols {
            return Err(Error::DimensionMismatch {
                expected: self.n_cols,
                actual: x.len(),
            });
        }
        Ok(self
            .rows
            .iter()
            .map(|row| row.iter().map(|&(c, v)| v * x[c]).sum())
            .collect())
    }

    /// `y = A^T x`
    pub fn matvec_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_rows {
            return Err(Error::DimensionMismatch {
                expected: self.n_rows,
                actual: x.len(),
            });
        }
        let mut y = vec![0.0; self.n_cols];
        for (row, &xr) in self.rows.iter().zip(x) {
            for &(c, v) in row {
                y[c] += v * xr;
            }
        }
        Ok(y)
    }

    /// Writes `row col value` triplets, one per line, in row then column order.
    pub fn write_triplets<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# {} {} {}", self.n_rows, self.n_cols, self.nnz())?;
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                writeln!(out, "{r} {c} {v:e}")?;
            }
        }
        Ok(())
    }

    pub fn export_triplets(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_triplets(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }
}

/// Builds `Gamma` for `geometry.slab_count` slabs of `rows x cols` under `ker`.
pub fn build_gamma(geometry: SlabGeometry, ker: &RelKernel) -> Result<SparseMat> {
    let SlabGeometry { slab_count, rows, cols } = geometry;
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("slab dimensions must be positive, got {rows}x{cols}")));
    }
    let slab_len = rows * cols;
    let k = ker.halfwidth() as isize;
    let (n, m) = (rows as isize, cols as isize);
    let mut out = Vec::with_capacity(slab_count * slab_len);
    for s in 0..slab_count {
        let base = s * slab_len;
        for i in 0..n {
            for j in 0..m {
                // Offsets iterate row-major so columns come out sorted.
                let mut row = Vec::with_capacity(ker.size());
                for di in -k..=k {
                    let p = i + di;
                    if p < 0 || p >= n {
                        continue;
                    }
                    for dj in -k..=k {
                        let q = j + dj;
                        if q < 0 || q >= m {
                            continue;
                        }
                        let a = ker.at(di, dj);
                        if a != 0.0 {
                            row.push((base + (p * m + q) as usize, a));
                        }
                    }
                }
                out.push(row);
            }
        }
    }
    Ok(SparseMat {
        n_rows: slab_count * slab_len,
        n_cols: slab_count * slab_len,
        rows: out,
    })
}

/// `||Gamma w||^2`
pub fn gamma_quadratic(gamma: &SparseMat, w: &FlatWeights) -> Result<f64> {
    Ok(gamma.matvec(&w.0)?.iter().map(|x| x * x).sum())
}

/// Gradient of `||Gamma w||^2`, i.e. `2 Gamma^T (Gamma w)`.
pub fn gamma_gradient(gamma: &SparseMat, w: &FlatWeights) -> Result<Vec<f64>> {
    let gw = gamma.matvec(&w.0)?;
    let mut g = gamma.matvec_transpose(&gw)?;
    g.iter_mut().for_each(|x| *x *= 2.0);
    Ok(g)
}

pub fn gamma_stats(gamma: &SparseMat) -> SparseStats {
    gamma.stats()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(slab_count: usize, rows: usize, cols: usize) -> SlabGeometry {
        SlabGeometry { slab_count, rows, cols }
    }

    #[test]
    fn scalar_kernel_is_identity() {
        let g = build_gamma(geom(1, 1, 1), &RelKernel::scalar(1.0)).unwrap();
        assert_eq!(g, SparseMat::identity(1));
        assert_eq!(gamma_quadratic(&g, &FlatWeights(vec![3.0])).unwrap(), 9.0);
        let s = gamma_stats(&g);
        assert_eq!((s.nnz, s.density), (1, 1.0));
    }

    #[test]
    fn laplacian_3x3_rows() {
        let g = build_gamma(geom(1, 3, 3), &RelKernel::laplacian()).unwrap();
        assert_eq!((g.n_rows(), g.n_cols()), (9, 9));
        let centre = g.row(4);
        assert_eq!(centre.len(), 9);
        assert_eq!(centre.iter().filter(|e| e.1 == 8.0).count(), 1);
        assert_eq!(centre.iter().filter(|e| e.1 == -1.0).count(), 8);
        for corner in [0, 2, 6, 8] {
            assert_eq!(g.row(corner).len(), 4);
        }
        for edge in [1, 3, 5, 7] {
            assert_eq!(g.row(edge).len(), 6);
        }
    }

    #[test]
    fn two_slabs_block_diagonal() {
        let lap = RelKernel::laplacian();
        let one = build_gamma(geom(1, 3, 3), &lap).unwrap();
        let two = build_gamma(geom(2, 3, 3), &lap).unwrap();
        assert_eq!((two.n_rows(), two.n_cols()), (18, 18));
        for r in 0..9 {
            assert_eq!(two.row(r), one.row(r));
            let shifted: Vec<_> = one.row(r).iter().map(|&(c, v)| (c + 9, v)).collect();
            assert_eq!(two.row(r + 9), shifted.as_slice());
        }
    }

    #[test]
    fn identity_quadratic_and_zero_weights() {
        let w = FlatWeights(vec![1.0, -2.0, 0.5]);
        assert_eq!(gamma_quadratic(&SparseMat::identity(3), &w).unwrap(), 5.25);
        let g = build_gamma(geom(1, 1, 3), &RelKernel::laplacian()).unwrap();
        assert_eq!(gamma_quadratic(&g, &FlatWeights(vec![0.0; 3])).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let g = SparseMat::identity(3);
        assert!(matches!(
            gamma_quadratic(&g, &FlatWeights(vec![1.0; 2])),
            Err(Error::DimensionMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn nnz_10x10_matches_enumeration() {
        let g = build_gamma(geom(1, 10, 10), &RelKernel::laplacian()).unwrap();
        // Count in-bounds neighbourhoods directly.
        let mut count = 0;
        for i in 0..10i32 {
            for j in 0..10i32 {
                for di in -1..=1 {
                    for dj in -1..=1 {
                        if (0..10).contains(&(i + di)) && (0..10).contains(&(j + dj)) {
                            count += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(g.nnz(), count);
        assert!(g.nnz() <= 900);
    }

    #[test]
    fn density_shrinks_with_slab_count() {
        let lap = RelKernel::laplacian();
        let mut last = f64::INFINITY;
        for slabs in 1..=4 {
            let g = build_gamma(geom(slabs, 6, 6), &lap).unwrap();
            let s = gamma_stats(&g);
            assert!(s.density <= lap.size() as f64 / (slabs * 36) as f64 + 1e-15);
            assert!(s.density < last);
            last = s.density;
        }
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(SparseMat::from_rows(1, 2, vec![vec![(1, 1.0), (0, 1.0)]]).is_err());
        assert!(SparseMat::from_rows(1, 2, vec![vec![(2, 1.0)]]).is_err());
        let m = SparseMat::from_rows(1, 2, vec![vec![(0, 0.0), (1, 2.0)]]).unwrap();
        assert_eq!(m.nnz(), 1);
    }

    #[test]
    fn triplet_export_sorted() {
        let g = build_gamma(geom(1, 2, 2), &RelKernel::laplacian()).unwrap();
        let mut buf = Vec::new();
        g.write_triplets(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# 4 4 16"));
        let keys: Vec<(usize, usize)> = lines
            .map(|l| {
                let mut it = l.split_whitespace();
                (it.next().unwrap().parse().unwrap(), it.next().unwrap().parse().unwrap())
            })
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
