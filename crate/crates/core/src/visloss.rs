//! Visualization losses: how much high-frequency energy an image (or a
//! weight slab) carries under a high-pass kernel.
//!
//! * `VL2(I) = sum (I conv K)^2`, gradient `2 ((I conv K) conv flip(K))`
//! * `VL1(I) = sum |I conv K|`,  gradient `sign(I conv K) conv flip(K)`
//!
//! The VL1 gradient carries no factor 2; it is the exact (sub)gradient with
//! `sign(0) = 0`.

use crate::conv::{conv_same, conv_same_into, flip, Matrix2D, RelKernel};
use crate::error::{Error, Result};

/// Which norm of the kernel response is penalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Norm {
    L1,
    L2,
}

pub fn vl2(img: &Matrix2D, ker: &RelKernel) -> f64 {
    conv_same(img, ker).sum_squares()
}

pub fn vl1(img: &Matrix2D, ker: &RelKernel) -> f64 {
    conv_same(img, ker).sum_abs()
}

pub fn vl(img: &Matrix2D, ker: &RelKernel, norm: Norm) -> f64 {
    match norm {
        Norm::L1 => vl1(img, ker),
        Norm::L2 => vl2(img, ker),
    }
}

/// Signum with `sign(0) = 0`.
#[inline]
pub fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn grad_vl2(img: &Matrix2D, ker: &RelKernel) -> Matrix2D {
    grad_with_flipped(img, ker, &flip(ker), Norm::L2)
}

pub fn grad_vl1(img: &Matrix2D, ker: &RelKernel) -> Matrix2D {
    grad_with_flipped(img, ker, &flip(ker), Norm::L1)
}

/// Gradient of VL with a caller-supplied flipped kernel.
///
/// Hot loops flip once per model rather than once per slab; the verify
/// harness also uses this entry point to inject a broken flip.
pub fn grad_with_flipped(img: &Matrix2D, ker: &RelKernel, flipped: &RelKernel, norm: Norm) -> Matrix2D {
    let mut out = Matrix2D::zeros(img.rows(), img.cols()).expect("non-empty image");
    let mut scratch = vec![0.0; img.len()];
    slab_grad_into(
        img.rows(),
        img.cols(),
        img.as_slice(),
        ker,
        flipped,
        norm,
        &mut scratch,
        out.as_mut_slice(),
    );
    out
}

#[allow(clippy::too_many_arguments)]
fn slab_grad_into(
    rows: usize,
    cols: usize,
    slab: &[f64],
    ker: &RelKernel,
    flipped: &RelKernel,
    norm: Norm,
    response: &mut [f64],
    out: &mut [f64],
) {
    conv_same_into(rows, cols, slab, ker, response);
    match norm {
        Norm::L2 => response.iter_mut().for_each(|x| *x *= 2.0),
        Norm::L1 => response.iter_mut().for_each(|x| *x = signum0(*x)),
    }
    conv_same_into(rows, cols, response, flipped, out);
}

fn slab_loss(rows: usize, cols: usize, slab: &[f64], ker: &RelKernel, norm: Norm, response: &mut [f64]) -> f64 {
    conv_same_into(rows, cols, slab, ker, response);
    match norm {
        Norm::L2 => response.iter().map(|x| x * x).sum(),
        Norm::L1 => response.iter().map(|x| x.abs()).sum(),
    }
}

/// Incoming weights of the regularized layer, viewed as equally-shaped 2D slabs.
///
/// Storage is a single flat vector in canonical order: slab-major, then
/// row-major within a slab. Slab `node * channels + channel` holds the
/// weights node `node` receives from input channel `channel`. A dense layer
/// whose weight matrix is `[nodes, channels * rows * cols]` in row-major
/// order already has exactly this layout.
#[derive(Clone, Debug, PartialEq)]
pub struct VrWeights {
    nodes: usize,
    channels: usize,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl VrWeights {
    pub fn new(nodes: usize, channels: usize, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "slab geometry must be positive, got {channels} channel(s) of {rows}x{cols}"
            )));
        }
        let expected = nodes * channels * rows * cols;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            nodes,
            channels,
            rows,
            cols,
            values,
        })
    }

    /// Single-channel slabs built from a list of equally-shaped matrices, one per node.
    pub fn from_slabs(slabs: &[Matrix2D]) -> Result<Self> {
        let first = slabs.first().ok_or(Error::NoVrLayer)?;
        if slabs.iter().any(|s| !s.same_shape(first)) {
            return Err(Error::Shape("all slabs must share the same dimensions".into()));
        }
        let values = slabs.iter().flat_map(|s| s.as_slice().iter().copied()).collect();
        Self::new(slabs.len(), 1, first.rows(), first.cols(), values)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn slab_rows(&self) -> usize {
        self.rows
    }

    pub fn slab_cols(&self) -> usize {
        self.cols
    }

    pub fn slab_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn slab_count(&self) -> usize {
        self.nodes * self.channels
    }

    /// Canonical flattening (slab-major, row-major).
    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn slab(&self, idx: usize) -> &[f64] {
        let len = self.slab_len();
        &self.values[idx * len..(idx + 1) * len]
    }

    /// `(node, channel)` that slab `idx` belongs to.
    pub fn slab_owner(&self, idx: usize) -> (usize, usize) {
        (idx / self.channels, idx % self.channels)
    }

    pub fn slab_matrix(&self, idx: usize) -> Matrix2D {
        Matrix2D::from_vec(self.rows, self.cols, self.slab(idx).to_vec()).expect("validated geometry")
    }

    pub fn slabs(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.slab_len())
    }

    /// Same geometry, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.nodes, self.channels, self.rows, self.cols, values)
    }
}

/// `VL(M)`: per-slab losses summed in slab order.
pub fn vl_model(w: &VrWeights, ker: &RelKernel, norm: Norm) -> Result<f64> {
    vl_model_slice(w.slab_count(), w.rows, w.cols, &w.values, ker, norm)
}

/// Slice form of [`vl_model`] over `slab_count` slabs of `rows x cols`.
pub fn vl_model_slice(
    slab_count: usize,
    rows: usize,
    cols: usize,
    values: &[f64],
    ker: &RelKernel,
    norm: Norm,
) -> Result<f64> {
    if slab_count == 0 {
        return Err(Error::NoVrLayer);
    }
    let len = rows * cols;
    if values.len() != slab_count * len {
        return Err(Error::DimensionMismatch {
            expected: slab_count * len,
            actual: values.len(),
        });
    }
    let mut response = vec![0.0; len];
    Ok(values
        .chunks_exact(len)
        .map(|slab| slab_loss(rows, cols, slab, ker, norm, &mut response))
        .sum())
}

/// Per-slab gradient of [`vl_model`], same geometry as `w`.
pub fn grad_vl_model(w: &VrWeights, ker: &RelKernel, norm: Norm) -> Result<VrWeights> {
    grad_vl_model_with_flipped(w, ker, &flip(ker), norm)
}

pub fn grad_vl_model_with_flipped(w: &VrWeights, ker: &RelKernel, flipped: &RelKernel, norm: Norm) -> Result<VrWeights> {
    let mut out = vec![0.0; w.values.len()];
    grad_vl_model_slice_into(w.slab_count(), w.rows, w.cols, &w.values, ker, flipped, norm, &mut out)?;
    w.with_values(out)
}

/// Writes the VL gradient of every slab in `values` into `out` (overwritten).
#[allow(clippy::too_many_arguments)]
pub fn grad_vl_model_slice_into(
    slab_count: usize,
    rows: usize,
    cols: usize,
    values: &[f64],
    ker: &RelKernel,
    flipped: &RelKernel,
    norm: Norm,
    out: &mut [f64],
) -> Result<()> {
    if slab_count == 0 {
        return Err(Error::NoVrLayer);
    }
    let len = rows * cols;
    if values.len() != slab_count * len || out.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: slab_count * len,
            actual: values.len().min(out.len()),
        });
    }
    let mut response = vec![0.0; len];
    for (slab, dst) in values.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
        slab_grad_into(rows, cols, slab, ker, flipped, norm, &mut response, dst);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix2D {
        Matrix2D::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn impulse3() -> Matrix2D {
        let mut img = Matrix2D::zeros(3, 3).unwrap();
        img.set(1, 1, 1.0);
        img
    }

    #[test]
    fn zero_image_losses_and_gradients() {
        let z = Matrix2D::zeros(4, 4).unwrap();
        let lap = RelKernel::laplacian();
        assert_eq!(vl2(&z, &lap), 0.0);
        assert_eq!(vl1(&z, &lap), 0.0);
        assert!(grad_vl2(&z, &lap).as_slice().iter().all(|&g| g == 0.0));
        assert!(grad_vl1(&z, &lap).as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn impulse_values() {
        let lap = RelKernel::laplacian();
        assert_eq!(vl2(&impulse3(), &lap), 72.0);
        assert_eq!(vl1(&impulse3(), &lap), 16.0);
    }

    #[test]
    fn constant_image_interior_is_zero() {
        let img = Matrix2D::filled(6, 7, 3.5).unwrap();
        let lap = RelKernel::laplacian();
        let resp = conv_same(&img, &lap);
        for i in 1..5 {
            for j in 1..6 {
                assert_eq!(resp.get(i, j), 0.0);
            }
        }
        // Full-image value is border-only and matches the oracle.
        assert_eq!(vl2(&img, &lap), oracle::vl2_brute(&img, &lap));
    }

    #[test]
    fn vl1_grad_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_matrix(&mut rng, 8, 8);
        let lap = RelKernel::laplacian();
        assert_eq!(grad_vl1(&img, &lap), grad_vl1(&img.scale(2.0), &lap));
    }

    #[test]
    fn grad_vl2_asymmetric_kernel_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_matrix(&mut rng, 6, 6);
        let ker = RelKernel::new(1, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let g = grad_vl2(&img, &ker);
        let fd = oracle::central_diff(img.as_slice(), 1e-5, |x| {
            oracle::vl2_brute(&Matrix2D::from_vec(6, 6, x.to_vec()).unwrap(), &ker)
        });
        assert!(oracle::max_rel_err(g.as_slice(), &fd, 1e-3) < 1e-6);
    }

    #[test]
    fn model_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lap = RelKernel::laplacian();
        let a = random_matrix(&mut rng, 5, 4);
        let single = VrWeights::from_slabs(std::slice::from_ref(&a)).unwrap();
        assert_eq!(vl_model(&single, &lap, Norm::L2).unwrap(), vl2(&a, &lap));
        assert_eq!(vl_model(&single, &lap, Norm::L1).unwrap(), vl1(&a, &lap));
        let twice = VrWeights::from_slabs(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(vl_model(&twice, &lap, Norm::L2).unwrap(), 2.0 * vl2(&a, &lap));

        let slabs: Vec<_> = (0..10).map(|_| random_matrix(&mut rng, 5, 4)).collect();
        let w = VrWeights::from_slabs(&slabs).unwrap();
        let brute: f64 = slabs.iter().map(|s| oracle::vl2_brute(s, &lap)).sum();
        let got = vl_model(&w, &lap, Norm::L2).unwrap();
        assert!((got - brute).abs() <= 1e-12 * brute);
        let direct: f64 = slabs.iter().map(|s| vl2(s, &lap)).sum();
        assert_eq!(got, direct);
    }

    #[test]
    fn empty_slab_list_is_an_error() {
        assert!(matches!(VrWeights::from_slabs(&[]), Err(Error::NoVrLayer)));
        let lap = RelKernel::laplacian();
        assert!(matches!(
            vl_model_slice(0, 3, 3, &[], &lap, Norm::L2),
            Err(Error::NoVrLayer)
        ));
    }

    #[test]
    fn per_slab_gradients_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lap = RelKernel::laplacian();
        let slabs: Vec<_> = (0..3).map(|_| random_matrix(&mut rng, 6, 6)).collect();
        let w = VrWeights::from_slabs(&slabs).unwrap();
        for norm in [Norm::L1, Norm::L2] {
            let g = grad_vl_model(&w, &lap, norm).unwrap();
            for (i, s) in slabs.iter().enumerate() {
                let single = match norm {
                    Norm::L1 => grad_vl1(s, &lap),
                    Norm::L2 => grad_vl2(s, &lap),
                };
                assert_eq!(g.slab(i), single.as_slice());
            }
        }
        let zero = w.with_values(vec![0.0; w.flat().len()]).unwrap();
        let gz = grad_vl_model(&zero, &lap, Norm::L2).unwrap();
        assert!(gz.flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn three_slab_model_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lap = RelKernel::laplacian();
        let slabs: Vec<_> = (0..3).map(|_| random_matrix(&mut rng, 6, 6)).collect();
        let w = VrWeights::from_slabs(&slabs).unwrap();
        let g = grad_vl_model(&w, &lap, Norm::L2).unwrap();
        let fd = oracle::central_diff(w.flat(), 1e-5, |x| {
            x.chunks(36)
                .map(|c| oracle::vl2_brute(&Matrix2D::from_vec(6, 6, c.to_vec()).unwrap(), &lap))
                .sum()
        });
        assert!(oracle::max_rel_err(g.flat(), &fd, 1e-3) <= 1e-6);
    }

    #[test]
    fn slab_owner_layout() {
        let w = VrWeights::new(2, 3, 1, 1, (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(w.slab_owner(4), (1, 1));
        assert_eq!(w.slab(4), &[4.0]);
    }
}
