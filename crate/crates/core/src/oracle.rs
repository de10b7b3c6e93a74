//! Reference implementations used to check the fast paths.
//!
//! Nothing here shares code with `conv`, `visloss` or `tikhonov` beyond the
//! container types: the loops are written out literally so a bug in the
//! optimized kernels cannot hide in both places.

use crate::conv::{Matrix2D, RelKernel};

/// Literal quadruple loop over pixels and kernel offsets with explicit bounds checks.
pub fn conv_brute(img: &Matrix2D, ker: &RelKernel) -> Matrix2D {
    let n = img.rows() as isize;
    let m = img.cols() as isize;
    let k = ker.halfwidth() as isize;
    let side = ker.side();
    let mut out = Matrix2D::zeros(img.rows(), img.cols()).expect("non-empty image");
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for ri in -k..=k {
                for rj in -k..=k {
                    let p = i + ri;
                    let q = j + rj;
                    if p < 0 || p >= n || q < 0 || q >= m {
                        continue;
                    }
                    let a = ker.entries()[((ri + k) as usize) * side + (rj + k) as usize];
                    acc += a * img.get(p as usize, q as usize);
                }
            }
            out.set(i as usize, j as usize, acc);
        }
    }
    out
}

/// Neumaier-compensated sum. Loss differences in finite-difference checks
/// subtract two nearly equal totals, so the accumulation error matters.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

/// `sum (I conv K)^2` via the brute-force convolution.
pub fn vl2_brute(img: &Matrix2D, ker: &RelKernel) -> f64 {
    compensated_sum(conv_brute(img, ker).as_slice().iter().map(|x| x * x))
}

/// `sum |I conv K|` via the brute-force convolution.
pub fn vl1_brute(img: &Matrix2D, ker: &RelKernel) -> f64 {
    compensated_sum(conv_brute(img, ker).as_slice().iter().map(|x| x.abs()))
}

/// Central finite-difference gradient of `f` at `x` with step `h`, divided by
/// the step actually representable at each coordinate.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let (hi, lo) = (orig + h, orig - h);
            probe[i] = hi;
            let up = f(&probe);
            probe[i] = lo;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (hi - lo)
        })
        .collect()
}

/// Max relative error `|a - b| / max(|a|, |b|, floor)` over paired entries.
///
/// The floor keeps entries that are both near zero from dominating.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Max relative error with the floor tied to the scale of `reference`:
/// `|a - b| / max(|a|, |b|, rel_floor * max|reference|)`. Entries many orders
/// of magnitude below the gradient's scale are judged against that scale.
pub fn max_rel_err_scaled(a: &[f64], b: &[f64], reference: &[f64], rel_floor: f64) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    max_rel_err(a, b, rel_floor * scale)
}

/// Relative error of two vectors in the Euclidean norm, `||a - b|| / max(||a||, ||b||, floor)`.
pub fn rel_err_norm(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_quadratic() {
        let g = central_diff(&[1.0, -2.0], 1e-4, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(xs), 2.0);
    }

    #[test]
    fn brute_impulse() {
        let mut img = Matrix2D::zeros(3, 3).unwrap();
        img.set(1, 1, 1.0);
        assert_eq!(vl2_brute(&img, &RelKernel::laplacian()), 72.0);
        assert_eq!(vl1_brute(&img, &RelKernel::laplacian()), 16.0);
    }
}
