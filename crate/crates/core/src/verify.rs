//! Self-check suites: fast paths against the reference code in [`oracle`].
//!
//! Every suite reports the largest error it observed next to its tolerance.
//! [`Options::inject_flip_mutation`] swaps the flipped kernel for the
//! unflipped one in the gradient paths under test, which the gradient suites
//! must catch.

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv_same, flip, Matrix2D, RelKernel};
use crate::error::Result;
use crate::network::{Activation, Batch, LayerSpec, Mode, NetworkModel, Regularization, Shape3};
use crate::oracle;
use crate::tikhonov::{build_gamma, gamma_gradient, gamma_quadratic, FlatWeights, SlabGeometry};
use crate::visloss::{grad_vl_model_with_flipped, grad_with_flipped, vl_model, Norm, VrWeights};

/// Finite-difference step used by every FD suite.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error floor as a fraction of the reference gradient's largest entry.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    /// Number of individual instances compared.
    pub checks: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Extra facts worth printing (skipped samples, sparsity, ...).
    pub note: String,
}

impl SuiteReport {
    fn new(name: &'static str, checks: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name,
            checks,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
            note: String::new(),
        }
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<22} checks={:<5} max_err={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checks,
            self.max_error,
            self.tolerance
        )?;
        if !self.note.is_empty() {
            write!(f, "  ({})", self.note)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Options {
    pub seed: u64,
    /// Random images per (shape, kernel) pair in the gradient suites.
    pub images_per_case: usize,
    pub conv_instances: usize,
    pub tikhonov_geometries: usize,
    pub inject_flip_mutation: bool,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            seed: 0x5EED,
            images_per_case: 100,
            conv_instances: 200,
            tikhonov_geometries: 50,
            inject_flip_mutation: false,
        }
    }
}

impl Options {
    fn flipper(&self) -> fn(&RelKernel) -> RelKernel {
        if self.inject_flip_mutation {
            RelKernel::clone
        } else {
            flip
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix2D {
    Matrix2D::from_vec(rows, cols, uniform(rng, rows * cols)).expect("positive size")
}

fn random_kernel(rng: &mut ChaCha8Rng, halfwidth: usize) -> RelKernel {
    let side = 2 * halfwidth + 1;
    RelKernel::new(halfwidth, uniform(rng, side * side)).expect("odd square")
}

/// Runs every suite in a fixed order.
pub fn run_all(opts: &Options) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        conv_oracle(opts),
        flip_involution(opts),
        vl2_gradient(opts),
        vl1_gradient(opts),
        tikhonov_equivalence(opts)?,
        tikhonov_gradient(opts)?,
        composite_backprop(opts)?,
    ])
}

/// `conv_same` against the literal loop on random shapes and kernel sizes.
pub fn conv_oracle(opts: &Options) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xC0);
    let mut worst = 0.0f64;
    for _ in 0..opts.conv_instances {
        let rows = rng.random_range(1..=16);
        let cols = rng.random_range(1..=16);
        let k = rng.random_range(0..=3);
        let ker = random_kernel(&mut rng, k);
        let img = random_image(&mut rng, rows, cols);
        let fast = conv_same(&img, &ker);
        let slow = oracle::conv_brute(&img, &ker);
        worst = worst.max(oracle::max_abs_diff(fast.as_slice(), slow.as_slice()));
    }
    SuiteReport::new("conv_oracle", opts.conv_instances, worst, 1e-12)
}

/// `flip(flip(K)) == K` and `flip(K)(r) == K(-r)`, bit for bit.
pub fn flip_involution(opts: &Options) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xF1);
    let flipper = opts.flipper();
    let mut worst = 0.0f64;
    let n = 20;
    for _ in 0..n {
        let k = random_kernel(&mut rng, 2);
        let f = flipper(&k);
        worst = worst.max(oracle::max_abs_diff(flipper(&f).entries(), k.entries()));
        for (di, dj, a) in k.offsets() {
            worst = worst.max((f.at(-di, -dj) - a).abs());
        }
    }
    SuiteReport::new("flip_involution", n, worst, 0.0)
}

/// Kernels of the gradient suites: the Laplacian, a random 3x3 and a random 5x5.
fn gradient_cases(rng: &mut ChaCha8Rng) -> Vec<(usize, RelKernel)> {
    let mut cases = Vec::new();
    for side in [8, 16] {
        cases.push((side, RelKernel::laplacian()));
        cases.push((side, random_kernel(rng, 1)));
        cases.push((side, random_kernel(rng, 2)));
    }
    cases
}

/// VL2 gradient against central differences of the brute-force VL2.
pub fn vl2_gradient(opts: &Options) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x12);
    let flipper = opts.flipper();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for (side, ker) in gradient_cases(&mut rng) {
        let flipped = flipper(&ker);
        for _ in 0..opts.images_per_case {
            let img = random_image(&mut rng, side, side);
            let g = grad_with_flipped(&img, &ker, &flipped, Norm::L2);
            let fd = oracle::central_diff(img.as_slice(), FD_STEP, |x| {
                oracle::vl2_brute(&Matrix2D::from_vec(side, side, x.to_vec()).expect("same size"), &ker)
            });
            worst = worst.max(oracle::max_rel_err_scaled(g.as_slice(), &fd, &fd, REL_FLOOR));
            checks += 1;
        }
    }
    SuiteReport::new("vl2_gradient", checks, worst, 1e-6)
}

/// Smallest `|I conv K|` an image may have to enter the VL1 check; below it a
/// finite-difference probe could straddle the kink of `|x|`.
pub const KINK_MARGIN: f64 = 1e-3;

/// VL1 gradient against central differences, on images whose kernel response
/// stays clear of zero.
pub fn vl1_gradient(opts: &Options) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x11);
    let flipper = opts.flipper();
    let mut worst = 0.0f64;
    let (mut checks, mut skipped) = (0, 0);
    for (side, ker) in gradient_cases(&mut rng) {
        let flipped = flipper(&ker);
        let mut accepted = 0;
        while accepted < opts.images_per_case {
            let img = random_image(&mut rng, side, side);
            let min_resp = oracle::conv_brute(&img, &ker)
                .as_slice()
                .iter()
                .fold(f64::INFINITY, |m, x| m.min(x.abs()));
            if min_resp <= KINK_MARGIN {
                skipped += 1;
                continue;
            }
            accepted += 1;
            let g = grad_with_flipped(&img, &ker, &flipped, Norm::L1);
            let fd = oracle::central_diff(img.as_slice(), FD_STEP, |x| {
                oracle::vl1_brute(&Matrix2D::from_vec(side, side, x.to_vec()).expect("same size"), &ker)
            });
            worst = worst.max(oracle::max_rel_err_scaled(g.as_slice(), &fd, &fd, REL_FLOOR));
            checks += 1;
        }
    }
    let mut r = SuiteReport::new("vl1_gradient", checks, worst, 1e-5);
    r.note = format!("{skipped} images rejected by the kink filter");
    r
}

struct TikhonovCase {
    geometry: SlabGeometry,
    ker: RelKernel,
    w: VrWeights,
}

fn tikhonov_cases(opts: &Options) -> Vec<TikhonovCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7C);
    (0..opts.tikhonov_geometries)
        .map(|_| {
            let slab_count = rng.random_range(1..=8);
            let rows = rng.random_range(3..=12);
            let cols = rng.random_range(3..=12);
            let k = rng.random_range(0..=2);
            let ker = random_kernel(&mut rng, k);
            let values = uniform(&mut rng, slab_count * rows * cols);
            TikhonovCase {
                geometry: SlabGeometry { slab_count, rows, cols },
                ker,
                w: VrWeights::new(slab_count, 1, rows, cols, values).expect("consistent size"),
            }
        })
        .collect()
}

/// `||Gamma w||^2 == VL2` and the sparsity bound `nnz <= p (2k+1)^2`.
pub fn tikhonov_equivalence(opts: &Options) -> Result<SuiteReport> {
    let mut worst = 0.0f64;
    let mut nnz_ok = true;
    let cases = tikhonov_cases(opts);
    for c in &cases {
        let gamma = build_gamma(c.geometry, &c.ker)?;
        let q = gamma_quadratic(&gamma, &FlatWeights::from(&c.w))?;
        let v = vl_model(&c.w, &c.ker, Norm::L2)?;
        worst = worst.max((q - v).abs() / v.abs().max(f64::MIN_POSITIVE));
        nnz_ok &= gamma.nnz() <= c.geometry.weight_count() * c.ker.size();
    }
    let mut r = SuiteReport::new("tikhonov_equivalence", cases.len(), worst, 1e-10);
    r.passed &= nnz_ok;
    r.note = format!("nnz bound {}", if nnz_ok { "holds" } else { "VIOLATED" });
    Ok(r)
}

/// `2 Gamma^T Gamma w` against the double-convolution gradient.
pub fn tikhonov_gradient(opts: &Options) -> Result<SuiteReport> {
    let flipper = opts.flipper();
    let mut worst = 0.0f64;
    let cases = tikhonov_cases(opts);
    for c in &cases {
        let gamma = build_gamma(c.geometry, &c.ker)?;
        let reference = gamma_gradient(&gamma, &FlatWeights::from(&c.w))?;
        let fast = grad_vl_model_with_flipped(&c.w, &c.ker, &flipper(&c.ker), Norm::L2)?;
        worst = worst.max(oracle::max_rel_err_scaled(fast.flat(), &reference, &reference, REL_FLOOR));
    }
    Ok(SuiteReport::new("tikhonov_gradient", cases.len(), worst, 1e-9))
}

/// A small network (under 500 parameters, no dropout) whose first fc layer
/// carries the VR penalty, plus a batch for it.
pub fn composite_fixture(seed: u64) -> Result<(NetworkModel, Batch, Regularization)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        LayerSpec::dense(8, Activation::Tanh),
        LayerSpec::dense(6, Activation::Relu),
        LayerSpec::output(3),
    ];
    let model = NetworkModel::new(Shape3::new(1, 6, 6), layers, Some(0), &mut rng)?;
    let n = 5;
    let inputs = Array2::from_shape_fn((n, 36), |_| rng.random_range(0.0..1.0));
    let labels = (0..n).map(|i| i % 3).collect();
    let reg = Regularization {
        mu1: 0.03,
        mu2: 0.02,
        lambda: 0.05,
        kernel: RelKernel::laplacian(),
    };
    Ok((model, Batch::new(inputs, labels)?, reg))
}

/// Full composite gradient (cross-entropy + L2' + VL1 + VL2) against central
/// differences of the total loss over every parameter.
pub fn composite_backprop(opts: &Options) -> Result<SuiteReport> {
    let (mut model, batch, reg) = composite_fixture(opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cache = model.forward(&batch.inputs, Mode::Train, &mut rng)?;
    let analytic = model.backward(&cache, &batch.labels, &reg)?.assemble(&reg).flatten();
    drop(cache);
    let theta = model.flat_params();
    let mut failure = None;
    let fd = oracle::central_diff(&theta, FD_STEP, |x| {
        model.set_flat_params(x).expect("same length");
        match model.total_loss(&batch, &reg) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let err = oracle::max_rel_err_scaled(&analytic, &fd, &fd, REL_FLOOR);
    let mut r = SuiteReport::new("composite_backprop", theta.len(), err, 1e-5);
    r.note = format!("{} parameters", theta.len());
    Ok(r)
}
