//! Node visualizations, image export and loss tables.
//!
//! A node's visualization is the unit-norm input that activates it most.
//! For a node directly fed by the input this is its normalized incoming
//! weight vector; deeper nodes use projected gradient ascent on the unit
//! sphere.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conv::{conv_same, Matrix2D, RelKernel};
use crate::error::{Error, Result};
use crate::network::{LayerKind, NetworkModel, Shape3};
use crate::visloss::{vl1, vl2};

fn reshape_channels(values: &[f64], shape: Shape3) -> Vec<Matrix2D> {
    values
        .chunks_exact(shape.rows * shape.cols)
        .map(|c| Matrix2D::from_vec(shape.rows, shape.cols, c.to_vec()).expect("valid geometry"))
        .collect()
}

fn normalized_row(model: &NetworkModel, layer: usize, node: usize) -> Result<Vec<f64>> {
    let params = model.params()[layer]
        .as_ref()
        .ok_or_else(|| Error::Visualization(format!("layer {layer} has no weights")))?;
    if node >= params.weights.nrows() {
        return Err(Error::Visualization(format!(
            "node {node} out of range for a layer of width {}",
            params.weights.nrows()
        )));
    }
    let w: Vec<f64> = params.weights.row(node).to_vec();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Visualization(format!("node {node} has a zero weight vector")));
    }
    Ok(w.into_iter().map(|x| x / norm).collect())
}

/// `w / ||w||` for a node of the first layer, one matrix per input channel.
/// The whole stack (all channels together) has unit L2 norm.
pub fn vis_first_layer(model: &NetworkModel, node: usize) -> Result<Vec<Matrix2D>> {
    if !matches!(model.layers().first().map(|l| l.kind), Some(LayerKind::Dense { .. })) {
        return Err(Error::Visualization(
            "the closed form needs a fully connected first layer".into(),
        ));
    }
    let w = normalized_row(model, 0, node)?;
    Ok(reshape_channels(&w, model.input_shape()))
}

/// Normalized incoming weights of a VR-layer node as per-channel slabs. For
/// fully connected nets this equals [`vis_first_layer`]; behind conv layers
/// it is a picture of the weights in feature-map space.
pub fn vr_node_image(model: &NetworkModel, node: usize) -> Result<Vec<Matrix2D>> {
    let v = model
        .vr_layer()
        .ok_or_else(|| Error::Visualization("model has no VR layer".into()))?;
    let w = normalized_row(model, v, node)?;
    Ok(reshape_channels(&w, model.layer_input_shape(v)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AscentOptions {
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Stop once a step moves the iterate by less than this.
    pub tolerance: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            step_size: 0.1,
            seed: 0,
            tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AscentResult {
    /// Final unit-norm input.
    pub input: Vec<f64>,
    pub activation: f64,
    /// Activation after each step (index 0 is the starting point).
    pub history: Vec<f64>,
    /// Norm of the iterate after each projection.
    pub norms: Vec<f64>,
    pub converged: bool,
}

impl AscentResult {
    pub fn channels(&self, shape: Shape3) -> Vec<Matrix2D> {
        reshape_channels(&self.input, shape)
    }
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= n);
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Projected gradient ascent `x <- normalize(x + eta * g / |g|)` from a
/// seeded random point on the unit sphere, where `g` is the gradient of the
/// node's activation. Scaling the step by `1 / |g|` keeps saturating
/// activations (tanh or sigmoid far from zero) from stalling the search.
pub fn activation_maximize(model: &NetworkModel, layer: usize, node: usize, opts: &AscentOptions) -> Result<AscentResult> {
    if opts.steps == 0 {
        return Err(Error::Visualization("steps must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x: Vec<f64> = (0..model.input_shape().len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut norms = vec![normalize(&mut x)];
    let (mut act, mut grad) = model.node_activation_grad(&x, layer, node)?;
    let mut history = vec![act];
    let mut converged = false;
    for step in 1..=opts.steps {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm == 0.0 {
            converged = true;
            break;
        }
        let prev = x.clone();
        let eta = opts.step_size / gnorm;
        for (xi, gi) in x.iter_mut().zip(&grad) {
            *xi += eta * gi;
        }
        norms.push(normalize(&mut x));
        (act, grad) = model.node_activation_grad(&x, layer, node)?;
        if !act.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Visualization(format!("non-finite activation at step {step}")));
        }
        history.push(act);
        let moved = x.iter().zip(&prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if moved < opts.tolerance {
            converged = true;
            break;
        }
    }
    Ok(AscentResult {
        input: x,
        activation: act,
        history,
        norms,
        converged,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Png => "png",
        }
    }
}

/// Min-max scaling to `0..=255`; constant images become mid-gray 128.
pub fn to_gray8(img: &Matrix2D) -> Vec<u8> {
    let (lo, hi) = img
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if hi <= lo || !(hi - lo).is_finite() {
        return vec![128; img.len()];
    }
    img.as_slice()
        .iter()
        .map(|&x| ((x - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

pub fn write_pgm<W: Write>(rows: usize, cols: usize, pixels: &[u8], mut out: W) -> std::io::Result<()> {
    write!(out, "P5\n{cols} {rows}\n255\n")?;
    out.write_all(pixels)?;
    out.flush()
}

/// Reads a binary (P5) 8-bit PGM, returning `(rows, cols, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    // Header tokens: magic, width, height, maxval; '#' starts a comment line.
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if reader.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("truncated PGM header"));
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_string));
    }
    if tokens[0] != "P5" || tokens.len() != 4 {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |t: &str| t.parse::<usize>().map_err(|_| bad("bad PGM header number"));
    let (cols, rows, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let mut pixels = Vec::new();
    reader.read_to_end(&mut pixels).map_err(|e| Error::io(path, e))?;
    if pixels.len() != rows * cols {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: rows * cols,
            actual: pixels.len(),
        });
    }
    Ok((rows, cols, pixels))
}

/// Writes an 8-bit grayscale image.
pub fn export_image(img: &Matrix2D, path: &Path, format: ImageFormat) -> Result<()> {
    let pixels = to_gray8(img);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let out = std::io::BufWriter::new(file);
    match format {
        ImageFormat::Pgm => write_pgm(img.rows(), img.cols(), &pixels, out).map_err(|e| Error::io(path, e)),
        ImageFormat::Png => {
            let mut enc = png::Encoder::new(out, img.cols() as u32, img.rows() as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let to_err = |e: png::EncodingError| Error::Format {
                path: path.to_path_buf(),
                msg: e.to_string(),
            };
            let mut writer = enc.write_header().map_err(to_err)?;
            writer.write_image_data(&pixels).map_err(to_err)?;
            writer.finish().map_err(to_err)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub id: String,
    pub vl1: f64,
    pub vl2: f64,
}

/// VL1 and VL2 of each image (raw pixel values, no normalization). With
/// `panels`, writes `<id>.<ext>` and `<id>_conv.<ext>` (the kernel response)
/// into that directory.
pub fn loss_table(
    images: &[(String, Matrix2D)],
    ker: &RelKernel,
    panels: Option<(&Path, ImageFormat)>,
) -> Result<Vec<LossRow>> {
    if images.is_empty() {
        return Err(Error::Visualization("loss table needs at least one image".into()));
    }
    images
        .iter()
        .map(|(id, img)| {
            if let Some((dir, fmt)) = panels {
                let ext = fmt.extension();
                export_image(img, &dir.join(format!("{id}.{ext}")), fmt)?;
                export_image(&conv_same(img, ker), &dir.join(format!("{id}_conv.{ext}")), fmt)?;
            }
            Ok(LossRow {
                id: id.clone(),
                vl1: vl1(img, ker),
                vl2: vl2(img, ker),
            })
        })
        .collect()
}

/// Rows sorted by descending VL2 (stable for ties).
pub fn sort_by_vl2_desc(rows: &mut [LossRow]) {
    rows.sort_by(|a, b| b.vl2.total_cmp(&a.vl2));
}

pub fn loss_table_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("image,vl1,vl2\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.id, r.vl1, r.vl2));
    }
    s
}

/// Plain-text table with aligned columns.
pub fn loss_table_text(rows: &[LossRow]) -> String {
    let w = rows.iter().map(|r| r.id.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<w$}  {:>14}  {:>14}\n", "image", "VL1", "VL2");
    for r in rows {
        s.push_str(&format!("{:<w$}  {:>14.4}  {:>14.4}\n", r.id, r.vl1, r.vl2));
    }
    s
}

/// I.i.d. Gaussian pixels, scaled to unit L2 norm.
pub fn white_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix2D {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    unit(Matrix2D::from_vec(rows, cols, data).expect("positive size"))
}

/// Isotropic Gaussian bump with random centre (middle half of the image) and
/// width (1/8 to 1/4 of the side), scaled to unit L2 norm.
pub fn gaussian_blob<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix2D {
    let ci = rng.random_range(0.25..0.75) * rows as f64;
    let cj = rng.random_range(0.25..0.75) * cols as f64;
    let side = rows.min(cols) as f64;
    let sigma = rng.random_range(side / 8.0..side / 4.0);
    let mut m = Matrix2D::zeros(rows, cols).expect("positive size");
    for i in 0..rows {
        for j in 0..cols {
            let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
            m.set(i, j, (-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    unit(m)
}

fn unit(m: Matrix2D) -> Matrix2D {
    let n = m.norm_l2();
    m.scale(1.0 / n)
}
