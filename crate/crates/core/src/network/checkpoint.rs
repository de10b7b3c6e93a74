//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! VISREG-CKPT 1\n
//! input <c>x<h>x<w>\n
//! vr_layer <index|none>\n
//! layer <token>\n          (one per layer, activation and padding always explicit)
//! end\n
//! <f64 little-endian payload: per parameterized layer, weights row-major then bias>
//! ```
//!
//! Parameters are stored as raw IEEE-754 bits, so `load(save(m)) == m` exactly.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::model::{LayerParams, NetworkModel};
use super::spec::{parse_layer, Activation, LayerKind, LayerSpec, Padding, Shape3};
use crate::error::{Error, Result};

const MAGIC: &str = "VISREG-CKPT 1";

fn full_token(spec: &LayerSpec) -> String {
    match spec.kind {
        LayerKind::Dense { units } => format!("fc({units}):{}", spec.activation.name()),
        LayerKind::Conv { size, channels, padding } => {
            format!("conv({size}x{size}, {channels}, {}):{}", padding.name(), spec.activation.name())
        }
        _ => spec.token(Activation::Relu, Padding::Valid),
    }
}

pub fn write<W: Write>(model: &NetworkModel, mut out: W) -> std::io::Result<()> {
    let s = model.input_shape();
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "input {}x{}x{}", s.channels, s.rows, s.cols)?;
    match model.vr_layer() {
        Some(v) => writeln!(out, "vr_layer {v}")?,
        None => writeln!(out, "vr_layer none")?,
    }
    for l in model.layers() {
        writeln!(out, "layer {}", full_token(l))?;
    }
    writeln!(out, "end")?;
    for p in model.params().iter().flatten() {
        for v in p.weights.iter().chain(p.bias.iter()) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read<R: Read>(input: R, path: &Path) -> Result<NetworkModel> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<R>| -> Result<String> {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(bad(path, "unexpected end of checkpoint header"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };

    let magic = next_line(&mut reader)?;
    if magic != MAGIC {
        return Err(bad(path, format!("not a checkpoint (header {magic:?})")));
    }
    let input = next_line(&mut reader)?;
    let dims: Vec<usize> = input
        .strip_prefix("input ")
        .ok_or_else(|| bad(path, "missing input line"))?
        .split('x')
        .map(|d| d.parse().map_err(|_| bad(path, format!("bad input shape {input:?}"))))
        .collect::<Result<_>>()?;
    let [c, h, w] = dims[..] else {
        return Err(bad(path, format!("bad input shape {input:?}")));
    };
    let vr = next_line(&mut reader)?;
    let vr_layer = match vr.strip_prefix("vr_layer ") {
        Some("none") => None,
        Some(v) => Some(v.parse().map_err(|_| bad(path, format!("bad vr_layer {v:?}")))?),
        None => return Err(bad(path, "missing vr_layer line")),
    };
    let mut layers = Vec::new();
    loop {
        let l = next_line(&mut reader)?;
        if l == "end" {
            break;
        }
        let token = l
            .strip_prefix("layer ")
            .ok_or_else(|| bad(path, format!("unexpected header line {l:?}")))?;
        layers.push(parse_layer(token, Activation::Relu, Padding::Valid).map_err(|e| bad(path, e.to_string()))?);
    }

    let input_shape = Shape3::new(c, h, w);
    // Build with throwaway weights to learn every parameter shape, then fill from the payload.
    let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(0);
    let skeleton = NetworkModel::new(input_shape, layers.clone(), vr_layer, &mut rng)
        .map_err(|e| bad(path, e.to_string()))?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let expected = skeleton.param_count() * 8;
    if payload.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
    let params = skeleton
        .params()
        .iter()
        .map(|p| {
            p.as_ref().map(|p| {
                let (r, c) = p.weights.dim();
                let weights = Array2::from_shape_fn((r, c), |_| values.next().expect("length checked"));
                let bias = Array1::from_shape_fn(p.bias.len(), |_| values.next().expect("length checked"));
                LayerParams { weights, bias }
            })
        })
        .collect();
    NetworkModel::from_parts(input_shape, layers, vr_layer, params)
}

pub fn save(model: &NetworkModel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write(model, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NetworkModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read(file, path)
}
