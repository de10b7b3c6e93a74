//! Layer vocabulary and the `input(...) -- fc(n) -- ...` architecture syntax.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Channel-major tensor shape `(channels, rows, cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, rows: usize, cols: usize) -> Self {
        Self { channels, rows, cols }
    }

    pub const fn flat(len: usize) -> Self {
        Self::new(1, 1, len)
    }

    pub fn len(&self) -> usize {
        self.channels * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.rows, self.cols)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Tanh,
    None,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
            Activation::None => z,
        }
    }

    /// Derivative at pre-activation `z` (output `a` is accepted for callers
    /// that have it). Saturating activations use `e / (1 + e)^2` forms, which
    /// stay positive where `a (1 - a)` or `1 - a^2` would round to zero.
    #[inline]
    pub fn derivative(self, z: f64, _a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let e = (-z.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            Activation::Tanh => {
                let e = (-2.0 * z.abs()).exp();
                4.0 * e / ((1.0 + e) * (1.0 + e))
            }
            Activation::None => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::None => "none",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "none" | "linear" | "identity" => Ok(Activation::None),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Zero padding of convolution layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Padding {
    /// No padding, output shrinks by `size - 1`.
    #[default]
    Valid,
    /// `size / 2` zeros on every side, output keeps the input size.
    Same,
}

impl FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "valid" => Ok(Padding::Valid),
            "same" => Ok(Padding::Same),
            other => Err(Error::Config(format!("unknown conv padding {other:?} (valid|same)"))),
        }
    }
}

impl Padding {
    pub fn name(self) -> &'static str {
        match self {
            Padding::Valid => "valid",
            Padding::Same => "same",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerKind {
    Dense { units: usize },
    Conv { size: usize, channels: usize, padding: Padding },
    MaxPool { size: usize },
    Dropout { p: f64 },
    /// Dense layer followed by softmax.
    Output { classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(units: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense { units },
            activation,
        }
    }

    pub fn conv(size: usize, channels: usize, padding: Padding, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Conv { size, channels, padding },
            activation,
        }
    }

    pub fn maxpool(size: usize) -> Self {
        Self {
            kind: LayerKind::MaxPool { size },
            activation: Activation::None,
        }
    }

    pub fn dropout(p: f64) -> Self {
        Self {
            kind: LayerKind::Dropout { p },
            activation: Activation::None,
        }
    }

    pub fn output(classes: usize) -> Self {
        Self {
            kind: LayerKind::Output { classes },
            activation: Activation::None,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Dense { .. } | LayerKind::Conv { .. } | LayerKind::Output { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            LayerKind::Dense { units } => units > 0,
            LayerKind::Conv { size, channels, .. } => size > 0 && channels > 0,
            LayerKind::MaxPool { size } => size > 0,
            LayerKind::Dropout { p } => (0.0..1.0).contains(&p),
            LayerKind::Output { classes } => classes > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid layer {}: sizes must be positive and dropout p in [0,1)",
                self.token(Activation::Relu, Padding::Valid)
            )))
        }
    }

    /// Output shape given the input shape.
    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        Ok(match self.kind {
            LayerKind::Dense { units } => Shape3::flat(units),
            LayerKind::Output { classes } => Shape3::flat(classes),
            LayerKind::Conv { size, channels, padding } => {
                let (r, c) = match padding {
                    Padding::Same => {
                        if size % 2 == 0 {
                            return Err(Error::Shape(format!("same padding needs an odd kernel, got {size}")));
                        }
                        (input.rows, input.cols)
                    }
                    Padding::Valid => {
                        if input.rows < size || input.cols < size {
                            return Err(Error::Shape(format!(
                                "conv({size}x{size}) does not fit a {}x{} input",
                                input.rows, input.cols
                            )));
                        }
                        (input.rows - size + 1, input.cols - size + 1)
                    }
                };
                Shape3::new(channels, r, c)
            }
            LayerKind::MaxPool { size } => {
                Shape3::new(input.channels, input.rows.div_ceil(size), input.cols.div_ceil(size))
            }
            LayerKind::Dropout { .. } => input,
        })
    }

    /// Architecture-string token. The activation suffix is written only when it
    /// differs from `default_act`; the padding suffix only when it differs from
    /// `default_pad`.
    pub fn token(&self, default_act: Activation, default_pad: Padding) -> String {
        let base = match self.kind {
            LayerKind::Dense { units } => format!("fc({units})"),
            LayerKind::Conv { size, channels, padding } => {
                if padding == default_pad {
                    format!("conv({size}x{size}, {channels})")
                } else {
                    format!("conv({size}x{size}, {channels}, {})", padding.name())
                }
            }
            LayerKind::MaxPool { size } => format!("maxpool({size}x{size})"),
            LayerKind::Dropout { p } => format!("dropout({p})"),
            LayerKind::Output { classes } => format!("output({classes})"),
        };
        let activated = matches!(self.kind, LayerKind::Dense { .. } | LayerKind::Conv { .. });
        if activated && self.activation != default_act {
            format!("{base}:{}", self.activation.name())
        } else {
            base
        }
    }
}

/// Declared input of an architecture string.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputDecl {
    /// `input(784)`: a flat count that must equal the data's `c * h * w`.
    Flat(usize),
    /// `input(28x28)`: spatial size; channels come from the data.
    Spatial { rows: usize, cols: usize },
    /// `input(3x32x32)`
    Full(Shape3),
}

impl InputDecl {
    /// Resolves against the data's actual shape.
    pub fn resolve(&self, data: Shape3) -> Result<Shape3> {
        let ok = match *self {
            InputDecl::Flat(n) => n == data.len(),
            InputDecl::Spatial { rows, cols } => rows == data.rows && cols == data.cols,
            InputDecl::Full(s) => s == data,
        };
        if ok {
            Ok(data)
        } else {
            Err(Error::Config(format!(
                "architecture declares {} but the data has shape {data}",
                self.token()
            )))
        }
    }

    /// Shape implied by the declaration alone (flat inputs become `1 x 1 x n`).
    pub fn default_shape(&self) -> Shape3 {
        match *self {
            InputDecl::Flat(n) => Shape3::flat(n),
            InputDecl::Spatial { rows, cols } => Shape3::new(1, rows, cols),
            InputDecl::Full(s) => s,
        }
    }

    pub fn token(&self) -> String {
        match *self {
            InputDecl::Flat(n) => format!("input({n})"),
            InputDecl::Spatial { rows, cols } => format!("input({rows}x{cols})"),
            InputDecl::Full(s) => format!("input({}x{}x{})", s.channels, s.rows, s.cols),
        }
    }
}

/// A parsed architecture: declared input plus the layer stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input: InputDecl,
    pub layers: Vec<LayerSpec>,
}

/// Named architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    MnistFc,
    MnistConv,
    CifarConv,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::MnistFc, Preset::MnistConv, Preset::CifarConv];

    pub fn name(self) -> &'static str {
        match self {
            Preset::MnistFc => "mnist_fc",
            Preset::MnistConv => "mnist_conv",
            Preset::CifarConv => "cifar_conv",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown architecture preset {name:?}")))
    }

    /// Layer sequence as an architecture string.
    pub fn tokens(self) -> &'static str {
        match self {
            Preset::MnistFc => {
                "input(784) -- fc(1000) -- dropout(0.3) -- fc(1000) -- dropout(0.3) -- fc(1000) -- output(10)"
            }
            Preset::MnistConv => {
                "input(28x28) -- conv(3x3, 64) -- conv(3x3, 64) -- dropout(0.1) -- maxpool(3x3) -- dropout(0.1) -- fc(1024) -- output(10)"
            }
            Preset::CifarConv => {
                "input(32x32) -- conv(5x5, 64) -- dropout(0.1) -- maxpool(3x3) -- conv(5x5, 64) -- dropout(0.1) -- maxpool(3x3) -- conv(5x5, 64) -- dropout(0.1) -- maxpool(3x3) -- dropout(0.1) -- fc(384) -- dropout(0.1) -- fc(192) -- dropout(0.1) -- output(10)"
            }
        }
    }

    /// Padding the preset's conv layers need to keep every layer non-empty.
    pub fn conv_padding(self) -> Padding {
        match self {
            // 32 -> conv5 valid -> 28 -> pool -> 10 -> 6 -> pool -> 2 leaves no room for the third conv.
            Preset::CifarConv => Padding::Same,
            _ => Padding::Valid,
        }
    }

    pub fn architecture(self, activation: Activation) -> Architecture {
        Architecture::parse(self.tokens(), activation, self.conv_padding()).expect("preset strings parse")
    }
}

impl Architecture {
    /// Parses `input(..) -- layer -- layer ...`. Layers may carry `:activation`
    /// suffixes; conv layers may carry a third `valid|same` argument.
    pub fn parse(text: &str, default_act: Activation, default_pad: Padding) -> Result<Self> {
        let mut tokens = text.split("--").map(str::trim).filter(|t| !t.is_empty());
        let first = tokens
            .next()
            .ok_or_else(|| Error::Config("empty architecture string".into()))?;
        let input = parse_input(first)?;
        let layers = tokens
            .map(|t| parse_layer(t, default_act, default_pad))
            .collect::<Result<Vec<_>>>()?;
        if !matches!(layers.last().map(|l| l.kind), Some(LayerKind::Output { .. })) {
            return Err(Error::Config("architecture must end with output(n)".into()));
        }
        if layers[..layers.len() - 1]
            .iter()
            .any(|l| matches!(l.kind, LayerKind::Output { .. }))
        {
            return Err(Error::Config("output(n) may only appear last".into()));
        }
        Ok(Self { input, layers })
    }

    pub fn render(&self, default_act: Activation, default_pad: Padding) -> String {
        std::iter::once(self.input.token())
            .chain(self.layers.iter().map(|l| l.token(default_act, default_pad)))
            .collect::<Vec<_>>()
            .join(" -- ")
    }

    /// Index of the first dense (`fc`) layer: the first hidden layer of a
    /// fully connected net, or the first fc after the last conv.
    pub fn default_vr_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l.kind, LayerKind::Dense { .. }))
    }

    /// Replaces every `fc(n)` width (not the output layer).
    pub fn with_fc_width(mut self, width: usize) -> Self {
        for l in &mut self.layers {
            if let LayerKind::Dense { units } = &mut l.kind {
                *units = width;
            }
        }
        self
    }
}

fn call_args<'a>(token: &'a str, name: &str) -> Option<&'a str> {
    token
        .strip_prefix(name)?
        .trim_start()
        .strip_prefix('(')?
        .strip_suffix(')')
}

fn parse_count(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{what}: expected a positive integer, got {s:?}")))
}

/// `3x3`, `3×3`, `3,3` or `3` for a square size.
fn parse_square(s: &str, what: &str) -> Result<usize> {
    let parts: Vec<&str> = s.split(['x', '×', ',']).map(str::trim).collect();
    match parts.as_slice() {
        [a] => parse_count(a, what),
        [a, b] => {
            let (a, b) = (parse_count(a, what)?, parse_count(b, what)?);
            if a != b {
                return Err(Error::Config(format!("{what}: only square windows are supported, got {s}")));
            }
            Ok(a)
        }
        _ => Err(Error::Config(format!("{what}: bad size {s:?}"))),
    }
}

pub(crate) fn parse_input(token: &str) -> Result<InputDecl> {
    let args = call_args(token, "input")
        .ok_or_else(|| Error::Config(format!("architecture must start with input(...), got {token:?}")))?;
    let parts: Vec<&str> = args.split(['x', '×']).map(str::trim).collect();
    match parts.as_slice() {
        [n] => Ok(InputDecl::Flat(parse_count(n, "input")?)),
        [r, c] => Ok(InputDecl::Spatial {
            rows: parse_count(r, "input")?,
            cols: parse_count(c, "input")?,
        }),
        [ch, r, c] => Ok(InputDecl::Full(Shape3::new(
            parse_count(ch, "input")?,
            parse_count(r, "input")?,
            parse_count(c, "input")?,
        ))),
        _ => Err(Error::Config(format!("bad input declaration {token:?}"))),
    }
}

pub(crate) fn parse_layer(token: &str, default_act: Activation, default_pad: Padding) -> Result<LayerSpec> {
    let (body, act) = match token.rsplit_once(':') {
        Some((b, a)) => (b.trim(), Some(a.parse::<Activation>()?)),
        None => (token, None),
    };
    let activation = act.unwrap_or(default_act);
    let spec = if let Some(a) = call_args(body, "fc") {
        LayerSpec::dense(parse_count(a, "fc")?, activation)
    } else if let Some(a) = call_args(body, "conv") {
        let (size, rest) = a
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("conv needs (s x s, channels): {body:?}")))?;
        let (channels, padding) = match rest.split_once(',') {
            Some((c, p)) => (c, p.parse::<Padding>()?),
            None => (rest, default_pad),
        };
        LayerSpec::conv(
            parse_square(size, "conv")?,
            parse_count(channels, "conv")?,
            padding,
            activation,
        )
    } else if let Some(a) = call_args(body, "maxpool") {
        LayerSpec::maxpool(parse_square(a, "maxpool")?)
    } else if let Some(a) = call_args(body, "dropout") {
        let p: f64 = a
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("dropout: bad probability {a:?}")))?;
        LayerSpec::dropout(p)
    } else if let Some(a) = call_args(body, "output").or_else(|| call_args(body, "out")) {
        LayerSpec::output(parse_count(a, "output")?)
    } else {
        return Err(Error::Config(format!("unknown layer token {token:?}")));
    };
    if act.is_some() && !matches!(spec.kind, LayerKind::Dense { .. } | LayerKind::Conv { .. }) {
        return Err(Error::Config(format!("activation suffix only applies to fc/conv: {token:?}")));
    }
    spec.validate()?;
    Ok(spec)
}
