//! Layer and architecture definitions with shape arithmetic.

use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

/// Activation extent of one sample. Fully-connected stages use `1 x 1 x n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn flat(len: usize) -> Self {
        Self::new(len, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Cross-channel local response normalisation
/// `b_c = a_c / (bias + alpha * sum_{|c'-c| <= size/2} a_c'^2)^beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnParams {
    /// Number of channels in the window, centred on the current one.
    pub size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub bias: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            size: 5,
            alpha: 1e-4,
            beta: 0.75,
            bias: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DropoutMode {
    /// Kept units are scaled by `1 / (1 - rate)` while training; evaluation
    /// is the identity.
    #[default]
    Inverted,
    /// Training leaves kept units unscaled; evaluation multiplies by
    /// `1 - rate`.
    Classic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Lrn(LrnParams),
    MaxPool {
        window: usize,
        stride: usize,
    },
    FullyConnected {
        out_dim: usize,
    },
    Dropout {
        rate: f64,
        mode: DropoutMode,
    },
    Softmax,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::Lrn(_) => "lrn",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::FullyConnected { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidSpec(format!("{}: {what}", self.name)));
        match self.kind {
            LayerKind::Conv {
                filters,
                kernel,
                stride,
                ..
            } => {
                if filters == 0 || kernel == 0 || stride == 0 {
                    return bad("filters, kernel and stride must be >= 1");
                }
            }
            LayerKind::MaxPool { window, stride } => {
                if window == 0 || stride == 0 {
                    return bad("window and stride must be >= 1");
                }
            }
            LayerKind::FullyConnected { out_dim } => {
                if out_dim == 0 {
                    return bad("out_dim must be >= 1");
                }
            }
            LayerKind::Dropout { rate, .. } => {
                if !(0.0..1.0).contains(&rate) {
                    return bad("dropout rate must be in [0, 1)");
                }
            }
            LayerKind::Lrn(p) => {
                if p.size == 0 || p.bias <= 0.0 || p.alpha < 0.0 {
                    return bad("LRN needs size >= 1, bias > 0 and alpha >= 0");
                }
            }
            LayerKind::Relu | LayerKind::Softmax => {}
        }
        Ok(())
    }
}

fn window_out(input: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Output extent of `layer` applied to `input`, with floor arithmetic for
/// convolution and pooling windows.
pub fn output_shape(layer: &LayerSpec, input: TensorShape) -> Result<TensorShape> {
    layer.validate()?;
    if input.is_empty() {
        return Err(Error::Shape {
            layer: layer.name.clone(),
            message: "empty input".into(),
        });
    }
    let exceeds = || Error::Shape {
        layer: layer.name.clone(),
        message: format!("kernel exceeds input {input}"),
    };
    Ok(match layer.kind {
        LayerKind::Conv {
            filters,
            kernel,
            stride,
            pad,
        } => TensorShape::new(
            filters,
            window_out(input.height, pad, kernel, stride).ok_or_else(exceeds)?,
            window_out(input.width, pad, kernel, stride).ok_or_else(exceeds)?,
        ),
        LayerKind::MaxPool { window, stride } => TensorShape::new(
            input.channels,
            window_out(input.height, 0, window, stride).ok_or_else(exceeds)?,
            window_out(input.width, 0, window, stride).ok_or_else(exceeds)?,
        ),
        LayerKind::FullyConnected { out_dim } => TensorShape::flat(out_dim),
        LayerKind::Relu | LayerKind::Lrn(_) | LayerKind::Dropout { .. } | LayerKind::Softmax => input,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchName {
    CnnF,
    CnnM,
    CnnS,
    CnnM2048,
    CnnM1024,
    CnnM128,
}

impl ArchName {
    pub const ALL: [ArchName; 6] = [
        ArchName::CnnF,
        ArchName::CnnM,
        ArchName::CnnS,
        ArchName::CnnM2048,
        ArchName::CnnM1024,
        ArchName::CnnM128,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchName::CnnF => "CNN-F",
            ArchName::CnnM => "CNN-M",
            ArchName::CnnS => "CNN-S",
            ArchName::CnnM2048 => "CNN-M-2048",
            ArchName::CnnM1024 => "CNN-M-1024",
            ArchName::CnnM128 => "CNN-M-128",
        }
    }

    /// full7 width of the full-size network.
    pub fn full7_dim(self) -> usize {
        match self {
            ArchName::CnnM2048 => 2048,
            ArchName::CnnM1024 => 1024,
            ArchName::CnnM128 => 128,
            _ => 4096,
        }
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace('_', "-");
        ArchName::ALL
            .into_iter()
            .find(|a| a.as_str() == norm)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown architecture {s:?}")))
    }
}

/// One row of the convolutional trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub lrn: bool,
    /// Pooling window (= stride); `None` for no pooling.
    pub pool: Option<usize>,
}

const fn stage(filters: usize, kernel: usize, stride: usize, pad: usize, lrn: bool, pool: Option<usize>) -> ConvStage {
    ConvStage {
        filters,
        kernel,
        stride,
        pad,
        lrn,
        pool,
    }
}

/// conv1..conv5 of the three base networks.
pub fn conv_stages(name: ArchName) -> [ConvStage; 5] {
    match name {
        ArchName::CnnF => [
            stage(64, 11, 4, 0, true, Some(2)),
            stage(256, 5, 1, 2, true, Some(2)),
            stage(256, 3, 1, 1, false, None),
            stage(256, 3, 1, 1, false, None),
            stage(256, 3, 1, 1, false, Some(2)),
        ],
        ArchName::CnnS => [
            stage(96, 7, 2, 0, true, Some(3)),
            stage(256, 5, 1, 1, false, Some(2)),
            stage(512, 3, 1, 1, false, None),
            stage(512, 3, 1, 1, false, None),
            stage(512, 3, 1, 1, false, Some(3)),
        ],
        ArchName::CnnM | ArchName::CnnM2048 | ArchName::CnnM1024 | ArchName::CnnM128 => [
            stage(96, 7, 2, 0, true, Some(2)),
            stage(256, 5, 2, 1, true, Some(2)),
            stage(512, 3, 1, 1, false, None),
            stage(512, 3, 1, 1, false, None),
            stage(512, 3, 1, 1, false, Some(2)),
        ],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input: TensorShape,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

/// Knobs for building a network from the architecture template.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    pub input_side: usize,
    pub input_channels: usize,
    /// conv filter counts are divided by this (rounded up).
    pub width_divisor: usize,
    pub full6_dim: usize,
    pub full7_dim: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub dropout_mode: DropoutMode,
    pub lrn: LrnParams,
}

impl BuildOptions {
    /// Full-size network on 224 x 224 RGB input with 1000 classes.
    pub fn full(name: ArchName) -> Self {
        Self {
            input_side: 224,
            input_channels: 3,
            width_divisor: 1,
            full6_dim: 4096,
            full7_dim: name.full7_dim(),
            num_classes: 1000,
            dropout_rate: 0.5,
            dropout_mode: DropoutMode::Inverted,
            lrn: LrnParams::default(),
        }
    }

    /// A reduced network: conv widths divided by `divisor`, fully-connected
    /// widths set explicitly.
    pub fn micro(name: ArchName, input_side: usize, divisor: usize, fc_dim: usize, num_classes: usize) -> Self {
        let full7 = if name.full7_dim() == 4096 {
            fc_dim
        } else {
            (name.full7_dim() / divisor).max(1)
        };
        Self {
            input_side,
            width_divisor: divisor,
            full6_dim: fc_dim,
            full7_dim: full7,
            num_classes,
            ..Self::full(name)
        }
    }
}

/// The network `name` at full size.
pub fn build_architecture(name: ArchName) -> ArchitectureSpec {
    build_with(name, &BuildOptions::full(name)).expect("full-size template is valid")
}

/// Parses `name` and builds the full-size network.
pub fn build_architecture_named(name: &str) -> Result<ArchitectureSpec> {
    Ok(build_architecture(name.parse()?))
}

/// Builds a network from the architecture template with the given options and
/// checks that its shapes compose.
pub fn build_with(name: ArchName, opts: &BuildOptions) -> Result<ArchitectureSpec> {
    if opts.width_divisor == 0 {
        return Err(Error::InvalidSpec("width_divisor must be >= 1".into()));
    }
    let mut layers = Vec::new();
    for (i, s) in conv_stages(name).iter().enumerate() {
        let n = i + 1;
        layers.push(LayerSpec::new(
            format!("conv{n}"),
            LayerKind::Conv {
                filters: s.filters.div_ceil(opts.width_divisor),
                kernel: s.kernel,
                stride: s.stride,
                pad: s.pad,
            },
        ));
        layers.push(LayerSpec::new(format!("relu{n}"), LayerKind::Relu));
        if s.lrn {
            layers.push(LayerSpec::new(format!("norm{n}"), LayerKind::Lrn(opts.lrn)));
        }
        if let Some(p) = s.pool {
            layers.push(LayerSpec::new(
                format!("pool{n}"),
                LayerKind::MaxPool { window: p, stride: p },
            ));
        }
    }
    for (n, dim) in [(6, opts.full6_dim), (7, opts.full7_dim)] {
        layers.push(LayerSpec::new(format!("full{n}"), LayerKind::FullyConnected { out_dim: dim }));
        layers.push(LayerSpec::new(format!("relu{n}"), LayerKind::Relu));
        layers.push(LayerSpec::new(
            format!("drop{n}"),
            LayerKind::Dropout {
                rate: opts.dropout_rate,
                mode: opts.dropout_mode,
            },
        ));
    }
    layers.push(LayerSpec::new(
        "full8",
        LayerKind::FullyConnected {
            out_dim: opts.num_classes,
        },
    ));
    layers.push(LayerSpec::new("prob", LayerKind::Softmax));
    let spec = ArchitectureSpec {
        name: if opts.width_divisor == 1 && opts.input_side == 224 {
            name.to_string()
        } else {
            format!("{name}/{}@{}", opts.width_divisor, opts.input_side)
        },
        input: TensorShape::new(opts.input_channels, opts.input_side, opts.input_side),
        layers,
        num_classes: opts.num_classes,
    };
    spec.shapes()?;
    Ok(spec)
}

impl ArchitectureSpec {
    /// Input shape of every layer followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<TensorShape>> {
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        let mut s = self.input;
        out.push(s);
        for l in &self.layers {
            s = output_shape(l, s)?;
            out.push(s);
        }
        Ok(out)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Index of the last fully-connected layer (the classifier).
    pub fn classifier_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::FullyConnected { .. }))
    }

    /// Index of the layer whose output is the image descriptor: the ReLU
    /// following the penultimate fully-connected layer.
    pub fn feature_index(&self) -> Option<usize> {
        let fcs: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::FullyConnected { .. }))
            .map(|(i, _)| i)
            .collect();
        let pen = *fcs.get(fcs.len().checked_sub(2)?)?;
        match self.layers.get(pen + 1) {
            Some(l) if l.kind == LayerKind::Relu => Some(pen + 1),
            _ => Some(pen),
        }
    }

    /// Width of the descriptor returned by feature extraction.
    pub fn feature_dim(&self) -> Result<usize> {
        let i = self
            .feature_index()
            .ok_or_else(|| Error::InvalidSpec("network has fewer than two fully-connected layers".into()))?;
        Ok(self.shapes()?[i + 1].len())
    }

    /// Same network with a new classifier of `num_classes` outputs.
    pub fn with_classes(&self, num_classes: usize) -> Result<ArchitectureSpec> {
        let idx = self
            .classifier_index()
            .ok_or_else(|| Error::InvalidSpec("no fully-connected layer".into()))?;
        let mut spec = self.clone();
        spec.layers[idx].kind = LayerKind::FullyConnected { out_dim: num_classes };
        spec.num_classes = num_classes;
        spec.shapes()?;
        Ok(spec)
    }

    /// Sets every dropout layer to `mode`.
    pub fn with_dropout_mode(mut self, mode: DropoutMode) -> Self {
        for l in &mut self.layers {
            if let LayerKind::Dropout { mode: m, .. } = &mut l.kind {
                *m = mode;
            }
        }
        self
    }
}
