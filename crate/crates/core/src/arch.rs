//! Declarative architecture specifications.
//!
//! An [`ArchSpec`] is an ordered node list. Each node reads the output of the
//! previous node unless `from` names an earlier node, and `add` nodes sum
//! their input with the output of the `skip` node. The same description drives
//! training (see [`crate::nn::Model`]) and symbolic FLOP counting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        #[serde(default)]
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d { kernel: usize, stride: usize },
    #[serde(rename = "avgpool2d")]
    AvgPool2d { kernel: usize, stride: usize },
    Flatten,
    /// Residual sum of this node's input and the output of node `skip`.
    Add { skip: usize },
    /// Normalization placeholder. Identity in training, zero FLOPs.
    Norm { channels: usize },
}

fn default_true() -> bool {
    true
}

impl LayerKind {
    pub fn is_maskable(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }

    /// Weight tensor shape (`[C_out, C_in, h, w]` or `[out, in]`).
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some(vec![out_channels, in_channels, kernel_h, kernel_w]),
            LayerKind::Linear {
                in_features,
                out_features,
                ..
            } => Some(vec![out_features, in_features]),
            _ => None,
        }
    }

    /// N_l: weight count excluding bias.
    pub fn parameter_count(&self) -> usize {
        self.weight_shape().map_or(0, |s| s.iter().product())
    }

    pub fn has_bias(&self) -> bool {
        match *self {
            LayerKind::Conv2d { bias, .. } | LayerKind::Linear { bias, .. } => bias,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDecl {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Input node; `None` reads the previous node (or the model input for node 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub first_layer: bool,
}

impl LayerDecl {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            from: None,
            first_layer: false,
        }
    }

    pub fn is_maskable(&self) -> bool {
        self.kind.is_maskable()
    }

    pub fn parameter_count(&self) -> usize {
        self.kind.parameter_count()
    }
}

/// A maskable (conv or linear) layer together with the geometry that the
/// sparsity distributions and FLOP counter need.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskableLayer {
    pub node: usize,
    pub name: String,
    pub weight_shape: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub is_conv: bool,
    pub first_layer: bool,
    /// H_out·W_out for conv layers, 1 for linear layers.
    pub output_positions: usize,
}

impl MaskableLayer {
    pub fn parameter_count(&self) -> usize {
        self.weight_shape.iter().product()
    }

    /// Weights feeding one output unit.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn dense_flops(&self) -> f64 {
        2.0 * self.parameter_count() as f64 * self.output_positions as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    /// `[channels, height, width]` or `[features]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerDecl>,
    pub class_count: usize,
}

impl ArchSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: ArchSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    /// Looks up one of the built-in architectures by name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "wrn-22-2" | "wrn_22_2" => Ok(build_wrn_22_2()),
            "resnet50-cifar" | "resnet50_cifar" | "resnet-50" => Ok(build_resnet50_cifar()),
            "mlp" | "lenet-300-100" => build_mlp(&[784, 300, 100, 10]),
            "small-cnn" | "small_cnn" => build_small_cnn(&[1, 28, 28], 10),
            "small-cnn-32" => build_small_cnn(&[3, 32, 32], 10),
            other => Err(Error::input(format!("unknown architecture '{other}'"))),
        }
    }

    /// Runs static shape propagation and returns every node's output shape.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = match layer.from {
                Some(j) if j >= i => {
                    return Err(Error::config(i, format!("input node {j} is not earlier")))
                }
                Some(j) => shapes[j].clone(),
                None if i == 0 => self.input_shape.clone(),
                None => shapes[i - 1].clone(),
            };
            let out = layer_output_shape(i, &layer.kind, &input, &shapes)?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Checks shape chaining, stem flag and output width.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::input("architecture has no layers"));
        }
        let stems: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.first_layer)
            .map(|(i, _)| i)
            .collect();
        match stems.as_slice() {
            [i] if self.layers[*i].is_maskable() => {}
            [i] => return Err(Error::config(*i, "first layer must be conv or linear")),
            _ => {
                return Err(Error::input(format!(
                    "exactly one layer must be flagged first_layer, found {}",
                    stems.len()
                )))
            }
        }
        let shapes = self.infer_shapes()?;
        let last = shapes.last().expect("non-empty");
        if last != &[self.class_count] {
            return Err(Error::config(
                self.layers.len() - 1,
                format!("output shape {last:?} does not match class count {}", self.class_count),
            ));
        }
        Ok(())
    }

    pub fn maskable_layers(&self) -> Result<Vec<MaskableLayer>> {
        let shapes = self.infer_shapes()?;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let entry = match layer.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    ..
                } => MaskableLayer {
                    node: i,
                    name: layer.name.clone(),
                    weight_shape: vec![out_channels, in_channels, kernel_h, kernel_w],
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    is_conv: true,
                    first_layer: layer.first_layer,
                    output_positions: shapes[i][1] * shapes[i][2],
                },
                LayerKind::Linear {
                    in_features,
                    out_features,
                    ..
                } => MaskableLayer {
                    node: i,
                    name: layer.name.clone(),
                    weight_shape: vec![out_features, in_features],
                    in_channels: in_features,
                    out_channels: out_features,
                    kernel_h: 1,
                    kernel_w: 1,
                    is_conv: false,
                    first_layer: layer.first_layer,
                    output_positions: 1,
                },
                _ => continue,
            };
            out.push(entry);
        }
        Ok(out)
    }

    /// N: total maskable weight count.
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerDecl::parameter_count).sum()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

fn layer_output_shape(
    index: usize,
    kind: &LayerKind,
    input: &[usize],
    earlier: &[Vec<usize>],
) -> Result<Vec<usize>> {
    let spatial = |what: &str| -> Result<(usize, usize, usize)> {
        match *input {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::config(
                index,
                format!("{what} needs a [C, H, W] input, got {input:?}"),
            )),
        }
    };
    match *kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            ..
        } => {
            let (c, h, w) = spatial("conv2d")?;
            if c != in_channels {
                return Err(Error::config(
                    index,
                    format!("conv2d expects {in_channels} input channels, got {c}"),
                ));
            }
            if stride == 0 || out_channels == 0 || in_channels == 0 {
                return Err(Error::config(index, "conv2d sizes must be positive"));
            }
            let oh = window_out(index, h, kernel_h, stride, padding)?;
            let ow = window_out(index, w, kernel_w, stride, padding)?;
            Ok(vec![out_channels, oh, ow])
        }
        LayerKind::Linear {
            in_features,
            out_features,
            ..
        } => match *input {
            [f] if f == in_features && out_features > 0 => Ok(vec![out_features]),
            _ => Err(Error::config(
                index,
                format!("linear expects [{in_features}] input, got {input:?}"),
            )),
        },
        LayerKind::Relu => Ok(input.to_vec()),
        LayerKind::MaxPool2d { kernel, stride } | LayerKind::AvgPool2d { kernel, stride } => {
            let (c, h, w) = spatial("pooling")?;
            if stride == 0 || kernel == 0 {
                return Err(Error::config(index, "pooling sizes must be positive"));
            }
            Ok(vec![
                c,
                window_out(index, h, kernel, stride, 0)?,
                window_out(index, w, kernel, stride, 0)?,
            ])
        }
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
        LayerKind::Add { skip } => {
            let other = earlier
                .get(skip)
                .ok_or_else(|| Error::config(index, format!("skip node {skip} is not earlier")))?;
            if other.as_slice() != input {
                return Err(Error::config(
                    index,
                    format!("residual shapes differ: {input:?} vs {other:?}"),
                ));
            }
            Ok(input.to_vec())
        }
        LayerKind::Norm { channels } => {
            if input.first() != Some(&channels) {
                return Err(Error::config(
                    index,
                    format!("norm over {channels} channels got input {input:?}"),
                ));
            }
            Ok(input.to_vec())
        }
    }
}

fn window_out(index: usize, size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(Error::config(
            index,
            format!("kernel {kernel} larger than padded input {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Incremental builder that tracks the running channel count.
struct Builder {
    layers: Vec<LayerDecl>,
}

impl Builder {
    fn new() -> Self {
        Self { layers: Vec::new() }
    }

    fn last(&self) -> usize {
        self.layers.len() - 1
    }

    fn push(&mut self, decl: LayerDecl) -> usize {
        self.layers.push(decl);
        self.last()
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        from: Option<usize>,
    ) -> usize {
        let mut decl = LayerDecl::new(
            name,
            LayerKind::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel_h: k,
                kernel_w: k,
                stride,
                padding,
                bias: false,
            },
        );
        decl.from = from;
        decl.first_layer = self.layers.is_empty();
        self.push(decl)
    }

    fn simple(&mut self, name: String, kind: LayerKind) -> usize {
        self.push(LayerDecl::new(name, kind))
    }
}

/// Wide residual network for 32×32×3 inputs, depth `6n + 4`.
pub fn build_wrn(depth: usize, widen: usize, class_count: usize) -> Result<ArchSpec> {
    if depth < 10 || !(depth - 4).is_multiple_of(6) || widen == 0 {
        return Err(Error::input(format!(
            "WRN depth must be 6n+4 with n >= 1, got depth {depth} width {widen}"
        )));
    }
    let blocks = (depth - 4) / 6;
    let mut b = Builder::new();
    b.conv("conv1".into(), 3, 16, 3, 1, 1, None);
    b.simple("bn1".into(), LayerKind::Norm { channels: 16 });
    b.simple("relu1".into(), LayerKind::Relu);

    let mut cin = 16;
    for (g, (base, stride)) in [(16, 1), (32, 2), (64, 2)].into_iter().enumerate() {
        let width = base * widen;
        for blk in 0..blocks {
            let p = format!("block{}.layer{}", g + 1, blk);
            let s = if blk == 0 { stride } else { 1 };
            let input = b.last();
            b.conv(format!("{p}.conv1"), cin, width, 3, s, 1, None);
            b.simple(format!("{p}.bn1"), LayerKind::Norm { channels: width });
            b.simple(format!("{p}.relu1"), LayerKind::Relu);
            b.conv(format!("{p}.conv2"), width, width, 3, 1, 1, None);
            let main = b.simple(format!("{p}.bn2"), LayerKind::Norm { channels: width });
            let skip = if cin != width || s != 1 {
                b.conv(format!("{p}.convShortcut"), cin, width, 1, s, 0, Some(input))
            } else {
                input
            };
            let add = b.simple(format!("{p}.add"), LayerKind::Add { skip });
            b.layers[add].from = Some(main);
            b.simple(format!("{p}.relu2"), LayerKind::Relu);
            cin = width;
        }
    }
    b.simple("pool".into(), LayerKind::AvgPool2d { kernel: 8, stride: 8 });
    b.simple("flatten".into(), LayerKind::Flatten);
    b.simple(
        "fc".into(),
        LayerKind::Linear {
            in_features: cin,
            out_features: class_count,
            bias: true,
        },
    );
    let spec = ArchSpec {
        name: format!("wrn-{depth}-{widen}"),
        input_shape: vec![3, 32, 32],
        layers: b.layers,
        class_count,
    };
    spec.validate()?;
    Ok(spec)
}

/// WRN-22-2 on CIFAR-10.
pub fn build_wrn_22_2() -> ArchSpec {
    build_wrn(22, 2, 10).expect("WRN-22-2 is well formed")
}

/// ResNet-50 adapted to 32×32 inputs: a single 3×3/64 stem without stride,
/// bottleneck stages of 3/4/6/3 blocks, stride-2 downsampling in the 3×3
/// convolution of the first block of stages 3–5, and a 100-way classifier.
pub fn build_resnet50_cifar() -> ArchSpec {
    let mut b = Builder::new();
    b.conv("conv1".into(), 3, 64, 3, 1, 1, None);
    b.simple("bn1".into(), LayerKind::Norm { channels: 64 });
    b.simple("relu1".into(), LayerKind::Relu);
    let mut cin = 64;
    let stages = [(64, 256, 3, 1), (128, 512, 4, 2), (256, 1024, 6, 2), (512, 2048, 3, 2)];
    for (si, (mid, out, count, stride)) in stages.into_iter().enumerate() {
        for blk in 0..count {
            let p = format!("conv{}_{}", si + 2, blk + 1);
            let s = if blk == 0 { stride } else { 1 };
            let input = b.last();
            b.conv(format!("{p}.conv1"), cin, mid, 1, 1, 0, None);
            b.simple(format!("{p}.bn1"), LayerKind::Norm { channels: mid });
            b.simple(format!("{p}.relu1"), LayerKind::Relu);
            b.conv(format!("{p}.conv2"), mid, mid, 3, s, 1, None);
            b.simple(format!("{p}.bn2"), LayerKind::Norm { channels: mid });
            b.simple(format!("{p}.relu2"), LayerKind::Relu);
            b.conv(format!("{p}.conv3"), mid, out, 1, 1, 0, None);
            let main = b.simple(format!("{p}.bn3"), LayerKind::Norm { channels: out });
            let skip = if cin != out || s != 1 {
                b.conv(format!("{p}.convShortcut"), cin, out, 1, s, 0, Some(input));
                b.simple(format!("{p}.bnShortcut"), LayerKind::Norm { channels: out })
            } else {
                input
            };
            let add = b.simple(format!("{p}.add"), LayerKind::Add { skip });
            b.layers[add].from = Some(main);
            b.simple(format!("{p}.relu3"), LayerKind::Relu);
            cin = out;
        }
    }
    b.simple("pool".into(), LayerKind::AvgPool2d { kernel: 4, stride: 4 });
    b.simple("flatten".into(), LayerKind::Flatten);
    b.simple(
        "fc".into(),
        LayerKind::Linear {
            in_features: cin,
            out_features: 100,
            bias: true,
        },
    );
    let spec = ArchSpec {
        name: "resnet50-cifar".into(),
        input_shape: vec![3, 32, 32],
        layers: b.layers,
        class_count: 100,
    };
    spec.validate().expect("ResNet-50 is well formed");
    spec
}

/// Fully connected ReLU network; `dims` lists input, hidden and output widths.
pub fn build_mlp(dims: &[usize]) -> Result<ArchSpec> {
    if dims.len() < 2 {
        return Err(Error::input(format!(
            "an MLP needs at least input and output widths, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::input("MLP widths must be positive"));
    }
    let mut layers = Vec::new();
    for (i, pair) in dims.windows(2).enumerate() {
        let mut decl = LayerDecl::new(
            format!("fc{}", i + 1),
            LayerKind::Linear {
                in_features: pair[0],
                out_features: pair[1],
                bias: true,
            },
        );
        decl.first_layer = i == 0;
        layers.push(decl);
        if i + 2 < dims.len() {
            layers.push(LayerDecl::new(format!("relu{}", i + 1), LayerKind::Relu));
        }
    }
    let name = dims.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
    let spec = ArchSpec {
        name: format!("mlp-{name}"),
        input_shape: vec![dims[0]],
        layers,
        class_count: *dims.last().unwrap(),
    };
    spec.validate()?;
    Ok(spec)
}

/// Two conv/ReLU/max-pool stages followed by two linear layers.
pub fn build_small_cnn(input_shape: &[usize], class_count: usize) -> Result<ArchSpec> {
    let &[c, h, w] = input_shape else {
        return Err(Error::input(format!(
            "small CNN needs a [C, H, W] input shape, got {input_shape:?}"
        )));
    };
    if h < 4 || w < 4 || c == 0 || class_count == 0 {
        return Err(Error::input(format!("input {input_shape:?} too small")));
    }
    let conv = |cin, cout| LayerKind::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel_h: 3,
        kernel_w: 3,
        stride: 1,
        padding: 1,
        bias: true,
    };
    let mut first = LayerDecl::new("conv1", conv(c, 8));
    first.first_layer = true;
    let layers = vec![
        first,
        LayerDecl::new("relu1", LayerKind::Relu),
        LayerDecl::new("pool1", LayerKind::MaxPool2d { kernel: 2, stride: 2 }),
        LayerDecl::new("conv2", conv(8, 16)),
        LayerDecl::new("relu2", LayerKind::Relu),
        LayerDecl::new("pool2", LayerKind::MaxPool2d { kernel: 2, stride: 2 }),
        LayerDecl::new("flatten", LayerKind::Flatten),
        LayerDecl::new(
            "fc1",
            LayerKind::Linear {
                in_features: 16 * (h / 4) * (w / 4),
                out_features: 64,
                bias: true,
            },
        ),
        LayerDecl::new("relu3", LayerKind::Relu),
        LayerDecl::new(
            "fc2",
            LayerKind::Linear {
                in_features: 64,
                out_features: class_count,
                bias: true,
            },
        ),
    ];
    let spec = ArchSpec {
        name: format!("small-cnn-{c}x{h}x{w}"),
        input_shape: input_shape.to_vec(),
        layers,
        class_count,
    };
    spec.validate()?;
    Ok(spec)
}

/// Rebuilds `spec` with every hidden width multiplied by `gamma`.
///
/// Input channels and the classifier width stay fixed; all layers that share a
/// width keep sharing the rescaled width so residual sums still line up.
pub fn scale_widths(spec: &ArchSpec, gamma: f64) -> Result<ArchSpec> {
    let output_node = spec
        .layers
        .iter()
        .rposition(LayerDecl::is_maskable)
        .ok_or_else(|| Error::input("architecture has no maskable layers"))?;
    let scale = |w: usize| -> Result<usize> {
        let scaled = (gamma * w as f64).round();
        if scaled < 1.0 {
            return Err(Error::input(format!(
                "width {w} scaled by {gamma:.4} rounds to zero"
            )));
        }
        Ok(scaled as usize)
    };

    let old_shapes = spec.infer_shapes()?;
    let mut new_shapes: Vec<Vec<usize>> = Vec::with_capacity(spec.layers.len());
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let input = match layer.from {
            Some(j) => new_shapes[j].clone(),
            None if i == 0 => spec.input_shape.clone(),
            None => new_shapes[i - 1].clone(),
        };
        let kind = match layer.kind {
            LayerKind::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                bias,
                ..
            } => LayerKind::Conv2d {
                in_channels: input[0],
                out_channels: if i == output_node { out_channels } else { scale(out_channels)? },
                kernel_h,
                kernel_w,
                stride,
                padding,
                bias,
            },
            LayerKind::Linear {
                out_features, bias, ..
            } => LayerKind::Linear {
                in_features: input[0],
                out_features: if i == output_node { out_features } else { scale(out_features)? },
                bias,
            },
            LayerKind::Norm { .. } => LayerKind::Norm { channels: input[0] },
            ref other => other.clone(),
        };
        let shape = layer_output_shape(i, &kind, &input, &new_shapes)?;
        debug_assert_eq!(shape.len(), old_shapes[i].len());
        new_shapes.push(shape);
        layers.push(LayerDecl {
            kind,
            ..layer.clone()
        });
    }
    let scaled = ArchSpec {
        name: spec.name.clone(),
        input_shape: spec.input_shape.clone(),
        layers,
        class_count: spec.class_count,
    };
    scaled.validate()?;
    Ok(scaled)
}

/// Small-dense baseline: one global width multiplier chosen by bisection so
/// the maskable parameter count is as close as integer rounding allows to
/// `density · N`.
pub fn scale_small_dense(spec: &ArchSpec, density: f64) -> Result<ArchSpec> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::input(format!("density must be in (0, 1], got {density}")));
    }
    if density == 1.0 {
        return Ok(spec.clone());
    }
    let target = density * spec.parameter_count() as f64;
    let count = |gamma: f64| -> Option<usize> { scale_widths(spec, gamma).ok().map(|s| s.parameter_count()) };

    // Smallest gamma whose count reaches the target.
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        match count(mid) {
            Some(n) if n as f64 >= target => hi = mid,
            _ => lo = mid,
        }
    }
    let mut best: Option<(f64, f64)> = None;
    for gamma in [lo, hi] {
        if let Some(n) = count(gamma) {
            let err = (n as f64 - target).abs();
            if best.is_none_or(|(_, e)| err < e) {
                best = Some((gamma, err));
            }
        }
    }
    let (gamma, err) = best.ok_or_else(|| {
        Error::input(format!("density {density} leaves some layer with zero channels"))
    })?;
    if err > 0.5 * target {
        return Err(Error::input(format!(
            "density {density} cannot be approached without a zero-width layer"
        )));
    }
    let mut scaled = scale_widths(spec, gamma)?;
    scaled.name = format!("{}-small-dense-{density}", spec.name);
    Ok(scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_parameter_count() {
        let spec = build_mlp(&[784, 300, 100, 10]).unwrap();
        assert_eq!(spec.parameter_count(), 784 * 300 + 300 * 100 + 100 * 10);
        assert_eq!(spec.parameter_count(), 266_200);
    }

    #[test]
    fn mlp_needs_two_dims() {
        assert!(matches!(build_mlp(&[10]), Err(Error::Input(_))));
    }

    #[test]
    fn small_cnn_shapes() {
        for input in [[3, 32, 32], [1, 28, 28]] {
            let spec = build_small_cnn(&input, 10).unwrap();
            assert_eq!(spec.infer_shapes().unwrap().last().unwrap(), &vec![10]);
        }
    }

    #[test]
    fn wrn_structure() {
        let spec = build_wrn_22_2();
        let layers = spec.maskable_layers().unwrap();
        let shortcuts = layers.iter().filter(|l| l.name.ends_with("convShortcut")).count();
        // 6n main-path convs + stem + classifier, n = 3, plus one projection per group.
        assert_eq!(layers.len() - shortcuts, 6 * 3 + 2);
        assert_eq!(shortcuts, 3);
        assert!(layers.iter().all(|l| l.parameter_count() > 0));
        assert!(layers[0].first_layer && layers[0].is_conv);
    }

    #[test]
    fn resnet50_stage_sizes() {
        let spec = build_resnet50_cifar();
        let shapes = spec.infer_shapes().unwrap();
        let size_of = |name: &str| {
            let i = spec.layers.iter().position(|l| l.name == name).unwrap();
            shapes[i][1]
        };
        assert_eq!(size_of("conv1"), 32);
        assert_eq!(size_of("conv2_3.conv3"), 32);
        assert_eq!(size_of("conv3_4.conv3"), 16);
        assert_eq!(size_of("conv4_6.conv3"), 8);
        assert_eq!(size_of("conv5_3.conv3"), 4);
        match spec.layers[0].kind {
            LayerKind::Conv2d { kernel_h: 3, kernel_w: 3, stride: 1, out_channels: 64, .. } => {}
            ref k => panic!("unexpected stem {k:?}"),
        }
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut spec = build_mlp(&[4, 3, 2]).unwrap();
        spec.layers[2].kind = LayerKind::Linear {
            in_features: 5,
            out_features: 2,
            bias: true,
        };
        match spec.validate() {
            Err(Error::Config { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let spec = build_wrn_22_2();
        let text = spec.to_json_string().unwrap();
        assert_eq!(ArchSpec::from_json_str(&text).unwrap(), spec);
    }

    #[test]
    fn small_dense_identity_and_mlp_linearity() {
        let spec = build_mlp(&[100, 50, 10]).unwrap();
        assert_eq!(scale_small_dense(&spec, 1.0).unwrap(), spec);
        // N = h·(in + out), so the hidden width scales with the density.
        let scaled = scale_small_dense(&spec, 0.3).unwrap();
        match scaled.layers[0].kind {
            LayerKind::Linear { out_features, .. } => assert_eq!(out_features, 15),
            _ => unreachable!(),
        }
    }

    #[test]
    fn small_dense_rejects_vanishing_width() {
        let spec = build_mlp(&[100, 2, 10]).unwrap();
        assert!(matches!(scale_small_dense(&spec, 0.01), Err(Error::Input(_))));
        assert!(scale_small_dense(&spec, 0.0).is_err());
    }
}
