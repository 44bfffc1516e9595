//! Architecture descriptors.
//!
//! A network is an ordered list of layers over numbered activations:
//! activation 0 is the input and activation `i + 1` is the output of layer
//! `i`. A layer reads the previous activation unless `input` names another
//! one; `residual-add` additionally reads its `skip` activation.

use serde::{Deserialize, Serialize};

use crate::error::{DressError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    FullyConnected {
        in_features: usize,
        out_features: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    AvgPool {
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Flatten,
    ResidualAdd {
        skip: usize,
    },
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<usize>,
}

impl LayerSpec {
    /// Conv and fc layers carry the weights that get sparsified.
    pub fn is_sampled(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::FullyConnected { .. } | LayerKind::Conv2d { .. }
        )
    }

    /// Shape of the weight tensor: `[out, in]` for fc, `[out, in, k, k]` for conv.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::FullyConnected {
                in_features,
                out_features,
                ..
            } => Some(vec![out_features, in_features]),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            _ => None,
        }
    }

    pub fn has_bias(&self) -> bool {
        match self.kind {
            LayerKind::FullyConnected { bias, .. } | LayerKind::Conv2d { bias, .. } => bias,
            _ => false,
        }
    }

    pub fn bn_channels(&self) -> Option<usize> {
        match self.kind {
            LayerKind::BatchNorm { channels } => Some(channels),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-sample input shape, e.g. `[784]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Activation index read by layer `i`.
    pub fn input_of(&self, i: usize) -> usize {
        self.layers[i].input.unwrap_or(i)
    }

    /// Indices of conv and fc layers.
    pub fn sampled_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_sampled())
            .collect()
    }

    pub fn bn_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].bn_channels().is_some())
            .collect()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Validates the graph and returns the per-sample shape of every activation.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(DressError::config("input shape must have positive extents"));
        }
        if self.layers.is_empty() {
            return Err(DressError::config("network has no layers"));
        }
        let mut shapes = vec![self.input_shape.clone()];
        let mut consumed = vec![false; self.layers.len() + 1];
        for (i, layer) in self.layers.iter().enumerate() {
            let src = self.input_of(i);
            if src > i {
                return Err(DressError::config(format!(
                    "layer {} ({}) reads activation {} which is not yet computed",
                    i, layer.name, src
                )));
            }
            consumed[src] = true;
            let x = &shapes[src];
            let bad = |msg: String| DressError::config(format!("layer {} ({}): {}", i, layer.name, msg));
            let out = match layer.kind {
                LayerKind::FullyConnected {
                    in_features,
                    out_features,
                    ..
                } => {
                    if in_features == 0 || out_features == 0 {
                        return Err(bad("dims must be positive".into()));
                    }
                    if x.as_slice() != [in_features] {
                        return Err(bad(format!("expects input [{}], got {:?}", in_features, x)));
                    }
                    vec![out_features]
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad("dims must be positive".into()));
                    }
                    if padding >= kernel {
                        return Err(bad("padding must be smaller than the kernel".into()));
                    }
                    if x.len() != 3 || x[0] != in_channels {
                        return Err(bad(format!("expects [{}, H, W], got {:?}", in_channels, x)));
                    }
                    let (oh, ow) = pooled(x[1], x[2], kernel, stride, padding)
                        .ok_or_else(|| bad("kernel larger than padded input".into()))?;
                    vec![out_channels, oh, ow]
                }
                LayerKind::BatchNorm { channels } => {
                    if channels == 0 {
                        return Err(bad("dims must be positive".into()));
                    }
                    if !(x.len() == 1 || x.len() == 3) || x[0] != channels {
                        return Err(bad(format!("expects {} channels, got {:?}", channels, x)));
                    }
                    x.clone()
                }
                LayerKind::Relu => x.clone(),
                LayerKind::AvgPool {
                    kernel,
                    stride,
                    padding,
                } => {
                    if kernel == 0 || stride == 0 {
                        return Err(bad("dims must be positive".into()));
                    }
                    if padding >= kernel {
                        return Err(bad("padding must be smaller than the kernel".into()));
                    }
                    if x.len() != 3 {
                        return Err(bad(format!("expects [C, H, W], got {:?}", x)));
                    }
                    let (oh, ow) = pooled(x[1], x[2], kernel, stride, padding)
                        .ok_or_else(|| bad("kernel larger than padded input".into()))?;
                    vec![x[0], oh, ow]
                }
                LayerKind::Flatten => vec![x.iter().product()],
                LayerKind::ResidualAdd { skip } => {
                    if skip > i || skip == src {
                        return Err(bad(format!("invalid skip activation {}", skip)));
                    }
                    consumed[skip] = true;
                    if shapes[skip] != *x {
                        return Err(bad(format!(
                            "skip shape {:?} differs from input {:?}",
                            shapes[skip], x
                        )));
                    }
                    x.clone()
                }
            };
            shapes.push(out);
        }
        let last = shapes.last().expect("at least one layer");
        if last.as_slice() != [self.classes] {
            return Err(DressError::config(format!(
                "output shape {:?} does not match {} classes",
                last, self.classes
            )));
        }
        if let Some(dangling) = consumed[..self.layers.len()].iter().position(|c| !c) {
            return Err(DressError::config(format!(
                "activation {} is never consumed; a network has exactly one output head",
                dangling
            )));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Total trainable parameter count (weights, biases, BN affine).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::FullyConnected {
                    in_features,
                    out_features,
                    bias,
                } => in_features * out_features + if bias { out_features } else { 0 },
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => in_channels * out_channels * kernel * kernel + if bias { out_channels } else { 0 },
                LayerKind::BatchNorm { channels } => 2 * channels,
                _ => 0,
            })
            .sum()
    }

    /// Looks up a bundled architecture by name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mlp" => Ok(Self::mlp(&[784], &[256, 128], 10, true)),
            "mlp-small" => Ok(Self::mlp(&[64], &[64, 32], 10, true)),
            "convnet" => Ok(Self::convnet(&[1, 28, 28], 10)),
            "resnet20" => Ok(Self::resnet20()),
            "resnet50" => Ok(Self::resnet50()),
            other => Err(DressError::config(format!(
                "unknown architecture '{}' (expected mlp, mlp-small, convnet, resnet20, resnet50)",
                other
            ))),
        }
    }

    /// Fully-connected net; each hidden layer is fc, optional BN, ReLU.
    pub fn mlp(input_shape: &[usize], hidden: &[usize], classes: usize, batch_norm: bool) -> Self {
        let mut b = Builder::new();
        let mut width = input_shape.iter().product();
        if input_shape.len() > 1 {
            b.push("flatten", LayerKind::Flatten);
        }
        for (i, &h) in hidden.iter().enumerate() {
            b.push(
                &format!("fc{}", i + 1),
                LayerKind::FullyConnected {
                    in_features: width,
                    out_features: h,
                    bias: true,
                },
            );
            if batch_norm {
                b.push(&format!("bn{}", i + 1), LayerKind::BatchNorm { channels: h });
            }
            b.push(&format!("relu{}", i + 1), LayerKind::Relu);
            width = h;
        }
        b.push(
            "fc_out",
            LayerKind::FullyConnected {
                in_features: width,
                out_features: classes,
                bias: true,
            },
        );
        b.finish("mlp", input_shape, classes)
    }

    /// Two conv stages with BN and average pooling, then a linear head.
    pub fn convnet(input_shape: &[usize], classes: usize) -> Self {
        let mut b = Builder::new();
        let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
        b.conv_bn_relu("conv1", c, 8, 3, 1, 1);
        b.push("pool1", LayerKind::AvgPool { kernel: 2, stride: 2, padding: 0 });
        b.conv_bn_relu("conv2", 8, 16, 3, 1, 1);
        b.push("pool2", LayerKind::AvgPool { kernel: 2, stride: 2, padding: 0 });
        b.push("flatten", LayerKind::Flatten);
        b.push(
            "fc",
            LayerKind::FullyConnected {
                in_features: 16 * (h / 4) * (w / 4),
                out_features: classes,
                bias: true,
            },
        );
        b.finish("convnet", input_shape, classes)
    }

    /// CIFAR ResNet-20 with 1x1 projection shortcuts on the two downsampling blocks.
    pub fn resnet20() -> Self {
        let mut b = Builder::new();
        b.conv_bn_relu("conv1", 3, 16, 3, 1, 1);
        let mut in_c = 16;
        for (stage, &(width, stride)) in [(16, 1), (32, 2), (64, 2)].iter().enumerate() {
            for block in 0..3 {
                let s = if block == 0 { stride } else { 1 };
                let p = format!("layer{}.{}", stage + 1, block);
                let entry = b.cursor();
                b.conv_bn(&format!("{}.conv1", p), in_c, width, 3, s, 1);
                b.push(&format!("{}.relu1", p), LayerKind::Relu);
                b.conv_bn(&format!("{}.conv2", p), width, width, 3, 1, 1);
                let main = b.cursor();
                let skip = if s != 1 || in_c != width {
                    b.conv_bn_from(&format!("{}.shortcut", p), entry, in_c, width, 1, s, 0)
                } else {
                    entry
                };
                b.push_from(&format!("{}.add", p), LayerKind::ResidualAdd { skip }, main);
                b.push(&format!("{}.relu2", p), LayerKind::Relu);
                in_c = width;
            }
        }
        b.push("avgpool", LayerKind::AvgPool { kernel: 8, stride: 1, padding: 0 });
        b.push("flatten", LayerKind::Flatten);
        b.push(
            "fc",
            LayerKind::FullyConnected {
                in_features: 64,
                out_features: 10,
                bias: true,
            },
        );
        b.finish("resnet20", &[3, 32, 32], 10)
    }

    /// ImageNet ResNet-50 with stride on the 3x3 bottleneck conv.
    ///
    /// The stem max-pool is described as a 3x3/2 average pool with the same
    /// output geometry; the descriptor is used for cost accounting only.
    pub fn resnet50() -> Self {
        let mut b = Builder::new();
        b.conv_bn_relu("conv1", 3, 64, 7, 2, 3);
        b.push("pool", LayerKind::AvgPool { kernel: 3, stride: 2, padding: 1 });
        let mut in_c = 64;
        for (stage, &(width, blocks, stride)) in
            [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)].iter().enumerate()
        {
            for block in 0..blocks {
                let s = if block == 0 { stride } else { 1 };
                let p = format!("layer{}.{}", stage + 1, block);
                let entry = b.cursor();
                let out_c = width * 4;
                b.conv_bn(&format!("{}.conv1", p), in_c, width, 1, 1, 0);
                b.push(&format!("{}.relu1", p), LayerKind::Relu);
                b.conv_bn(&format!("{}.conv2", p), width, width, 3, s, 1);
                b.push(&format!("{}.relu2", p), LayerKind::Relu);
                b.conv_bn(&format!("{}.conv3", p), width, out_c, 1, 1, 0);
                let main = b.cursor();
                let skip = if s != 1 || in_c != out_c {
                    b.conv_bn_from(&format!("{}.downsample", p), entry, in_c, out_c, 1, s, 0)
                } else {
                    entry
                };
                b.push_from(&format!("{}.add", p), LayerKind::ResidualAdd { skip }, main);
                b.push(&format!("{}.relu3", p), LayerKind::Relu);
                in_c = out_c;
            }
        }
        b.push("avgpool", LayerKind::AvgPool { kernel: 7, stride: 1, padding: 0 });
        b.push("flatten", LayerKind::Flatten);
        b.push(
            "fc",
            LayerKind::FullyConnected {
                in_features: 2048,
                out_features: 1000,
                bias: true,
            },
        );
        b.finish("resnet50", &[3, 224, 224], 1000)
    }
}

fn pooled(h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> Option<(usize, usize)> {
    let ph = h + 2 * padding;
    let pw = w + 2 * padding;
    if ph < kernel || pw < kernel {
        return None;
    }
    Some(((ph - kernel) / stride + 1, (pw - kernel) / stride + 1))
}

/// Incremental construction of a [`NetworkSpec`].
#[derive(Default)]
pub struct Builder {
    layers: Vec<LayerSpec>,
}

impl Builder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Activation index of the most recent output.
    pub fn cursor(&self) -> usize {
        self.layers.len()
    }

    pub fn push(&mut self, name: &str, kind: LayerKind) -> usize {
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind,
            input: None,
        });
        self.cursor()
    }

    pub fn push_from(&mut self, name: &str, kind: LayerKind, input: usize) -> usize {
        let input = if input == self.cursor() { None } else { Some(input) };
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind,
            input,
        });
        self.cursor()
    }

    fn conv_bn_from(
        &mut self,
        name: &str,
        from: usize,
        cin: usize,
        cout: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> usize {
        self.push_from(
            name,
            LayerKind::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride: s,
                padding: p,
                bias: false,
            },
            from,
        );
        self.push(&format!("{}.bn", name), LayerKind::BatchNorm { channels: cout })
    }

    pub fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, s: usize, p: usize) -> usize {
        let from = self.cursor();
        self.conv_bn_from(name, from, cin, cout, k, s, p)
    }

    pub fn conv_bn_relu(&mut self, name: &str, cin: usize, cout: usize, k: usize, s: usize, p: usize) -> usize {
        self.conv_bn(name, cin, cout, k, s, p);
        self.push(&format!("{}.relu", name), LayerKind::Relu)
    }

    pub fn finish(self, name: &str, input_shape: &[usize], classes: usize) -> NetworkSpec {
        NetworkSpec {
            name: name.to_string(),
            input_shape: input_shape.to_vec(),
            classes,
            layers: self.layers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["mlp", "mlp-small", "convnet", "resnet20", "resnet50"] {
            let net = NetworkSpec::preset(name).unwrap();
            net.validate().unwrap_or_else(|e| panic!("{}: {}", name, e));
        }
    }

    #[test]
    fn resnet_param_counts() {
        assert_eq!(NetworkSpec::resnet20().param_count(), 272_474);
        assert_eq!(NetworkSpec::resnet50().param_count(), 25_557_032);
    }

    #[test]
    fn rejects_padding_not_below_kernel() {
        let mut net = NetworkSpec::convnet(&[1, 8, 8], 3);
        if let LayerKind::Conv2d { padding, .. } = &mut net.layers[0].kind {
            *padding = 3;
        }
        assert!(matches!(net.validate(), Err(DressError::Config(_))));
    }

    #[test]
    fn rejects_shape_mismatch_and_dangling_heads() {
        let mut net = NetworkSpec::mlp(&[4], &[3], 2, false);
        if let LayerKind::FullyConnected { in_features, .. } = &mut net.layers[0].kind {
            *in_features = 5;
        }
        assert!(net.validate().is_err());

        let mut net = NetworkSpec::mlp(&[4], &[3], 2, false);
        net.layers[2].input = Some(0);
        assert!(net.validate().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let net = NetworkSpec::resnet20();
        let s = serde_json::to_string(&net).unwrap();
        let back: NetworkSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(net, back);
    }
}
