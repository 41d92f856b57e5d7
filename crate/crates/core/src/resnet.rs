//! Residual networks for 32x32-style inputs: a 3x3 stem convolution, three
//! stages of `n` residual units at widths `{w, 2w, 4w}` (subsampling by
//! stride-2 convolutions), global average pooling and a dense softmax head.
//!
//! Unit layouts:
//!
//! | layout   | residual branch (plain: x2, bottleneck: x3) | stem               | after last unit |
//! |----------|---------------------------------------------|--------------------|-----------------|
//! | baseline | Conv-BN-ReLU ... Conv-BN, add, ReLU          | Conv-BN-ReLU       | -               |
//! | v1       | ReLU-IC-Conv                                | Conv               | ReLU-IC         |
//! | v2       | IC-Conv-ReLU                                | Conv-ReLU          | IC              |
//! | v3       | Conv-ReLU-IC                                | Conv-ReLU-IC       | -               |
//!
//! Stems are the unit triple with any normalization of the raw image
//! removed. With these stems every IC layout carries exactly as many
//! scale/shift pairs as the baseline. Shortcuts are identities, or 1x1
//! projections when the unit changes stride or width.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::layers::checkpoint::Checkpoint;
use crate::layers::{BatchNorm, Conv2d, Dense, DropoutMode, DropoutSpec, IcLayer, Layer, LayerNode, Mode, Param, Relu};
use crate::rng::Rng;
use crate::tensor::{Element, Padding, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Baseline,
    V1,
    V2,
    V3,
}

impl Layout {
    pub const ALL: [Layout; 4] = [Layout::Baseline, Layout::V1, Layout::V2, Layout::V3];

    pub fn name(self) -> &'static str {
        match self {
            Layout::Baseline => "baseline",
            Layout::V1 => "v1",
            Layout::V2 => "v2",
            Layout::V3 => "v3",
        }
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Layout::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown layout '{s}' (expected baseline, v1, v2 or v3)")))
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualUnitKind {
    pub layout: Layout,
    pub bottleneck: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Residual units per stage.
    pub n: usize,
    pub unit: ResidualUnitKind,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Width of the first stage; later stages double it.
    pub base_width: usize,
    pub drop_rate: f64,
    pub dropout_mode: DropoutMode,
}

impl NetSpec {
    pub fn new(n: usize, layout: Layout, bottleneck: bool, num_classes: usize) -> Self {
        Self {
            n,
            unit: ResidualUnitKind { layout, bottleneck },
            num_classes,
            in_channels: 3,
            base_width: 16,
            drop_rate: 0.05,
            dropout_mode: DropoutMode::Inverted,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n == 0 {
            problems.push("n must be >= 1".to_string());
        }
        if self.num_classes < 2 {
            problems.push(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.in_channels == 0 {
            problems.push("in_channels must be >= 1".to_string());
        }
        if self.base_width == 0 {
            problems.push("base_width must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            problems.push(format!("drop_rate must lie in [0, 1), got {}", self.drop_rate));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Spec(problems.join("; ")))
        }
    }

    /// Stem conv + residual-branch convs + dense head; projection shortcuts
    /// are not counted.
    pub fn weighted_depth(&self) -> usize {
        let per_unit = if self.unit.bottleneck { 3 } else { 2 };
        3 * per_unit * self.n + 2
    }

    pub fn dropout(&self) -> Result<DropoutSpec> {
        DropoutSpec::from_drop_rate(self.drop_rate, self.dropout_mode)
    }

    fn stage_widths(&self) -> [usize; 3] {
        [self.base_width, 2 * self.base_width, 4 * self.base_width]
    }

    fn expansion(&self) -> usize {
        if self.unit.bottleneck {
            4
        } else {
            1
        }
    }

    pub fn output_channels(&self) -> usize {
        self.stage_widths()[2] * self.expansion()
    }
}

#[derive(Debug, Clone)]
pub struct ResidualUnit<E: Element> {
    pub name: String,
    pub branch: Vec<LayerNode<E>>,
    pub shortcut: Option<Conv2d<E>>,
    pub post: Vec<LayerNode<E>>,
}

impl<E: Element> ResidualUnit<E> {
    fn forward(&mut self, x: &Tensor<E>, mode: Mode, rng: &mut Rng) -> Result<Tensor<E>> {
        let skip = match &mut self.shortcut {
            Some(conv) => conv.forward(x, mode, rng)?,
            None => x.clone(),
        };
        let mut h = run_forward(&mut self.branch, x, mode, rng)?;
        h.add_assign(&skip)?;
        run_forward(&mut self.post, &h, mode, rng)
    }

    fn backward(&mut self, grad: &Tensor<E>) -> Result<Tensor<E>> {
        let g = run_backward(&mut self.post, grad)?;
        let mut gx = run_backward(&mut self.branch, &g)?;
        match &mut self.shortcut {
            Some(conv) => gx.add_assign(&conv.backward(&g)?)?,
            None => gx.add_assign(&g)?,
        }
        Ok(gx)
    }
}

fn run_forward<E: Element>(layers: &mut [LayerNode<E>], x: &Tensor<E>, mode: Mode, rng: &mut Rng) -> Result<Tensor<E>> {
    let mut h = x.clone();
    for layer in layers {
        h = layer.forward(&h, mode, rng)?;
    }
    Ok(h)
}

fn run_backward<E: Element>(layers: &mut [LayerNode<E>], grad: &Tensor<E>) -> Result<Tensor<E>> {
    let mut g = grad.clone();
    for layer in layers.iter_mut().rev() {
        g = layer.backward(&g)?;
    }
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct ResNet<E: Element> {
    pub spec: NetSpec,
    pub stem: Vec<LayerNode<E>>,
    pub units: Vec<ResidualUnit<E>>,
    pub tail: Vec<LayerNode<E>>,
    pub head: Dense<E>,
    pooled_from: Option<Vec<usize>>,
}

/// One entry of [`ResNet::layer_table`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummary {
    pub name: String,
    pub kind: crate::layers::LayerKind,
    pub output_shape: Vec<usize>,
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchSummary {
    pub spec: NetSpec,
    pub input_shape: Vec<usize>,
    pub weighted_layers: usize,
    pub parameter_count: usize,
    pub stage_output_shapes: Vec<Vec<usize>>,
    pub layers: Vec<LayerSummary>,
}

struct Builder<'a> {
    rng: &'a mut Rng,
    drop: DropoutSpec,
}

impl Builder<'_> {
    fn conv<E: Element>(&mut self, cin: usize, cout: usize, k: usize, stride: usize) -> Result<LayerNode<E>> {
        Ok(LayerNode::Conv2d(Conv2d::new(self.rng, cin, cout, k, stride, Padding::Same)?))
    }

    fn ic<E: Element>(&self, c: usize) -> LayerNode<E> {
        LayerNode::Ic(IcLayer::new(c, self.drop))
    }

    fn bn<E: Element>(&self, c: usize) -> LayerNode<E> {
        LayerNode::BatchNorm(BatchNorm::new(c))
    }

    /// One weight layer wrapped in the layout's triple. `cin -> cout` is the
    /// conv; `last` marks the final triple of a baseline branch, which ends
    /// before its ReLU (the ReLU follows the addition).
    fn triple<E: Element>(
        &mut self,
        layout: Layout,
        (cin, cout): (usize, usize),
        k: usize,
        stride: usize,
        last: bool,
    ) -> Result<Vec<LayerNode<E>>> {
        let conv = self.conv(cin, cout, k, stride)?;
        Ok(match layout {
            Layout::Baseline if last => vec![conv, self.bn(cout)],
            Layout::Baseline => vec![conv, self.bn(cout), LayerNode::Relu(Relu::new())],
            Layout::V1 => vec![LayerNode::Relu(Relu::new()), self.ic(cin), conv],
            Layout::V2 => vec![self.ic(cin), conv, LayerNode::Relu(Relu::new())],
            Layout::V3 => vec![conv, LayerNode::Relu(Relu::new()), self.ic(cout)],
        })
    }
}

impl<E: Element> ResNet<E> {
    pub fn build(spec: &NetSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layout = spec.unit.layout;
        let mut b = Builder {
            rng,
            drop: spec.dropout()?,
        };
        let widths = spec.stage_widths();
        let w0 = widths[0];
        let stem_conv = b.conv(spec.in_channels, w0, 3, 1)?;
        let stem = match layout {
            Layout::Baseline => vec![stem_conv, b.bn(w0), LayerNode::Relu(Relu::new())],
            Layout::V1 => vec![stem_conv],
            Layout::V2 => vec![stem_conv, LayerNode::Relu(Relu::new())],
            Layout::V3 => vec![stem_conv, LayerNode::Relu(Relu::new()), b.ic(w0)],
        };

        let mut units = Vec::with_capacity(3 * spec.n);
        let mut channels = w0;
        for (s, &w) in widths.iter().enumerate() {
            for u in 0..spec.n {
                let stride = if s > 0 && u == 0 { 2 } else { 1 };
                let out = w * spec.expansion();
                let mut branch = Vec::new();
                if spec.unit.bottleneck {
                    branch.extend(b.triple(layout, (channels, w), 1, 1, false)?);
                    branch.extend(b.triple(layout, (w, w), 3, stride, false)?);
                    branch.extend(b.triple(layout, (w, out), 1, 1, true)?);
                } else {
                    branch.extend(b.triple(layout, (channels, w), 3, stride, false)?);
                    branch.extend(b.triple(layout, (w, w), 3, 1, true)?);
                }
                let shortcut = if stride != 1 || channels != out {
                    Some(Conv2d::new(b.rng, channels, out, 1, stride, Padding::Same)?)
                } else {
                    None
                };
                let post = match layout {
                    Layout::Baseline => vec![LayerNode::Relu(Relu::new())],
                    _ => Vec::new(),
                };
                units.push(ResidualUnit {
                    name: format!("stage{}.unit{u}", s + 1),
                    branch,
                    shortcut,
                    post,
                });
                channels = out;
            }
        }

        let tail = match layout {
            Layout::V1 => vec![LayerNode::Relu(Relu::new()), b.ic(channels)],
            Layout::V2 => vec![b.ic(channels)],
            Layout::Baseline | Layout::V3 => Vec::new(),
        };
        let head = Dense::new(b.rng, channels, spec.num_classes)?;
        Ok(Self {
            spec: spec.clone(),
            stem,
            units,
            tail,
            head,
            pooled_from: None,
        })
    }

    /// Logits `N x num_classes` for an `N x C x H x W` batch.
    pub fn forward(&mut self, x: &Tensor<E>, mode: Mode, rng: &mut Rng) -> Result<Tensor<E>> {
        let mut h = run_forward(&mut self.stem, x, mode, rng)?;
        for unit in &mut self.units {
            h = unit.forward(&h, mode, rng)?;
        }
        h = run_forward(&mut self.tail, &h, mode, rng)?;
        let pooled = h.global_avg_pool()?;
        self.pooled_from = mode.is_training().then(|| h.shape().to_vec());
        self.head.forward(&pooled, mode, rng)
    }

    /// Backpropagates a gradient on the logits; returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor<E>) -> Result<Tensor<E>> {
        let shape = self
            .pooled_from
            .clone()
            .ok_or_else(|| Error::Usage("network backward called without a training-mode forward".into()))?;
        let gp = self.head.backward(grad)?;
        let hw = shape[2] * shape[3];
        let inv = E::lit(1.0 / hw as f64);
        let spread: Vec<E> = gp.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, hw)).collect();
        let mut g = Tensor::new(&shape, spread)?;
        g = run_backward(&mut self.tail, &g)?;
        for unit in self.units.iter_mut().rev() {
            g = unit.backward(&g)?;
        }
        run_backward(&mut self.stem, &g)
    }

    /// Every layer with its qualified name, in forward order.
    fn for_each_layer<'a>(&'a self, f: &mut dyn FnMut(String, &'a dyn Layer<E>)) {
        for (i, l) in self.stem.iter().enumerate() {
            f(format!("stem.{i}"), l);
        }
        for unit in &self.units {
            if let Some(sc) = &unit.shortcut {
                f(format!("{}.shortcut", unit.name), sc);
            }
            for (i, l) in unit.branch.iter().enumerate() {
                f(format!("{}.branch.{i}", unit.name), l);
            }
            for (i, l) in unit.post.iter().enumerate() {
                f(format!("{}.post.{i}", unit.name), l);
            }
        }
        for (i, l) in self.tail.iter().enumerate() {
            f(format!("tail.{i}"), l);
        }
        f("head".into(), &self.head);
    }

    fn for_each_layer_mut(&mut self, f: &mut dyn FnMut(String, &mut dyn Layer<E>)) {
        for (i, l) in self.stem.iter_mut().enumerate() {
            f(format!("stem.{i}"), l);
        }
        for unit in &mut self.units {
            if let Some(sc) = &mut unit.shortcut {
                f(format!("{}.shortcut", unit.name), sc);
            }
            for (i, l) in unit.branch.iter_mut().enumerate() {
                f(format!("{}.branch.{i}", unit.name), l);
            }
            for (i, l) in unit.post.iter_mut().enumerate() {
                f(format!("{}.post.{i}", unit.name), l);
            }
        }
        for (i, l) in self.tail.iter_mut().enumerate() {
            f(format!("tail.{i}"), l);
        }
        f("head".into(), &mut self.head);
    }

    pub fn named_params(&self) -> Vec<(String, &Param<E>)> {
        let mut out = Vec::new();
        self.for_each_layer(&mut |name, layer| {
            for p in layer.params() {
                out.push((format!("{name}.{}", p.name), p));
            }
        });
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut out: Vec<&mut Param<E>> = Vec::new();
        for l in &mut self.stem {
            out.extend(l.params_mut());
        }
        for unit in &mut self.units {
            if let Some(sc) = &mut unit.shortcut {
                out.extend(sc.params_mut());
            }
            for l in &mut unit.branch {
                out.extend(l.params_mut());
            }
            for l in &mut unit.post {
                out.extend(l.params_mut());
            }
        }
        for l in &mut self.tail {
            out.extend(l.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    /// Total learnable scalars (conv kernels, dense weights and biases,
    /// normalization scale/shift pairs).
    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn weighted_layer_count(&self) -> usize {
        let mut count = 0;
        self.for_each_layer(&mut |name, layer| {
            if layer.weighted() && !name.ends_with(".shortcut") {
                count += 1;
            }
        });
        count
    }

    /// Output shape of every layer for an `N x C x H x W` input, plus the
    /// residual additions and the pooled features.
    pub fn layer_table(&self, input: &[usize]) -> Result<Vec<LayerSummary>> {
        let mut rows = Vec::new();
        let mut shape = input.to_vec();
        let summarize = |name: String, layer: &dyn Layer<E>, shape: &[usize]| -> Result<LayerSummary> {
            Ok(LayerSummary {
                name,
                kind: layer.kind(),
                output_shape: layer.output_shape(shape)?,
                parameters: layer.params().iter().map(|p| p.value.len()).sum(),
            })
        };
        for (i, l) in self.stem.iter().enumerate() {
            let row = summarize(format!("stem.{i}"), l, &shape)?;
            shape = row.output_shape.clone();
            rows.push(row);
        }
        for unit in &self.units {
            let skip_shape = match &unit.shortcut {
                Some(sc) => {
                    let row = summarize(format!("{}.shortcut", unit.name), sc, &shape)?;
                    let s = row.output_shape.clone();
                    rows.push(row);
                    s
                }
                None => shape.clone(),
            };
            let mut h = shape.clone();
            for (i, l) in unit.branch.iter().enumerate() {
                let row = summarize(format!("{}.branch.{i}", unit.name), l, &h)?;
                h = row.output_shape.clone();
                rows.push(row);
            }
            if h != skip_shape {
                return Err(Error::Shape(format!(
                    "{}: branch output {h:?} does not match shortcut {skip_shape:?}",
                    unit.name
                )));
            }
            for (i, l) in unit.post.iter().enumerate() {
                let row = summarize(format!("{}.post.{i}", unit.name), l, &h)?;
                h = row.output_shape.clone();
                rows.push(row);
            }
            shape = h;
        }
        for (i, l) in self.tail.iter().enumerate() {
            let row = summarize(format!("tail.{i}"), l, &shape)?;
            shape = row.output_shape.clone();
            rows.push(row);
        }
        let pooled = vec![shape[0], shape[1]];
        rows.push(summarize("head".into(), &self.head, &pooled)?);
        Ok(rows)
    }

    /// Output shape of each stage's last unit.
    pub fn stage_output_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let table = self.layer_table(input)?;
        Ok((1..=3)
            .map(|s| {
                let prefix = format!("stage{s}.");
                table
                    .iter()
                    .rev()
                    .find(|r| r.name.starts_with(&prefix) && !r.name.contains(".shortcut"))
                    .map(|r| r.output_shape.clone())
                    .expect("every stage has units")
            })
            .collect())
    }

    pub fn summary(&self, input: &[usize]) -> Result<ArchSummary> {
        Ok(ArchSummary {
            spec: self.spec.clone(),
            input_shape: input.to_vec(),
            weighted_layers: self.weighted_layer_count(),
            parameter_count: self.parameter_count(),
            stage_output_shapes: self.stage_output_shapes(input)?,
            layers: self.layer_table(input)?,
        })
    }

    /// Sets every residual-branch weight to zero.
    pub fn zero_residual_branches(&mut self) {
        for unit in &mut self.units {
            for l in &mut unit.branch {
                if let LayerNode::Conv2d(c) = l {
                    c.kernel.value = Tensor::zeros(c.kernel.value.shape());
                }
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<E> {
        let mut layers = Vec::new();
        let mut tensors = Vec::new();
        self.for_each_layer(&mut |name, layer| {
            layers.push(json!({ "name": name, "kind": layer.kind(), "hyper": layer.hyper() }));
            for p in layer.params() {
                tensors.push((format!("{name}.{}", p.name), p.value.clone()));
            }
            for (b, t) in layer.buffers() {
                tensors.push((format!("{name}.{b}"), t.clone()));
            }
        });
        Checkpoint {
            manifest: json!({ "spec": self.spec, "layers": layers }),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint<E>) -> Result<Self> {
        let spec: NetSpec = serde_json::from_value(ck.manifest["spec"].clone())?;
        let mut net = Self::build(&spec, &mut Rng::new(0))?;
        net.load_checkpoint(ck)?;
        Ok(net)
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint<E>) -> Result<()> {
        let mut result = Ok(());
        self.for_each_layer_mut(&mut |name, layer| {
            if result.is_err() {
                return;
            }
            let load = |key: String, slot: &mut Tensor<E>| -> Result<()> {
                match ck.get(&key) {
                    Some(t) if t.shape() == slot.shape() => {
                        *slot = t.clone();
                        Ok(())
                    }
                    Some(t) => Err(Error::Shape(format!(
                        "checkpoint tensor {key} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    ))),
                    None => Err(Error::Config(format!("checkpoint is missing tensor {key}"))),
                }
            };
            let mut status = Ok(());
            for p in layer.params_mut() {
                status = status.and_then(|_| load(format!("{name}.{}", p.name), &mut p.value));
            }
            for (b, t) in layer.buffers_mut() {
                status = status.and_then(|_| load(format!("{name}.{b}"), t));
            }
            result = status;
        });
        result
    }
}

/// Architecture summary for a spec without keeping the network around.
pub fn forward_shapes(spec: &NetSpec, input: &[usize]) -> Result<ArchSummary> {
    ResNet::<f32>::build(spec, &mut Rng::new(0))?.summary(input)
}
