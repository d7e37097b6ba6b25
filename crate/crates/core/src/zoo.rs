//! Network specifications, builders, and forward evaluation.
//!
//! Three network families live here: teachers (the analyzed networks, with a
//! designated tap layer whose output is the target feature), disentangler
//! nets of controlled ReLU depth, and frozen random task nets that define
//! synthetic tasks of a given complexity order.
//!
//! Spatial reduction happens entirely in the dimension-matching stem
//! convolution: the conv contract requires `(h + 2*pad - k)/stride + 1` to be
//! exactly integral with odd `k`, which rules out the classic stride-2
//! halving of even extents. Residual stages therefore run at constant
//! spatial size and the stem geometry is chosen by a small solver.

use crate::error::{FcxError, Result};
use crate::graph::{Graph, NodeId};
use crate::ops;
use crate::tensor::{Init, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One layer of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Conv { c_out: usize, k: usize, stride: usize, pad: usize },
    Affine { d_out: usize },
    Relu,
    Flatten,
    /// Pre-activation residual block: `y = conv3x3(relu(x)) + pad(x)`.
    /// Contributes exactly one ReLU and one conv layer.
    ResidualBlock { channels: usize },
}

/// Declarative layer list with input shape and tap position.
///
/// Layers `0..=tap` produce the tap feature; layers `tap+1..` form the head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub tap: usize,
}

impl NetworkSpec {
    /// Number of ReLU nonlinearities; residual blocks contribute one each.
    pub fn relu_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Relu | Layer::ResidualBlock { .. }))
            .count()
    }

    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. } | Layer::ResidualBlock { .. }))
            .count()
    }

    /// Shape (without batch axis) after applying layers `0..upto`.
    pub fn shape_after(&self, upto: usize) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers[..upto] {
            shape = layer_output_shape(layer, &shape)?;
        }
        Ok(shape)
    }

    pub fn tap_shape(&self) -> Result<Vec<usize>> {
        self.shape_after(self.tap + 1)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        self.shape_after(self.layers.len())
    }

    /// Validates that consecutive layer shapes compose.
    pub fn validate(&self) -> Result<()> {
        if self.tap >= self.layers.len() {
            return Err(FcxError::InvalidShape(format!(
                "tap index {} out of range for {} layers",
                self.tap,
                self.layers.len()
            )));
        }
        self.output_shape().map(|_| ())
    }
}

fn layer_output_shape(layer: &Layer, input: &[usize]) -> Result<Vec<usize>> {
    match layer {
        Layer::Conv { c_out, k, stride, pad } => {
            if input.len() != 3 {
                return Err(FcxError::InvalidShape(format!(
                    "conv needs [c,h,w] input, got {input:?}"
                )));
            }
            if *k % 2 == 0 {
                return Err(FcxError::InvalidShape(format!("kernel extent must be odd, got {k}")));
            }
            let h = ops::conv_out_dim(input[1], *k, *stride, *pad)?;
            let w = ops::conv_out_dim(input[2], *k, *stride, *pad)?;
            Ok(vec![*c_out, h, w])
        }
        Layer::Affine { d_out } => {
            if input.len() != 1 {
                return Err(FcxError::InvalidShape(format!(
                    "affine needs flattened [d] input, got {input:?}"
                )));
            }
            Ok(vec![*d_out])
        }
        Layer::Relu => Ok(input.to_vec()),
        Layer::Flatten => Ok(vec![input.iter().product()]),
        Layer::ResidualBlock { channels } => {
            if input.len() != 3 {
                return Err(FcxError::InvalidShape(format!(
                    "residual block needs [c,h,w] input, got {input:?}"
                )));
            }
            if *channels < input[0] {
                return Err(FcxError::InvalidShape(format!(
                    "residual block cannot narrow channels: {} -> {channels}",
                    input[0]
                )));
            }
            Ok(vec![*channels, input[1], input[2]])
        }
    }
}

fn param_name(layer_idx: usize, which: &str) -> String {
    format!("layer{layer_idx:03}.{which}")
}

/// A spec plus its parameters. Frozen networks reject parameter mutation and
/// their forward outputs are pure functions of the input.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    params: BTreeMap<String, Tensor>,
    pub seed: u64,
    frozen: bool,
}

impl Network {
    /// He-normal initialization of every weight, zero biases; deterministic
    /// in `seed`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut shape = spec.input_shape.clone();
        for (i, layer) in spec.layers.iter().enumerate() {
            match layer {
                Layer::Conv { c_out, k, .. } => {
                    let fan_in = shape[0] * k * k;
                    let w = Tensor::new(
                        &[*c_out, shape[0], *k, *k],
                        Init::HeNormal { fan_in },
                        rng.next_u64(),
                    )?;
                    params.insert(param_name(i, "weight"), w);
                    params.insert(param_name(i, "bias"), Tensor::zeros(&[*c_out]));
                }
                Layer::Affine { d_out } => {
                    let fan_in = shape[0];
                    let w = Tensor::new(
                        &[fan_in, *d_out],
                        Init::HeNormal { fan_in },
                        rng.next_u64(),
                    )?;
                    params.insert(param_name(i, "weight"), w);
                    params.insert(param_name(i, "bias"), Tensor::zeros(&[*d_out]));
                }
                Layer::ResidualBlock { channels } => {
                    let fan_in = shape[0] * 9;
                    // residual branches start near identity: a down-scaled He
                    // draw keeps deep stacks trainable from the shallow end
                    let w = Tensor::new(
                        &[*channels, shape[0], 3, 3],
                        Init::HeNormal { fan_in },
                        rng.next_u64(),
                    )?
                    .scale(0.1);
                    params.insert(param_name(i, "weight"), w);
                    params.insert(param_name(i, "bias"), Tensor::zeros(&[*channels]));
                }
                Layer::Relu | Layer::Flatten => {}
            }
            shape = layer_output_shape(layer, &shape)?;
        }
        Ok(Network { spec, params, seed, frozen: false })
    }

    pub fn from_parts(
        spec: NetworkSpec,
        params: BTreeMap<String, Tensor>,
        seed: u64,
        frozen: bool,
    ) -> Result<Self> {
        spec.validate()?;
        let expect = Network::init(spec.clone(), 0)?;
        for (name, t) in &expect.params {
            let got = params.get(name).ok_or_else(|| {
                FcxError::InvalidShape(format!("missing parameter {name}"))
            })?;
            if got.shape() != t.shape() {
                return Err(FcxError::ShapeMismatch {
                    expected: t.shape().to_vec(),
                    got: got.shape().to_vec(),
                });
            }
        }
        if params.len() != expect.params.len() {
            return Err(FcxError::InvalidShape("unexpected extra parameters".into()));
        }
        Ok(Network { spec, params, seed, frozen })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Unfrozen copy for further training (compression retraining).
    pub fn thawed_clone(&self) -> Self {
        let mut n = self.clone();
        n.frozen = false;
        n
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut BTreeMap<String, Tensor>> {
        if self.frozen {
            return Err(FcxError::FrozenNetwork);
        }
        Ok(&mut self.params)
    }

    pub fn set_params(&mut self, params: BTreeMap<String, Tensor>) -> Result<()> {
        if self.frozen {
            return Err(FcxError::FrozenNetwork);
        }
        self.params = params;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.spec.input_shape.len() + 1
            || x.shape()[1..] != *self.spec.input_shape
        {
            return Err(FcxError::ShapeMismatch {
                expected: self.spec.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn run_layers(&self, range: std::ops::Range<usize>, mut x: Tensor) -> Result<Tensor> {
        for (i, layer) in self.spec.layers[range.clone()].iter().enumerate() {
            let idx = range.start + i;
            x = match layer {
                Layer::Conv { k: _, stride, pad, .. } => {
                    let w = &self.params[&param_name(idx, "weight")];
                    let b = &self.params[&param_name(idx, "bias")];
                    let geom = ops::ConvGeom::resolve(x.shape(), w.shape(), *stride, *pad)?;
                    ops::conv2d_forward(&x, w, b, &geom)
                }
                Layer::Affine { .. } => {
                    let w = &self.params[&param_name(idx, "weight")];
                    let b = &self.params[&param_name(idx, "bias")];
                    ops::affine_forward(&x, w, b)?
                }
                Layer::Relu => ops::relu_forward(&x),
                Layer::Flatten => {
                    let n = x.shape()[0];
                    let d: usize = x.shape()[1..].iter().product();
                    x.reshaped(&[n, d])?
                }
                Layer::ResidualBlock { channels } => {
                    let w = &self.params[&param_name(idx, "weight")];
                    let b = &self.params[&param_name(idx, "bias")];
                    let r = ops::relu_forward(&x);
                    let geom = ops::ConvGeom::resolve(r.shape(), w.shape(), 1, 1)?;
                    let c = ops::conv2d_forward(&r, w, b, &geom);
                    let sc = if *channels == x.shape()[1] {
                        x
                    } else {
                        ops::pad_channels_forward(&x, *channels)?
                    };
                    c.add(&sc)?
                }
            };
        }
        Ok(x)
    }

    /// Tap feature `f(x)` for a batched input `x`.
    pub fn forward_to_feature(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.run_layers(0..self.spec.tap + 1, x.clone())
    }

    /// Head output for a batched tap-shaped feature.
    pub fn head_forward(&self, feature: &Tensor) -> Result<Tensor> {
        let tap_shape = self.spec.tap_shape()?;
        if feature.shape().len() != tap_shape.len() + 1 || feature.shape()[1..] != tap_shape {
            return Err(FcxError::ShapeMismatch {
                expected: tap_shape,
                got: feature.shape().to_vec(),
            });
        }
        self.run_layers(self.spec.tap + 1..self.spec.layers.len(), feature.clone())
    }

    /// Full forward pass; bitwise identical to
    /// `head_forward(forward_to_feature(x))` by construction.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.forward_to_feature(x)?;
        self.head_forward(&f)
    }

    /// Inserts parameters into a graph (trainable unless frozen) and returns
    /// their node ids keyed by name.
    pub fn bind(&self, g: &mut Graph) -> BTreeMap<String, NodeId> {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.params {
            let id = if self.frozen { g.input(t.clone()) } else { g.param(name, t.clone()) };
            ids.insert(name.clone(), id);
        }
        ids
    }

    /// Taped forward over `range` starting from graph node `x`.
    pub fn forward_on_graph(
        &self,
        g: &mut Graph,
        ids: &BTreeMap<String, NodeId>,
        x: NodeId,
        range: std::ops::Range<usize>,
    ) -> Result<NodeId> {
        let mut cur = x;
        for (i, layer) in self.spec.layers[range.clone()].iter().enumerate() {
            let idx = range.start + i;
            cur = match layer {
                Layer::Conv { stride, pad, .. } => {
                    let w = ids[&param_name(idx, "weight")];
                    let b = ids[&param_name(idx, "bias")];
                    g.conv2d(cur, w, b, *stride, *pad)?
                }
                Layer::Affine { .. } => {
                    let w = ids[&param_name(idx, "weight")];
                    let b = ids[&param_name(idx, "bias")];
                    g.affine(cur, w, b)?
                }
                Layer::Relu => g.relu(cur),
                Layer::Flatten => g.flatten(cur)?,
                Layer::ResidualBlock { channels } => {
                    let w = ids[&param_name(idx, "weight")];
                    let b = ids[&param_name(idx, "bias")];
                    let r = g.relu(cur);
                    let c = g.conv2d(r, w, b, 1, 1)?;
                    let sc = if *channels == g.value(cur).shape()[1] {
                        cur
                    } else {
                        g.pad_channels(cur, *channels)?
                    };
                    g.add(c, sc)?
                }
            };
        }
        Ok(cur)
    }

    /// Taped forward to the tap feature.
    pub fn feature_on_graph(
        &self,
        g: &mut Graph,
        ids: &BTreeMap<String, NodeId>,
        x: NodeId,
    ) -> Result<NodeId> {
        self.forward_on_graph(g, ids, x, 0..self.spec.tap + 1)
    }
}

/// Stem geometry solver: a single conv taking spatial extent `h_in` to
/// `h_out` under the exact-division contract. Prefers the smallest stride,
/// then a kernel near 3x3.
pub fn fit_conv_geometry(h_in: usize, h_out: usize) -> Result<(usize, usize, usize)> {
    if h_out > h_in {
        return Err(FcxError::InvalidGeometry(format!(
            "cannot grow spatial extent {h_in} -> {h_out} with a conv"
        )));
    }
    for stride in 1..=h_in {
        let mut best: Option<(usize, usize)> = None;
        for pad in 0..=2usize {
            let span = h_in + 2 * pad;
            let need = stride * (h_out - 1);
            if span <= need {
                continue;
            }
            let k = span - need;
            if k % 2 == 0 || k > span.min(11) {
                continue;
            }
            let better = match best {
                None => true,
                // favor k >= 3, then smaller k, then smaller pad
                Some((bk, _)) => {
                    let rank = |kk: usize| if kk >= 3 { kk } else { 100 + kk };
                    rank(k) < rank(bk)
                }
            };
            if better {
                best = Some((k, pad));
            }
        }
        if let Some((k, pad)) = best {
            return Ok((k, stride, pad));
        }
    }
    Err(FcxError::InvalidGeometry(format!(
        "no odd-kernel conv maps extent {h_in} to {h_out} exactly"
    )))
}

/// Family of disentangler nets indexed by residual-stage multiplicity `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglerFamilySpec {
    pub m_values: Vec<usize>,
    pub width_factor: f64,
    pub base_widths: [usize; 3],
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl DisentanglerFamilySpec {
    pub fn new(input_shape: Vec<usize>, output_shape: Vec<usize>) -> Self {
        DisentanglerFamilySpec {
            m_values: vec![1, 2, 4],
            width_factor: 1.0,
            base_widths: [16, 32, 64],
            input_shape,
            output_shape,
        }
    }

    /// ReLU depths `3m + 1`, strictly ascending.
    pub fn depths(&self) -> Vec<usize> {
        self.m_values.iter().map(|m| 3 * m + 1).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_values.is_empty() {
            return Err(FcxError::InvalidDepth("m_values must be non-empty".into()));
        }
        if self.m_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FcxError::InvalidDepth(format!(
                "m_values must be strictly ascending, got {:?}",
                self.m_values
            )));
        }
        if self.m_values[0] < 1 {
            return Err(FcxError::InvalidDepth("m must be >= 1".into()));
        }
        Ok(())
    }

    pub fn build(&self, m: usize, seed: u64) -> Result<Network> {
        build_disentangler(
            m,
            self.width_factor,
            self.base_widths,
            &self.input_shape,
            &self.output_shape,
            seed,
        )
    }
}

/// Builds a disentangler net with `3m + 2` conv layers and `3m + 1` ReLUs:
/// a dimension-matching stem conv, three stages of `m` residual blocks with
/// widths `round(base * r)`, one ReLU, and a 1x1 output-matching conv.
pub fn build_disentangler(
    m: usize,
    r: f64,
    base_widths: [usize; 3],
    input_shape: &[usize],
    output_shape: &[usize],
    seed: u64,
) -> Result<Network> {
    if m < 1 {
        return Err(FcxError::InvalidDepth(format!("disentangler m must be >= 1, got {m}")));
    }
    if !(r > 0.0) {
        return Err(FcxError::InvalidWidth { base: base_widths[0], factor: r });
    }
    if input_shape.len() != 3 || output_shape.len() != 3 {
        return Err(FcxError::InvalidShape(format!(
            "disentangler wants [c,h,w] shapes, got {input_shape:?} -> {output_shape:?}"
        )));
    }
    let mut widths = [0usize; 3];
    for (w, base) in widths.iter_mut().zip(base_widths) {
        let scaled = (base as f64 * r).round();
        if scaled < 1.0 {
            return Err(FcxError::InvalidWidth { base, factor: r });
        }
        *w = scaled as usize;
    }
    let (k, stride, pad) = fit_conv_geometry(input_shape[1], output_shape[1])?;
    let (kw, sw, pw) = fit_conv_geometry(input_shape[2], output_shape[2])?;
    if (k, stride, pad) != (kw, sw, pw) {
        return Err(FcxError::InvalidGeometry(
            "non-square spatial reduction is not supported".into(),
        ));
    }

    let mut layers = vec![Layer::Conv { c_out: widths[0], k, stride, pad }];
    for &w in &widths {
        for _ in 0..m {
            layers.push(Layer::ResidualBlock { channels: w });
        }
    }
    layers.push(Layer::Relu);
    layers.push(Layer::Conv { c_out: output_shape[0], k: 1, stride: 1, pad: 0 });
    let tap = layers.len() - 1;
    Network::init(
        NetworkSpec { input_shape: input_shape.to_vec(), layers, tap },
        seed,
    )
}

/// Frozen random network with exactly `n` ReLU layers; `n = 0` is purely
/// linear in the input.
pub fn build_task_net(
    n: usize,
    seed: u64,
    input_shape: &[usize],
    output_shape: &[usize],
) -> Result<Network> {
    if input_shape.len() != 3 || output_shape.len() != 3 {
        return Err(FcxError::InvalidShape(format!(
            "task net wants [c,h,w] shapes, got {input_shape:?} -> {output_shape:?}"
        )));
    }
    let width = 16;
    let (k, stride, pad) = fit_conv_geometry(input_shape[1], output_shape[1])?;
    let mut layers = vec![Layer::Conv { c_out: width, k, stride, pad }];
    for _ in 0..n {
        layers.push(Layer::Relu);
        layers.push(Layer::Conv { c_out: width, k: 3, stride: 1, pad: 1 });
    }
    layers.push(Layer::Conv { c_out: output_shape[0], k: 1, stride: 1, pad: 0 });
    let tap = layers.len() - 1;
    let mut net = Network::init(
        NetworkSpec { input_shape: input_shape.to_vec(), layers, tap },
        seed,
    )?;
    net.freeze();
    Ok(net)
}

/// Teacher architecture selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TeacherArch {
    SmallResNet { blocks_per_stage: usize },
    SmallConv,
}

/// Teacher head: classification over `classes` or tensor regression (the tap
/// feature itself is the output; the head is empty).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TeacherHead {
    Classify { classes: usize },
    Regress,
}

/// Builds a trainable teacher exposing a tap feature and a head.
///
/// The tap is the output of the last residual stage; spatial reduction sits
/// in the stem conv.
pub fn build_teacher(
    arch: TeacherArch,
    head: TeacherHead,
    input_shape: &[usize],
    tap_spatial: usize,
    seed: u64,
) -> Result<Network> {
    if input_shape.len() != 3 {
        return Err(FcxError::InvalidShape(format!(
            "teacher wants [c,h,w] input, got {input_shape:?}"
        )));
    }
    let (k, stride, pad) = fit_conv_geometry(input_shape[1], tap_spatial)?;
    let mut layers = Vec::new();
    match arch {
        TeacherArch::SmallResNet { blocks_per_stage } => {
            if blocks_per_stage < 1 {
                return Err(FcxError::InvalidDepth("blocks_per_stage must be >= 1".into()));
            }
            layers.push(Layer::Conv { c_out: 8, k, stride, pad });
            for width in [8usize, 16, 32] {
                for _ in 0..blocks_per_stage {
                    layers.push(Layer::ResidualBlock { channels: width });
                }
            }
        }
        TeacherArch::SmallConv => {
            layers.push(Layer::Conv { c_out: 16, k, stride, pad });
            layers.push(Layer::Relu);
            layers.push(Layer::Conv { c_out: 32, k: 3, stride: 1, pad: 1 });
        }
    }
    let tap = layers.len() - 1;
    match head {
        TeacherHead::Classify { classes } => {
            layers.push(Layer::Flatten);
            layers.push(Layer::Affine { d_out: classes });
        }
        TeacherHead::Regress => {}
    }
    Network::init(
        NetworkSpec { input_shape: input_shape.to_vec(), layers, tap },
        seed,
    )
}
