//! Stacked hourglass network with a heatmap head on every unit.
//!
//! Layout (names are the parameter prefixes):
//!
//! ```text
//! stem.conv (4x4, stride 2, pad 1) -> stem.bn -> relu -> stem.res -> maxpool2
//! for each unit u:
//!   unit{u}.hg.l{depth}..l1     recursive encoder/decoder
//!   unit{u}.res -> unit{u}.lin (1x1 conv, bn, relu) -> unit{u}.head (1x1)
//!   next input = input + unit{u}.remap_feat(lin) + unit{u}.remap_hm(head)   (all but last)
//! ```
//!
//! Residual blocks are the pre-activation bottleneck: bn, relu, 1x1 conv to
//! half width, bn, relu, 3x3 conv, bn, relu, 1x1 conv back, plus an identity
//! (or 1x1 projection) skip.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{BatchStats, BnMode, Graph, Scalar, Tensor, TensorError, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Even stem kernel: with stride 2 and padding 1 it halves any even input
/// exactly, which a 3x3 kernel cannot.
pub const STEM_KERNEL: usize = 4;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("input batch: {0}")]
    Input(String),
    #[error("unit index {index} out of range for {stacks} stacks")]
    UnitOutOfRange { index: usize, stacks: usize },
    #[error("parameter set mismatch: {0}")]
    Parameters(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HourglassArch {
    pub num_stacks: usize,
    /// Pooling levels inside one hourglass unit.
    pub depth: usize,
    pub base_channels: usize,
    pub input_resolution: usize,
    pub heatmap_resolution: usize,
    pub num_output_channels: usize,
}

impl HourglassArch {
    /// Desk-scale instance: 32x32 input, 8x8 heatmaps, depth 2, 8 channels.
    pub fn desk(num_stacks: usize, num_output_channels: usize) -> Self {
        Self {
            num_stacks,
            depth: 2,
            base_channels: 8,
            input_resolution: 32,
            heatmap_resolution: 8,
            num_output_channels,
        }
    }

    /// 256x256 input, 64x64 heatmaps bottoming out at 4x4.
    pub fn full_scale(num_stacks: usize, num_output_channels: usize) -> Self {
        Self {
            num_stacks,
            depth: 4,
            base_channels: 256,
            input_resolution: 256,
            heatmap_resolution: 64,
            num_output_channels,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidArch(m));
        if self.num_stacks == 0
            || self.depth == 0
            || self.base_channels == 0
            || self.num_output_channels == 0
            || self.input_resolution == 0
        {
            return bad(format!("all extents must be positive: {self:?}"));
        }
        if !self.input_resolution.is_multiple_of(4) || self.heatmap_resolution * 4 != self.input_resolution {
            return bad(format!(
                "heatmap resolution {} must be input resolution {} / 4",
                self.heatmap_resolution, self.input_resolution
            ));
        }
        let scale = 1usize << self.depth;
        if !self.heatmap_resolution.is_multiple_of(scale) {
            return bad(format!(
                "heatmap resolution {} is not divisible by 2^depth = {scale}",
                self.heatmap_resolution
            ));
        }
        Ok(())
    }

    pub fn bottleneck_resolution(&self) -> usize {
        self.heatmap_resolution >> self.depth
    }

    /// Parameter count with every head at `num_output_channels`.
    pub fn parameter_count(&self) -> usize {
        let heads = vec![self.num_output_channels; self.num_stacks];
        layer_inventory(self, &heads)
            .iter()
            .map(LayerSpec::parameter_count)
            .sum()
    }
}

/// One learnable layer of the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        name: String,
        cin: usize,
        cout: usize,
        kernel: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. } | LayerSpec::BatchNorm { name, .. } => name,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match *self {
            LayerSpec::Conv { cin, cout, kernel, .. } => kernel * kernel * cin * cout + cout,
            LayerSpec::BatchNorm { channels, .. } => 2 * channels,
        }
    }

    /// Unit that owns the layer; `None` for the stem.
    pub fn unit(&self) -> Option<usize> {
        unit_of(self.name())
    }
}

/// Unit index encoded in a parameter or layer name (`unit3.head.weight` -> 3).
pub fn unit_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("unit")?;
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

fn bottleneck_width(cout: usize) -> usize {
    (cout / 2).max(1)
}

fn push_residual(out: &mut Vec<LayerSpec>, name: &str, cin: usize, cout: usize) {
    let mid = bottleneck_width(cout);
    let bn = |n: &str, c| LayerSpec::BatchNorm {
        name: format!("{name}.{n}"),
        channels: c,
    };
    let conv = |n: &str, cin, cout, kernel| LayerSpec::Conv {
        name: format!("{name}.{n}"),
        cin,
        cout,
        kernel,
    };
    out.push(bn("bn1", cin));
    out.push(conv("conv1", cin, mid, 1));
    out.push(bn("bn2", mid));
    out.push(conv("conv2", mid, mid, 3));
    out.push(bn("bn3", mid));
    out.push(conv("conv3", mid, cout, 1));
    if cin != cout {
        out.push(conv("skip", cin, cout, 1));
    }
}

fn push_hourglass(out: &mut Vec<LayerSpec>, prefix: &str, level: usize, c: usize) {
    push_residual(out, &format!("{prefix}.l{level}.up1"), c, c);
    push_residual(out, &format!("{prefix}.l{level}.low1"), c, c);
    if level > 1 {
        push_hourglass(out, prefix, level - 1, c);
    } else {
        push_residual(out, &format!("{prefix}.l1.low2"), c, c);
    }
    push_residual(out, &format!("{prefix}.l{level}.low3"), c, c);
}

/// Every learnable layer in build order, for the given per-unit head widths.
pub fn layer_inventory(arch: &HourglassArch, head_channels: &[usize]) -> Vec<LayerSpec> {
    let c = arch.base_channels;
    let mut out = vec![
        LayerSpec::Conv {
            name: "stem.conv".into(),
            cin: 3,
            cout: c,
            kernel: STEM_KERNEL,
        },
        LayerSpec::BatchNorm {
            name: "stem.bn".into(),
            channels: c,
        },
    ];
    push_residual(&mut out, "stem.res", c, c);
    for (u, &j) in head_channels.iter().enumerate() {
        let p = format!("unit{u}");
        push_hourglass(&mut out, &format!("{p}.hg"), arch.depth, c);
        push_residual(&mut out, &format!("{p}.res"), c, c);
        out.push(LayerSpec::Conv {
            name: format!("{p}.lin.conv"),
            cin: c,
            cout: c,
            kernel: 1,
        });
        out.push(LayerSpec::BatchNorm {
            name: format!("{p}.lin.bn"),
            channels: c,
        });
        out.push(LayerSpec::Conv {
            name: format!("{p}.head"),
            cin: c,
            cout: j,
            kernel: 1,
        });
        if u + 1 < head_channels.len() {
            out.push(LayerSpec::Conv {
                name: format!("{p}.remap_feat"),
                cin: c,
                cout: c,
                kernel: 1,
            });
            out.push(LayerSpec::Conv {
                name: format!("{p}.remap_hm"),
                cin: j,
                cout: c,
                kernel: 1,
            });
        }
    }
    out
}

/// Layers replaced by [`StackedHourglassNet::replace_head`].
fn head_layer_names(unit: usize, stacks: usize) -> Vec<String> {
    let mut names = vec![format!("unit{unit}.head")];
    if unit + 1 < stacks {
        names.push(format!("unit{unit}.remap_hm"));
    }
    names
}

fn init_layer<T: Scalar>(
    spec: &LayerSpec,
    seed: u64,
    params: &mut BTreeMap<String, Tensor<T>>,
    buffers: &mut BTreeMap<String, Tensor<T>>,
) {
    match spec {
        LayerSpec::Conv {
            name,
            cin,
            cout,
            kernel,
        } => {
            let fan_in = (cin * kernel * kernel) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let mut r = rng::stream(rng::labelled(seed, name));
            let w = Tensor::from_fn([*cout, *cin, *kernel, *kernel], |_| T::lit(r.gen_range(-bound..bound)));
            params.insert(format!("{name}.weight"), w);
            params.insert(format!("{name}.bias"), Tensor::zeros([*cout]));
        }
        LayerSpec::BatchNorm { name, channels } => {
            params.insert(format!("{name}.gamma"), Tensor::full([*channels], T::one()));
            params.insert(format!("{name}.beta"), Tensor::zeros([*channels]));
            buffers.insert(format!("{name}.running_mean"), Tensor::zeros([*channels]));
            buffers.insert(format!("{name}.running_var"), Tensor::full([*channels], T::one()));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetMode {
    Train,
    Eval,
}

/// Everything produced by one forward pass.
pub struct ForwardPass<T: Scalar> {
    /// One heatmap node per unit, in stack order.
    pub heads: Vec<Var>,
    /// Graph leaf for every parameter that was bound.
    pub bindings: BTreeMap<String, Var>,
    /// Train-mode batch statistics keyed by batchnorm layer name.
    pub batch_stats: Vec<(String, BatchStats<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackedHourglassNet<T: Scalar = f32> {
    arch: HourglassArch,
    head_channels: Vec<usize>,
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
    mode: NetMode,
}

impl<T: Scalar> StackedHourglassNet<T> {
    pub fn build(arch: &HourglassArch, seed: u64) -> Result<Self, NetError> {
        let heads = vec![arch.num_output_channels; arch.num_stacks];
        Self::build_with_heads(arch, &heads, seed)
    }

    /// Like [`build`](Self::build) with an explicit head width per unit.
    pub fn build_with_heads(arch: &HourglassArch, head_channels: &[usize], seed: u64) -> Result<Self, NetError> {
        arch.validate()?;
        if head_channels.len() != arch.num_stacks || head_channels.contains(&0) {
            return Err(NetError::InvalidArch(format!(
                "head widths {head_channels:?} do not fit {} stacks",
                arch.num_stacks
            )));
        }
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for spec in layer_inventory(arch, head_channels) {
            init_layer(&spec, seed, &mut params, &mut buffers);
        }
        Ok(Self {
            arch: arch.clone(),
            head_channels: head_channels.to_vec(),
            params,
            buffers,
            mode: NetMode::Train,
        })
    }

    /// Reassembles a network from stored tensors, checking names and shapes
    /// against the layer inventory.
    pub fn from_parts(
        arch: HourglassArch,
        head_channels: Vec<usize>,
        params: BTreeMap<String, Tensor<T>>,
        buffers: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self, NetError> {
        let template = Self::build_with_heads(&arch, &head_channels, 0)?;
        for (label, want, got) in [
            ("parameter", &template.params, &params),
            ("buffer", &template.buffers, &buffers),
        ] {
            if want.len() != got.len() {
                return Err(NetError::Parameters(format!(
                    "expected {} {label}s, found {}",
                    want.len(),
                    got.len()
                )));
            }
            for (name, t) in want {
                match got.get(name) {
                    None => return Err(NetError::Parameters(format!("missing {label} `{name}`"))),
                    Some(g) if g.shape() != t.shape() => {
                        return Err(NetError::Parameters(format!(
                            "{label} `{name}` has shape {:?}, expected {:?}",
                            g.shape(),
                            t.shape()
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self {
            arch,
            head_channels,
            params,
            buffers,
            mode: NetMode::Train,
        })
    }

    pub fn arch(&self) -> &HourglassArch {
        &self.arch
    }

    pub fn head_channels(&self) -> &[usize] {
        &self.head_channels
    }

    pub fn mode(&self) -> NetMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: NetMode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.buffers
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        layer_inventory(&self.arch, &self.head_channels)
    }

    /// Swaps in a freshly initialised head (and its heatmap remap layer) for `unit`.
    pub fn replace_head(&mut self, unit: usize, channels: usize, seed: u64) -> Result<(), NetError> {
        if unit >= self.arch.num_stacks {
            return Err(NetError::UnitOutOfRange {
                index: unit,
                stacks: self.arch.num_stacks,
            });
        }
        if channels == 0 {
            return Err(NetError::InvalidArch("head must have at least one channel".into()));
        }
        self.head_channels[unit] = channels;
        let names = head_layer_names(unit, self.arch.num_stacks);
        let inventory = layer_inventory(&self.arch, &self.head_channels);
        for spec in inventory.iter().filter(|s| names.iter().any(|n| n == s.name())) {
            init_layer(spec, seed, &mut self.params, &mut self.buffers);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> StackedHourglassNet<U> {
        let conv = |m: &BTreeMap<String, Tensor<T>>| m.iter().map(|(k, v)| (k.clone(), v.cast::<U>())).collect();
        StackedHourglassNet {
            arch: self.arch.clone(),
            head_channels: self.head_channels.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            mode: self.mode,
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Copies leaf gradients from `graph` into the parameters' gradient slots.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, bindings: &BTreeMap<String, Var>) -> Result<(), NetError> {
        for (name, var) in bindings {
            if let Some(g) = graph.grad(*var) {
                let p = self
                    .params
                    .get_mut(name)
                    .ok_or_else(|| NetError::Parameters(format!("unknown parameter `{name}`")))?;
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Folds observed batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        let m = T::lit(BN_MOMENTUM);
        for (layer, s) in stats {
            let mean_key = format!("{layer}.running_mean");
            let var_key = format!("{layer}.running_var");
            let mut mean = self.buffers.remove(&mean_key).expect("running mean exists");
            let mut var = self.buffers.remove(&var_key).expect("running var exists");
            s.update_running(mean.data_mut(), var.data_mut(), m);
            self.buffers.insert(mean_key, mean);
            self.buffers.insert(var_key, var);
        }
    }

    /// Runs the network on `input` (`[B, 3, R, R]`) in the current mode.
    ///
    /// Parameters named in `frozen` enter the graph as constants, and any
    /// batchnorm whose scale is frozen uses its running statistics.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, frozen: &BTreeSet<String>) -> Result<ForwardPass<T>, NetError> {
        self.forward_in(self.mode, g, input, frozen, BTreeMap::new())
    }

    /// Like [`forward`](Self::forward), but parameters present in `bound` use
    /// the given graph nodes instead of fresh leaves. Their shapes must match.
    pub fn forward_bound(
        &self,
        g: &mut Graph<T>,
        input: Var,
        bound: BTreeMap<String, Var>,
    ) -> Result<ForwardPass<T>, NetError> {
        for (name, &v) in &bound {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| NetError::Parameters(format!("unknown parameter `{name}`")))?;
            if g.shape(v) != p.shape() {
                return Err(NetError::Parameters(format!(
                    "`{name}` bound with shape {:?}, expected {:?}",
                    g.shape(v),
                    p.shape()
                )));
            }
        }
        self.forward_in(self.mode, g, input, &BTreeSet::new(), bound)
    }

    /// Train-mode forward that also updates batchnorm running statistics.
    pub fn forward_train(
        &mut self,
        g: &mut Graph<T>,
        input: Var,
        frozen: &BTreeSet<String>,
    ) -> Result<ForwardPass<T>, NetError> {
        let pass = self.forward_in(NetMode::Train, g, input, frozen, BTreeMap::new())?;
        self.apply_batch_stats(&pass.batch_stats);
        Ok(pass)
    }

    /// Eval-mode inference returning every unit's heatmaps.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>, NetError> {
        let mut g = Graph::new();
        let x = g.constant(batch)?;
        let pass = self.forward_in(NetMode::Eval, &mut g, x, &BTreeSet::new(), BTreeMap::new())?;
        Ok(pass.heads.iter().map(|&h| g.to_tensor(h)).collect())
    }

    fn forward_in(
        &self,
        mode: NetMode,
        g: &mut Graph<T>,
        input: Var,
        frozen: &BTreeSet<String>,
        bound: BTreeMap<String, Var>,
    ) -> Result<ForwardPass<T>, NetError> {
        let r = self.arch.input_resolution;
        match *g.shape(input) {
            [_, 3, h, w] if h == r && w == r => {}
            ref s => return Err(NetError::Input(format!("expected [B, 3, {r}, {r}], got {s:?}"))),
        }
        let mut cx = Cx {
            net: self,
            mode,
            g,
            frozen,
            pass: ForwardPass {
                heads: Vec::new(),
                bindings: bound,
                batch_stats: Vec::new(),
            },
        };
        let mut x = cx.conv("stem.conv", input, 2, 1)?;
        x = cx.bn_relu("stem.bn", x)?;
        x = cx.residual("stem.res", x)?;
        cx.g.set_scope("stem.pool");
        x = cx.g.maxpool2(x)?;

        let stacks = self.arch.num_stacks;
        for u in 0..stacks {
            let p = format!("unit{u}");
            let hg = cx.hourglass(&format!("{p}.hg"), self.arch.depth, x)?;
            let mut ll = cx.residual(&format!("{p}.res"), hg)?;
            ll = cx.conv(&format!("{p}.lin.conv"), ll, 1, 0)?;
            ll = cx.bn_relu(&format!("{p}.lin.bn"), ll)?;
            let heat = cx.conv(&format!("{p}.head"), ll, 1, 0)?;
            cx.pass.heads.push(heat);
            if u + 1 < stacks {
                let a = cx.conv(&format!("{p}.remap_feat"), ll, 1, 0)?;
                let b = cx.conv(&format!("{p}.remap_hm"), heat, 1, 0)?;
                cx.g.set_scope(format!("{p}.merge"));
                let ab = cx.g.add(a, b)?;
                x = cx.g.add(x, ab)?;
            }
        }
        Ok(cx.pass)
    }
}

struct Cx<'a, T: Scalar> {
    net: &'a StackedHourglassNet<T>,
    mode: NetMode,
    g: &'a mut Graph<T>,
    frozen: &'a BTreeSet<String>,
    pass: ForwardPass<T>,
}

impl<T: Scalar> Cx<'_, T> {
    fn param(&mut self, name: String) -> Result<Var, NetError> {
        if let Some(&v) = self.pass.bindings.get(&name) {
            return Ok(v);
        }
        let t = self
            .net
            .params
            .get(&name)
            .ok_or_else(|| NetError::Parameters(format!("unknown parameter `{name}`")))?;
        let v = if self.frozen.contains(&name) {
            self.g.constant(t)?
        } else {
            let mut leaf = t.clone();
            leaf.set_requires_grad(true);
            self.g.leaf(&leaf)?
        };
        self.pass.bindings.insert(name, v);
        Ok(v)
    }

    fn conv(&mut self, layer: &str, x: Var, stride: usize, pad: usize) -> Result<Var, NetError> {
        let w = self.param(format!("{layer}.weight"))?;
        let b = self.param(format!("{layer}.bias"))?;
        self.g.set_scope(layer);
        Ok(self.g.conv2d(x, w, b, stride, pad)?)
    }

    fn bn(&mut self, layer: &str, x: Var) -> Result<Var, NetError> {
        let gamma_name = format!("{layer}.gamma");
        let frozen = self.frozen.contains(&gamma_name);
        let gamma = self.param(gamma_name)?;
        let beta = self.param(format!("{layer}.beta"))?;
        self.g.set_scope(layer);
        let eps = T::lit(BN_EPS);
        let (y, stats) = if self.mode == NetMode::Train && !frozen {
            self.g.batchnorm2d(x, gamma, beta, BnMode::Train { eps })?
        } else {
            let mean = &self.net.buffers[&format!("{layer}.running_mean")];
            let var = &self.net.buffers[&format!("{layer}.running_var")];
            self.g.batchnorm2d(
                x,
                gamma,
                beta,
                BnMode::Eval {
                    eps,
                    mean: mean.data(),
                    var: var.data(),
                },
            )?
        };
        if let Some(s) = stats {
            self.pass.batch_stats.push((layer.to_string(), s));
        }
        Ok(y)
    }

    fn bn_relu(&mut self, layer: &str, x: Var) -> Result<Var, NetError> {
        let y = self.bn(layer, x)?;
        Ok(self.g.relu(y)?)
    }

    fn residual(&mut self, name: &str, x: Var) -> Result<Var, NetError> {
        let mut y = self.bn_relu(&format!("{name}.bn1"), x)?;
        y = self.conv(&format!("{name}.conv1"), y, 1, 0)?;
        y = self.bn_relu(&format!("{name}.bn2"), y)?;
        y = self.conv(&format!("{name}.conv2"), y, 1, 1)?;
        y = self.bn_relu(&format!("{name}.bn3"), y)?;
        y = self.conv(&format!("{name}.conv3"), y, 1, 0)?;
        let skip_name = format!("{name}.skip");
        let skip = if self.net.params.contains_key(&format!("{skip_name}.weight")) {
            self.conv(&skip_name, x, 1, 0)?
        } else {
            x
        };
        self.g.set_scope(name);
        Ok(self.g.add(y, skip)?)
    }

    fn hourglass(&mut self, prefix: &str, level: usize, x: Var) -> Result<Var, NetError> {
        let up1 = self.residual(&format!("{prefix}.l{level}.up1"), x)?;
        self.g.set_scope(format!("{prefix}.l{level}.pool"));
        let pooled = self.g.maxpool2(x)?;
        let low1 = self.residual(&format!("{prefix}.l{level}.low1"), pooled)?;
        let low2 = if level > 1 {
            self.hourglass(prefix, level - 1, low1)?
        } else {
            self.residual(&format!("{prefix}.l1.low2"), low1)?
        };
        let low3 = self.residual(&format!("{prefix}.l{level}.low3"), low2)?;
        self.g.set_scope(format!("{prefix}.l{level}.up"));
        let up2 = self.g.upsample_nearest2(low3)?;
        Ok(self.g.add(up1, up2)?)
    }
}
