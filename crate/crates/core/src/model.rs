//! The deep memory connected network: topology, parameters, forward pass
//! and the per-layer cost model.
//!
//! Default layout (hourglass enabled, `B` blocks per stage):
//!
//! ```text
//! input conv
//! down unit   conv/2, conv, ReLU                        full -> 1/2
//! stage 1     B x [conv, ReLU, conv] + local skip         1/2
//! down unit                                              1/2 -> 1/4
//! stage 2     B blocks                                    1/4
//! up unit     conv, ReLU, conv, ReLU, nearest x2, conv, ReLU   1/4 -> 1/2
//! stage 3     B blocks                                    1/2
//! up unit                                                1/2 -> full
//! output conv
//! ```
//!
//! Global skips join the input image to the output, the input-conv features
//! to the last up unit, and the stage-1 features to the first up unit. With
//! `B = 4` the network has 56 conv + ReLU layers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{self, ConvParams};
use crate::scalar::Scalar;
use crate::tape::{GradTape, Var};
use crate::tensor::{Shape, Tensor};

/// Number of block stages between the input and output layers.
pub const STAGES: usize = 3;
/// Layers of the default configuration.
pub const DEFAULT_LAYER_COUNT: usize = 56;
/// conv + ReLU + conv
pub const LAYERS_PER_BLOCK: usize = 3;
/// Layers contributed by the two down units and two up units together.
pub const HOURGLASS_LAYERS: usize = 2 * 3 + 2 * 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub kernel: usize,
    pub blocks_per_stage: usize,
    pub enable_local_memory: bool,
    pub enable_global_memory: bool,
    pub enable_hourglass: bool,
    pub input_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            kernel: 3,
            blocks_per_stage: 4,
            enable_local_memory: true,
            enable_global_memory: true,
            enable_hourglass: true,
            input_channels: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::contract("channels must be positive"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::contract(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.input_channels == 0 {
            return Err(Error::contract("input_channels must be positive"));
        }
        Ok(())
    }

    /// Spatial dims of the input must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        if self.enable_hourglass {
            4
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// Nearest-neighbour resize marker.
    Upsample {
        factor: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipScope {
    Local,
    Global,
}

/// Additive memory connection: the value at position `from` is added to the
/// value at position `to`. Position 0 is the network input, position `i + 1`
/// the output of layer `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Skip {
    pub from: usize,
    pub to: usize,
    pub scope: SkipScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Input,
    Down,
    Stage,
    Up,
    Output,
}

/// A named group of consecutive layers operating at one resolution level
/// (0 = full resolution, each level halves it).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub kind: UnitKind,
    pub level_in: u32,
    pub level_out: u32,
    pub layers: Range<usize>,
}

/// Parameter-free description of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    layers: Vec<LayerSpec>,
    skips: Vec<Skip>,
    units: Vec<Unit>,
    input_channels: usize,
    divisor: usize,
}

struct Builder {
    cfg: ModelConfig,
    layers: Vec<LayerSpec>,
    skips: Vec<Skip>,
    units: Vec<Unit>,
    level: u32,
}

impl Builder {
    fn position(&self) -> usize {
        self.layers.len()
    }

    fn conv(&mut self, name: String, cin: usize, cout: usize, stride: usize) {
        let k = self.cfg.kernel;
        self.layers.push(LayerSpec {
            name,
            kind: LayerKind::Conv {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride,
                padding: (k - 1) / 2,
            },
        });
    }

    fn relu(&mut self, name: String) {
        self.layers.push(LayerSpec {
            name,
            kind: LayerKind::Relu,
        });
    }

    fn upsample(&mut self, name: String) {
        self.layers.push(LayerSpec {
            name,
            kind: LayerKind::Upsample { factor: 2 },
        });
    }

    fn skip(&mut self, from: usize, to: usize, scope: SkipScope) {
        if from < to {
            self.skips.push(Skip { from, to, scope });
        }
    }

    fn unit(&mut self, kind: UnitKind, level_out: u32, body: impl FnOnce(&mut Self)) {
        let start = self.position();
        let level_in = self.level;
        body(self);
        self.level = level_out;
        self.units.push(Unit {
            kind,
            level_in,
            level_out,
            layers: start..self.position(),
        });
    }

    fn stage(&mut self, index: usize) {
        let c = self.cfg.channels;
        let level = self.level;
        self.unit(UnitKind::Stage, level, |b| {
            for block in 1..=b.cfg.blocks_per_stage {
                let start = b.position();
                let prefix = format!("stage{index}.block{block}");
                b.conv(format!("{prefix}.conv1"), c, c, 1);
                b.relu(format!("{prefix}.relu"));
                b.conv(format!("{prefix}.conv2"), c, c, 1);
                if b.cfg.enable_local_memory {
                    let end = b.position();
                    b.skip(start, end, SkipScope::Local);
                }
            }
        });
    }

    fn down(&mut self, index: usize) {
        let c = self.cfg.channels;
        let level = self.level + 1;
        self.unit(UnitKind::Down, level, |b| {
            b.conv(format!("down{index}.conv_s2"), c, c, 2);
            b.conv(format!("down{index}.conv"), c, c, 1);
            b.relu(format!("down{index}.relu"));
        });
    }

    fn up(&mut self, index: usize) {
        let c = self.cfg.channels;
        let level = self.level - 1;
        self.unit(UnitKind::Up, level, |b| {
            b.conv(format!("up{index}.conv1"), c, c, 1);
            b.relu(format!("up{index}.relu1"));
            b.conv(format!("up{index}.conv2"), c, c, 1);
            b.relu(format!("up{index}.relu2"));
            b.upsample(format!("up{index}.upsample"));
            b.conv(format!("up{index}.conv3"), c, c, 1);
            b.relu(format!("up{index}.relu3"));
        });
    }
}

impl Topology {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            cfg: cfg.clone(),
            layers: Vec::new(),
            skips: Vec::new(),
            units: Vec::new(),
            level: 0,
        };
        let (c, cin) = (cfg.channels, cfg.input_channels);
        let hourglass = cfg.enable_hourglass;
        let global = cfg.enable_global_memory;

        b.unit(UnitKind::Input, 0, |b| b.conv("input.conv".into(), cin, c, 1));
        let after_input = b.position();
        if hourglass {
            b.down(1);
        }
        b.stage(1);
        let before_second_down = b.position();
        if hourglass {
            b.down(2);
        }
        b.stage(2);
        if hourglass {
            b.up(1);
        }
        if global {
            let p = b.position();
            b.skip(before_second_down, p, SkipScope::Global);
        }
        b.stage(3);
        if hourglass {
            b.up(2);
        }
        if global {
            let p = b.position();
            b.skip(after_input, p, SkipScope::Global);
        }
        b.unit(UnitKind::Output, 0, |b| b.conv("output.conv".into(), c, cin, 1));
        if global {
            let p = b.position();
            b.skip(0, p, SkipScope::Global);
        }

        let topo = Topology {
            layers: b.layers,
            skips: b.skips,
            units: b.units,
            input_channels: cin,
            divisor: cfg.spatial_divisor(),
        };
        // every skip must join equal shapes for any admissible input
        let probe = 8 * cfg.kernel.max(3);
        topo.shapes(Shape::new(1, cin, probe, probe))?;
        Ok(topo)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn skips(&self) -> &[Skip] {
        &self.skips
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    /// Convolution and activation layers; resize markers and additions are
    /// not counted.
    pub fn count_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. } | LayerKind::Relu))
            .count()
    }

    pub fn check_input(&self, input: Shape) -> Result<()> {
        if input.c != self.input_channels {
            return Err(Error::ShapeMismatch {
                op: "model forward",
                expected: format!("{} input channels", self.input_channels),
                found: format!("{input}"),
            });
        }
        if input.h == 0
            || input.w == 0
            || !input.h.is_multiple_of(self.divisor)
            || !input.w.is_multiple_of(self.divisor)
        {
            return Err(Error::contract(format!(
                "input spatial size {}x{} must be a positive multiple of {} (two stride-2 stages)",
                input.h, input.w, self.divisor
            )));
        }
        Ok(())
    }

    /// Shapes at every position (input first), validating every layer and
    /// every skip.
    pub fn shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        self.check_input(input)?;
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(input);
        for layer in &self.layers {
            let s = *shapes.last().expect("non-empty");
            let next = match layer.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if s.c != in_channels {
                        return Err(Error::ShapeMismatch {
                            op: "topology",
                            expected: format!("{in_channels} channels into {}", layer.name),
                            found: format!("{s}"),
                        });
                    }
                    let (ph, pw) = (s.h + 2 * padding, s.w + 2 * padding);
                    if ph < kernel || pw < kernel {
                        return Err(Error::contract(format!(
                            "{} sees a feature map smaller than its filter",
                            layer.name
                        )));
                    }
                    Shape::new(
                        s.n,
                        out_channels,
                        (ph - kernel) / stride + 1,
                        (pw - kernel) / stride + 1,
                    )
                }
                LayerKind::Relu => s,
                LayerKind::Upsample { factor } => Shape::new(s.n, s.c, s.h * factor, s.w * factor),
            };
            shapes.push(next);
        }
        for skip in &self.skips {
            if shapes[skip.from] != shapes[skip.to] {
                return Err(Error::ShapeMismatch {
                    op: "memory connection",
                    expected: format!("{} at position {}", shapes[skip.from], skip.from),
                    found: format!("{} at position {}", shapes[skip.to], skip.to),
                });
            }
        }
        Ok(shapes)
    }

    fn skip_sources(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.skips.iter().map(|s| s.from).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

pub fn count_layers(config: &ModelConfig) -> Result<usize> {
    Ok(Topology::new(config)?.count_layers())
}

/// One row of the cost model `c * f^2 * n * m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopRecord {
    pub layer: usize,
    pub name: String,
    pub in_channels: u64,
    pub kernel: u64,
    pub filters: u64,
    /// Output feature-map size `h * w`.
    pub out_size: u64,
    pub term: u64,
    pub is_resize: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub records: Vec<FlopRecord>,
    pub total: u64,
}

/// Per-layer multiply-accumulate cost of the network on an `h x w` input.
/// Convolutions cost `c_in * f^2 * n_out * (h_out * w_out)`; resize markers
/// are listed at zero cost; activations and additions are not listed.
pub fn estimate_flops(config: &ModelConfig, h: usize, w: usize) -> Result<FlopReport> {
    let topo = Topology::new(config)?;
    let shapes = topo.shapes(Shape::new(1, config.input_channels, h, w))?;
    let mut records = Vec::new();
    for (i, layer) in topo.layers.iter().enumerate() {
        let out = shapes[i + 1];
        let m = (out.h * out.w) as u64;
        match layer.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let (c, f, n) = (in_channels as u64, kernel as u64, out_channels as u64);
                records.push(FlopRecord {
                    layer: i,
                    name: layer.name.clone(),
                    in_channels: c,
                    kernel: f,
                    filters: n,
                    out_size: m,
                    term: c * f * f * n * m,
                    is_resize: false,
                });
            }
            LayerKind::Upsample { .. } => records.push(FlopRecord {
                layer: i,
                name: layer.name.clone(),
                in_channels: out.c as u64,
                kernel: 0,
                filters: out.c as u64,
                out_size: m,
                term: 0,
                is_resize: true,
            }),
            LayerKind::Relu => {}
        }
    }
    let total = records.iter().map(|r| r.term).sum();
    Ok(FlopReport { records, total })
}

/// The same layer list as [`estimate_flops`] with every convolution costed
/// at the full `h x w` resolution, as if the network had no hourglass but
/// kept all of its layers.
pub fn estimate_flat_flops(config: &ModelConfig, h: usize, w: usize) -> Result<FlopReport> {
    let mut report = estimate_flops(config, h, w)?;
    let m = (h * w) as u64;
    for r in &mut report.records {
        if !r.is_resize {
            r.out_size = m;
            r.term = r.in_channels * r.kernel * r.kernel * r.filters * m;
        }
    }
    report.total = report.records.iter().map(|r| r.term).sum();
    Ok(report)
}

/// `h + conv2(relu(conv1(h)))` with the local memory connection, or just the
/// convolution chain without it.
pub fn residual_block<T: Scalar>(
    h: &Tensor<T>,
    conv1: &ConvParams<T>,
    conv2: &ConvParams<T>,
    local_memory: bool,
) -> Result<Tensor<T>> {
    let branch = ops::conv2d_forward(&ops::relu(&ops::conv2d_forward(h, conv1)?), conv2)?;
    if local_memory {
        ops::add(h, &branch)
    } else {
        Ok(branch)
    }
}

/// Backend that evaluates a topology, either eagerly or onto a tape.
trait Exec<T> {
    type Val: Clone;
    fn conv(&mut self, x: &Self::Val, param: usize) -> Result<Self::Val>;
    fn relu(&mut self, x: &Self::Val) -> Self::Val;
    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn upsample(&mut self, x: &Self::Val, factor: usize) -> Result<Self::Val>;
}

struct Eager<'a, T> {
    params: &'a [ConvParams<T>],
}

impl<T: Scalar> Exec<T> for Eager<'_, T> {
    type Val = Tensor<T>;
    fn conv(&mut self, x: &Tensor<T>, param: usize) -> Result<Tensor<T>> {
        ops::conv2d_forward(x, &self.params[param])
    }
    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::relu(x)
    }
    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add(a, b)
    }
    fn upsample(&mut self, x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        ops::upsample_nearest(x, factor)
    }
}

impl<T: Scalar> Exec<T> for GradTape<'_, T> {
    type Val = Var;
    fn conv(&mut self, x: &Var, param: usize) -> Result<Var> {
        GradTape::conv(self, *x, param)
    }
    fn relu(&mut self, x: &Var) -> Var {
        GradTape::relu(self, *x)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        GradTape::add(self, *a, *b)
    }
    fn upsample(&mut self, x: &Var, factor: usize) -> Result<Var> {
        GradTape::upsample(self, *x, factor)
    }
}

/// Initial gain of the convolution closing each memory branch.
pub const BRANCH_INIT_SCALE: f64 = 0.1;

/// A topology with its parameters `{W_i, b_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    topology: Topology,
    params: Vec<ConvParams<T>>,
    /// Layer index -> parameter index for convolution layers.
    param_of_layer: Vec<Option<usize>>,
}

impl<T: Scalar> Model<T> {
    /// Builds the network with He-normal filters (`std = sqrt(2 / fan_in)`)
    /// drawn from a ChaCha stream keyed by `config.seed`, and zero biases.
    ///
    /// The last convolution on every enabled memory branch is then scaled by
    /// [`BRANCH_INIT_SCALE`]; otherwise the summed branches blow the initial
    /// output up by orders of magnitude.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        let topology = Topology::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut param_of_layer = Vec::with_capacity(topology.layers.len());
        for layer in &topology.layers {
            if let LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } = layer.kind
            {
                let fan_in = (in_channels * kernel * kernel) as f64;
                let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in)).expect("finite std");
                let shape = Shape::new(out_channels, in_channels, kernel, kernel);
                let weights = Tensor::from_fn(shape, |_, _, _, _| T::from_f64(normal.sample(&mut rng)));
                let bias = alloc::vec![T::ZERO; out_channels];
                param_of_layer.push(Some(params.len()));
                params.push(ConvParams::new(weights, bias, stride, padding)?);
            } else {
                param_of_layer.push(None);
            }
        }
        let mut model = Model {
            config: config.clone(),
            topology,
            params,
            param_of_layer,
        };
        model.scale_branch_outputs(T::from_f64(BRANCH_INIT_SCALE));
        Ok(model)
    }

    /// Replaces the parameters, checking every shape against the topology.
    pub fn with_params(config: &ModelConfig, params: Vec<ConvParams<T>>) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        if params.len() != model.params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter sets, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (i, (have, want)) in params.iter().zip(&model.params).enumerate() {
            if have.weights().shape() != want.weights().shape()
                || have.stride() != want.stride()
                || have.padding() != want.padding()
            {
                return Err(Error::ShapeMismatch {
                    op: "Model::with_params",
                    expected: format!("{} {}", model.param_names()[2 * i], want.weights().shape()),
                    found: format!("{}", have.weights().shape()),
                });
            }
        }
        model.params = params;
        Ok(model)
    }

    /// The topology with all filters and biases zero.
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        let topology = Topology::new(config)?;
        let mut params = Vec::new();
        let mut param_of_layer = Vec::new();
        for layer in &topology.layers {
            if let LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } = layer.kind
            {
                param_of_layer.push(Some(params.len()));
                params.push(ConvParams::zeros(in_channels, out_channels, kernel, stride, padding)?);
            } else {
                param_of_layer.push(None);
            }
        }
        Ok(Model {
            config: config.clone(),
            topology,
            params,
            param_of_layer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &[ConvParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ConvParams<T>] {
        &mut self.params
    }

    /// `"<layer>.weight"`, `"<layer>.bias"` for every convolution, in
    /// parameter order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(2 * self.params.len());
        for (layer, p) in self.topology.layers.iter().zip(&self.param_of_layer) {
            if p.is_some() {
                names.push(format!("{}.weight", layer.name));
                names.push(format!("{}.bias", layer.name));
            }
        }
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.weights().len() + p.bias().len()).sum()
    }

    /// Flat views of all weights and biases, alternating, in parameter order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = Vec::with_capacity(2 * self.params.len());
        for p in &mut self.params {
            let (w, b) = p.parts_mut();
            v.push(w);
            v.push(b);
        }
        v
    }

    /// Zeroes the last convolution of every residual branch: the second conv
    /// of each block and the output conv. With global memory enabled the
    /// network then computes the identity map.
    pub fn zero_residual_branches(&mut self) {
        for (layer, p) in self.topology.layers.iter().zip(&self.param_of_layer) {
            if let Some(i) = p {
                if layer.name.ends_with(".conv2") && layer.name.starts_with("stage") || layer.name == "output.conv" {
                    self.params[*i].weights_mut().fill(T::ZERO);
                    self.params[*i].bias_mut().fill(T::ZERO);
                }
            }
        }
    }

    /// Parameter indices of the last convolution on each memory
    /// connection's branch, i.e. the one closest before its merge point.
    pub fn branch_output_params(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .topology
            .skips
            .iter()
            .filter_map(|s| (s.from..s.to).rev().find_map(|i| self.param_of_layer[i]))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Multiplies the filters of every [`Self::branch_output_params`] entry.
    pub fn scale_branch_outputs(&mut self, factor: T) {
        for i in self.branch_output_params() {
            for w in self.params[i].weights_mut() {
                *w *= factor;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            topology: self.topology.clone(),
            params: self.params.iter().map(ConvParams::cast).collect(),
            param_of_layer: self.param_of_layer.clone(),
        }
    }

    fn run<E: Exec<T>>(&self, exec: &mut E, x: E::Val) -> Result<E::Val> {
        let sources = self.topology.skip_sources();
        let mut saved: BTreeMap<usize, E::Val> = BTreeMap::new();
        if sources.first() == Some(&0) {
            saved.insert(0, x.clone());
        }
        let mut cur = x;
        for (i, layer) in self.topology.layers.iter().enumerate() {
            cur = match layer.kind {
                LayerKind::Conv { .. } => exec.conv(&cur, self.param_of_layer[i].expect("conv has params"))?,
                LayerKind::Relu => exec.relu(&cur),
                LayerKind::Upsample { factor } => exec.upsample(&cur, factor)?,
            };
            let pos = i + 1;
            for skip in self.topology.skips.iter().filter(|s| s.to == pos) {
                cur = exec.add(&cur, &saved[&skip.from])?;
            }
            if sources.binary_search(&pos).is_ok() {
                saved.insert(pos, cur.clone());
            }
            saved.retain(|&from, _| self.topology.skips.iter().any(|s| s.from == from && s.to > pos));
        }
        Ok(cur)
    }

    /// Evaluates the network on a batch `X`; the output has the shape of `X`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.topology.check_input(x.shape())?;
        let mut exec = Eager { params: &self.params };
        self.run(&mut exec, x.clone())
    }

    /// Records the forward pass of `x` on `tape` (which must borrow this
    /// model's parameters) and returns the output handle.
    pub fn forward_on_tape(&self, tape: &mut GradTape<'_, T>, x: Var) -> Result<Var> {
        if !core::ptr::eq(tape.params(), self.params.as_slice()) {
            return Err(Error::contract("tape records parameters of a different model"));
        }
        self.topology.check_input(tape.value(x).shape())?;
        self.run(tape, x)
    }

    /// A tape over this model's parameters.
    pub fn tape(&self) -> GradTape<'_, T> {
        GradTape::new(&self.params)
    }
}
