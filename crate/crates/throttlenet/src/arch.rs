//! Desk-scale throttleable architectures.
//!
//! Five architectures cover the axis/aggregation design space:
//!
//! | name        | axis  | aggregation | notes                              |
//! |-------------|-------|-------------|------------------------------------|
//! | t-mlp       | width | concat      | one gated hidden layer, smoke net  |
//! | t-vgg       | width | concat      | conv stages in 16 groups, min-active 1 |
//! | t-resnext-w | width | sum         | grouped residual branches          |
//! | t-resnet-d  | depth | sum         | whole blocks bypassed via identity |
//! | t-densenet  | width | concat      | narrow layers with dense skips     |
//!
//! A network is a flat list of pieces (un-gated glue plus gated modules).
//! Gated modules reference a gate *slot*; several modules may share one slot
//! (a ResNeXt stage's blocks all consume the stage's 16-wide gate vector).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError};
use crate::gating::{
    gated_forward, reference_forward, Aggregation, Component, GateError, GatedModule,
};
use crate::rng::substream;
use crate::strategies::{GateLayout, GatePlan, SlotSpec};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchName {
    #[serde(rename = "t-mlp")]
    TMlp,
    #[serde(rename = "t-vgg")]
    TVgg,
    #[serde(rename = "t-resnext-w")]
    TResnextW,
    #[serde(rename = "t-resnet-d")]
    TResnetD,
    #[serde(rename = "t-densenet")]
    TDensenet,
}

impl ArchName {
    pub fn name(&self) -> &'static str {
        match self {
            ArchName::TMlp => "t-mlp",
            ArchName::TVgg => "t-vgg",
            ArchName::TResnextW => "t-resnext-w",
            ArchName::TResnetD => "t-resnet-d",
            ArchName::TDensenet => "t-densenet",
        }
    }

    pub const ALL: [ArchName; 5] = [
        ArchName::TMlp,
        ArchName::TVgg,
        ArchName::TResnextW,
        ArchName::TResnetD,
        ArchName::TDensenet,
    ];
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub arch: ArchName,
    /// Gated components per module (groups for width gating, layers per
    /// dense block). For t-resnet-d the per-stage components are its blocks.
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_stages")]
    pub stages: usize,
    /// Output channels per stage (dense-net ignores this; growth governs).
    #[serde(default)]
    pub channels: Vec<usize>,
    /// Blocks per stage (t-resnext-w, t-resnet-d) or convs per stage (t-vgg).
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
    /// DenseNet growth rate.
    #[serde(default = "default_growth")]
    pub growth: usize,
    /// Hidden width of the t-mlp gated layer / t-vgg fully-connected head.
    #[serde(default = "default_fc_width")]
    pub fc_width: usize,
    /// ResNeXt per-branch bottleneck width; 0 selects max(1, channels/32).
    #[serde(default)]
    pub branch_width: usize,
    /// Input (channels, height, width).
    pub input: (usize, usize, usize),
    pub classes: usize,
}

fn default_components() -> usize {
    16
}
fn default_stages() -> usize {
    3
}
fn default_blocks() -> usize {
    3
}
fn default_growth() -> usize {
    12
}
fn default_fc_width() -> usize {
    256
}

impl ArchConfig {
    /// Paper-protocol defaults for 32x32 inputs.
    pub fn defaults(arch: ArchName, input: (usize, usize, usize), classes: usize) -> Self {
        let mut cfg = ArchConfig {
            arch,
            components: 16,
            stages: 3,
            channels: vec![64, 128, 256],
            blocks_per_stage: 3,
            growth: 12,
            fc_width: 256,
            branch_width: 0,
            input,
            classes,
        };
        match arch {
            ArchName::TMlp => {
                cfg.components = 4;
                cfg.stages = 1;
                cfg.channels = vec![];
                cfg.fc_width = 64;
            }
            ArchName::TVgg => {
                cfg.blocks_per_stage = 2;
            }
            ArchName::TResnextW => {}
            ArchName::TResnetD => {
                cfg.channels = vec![16, 32, 64];
                cfg.blocks_per_stage = 4;
            }
            ArchName::TDensenet => {
                cfg.channels = vec![];
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let bad = |msg: String| Err(ArchError::Config(msg));
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("input extents must be positive, got {:?}", self.input));
        }
        if self.components == 0 {
            return bad("components must be >= 1".into());
        }
        match self.arch {
            ArchName::TMlp => {
                if self.fc_width % self.components != 0 {
                    return bad(format!(
                        "t-mlp hidden width {} not divisible by {} components",
                        self.fc_width, self.components
                    ));
                }
            }
            ArchName::TVgg => {
                self.check_stage_channels()?;
                for &ch in &self.channels {
                    if ch % self.components != 0 {
                        return bad(format!(
                            "t-vgg width {ch} not divisible by {} components",
                            self.components
                        ));
                    }
                }
                if self.fc_width % self.components != 0 {
                    return bad(format!(
                        "t-vgg fc width {} not divisible by {} components",
                        self.fc_width, self.components
                    ));
                }
                if self.blocks_per_stage == 0 {
                    return bad("t-vgg needs at least one conv per stage".into());
                }
            }
            ArchName::TResnextW => {
                self.check_stage_channels()?;
                if self.blocks_per_stage == 0 {
                    return bad("t-resnext-w needs at least one block per stage".into());
                }
            }
            ArchName::TResnetD => {
                self.check_stage_channels()?;
                if self.blocks_per_stage == 0 {
                    return bad("t-resnet-d needs at least one block per stage".into());
                }
            }
            ArchName::TDensenet => {
                if self.growth == 0 {
                    return bad("t-densenet growth rate must be positive".into());
                }
                if self.stages == 0 {
                    return bad("t-densenet needs at least one dense block".into());
                }
            }
        }
        Ok(())
    }

    fn check_stage_channels(&self) -> Result<(), ArchError> {
        if self.stages == 0 {
            return Err(ArchError::Config("stage count must be >= 1".into()));
        }
        if self.channels.len() != self.stages {
            return Err(ArchError::Config(format!(
                "expected {} stage channel widths, got {}",
                self.stages,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum ArchError {
    Config(String),
    PlanMismatch { expected: usize, got: usize },
    Gate(GateError),
    Tensor(TensorError),
    Checkpoint(CheckpointError),
    ParamMismatch { what: String },
}

impl fmt::Display for ArchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchError::Config(msg) => write!(f, "invalid architecture config: {msg}"),
            ArchError::PlanMismatch { expected, got } => {
                write!(f, "gate plan has {got} modules, network has {expected}")
            }
            ArchError::Gate(e) => write!(f, "{e}"),
            ArchError::Tensor(e) => write!(f, "{e}"),
            ArchError::Checkpoint(e) => write!(f, "{e}"),
            ArchError::ParamMismatch { what } => write!(f, "checkpoint mismatch: {what}"),
        }
    }
}

impl std::error::Error for ArchError {}

impl From<GateError> for ArchError {
    fn from(e: GateError) -> Self {
        ArchError::Gate(e)
    }
}

impl From<TensorError> for ArchError {
    fn from(e: TensorError) -> Self {
        ArchError::Tensor(e)
    }
}

impl From<CheckpointError> for ArchError {
    fn from(e: CheckpointError) -> Self {
        ArchError::Checkpoint(e)
    }
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init_std: f64,
}

/// The parameter tensors of one network instance, aligned with
/// `NetworkSpec::param_specs`.
#[derive(Clone, Debug)]
pub struct ParamStore {
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    /// A stable checksum over all parameter bytes, for frozen-θ assertions.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[derive(Clone, Debug)]
enum CompDef {
    ConvGroup { w: ParamId, stride: usize, pad: usize },
    FcGroup { w: ParamId },
    ResnextBranch { w1: ParamId, w2: ParamId, w3: ParamId },
    ResBlock { w1: ParamId, w2: ParamId },
    DenseLayer { w1: ParamId, w2: ParamId },
}

#[derive(Clone, Debug)]
struct WidthModuleDef {
    slot: usize,
    aggregation: Aggregation,
    min_active: usize,
    comps: Vec<CompDef>,
}

#[derive(Clone, Debug)]
enum Piece {
    Conv { w: ParamId, stride: usize, pad: usize },
    Relu,
    MaxPool,
    AvgPool,
    GlobalMeanPool,
    Flatten,
    LinearBias { w: ParamId },
    Width(WidthModuleDef),
    /// x + module(x): ResNeXt block with width-gated branches.
    ResidualWidth(WidthModuleDef),
    /// Depth-gated stage of identity-shaped blocks.
    DepthStage { slot: usize, blocks: Vec<CompDef> },
    /// Dense block: each gated layer consumes the running concat and
    /// appends a growth-channel slab (zeros when gated off).
    DenseBlock { slot: usize, layers: Vec<CompDef> },
}

/// A built throttleable network: pieces, parameter specs, gate layout, and
/// per-component FLOP costs.
#[derive(Debug)]
pub struct NetworkSpec {
    pub cfg: ArchConfig,
    pub layout: GateLayout,
    param_specs: Vec<ParamSpec>,
    pieces: Vec<Piece>,
    comp_costs: Vec<Vec<u64>>,
    glue_flops: u64,
}

/// Per-forward-pass evaluation counters, one per gated component per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCounters {
    pub slots: Vec<Vec<u64>>,
}

impl EvalCounters {
    pub fn new(layout: &GateLayout) -> Self {
        EvalCounters { slots: layout.slots.iter().map(|s| vec![0; s.size]).collect() }
    }

    pub fn total(&self) -> u64 {
        self.slots.iter().flatten().sum()
    }
}

/// Handle to one forward pass: the logits node plus the parameter leaves
/// (for reading gradients back out).
pub struct ForwardHandle {
    pub logits: NodeId,
    pub param_nodes: Vec<NodeId>,
}

struct Builder {
    params: Vec<ParamSpec>,
    pieces: Vec<Piece>,
    slots: Vec<SlotSpec>,
}

impl Builder {
    fn new() -> Self {
        Builder { params: Vec::new(), pieces: Vec::new(), slots: Vec::new() }
    }

    /// gain 2 (He) for relu-preceded weights, 1 (Xavier-style) for the
    /// linear glue so variance stays flat through an all-off trunk.
    fn param(&mut self, name: String, shape: Vec<usize>, fan_in: usize, gain: f64) -> ParamId {
        let id = self.params.len();
        self.params.push(ParamSpec {
            name,
            shape,
            init_std: (gain / fan_in as f64).sqrt(),
        });
        id
    }

    fn conv_param(&mut self, name: String, cout: usize, cin: usize, k: usize) -> ParamId {
        self.param(name, vec![cout, cin, k, k], cin * k * k, 2.0)
    }

    /// Component weights under concat aggregation: the 1/||g||_1 gate
    /// normalization scales every slab by 1/k, so without batch norm the
    /// init variance compensates by n^2 to keep full-activation slabs at
    /// unit scale (inverted-dropout convention).
    fn concat_conv_param(&mut self, name: String, cout: usize, cin: usize, k: usize, n: usize) -> ParamId {
        self.param(name, vec![cout, cin, k, k], cin * k * k, 2.0 * (n * n) as f64)
    }

    fn glue_conv_param(&mut self, name: String, cout: usize, cin: usize, k: usize) -> ParamId {
        self.param(name, vec![cout, cin, k, k], cin * k * k, 1.0)
    }

    fn slot(&mut self, size: usize, min_active: usize) -> usize {
        self.slots.push(SlotSpec::uniform(size, min_active));
        self.slots.len() - 1
    }
}

/// Builds a NetworkSpec from a validated config, including the per-component
/// FLOP cost table (measured by instrumented dry runs at batch size 1).
pub fn build_network(cfg: &ArchConfig) -> Result<NetworkSpec, ArchError> {
    cfg.validate()?;
    let mut b = Builder::new();
    match cfg.arch {
        ArchName::TMlp => build_mlp(cfg, &mut b),
        ArchName::TVgg => build_vgg(cfg, &mut b),
        ArchName::TResnextW => build_resnext(cfg, &mut b),
        ArchName::TResnetD => build_resnet_d(cfg, &mut b),
        ArchName::TDensenet => build_densenet(cfg, &mut b),
    }
    let mut net = NetworkSpec {
        cfg: cfg.clone(),
        layout: GateLayout { slots: b.slots },
        param_specs: b.params,
        pieces: b.pieces,
        comp_costs: Vec::new(),
        glue_flops: 0,
    };
    net.measure_costs()?;
    Ok(net)
}

fn build_mlp(cfg: &ArchConfig, b: &mut Builder) {
    let (c, h, w) = cfg.input;
    let flat = c * h * w;
    let n = cfg.components;
    let group = cfg.fc_width / n;
    let slot = b.slot(n, 1);
    b.pieces.push(Piece::Flatten);
    let comps = (0..n)
        .map(|i| {
            CompDef::FcGroup {
                w: b.param(format!("hidden.g{i}.w"), vec![flat, group], flat, (n * n) as f64),
            }
        })
        .collect();
    b.pieces.push(Piece::Width(WidthModuleDef {
        slot,
        aggregation: Aggregation::Concat,
        min_active: 1,
        comps,
    }));
    b.pieces.push(Piece::Relu);
    let head = b.param("head.w".into(), vec![cfg.fc_width + 1, cfg.classes], cfg.fc_width + 1, 2.0);
    b.pieces.push(Piece::LinearBias { w: head });
}

fn build_vgg(cfg: &ArchConfig, b: &mut Builder) {
    let n = cfg.components;
    let mut in_ch = cfg.input.0;
    for (s, &ch) in cfg.channels.iter().enumerate() {
        let slot = b.slot(n, 1);
        let group = ch / n;
        for l in 0..cfg.blocks_per_stage {
            let comps = (0..n)
                .map(|i| CompDef::ConvGroup {
                    w: b.concat_conv_param(format!("stage{s}.conv{l}.g{i}.w"), group, in_ch, 3, n),
                    stride: 1,
                    pad: 1,
                })
                .collect();
            b.pieces.push(Piece::Width(WidthModuleDef {
                slot,
                aggregation: Aggregation::Concat,
                min_active: 1,
                comps,
            }));
            b.pieces.push(Piece::Relu);
            in_ch = ch;
        }
        b.pieces.push(Piece::MaxPool);
    }
    b.pieces.push(Piece::Flatten);
    let (_, h, w) = cfg.input;
    let spatial = (h >> cfg.stages) * (w >> cfg.stages);
    let flat = in_ch * spatial;
    let slot = b.slot(n, 1);
    let group = cfg.fc_width / n;
    let comps = (0..n)
        .map(|i| {
            CompDef::FcGroup {
                w: b.param(format!("fc.g{i}.w"), vec![flat, group], flat, 2.0 * (n * n) as f64),
            }
        })
        .collect();
    b.pieces.push(Piece::Width(WidthModuleDef {
        slot,
        aggregation: Aggregation::Concat,
        min_active: 1,
        comps,
    }));
    b.pieces.push(Piece::Relu);
    let head = b.param("head.w".into(), vec![cfg.fc_width + 1, cfg.classes], cfg.fc_width + 1, 2.0);
    b.pieces.push(Piece::LinearBias { w: head });
}

fn build_resnext(cfg: &ArchConfig, b: &mut Builder) {
    let n = cfg.components;
    let stem_ch = cfg.channels[0];
    let stem = b.glue_conv_param("stem.w".into(), stem_ch, cfg.input.0, 3);
    b.pieces.push(Piece::Conv { w: stem, stride: 1, pad: 1 });
    let mut in_ch = stem_ch;
    for (s, &ch) in cfg.channels.iter().enumerate() {
        if s > 0 {
            // Transitions carry no activation: with every block gated off
            // the trunk reduces to a linear map, so all nonlinear capacity
            // lives in the gated branches (pre-activation style).
            let t = b.glue_conv_param(format!("stage{s}.trans.w"), ch, in_ch, 3);
            b.pieces.push(Piece::Conv { w: t, stride: 2, pad: 1 });
            in_ch = ch;
        }
        let d = if cfg.branch_width > 0 { cfg.branch_width } else { (ch / 32).max(1) };
        let slot = b.slot(n, 0);
        for blk in 0..cfg.blocks_per_stage {
            let comps = (0..n)
                .map(|i| {
                    let prefix = format!("stage{s}.block{blk}.branch{i}");
                    CompDef::ResnextBranch {
                        w1: b.conv_param(format!("{prefix}.reduce.w"), d, ch, 1),
                        w2: b.conv_param(format!("{prefix}.conv.w"), d, d, 3),
                        w3: b.conv_param(format!("{prefix}.expand.w"), ch, d, 1),
                    }
                })
                .collect();
            b.pieces.push(Piece::ResidualWidth(WidthModuleDef {
                slot,
                aggregation: Aggregation::Sum,
                min_active: 0,
                comps,
            }));
        }
    }
    push_pool_head(cfg, b, in_ch);
}

fn build_resnet_d(cfg: &ArchConfig, b: &mut Builder) {
    let stem_ch = cfg.channels[0];
    let stem = b.glue_conv_param("stem.w".into(), stem_ch, cfg.input.0, 3);
    b.pieces.push(Piece::Conv { w: stem, stride: 1, pad: 1 });
    let mut in_ch = stem_ch;
    for (s, &ch) in cfg.channels.iter().enumerate() {
        if s > 0 {
            let t = b.glue_conv_param(format!("stage{s}.trans.w"), ch, in_ch, 3);
            b.pieces.push(Piece::Conv { w: t, stride: 2, pad: 1 });
            in_ch = ch;
        }
        let slot = b.slot(cfg.blocks_per_stage, 0);
        let blocks = (0..cfg.blocks_per_stage)
            .map(|blk| {
                let prefix = format!("stage{s}.block{blk}");
                CompDef::ResBlock {
                    w1: b.conv_param(format!("{prefix}.conv1.w"), ch, ch, 3),
                    w2: b.conv_param(format!("{prefix}.conv2.w"), ch, ch, 3),
                }
            })
            .collect();
        b.pieces.push(Piece::DepthStage { slot, blocks });
    }
    push_pool_head(cfg, b, in_ch);
}

fn build_densenet(cfg: &ArchConfig, b: &mut Builder) {
    let g = cfg.growth;
    let n = cfg.components;
    let stem_ch = 2 * g;
    let stem = b.glue_conv_param("stem.w".into(), stem_ch, cfg.input.0, 3);
    b.pieces.push(Piece::Conv { w: stem, stride: 1, pad: 1 });
    let mut ch = stem_ch;
    for blk in 0..cfg.stages {
        if blk > 0 {
            // Compressing transition, then spatial downsampling.
            b.pieces.push(Piece::Relu);
            let t = b.conv_param(format!("trans{blk}.w"), ch / 2, ch, 1);
            b.pieces.push(Piece::Conv { w: t, stride: 1, pad: 0 });
            b.pieces.push(Piece::AvgPool);
            ch /= 2;
        }
        let slot = b.slot(n, 0);
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            let cin = ch + l * g;
            let prefix = format!("block{blk}.layer{l}");
            layers.push(CompDef::DenseLayer {
                w1: b.conv_param(format!("{prefix}.bottleneck.w"), 4 * g, cin, 1),
                w2: b.concat_conv_param(format!("{prefix}.conv.w"), g, 4 * g, 3, n),
            });
        }
        b.pieces.push(Piece::DenseBlock { slot, layers });
        ch += n * g;
    }
    push_relu_pool_head(cfg, b, ch);
}

fn push_pool_head(cfg: &ArchConfig, b: &mut Builder, in_ch: usize) {
    b.pieces.push(Piece::GlobalMeanPool);
    let head = b.param("head.w".into(), vec![in_ch + 1, cfg.classes], in_ch + 1, 1.0);
    b.pieces.push(Piece::LinearBias { w: head });
}

fn push_relu_pool_head(cfg: &ArchConfig, b: &mut Builder, in_ch: usize) {
    b.pieces.push(Piece::Relu);
    push_pool_head(cfg, b, in_ch);
}

/// Component adapter binding a definition to parameter leaves in a graph.
struct Bound<'a> {
    def: &'a CompDef,
    net: &'a NetworkSpec,
    binding: &'a [NodeId],
}

impl Bound<'_> {
    fn pshape(&self, id: ParamId) -> &[usize] {
        &self.net.param_specs[id].shape
    }
}

impl Component for Bound<'_> {
    fn out_shape(&self, in_shape: &[usize]) -> Vec<usize> {
        match self.def {
            CompDef::ConvGroup { w, stride, pad } => {
                let ws = self.pshape(*w);
                let oh = (in_shape[2] + 2 * pad - ws[2]) / stride + 1;
                let ow = (in_shape[3] + 2 * pad - ws[3]) / stride + 1;
                vec![in_shape[0], ws[0], oh, ow]
            }
            CompDef::FcGroup { w } => vec![in_shape[0], self.pshape(*w)[1]],
            CompDef::ResnextBranch { w3, .. } => {
                vec![in_shape[0], self.pshape(*w3)[0], in_shape[2], in_shape[3]]
            }
            CompDef::ResBlock { .. } => in_shape.to_vec(),
            CompDef::DenseLayer { w2, .. } => {
                vec![in_shape[0], self.pshape(*w2)[0], in_shape[2], in_shape[3]]
            }
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, TensorError> {
        let p = |id: ParamId| self.binding[id];
        match self.def {
            CompDef::ConvGroup { w, stride, pad } => g.conv2d(x, p(*w), *stride, *pad),
            CompDef::FcGroup { w } => g.matmul(x, p(*w)),
            CompDef::ResnextBranch { w1, w2, w3 } => {
                let r = g.relu(x);
                let c1 = g.conv2d(r, p(*w1), 1, 0)?;
                let r1 = g.relu(c1);
                let c2 = g.conv2d(r1, p(*w2), 1, 1)?;
                let r2 = g.relu(c2);
                g.conv2d(r2, p(*w3), 1, 0)
            }
            CompDef::ResBlock { w1, w2 } => {
                let r = g.relu(x);
                let c1 = g.conv2d(r, p(*w1), 1, 1)?;
                let r1 = g.relu(c1);
                g.conv2d(r1, p(*w2), 1, 1)
            }
            CompDef::DenseLayer { w1, w2 } => {
                let r = g.relu(x);
                let c1 = g.conv2d(r, p(*w1), 1, 0)?;
                let r1 = g.relu(c1);
                g.conv2d(r1, p(*w2), 1, 1)
            }
        }
    }
}

/// How gates are supplied to a forward pass.
enum GateRoute<'a> {
    /// Skip path: gated-off components are never evaluated. Min-active
    /// enforcement is waived only for internal cost-measurement runs.
    Skip { plan: &'a GatePlan, enforce_min: bool },
    /// Dense masked path (the oracle): every component evaluated.
    Dense(&'a GatePlan),
    /// Relaxed gates as graph nodes (Concrete training); dense evaluation
    /// with gradients flowing into the gate nodes.
    Nodes(&'a [Vec<NodeId>]),
}

impl NetworkSpec {
    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.param_specs
    }

    /// Total gated components across all slots.
    pub fn total_components(&self) -> usize {
        self.layout.total_components()
    }

    /// Per-slot, per-component FLOP costs (aggregated over modules sharing
    /// each slot).
    pub fn component_costs(&self) -> &[Vec<u64>] {
        &self.comp_costs
    }

    /// FLOPs of the un-gated glue (stem, transitions, pooling, head).
    pub fn glue_flops(&self) -> u64 {
        self.glue_flops
    }

    /// Deterministic Gaussian initialization from the init substream.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = substream(seed, "init");
        let tensors = self
            .param_specs
            .iter()
            .map(|spec| Tensor::randn(&spec.shape, spec.init_std, &mut rng))
            .collect();
        ParamStore { tensors }
    }

    pub fn save_params(&self, store: &ParamStore, path: &Path) -> Result<(), ArchError> {
        let records: Vec<(String, &Tensor)> = self
            .param_specs
            .iter()
            .zip(&store.tensors)
            .map(|(spec, t)| (spec.name.clone(), t))
            .collect();
        checkpoint::save(path, &records)?;
        Ok(())
    }

    pub fn load_params(&self, path: &Path) -> Result<ParamStore, ArchError> {
        let records = checkpoint::load(path)?;
        if records.len() != self.param_specs.len() {
            return Err(ArchError::ParamMismatch {
                what: format!(
                    "expected {} parameter records, found {}",
                    self.param_specs.len(),
                    records.len()
                ),
            });
        }
        let mut tensors = Vec::with_capacity(records.len());
        for (spec, (name, tensor)) in self.param_specs.iter().zip(records) {
            if name != spec.name {
                return Err(ArchError::ParamMismatch {
                    what: format!("record '{name}' where '{}' was expected", spec.name),
                });
            }
            if tensor.shape() != spec.shape {
                return Err(ArchError::ParamMismatch {
                    what: format!(
                        "record '{name}' has shape {:?}, expected {:?}",
                        tensor.shape(),
                        spec.shape
                    ),
                });
            }
            tensors.push(tensor);
        }
        Ok(ParamStore { tensors })
    }

    fn bind(&self, g: &mut Graph, params: &ParamStore, trainable: bool) -> Vec<NodeId> {
        self.param_specs
            .iter()
            .zip(&params.tensors)
            .map(|(_, t)| {
                let tensor = if trainable { t.clone().with_grad() } else { t.clone() };
                g.leaf(tensor)
            })
            .collect()
    }

    fn check_plan(&self, plan: &GatePlan) -> Result<(), ArchError> {
        if plan.gates.len() != self.layout.slots.len() {
            return Err(ArchError::PlanMismatch {
                expected: self.layout.slots.len(),
                got: plan.gates.len(),
            });
        }
        for (gate, slot) in plan.gates.iter().zip(&self.layout.slots) {
            if gate.len() != slot.size {
                return Err(ArchError::Gate(GateError::SizeMismatch {
                    expected: slot.size,
                    got: gate.len(),
                }));
            }
        }
        Ok(())
    }

    /// Sparse forward: skipped components are never evaluated.
    pub fn forward_with_plan(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        trainable: bool,
        x: &Tensor,
        plan: &GatePlan,
        counters: &mut EvalCounters,
    ) -> Result<ForwardHandle, ArchError> {
        self.check_plan(plan)?;
        let binding = self.bind(g, params, trainable);
        let x = g.constant(x.clone());
        let logits = self.walk(g, &binding, x, GateRoute::Skip { plan, enforce_min: true }, counters)?;
        Ok(ForwardHandle { logits, param_nodes: binding })
    }

    /// Dense masked forward (the skip-equivalence oracle).
    pub fn reference_forward_with_plan(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        x: &Tensor,
        plan: &GatePlan,
        counters: &mut EvalCounters,
    ) -> Result<ForwardHandle, ArchError> {
        self.check_plan(plan)?;
        let binding = self.bind(g, params, false);
        let x = g.constant(x.clone());
        let logits = self.walk(g, &binding, x, GateRoute::Dense(plan), counters)?;
        Ok(ForwardHandle { logits, param_nodes: binding })
    }

    /// Dense forward with relaxed per-component gate nodes (one scalar node
    /// per component per slot); gradients flow into the gate nodes while the
    /// data-path parameters stay frozen.
    pub fn forward_with_gate_nodes(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        x: &Tensor,
        gate_nodes: &[Vec<NodeId>],
    ) -> Result<ForwardHandle, ArchError> {
        if gate_nodes.len() != self.layout.slots.len()
            || gate_nodes
                .iter()
                .zip(&self.layout.slots)
                .any(|(nodes, slot)| nodes.len() != slot.size)
        {
            return Err(ArchError::PlanMismatch {
                expected: self.layout.slots.len(),
                got: gate_nodes.len(),
            });
        }
        let binding = self.bind(g, params, false);
        let x = g.constant(x.clone());
        let mut counters = EvalCounters::new(&self.layout);
        let logits = self.walk(g, &binding, x, GateRoute::Nodes(gate_nodes), &mut counters)?;
        Ok(ForwardHandle { logits, param_nodes: binding })
    }

    fn walk(
        &self,
        g: &mut Graph,
        binding: &[NodeId],
        input: NodeId,
        route: GateRoute<'_>,
        counters: &mut EvalCounters,
    ) -> Result<NodeId, ArchError> {
        // Normalized gate-factor nodes per slot, built lazily for the Nodes
        // route (width modules share them; depth stages use the raw nodes).
        let mut norm_cache: Vec<Option<Vec<NodeId>>> = vec![None; self.layout.slots.len()];
        let mut cur = input;
        for piece in &self.pieces {
            cur = match piece {
                Piece::Conv { w, stride, pad } => g.conv2d(cur, binding[*w], *stride, *pad)?,
                Piece::Relu => g.relu(cur),
                Piece::MaxPool => g.max_pool2(cur)?,
                Piece::AvgPool => g.avg_pool2(cur)?,
                Piece::GlobalMeanPool => g.global_mean_pool(cur)?,
                Piece::Flatten => g.flatten(cur)?,
                Piece::LinearBias { w } => {
                    let batch = g.value(cur).shape()[0];
                    let ones = g.constant(Tensor::ones(&[batch, 1]));
                    let aug = g.concat(&[cur, ones], 1)?;
                    g.matmul(aug, binding[*w])?
                }
                Piece::Width(def) => self.width_module(g, binding, cur, def, &route, &mut norm_cache, counters)?,
                Piece::ResidualWidth(def) => {
                    let t = self.width_module(g, binding, cur, def, &route, &mut norm_cache, counters)?;
                    g.add(cur, t)?
                }
                Piece::DepthStage { slot, blocks } => {
                    self.depth_stage(g, binding, cur, *slot, blocks, &route, counters)?
                }
                Piece::DenseBlock { slot, layers } => {
                    self.dense_block(g, binding, cur, *slot, layers, &route, &mut norm_cache, counters)?
                }
            };
        }
        Ok(cur)
    }

    /// Normalized relaxed-gate factor nodes for one slot: g_i / ||g||_1.
    fn norm_nodes(
        g: &mut Graph,
        nodes: &[NodeId],
        cache: &mut Option<Vec<NodeId>>,
    ) -> Result<Vec<NodeId>, ArchError> {
        if let Some(ready) = cache {
            return Ok(ready.clone());
        }
        let total = g.sum_components(nodes)?;
        let inv = g.reciprocal(total);
        let normed: Result<Vec<NodeId>, TensorError> =
            nodes.iter().map(|&n| g.elem_mul(n, inv)).collect();
        let normed = normed?;
        *cache = Some(normed.clone());
        Ok(normed)
    }

    #[allow(clippy::too_many_arguments)]
    fn width_module(
        &self,
        g: &mut Graph,
        binding: &[NodeId],
        x: NodeId,
        def: &WidthModuleDef,
        route: &GateRoute<'_>,
        norm_cache: &mut [Option<Vec<NodeId>>],
        counters: &mut EvalCounters,
    ) -> Result<NodeId, ArchError> {
        let comps: Vec<Bound<'_>> = def
            .comps
            .iter()
            .map(|c| Bound { def: c, net: self, binding })
            .collect();
        match route {
            GateRoute::Skip { plan, enforce_min } => {
                let module = GatedModule {
                    components: comps,
                    aggregation: def.aggregation,
                    axis: crate::gating::GatingAxis::Width,
                    min_active: if *enforce_min { def.min_active } else { 0 },
                };
                let out = gated_forward(&module, g, x, &plan.gates[def.slot], &mut counters.slots[def.slot])?;
                Ok(out)
            }
            GateRoute::Dense(plan) => {
                let module = GatedModule {
                    components: comps,
                    aggregation: def.aggregation,
                    axis: crate::gating::GatingAxis::Width,
                    min_active: def.min_active,
                };
                let out = reference_forward(&module, g, x, &plan.gates[def.slot], &mut counters.slots[def.slot])?;
                Ok(out)
            }
            GateRoute::Nodes(all_nodes) => {
                let normed = Self::norm_nodes(g, &all_nodes[def.slot], &mut norm_cache[def.slot])?;
                let mut slabs = Vec::with_capacity(comps.len());
                for (i, comp) in comps.iter().enumerate() {
                    counters.slots[def.slot][i] += 1;
                    let f = comp.forward(g, x)?;
                    slabs.push(g.scalar_mul_node(f, normed[i])?);
                }
                let out = match def.aggregation {
                    Aggregation::Sum => g.sum_components(&slabs)?,
                    Aggregation::Concat => g.concat(&slabs, 1)?,
                };
                Ok(out)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn depth_stage(
        &self,
        g: &mut Graph,
        binding: &[NodeId],
        x: NodeId,
        slot: usize,
        blocks: &[CompDef],
        route: &GateRoute<'_>,
        counters: &mut EvalCounters,
    ) -> Result<NodeId, ArchError> {
        let comps: Vec<Bound<'_>> = blocks.iter().map(|c| Bound { def: c, net: self, binding }).collect();
        match route {
            GateRoute::Skip { plan, .. } => {
                let module = GatedModule::depth(comps);
                Ok(gated_forward(&module, g, x, &plan.gates[slot], &mut counters.slots[slot])?)
            }
            GateRoute::Dense(plan) => {
                let module = GatedModule::depth(comps);
                Ok(reference_forward(&module, g, x, &plan.gates[slot], &mut counters.slots[slot])?)
            }
            GateRoute::Nodes(all_nodes) => {
                // Depth gating applies no normalization: x := x + g_i f_i(x).
                let mut cur = x;
                for (i, comp) in comps.iter().enumerate() {
                    counters.slots[slot][i] += 1;
                    let f = comp.forward(g, cur)?;
                    let scaled = g.scalar_mul_node(f, all_nodes[slot][i])?;
                    cur = g.add(cur, scaled)?;
                }
                Ok(cur)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn dense_block(
        &self,
        g: &mut Graph,
        binding: &[NodeId],
        x: NodeId,
        slot: usize,
        layers: &[CompDef],
        route: &GateRoute<'_>,
        norm_cache: &mut [Option<Vec<NodeId>>],
        counters: &mut EvalCounters,
    ) -> Result<NodeId, ArchError> {
        let mut features = x;
        match route {
            GateRoute::Skip { plan, .. } | GateRoute::Dense(plan) => {
                let gate = &plan.gates[slot];
                let dense = matches!(route, GateRoute::Dense(_));
                let norm = crate::gating::normalize_gate(gate);
                for (i, def) in layers.iter().enumerate() {
                    let comp = Bound { def, net: self, binding };
                    let active = gate.values()[i] != 0.0;
                    let slab = if active || dense {
                        counters.slots[slot][i] += 1;
                        let f = comp.forward(g, features)?;
                        g.scalar_mul(f, norm[i])
                    } else {
                        let shape = comp.out_shape(g.value(features).shape());
                        g.constant(Tensor::zeros(&shape))
                    };
                    features = g.concat(&[features, slab], 1)?;
                }
            }
            GateRoute::Nodes(all_nodes) => {
                let normed = Self::norm_nodes(g, &all_nodes[slot], &mut norm_cache[slot])?;
                for (i, def) in layers.iter().enumerate() {
                    let comp = Bound { def, net: self, binding };
                    counters.slots[slot][i] += 1;
                    let f = comp.forward(g, features)?;
                    let slab = g.scalar_mul_node(f, normed[i])?;
                    features = g.concat(&[features, slab], 1)?;
                }
            }
        }
        Ok(features)
    }

    /// Measures per-component FLOP costs by complement runs: the cost of
    /// component j is T(all on) - T(all but j). Glue is what remains after
    /// subtracting every component from the all-on total. Exactness against
    /// the instrumented forward is asserted by the evaluation tests.
    fn measure_costs(&mut self) -> Result<(), ArchError> {
        let zeros = ParamStore {
            tensors: self.param_specs.iter().map(|s| Tensor::zeros(&s.shape)).collect(),
        };
        let (c, h, w) = self.cfg.input;
        let x = Tensor::zeros(&[1, c, h, w]);
        let all_on = crate::strategies::all_on_plan(&self.layout);
        let total_on = self.dry_run_flops(&zeros, &x, &all_on)?;
        let mut costs: Vec<Vec<u64>> = self.layout.slots.iter().map(|s| vec![0; s.size]).collect();
        let mut sum = 0u64;
        for (slot, spec) in self.layout.slots.iter().enumerate() {
            for comp in 0..spec.size {
                let mut plan = all_on.clone();
                let mut values = plan.gates[slot].values().to_vec();
                values[comp] = 0.0;
                plan.gates[slot] = crate::gating::GateVector::new(values, spec.weights.clone())
                    .expect("valid gate");
                let t = self.dry_run_flops(&zeros, &x, &plan)?;
                let cost = total_on - t;
                costs[slot][comp] = cost;
                sum += cost;
            }
        }
        self.comp_costs = costs;
        self.glue_flops = total_on - sum;
        Ok(())
    }

    fn dry_run_flops(&self, params: &ParamStore, x: &Tensor, plan: &GatePlan) -> Result<u64, ArchError> {
        self.check_plan(plan)?;
        let mut g = Graph::new();
        let mut counters = EvalCounters::new(&self.layout);
        let binding = self.bind(&mut g, params, false);
        let xn = g.constant(x.clone());
        self.walk(&mut g, &binding, xn, GateRoute::Skip { plan, enforce_min: false }, &mut counters)?;
        Ok(g.flops())
    }
}

/// Small-footprint configs for fast tests; same structure, fewer channels.
pub fn tiny_config(arch: ArchName, input: (usize, usize, usize), classes: usize) -> ArchConfig {
    let mut cfg = ArchConfig::defaults(arch, input, classes);
    match arch {
        ArchName::TMlp => {
            cfg.components = 4;
            cfg.fc_width = 32;
        }
        ArchName::TVgg => {
            cfg.channels = vec![16, 32, 32];
            cfg.blocks_per_stage = 1;
            cfg.fc_width = 32;
        }
        ArchName::TResnextW => {
            cfg.channels = vec![16, 32, 32];
            cfg.blocks_per_stage = 1;
            cfg.branch_width = 1;
        }
        ArchName::TResnetD => {
            cfg.channels = vec![8, 16, 16];
            cfg.blocks_per_stage = 4;
        }
        ArchName::TDensenet => {
            cfg.components = 4;
            cfg.growth = 4;
            cfg.stages = 2;
        }
    }
    cfg
}
