//! The dynamic-routing search space.
//!
//! A fixed three-layer STEM brings the image to 1/4 resolution. A grid of
//! `num_layers` columns by four levels follows; level `l` carries
//! `base_channels * 2^l` feature maps at stride `4 * 2^l`. Every cell mixes a
//! separable 3×3 convolution with an identity through softmax-normalized
//! operation gates, then routes its output to the neighbouring levels of the
//! next column through softmax-normalized path gates. Going down a level is
//! a stride-2 1×1 convolution doubling the channels; going up is a 1×1
//! convolution halving them followed by 2× bilinear upsampling. A cell's
//! input is the sum of everything routed to it.
//!
//! The decoder walks back up from level 3 to level 0, adding features as it
//! goes, and a 1×1 classifier plus 4× upsampling produces full-resolution
//! logits. The pretext head pools the level-3 features and classifies them
//! into one of `num_permutations` jigsaw permutations.
//!
//! Gates and weights are ordinary parameters and are trained together.

mod checkpoint;
mod flops;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use flops::count_flops;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NUM_LEVELS: usize = 4;
/// Input extents must be divisible by this so that level 3 has integral size.
pub const INPUT_DIVISOR: usize = 32;
const DIRAC_NOISE: f64 = 0.1;
/// Pixels in [0, 1] are multiplied by this on entry to the STEM.
pub const INPUT_GAIN: f64 = 4.0;
/// Initial op-gate logit of the identity (the conv logit starts at 0).
pub const INIT_IDENTITY_LOGIT: f64 = 2.0;
/// Initial path-gate logit of "keep" (the others start at 0).
pub const INIT_KEEP_LOGIT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingConfig {
    pub num_layers: usize,
    pub num_levels: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub num_permutations: usize,
    pub in_channels: usize,
    /// Gate weight a cell operation or path must exceed to count as active
    /// in FLOPs accounting.
    pub gate_threshold: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            num_layers: 4,
            num_levels: NUM_LEVELS,
            base_channels: 8,
            num_classes: 4,
            num_permutations: 100,
            in_channels: 3,
            gate_threshold: 0.0,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_layers < 1 {
            return bad("num_layers must be >= 1");
        }
        if self.num_levels != NUM_LEVELS {
            return bad("num_levels must be 4");
        }
        if self.base_channels < 1 {
            return bad("base_channels must be >= 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.num_permutations < 1 {
            return bad("num_permutations must be >= 1");
        }
        if self.in_channels < 1 {
            return bad("in_channels must be >= 1");
        }
        if !(0.0..1.0).contains(&self.gate_threshold) {
            return bad("gate_threshold must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channel progression of the three STEM layers.
    pub fn stem_channels(&self) -> [usize; 3] {
        let half = (self.base_channels / 2).max(1);
        [half, self.base_channels, self.base_channels]
    }
}

pub const STEM_STRIDES: [usize; 3] = [2, 2, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Keep,
    Down,
}

impl Direction {
    pub fn target(self, level: usize) -> usize {
        match self {
            Direction::Up => level - 1,
            Direction::Keep => level,
            Direction::Down => level + 1,
        }
    }

    /// Outgoing directions available at `level`, in gate order.
    pub fn available(level: usize) -> Vec<Direction> {
        let mut dirs = Vec::with_capacity(3);
        if level > 0 {
            dirs.push(Direction::Up);
        }
        dirs.push(Direction::Keep);
        if level + 1 < NUM_LEVELS {
            dirs.push(Direction::Down);
        }
        dirs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemLayer {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bias: ParamId,
}

/// One grid node: its operation weights, gates and outgoing transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub layer: usize,
    pub level: usize,
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    /// Logits over {separable conv, identity}.
    pub op_gate: ParamId,
    /// Logits over `directions`.
    pub path_gate: ParamId,
    pub directions: Vec<Direction>,
    pub up: Option<ParamId>,
    pub down: Option<ParamId>,
}

/// Index of the separable-conv and identity entries in an op gate.
pub const OP_CONV: usize = 0;
pub const OP_IDENTITY: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingNet {
    config: RoutingConfig,
    store: ParamStore,
    stem: [StemLayer; 3],
    /// `cells[layer][level]`
    cells: Vec<Vec<Cell>>,
    /// `decoder[l - 1]` maps level `l` to level `l - 1` channels.
    decoder: Vec<ParamId>,
    seg_weight: ParamId,
    seg_bias: ParamId,
    pretext_weight: ParamId,
    pretext_bias: ParamId,
}

/// Whether a forward pass records parameters as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Frozen,
}

/// A network's parameters placed on a particular tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    Tensor::rand_normal(shape, (gain / fan_in as f64).sqrt(), rng)
}

/// Depthwise 3×3 kernels near the identity tap.
fn dirac<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::rand_normal(&[channels, 1, 3, 3], DIRAC_NOISE, rng);
    for c in 0..channels {
        t.data_mut()[c * 9 + 4] += 1.0;
    }
    t
}

/// Softmax of a small logit vector, outside any tape.
pub fn normalize_gates(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl RoutingNet {
    /// Build a network with fan-in scaled normal weights, near-identity
    /// depthwise kernels, zero biases and gates leaning towards identity
    /// and keep.
    pub fn new<R: Rng + ?Sized>(config: RoutingConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let cin = config.in_channels;
        let sc = config.stem_channels();
        let mut prev = cin;
        let stem = [0, 1, 2].map(|i| {
            let out = sc[i];
            let layer = StemLayer {
                depthwise: store.register(format!("stem.{i}.dw"), dirac(prev, rng)),
                pointwise: store.register(format!("stem.{i}.pw"), kaiming(&[out, prev, 1, 1], prev, 2.0, rng)),
                bias: store.register(format!("stem.{i}.bias"), Tensor::zeros(&[out])),
            };
            prev = out;
            layer
        });

        let mut cells = Vec::with_capacity(config.num_layers);
        for layer in 0..config.num_layers {
            let mut column = Vec::with_capacity(NUM_LEVELS);
            for level in 0..NUM_LEVELS {
                let c = config.level_channels(level);
                let p = format!("cell.{layer}.{level}");
                let directions = Direction::available(level);
                let depthwise = store.register(format!("{p}.dw"), dirac(c, rng));
                let pointwise = store.register(format!("{p}.pw"), kaiming(&[c, c, 1, 1], c, 2.0, rng));
                let mut op_logits = Tensor::zeros(&[2]);
                op_logits.data_mut()[OP_IDENTITY] = INIT_IDENTITY_LOGIT;
                let op_gate = store.register(format!("{p}.op_gate"), op_logits);
                let path_logits: Vec<f64> = directions
                    .iter()
                    .map(|&d| if d == Direction::Keep { INIT_KEEP_LOGIT } else { 0.0 })
                    .collect();
                let path_gate = store.register(
                    format!("{p}.path_gate"),
                    Tensor::new(&[directions.len()], path_logits).expect("gate length"),
                );
                let up = (level > 0).then(|| {
                    store.register(format!("{p}.up"), kaiming(&[c / 2, c, 1, 1], c, 2.0, rng))
                });
                let down = (level + 1 < NUM_LEVELS).then(|| {
                    store.register(format!("{p}.down"), kaiming(&[c * 2, c, 1, 1], c, 2.0, rng))
                });
                column.push(Cell {
                    layer,
                    level,
                    depthwise,
                    pointwise,
                    op_gate,
                    path_gate,
                    directions,
                    up,
                    down,
                });
            }
            cells.push(column);
        }

        let decoder = (1..NUM_LEVELS)
            .map(|l| {
                let (from, to) = (config.level_channels(l), config.level_channels(l - 1));
                store.register(format!("decoder.{l}"), kaiming(&[to, from, 1, 1], from, 2.0, rng))
            })
            .collect();
        let c0 = config.level_channels(0);
        let k = config.num_classes;
        let seg_weight = store.register("seg_head.w", kaiming(&[k, c0, 1, 1], c0, 1.0, rng));
        let seg_bias = store.register("seg_head.b", Tensor::zeros(&[k]));
        let c3 = config.level_channels(NUM_LEVELS - 1);
        let np = config.num_permutations;
        let pretext_weight = store.register("pretext.w", kaiming(&[np, c3], c3, 1.0, rng));
        let pretext_bias = store.register("pretext.b", Tensor::zeros(&[np]));

        Ok(RoutingNet {
            config,
            store,
            stem,
            cells,
            decoder,
            seg_weight,
            seg_bias,
            pretext_weight,
            pretext_bias,
        })
    }

    pub fn config(&self) -> &RoutingConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stem_layers(&self) -> &[StemLayer; 3] {
        &self.stem
    }

    pub fn cell(&self, layer: usize, level: usize) -> &Cell {
        &self.cells[layer][level]
    }

    pub fn cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().flatten()
    }

    pub fn decoder_convs(&self) -> &[ParamId] {
        &self.decoder
    }

    pub fn seg_head(&self) -> (ParamId, ParamId) {
        (self.seg_weight, self.seg_bias)
    }

    pub fn pretext_head(&self) -> (ParamId, ParamId) {
        (self.pretext_weight, self.pretext_bias)
    }

    /// Normalized op-gate weights `[conv, identity]` of a cell.
    pub fn op_weights(&self, cell: &Cell) -> Vec<f64> {
        normalize_gates(self.store.value(cell.op_gate).data())
    }

    /// Normalized path-gate weights of a cell, aligned with `cell.directions`.
    pub fn path_weights(&self, cell: &Cell) -> Vec<f64> {
        normalize_gates(self.store.value(cell.path_gate).data())
    }

    pub fn set_op_logits(&mut self, layer: usize, level: usize, logits: [f64; 2]) {
        let id = self.cells[layer][level].op_gate;
        self.store.value_mut(id).data_mut().copy_from_slice(&logits);
    }

    /// Set path logits by direction; directions absent at this level are ignored.
    pub fn set_path_logits(&mut self, layer: usize, level: usize, up: f64, keep: f64, down: f64) {
        let cell = &self.cells[layer][level];
        let vals: Vec<f64> = cell
            .directions
            .iter()
            .map(|d| match d {
                Direction::Up => up,
                Direction::Keep => keep,
                Direction::Down => down,
            })
            .collect();
        let id = cell.path_gate;
        self.store.value_mut(id).data_mut().copy_from_slice(&vals);
    }

    /// Place every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, mode: Mode) -> Bound {
        let vars = self
            .store
            .iter()
            .map(|(id, p)| match mode {
                Mode::Train => tape.param(&self.store, id),
                Mode::Frozen => tape.constant(p.value.clone()),
            })
            .collect();
        Bound { vars }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::shape(
                "RoutingNet",
                format!(
                    "expected [B,{},H,W] images, got {:?}",
                    self.config.in_channels, shape
                ),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        if h == 0 || w == 0 || h % INPUT_DIVISOR != 0 || w % INPUT_DIVISOR != 0 {
            return Err(Error::shape(
                "RoutingNet",
                format!("input {h}x{w} must be non-empty with both sides divisible by {INPUT_DIVISOR}"),
            ));
        }
        Ok(())
    }

    /// Image `[B,C,H,W]` to level-0 features `[B,C0,H/4,W/4]`.
    pub fn stem_forward(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Result<Var> {
        self.check_input(tape.shape(image))?;
        let mut x = tape.scale(image, INPUT_GAIN);
        for (layer, stride) in self.stem.iter().zip(STEM_STRIDES) {
            let y = tape.separable_conv3x3(
                x,
                bound.var(layer.depthwise),
                bound.var(layer.pointwise),
                stride,
            )?;
            let y = tape.channel_bias(y, bound.var(layer.bias))?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    /// `w_conv * relu(sepconv(x)) + w_id * x`
    pub fn cell_forward(&self, tape: &mut Tape, bound: &Bound, cell: &Cell, x: Var) -> Result<Var> {
        let c = self.config.level_channels(cell.level);
        if tape.shape(x).get(1) != Some(&c) {
            return Err(Error::shape(
                "cell_forward",
                format!("level {} expects {c} channels, got {:?}", cell.level, tape.shape(x)),
            ));
        }
        let gates = tape.softmax1d(bound.var(cell.op_gate))?;
        let g_conv = tape.index(gates, OP_CONV)?;
        let g_id = tape.index(gates, OP_IDENTITY)?;
        let conv = tape.separable_conv3x3(x, bound.var(cell.depthwise), bound.var(cell.pointwise), 1)?;
        let conv = tape.relu(conv);
        let a = tape.scale_by(conv, g_conv)?;
        let b = tape.scale_by(x, g_id)?;
        tape.add(a, b)
    }

    /// Output of `cell` routed in direction `dir`, before gate scaling.
    pub fn transition(&self, tape: &mut Tape, bound: &Bound, cell: &Cell, out: Var, dir: Direction) -> Result<Var> {
        Ok(match dir {
            Direction::Keep => out,
            Direction::Down => {
                let w = bound.var(cell.down.expect("down transition at bottom level"));
                let y = tape.conv2d(out, w, 2, 0)?;
                tape.relu(y)
            }
            Direction::Up => {
                let w = bound.var(cell.up.expect("up transition at top level"));
                let y = tape.conv2d(out, w, 1, 0)?;
                let y = tape.relu(y);
                tape.bilinear_upsample2x(y)?
            }
        })
    }

    /// Propagate the STEM output through every column. Returns the four
    /// per-level features leaving the last column; a level nothing reaches
    /// comes back as zeros.
    pub fn grid_forward(&self, tape: &mut Tape, bound: &Bound, stem_out: Var) -> Result<Vec<Var>> {
        let (b, _, h0, w0) = tape.value(stem_out).dims4()?;
        let mut inputs: Vec<Option<Var>> = vec![None; NUM_LEVELS];
        inputs[0] = Some(stem_out);
        for column in &self.cells {
            let mut next: Vec<Option<Var>> = vec![None; NUM_LEVELS];
            for cell in column {
                let Some(x) = inputs[cell.level] else { continue };
                let out = self.cell_forward(tape, bound, cell, x)?;
                let paths = tape.softmax1d(bound.var(cell.path_gate))?;
                for (i, &dir) in cell.directions.iter().enumerate() {
                    let weight = tape.index(paths, i)?;
                    let routed = self.transition(tape, bound, cell, out, dir)?;
                    let routed = tape.scale_by(routed, weight)?;
                    let slot = &mut next[dir.target(cell.level)];
                    *slot = Some(match *slot {
                        Some(acc) => tape.add(acc, routed)?,
                        None => routed,
                    });
                }
            }
            inputs = next;
        }
        Ok(inputs
            .into_iter()
            .enumerate()
            .map(|(level, v)| {
                v.unwrap_or_else(|| {
                    let c = self.config.level_channels(level);
                    tape.constant(Tensor::zeros(&[b, c, h0 >> level, w0 >> level]))
                })
            })
            .collect())
    }

    /// Bottom-up decoder plus classifier; returns logits at input resolution.
    pub fn decoder_forward(&self, tape: &mut Tape, bound: &Bound, features: &[Var]) -> Result<Var> {
        if features.len() != NUM_LEVELS {
            return Err(Error::shape(
                "decoder_forward",
                format!("expected {NUM_LEVELS} feature maps, got {}", features.len()),
            ));
        }
        let mut x = features[NUM_LEVELS - 1];
        for level in (1..NUM_LEVELS).rev() {
            let y = tape.conv2d(x, bound.var(self.decoder[level - 1]), 1, 0)?;
            let y = tape.relu(y);
            let y = tape.bilinear_upsample2x(y)?;
            x = tape.add(y, features[level - 1])?;
        }
        let logits = tape.conv2d(x, bound.var(self.seg_weight), 1, 0)?;
        let logits = tape.channel_bias(logits, bound.var(self.seg_bias))?;
        tape.upsample_bilinear(logits, 4)
    }

    /// Pretext logits `[B,k]` from the deepest level's features.
    pub fn pretext_head_forward(&self, tape: &mut Tape, bound: &Bound, deepest: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(deepest)?;
        tape.linear(pooled, bound.var(self.pretext_weight), bound.var(self.pretext_bias))
    }

    /// Segmentation logits `[B,num_classes,H,W]`.
    pub fn segment(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Result<Var> {
        let s = self.stem_forward(tape, bound, image)?;
        let feats = self.grid_forward(tape, bound, s)?;
        self.decoder_forward(tape, bound, &feats)
    }

    /// Jigsaw-permutation logits `[B,k]`.
    pub fn pretext_forward(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Result<Var> {
        let s = self.stem_forward(tape, bound, image)?;
        let feats = self.grid_forward(tape, bound, s)?;
        self.pretext_head_forward(tape, bound, feats[NUM_LEVELS - 1])
    }

    /// Inference-only segmentation logits.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Mode::Frozen);
        let x = tape.constant(images.clone());
        let logits = self.segment(&mut tape, &bound, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Every parameter as `(name, tensor)`, in registration order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrite parameters from named tensors; every parameter must be present.
    pub fn load_named(&mut self, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let key = format!("{prefix}{}", self.store.get(id).name);
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {key}")))?;
            let p = self.store.get_mut(id);
            if t.shape() != p.value.shape() {
                return Err(Error::shape(
                    "load_named",
                    format!("{key}: {:?} vs {:?}", t.shape(), p.value.shape()),
                ));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}
