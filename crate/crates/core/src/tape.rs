//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is a Wengert list: every operation appends a node holding its
//! output value and enough of its inputs to run the adjoint. Nodes only ever
//! refer to earlier nodes, so the list is already in topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Trainable tensors enter through [`Tape::param`], which remembers the
//! [`ParamId`] they came from. After `backward`, [`Tape::accumulate_grads`]
//! adds the parameter gradients into the store. Gradients accumulate; callers
//! zero them between steps with [`ParamStore::zero_grad`].
//!
//! Values entering through [`Tape::constant`] are opaque to differentiation,
//! which is how teacher networks and pseudo-labels stay out of the graph.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Target value meaning "skip this position" in classification losses.
pub const IGNORE_INDEX: usize = 255;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy { x: Var, s: Var },
    Relu(Var),
    Sum(Var),
    Softmax1d(Var),
    Index(Var, usize),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Depthwise { x: Var, w: Var, geom: ConvGeom },
    ChannelBias { x: Var, b: Var },
    Upsample { x: Var, factor: usize },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    SoftmaxChannels(Var),
    /// Weighted negative log-likelihood; `weights[pos]` is zero for
    /// positions that do not contribute.
    CrossEntropy {
        logits: Var,
        probs: Tensor,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    SquaredError { a: Var, b: Var, scale: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Result of a classification loss: the scalar plus how many positions
/// actually contributed. `counted == 0` flags an all-ignored batch, whose
/// loss is defined as zero.
#[derive(Debug, Clone, Copy)]
pub struct ClassLoss {
    pub loss: Var,
    pub counted: usize,
}

/// Gradients from one backward sweep, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as_bkr(shape: &[usize]) -> (usize, usize, usize) {
    // Treat [B, K, ...] as [B, K, S] with S the product of trailing extents.
    let b = shape[0];
    let k = shape[1];
    let s = shape[2..].iter().product();
    (b, k, s)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable leaf that is not tied to any store. Its gradient is
    /// read back through [`Gradients::get`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, true)
    }

    /// A trainable parameter. The value is copied onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Copy of `v`'s value as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.grad_of(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// `x` multiplied by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("scale must hold one value, got {:?}", self.shape(s)),
            ));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        let ng = self.grad_of(&[x, s]);
        Ok(self.push(value, Op::ScaleBy { x, s }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.grad_of(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.grad_of(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Softmax of a rank-1 tensor.
    pub fn softmax1d(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 1 {
            return Err(Error::shape(
                "softmax1d",
                format!("expected rank 1, got {:?}", self.shape(a)),
            ));
        }
        let value = softmax_slice(self.value(a).data());
        let n = value.len();
        let ng = self.grad_of(&[a]);
        Ok(self.push(Tensor::new(&[n], value)?, Op::Softmax1d(a), ng))
    }

    /// Element `i` of a rank-1 tensor, as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || i >= t.len() {
            return Err(Error::shape(
                "index",
                format!("index {i} into {:?}", t.shape()),
            ));
        }
        let value = Tensor::scalar(t.data()[i]);
        let ng = self.grad_of(&[a]);
        Ok(self.push(value, Op::Index(a, i), ng))
    }

    /// Cross-correlation of `x: [B,Cin,H,W]` with `w: [Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (b, cin, h, wd) = self.value(x).dims4()?;
        let (cout, kcin, kh, kw) = self.value(w).dims4()?;
        if cin != kcin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} has {cin} channels but kernel {:?} expects {kcin}",
                    self.shape(x),
                    self.shape(w)
                ),
            ));
        }
        let geom = check_geom("conv2d", b, cin, h, wd, cout, kh, kw, stride, pad)?;
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(&[b, cout, geom.out_h(), geom.out_w()], out)?;
        let ng = self.grad_of(&[x, w]);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, ng))
    }

    /// Per-channel convolution with `w: [C,1,kh,kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (b, c, h, wd) = self.value(x).dims4()?;
        let (kc, one, kh, kw) = self.value(w).dims4()?;
        if kc != c || one != 1 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!(
                    "input {:?} needs a [{c},1,kh,kw] kernel, got {:?}",
                    self.shape(x),
                    self.shape(w)
                ),
            ));
        }
        let geom = check_geom("depthwise_conv2d", b, c, h, wd, c, kh, kw, stride, pad)?;
        let out = kernels::depthwise_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(&[b, c, geom.out_h(), geom.out_w()], out)?;
        let ng = self.grad_of(&[x, w]);
        Ok(self.push(value, Op::Depthwise { x, w, geom }, ng))
    }

    /// Depthwise 3×3 (padding 1) followed by a pointwise 1×1 convolution.
    pub fn separable_conv3x3(
        &mut self,
        x: Var,
        depthwise: Var,
        pointwise: Var,
        stride: usize,
    ) -> Result<Var> {
        let (.., kh, kw) = self.value(depthwise).dims4()?;
        if (kh, kw) != (3, 3) {
            return Err(Error::shape(
                "separable_conv3x3",
                format!("depthwise kernel must be 3x3, got {:?}", self.shape(depthwise)),
            ));
        }
        let (_, _, ph, pw) = self.value(pointwise).dims4()?;
        if (ph, pw) != (1, 1) {
            return Err(Error::shape(
                "separable_conv3x3",
                format!("pointwise kernel must be 1x1, got {:?}", self.shape(pointwise)),
            ));
        }
        let d = self.depthwise_conv2d(x, depthwise, stride, 1)?;
        self.conv2d(d, pointwise, 1, 0)
    }

    /// Adds `b: [C]` along dimension 1 of a `[B,C,...]` tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.value(b).shape() != [xs[1]] {
            return Err(Error::shape(
                "channel_bias",
                format!("{:?} + bias {:?}", xs, self.shape(b)),
            ));
        }
        let (bn, c, s) = as_bkr(xs);
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        for n in 0..bn {
            for ch in 0..c {
                let bv = bias[ch];
                data[(n * c + ch) * s..][..s].iter_mut().for_each(|v| *v += bv);
            }
        }
        let ng = self.grad_of(&[x, b]);
        Ok(self.push(out, Op::ChannelBias { x, b }, ng))
    }

    /// Align-corners-false bilinear upsampling by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h == 0 || w == 0 || factor == 0 {
            return Err(Error::shape(
                "upsample_bilinear",
                format!("{:?} by factor {factor}", self.shape(x)),
            ));
        }
        let out = kernels::upsample_forward(b * c, h, w, factor, self.value(x).data());
        let value = Tensor::new(&[b, c, h * factor, w * factor], out)?;
        let ng = self.grad_of(&[x]);
        Ok(self.push(value, Op::Upsample { x, factor }, ng))
    }

    pub fn bilinear_upsample2x(&mut self, x: Var) -> Result<Var> {
        self.upsample_bilinear(x, 2)
    }

    /// `[B,C,H,W] -> [B,C]` by averaging each plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h * w == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let hw = h * w;
        let data = self.value(x).data();
        let out: Vec<f64> = (0..b * c)
            .map(|p| data[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[b, c], out)?;
        let ng = self.grad_of(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), ng))
    }

    /// `x: [B,D]`, `w: [K,D]`, `b: [K]` -> `x·wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1] && bs == [ws[0]];
        if !ok {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?}", xs, ws, bs),
            ));
        }
        let (n, d, k) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * k];
        for row in 0..n {
            out[row * k..(row + 1) * k].copy_from_slice(self.value(b).data());
        }
        kernels::gemm_nt(n, d, k, self.value(x).data(), self.value(w).data(), &mut out);
        let value = Tensor::new(&[n, k], out)?;
        let ng = self.grad_of(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, ng))
    }

    /// Softmax over dimension 1 of `[B,K,...]`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() < 2 {
            return Err(Error::shape(
                "softmax_channels",
                format!("need [B,K,...], got {:?}", self.shape(x)),
            ));
        }
        let value = softmax_dim1(self.value(x));
        let ng = self.grad_of(&[x]);
        Ok(self.push(value, Op::SoftmaxChannels(x), ng))
    }

    fn check_targets(&self, logits: Var, targets: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
        let shape = self.shape(logits);
        if shape.len() < 2 {
            return Err(Error::shape(op, format!("need [B,K,...] logits, got {:?}", shape)));
        }
        let (b, k, s) = as_bkr(shape);
        if targets.len() != b * s {
            return Err(Error::shape(
                op,
                format!("logits {:?} need {} targets, got {}", shape, b * s, targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k && t != IGNORE_INDEX) {
            return Err(Error::InvalidArgument(format!(
                "{op}: target {t} outside [0,{k}) and not the ignore index"
            )));
        }
        Ok((b, k, s))
    }

    fn push_ce(&mut self, logits: Var, targets: &[usize], weights: Vec<f64>, probs: Tensor) -> Result<Var> {
        let (_, k, s) = as_bkr(self.shape(logits));
        let p = probs.data();
        let mut loss = 0.0;
        for (pos, (&t, &wt)) in targets.iter().zip(&weights).enumerate() {
            if wt != 0.0 {
                let (n, i) = (pos / s, pos % s);
                loss -= wt * p[(n * k + t) * s + i].max(f64::MIN_POSITIVE).ln();
            }
        }
        let ng = self.grad_of(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights,
            },
            ng,
        ))
    }

    /// Mean over non-ignored positions of `-log softmax(logits)[target]`.
    /// `targets` is laid out `[B, ...]` matching the logits without the class
    /// dimension.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<ClassLoss> {
        self.check_targets(logits, targets, "softmax_cross_entropy")?;
        let counted = targets.iter().filter(|&&t| t != ignore_index).count();
        if counted == 0 {
            log::warn!("softmax_cross_entropy: every position is ignored; loss defined as 0");
        }
        let w = if counted > 0 { 1.0 / counted as f64 } else { 0.0 };
        let weights = targets
            .iter()
            .map(|&t| if t != ignore_index { w } else { 0.0 })
            .collect();
        let probs = softmax_dim1(self.value(logits));
        let loss = self.push_ce(logits, targets, weights, probs)?;
        Ok(ClassLoss { loss, counted })
    }

    /// Cross-entropy restricted to hard positions: those whose true-class
    /// probability is below `keep_threshold`, topped up with the next hardest
    /// until at least `min_kept` are used (or every valid position, if fewer).
    pub fn ohem_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
        keep_threshold: f64,
        min_kept: usize,
    ) -> Result<ClassLoss> {
        if min_kept == 0 {
            return Err(Error::InvalidArgument("ohem_cross_entropy: min_kept must be >= 1".into()));
        }
        let (_, k, s) = self.check_targets(logits, targets, "ohem_cross_entropy")?;
        let probs = softmax_dim1(self.value(logits));
        let p = probs.data();
        let mut valid: Vec<(f64, usize)> = targets
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != ignore_index)
            .map(|(pos, &t)| (p[((pos / s) * k + t) * s + pos % s], pos))
            .collect();
        valid.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let below = valid.iter().take_while(|(pt, _)| *pt < keep_threshold).count();
        let kept = below.max(min_kept).min(valid.len());
        let mut weights = vec![0.0; targets.len()];
        if kept > 0 {
            for &(_, pos) in &valid[..kept] {
                weights[pos] = 1.0 / kept as f64;
            }
        } else {
            log::warn!("ohem_cross_entropy: every position is ignored; loss defined as 0");
        }
        let loss = self.push_ce(logits, targets, weights, probs)?;
        Ok(ClassLoss { loss, counted: kept })
    }

    /// Squared difference summed over all non-batch dimensions and averaged
    /// over the batch (dimension 0).
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).expect_same_shape(self.value(b), "mse_loss")?;
        let batch = self.shape(a).first().copied().unwrap_or(1).max(1);
        let scale = 1.0 / batch as f64;
        let ss: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(Tensor::scalar(scale * ss), Op::SquaredError { a, b, scale }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Add every parameter gradient in `grads` into `store`.
    pub fn accumulate_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let send = |v: Var, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
        let val = |v: Var| &self.nodes[v.0].value;
        let mk = |shape: &[usize], data: Vec<f64>| Tensor::new(shape, data).expect("gradient shape");

        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Add(a, b) => {
                send(*a, gy.clone(), grads);
                send(*b, gy.clone(), grads);
            }
            Op::Mul(a, b) => {
                send(*a, gy.zip_map(val(*b), |g, y| g * y).unwrap(), grads);
                send(*b, gy.zip_map(val(*a), |g, x| g * x).unwrap(), grads);
            }
            Op::Scale(a, s) => send(*a, gy.map(|g| g * s), grads),
            Op::ScaleBy { x, s } => {
                let sv = val(*s).item();
                let ds: f64 = gy.data().iter().zip(val(*x).data()).map(|(g, v)| g * v).sum();
                send(*s, mk(&shape_of(*s), vec![ds]), grads);
                send(*x, gy.map(|g| g * sv), grads);
            }
            Op::Relu(a) => {
                send(*a, gy.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }).unwrap(), grads)
            }
            Op::Sum(a) => {
                let g = gy.item();
                send(*a, Tensor::full(&shape_of(*a), g), grads);
            }
            Op::Softmax1d(a) => {
                let y = node.value.data();
                let dot: f64 = y.iter().zip(gy.data()).map(|(p, g)| p * g).sum();
                let dx = y.iter().zip(gy.data()).map(|(p, g)| p * (g - dot)).collect();
                send(*a, mk(&shape_of(*a), dx), grads);
            }
            Op::Index(a, i) => {
                let mut g = Tensor::zeros(&shape_of(*a));
                g.data_mut()[*i] = gy.item();
                send(*a, g, grads);
            }
            Op::Conv2d { x, w, geom } => {
                let (wx, ww) = (self.needs_grad(*x), self.needs_grad(*w));
                let (dx, dw) =
                    kernels::conv2d_backward(geom, val(*x).data(), val(*w).data(), gy.data(), wx, ww);
                if wx {
                    send(*x, mk(&shape_of(*x), dx), grads);
                }
                if ww {
                    send(*w, mk(&shape_of(*w), dw), grads);
                }
            }
            Op::Depthwise { x, w, geom } => {
                let (wx, ww) = (self.needs_grad(*x), self.needs_grad(*w));
                let (dx, dw) =
                    kernels::depthwise_backward(geom, val(*x).data(), val(*w).data(), gy.data(), wx, ww);
                if wx {
                    send(*x, mk(&shape_of(*x), dx), grads);
                }
                if ww {
                    send(*w, mk(&shape_of(*w), dw), grads);
                }
            }
            Op::ChannelBias { x, b } => {
                let (bn, c, s) = as_bkr(gy.shape());
                let mut db = vec![0.0; c];
                for n in 0..bn {
                    for (ch, acc) in db.iter_mut().enumerate() {
                        *acc += gy.data()[(n * c + ch) * s..][..s].iter().sum::<f64>();
                    }
                }
                send(*b, mk(&[c], db), grads);
                send(*x, gy.clone(), grads);
            }
            Op::Upsample { x, factor } => {
                let xs = shape_of(*x);
                let dx = kernels::upsample_backward(xs[0] * xs[1], xs[2], xs[3], *factor, gy.data());
                send(*x, mk(&xs, dx), grads);
            }
            Op::GlobalAvgPool(x) => {
                let xs = shape_of(*x);
                let hw = xs[2] * xs[3];
                let dx = (0..xs.iter().product::<usize>())
                    .map(|i| gy.data()[i / hw] / hw as f64)
                    .collect();
                send(*x, mk(&xs, dx), grads);
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (shape_of(*x), shape_of(*w));
                let (n, d, k) = (xs[0], xs[1], ws[0]);
                if self.needs_grad(*x) {
                    let mut dx = vec![0.0; n * d];
                    kernels::gemm_nn(n, k, d, gy.data(), val(*w).data(), &mut dx);
                    send(*x, mk(&xs, dx), grads);
                }
                if self.needs_grad(*w) {
                    let mut dw = vec![0.0; k * d];
                    kernels::gemm_tn(k, n, d, gy.data(), val(*x).data(), &mut dw);
                    send(*w, mk(&ws, dw), grads);
                }
                let mut db = vec![0.0; k];
                for row in gy.data().chunks(k) {
                    db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                send(*b, mk(&[k], db), grads);
            }
            Op::SoftmaxChannels(x) => {
                let (bn, k, s) = as_bkr(gy.shape());
                let (y, g) = (node.value.data(), gy.data());
                let mut dx = vec![0.0; y.len()];
                for n in 0..bn {
                    for i in 0..s {
                        let at = |c: usize| (n * k + c) * s + i;
                        let dot: f64 = (0..k).map(|c| y[at(c)] * g[at(c)]).sum();
                        for c in 0..k {
                            dx[at(c)] = y[at(c)] * (g[at(c)] - dot);
                        }
                    }
                }
                send(*x, mk(gy.shape(), dx), grads);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weights,
            } => {
                let (_, k, s) = as_bkr(probs.shape());
                let scale = gy.item();
                let p = probs.data();
                let mut dx = vec![0.0; p.len()];
                for (pos, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                    if wt == 0.0 {
                        continue;
                    }
                    let (n, i) = (pos / s, pos % s);
                    for c in 0..k {
                        let at = (n * k + c) * s + i;
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        dx[at] = scale * wt * (p[at] - onehot);
                    }
                }
                send(*logits, mk(probs.shape(), dx), grads);
            }
            Op::SquaredError { a, b, scale } => {
                let c = 2.0 * scale * gy.item();
                let da = val(*a).zip_map(val(*b), |x, y| c * (x - y)).unwrap();
                send(*b, da.map(|v| -v), grads);
                send(*a, da, grads);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn check_geom(
    op: &'static str,
    batch: usize,
    in_channels: usize,
    in_h: usize,
    in_w: usize,
    out_channels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if stride == 0 || in_h + 2 * pad < kh || in_w + 2 * pad < kw {
        return Err(Error::shape(
            op,
            format!("{in_h}x{in_w} input, {kh}x{kw} kernel, stride {stride}, padding {pad}"),
        ));
    }
    Ok(ConvGeom {
        batch,
        in_channels,
        in_h,
        in_w,
        out_channels,
        kh,
        kw,
        stride,
        pad,
    })
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Softmax over dimension 1 of `[B,K,...]`, as a plain tensor function.
pub fn softmax_dim1(x: &Tensor) -> Tensor {
    let (bn, k, s) = as_bkr(x.shape());
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for n in 0..bn {
        for i in 0..s {
            let at = |c: usize| (n * k + c) * s + i;
            let m = (0..k).map(|c| d[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                let e = (d[at(c)] - m).exp();
                out[at(c)] = e;
                z += e;
            }
            for c in 0..k {
                out[at(c)] /= z;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}
