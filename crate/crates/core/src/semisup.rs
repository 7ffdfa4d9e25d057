//! Semi-supervised strategies: mean teacher (EMA shadow weights plus a
//! probability-consistency loss) and co-teaching (two peers supervising
//! each other with argmax pseudo-labels).

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::routing::{Mode, RoutingNet};
use crate::tape::{softmax_dim1, Tape, Var, IGNORE_INDEX};
use crate::tensor::Tensor;

/// `teacher ← alpha·teacher + (1 − alpha)·student`, elementwise.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("EMA coefficient {alpha} outside [0, 1]")));
    }
    teacher.check_layout(student)?;
    let beta = 1.0 - alpha;
    for (t, (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (tv, sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = alpha * *tv + beta * sv;
        }
    }
    Ok(())
}

/// How the consistency error is reduced over the spatial extent of one
/// image. The class dimension is always summed and the batch averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Summed over pixels.
    Sum,
    /// Averaged over pixels.
    PixelMean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "pixel_mean" => Ok(Reduction::PixelMean),
            _ => Err(Error::Config(format!("unknown consistency reduction {s:?} (sum | pixel_mean)"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::PixelMean => "pixel_mean",
        })
    }
}

/// A shadow copy of the student updated only by EMA. It never enters a
/// tape as a trainable parameter.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub net: RoutingNet,
    pub alpha: f64,
}

impl TeacherState {
    pub fn from_student(student: &RoutingNet, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("EMA coefficient {alpha} outside [0, 1]")));
        }
        Ok(TeacherState {
            net: student.clone(),
            alpha,
        })
    }

    pub fn update(&mut self, student: &RoutingNet) -> Result<()> {
        ema_update(self.net.params_mut(), student.params(), self.alpha)
    }

    /// Teacher class probabilities `[B,K,H,W]`, as plain values.
    pub fn probs(&self, images: &Tensor) -> Result<Tensor> {
        Ok(softmax_dim1(&self.net.predict(images)?))
    }
}

/// Squared error between the student's softmax and fixed teacher
/// probabilities; gradients reach the student only.
pub fn consistency(tape: &mut Tape, student_logits: Var, teacher_probs: &Tensor, reduction: Reduction) -> Result<Var> {
    let p_s = tape.softmax_channels(student_logits)?;
    let p_t = tape.constant(teacher_probs.clone());
    let loss = tape.mse_loss(p_s, p_t)?;
    Ok(match reduction {
        Reduction::Sum => loss,
        Reduction::PixelMean => {
            let pixels: usize = teacher_probs.shape().get(2..).map_or(1, |s| s.iter().product());
            tape.scale(loss, 1.0 / pixels.max(1) as f64)
        }
    })
}

fn non_empty(batch: Option<&Tensor>) -> Option<&Tensor> {
    batch.filter(|t| t.shape().first().copied().unwrap_or(0) > 0)
}

fn add_opt(tape: &mut Tape, acc: Option<Var>, term: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => tape.add(a, term)?,
        None => term,
    }))
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Mean-teacher unsupervised loss: consistency on the labeled batch plus
/// consistency on the unlabeled batch. Either batch may be absent or empty.
pub fn mt_unsup_loss(
    tape: &mut Tape,
    student: &RoutingNet,
    teacher: &TeacherState,
    labeled: Option<&Tensor>,
    unlabeled: Option<&Tensor>,
    reduction: Reduction,
) -> Result<Var> {
    let bound = student.bind(tape, Mode::Train);
    let mut total = None;
    for images in [labeled, unlabeled].into_iter().filter_map(non_empty) {
        let x = tape.constant(images.clone());
        let logits = student.segment(tape, &bound, x)?;
        let term = consistency(tape, logits, &teacher.probs(images)?, reduction)?;
        total = add_opt(tape, total, term)?;
    }
    Ok(total.unwrap_or_else(|| zero(tape)))
}

/// Student cross-entropy against ground truth, pixel-averaged.
pub fn mt_sup_loss(tape: &mut Tape, student_logits: Var, masks: &[usize]) -> Result<Var> {
    Ok(tape.softmax_cross_entropy(student_logits, masks, IGNORE_INDEX)?.loss)
}

/// Teacher cross-entropy against ground truth; a logged metric only.
pub fn teacher_sup_loss(teacher: &TeacherState, images: &Tensor, masks: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = tape.constant(teacher.net.predict(images)?);
    let loss = tape.softmax_cross_entropy(logits, masks, IGNORE_INDEX)?.loss;
    Ok(tape.value(loss).item())
}

/// Per-pixel argmax over the class dimension of `[B,K,...]`, lowest index on
/// ties. Returned as plain indices so no gradient can reach the source.
pub fn ct_pseudo_labels(probs: &Tensor) -> Result<Vec<usize>> {
    let shape = probs.shape();
    if shape.len() < 2 || shape[1] == 0 {
        return Err(Error::shape("ct_pseudo_labels", format!("expected [B,K,...], got {shape:?}")));
    }
    let (b, k) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let p = probs.data();
    let mut out = Vec::with_capacity(b * s);
    for n in 0..b {
        for pos in 0..s {
            let mut best = 0;
            for c in 1..k {
                if p[(n * k + c) * s + pos] > p[(n * k + best) * s + pos] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Cross pseudo supervision for one batch seen by both peers. Each side's
/// logits are trained toward the other side's argmax; returns the loss on
/// each tape.
pub fn cps_pair(tape_a: &mut Tape, logits_a: Var, tape_b: &mut Tape, logits_b: Var) -> Result<(Var, Var)> {
    // argmax of softmax equals argmax of logits, ties included.
    let from_a = ct_pseudo_labels(tape_a.value(logits_a))?;
    let from_b = ct_pseudo_labels(tape_b.value(logits_b))?;
    let la = tape_a.softmax_cross_entropy(logits_a, &from_b, IGNORE_INDEX)?.loss;
    let lb = tape_b.softmax_cross_entropy(logits_b, &from_a, IGNORE_INDEX)?.loss;
    Ok((la, lb))
}

/// Two peers of identical configuration trained side by side.
#[derive(Debug, Clone)]
pub struct PeerPair {
    pub a: RoutingNet,
    pub b: RoutingNet,
}

impl PeerPair {
    pub fn new(a: RoutingNet, b: RoutingNet) -> Result<Self> {
        if a.config() != b.config() {
            return Err(Error::Config("co-teaching peers must share one routing configuration".into()));
        }
        Ok(PeerPair { a, b })
    }
}

/// Losses of a co-teaching objective split by peer: `a` depends only on
/// net a's weights and lives on `tape_a`, likewise for b.
#[derive(Debug)]
pub struct PeerLosses {
    pub tape_a: Tape,
    pub tape_b: Tape,
    pub a: Var,
    pub b: Var,
}

impl PeerLosses {
    pub fn value(&self) -> f64 {
        self.tape_a.value(self.a).item() + self.tape_b.value(self.b).item()
    }
}

/// Cross pseudo supervision on the unlabeled batch plus the same
/// construction on the labeled images (their ground truth unused).
pub fn ct_unsup_loss(pair: &PeerPair, labeled: Option<&Tensor>, unlabeled: Option<&Tensor>) -> Result<PeerLosses> {
    let (mut ta, mut tb) = (Tape::new(), Tape::new());
    let ba = pair.a.bind(&mut ta, Mode::Train);
    let bb = pair.b.bind(&mut tb, Mode::Train);
    let (mut sa, mut sb) = (None, None);
    for images in [labeled, unlabeled].into_iter().filter_map(non_empty) {
        let xa = ta.constant(images.clone());
        let la = pair.a.segment(&mut ta, &ba, xa)?;
        let xb = tb.constant(images.clone());
        let lb = pair.b.segment(&mut tb, &bb, xb)?;
        let (ca, cb) = cps_pair(&mut ta, la, &mut tb, lb)?;
        sa = add_opt(&mut ta, sa, ca)?;
        sb = add_opt(&mut tb, sb, cb)?;
    }
    let a = sa.unwrap_or_else(|| zero(&mut ta));
    let b = sb.unwrap_or_else(|| zero(&mut tb));
    Ok(PeerLosses { tape_a: ta, tape_b: tb, a, b })
}

/// Ground-truth cross-entropy of both peers.
pub fn ct_sup_loss(pair: &PeerPair, images: &Tensor, masks: &[usize]) -> Result<PeerLosses> {
    let side = |net: &RoutingNet| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, Mode::Train);
        let x = tape.constant(images.clone());
        let logits = net.segment(&mut tape, &bound, x)?;
        let loss = tape.softmax_cross_entropy(logits, masks, IGNORE_INDEX)?.loss;
        Ok((tape, loss))
    };
    let (tape_a, a) = side(&pair.a)?;
    let (tape_b, b) = side(&pair.b)?;
    Ok(PeerLosses { tape_a, tape_b, a, b })
}
