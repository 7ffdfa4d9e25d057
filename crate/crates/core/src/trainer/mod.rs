//! The training loop: per-epoch batch sampling from the labeled and
//! unlabeled sets, loss assembly `λ0·L_s + λ1·L_ssl + λ2·L_ssup`, heavy-ball
//! SGD under a polynomial schedule, and mean-teacher / co-teaching dispatch.

mod config;
mod log;
mod optim;
mod state;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{Method, Plan, Strategy, SupLoss, TrainConfig};
pub use log::{append_csv, read_csv, to_csv, IterRecord, CSV_HEADER};
pub use optim::{poly_lr, sgd_momentum_step, OptimizerState};
pub use state::{Peer, TrainState};

use crate::data::{augment, stack_images, stack_masks, Sample};
use crate::error::{Error, Result};
use crate::jigsaw::{make_jigsaw_segmentation_batch, make_pretext_batch, ssl_loss_on, PermutationSet};
use crate::metrics::evaluate;
use crate::routing::{Mode, RoutingConfig, RoutingNet};
use crate::semisup::{consistency, ct_pseudo_labels};
use crate::tape::{Gradients, Tape, Var, IGNORE_INDEX};
use crate::tensor::Tensor;

/// Independent random streams, one per purpose, re-derived at each epoch so
/// that resuming at an epoch boundary replays the same draws.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Labeled = 1,
    Unlabeled = 2,
    Jigsaw = 3,
    InitStudent = 4,
    InitPeer = 5,
    ViewNoise = 6,
}

pub fn rng_stream(seed: u64, epoch: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream as u64);
    rng
}

/// Cycles through a dataset in shuffled order, reshuffling when exhausted.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Sampler { order, pos: 0 }
    }

    fn draw(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Training, unlabeled and validation samples. Unlabeled masks are never
/// read.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub labeled: &'a [Sample],
    pub unlabeled: &'a [Sample],
    pub val: &'a [Sample],
}

impl TrainData<'_> {
    /// Iterations per epoch: the size of the larger set.
    pub fn iters_per_epoch(&self) -> usize {
        self.labeled.len().max(self.unlabeled.len())
    }
}

/// Loss terms on one tape; `None` means not evaluated.
#[derive(Debug, Default, Clone, Copy)]
pub struct LossTerms {
    pub sup: Option<Var>,
    pub ssl: Option<Var>,
    pub ssup: Option<Var>,
}

/// `λ0·sup + λ1·ssl + λ2·ssup` over the evaluated terms.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, lambdas: [f64; 3]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (term, lambda) in [terms.sup, terms.ssl, terms.ssup].into_iter().zip(lambdas) {
        if let Some(v) = term {
            let scaled = tape.scale(v, lambda);
            acc = Some(match acc {
                Some(a) => tape.add(a, scaled)?,
                None => scaled,
            });
        }
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

fn supervised(tape: &mut Tape, logits: Var, masks: &[usize], kind: SupLoss) -> Result<Var> {
    Ok(match kind {
        SupLoss::Ce => tape.softmax_cross_entropy(logits, masks, IGNORE_INDEX)?.loss,
        SupLoss::Ohem { keep_threshold } => {
            let valid = masks.iter().filter(|&&m| m != IGNORE_INDEX).count();
            tape.ohem_cross_entropy(logits, masks, IGNORE_INDEX, keep_threshold, (valid / 16).max(1))?
                .loss
        }
    })
}

/// Everything one step consumes, drawn up front so both co-teaching peers
/// see identical inputs.
struct StepInputs {
    images_l: Tensor,
    masks_l: Vec<usize>,
    images_u: Option<Tensor>,
    pretext: Vec<(Tensor, Vec<usize>)>,
    jigsaw_seg: Option<(Tensor, Vec<usize>)>,
    /// Separately perturbed copies for the teacher / second peer.
    other_view_l: Option<Tensor>,
    other_view_u: Option<Tensor>,
}

#[derive(Debug, Default, Clone, Copy)]
struct StepValues {
    total: f64,
    sup: Option<f64>,
    ssl: Option<f64>,
    ssup: Option<f64>,
}

fn add_values(a: StepValues, b: StepValues) -> StepValues {
    let sum = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (None, None) => None,
        _ => Some(x.unwrap_or(0.0) + y.unwrap_or(0.0)),
    };
    StepValues {
        total: a.total + b.total,
        sup: sum(a.sup, b.sup),
        ssl: sum(a.ssl, b.ssl),
        ssup: sum(a.ssup, b.ssup),
    }
}

fn read_values(tape: &Tape, terms: &LossTerms, total: Var) -> StepValues {
    let v = |t: Option<Var>| t.map(|x| tape.value(x).item());
    StepValues {
        total: tape.value(total).item(),
        sup: v(terms.sup),
        ssl: v(terms.ssl),
        ssup: v(terms.ssup),
    }
}

fn run_pair<A: Send, B: Send>(parallel: bool, fa: impl FnOnce() -> A + Send, fb: impl FnOnce() -> B + Send) -> (A, B) {
    if parallel {
        std::thread::scope(|s| {
            let hb = s.spawn(fb);
            let a = fa();
            (a, hb.join().expect("peer worker panicked"))
        })
    } else {
        (fa(), fb())
    }
}

fn noisy(images: &Tensor, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = Normal::new(0.0, std).expect("finite noise level");
    let mut out = images.clone();
    for v in out.data_mut() {
        *v += n.sample(rng);
    }
    out
}

/// First half of a step on one net: forward passes and the terms that do
/// not need the other net.
struct Side {
    tape: Tape,
    logits_l: Option<Var>,
    logits_u: Option<Var>,
    terms: LossTerms,
}

fn side_forward(
    net: &RoutingNet,
    cfg: &TrainConfig,
    plan: Plan,
    images_l: &Tensor,
    images_u: Option<&Tensor>,
    inputs: &StepInputs,
) -> Result<Side> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, Mode::Train);
    let need_l = cfg.lambda0 > 0.0 || plan.strategy.is_some();
    let logits_l = if need_l {
        let x = tape.constant(images_l.clone());
        Some(net.segment(&mut tape, &bound, x)?)
    } else {
        None
    };
    let logits_u = match (plan.strategy, images_u) {
        (Some(_), Some(u)) => {
            let x = tape.constant(u.clone());
            Some(net.segment(&mut tape, &bound, x)?)
        }
        _ => None,
    };
    let mut terms = LossTerms::default();
    if cfg.lambda0 > 0.0 {
        let mut sup = supervised(&mut tape, logits_l.expect("labeled logits"), &inputs.masks_l, cfg.sup_loss)?;
        if let Some((jx, jm)) = &inputs.jigsaw_seg {
            let x = tape.constant(jx.clone());
            let lj = net.segment(&mut tape, &bound, x)?;
            let extra = supervised(&mut tape, lj, jm, cfg.sup_loss)?;
            sup = tape.add(sup, extra)?;
        }
        terms.sup = Some(sup);
    }
    if plan.ssl {
        terms.ssl = Some(ssl_loss_on(&mut tape, net, &bound, &inputs.pretext)?);
    }
    Ok(Side {
        tape,
        logits_l,
        logits_u,
        terms,
    })
}

fn finish_side(mut side: Side, ssup: Option<Var>, lambdas: [f64; 3]) -> Result<(StepValues, Tape, Gradients)> {
    side.terms.ssup = ssup;
    let total = total_loss(&mut side.tape, &side.terms, lambdas)?;
    let values = read_values(&side.tape, &side.terms, total);
    if !values.total.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite training loss {}", values.total)));
    }
    let grads = side.tape.backward(total)?;
    Ok((values, side.tape, grads))
}

impl TrainState {
    fn step(&mut self, cfg: &TrainConfig, plan: Plan, inputs: &StepInputs, lr: f64) -> Result<StepValues> {
        let lambdas = [cfg.lambda0, cfg.lambda1, cfg.lambda2()];
        let values = match plan.strategy {
            None | Some(Strategy::MeanTeacher) => {
                let mut side = side_forward(&self.student, cfg, plan, &inputs.images_l, inputs.images_u.as_ref(), inputs)?;
                let ssup = match &self.teacher {
                    Some(teacher) if plan.strategy.is_some() => {
                        let view_l = inputs.other_view_l.as_ref().unwrap_or(&inputs.images_l);
                        let p_l = teacher.probs(view_l)?;
                        let mut c = consistency(&mut side.tape, side.logits_l.expect("labeled logits"), &p_l, cfg.consistency)?;
                        if let (Some(lu), Some(u)) = (side.logits_u, inputs.images_u.as_ref()) {
                            let view_u = inputs.other_view_u.as_ref().unwrap_or(u);
                            let cu = consistency(&mut side.tape, lu, &teacher.probs(view_u)?, cfg.consistency)?;
                            c = side.tape.add(c, cu)?;
                        }
                        Some(c)
                    }
                    _ => None,
                };
                let (values, tape, grads) = finish_side(side, ssup, lambdas)?;
                self.apply((&tape, &grads), None, lr, cfg.momentum)?;
                values
            }
            Some(Strategy::CoTeaching) => {
                let peer = self.peer.as_ref().ok_or_else(|| Error::Config("co-teaching state has no peer".into()))?;
                let view_l_b = inputs.other_view_l.as_ref().unwrap_or(&inputs.images_l);
                let view_u_b = inputs.other_view_u.as_ref().or(inputs.images_u.as_ref());
                let parallel = cfg.threads > 1;
                let (a, b) = run_pair(
                    parallel,
                    || side_forward(&self.student, cfg, plan, &inputs.images_l, inputs.images_u.as_ref(), inputs),
                    || side_forward(&peer.net, cfg, plan, view_l_b, view_u_b, inputs),
                );
                let (mut a, mut b) = (a?, b?);
                // Pseudo-label exchange: every target is a plain index.
                let labels = |side: &Side, v: Option<Var>| v.map(|x| ct_pseudo_labels(side.tape.value(x))).transpose();
                let (al, au) = (labels(&a, a.logits_l)?, labels(&a, a.logits_u)?);
                let (bl, bu) = (labels(&b, b.logits_l)?, labels(&b, b.logits_u)?);
                let cps = |side: &mut Side, l: &Option<Vec<usize>>, u: &Option<Vec<usize>>| -> Result<Var> {
                    let mut acc = side
                        .tape
                        .softmax_cross_entropy(side.logits_l.expect("labeled logits"), l.as_ref().unwrap(), IGNORE_INDEX)?
                        .loss;
                    if let (Some(lu), Some(t)) = (side.logits_u, u) {
                        let cu = side.tape.softmax_cross_entropy(lu, t, IGNORE_INDEX)?.loss;
                        acc = side.tape.add(acc, cu)?;
                    }
                    Ok(acc)
                };
                let ca = cps(&mut a, &bl, &bu)?;
                let cb = cps(&mut b, &al, &au)?;
                let (ra, rb) = run_pair(
                    parallel,
                    || finish_side(a, Some(ca), lambdas),
                    || finish_side(b, Some(cb), lambdas),
                );
                let ((va, ta, ga), (vb, tb, gb)) = (ra?, rb?);
                self.apply((&ta, &ga), Some((&tb, &gb)), lr, cfg.momentum)?;
                add_values(va, vb)
            }
        };
        if let (Some(teacher), Some(Strategy::MeanTeacher)) = (&mut self.teacher, plan.strategy) {
            teacher.update(&self.student)?;
        }
        Ok(values)
    }

    fn apply(&mut self, student_grads: (&Tape, &Gradients), peer_grads: Option<(&Tape, &Gradients)>, lr: f64, momentum: f64) -> Result<()> {
        apply_grads(&mut self.student, &mut self.opt, student_grads, lr, momentum)?;
        if let (Some(peer), Some(g)) = (&mut self.peer, peer_grads) {
            apply_grads(&mut peer.net, &mut peer.opt, g, lr, momentum)?;
        }
        Ok(())
    }
}

fn apply_grads(net: &mut RoutingNet, opt: &mut OptimizerState, (tape, grads): (&Tape, &Gradients), lr: f64, momentum: f64) -> Result<()> {
    let store = net.params_mut();
    store.zero_grad();
    tape.accumulate_grads(grads, store);
    sgd_momentum_step(store, opt, lr, momentum)?;
    store.zero_grad();
    Ok(())
}

fn prepare_batch(samples: &[Sample], idx: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    idx.iter()
        .map(|&i| {
            if cfg.augment {
                augment(&samples[i], cfg.crop, rng)
            } else {
                Ok(samples[i].clone())
            }
        })
        .collect()
}

/// One pass of `N = max(|D_l|, |D_u|)` iterations over `epoch`.
pub fn train_epoch(
    state: &mut TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    pset: Option<&PermutationSet>,
    epoch: usize,
) -> Result<Vec<IterRecord>> {
    let plan = cfg.plan();
    let n = data.iters_per_epoch();
    let total_steps = (cfg.epochs * n) as u64;
    let e = epoch as u64;
    let mut rng_l = rng_stream(cfg.seed, e, Stream::Labeled);
    let mut rng_u = rng_stream(cfg.seed, e, Stream::Unlabeled);
    let mut rng_j = rng_stream(cfg.seed, e, Stream::Jigsaw);
    let mut rng_v = rng_stream(cfg.seed, e, Stream::ViewNoise);
    let mut samp_l = Sampler::new(data.labeled.len(), &mut rng_l);
    let use_unlabeled = plan.uses_unlabeled() && !data.unlabeled.is_empty();
    let mut samp_u = use_unlabeled.then(|| Sampler::new(data.unlabeled.len(), &mut rng_u));

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let t = e * n as u64 + i as u64;
        let lr = poly_lr(t, total_steps, cfg.lr0, cfg.poly_power);
        let lab = prepare_batch(data.labeled, &samp_l.draw(cfg.batch_labeled, &mut rng_l), cfg, &mut rng_l)?;
        let lab_refs: Vec<&Sample> = lab.iter().collect();
        let images_l = stack_images(&lab_refs)?;
        let masks_l = stack_masks(&lab_refs);
        let images_u = match &mut samp_u {
            Some(s) => {
                let idx = s.draw(cfg.batch_unlabeled, &mut rng_u);
                let unl = prepare_batch(data.unlabeled, &idx, cfg, &mut rng_u)?;
                Some(stack_images(&unl.iter().collect::<Vec<_>>())?)
            }
            None => None,
        };
        let mut pretext = Vec::new();
        let mut jigsaw_seg = None;
        if let Some(pset) = pset {
            if plan.ssl {
                pretext.push(make_pretext_batch(&images_l, pset, &mut rng_j)?);
                if let Some(u) = &images_u {
                    pretext.push(make_pretext_batch(u, pset, &mut rng_j)?);
                }
            }
            if cfg.jigsaw_labels && cfg.lambda0 > 0.0 {
                jigsaw_seg = Some(make_jigsaw_segmentation_batch(&images_l, &masks_l, pset, &mut rng_j)?);
            }
        }
        let (mut images_l, mut images_u) = (images_l, images_u);
        let (mut other_view_l, mut other_view_u) = (None, None);
        if cfg.view_noise > 0.0 && plan.strategy.is_some() {
            other_view_l = Some(noisy(&images_l, cfg.view_noise, &mut rng_v));
            other_view_u = images_u.as_ref().map(|u| noisy(u, cfg.view_noise, &mut rng_v));
            images_l = noisy(&images_l, cfg.view_noise, &mut rng_v);
            images_u = images_u.map(|u| noisy(&u, cfg.view_noise, &mut rng_v));
        }
        let inputs = StepInputs {
            images_l,
            masks_l,
            images_u,
            pretext,
            jigsaw_seg,
            other_view_l,
            other_view_u,
        };
        let v = state.step(cfg, plan, &inputs, lr)?;
        records.push(IterRecord {
            iter: t,
            epoch,
            lr,
            loss_total: v.total,
            loss_sup: v.sup,
            loss_ssl: v.ssl,
            loss_ssup: v.ssup,
            miou_val: None,
        });
        if i % cfg.log_every == 0 || i + 1 == n {
            ::log::debug!("epoch {epoch} iter {t}: lr {lr:.6} loss {:.5}", v.total);
        }
    }
    state.epochs_done = epoch + 1;
    Ok(records)
}

/// Output of [`fit`]: the final state and every iteration's record.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: TrainState,
    pub history: Vec<IterRecord>,
}

pub const METRICS_FILE: &str = "metrics.csv";

pub fn checkpoint_file(epoch: usize) -> String {
    format!("checkpoint_epoch{epoch:03}.seln")
}

pub const LAST_CHECKPOINT: &str = "checkpoint_last.seln";

/// Run the remaining epochs. With `out_dir`, logged rows are appended to
/// `metrics.csv` and a checkpoint is written after every epoch. `resume`
/// continues a state saved at an epoch boundary.
pub fn fit(
    routing: &RoutingConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    out_dir: Option<&Path>,
    resume: Option<TrainState>,
) -> Result<FitResult> {
    cfg.validate()?;
    routing.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::InvalidArgument("the labeled set is empty".into()));
    }
    for s in data.labeled.iter().chain(data.val) {
        s.check_mask(routing.num_classes)?;
    }
    let plan = cfg.plan();
    if plan.strategy.is_some() && data.unlabeled.is_empty() {
        ::log::warn!("no unlabeled samples: the semi-supervised term uses the labeled batch only");
    }
    let mut state = match resume {
        Some(s) => {
            s.check_compatible(routing, plan)?;
            s
        }
        None => TrainState::new(routing, cfg)?,
    };
    let pset = if plan.ssl || cfg.jigsaw_labels {
        Some(PermutationSet::generate(routing.num_permutations, cfg.jigsaw_seed)?)
    } else {
        None
    };
    let n = data.iters_per_epoch();
    let mut history = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let mut records = train_epoch(&mut state, data, cfg, pset.as_ref(), epoch)?;
        if !data.val.is_empty() {
            let r = evaluate(&state.student, data.val)?;
            if let Some(last) = records.last_mut() {
                last.miou_val = Some(r.miou);
            }
            ::log::info!("epoch {epoch}: val mIoU {:.4}, pixel accuracy {:.4}", r.miou, r.pixel_accuracy);
        }
        if let Some(dir) = out_dir {
            let logged: Vec<IterRecord> = records
                .iter()
                .enumerate()
                .filter(|(i, _)| i % cfg.log_every == 0 || i + 1 == n)
                .map(|(_, r)| r.clone())
                .collect();
            append_csv(&dir.join(METRICS_FILE), &logged)?;
            let ck = state.to_checkpoint();
            ck.save(dir.join(checkpoint_file(epoch + 1)))?;
            ck.save(dir.join(LAST_CHECKPOINT))?;
        }
        history.extend(records);
    }
    Ok(FitResult { state, history })
}
