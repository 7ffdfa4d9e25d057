//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamId;
use crate::routing::{Mode, RoutingConfig, RoutingNet};
use crate::tape::{Tape, Var, IGNORE_INDEX};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Guard in the relative-error denominator, `|a - fd| / (|fd| + GUARD)`.
pub const REL_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Settings for one check. `analytic_scale` multiplies the analytic gradient
/// before comparison; anything other than 1 is a deliberately broken
/// gradient for negative controls.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Upper bound on perturbed elements per input; larger inputs are
    /// subsampled with a fixed stride.
    pub max_elems: usize,
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: FD_STEP,
            tolerance: REL_TOLERANCE,
            max_elems: usize::MAX,
            analytic_scale: 1.0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + REL_GUARD)
}

/// Compare the tape gradient of the scalar `f(inputs)` with central
/// differences for every (or every sampled) element of every input.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let zero = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*v).unwrap_or(&zero);
        let stride = n.div_ceil(opts.max_elems.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[j] * opts.analytic_scale;
            max_rel = max_rel.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        checked,
        passed: max_rel < opts.tolerance,
    })
}

/// Like [`check`], but perturbing selected parameters of a routing network
/// through a caller-built scalar.
pub fn check_net_params<F>(
    name: &str,
    net: &RoutingNet,
    params: &[ParamId],
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&RoutingNet, &mut Tape, Mode) -> Result<Var>,
{
    let eval = |n: &RoutingNet| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(n, &mut tape, Mode::Frozen)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let out = f(net, &mut tape, Mode::Train)?;
    let grads = tape.backward(out)?;
    let mut store = net.params().clone();
    store.zero_grad();
    tape.accumulate_grads(&grads, &mut store);

    let mut work = net.clone();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for &id in params {
        let n = net.params().value(id).len();
        let stride = n.div_ceil(opts.max_elems.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = net.params().value(id).data()[j];
            work.params_mut().value_mut(id).data_mut()[j] = orig + opts.step;
            let plus = eval(&work)?;
            work.params_mut().value_mut(id).data_mut()[j] = orig - opts.step;
            let minus = eval(&work)?;
            work.params_mut().value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = store.get(id).grad.data()[j] * opts.analytic_scale;
            max_rel = max_rel.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        checked,
        passed: max_rel < opts.tolerance,
    })
}

/// Reduce an arbitrary tensor to a scalar with fixed random weights so that
/// every output element carries a distinct, non-trivial gradient.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::rand_uniform(tape.shape(x), -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

/// Values bounded away from zero, so ReLU kinks and near-zero gradients do
/// not land within a finite-difference step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Random gate logits, so gate gradients are generic.
fn generic_gates(mut net: RoutingNet, rng: &mut ChaCha8Rng) -> RoutingNet {
    for cell in net.cells().cloned().collect::<Vec<_>>() {
        let v = Tensor::rand_uniform(&[2], -1.0, 1.0, rng);
        net.params_mut().value_mut(cell.op_gate).data_mut().copy_from_slice(v.data());
        let n = cell.directions.len();
        let v = Tensor::rand_uniform(&[n], -1.0, 1.0, rng);
        net.params_mut().value_mut(cell.path_gate).data_mut().copy_from_slice(v.data());
    }
    net
}

/// Every differentiable operation the routing network uses, plus a cell and
/// a whole network, each checked on small random inputs.
pub fn standard_suite(seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = away_from_zero(&[2, 2, 5, 5], &mut rng);
    let k = away_from_zero(&[3, 2, 3, 3], &mut rng);
    out.push(check("conv2d", &[x.clone(), k], |t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1)?;
        project(t, y, 1)
    }, opts)?);

    let dw = away_from_zero(&[2, 1, 3, 3], &mut rng);
    let pw = away_from_zero(&[3, 2, 1, 1], &mut rng);
    out.push(check("separable_conv3x3", &[x.clone(), dw, pw], |t, v| {
        let y = t.separable_conv3x3(v[0], v[1], v[2], 1)?;
        project(t, y, 2)
    }, opts)?);

    let small = away_from_zero(&[1, 2, 3, 2], &mut rng);
    out.push(check("bilinear_upsample", &[small], |t, v| {
        let y = t.bilinear_upsample2x(v[0])?;
        let z = t.upsample_bilinear(y, 2)?;
        project(t, z, 3)
    }, opts)?);

    out.push(check("global_avg_pool", std::slice::from_ref(&x), |t, v| {
        let y = t.global_avg_pool(v[0])?;
        project(t, y, 4)
    }, opts)?);

    let feats = away_from_zero(&[3, 4], &mut rng);
    let w = away_from_zero(&[5, 4], &mut rng);
    let b = away_from_zero(&[5], &mut rng);
    out.push(check("linear", &[feats, w, b], |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        project(t, y, 5)
    }, opts)?);

    let logits = away_from_zero(&[2, 3, 2, 2], &mut rng);
    let targets = vec![0, 2, IGNORE_INDEX, 1, 1, 0, 2, 2];
    out.push(check("softmax_cross_entropy", std::slice::from_ref(&logits), |t, v| {
        Ok(t.softmax_cross_entropy(v[0], &targets, IGNORE_INDEX)?.loss)
    }, opts)?);

    out.push(check("ohem_cross_entropy", std::slice::from_ref(&logits), |t, v| {
        Ok(t.ohem_cross_entropy(v[0], &targets, IGNORE_INDEX, 0.5, 2)?.loss)
    }, opts)?);

    let other = away_from_zero(&[2, 3, 2, 2], &mut rng);
    out.push(check("mse_loss", &[logits.clone(), other], |t, v| t.mse_loss(v[0], v[1]), opts)?);

    out.push(check("softmax_mse", std::slice::from_ref(&logits), |t, v| {
        let p = t.softmax_channels(v[0])?;
        let q = t.constant(Tensor::full(&[2, 3, 2, 2], 1.0 / 3.0));
        t.mse_loss(p, q)
    }, opts)?);

    let cfg = RoutingConfig {
        num_layers: 2,
        base_channels: 2,
        num_classes: 3,
        num_permutations: 4,
        ..RoutingConfig::default()
    };
    let net = generic_gates(RoutingNet::new(cfg.clone(), &mut rng)?, &mut rng);

    let cell = net.cell(0, 0).clone();
    let cell_in = away_from_zero(&[1, 2, 4, 4], &mut rng);
    out.push(check_net_params(
        "cell_gating",
        &net,
        &[cell.op_gate, cell.depthwise, cell.pointwise],
        |n, t, mode| {
            let b = n.bind(t, mode);
            let x = t.constant(cell_in.clone());
            let y = n.cell_forward(t, &b, n.cell(0, 0), x)?;
            project(t, y, 6)
        },
        opts,
    )?);

    let image = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let seg_targets: Vec<usize> = (0..32 * 32).map(|i| (i * 7 / 5) % 3).collect();
    let probe = [
        net.cell(0, 0).op_gate,
        net.cell(1, 1).path_gate,
        net.cell(0, 0).depthwise,
        net.cell(1, 0).pointwise,
        net.stem_layers()[1].depthwise,
        net.decoder_convs()[0],
        net.seg_head().0,
    ];
    let net_opts = GradCheckOptions {
        max_elems: opts.max_elems.min(6),
        ..opts
    };
    out.push(check_net_params("network_segmentation", &net, &probe, |n, t, mode| {
        let b = n.bind(t, mode);
        let x = t.constant(image.clone());
        let logits = n.segment(t, &b, x)?;
        Ok(t.softmax_cross_entropy(logits, &seg_targets, IGNORE_INDEX)?.loss)
    }, net_opts)?);

    // Three layers are the fewest that route signal to the deepest level.
    let deep = RoutingConfig { num_layers: 3, ..cfg };
    let net = generic_gates(RoutingNet::new(deep, &mut rng)?, &mut rng);
    let probe = [net.cell(2, 2).op_gate, net.pretext_head().0, net.cell(1, 1).down.unwrap()];
    out.push(check_net_params("network_pretext", &net, &probe, |n, t, mode| {
        let b = n.bind(t, mode);
        let x = t.constant(image.clone());
        let logits = n.pretext_forward(t, &b, x)?;
        Ok(t.softmax_cross_entropy(logits, &[2], IGNORE_INDEX)?.loss)
    }, net_opts)?);

    Ok(out)
}
