//! Library operations against naive scalar-loop oracles on random instances.
//! Each trial function returns the largest deviation over its instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selene_core::metrics::ConfusionMatrix;
use selene_core::routing::{count_flops, Direction, RoutingConfig, RoutingNet, NUM_LEVELS, OP_CONV};
use selene_core::{Tape, Tensor, IGNORE_INDEX};

pub const INSTANCES: usize = 120;
pub const TOL: f64 = 1e-10;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Cross-correlation by six nested loops over output and kernel positions.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(x: &[f64], dims: [usize; 4], w: &[f64], wdims: [usize; 4], stride: usize, pad: usize, groups: usize) -> (Vec<f64>, usize, usize) {
    let [b, cin, h, wd] = dims;
    let [cout, cpg, kh, kw] = wdims;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let opg = cout / groups;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            let g = o / opg;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cpg {
                        let c = g * cpg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * cin + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * cpg + ci) * kh + ky) * kw + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((n * cout + o) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

pub fn conv2d_trials(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (b, cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let (h, w) = (rng.gen_range(k..8), rng.gen_range(k..8));
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
        let x = rand_tensor(&[b, cin, h, w], &mut rng);
        let kern = rand_tensor(&[cout, cin, k, k], &mut rng);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(kern.clone()));
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        let (expect, ho, wo) = conv_oracle(x.data(), [b, cin, h, w], kern.data(), [cout, cin, k, k], stride, pad, 1);
        assert_eq!(tape.shape(y), &[b, cout, ho, wo]);
        worst = worst.max(max_abs_diff(tape.value(y).data(), &expect));
    }
    worst
}

pub fn separable_conv_trials(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (b, c, cout) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let stride = rng.gen_range(1..3);
        let x = rand_tensor(&[b, c, h, w], &mut rng);
        let dw = rand_tensor(&[c, 1, 3, 3], &mut rng);
        let pw = rand_tensor(&[cout, c, 1, 1], &mut rng);
        let mut tape = Tape::new();
        let (xv, dv, pv) = (tape.constant(x.clone()), tape.constant(dw.clone()), tape.constant(pw.clone()));
        let y = tape.separable_conv3x3(xv, dv, pv, stride).unwrap();
        let (mid, ho, wo) = conv_oracle(x.data(), [b, c, h, w], dw.data(), [c, 1, 3, 3], stride, 1, c);
        let (expect, _, _) = conv_oracle(&mid, [b, c, ho, wo], pw.data(), [cout, c, 1, 1], 1, 0, 1);
        worst = worst.max(max_abs_diff(tape.value(y).data(), &expect));
    }
    worst
}

pub fn cross_entropy_trials(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (b, k) = (rng.gen_range(1..4), rng.gen_range(2..6));
        let spatial = if i % 2 == 0 { vec![] } else { vec![rng.gen_range(1..4), rng.gen_range(1..4)] };
        let positions: usize = spatial.iter().product();
        let mut shape = vec![b, k];
        shape.extend(&spatial);
        let logits = Tensor::rand_uniform(&shape, -6.0, 6.0, &mut rng);
        let n = b * positions.max(1);
        let mut targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        for t in targets.iter_mut() {
            if rng.gen_bool(0.2) {
                *t = IGNORE_INDEX;
            }
        }
        targets[0] = 0;

        let plane = positions.max(1);
        let (mut sum, mut count) = (0.0, 0usize);
        for s in 0..b {
            for p in 0..plane {
                let t = targets[s * plane + p];
                if t == IGNORE_INDEX {
                    continue;
                }
                let at = |c: usize| logits.data()[(s * k + c) * plane + p];
                let mut m = f64::NEG_INFINITY;
                for c in 0..k {
                    m = m.max(at(c));
                }
                let mut z = 0.0;
                for c in 0..k {
                    z += (at(c) - m).exp();
                }
                sum += m + z.ln() - at(t);
                count += 1;
            }
        }
        let expect = sum / count as f64;

        let mut tape = Tape::new();
        let lv = tape.constant(logits);
        let out = tape.softmax_cross_entropy(lv, &targets, IGNORE_INDEX).unwrap();
        assert_eq!(out.counted, count);
        worst = worst.max((tape.value(out.loss).item() - expect).abs());
    }
    worst
}

pub fn mse_trials(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 4);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5)];
        let a = rand_tensor(&shape, &mut rng);
        let b = rand_tensor(&shape, &mut rng);
        let mut sum = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            sum += (x - y) * (x - y);
        }
        let expect = sum / shape[0] as f64;
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let l = tape.mse_loss(av, bv).unwrap();
        worst = worst.max((tape.value(l).item() - expect).abs());
    }
    worst
}

pub fn miou_trials(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 5);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let k = rng.gen_range(2..7);
        let n = rng.gen_range(1..200);
        let truth: Vec<u8> = (0..n)
            .map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..k) as u8 })
            .collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();

        let mut ious = Vec::new();
        for c in 0..k as u8 {
            let (mut inter, mut union) = (0u64, 0u64);
            for (&t, &p) in truth.iter().zip(&pred) {
                if t == 255 {
                    continue;
                }
                if t == c && p == c {
                    inter += 1;
                }
                if t == c || p == c {
                    union += 1;
                }
            }
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let expect = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };

        let mut cm = ConfusionMatrix::new(k);
        cm.update(&pred, &truth).unwrap();
        worst = worst.max((cm.miou() - expect).abs());
    }
    worst
}

/// Counts one per multiply by walking every output element and tap.
fn macs_by_walking(cin: usize, cout: usize, k: usize, groups: usize, ho: usize, wo: usize) -> u64 {
    let mut n = 0u64;
    for o in 0..cout {
        let _ = o;
        for _ in 0..ho * wo {
            for _ in 0..cin / groups {
                for _ in 0..k * k {
                    n += 1;
                }
            }
        }
    }
    n
}

fn flops_oracle(net: &RoutingNet, h: usize, w: usize, tau: f64) -> u64 {
    let cfg = net.config();
    let mut n = 0;
    let mut size = (h, w);
    let mut cin = cfg.in_channels;
    let stem = [(cfg.stem_channels()[0], 2), (cfg.stem_channels()[1], 2), (cfg.stem_channels()[2], 1)];
    for (cout, stride) in stem {
        size = ((size.0 - 1) / stride + 1, (size.1 - 1) / stride + 1);
        n += macs_by_walking(cin, cin, 3, cin, size.0, size.1);
        n += macs_by_walking(cin, cout, 1, 1, size.0, size.1);
        cin = cout;
    }
    let level_size = |l: usize| (size.0 >> l, size.1 >> l);

    // Cells reachable from the STEM through transitions above threshold.
    let mut reach = vec![[false; NUM_LEVELS]; cfg.num_layers + 1];
    reach[0][0] = true;
    for layer in 0..cfg.num_layers {
        for level in 0..NUM_LEVELS {
            if !reach[layer][level] {
                continue;
            }
            let cell = net.cell(layer, level);
            let c = cfg.level_channels(level);
            let (ch, cw) = level_size(level);
            if net.op_weights(cell)[OP_CONV] > tau {
                n += macs_by_walking(c, c, 3, c, ch, cw) + macs_by_walking(c, c, 1, 1, ch, cw);
            }
            let weights = net.path_weights(cell);
            for (i, dir) in cell.directions.iter().enumerate() {
                if weights[i] <= tau {
                    continue;
                }
                match dir {
                    Direction::Up => {
                        reach[layer + 1][level - 1] = true;
                        n += macs_by_walking(c, c / 2, 1, 1, ch, cw);
                    }
                    Direction::Keep => reach[layer + 1][level] = true,
                    Direction::Down => {
                        reach[layer + 1][level + 1] = true;
                        n += macs_by_walking(c, 2 * c, 1, 1, ch / 2, cw / 2);
                    }
                }
            }
        }
    }
    for level in 1..NUM_LEVELS {
        let (ch, cw) = level_size(level);
        n += macs_by_walking(cfg.level_channels(level), cfg.level_channels(level - 1), 1, 1, ch, cw);
    }
    n += macs_by_walking(cfg.level_channels(0), cfg.num_classes, 1, 1, size.0, size.1);
    n += macs_by_walking(cfg.level_channels(NUM_LEVELS - 1), cfg.num_permutations, 1, 1, 1, 1);
    n
}

/// Number of instances whose count differs from the oracle.
pub fn flops_trials(seed: u64, instances: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 6);
    let mut mismatches = 0;
    for _ in 0..instances {
        let cfg = RoutingConfig {
            num_layers: rng.gen_range(1..4),
            base_channels: rng.gen_range(1..5),
            num_classes: rng.gen_range(2..5),
            num_permutations: rng.gen_range(1..12),
            ..RoutingConfig::default()
        };
        let layers = cfg.num_layers;
        let mut net = RoutingNet::new(cfg, &mut rng).unwrap();
        for layer in 0..layers {
            for level in 0..NUM_LEVELS {
                net.set_op_logits(layer, level, [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
                net.set_path_logits(
                    layer,
                    level,
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                );
            }
        }
        let side = 32 * rng.gen_range(1..3);
        let tau = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..0.9) };
        if count_flops(&net, side, side, tau) != flops_oracle(&net, side, side, tau) {
            mismatches += 1;
        }
    }
    mismatches
}
