//! Multiply-accumulate accounting for a routing network.
//!
//! Only convolutions and the pretext linear layer cost anything; bias adds,
//! activations, resampling, pooling and feature sums are counted as free.
//! A cell is live when something active routes into it (the STEM feeds cell
//! (0, 0)). A live cell pays for its separable convolution when the conv gate
//! weight exceeds `tau`, and for each transition whose path weight exceeds
//! `tau`; that transition then makes its target live in the next column.

use super::{Direction, RoutingNet, NUM_LEVELS, OP_CONV, STEM_STRIDES};

fn conv_macs(cin: usize, cout: usize, k: usize, out_h: usize, out_w: usize) -> u64 {
    (cin * cout * k * k * out_h * out_w) as u64
}

fn depthwise_macs(c: usize, k: usize, out_h: usize, out_w: usize) -> u64 {
    (c * k * k * out_h * out_w) as u64
}

/// Multiply-accumulates for one `height × width` image.
pub fn count_flops(net: &RoutingNet, height: usize, width: usize, tau: f64) -> u64 {
    let cfg = net.config();
    let mut total = 0u64;

    let (mut h, mut w, mut cin) = (height, width, cfg.in_channels);
    for (cout, stride) in cfg.stem_channels().into_iter().zip(STEM_STRIDES) {
        h = (h + 2 - 3) / stride + 1;
        w = (w + 2 - 3) / stride + 1;
        total += depthwise_macs(cin, 3, h, w) + conv_macs(cin, cout, 1, h, w);
        cin = cout;
    }
    let (h0, w0) = (h, w);
    let dims = |level: usize| (cfg.level_channels(level), h0 >> level, w0 >> level);

    let mut live = [false; NUM_LEVELS];
    live[0] = true;
    for layer in 0..cfg.num_layers {
        let mut next = [false; NUM_LEVELS];
        for level in (0..NUM_LEVELS).filter(|&l| live[l]) {
            let cell = net.cell(layer, level);
            let (c, ch, cw) = dims(level);
            if net.op_weights(cell)[OP_CONV] > tau {
                total += depthwise_macs(c, 3, ch, cw) + conv_macs(c, c, 1, ch, cw);
            }
            for (&dir, &weight) in cell.directions.iter().zip(&net.path_weights(cell)) {
                if weight <= tau {
                    continue;
                }
                next[dir.target(level)] = true;
                total += match dir {
                    Direction::Keep => 0,
                    Direction::Down => conv_macs(c, 2 * c, 1, ch / 2, cw / 2),
                    Direction::Up => conv_macs(c, c / 2, 1, ch, cw),
                };
            }
        }
        live = next;
    }

    for level in (1..NUM_LEVELS).rev() {
        let (c, ch, cw) = dims(level);
        total += conv_macs(c, c / 2, 1, ch, cw);
    }
    total += conv_macs(cfg.level_channels(0), cfg.num_classes, 1, h0, w0);
    total += (cfg.level_channels(NUM_LEVELS - 1) * cfg.num_permutations) as u64;
    total
}
