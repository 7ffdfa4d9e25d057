//! Raw slice kernels behind the tape operations.
//!
//! Everything here works on flat row-major buffers with explicit extents and
//! knows nothing about graphs. Forward and backward kernels come in pairs.

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if it
    /// lands inside the unpadded input.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Unfold one image `[Cin,H,W]` into columns `[Cin·kh·kw, Ho·Wo]`.
fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let npos = ho * wo;
    for c in 0..g.in_channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..ho {
                    let iy = g.src(oy, ky, g.in_h);
                    for ox in 0..wo {
                        dst[oy * wo + ox] = match (iy, g.src(ox, kx, g.in_w)) {
                            (Some(iy), Some(ix)) => plane[iy * g.in_w + ix],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
fn col2im(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let npos = ho * wo;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..ho {
                    let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                    for ox in 0..wo {
                        if let Some(ix) = g.src(ox, kx, g.in_w) {
                            plane[iy * g.in_w + ix] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

/// Cross-correlation via im2col + GEMM. A 1×1/stride-1 kernel skips the unfold.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let npos = ho * wo;
    let in_sz = g.in_channels * g.in_h * g.in_w;
    let out_sz = g.out_channels * npos;
    let mut out = vec![0.0; g.batch * out_sz];
    let mut cols = vec![0.0; if is_pointwise(g) { 0 } else { g.patch_len() * npos }];
    for b in 0..g.batch {
        let image = &x[b * in_sz..(b + 1) * in_sz];
        let dst = &mut out[b * out_sz..(b + 1) * out_sz];
        if is_pointwise(g) {
            gemm_nn(g.out_channels, g.in_channels, npos, w, image, dst);
        } else {
            im2col(g, image, &mut cols);
            gemm_nn(g.out_channels, g.patch_len(), npos, w, &cols, dst);
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input and kernel.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Vec<f64>, Vec<f64>) {
    let npos = g.out_h() * g.out_w();
    let in_sz = g.in_channels * g.in_h * g.in_w;
    let out_sz = g.out_channels * npos;
    let pk = g.patch_len();
    let mut dx = vec![0.0; if want_dx { x.len() } else { 0 }];
    let mut dw = vec![0.0; if want_dw { w.len() } else { 0 }];
    let pointwise = is_pointwise(g);
    let mut cols = vec![0.0; if pointwise { 0 } else { pk * npos }];
    let mut dcols = vec![0.0; if pointwise || !want_dx { 0 } else { pk * npos }];
    for b in 0..g.batch {
        let image = &x[b * in_sz..(b + 1) * in_sz];
        let gy = &dy[b * out_sz..(b + 1) * out_sz];
        if pointwise {
            if want_dw {
                gemm_nt(g.out_channels, npos, g.in_channels, gy, image, &mut dw);
            }
            if want_dx {
                gemm_tn(g.in_channels, g.out_channels, npos, w, gy, &mut dx[b * in_sz..(b + 1) * in_sz]);
            }
            continue;
        }
        if want_dw {
            im2col(g, image, &mut cols);
            gemm_nt(g.out_channels, npos, pk, gy, &cols, &mut dw);
        }
        if want_dx {
            dcols.fill(0.0);
            gemm_tn(pk, g.out_channels, npos, w, gy, &mut dcols);
            col2im(g, &dcols, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (dx, dw)
}

/// Reference cross-correlation: six nested loops, no unfolding.
pub fn conv2d_direct(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.batch * g.out_channels * ho * wo];
    for b in 0..g.batch {
        for co in 0..g.out_channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..g.in_channels {
                        for ky in 0..g.kh {
                            let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.src(ox, kx, g.in_w) else { continue };
                                acc += x[((b * g.in_channels + ci) * g.in_h + iy) * g.in_w + ix]
                                    * w[((co * g.in_channels + ci) * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                    out[((b * g.out_channels + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Per-channel convolution with a `[C,1,kh,kw]` kernel. `g.out_channels`
/// must equal `g.in_channels`.
pub fn depthwise_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let c = g.in_channels;
    let mut out = vec![0.0; g.batch * c * ho * wo];
    for b in 0..g.batch {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            let k = &w[ch * g.kh * g.kw..][..g.kh * g.kw];
            let dst = &mut out[(b * c + ch) * ho * wo..][..ho * wo];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let kv = k[ky * g.kw + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                        let row = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            if let Some(ix) = g.src(ox, kx, g.in_w) {
                                *d += kv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let c = g.in_channels;
    let mut dx = vec![0.0; if want_dx { x.len() } else { 0 }];
    let mut dw = vec![0.0; if want_dw { w.len() } else { 0 }];
    let hw = g.in_h * g.in_w;
    for b in 0..g.batch {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let gy = &dy[(b * c + ch) * ho * wo..][..ho * wo];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = (ch * g.kh + ky) * g.kw + kx;
                    let kv = w[widx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                        for ox in 0..wo {
                            let Some(ix) = g.src(ox, kx, g.in_w) else { continue };
                            let gv = gy[oy * wo + ox];
                            let xi = base + iy * g.in_w + ix;
                            acc += gv * x[xi];
                            if want_dx {
                                dx[xi] += gv * kv;
                            }
                        }
                    }
                    if want_dw {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Source taps for one axis of align-corners-false bilinear resampling.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn bilinear_taps(in_len: usize, factor: usize) -> Vec<Tap> {
    (0..in_len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            Tap {
                i0,
                i1,
                w1: src - i0 as f64,
            }
        })
        .collect()
}

/// Bilinear upsampling of `planes` independent `h×w` planes by an integer factor.
pub fn upsample_forward(planes: usize, h: usize, w: usize, factor: usize, x: &[f64]) -> Vec<f64> {
    let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let (r0, r1) = (&src[a.i0 * w..][..w], &src[a.i1 * w..][..w]);
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.i0] * (1.0 - b.w1) + r0[b.i1] * b.w1;
                let bot = r1[b.i0] * (1.0 - b.w1) + r1[b.i1] * b.w1;
                dst[oy * ow + ox] = top * (1.0 - a.w1) + bot * a.w1;
            }
        }
    }
    out
}

pub fn upsample_backward(planes: usize, h: usize, w: usize, factor: usize, dy: &[f64]) -> Vec<f64> {
    let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gy = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = gy[oy * ow + ox];
                let (gt, gb) = (g * (1.0 - a.w1), g * a.w1);
                dst[a.i0 * w + b.i0] += gt * (1.0 - b.w1);
                dst[a.i0 * w + b.i1] += gt * b.w1;
                dst[a.i1 * w + b.i0] += gb * (1.0 - b.w1);
                dst[a.i1 * w + b.i1] += gb * b.w1;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn im2col_path_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, stride, pad) in &[(1, 1, 0), (1, 2, 0), (3, 1, 1), (3, 2, 1), (3, 1, 0)] {
            let g = ConvGeom {
                batch: 2,
                in_channels: 3,
                in_h: 6,
                in_w: 5,
                out_channels: 4,
                kh: k,
                kw: k,
                stride,
                pad,
            };
            let x = rand_vec(2 * 3 * 6 * 5, &mut rng);
            let w = rand_vec(4 * 3 * k * k, &mut rng);
            let fast = conv2d_forward(&g, &x, &w);
            let slow = conv2d_direct(&g, &x, &w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn gemm_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (3, 4, 5);
        let a = rand_vec(m * k, &mut rng);
        let b = rand_vec(k * n, &mut rng);
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        // bᵀ laid out n×k
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c2);
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let mut c3 = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c3);
        for i in 0..m * n {
            assert!((c[i] - c2[i]).abs() < 1e-12);
            assert!((c[i] - c3[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_row_hand_values() {
        let out = upsample_forward(1, 1, 2, 2, &[0.0, 1.0]);
        // height 1 -> 2 rows, both equal
        assert_eq!(&out[..4], &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(&out[4..], &[0.0, 0.25, 0.75, 1.0]);
    }
}
