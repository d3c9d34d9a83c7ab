//! Slice-level compute kernels behind the graph operations.

/// Row-major `c = a · b + beta · c` with explicit element strides, so that
/// transposed operands need no copy. `c` is `m × n` and contiguous.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= (m - 1) * a_strides.0 + (k - 1) * a_strides.1 + 1);
    assert!(b.len() >= (k - 1) * b_strides.0 + (n - 1) * b_strides.1 + 1);
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 2-D convolution over one image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `C × H × W` image into a `(C·kh·kw) × (out_h·out_w)` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.out_h {
                    let iy = (oy + i) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox + j) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `col` back onto `dx`.
pub(crate) fn col2im_add(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.out_h {
                    let iy = (oy + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    out_channels: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let (kk, p) = (g.patch_len(), g.out_len());
    let mut out = vec![0.0; batch * out_channels * p];
    let mut col = vec![0.0; kk * p];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
        let y = &mut out[b * out_channels * p..(b + 1) * out_channels * p];
        if let Some(bias) = bias {
            for (o, bo) in bias.iter().enumerate() {
                y[o * p..(o + 1) * p].fill(*bo);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(out_channels, kk, p, w, (kk, 1), &col, (p, 1), beta, y);
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    out_channels: usize,
    dy: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let in_len = g.channels * g.height * g.width;
    let (kk, p) = (g.patch_len(), g.out_len());
    let mut dx = need.0.then(|| vec![0.0; x.len()]);
    let mut dw = need.1.then(|| vec![0.0; w.len()]);
    let mut db = need.2.then(|| vec![0.0; out_channels]);
    let mut col = vec![0.0; kk * p];
    for b in 0..batch {
        let dyb = &dy[b * out_channels * p..(b + 1) * out_channels * p];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
            // dW[o, r] += Σ_p dy[o, p] · col[r, p]
            gemm(out_channels, p, kk, dyb, (p, 1), &col, (1, p), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[r, p] = Σ_o W[o, r] · dy[o, p]
            gemm(kk, out_channels, p, w, (1, kk), dyb, (p, 1), 0.0, &mut col);
            col2im_add(&col, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
        if let Some(db) = db.as_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dyb[o * p..(o + 1) * p].iter().sum::<f64>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2×2 max-pooling with stride 2 over `planes` planes of `h × w`, flooring
/// odd sizes. Returns the output and the flat input index of each maximum
/// (first one wins on ties).
pub(crate) fn max_pool2x2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

/// Per-channel normalization of a `[B, C, S]` layout.
pub(crate) struct BnForward {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalizes with the supplied statistics, or the batch's own biased
/// statistics when `stats` is `None`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    stats: Option<(&[f64], &[f64])>,
) -> BnForward {
    let n = (batch * spatial) as f64;
    let (mean, var) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut s = 0.0;
                for b in 0..batch {
                    let off = (b * channels + c) * spatial;
                    s += x[off..off + spatial].iter().sum::<f64>();
                }
                let m = s / n;
                let mut ss = 0.0;
                for b in 0..batch {
                    let off = (b * channels + c) * spatial;
                    ss += x[off..off + spatial]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[c] = m;
                var[c] = ss / n;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * spatial;
            for s in off..off + spatial {
                xhat[s] = (x[s] - mean[c]) * inv_std[c];
                y[s] = gamma[c] * xhat[s] + beta[c];
            }
        }
    }
    BnForward {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

pub(crate) struct BnGrads {
    pub dx: Vec<f64>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
    training: bool,
) -> BnGrads {
    let n = (batch * spatial) as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * spatial;
            for s in off..off + spatial {
                dgamma[c] += dy[s] * xhat[s];
                dbeta[c] += dy[s];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * spatial;
            let k = gamma[c] * inv_std[c];
            for s in off..off + spatial {
                dx[s] = if training {
                    // dbeta = Σ dy and dgamma = Σ dy·x̂ are exactly the batch
                    // sums of the mean and variance paths.
                    k * (dy[s] - dbeta[c] / n - xhat[s] * dgamma[c] / n)
                } else {
                    k * dy[s]
                };
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}
