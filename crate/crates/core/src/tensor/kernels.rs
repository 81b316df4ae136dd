//! Slice-level forward and backward kernels behind the graph ops.
//!
//! Everything here works on dense row-major `N×C×H×W` buffers. Reductions
//! run in a fixed order so results are bit-reproducible.

use super::{matmul, Element, Layout};

const LANES: usize = 16;

/// Sum with sixteen independent accumulators combined in a fixed order:
/// vectorizes, and stays bit-reproducible.
pub(crate) fn sum<T: Element>(x: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = x.chunks_exact(LANES);
    let tail = chunks.remainder();
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += v;
        }
    }
    fold_lanes(acc) + tail.iter().copied().fold(T::zero(), |a, b| a + b)
}

/// Dot product with the same accumulation scheme as [`sum`].
pub(crate) fn dot<T: Element>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); LANES];
    let n = x.len() / LANES * LANES;
    for (cx, cy) in x[..n].chunks_exact(LANES).zip(y[..n].chunks_exact(LANES)) {
        for i in 0..LANES {
            acc[i] += cx[i] * cy[i];
        }
    }
    let tail = x[n..].iter().zip(&y[n..]).fold(T::zero(), |a, (&p, &q)| a + p * q);
    fold_lanes(acc) + tail
}

/// Sum of squared deviations from `m`.
fn sq_dev<T: Element>(x: &[T], m: T) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = x.chunks_exact(LANES);
    let tail = chunks.remainder();
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += (v - m) * (v - m);
        }
    }
    fold_lanes(acc) + tail.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m))
}

fn fold_lanes<T: Element>(mut acc: [T; LANES]) -> T {
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for i in 0..width {
            acc[i] = acc[i] + acc[i + width];
        }
    }
    acc[0]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Dims { n, c, h, w }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn image(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub input: Dims,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.input.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1 stride-1 unpadded conv reads the image directly as its
    /// column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` lies in
/// `0..w`, as a half-open range.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let (s, p, w) = (g.stride, g.pad, g.input.w);
    // ox·s + kj ≥ p  and  ox·s + kj < w + p
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    let hi = if w + p > kj { (w + p - kj).div_ceil(s).min(g.ow) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Element>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let h = g.input.h;
    let plane = g.col_cols();
    let mut row = 0;
    for c in 0..g.input.c {
        let src = &img[c * g.input.plane()..(c + 1) * g.input.plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = oy * g.stride + ki;
                    if iy < g.pad || iy - g.pad >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[(iy - g.pad) * g.input.w..(iy - g.pad + 1) * g.input.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let ix0 = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src_row[ix0..ix0 + hi - lo]);
                        } else {
                            for (k, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src_row[ix0 + k * g.stride];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let h = g.input.h;
    let plane = g.col_cols();
    let mut row = 0;
    for c in 0..g.input.c {
        let dst = &mut img[c * g.input.plane()..(c + 1) * g.input.plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = oy * g.stride + ki;
                    if iy < g.pad || iy - g.pad >= h || lo >= hi {
                        continue;
                    }
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let dst_row = &mut dst[(iy - g.pad) * g.input.w..(iy - g.pad + 1) * g.input.w];
                    let ix0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dst_row[ix0..ix0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (k, &v) in line.iter().enumerate() {
                            dst_row[ix0 + k * g.stride] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Stride-1 convs with this many output channels or fewer skip im2col and
/// run as shifted row axpys; a GEMM with one or two rows is mostly packing.
const DIRECT_MAX_OUT: usize = 2;

fn use_direct(g: &ConvGeom) -> bool {
    g.stride == 1 && g.out_c <= DIRECT_MAX_OUT
}

/// Calls `f(oy, iy, lo, hi, ix0)` for every output row of tap `(ki, kj)`
/// that reads a valid input row, with the valid output column range.
#[inline]
fn for_tap_rows(g: &ConvGeom, ki: usize, kj: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (lo, hi) = valid_cols(g, kj);
    if lo >= hi {
        return;
    }
    let ix0 = lo + kj - g.pad;
    for oy in 0..g.oh {
        let iy = oy + ki;
        if iy < g.pad || iy - g.pad >= g.input.h {
            continue;
        }
        f(oy, iy - g.pad, lo, hi, ix0);
    }
}

fn direct_forward<T: Element>(g: &ConvGeom, img: &[T], weight: &[T], dst: &mut [T]) {
    let (ip, op) = (g.input.plane(), g.col_cols());
    let (iw, ow) = (g.input.w, g.ow);
    for o in 0..g.out_c {
        let out = &mut dst[o * op..(o + 1) * op];
        for c in 0..g.input.c {
            let x = &img[c * ip..(c + 1) * ip];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = weight[((o * g.input.c + c) * g.kh + ki) * g.kw + kj];
                    for_tap_rows(g, ki, kj, |oy, iy, lo, hi, ix0| {
                        let src = &x[iy * iw + ix0..iy * iw + ix0 + hi - lo];
                        for (d, &v) in out[oy * ow + lo..oy * ow + hi].iter_mut().zip(src) {
                            *d += wv * v;
                        }
                    });
                }
            }
        }
    }
}

fn direct_backward<T: Element>(
    g: &ConvGeom,
    img: &[T],
    weight: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (ip, op) = (g.input.plane(), g.col_cols());
    let (iw, ow) = (g.input.w, g.ow);
    for o in 0..g.out_c {
        let dyo = &dy[o * op..(o + 1) * op];
        for c in 0..g.input.c {
            let x = &img[c * ip..(c + 1) * ip];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wi = ((o * g.input.c + c) * g.kh + ki) * g.kw + kj;
                    if let Some(dw) = dw.as_deref_mut() {
                        let mut acc = T::zero();
                        for_tap_rows(g, ki, kj, |oy, iy, lo, hi, ix0| {
                            let src = &x[iy * iw + ix0..iy * iw + ix0 + hi - lo];
                            acc += dot(&dyo[oy * ow + lo..oy * ow + hi], src);
                        });
                        dw[wi] += acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = weight[wi];
                        let dxc = &mut dx[c * ip..(c + 1) * ip];
                        for_tap_rows(g, ki, kj, |oy, iy, lo, hi, ix0| {
                            let dst = &mut dxc[iy * iw + ix0..iy * iw + ix0 + hi - lo];
                            for (d, &v) in dst.iter_mut().zip(&dyo[oy * ow + lo..oy * ow + hi]) {
                                *d += wv * v;
                            }
                        });
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let out_img = g.out_c * cols_n;
    let mut out = vec![T::zero(); g.input.n * out_img];
    let mut cols = if g.is_pointwise() || use_direct(g) {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols_n]
    };
    for n in 0..g.input.n {
        let img = &x[n * g.input.image()..(n + 1) * g.input.image()];
        let dst = &mut out[n * out_img..(n + 1) * out_img];
        if use_direct(g) {
            direct_forward(g, img, weight, dst);
        } else {
            let col_ref: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            matmul(Layout::Nn, g.out_c, rows, cols_n, weight, col_ref, dst, false);
        }
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(cols_n).enumerate() {
                let bo = b[o];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    out
}

/// Accumulates conv gradients into whichever of `dx`, `dw`, `db` are given.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let out_img = g.out_c * cols_n;
    let pointwise = g.is_pointwise();
    let direct = use_direct(g);
    let mut cols = vec![T::zero(); if pointwise || direct { 0 } else { rows * cols_n }];
    let mut dcols = vec![T::zero(); if direct { 0 } else { rows * cols_n }];
    for n in 0..g.input.n {
        let img = &x[n * g.input.image()..(n + 1) * g.input.image()];
        let dy_n = &dy[n * out_img..(n + 1) * out_img];
        if let Some(db) = db.as_deref_mut() {
            for (o, chunk) in dy_n.chunks(cols_n).enumerate() {
                db[o] += sum(chunk);
            }
        }
        if direct {
            let dx_n = dx.as_deref_mut().map(|d| &mut d[n * g.input.image()..(n + 1) * g.input.image()]);
            direct_backward(g, img, weight, dy_n, dx_n, dw.as_deref_mut());
            continue;
        }
        if let Some(dw) = dw.as_deref_mut() {
            let col_ref: &[T] = if pointwise {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            matmul(Layout::Nt, g.out_c, cols_n, rows, dy_n, col_ref, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dx_n = &mut dx[n * g.input.image()..(n + 1) * g.input.image()];
            if pointwise {
                matmul(Layout::Tn, rows, g.out_c, cols_n, weight, dy_n, dx_n, true);
            } else {
                matmul(Layout::Tn, rows, g.out_c, cols_n, weight, dy_n, &mut dcols, false);
                col2im(g, &dcols, dx_n);
            }
        }
    }
}

/// Windowed max pooling with stride = window and floor semantics. Returns
/// the pooled values and, per output, the flat input index of the winner
/// (first in row-major order on ties).
pub(crate) fn max_pool<T: Element>(d: Dims, x: &[T], window: usize) -> (Vec<T>, Vec<usize>, Dims) {
    let od = Dims {
        h: d.h / window,
        w: d.w / window,
        ..d
    };
    let mut out = Vec::with_capacity(od.n * od.image());
    let mut arg = Vec::with_capacity(od.n * od.image());
    for nc in 0..d.n * d.c {
        let base = nc * d.plane();
        for oy in 0..od.h {
            for ox in 0..od.w {
                let mut best = base + oy * window * d.w + ox * window;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = base + (oy * window + ky) * d.w + ox * window + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg, od)
}

pub(crate) fn avg_pool<T: Element>(d: Dims, x: &[T], window: usize) -> (Vec<T>, Dims) {
    let od = Dims {
        h: d.h / window,
        w: d.w / window,
        ..d
    };
    let scale = T::one() / T::from_usize(window * window).unwrap();
    let mut out = Vec::with_capacity(od.n * od.image());
    for nc in 0..d.n * d.c {
        let base = nc * d.plane();
        for oy in 0..od.h {
            for ox in 0..od.w {
                let mut s = T::zero();
                for ky in 0..window {
                    let row = base + (oy * window + ky) * d.w + ox * window;
                    for kx in 0..window {
                        s += x[row + kx];
                    }
                }
                out.push(s * scale);
            }
        }
    }
    (out, od)
}

pub(crate) fn avg_pool_backward<T: Element>(
    d: Dims,
    window: usize,
    dy: &[T],
    dx: &mut [T],
) {
    let (oh, ow) = (d.h / window, d.w / window);
    let scale = T::one() / T::from_usize(window * window).unwrap();
    for nc in 0..d.n * d.c {
        let base = nc * d.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(nc * oh + oy) * ow + ox] * scale;
                for ky in 0..window {
                    let row = base + (oy * window + ky) * d.w + ox * window;
                    for kx in 0..window {
                        dx[row + kx] += g;
                    }
                }
            }
        }
    }
}

pub(crate) fn global_max<T: Element>(d: Dims, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(d.n * d.c);
    let mut arg = Vec::with_capacity(d.n * d.c);
    for nc in 0..d.n * d.c {
        let base = nc * d.plane();
        let mut best = base;
        for idx in base..base + d.plane() {
            if x[idx] > x[best] {
                best = idx;
            }
        }
        out.push(x[best]);
        arg.push(best);
    }
    (out, arg)
}

pub(crate) fn global_avg<T: Element>(d: Dims, x: &[T]) -> Vec<T> {
    let count = T::from_usize(d.plane()).unwrap();
    x.chunks(d.plane())
        .map(|p| sum(p) / count)
        .collect()
}

/// Per-axis source taps for half-pixel bilinear sampling:
/// `src = (dst + 0.5)·in/out − 0.5`, clamped to `[0, in−1]`.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_forward<T: Element>(d: Dims, x: &[T], oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(d.h, oh);
    let tx = bilinear_taps(d.w, ow);
    let txt: Vec<(usize, usize, T)> = tx
        .iter()
        .map(|&(a, b, f)| (a, b, T::from_f64_lossy(f)))
        .collect();
    let mut out = Vec::with_capacity(d.n * d.c * oh * ow);
    for nc in 0..d.n * d.c {
        let plane = &x[nc * d.plane()..(nc + 1) * d.plane()];
        for &(y0, y1, fy) in &ty {
            let fy = T::from_f64_lossy(fy);
            let r0 = &plane[y0 * d.w..(y0 + 1) * d.w];
            let r1 = &plane[y1 * d.w..(y1 + 1) * d.w];
            for &(x0, x1, fx) in &txt {
                // lerp form keeps constant inputs exactly constant
                let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                out.push(top + fy * (bot - top));
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Element>(
    d: Dims,
    oh: usize,
    ow: usize,
    dy: &[T],
    dx: &mut [T],
) {
    let ty = bilinear_taps(d.h, oh);
    let tx = bilinear_taps(d.w, ow);
    for nc in 0..d.n * d.c {
        let plane = &mut dx[nc * d.plane()..(nc + 1) * d.plane()];
        let grad = &dy[nc * oh * ow..(nc + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let g = grad[oy * ow + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                plane[y0 * d.w + x0] += gt * (T::one() - fx);
                plane[y0 * d.w + x1] += gt * fx;
                plane[y1 * d.w + x0] += gb * (T::one() - fx);
                plane[y1 * d.w + x1] += gb * fx;
            }
        }
    }
}

/// Train-mode batch norm. Returns `(y, xhat, inv_std, mean, biased_var)`.
#[allow(clippy::type_complexity)]
pub(crate) fn batchnorm_train<T: Element>(
    d: Dims,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let count = T::from_usize(d.n * d.plane()).unwrap();
    let mut mean = vec![T::zero(); d.c];
    let mut var = vec![T::zero(); d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let p = &x[(n * d.c + c) * d.plane()..(n * d.c + c + 1) * d.plane()];
            mean[c] += sum(p);
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for n in 0..d.n {
        for c in 0..d.c {
            let p = &x[(n * d.c + c) * d.plane()..(n * d.c + c + 1) * d.plane()];
            let m = mean[c];
            var[c] += sq_dev(p, m);
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for n in 0..d.n {
        for c in 0..d.c {
            let range = (n * d.c + c) * d.plane()..(n * d.c + c + 1) * d.plane();
            let (m, s, ga, be) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for ((xh, yv), &xv) in xhat[range.clone()].iter_mut().zip(&mut y[range.clone()]).zip(&x[range]) {
                *xh = (xv - m) * s;
                *yv = ga * *xh + be;
            }
        }
    }
    (y, xhat, inv_std, mean, var)
}

pub(crate) fn batchnorm_train_backward<T: Element>(
    d: Dims,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let count = T::from_usize(d.n * d.plane()).unwrap();
    let mut sum_dy = vec![T::zero(); d.c];
    let mut sum_dy_xhat = vec![T::zero(); d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let range = (n * d.c + c) * d.plane()..(n * d.c + c + 1) * d.plane();
            sum_dy[c] += sum(&dy[range.clone()]);
            sum_dy_xhat[c] += dot(&dy[range.clone()], &xhat[range]);
        }
    }
    if let Some(dg) = dgamma {
        for c in 0..d.c {
            dg[c] += sum_dy_xhat[c];
        }
    }
    if let Some(db) = dbeta {
        for c in 0..d.c {
            db[c] += sum_dy[c];
        }
    }
    if let Some(dx) = dx {
        for n in 0..d.n {
            for c in 0..d.c {
                let k = gamma[c] * inv_std[c] / count;
                let (sd, sdx) = (sum_dy[c], sum_dy_xhat[c]);
                let range = (n * d.c + c) * d.plane()..(n * d.c + c + 1) * d.plane();
                for ((o, &g), &xh) in dx[range.clone()].iter_mut().zip(&dy[range.clone()]).zip(&xhat[range]) {
                    *o += k * (count * g - sd - xh * sdx);
                }
            }
        }
    }
}
