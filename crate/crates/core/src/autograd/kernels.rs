//! Dense NCHW kernels shared by the graph ops and by image preprocessing.
//!
//! All kernels work on contiguous row-major `f64` buffers and have a fixed
//! summation order, so results are bit-reproducible run to run.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
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
        self.in_c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[C, H, W]` sample into a `[C*kh*kw, OH*OW]` patch matrix.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    let (h, w) = (g.in_h as isize, g.in_w as isize);
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back into `dx`.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    let (h, w) = (g.in_h as isize, g.in_w as isize);
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = W · im2col(x[n]) + b`, with `w` laid out `[O, C, kh, kw]`.
pub fn conv2d_forward(x: &[f64], n: usize, w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let l = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_len = g.in_c * g.in_h * g.in_w;
    let mut out = vec![0.0; n * g.out_c * l];
    let wm = ArrayView2::from_shape((g.out_c, k), w).expect("weight layout");
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * l] };
    for i in 0..n {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let patches = if g.is_pointwise() {
            ArrayView2::from_shape((k, l), xi).expect("pointwise layout")
        } else {
            im2col(xi, g, &mut cols);
            ArrayView2::from_shape((k, l), &cols[..]).expect("patch layout")
        };
        let oi = &mut out[i * g.out_c * l..(i + 1) * g.out_c * l];
        if let Some(b) = b {
            for (o, row) in oi.chunks_mut(l).enumerate() {
                row.fill(b[o]);
            }
        }
        let mut om = ArrayViewMut2::from_shape((g.out_c, l), oi).expect("output layout");
        general_mat_mul(1.0, &wm, &patches, if b.is_some() { 1.0 } else { 0.0 }, &mut om);
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

/// Gradients of [`conv2d_forward`]. `x` is required for `dw`, `w` for `dx`.
pub fn conv2d_backward(
    dy: &[f64],
    x: Option<&[f64]>,
    w: Option<&[f64]>,
    n: usize,
    g: &ConvGeom,
    want_db: bool,
) -> ConvGrads {
    let l = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_len = g.in_c * g.in_h * g.in_w;
    let mut dx = w.map(|_| vec![0.0; n * in_len]);
    let mut dw = x.map(|_| vec![0.0; g.out_c * k]);
    let mut db = want_db.then(|| vec![0.0; g.out_c]);
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * l }];
    let mut dcols = vec![0.0; if g.is_pointwise() || w.is_none() { 0 } else { k * l }];
    for i in 0..n {
        let dyi = ArrayView2::from_shape((g.out_c, l), &dy[i * g.out_c * l..(i + 1) * g.out_c * l])
            .expect("grad layout");
        if let Some(db) = db.as_mut() {
            for (o, row) in dyi.outer_iter().enumerate() {
                db[o] += row.sum();
            }
        }
        if let (Some(x), Some(dw)) = (x, dw.as_mut()) {
            let xi = &x[i * in_len..(i + 1) * in_len];
            let patches = if g.is_pointwise() {
                ArrayView2::from_shape((k, l), xi).expect("pointwise layout")
            } else {
                im2col(xi, g, &mut cols);
                ArrayView2::from_shape((k, l), &cols[..]).expect("patch layout")
            };
            let mut dwm = ArrayViewMut2::from_shape((g.out_c, k), &mut dw[..]).expect("dw layout");
            general_mat_mul(1.0, &dyi, &patches.t(), 1.0, &mut dwm);
        }
        if let (Some(w), Some(dx)) = (w, dx.as_mut()) {
            let wm = ArrayView2::from_shape((g.out_c, k), w).expect("weight layout");
            let dxi = &mut dx[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                let mut dxm = ArrayViewMut2::from_shape((k, l), dxi).expect("pointwise layout");
                general_mat_mul(1.0, &wm.t(), &dyi, 0.0, &mut dxm);
            } else {
                let mut dcm = ArrayViewMut2::from_shape((k, l), &mut dcols[..]).expect("dcols layout");
                general_mat_mul(1.0, &wm.t(), &dyi, 0.0, &mut dcm);
                col2im(&dcols, g, dxi);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Source index for reflect padding (edge pixel not repeated).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

pub fn pad_reflect_forward(x: &[f64], planes: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; planes * ph * pw];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ph * pw..(p + 1) * ph * pw];
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = reflect(xx as isize - pad as isize, w);
                dst[y * pw + xx] = src[sy * w + sx];
            }
        }
    }
    out
}

pub fn pad_reflect_backward(dy: &[f64], planes: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * ph * pw..(p + 1) * ph * pw];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = reflect(xx as isize - pad as isize, w);
                dst[sy * w + sx] += src[y * pw + xx];
            }
        }
    }
    dx
}

/// Per-output-coordinate interpolation taps `(i0, i1, w0, w1)` for bilinear
/// resampling with half-pixel centres (no corner alignment).
fn linear_taps(inp: usize, out: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

pub fn bilinear_forward(x: &[f64], planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let top = wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1];
                let bot = wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1];
                dst[oy * ow + ox] = wy0 * top + wy1 * bot;
            }
        }
    }
    out
}

pub fn bilinear_backward(dy: &[f64], planes: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return dy.to_vec();
    }
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += wy0 * wx0 * g;
                dst[y0 * w + x1] += wy0 * wx1 * g;
                dst[y1 * w + x0] += wy1 * wx0 * g;
                dst[y1 * w + x1] += wy1 * wx1 * g;
            }
        }
    }
    dx
}

#[derive(Debug, Clone, Copy)]
pub struct PoolGeom {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Max pooling; padded cells never win. Returns outputs and the flat input
/// index of each winner.
pub fn maxpool_forward(x: &[f64], planes: usize, g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0usize; planes * oh * ow];
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let i = base + iy as usize * g.w + ix as usize;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

/// Non-overlapping average pooling (`stride == k`, remainder rows/cols dropped).
pub fn avgpool_forward(x: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        s += src[(oy * k + ky) * w + ox * k + kx];
                    }
                }
                out[p * oh * ow + oy * ow + ox] = s * norm;
            }
        }
    }
    out
}

pub fn avgpool_backward(dy: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[p * oh * ow + oy * ow + ox] * norm;
                for ky in 0..k {
                    for kx in 0..k {
                        dst[(oy * k + ky) * w + ox * k + kx] += g;
                    }
                }
            }
        }
    }
    dx
}
