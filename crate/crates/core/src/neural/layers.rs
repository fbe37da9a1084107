//! Channel-first f64 tensors and the forward/backward rules of each layer.

use ndarray::{Array3, ArrayView3};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// `c x h x w`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn zeros_like(t: &Tensor) -> Self {
        Self::zeros(t.c, t.h, t.w)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    /// From `h x w x c` (cube layout).
    pub fn from_hwc(a: ArrayView3<'_, f64>) -> Self {
        let (h, w, c) = a.dim();
        let mut t = Self::zeros(c, h, w);
        for ((y, x, k), v) in a.indexed_iter() {
            t.data[(k * h + y) * w + x] = *v;
        }
        t
    }

    pub fn to_hwc(&self) -> Array3<f64> {
        Array3::from_shape_fn((self.h, self.w, self.c), |(y, x, k)| self.data[(k * self.h + y) * self.w + x])
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Square convolution with odd kernel `k`, zero padding `k / 2`, stride 1.
/// Weights are `[out][in][k][k]`.
pub(crate) struct Conv<'a> {
    pub weight: &'a [f64],
    pub bias: Option<&'a [f64]>,
    pub out_c: usize,
    pub k: usize,
}

impl Conv<'_> {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (k, pad) = (self.k, (self.k / 2) as isize);
        let (h, w) = (x.h, x.w);
        let mut out = Tensor::zeros(self.out_c, h, w);
        for o in 0..self.out_c {
            let dst = out.channel_mut(o);
            dst.fill(self.bias.map_or(0.0, |b| b[o]));
            for i in 0..x.c {
                let src = x.channel(i);
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let wv = self.weight[((o * x.c + i) * k + ky) * k + kx];
                        let (x0, x1) = valid_range(w, dx);
                        for y in valid_rows(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut dst[y * w..(y + 1) * w];
                            let srow = &src[sy * w..(sy + 1) * w];
                            for xx in x0..x1 {
                                drow[xx] += wv * srow[(xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates into `dw`, `db`; returns the input gradient.
    pub fn backward(&self, x: &Tensor, dout: &Tensor, dw: &mut [f64], db: Option<&mut [f64]>) -> Tensor {
        let (k, pad) = (self.k, (self.k / 2) as isize);
        let (h, w) = (x.h, x.w);
        let mut dx_t = Tensor::zeros_like(x);
        if let Some(db) = db {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dout.channel(o).iter().sum::<f64>();
            }
        }
        for o in 0..self.out_c {
            let g = dout.channel(o);
            for i in 0..x.c {
                let src = x.channel(i);
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let widx = ((o * x.c + i) * k + ky) * k + kx;
                        let wv = self.weight[widx];
                        let (x0, x1) = valid_range(w, dx);
                        let mut acc = 0.0;
                        let dsrc = dx_t.channel_mut(i);
                        for y in valid_rows(h, dy) {
                            let sy = (y as isize + dy) as usize;
                            let grow = &g[y * w..(y + 1) * w];
                            let srow = &src[sy * w..(sy + 1) * w];
                            let drow = &mut dsrc[sy * w..(sy + 1) * w];
                            for xx in x0..x1 {
                                let sx = (xx as isize + dx) as usize;
                                acc += grow[xx] * srow[sx];
                                drow[sx] += wv * grow[xx];
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
        dx_t
    }
}

fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

fn valid_rows(n: usize, d: isize) -> std::ops::Range<usize> {
    let (lo, hi) = valid_range(n, d);
    lo..hi
}

/// Standardizes each channel over its spatial plane. Returns the output and
/// the per-channel inverse standard deviation.
pub(crate) fn standardize(x: &Tensor) -> (Tensor, Vec<f64>) {
    let n = x.plane() as f64;
    let mut y = Tensor::zeros_like(x);
    let mut inv = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let src = x.channel(c);
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        for (d, v) in y.channel_mut(c).iter_mut().zip(src) {
            *d = (v - mean) * s;
        }
        inv.push(s);
    }
    (y, inv)
}

pub(crate) fn standardize_backward(y: &Tensor, inv: &[f64], dy: &Tensor) -> Tensor {
    let n = y.plane() as f64;
    let mut dx = Tensor::zeros_like(y);
    for c in 0..y.c {
        let (yc, gc) = (y.channel(c), dy.channel(c));
        let mean_g = gc.iter().sum::<f64>() / n;
        let mean_gy = gc.iter().zip(yc).map(|(g, v)| g * v).sum::<f64>() / n;
        for ((d, g), v) in dx.channel_mut(c).iter_mut().zip(gc).zip(yc) {
            *d = inv[c] * (g - mean_g - v * mean_gy);
        }
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: &Tensor) -> Tensor {
    Tensor {
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
        ..*x
    }
}

pub(crate) fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, g)| {
                let s = sigmoid(v);
                g * s * (1.0 + v * (1.0 - s))
            })
            .collect(),
        ..*x
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softplus_grad(x: f64) -> f64 {
    sigmoid(x)
}

/// Inverse of [`softplus`] for `y > 0`.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub(crate) fn avg_pool2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for xx in 0..w {
                let i = 2 * y * x.w + 2 * xx;
                dst[y * w + xx] = 0.25 * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let g = dy.channel(c);
        let dst = dx.channel_mut(c);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = 0.25 * g[(y / 2) * dy.w + xx / 2];
            }
        }
    }
    dx
}

pub(crate) fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let g = dy.channel(c);
        let dst = dx.channel_mut(c);
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dst[(y / 2) * w + xx / 2] += g[y * dy.w + xx];
            }
        }
    }
    dx
}

pub(crate) fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Splits a gradient over `concat(a, b)` back into its two parts.
pub(crate) fn split(d: &Tensor, first_c: usize) -> (Tensor, Tensor) {
    let cut = first_c * d.plane();
    (
        Tensor {
            c: first_c,
            h: d.h,
            w: d.w,
            data: d.data[..cut].to_vec(),
        },
        Tensor {
            c: d.c - first_c,
            h: d.h,
            w: d.w,
            data: d.data[cut..].to_vec(),
        },
    )
}

pub(crate) fn global_avg(x: &Tensor) -> Vec<f64> {
    let n = x.plane() as f64;
    (0..x.c).map(|c| x.channel(c).iter().sum::<f64>() / n).collect()
}

/// Softmax over channels at every pixel.
pub(crate) fn softmax_channels(z: &Tensor) -> Tensor {
    let p = z.plane();
    let mut out = Tensor::zeros_like(z);
    for i in 0..p {
        let max = (0..z.c).map(|c| z.data[c * p + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..z.c {
            let e = (z.data[c * p + i] - max).exp();
            out.data[c * p + i] = e;
            sum += e;
        }
        for c in 0..z.c {
            out.data[c * p + i] /= sum;
        }
    }
    out
}

pub(crate) fn softmax_channels_backward(a: &Tensor, da: &Tensor) -> Tensor {
    let p = a.plane();
    let mut dz = Tensor::zeros_like(a);
    for i in 0..p {
        let dot: f64 = (0..a.c).map(|c| a.data[c * p + i] * da.data[c * p + i]).sum();
        for c in 0..a.c {
            dz.data[c * p + i] = a.data[c * p + i] * (da.data[c * p + i] - dot);
        }
    }
    dz
}
