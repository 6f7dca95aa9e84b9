use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `C[m×n] = alpha·A[m×k]·B[k×n] + beta·C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers size `a`, `b`, `c` to cover the strided index ranges.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square convolution with stride 1 and "same" zero padding. Kernel size 1 or 3.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn new<R: Rng>(in_c: usize, out_c: usize, k: usize, rng: &mut R) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = (in_c * k * k) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight = (0..out_c * in_c * k * k).map(|_| normal.sample(rng)).collect();
        Self {
            in_c,
            out_c,
            k,
            weight,
            bias: vec![0.0; out_c],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_c: self.in_c,
            out_c: self.out_c,
            k: self.k,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let hw = x.plane();
        let mut y = Tensor::zeros(x.n, self.out_c, x.h, x.w);
        let mut cols = if self.k == 3 {
            vec![0.0; self.patch_len() * hw]
        } else {
            Vec::new()
        };
        for i in 0..x.n {
            let src = x.sample(i);
            let b: &[f32] = if self.k == 3 {
                im2col3(src, x.c, x.h, x.w, &mut cols);
                &cols
            } else {
                src
            };
            let out = y.sample_mut(i);
            sgemm(
                self.out_c,
                self.patch_len(),
                hw,
                &self.weight,
                self.patch_len() as isize,
                1,
                b,
                hw as isize,
                1,
                0.0,
                out,
            );
            for (o, bias) in out.chunks_mut(hw).zip(&self.bias) {
                for v in o.iter_mut() {
                    *v += *bias;
                }
            }
        }
        y
    }

    /// Returns the input gradient; accumulates parameter gradients into `grad` when given.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: Option<&mut Conv2d>) -> Tensor {
        let hw = x.plane();
        let pl = self.patch_len();
        let mut dx = x.zeros_like();
        let mut cols = if self.k == 3 { vec![0.0; pl * hw] } else { Vec::new() };
        let mut dcols = vec![0.0; pl * hw];
        let mut grad = grad;
        for i in 0..x.n {
            let g = dy.sample(i);
            if let Some(gr) = grad.as_deref_mut() {
                let b: &[f32] = if self.k == 3 {
                    im2col3(x.sample(i), x.c, x.h, x.w, &mut cols);
                    &cols
                } else {
                    x.sample(i)
                };
                // dW += dY · colsᵀ
                sgemm(
                    self.out_c,
                    hw,
                    pl,
                    g,
                    hw as isize,
                    1,
                    b,
                    1,
                    hw as isize,
                    1.0,
                    &mut gr.weight,
                );
                for (gb, row) in gr.bias.iter_mut().zip(g.chunks(hw)) {
                    *gb += row.iter().sum::<f32>();
                }
            }
            // dcols = Wᵀ · dY
            sgemm(
                pl,
                self.out_c,
                hw,
                &self.weight,
                1,
                pl as isize,
                g,
                hw as isize,
                1,
                0.0,
                &mut dcols,
            );
            let dxi = dx.sample_mut(i);
            if self.k == 3 {
                col2im3(&dcols, x.c, x.h, x.w, dxi);
            } else {
                dxi.copy_from_slice(&dcols);
            }
        }
        dx
    }
}

fn im2col3(src: &[f32], c: usize, h: usize, w: usize, cols: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match dx {
                        -1 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        0 => dst.copy_from_slice(srow),
                        _ => {
                            dst[..w - 1].copy_from_slice(&srow[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im3(cols: &[f32], c: usize, h: usize, w: usize, dst: &mut [f32]) {
    let hw = h * w;
    dst.fill(0.0);
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match dx {
                        -1 => {
                            for (p, s) in prow[..w - 1].iter_mut().zip(&src[1..]) {
                                *p += *s;
                            }
                        }
                        0 => {
                            for (p, s) in prow.iter_mut().zip(src) {
                                *p += *s;
                            }
                        }
                        _ => {
                            for (p, s) in prow[1..].iter_mut().zip(&src[..w - 1]) {
                                *p += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel batch normalization. Batch statistics in training, frozen running statistics in evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
    mode: Mode,
    batch_mean: Vec<f32>,
    batch_var: Vec<f32>,
}

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.gamma.len();
        Self {
            gamma: vec![0.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![0.0; c],
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> (Tensor, BnCache) {
        let c = x.c;
        let p = x.plane();
        let count = (x.n * p) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for i in 0..x.n {
                        s += x.channel(i, ch).iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let m = s / count;
                    let mut sq = 0.0f64;
                    for i in 0..x.n {
                        sq += x
                            .channel(i, ch)
                            .iter()
                            .map(|&v| (v as f64 - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m as f32;
                    var[ch] = (sq / count) as f32;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = x.zeros_like();
        let mut y = x.zeros_like();
        for i in 0..x.n {
            for ch in 0..c {
                let off = (i * c + ch) * p;
                let (m, s, g, b) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
                for j in off..off + p {
                    let xh = (x.data[j] - m) * s;
                    xhat.data[j] = xh;
                    y.data[j] = g * xh + b;
                }
            }
        }
        let cache = BnCache {
            xhat,
            inv_std,
            mode,
            batch_mean: mean,
            batch_var: var,
        };
        (y, cache)
    }

    pub fn commit_running(&mut self, cache: &BnCache, count: usize) {
        if cache.mode != Mode::Train {
            return;
        }
        let unbias = if count > 1 {
            count as f32 / (count as f32 - 1.0)
        } else {
            1.0
        };
        for ch in 0..self.gamma.len() {
            self.running_mean[ch] =
                (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * cache.batch_mean[ch];
            self.running_var[ch] = (1.0 - BN_MOMENTUM) * self.running_var[ch]
                + BN_MOMENTUM * cache.batch_var[ch] * unbias;
        }
    }

    pub fn backward(&self, cache: &BnCache, dy: &Tensor, grad: Option<&mut BatchNorm2d>) -> Tensor {
        let c = dy.c;
        let p = dy.plane();
        let m = (dy.n * p) as f32;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for i in 0..dy.n {
            for ch in 0..c {
                let off = (i * c + ch) * p;
                let mut a = 0.0f64;
                let mut b = 0.0f64;
                for j in off..off + p {
                    a += dy.data[j] as f64;
                    b += (dy.data[j] * cache.xhat.data[j]) as f64;
                }
                sum_dy[ch] += a;
                sum_dy_xhat[ch] += b;
            }
        }
        if let Some(g) = grad {
            for ch in 0..c {
                g.gamma[ch] += sum_dy_xhat[ch] as f32;
                g.beta[ch] += sum_dy[ch] as f32;
            }
        }
        let mut dx = dy.zeros_like();
        for i in 0..dy.n {
            for ch in 0..c {
                let off = (i * c + ch) * p;
                let k = self.gamma[ch] * cache.inv_std[ch];
                match cache.mode {
                    Mode::Eval => {
                        for j in off..off + p {
                            dx.data[j] = k * dy.data[j];
                        }
                    }
                    Mode::Train => {
                        let mdy = sum_dy[ch] as f32 / m;
                        let mdyx = sum_dy_xhat[ch] as f32 / m;
                        for j in off..off + p {
                            dx.data[j] = k * (dy.data[j] - mdy - cache.xhat.data[j] * mdyx);
                        }
                    }
                }
            }
        }
        dx
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Gradient through ReLU given the ReLU *output*.
pub fn relu_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, o) in dx.data.iter_mut().zip(&out.data) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// 2×2 max pooling; returns the pooled tensor and the winning offset (0..4) per output cell.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; y.data.len()];
    let mut o = 0;
    for i in 0..x.n {
        for ch in 0..x.c {
            let plane = x.channel(i, ch);
            for r in 0..oh {
                for c in 0..ow {
                    let base = 2 * r * x.w + 2 * c;
                    let cand = [
                        plane[base],
                        plane[base + 1],
                        plane[base + x.w],
                        plane[base + x.w + 1],
                    ];
                    let mut best = 0;
                    for k in 1..4 {
                        if cand[k] > cand[best] {
                            best = k;
                        }
                    }
                    y.data[o] = cand[best];
                    arg[o] = best as u8;
                    o += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(arg: &[u8], dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, dy.c, in_h, in_w);
    let p_in = in_h * in_w;
    let mut o = 0;
    for i in 0..dy.n {
        for ch in 0..dy.c {
            let off = (i * dy.c + ch) * p_in;
            for r in 0..dy.h {
                for c in 0..dy.w {
                    let base = 2 * r * in_w + 2 * c;
                    let idx = match arg[o] {
                        0 => base,
                        1 => base + 1,
                        2 => base + in_w,
                        _ => base + in_w + 1,
                    };
                    dx.data[off + idx] += dy.data[o];
                    o += 1;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    for i in 0..x.n {
        for ch in 0..x.c {
            let src = x.channel(i, ch);
            let off = (i * x.c + ch) * oh * ow;
            for r in 0..oh {
                let srow = &src[(r / 2) * x.w..(r / 2 + 1) * x.w];
                let drow = &mut y.data[off + r * ow..off + (r + 1) * ow];
                for (c, d) in drow.iter_mut().enumerate() {
                    *d = srow[c / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for i in 0..dy.n {
        for ch in 0..dy.c {
            let src = dy.channel(i, ch);
            let off = (i * dy.c + ch) * h * w;
            for r in 0..dy.h {
                for c in 0..dy.w {
                    dx.data[off + (r / 2) * w + c / 2] += src[r * dy.w + c];
                }
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial mismatch");
    let mut y = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let dst = y.sample_mut(i);
        let la = a.sample_len();
        dst[..la].copy_from_slice(a.sample(i));
        dst[la..].copy_from_slice(b.sample(i));
    }
    y
}

pub fn split(y: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let mut a = Tensor::zeros(y.n, ca, y.h, y.w);
    let mut b = Tensor::zeros(y.n, y.c - ca, y.h, y.w);
    let la = a.sample_len();
    for i in 0..y.n {
        let src = y.sample(i);
        a.sample_mut(i).copy_from_slice(&src[..la]);
        b.sample_mut(i).copy_from_slice(&src[la..]);
    }
    (a, b)
}
