//! Minimal layer kit with hand-written backward passes.
//!
//! Networks keep all of their parameters in one flat `Vec<f64>`; layers hold
//! [`Slot`]s into it. Gradients use the same layout, which keeps the optimizer
//! and the checkpoint format trivial.

use rand::Rng;

/// A contiguous range inside a flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn get<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn get_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.offset..self.offset + self.len]
    }
}

/// Hands out consecutive slots while a network is being laid out.
#[derive(Default)]
pub struct Layout {
    next: usize,
}

impl Layout {
    pub fn take(&mut self, len: usize) -> Slot {
        let s = Slot { offset: self.next, len };
        self.next += len;
        s
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Fills `w` uniformly in `±1/sqrt(fan_in)`.
pub fn init_uniform(w: &mut [f64], fan_in: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in w {
        *v = rng.gen_range(-bound..bound);
    }
}

/// `C x H x W` activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
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

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn add_assign(&mut self, o: &Tensor) {
        debug_assert_eq!(self.data.len(), o.data.len());
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Row-major `C = A B (+ C if accumulate)` for `A: m x k`, `B: k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, c: &mut [f64], accumulate: bool) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: strides describe matrices that fit inside the asserted slices.
    unsafe {
        matrixmultiply::dgemm(
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
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fully connected layer, weight stored `out x in`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Dense {
    pub fn new(layout: &mut Layout, inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: layout.take(inputs * outputs),
            bias: layout.take(outputs),
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        init_uniform(self.weight.get_mut(params), self.inputs, rng);
        init_uniform(self.bias.get_mut(params), self.inputs, rng);
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = self.weight.get(params);
        let b = self.bias.get(params);
        (0..self.outputs)
            .map(|o| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                b[o] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, params: &[f64], grads: &mut [f64], x: &[f64], dy: &[f64]) -> Vec<f64> {
        let w = self.weight.get(params);
        {
            let gw = self.weight.get_mut(grads);
            for o in 0..self.outputs {
                for i in 0..self.inputs {
                    gw[o * self.inputs + i] += dy[o] * x[i];
                }
            }
        }
        let gb = self.bias.get_mut(grads);
        for o in 0..self.outputs {
            gb[o] += dy[o];
        }
        let mut dx = vec![0.0; self.inputs];
        for o in 0..self.outputs {
            for i in 0..self.inputs {
                dx[i] += w[o * self.inputs + i] * dy[o];
            }
        }
        dx
    }
}

/// Square-kernel 2D convolution with zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Conv2d {
    pub fn new(layout: &mut Layout, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            weight: layout.take(cout * cin * kernel * kernel),
            bias: layout.take(cout),
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        let fan_in = self.cin * self.kernel * self.kernel;
        init_uniform(self.weight.get_mut(params), fan_in, rng);
        init_uniform(self.bias.get_mut(params), fan_in, rng);
    }

    fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &Tensor) -> (Vec<f64>, usize, usize) {
        let (ho, wo) = (self.out_size(x.h), self.out_size(x.w));
        let k = self.kernel;
        let n = ho * wo;
        let mut cols = vec![0.0; self.cin * k * k * n];
        for c in 0..self.cin {
            let plane = &x.data[c * x.plane()..(c + 1) * x.plane()];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * n;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, ho, wo)
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Tensor {
        let k = self.kernel;
        let n = ho * wo;
        let mut dx = Tensor::zeros(self.cin, h, w);
        for c in 0..self.cin {
            let plane = &mut dx.data[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * n;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.cin);
        let (cols, ho, wo) = self.im2col(x);
        let n = ho * wo;
        let kk = self.cin * self.kernel * self.kernel;
        let mut out = Tensor::zeros(self.cout, ho, wo);
        let b = self.bias.get(params);
        for (o, chunk) in out.data.chunks_exact_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[o]);
        }
        gemm(self.cout, kk, n, self.weight.get(params), false, &cols, false, &mut out.data, true);
        out
    }

    /// Accumulates parameter gradients; returns `dL/dx` if requested.
    pub fn backward(&self, params: &[f64], grads: &mut [f64], x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let (cols, ho, wo) = self.im2col(x);
        let n = ho * wo;
        let kk = self.cin * self.kernel * self.kernel;
        gemm(self.cout, n, kk, &dy.data, false, &cols, true, self.weight.get_mut(grads), true);
        let gb = self.bias.get_mut(grads);
        for (o, chunk) in dy.data.chunks_exact(n).enumerate() {
            gb[o] += chunk.iter().sum::<f64>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![0.0; kk * n];
        gemm(kk, self.cout, n, self.weight.get(params), true, &dy.data, false, &mut dcols, false);
        Some(self.col2im(&dcols, x.h, x.w, ho, wo))
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: Slot,
    pub beta: Slot,
}

pub struct GroupNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(layout: &mut Layout, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "channels must divide into groups");
        Self {
            channels,
            groups,
            gamma: layout.take(channels),
            beta: layout.take(channels),
        }
    }

    pub fn init(&self, params: &mut [f64]) {
        self.gamma.get_mut(params).iter_mut().for_each(|v| *v = 1.0);
        self.beta.get_mut(params).iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, GroupNormCache) {
        let per = self.channels / self.groups;
        let plane = x.plane();
        let m = (per * plane) as f64;
        let gamma = self.gamma.get(params);
        let beta = self.beta.get(params);
        let mut xhat = Tensor::zeros(x.c, x.h, x.w);
        let mut out = Tensor::zeros(x.c, x.h, x.w);
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let range = g * per * plane..(g + 1) * per * plane;
            let xs = &x.data[range.clone()];
            let mean = xs.iter().sum::<f64>() / m;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let is = 1.0 / (var + GN_EPS).sqrt();
            inv_std.push(is);
            for (i, idx) in range.enumerate() {
                let c = g * per + i / plane;
                let xh = (xs[i] - mean) * is;
                xhat.data[idx] = xh;
                out.data[idx] = gamma[c] * xh + beta[c];
            }
        }
        (out, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&self, params: &[f64], grads: &mut [f64], cache: &GroupNormCache, dy: &Tensor) -> Tensor {
        let per = self.channels / self.groups;
        let plane = dy.plane();
        let m = (per * plane) as f64;
        let gamma = self.gamma.get(params);
        for c in 0..self.channels {
            let d = &dy.data[c * plane..(c + 1) * plane];
            let xh = &cache.xhat.data[c * plane..(c + 1) * plane];
            self.gamma.get_mut(grads)[c] += d.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
            self.beta.get_mut(grads)[c] += d.iter().sum::<f64>();
        }
        let mut dx = Tensor::zeros(dy.c, dy.h, dy.w);
        for g in 0..self.groups {
            let range = g * per * plane..(g + 1) * per * plane;
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for idx in range.clone() {
                let c = idx / plane;
                let d = dy.data[idx] * gamma[c];
                sum_d += d;
                sum_dx += d * cache.xhat.data[idx];
            }
            let is = cache.inv_std[g];
            for idx in range {
                let c = idx / plane;
                let d = dy.data[idx] * gamma[c];
                dx.data[idx] = is / m * (m * d - sum_d - cache.xhat.data[idx] * sum_dx);
            }
        }
        dx
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.c, x.h * 2, x.w * 2);
    for c in 0..x.c {
        for y in 0..out.h {
            for xx in 0..out.w {
                out.data[(c * out.h + y) * out.w + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(dy.c, dy.h / 2, dy.w / 2);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dx.data[(c * dx.h + y / 2) * dx.w + xx / 2] += dy.data[(c * dy.h + y) * dy.w + xx];
            }
        }
    }
    dx
}
