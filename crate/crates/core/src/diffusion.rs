//! Conditional DDPM over N-band cubes: linear noise schedule, forward
//! noising, an ε-predicting encoder-decoder conditioned on the splat render,
//! and an ancestral sampler.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hypercube::HyperCube;
use crate::nn::{silu, silu_grad, upsample2, upsample2_backward, Conv2d, Dense, GroupNorm, GroupNormCache, Layout, Tensor};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const MAX_STEPS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear β schedule over `steps` timesteps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 || steps > MAX_STEPS {
        return Err(Error::InvalidArgument(format!("diffusion steps must be in 1..={MAX_STEPS}, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut acc = 1.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap()
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfBounds(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `√ᾱ_t·x0 + √(1-ᾱ_t)·eps`.
pub fn forward_noise(x0: &HyperCube, t: usize, eps: &HyperCube, sched: &NoiseSchedule) -> Result<HyperCube> {
    x0.ensure_same_shape(eps)?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    x0.with_data(data)
}

/// Unit-normal cube shaped like `like`.
pub fn sample_noise(like: &HyperCube, rng: &mut impl Rng) -> HyperCube {
    let data = (0..like.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    like.with_data(data).expect("normal samples are finite")
}

pub fn cube_to_tensor(c: &HyperCube) -> Tensor {
    let (h, w, n) = (c.height(), c.width(), c.bands());
    let mut t = Tensor::zeros(n, h, w);
    for (p, spec) in c.data().chunks_exact(n).enumerate() {
        for (b, v) in spec.iter().enumerate() {
            t.data[b * h * w + p] = *v;
        }
    }
    t
}

pub fn tensor_to_cube(t: &Tensor, wavelengths: &[f64]) -> Result<HyperCube> {
    let plane = t.plane();
    HyperCube::from_fn(t.h, t.w, wavelengths.to_vec(), |r, c, b| t.data[b * plane + r * t.w + c])
}

/// Sub-window of a cube.
pub fn crop(c: &HyperCube, row: usize, col: usize, h: usize, w: usize) -> Result<HyperCube> {
    if row + h > c.height() || col + w > c.width() || h == 0 || w == 0 {
        return Err(Error::OutOfBounds(format!(
            "crop {h}x{w} at ({row},{col}) outside {}x{}",
            c.height(),
            c.width()
        )));
    }
    HyperCube::from_fn(h, w, c.wavelengths().to_vec(), |r, cc, b| c.get(row + r, col + cc, b))
}

/// Network size knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub width: usize,
    pub groups: usize,
    pub time_dim: usize,
    /// Residual scale `s` of the render skip. With `Some(s)` the network
    /// output is added to the linear estimate of the noise under
    /// `x0 = cond + r`, `r ~ N(0, s^2)`, so an untrained net reproduces the
    /// render. `None` leaves the bare network.
    pub prior_std: Option<f64>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 32,
            groups: 4,
            time_dim: 64,
            prior_std: Some(0.1),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.groups == 0 || self.width % self.groups != 0 {
            return Err(Error::Config(format!(
                "denoiser width {} must be a positive multiple of groups {}",
                self.width, self.groups
            )));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time embedding width must be even, got {}", self.time_dim)));
        }
        if let Some(s) = self.prior_std {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config(format!("denoiser prior std must be finite and >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb: Dense,
    gn2: GroupNorm,
    conv2: Conv2d,
}

struct ResCache {
    gn1: GroupNormCache,
    a1: Tensor,
    s1: Tensor,
    gn2: GroupNormCache,
    a2: Tensor,
    s2: Tensor,
}

impl ResBlock {
    fn new(l: &mut Layout, c: usize, groups: usize, time_dim: usize) -> Self {
        Self {
            gn1: GroupNorm::new(l, c, groups),
            conv1: Conv2d::new(l, c, c, 3, 1),
            temb: Dense::new(l, time_dim, c),
            gn2: GroupNorm::new(l, c, groups),
            conv2: Conv2d::new(l, c, c, 3, 1),
        }
    }

    fn init(&self, p: &mut [f64], rng: &mut impl Rng) {
        self.gn1.init(p);
        self.conv1.init(p, rng);
        self.temb.init(p, rng);
        self.gn2.init(p);
        self.conv2.init(p, rng);
    }

    fn forward(&self, p: &[f64], x: &Tensor, h_t: &[f64]) -> (Tensor, ResCache) {
        let (a1, gn1) = self.gn1.forward(p, x);
        let s1 = a1.map(silu);
        let mut h = self.conv1.forward(p, &s1);
        let tb = self.temb.forward(p, h_t);
        let plane = h.plane();
        for (c, chunk) in h.data.chunks_exact_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += tb[c]);
        }
        let (a2, gn2) = self.gn2.forward(p, &h);
        let s2 = a2.map(silu);
        let mut out = self.conv2.forward(p, &s2);
        out.add_assign(x);
        let cache = ResCache {
            gn1,
            a1,
            s1,
            gn2,
            a2,
            s2,
        };
        (out, cache)
    }

    /// Returns `dL/dx`; accumulates `dL/dh_t` into `d_ht`.
    fn backward(&self, p: &[f64], g: &mut [f64], c: &ResCache, h_t: &[f64], d_ht: &mut [f64], dy: &Tensor) -> Tensor {
        let ds2 = self.conv2.backward(p, g, &c.s2, dy, true).unwrap();
        let da2 = silu_backward(&c.a2, &ds2);
        let dh = self.gn2.backward(p, g, &c.gn2, &da2);
        let plane = dh.plane();
        let dtb: Vec<f64> = dh.data.chunks_exact(plane).map(|ch| ch.iter().sum()).collect();
        let dht = self.temb.backward(p, g, h_t, &dtb);
        for (a, b) in d_ht.iter_mut().zip(&dht) {
            *a += b;
        }
        let ds1 = self.conv1.backward(p, g, &c.s1, &dh, true).unwrap();
        let da1 = silu_backward(&c.a1, &ds1);
        let mut dx = self.gn1.backward(p, g, &c.gn1, &da1);
        dx.add_assign(dy);
        dx
    }
}

fn silu_backward(pre: &Tensor, d: &Tensor) -> Tensor {
    let mut out = d.clone();
    for (o, x) in out.data.iter_mut().zip(&pre.data) {
        *o *= silu_grad(*x);
    }
    out
}

#[derive(Clone, Debug)]
struct Arch {
    time1: Dense,
    conv_in: Conv2d,
    res0: ResBlock,
    down0: Conv2d,
    res1: ResBlock,
    down1: Conv2d,
    res_mid: ResBlock,
    up1: Conv2d,
    res_up1: ResBlock,
    up0: Conv2d,
    res_up0: ResBlock,
    gn_out: GroupNorm,
    conv_out: Conv2d,
    total: usize,
}

impl Arch {
    fn new(bands: usize, cfg: DenoiserConfig) -> Self {
        let mut l = Layout::default();
        let (c, g, td) = (cfg.width, cfg.groups, cfg.time_dim);
        let time1 = Dense::new(&mut l, td, td);
        let conv_in = Conv2d::new(&mut l, 2 * bands, c, 3, 1);
        let res0 = ResBlock::new(&mut l, c, g, td);
        let down0 = Conv2d::new(&mut l, c, c, 3, 2);
        let res1 = ResBlock::new(&mut l, c, g, td);
        let down1 = Conv2d::new(&mut l, c, c, 3, 2);
        let res_mid = ResBlock::new(&mut l, c, g, td);
        let up1 = Conv2d::new(&mut l, c, c, 3, 1);
        let res_up1 = ResBlock::new(&mut l, c, g, td);
        let up0 = Conv2d::new(&mut l, c, c, 3, 1);
        let res_up0 = ResBlock::new(&mut l, c, g, td);
        let gn_out = GroupNorm::new(&mut l, c, g);
        let conv_out = Conv2d::new(&mut l, c, bands, 3, 1);
        Self {
            time1,
            conv_in,
            res0,
            down0,
            res1,
            down1,
            res_mid,
            up1,
            res_up1,
            up0,
            res_up0,
            gn_out,
            conv_out,
            total: l.total(),
        }
    }

    fn blocks(&self) -> [&ResBlock; 5] {
        [&self.res0, &self.res1, &self.res_mid, &self.res_up1, &self.res_up0]
    }
}

/// Sinusoidal embedding of the timestep: `[sin(t ω_i)..., cos(t ω_i)...]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (t as f64 * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    out
}

/// ε-predictor `ε_θ(x_t, t | render)`.
#[derive(Clone, Debug)]
pub struct DenoiserNet {
    bands: usize,
    config: DenoiserConfig,
    params: Vec<f64>,
    arch: Arch,
}

impl PartialEq for DenoiserNet {
    fn eq(&self, o: &Self) -> bool {
        self.bands == o.bands && self.config == o.config && self.params == o.params
    }
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    t_emb: Vec<f64>,
    t_pre: Vec<f64>,
    h_t: Vec<f64>,
    xin: Tensor,
    res: Vec<ResCache>,
    s0: Tensor,
    s1: Tensor,
    um: Tensor,
    uv1: Tensor,
    gn_out: GroupNormCache,
    a_out: Tensor,
    s_out: Tensor,
    height: usize,
    width: usize,
    /// Skip coefficients on `x_t` and `cond`.
    skip: Option<(f64, f64)>,
}

fn pad_to(t: &Tensor, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(t.c, h, w);
    for c in 0..t.c {
        for y in 0..t.h {
            let src = &t.data[(c * t.h + y) * t.w..(c * t.h + y + 1) * t.w];
            out.data[(c * h + y) * w..(c * h + y) * w + t.w].copy_from_slice(src);
        }
    }
    out
}

fn crop_tensor(t: &Tensor, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(t.c, h, w);
    for c in 0..t.c {
        for y in 0..h {
            let src = &t.data[(c * t.h + y) * t.w..(c * t.h + y) * t.w + w];
            out.data[(c * h + y) * w..(c * h + y + 1) * w].copy_from_slice(src);
        }
    }
    out
}

impl DenoiserNet {
    /// Random init with a zero output layer, so the initial prediction is 0.
    pub fn new(bands: usize, config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if bands == 0 {
            return Err(Error::InvalidArgument("denoiser needs at least one band".into()));
        }
        let arch = Arch::new(bands, config);
        let mut params = vec![0.0; arch.total];
        arch.time1.init(&mut params, rng);
        arch.conv_in.init(&mut params, rng);
        for b in arch.blocks() {
            b.init(&mut params, rng);
        }
        for c in [&arch.down0, &arch.down1, &arch.up1, &arch.up0] {
            c.init(&mut params, rng);
        }
        arch.gn_out.init(&mut params);
        Ok(Self {
            bands,
            config,
            params,
            arch,
        })
    }

    pub fn from_parts(bands: usize, config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let arch = Arch::new(bands, config);
        if params.len() != arch.total {
            return Err(Error::Shape(format!(
                "denoiser expects {} parameters, got {}",
                arch.total,
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self {
            bands,
            config,
            params,
            arch,
        })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn config(&self) -> DenoiserConfig {
        self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Zeroes the `conv_in` weights that read the conditioning channels.
    pub fn zero_conditioning_weights(&mut self) {
        let conv = &self.arch.conv_in;
        let k2 = conv.kernel * conv.kernel;
        let w = conv.weight.get_mut(&mut self.params);
        for o in 0..conv.cout {
            for i in self.bands..2 * self.bands {
                w[(o * conv.cin + i) * k2..(o * conv.cin + i + 1) * k2].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Skip coefficients `(k, -k sqrt(ab))` of the render prior at step `t`.
    fn skip(&self, sched: &NoiseSchedule, t: usize) -> Option<(f64, f64)> {
        self.config.prior_std.map(|s| {
            let ab = sched.alpha_bar(t);
            let k = (1.0 - ab).sqrt() / (ab * s * s + 1.0 - ab);
            (k, -k * ab.sqrt())
        })
    }

    /// Predicted noise for `x_t` at step `t`, conditioned on `cond`.
    pub fn forward(&self, x_t: &Tensor, cond: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<(Tensor, ForwardCache)> {
        sched.check_t(t)?;
        if x_t.c != self.bands || cond.c != self.bands || x_t.h != cond.h || x_t.w != cond.w {
            return Err(Error::Shape(format!(
                "denoiser on {} bands got x_t {}x{}x{} and cond {}x{}x{}",
                self.bands, x_t.c, x_t.h, x_t.w, cond.c, cond.h, cond.w
            )));
        }
        let a = &self.arch;
        let p = &self.params[..];
        let (height, width) = (x_t.h, x_t.w);
        let (hp, wp) = (height.div_ceil(4) * 4, width.div_ceil(4) * 4);
        let mut stacked = Tensor::zeros(2 * self.bands, height, width);
        stacked.data[..x_t.data.len()].copy_from_slice(&x_t.data);
        stacked.data[x_t.data.len()..].copy_from_slice(&cond.data);
        let xin = pad_to(&stacked, hp, wp);

        let t_emb = timestep_embedding(t, self.config.time_dim);
        let t_pre = a.time1.forward(p, &t_emb);
        let h_t: Vec<f64> = t_pre.iter().map(|&v| silu(v)).collect();

        let mut res = Vec::with_capacity(5);
        let h0 = a.conv_in.forward(p, &xin);
        let (s0, c) = a.res0.forward(p, &h0, &h_t);
        res.push(c);
        let h1 = a.down0.forward(p, &s0);
        let (s1, c) = a.res1.forward(p, &h1, &h_t);
        res.push(c);
        let h2 = a.down1.forward(p, &s1);
        let (m, c) = a.res_mid.forward(p, &h2, &h_t);
        res.push(c);
        let um = upsample2(&m);
        let mut u1 = a.up1.forward(p, &um);
        u1.add_assign(&s1);
        let (v1, c) = a.res_up1.forward(p, &u1, &h_t);
        res.push(c);
        let uv1 = upsample2(&v1);
        let mut u0 = a.up0.forward(p, &uv1);
        u0.add_assign(&s0);
        let (v0, c) = a.res_up0.forward(p, &u0, &h_t);
        res.push(c);
        let (a_out, gn_out) = a.gn_out.forward(p, &v0);
        let s_out = a_out.map(silu);
        let out = a.conv_out.forward(p, &s_out);
        let mut out = crop_tensor(&out, height, width);
        let skip = self.skip(sched, t);
        if let Some((kx, kc)) = skip {
            for ((o, x), c) in out.data.iter_mut().zip(&x_t.data).zip(&cond.data) {
                *o += kx * x + kc * c;
            }
        }
        let cache = ForwardCache {
            t_emb,
            t_pre,
            h_t,
            xin,
            res,
            s0,
            s1,
            um,
            uv1,
            gn_out,
            a_out,
            s_out,
            height,
            width,
            skip,
        };
        Ok((out, cache))
    }

    /// Backpropagates `d_out`; returns parameter gradients, `dL/dx_t` and
    /// `dL/dcond`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Tensor) -> (Vec<f64>, Tensor, Tensor) {
        let a = &self.arch;
        let p = &self.params[..];
        let mut g = vec![0.0; self.params.len()];
        let mut d_ht = vec![0.0; self.config.time_dim];
        let d_full = pad_to(d_out, cache.xin.h, cache.xin.w);
        let ds_out = a.conv_out.backward(p, &mut g, &cache.s_out, &d_full, true).unwrap();
        let da_out = silu_backward(&cache.a_out, &ds_out);
        let dv0 = a.gn_out.backward(p, &mut g, &cache.gn_out, &da_out);
        let du0 = a.res_up0.backward(p, &mut g, &cache.res[4], &cache.h_t, &mut d_ht, &dv0);
        let mut ds0 = du0.clone();
        let duv1 = a.up0.backward(p, &mut g, &cache.uv1, &du0, true).unwrap();
        let dv1 = upsample2_backward(&duv1);
        let du1 = a.res_up1.backward(p, &mut g, &cache.res[3], &cache.h_t, &mut d_ht, &dv1);
        let mut ds1 = du1.clone();
        let dum = a.up1.backward(p, &mut g, &cache.um, &du1, true).unwrap();
        let dm = upsample2_backward(&dum);
        let dh2 = a.res_mid.backward(p, &mut g, &cache.res[2], &cache.h_t, &mut d_ht, &dm);
        ds1.add_assign(&a.down1.backward(p, &mut g, &cache.s1, &dh2, true).unwrap());
        let dh1 = a.res1.backward(p, &mut g, &cache.res[1], &cache.h_t, &mut d_ht, &ds1);
        ds0.add_assign(&a.down0.backward(p, &mut g, &cache.s0, &dh1, true).unwrap());
        let dh0 = a.res0.backward(p, &mut g, &cache.res[0], &cache.h_t, &mut d_ht, &ds0);
        let dxin = a.conv_in.backward(p, &mut g, &cache.xin, &dh0, true).unwrap();
        let d_pre: Vec<f64> = d_ht.iter().zip(&cache.t_pre).map(|(d, x)| d * silu_grad(*x)).collect();
        a.time1.backward(p, &mut g, &cache.t_emb, &d_pre);

        let d_stack = crop_tensor(&dxin, cache.height, cache.width);
        let half = d_stack.data.len() / 2;
        let mut dx_t = Tensor {
            c: self.bands,
            h: cache.height,
            w: cache.width,
            data: d_stack.data[..half].to_vec(),
        };
        let mut d_cond = Tensor {
            c: self.bands,
            h: cache.height,
            w: cache.width,
            data: d_stack.data[half..].to_vec(),
        };
        if let Some((kx, kc)) = cache.skip {
            for ((dx, dc), d) in dx_t.data.iter_mut().zip(d_cond.data.iter_mut()).zip(&d_out.data) {
                *dx += kx * d;
                *dc += kc * d;
            }
        }
        (g, dx_t, d_cond)
    }

    /// Convenience forward on cubes.
    pub fn predict(&self, x_t: &HyperCube, cond: &HyperCube, t: usize, sched: &NoiseSchedule) -> Result<HyperCube> {
        x_t.ensure_same_shape(cond)?;
        let (out, _) = self.forward(&cube_to_tensor(x_t), &cube_to_tensor(cond), t, sched)?;
        tensor_to_cube(&out, cond.wavelengths())
    }
}

/// Loss value plus gradients for the network and the conditioning render.
#[derive(Clone, Debug)]
pub struct DiffusionLoss {
    pub loss: f64,
    pub t: usize,
    pub grad_params: Vec<f64>,
    pub grad_render: HyperCube,
}

/// ε-prediction loss at a fixed `(t, eps)`.
pub fn diffusion_loss_at(
    net: &DenoiserNet,
    x_gt: &HyperCube,
    x_render: &HyperCube,
    sched: &NoiseSchedule,
    t: usize,
    eps: &HyperCube,
) -> Result<DiffusionLoss> {
    x_gt.ensure_same_shape(x_render)?;
    let x_t = forward_noise(x_gt, t, eps, sched)?;
    let eps_t = cube_to_tensor(eps);
    let (pred, cache) = net.forward(&cube_to_tensor(&x_t), &cube_to_tensor(x_render), t, sched)?;
    let n = pred.data.len() as f64;
    let mut loss = 0.0;
    let mut d_out = Tensor::zeros(pred.c, pred.h, pred.w);
    for ((d, p), e) in d_out.data.iter_mut().zip(&pred.data).zip(&eps_t.data) {
        let r = p - e;
        loss += r * r;
        *d = 2.0 * r / n;
    }
    let (grad_params, _, d_cond) = net.backward(&cache, &d_out);
    Ok(DiffusionLoss {
        loss: loss / n,
        t,
        grad_params,
        grad_render: tensor_to_cube(&d_cond, x_render.wavelengths())?,
    })
}

/// Samples `t ~ U{1..T}` and unit-normal `eps`, then evaluates the loss.
pub fn diffusion_loss(
    net: &DenoiserNet,
    x_gt: &HyperCube,
    x_render: &HyperCube,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<DiffusionLoss> {
    x_gt.ensure_same_shape(x_render)?;
    let t = rng.gen_range(1..=sched.steps());
    let eps = sample_noise(x_gt, rng);
    diffusion_loss_at(net, x_gt, x_render, sched, t, &eps)
}

/// Evenly spaced timesteps from `T` down to 1 (inclusive) with `n` entries.
pub fn respaced_steps(total: usize, n: usize) -> Vec<usize> {
    if n >= total {
        return (1..=total).rev().collect();
    }
    let mut steps: Vec<usize> = (0..n)
        .map(|i| {
            if n == 1 {
                total
            } else {
                1 + ((total - 1) as f64 * (n - 1 - i) as f64 / (n - 1) as f64).round() as usize
            }
        })
        .collect();
    steps.dedup();
    steps
}

/// Where the reverse chain starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ChainStart {
    /// Unit normal noise.
    #[default]
    Noise,
    /// The render pushed through the forward process to step `T`.
    Render,
}

/// Ancestral sampling from pure noise, conditioned on `x_render` at every
/// step. With `num_steps < T` the chain runs on an evenly respaced subset of
/// timesteps. The clean estimate is clipped to `[0, 1]` at every step.
pub fn denoise(
    net: &DenoiserNet,
    x_render: &HyperCube,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
    num_steps: usize,
) -> Result<HyperCube> {
    denoise_from(net, x_render, sched, rng, num_steps, ChainStart::Noise)
}

/// [`denoise`] with a choice of starting point.
pub fn denoise_from(
    net: &DenoiserNet,
    x_render: &HyperCube,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
    num_steps: usize,
    start: ChainStart,
) -> Result<HyperCube> {
    if num_steps == 0 {
        return Err(Error::InvalidArgument("denoise needs at least one reverse step".into()));
    }
    if num_steps > sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "{num_steps} reverse steps requested but the schedule has {}",
            sched.steps()
        )));
    }
    let cond = cube_to_tensor(x_render);
    let noise = sample_noise(x_render, rng);
    let mut x = cube_to_tensor(&match start {
        ChainStart::Noise => noise,
        ChainStart::Render => forward_noise(x_render, sched.steps(), &noise, sched)?,
    });
    let steps = respaced_steps(sched.steps(), num_steps);
    for (i, &t) in steps.iter().enumerate() {
        let prev = steps.get(i + 1).copied().unwrap_or(0);
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(prev);
        let beta = 1.0 - ab / ab_prev;
        let (eps, _) = net.forward(&x, &cond, t, sched)?;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        for (xv, e) in x.data.iter_mut().zip(&eps.data) {
            let x0 = ((*xv - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(0.0, 1.0);
            *xv = c0 * x0 + ct * *xv;
        }
        if prev > 0 {
            let sd = var.sqrt();
            for xv in x.data.iter_mut() {
                *xv += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(tensor_to_cube(&x, x_render.wavelengths())?.clamped(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_gradient, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> DenoiserConfig {
        DenoiserConfig {
            width: 4,
            groups: 2,
            time_dim: 4,
            prior_std: None,
        }
    }

    fn rand_cube(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize) -> HyperCube {
        HyperCube::from_fn(h, w, (0..n).map(|b| 500.0 + b as f64).collect(), |_, _, _| rng.gen_range(0.0..1.0)).unwrap()
    }

    fn perturbed(rng: &mut ChaCha8Rng, bands: usize) -> DenoiserNet {
        let mut net = DenoiserNet::new(bands, toy(), rng).unwrap();
        for v in net.params_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
        net
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1, 0.02, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.98).abs() < 1e-15);
        let s = NoiseSchedule::default();
        assert!((s.alpha(1) - 0.9999).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            if t > 1 {
                assert!(s.beta(t) >= s.beta(t - 1));
            }
        }
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = rand_cube(&mut rng, 3, 3, 2);
        let s = NoiseSchedule::default();
        let zero = x0.map(|_| 0.0).unwrap();
        let out = forward_noise(&x0, 7, &zero, &s).unwrap();
        let a = s.alpha_bar(7).sqrt();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert_eq!(*o, a * x);
        }
        assert!(forward_noise(&x0, 0, &zero, &s).is_err());
        assert!(forward_noise(&x0, 51, &zero, &s).is_err());
        let tiny = make_schedule(10, 1e-12, 1e-12).unwrap();
        let eps = sample_noise(&x0, &mut rng);
        let out = forward_noise(&x0, 1, &eps, &tiny).unwrap();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert!((o - x).abs() < 1e-5);
        }
    }

    #[test]
    fn output_shape_and_zero_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bare = DenoiserConfig {
            prior_std: None,
            ..DenoiserConfig::default()
        };
        let net = DenoiserNet::new(3, bare, &mut rng).unwrap();
        let s = NoiseSchedule::default();
        for (h, w) in [(5, 7), (8, 8), (13, 4)] {
            let x = rand_cube(&mut rng, h, w, 3);
            let out = net.predict(&x, &x, 10, &s).unwrap();
            assert!(out.same_shape(&x));
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conditioning_gradient_dead_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = perturbed(&mut rng, 2);
        net.zero_conditioning_weights();
        let gt = rand_cube(&mut rng, 6, 6, 2);
        let render = rand_cube(&mut rng, 6, 6, 2);
        let r = diffusion_loss(&net, &gt, &render, &NoiseSchedule::default(), &mut rng).unwrap();
        assert!(r.grad_render.data().iter().all(|&v| v == 0.0));
        assert!(r.grad_params.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn untrained_skip_returns_the_render() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DenoiserConfig {
            prior_std: Some(0.0),
            ..toy()
        };
        let net = DenoiserNet::new(2, cfg, &mut rng).unwrap();
        let render = rand_cube(&mut rng, 6, 5, 2);
        let s = NoiseSchedule::default();
        for start in [ChainStart::Noise, ChainStart::Render] {
            let out = denoise_from(&net, &render, &s, &mut rng, 1, start).unwrap();
            for (a, b) in out.data().iter().zip(render.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // a nonzero prior shrinks toward the render instead of matching it
        let cfg = DenoiserConfig {
            prior_std: Some(0.1),
            ..toy()
        };
        let net = DenoiserNet::new(2, cfg, &mut rng).unwrap();
        let out = denoise_from(&net, &render, &s, &mut rng, 1, ChainStart::Render).unwrap();
        let worst = out.data().iter().zip(render.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn diffusion_loss_gradients_match_finite_differences() {
        for prior in [None, Some(0.1)] {
            diffusion_gradients_for(prior);
        }
    }

    fn diffusion_gradients_for(prior: Option<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DenoiserConfig { prior_std: prior, ..toy() };
        let mut net = DenoiserNet::new(2, cfg, &mut rng).unwrap();
        for v in net.params_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
        let gt = rand_cube(&mut rng, 6, 6, 2);
        let render = rand_cube(&mut rng, 6, 6, 2);
        let s = NoiseSchedule::default();
        let eps = sample_noise(&gt, &mut rng);
        let r = diffusion_loss_at(&net, &gt, &render, &s, 17, &eps).unwrap();
        let num = numeric_gradient(net.params(), 1e-5, |p| {
            let n = DenoiserNet::from_parts(2, cfg, p.to_vec()).unwrap();
            diffusion_loss_at(&n, &gt, &render, &s, 17, &eps).unwrap().loss
        });
        let scale = r.grad_params.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let e = relative_error(&r.grad_params, &num, 1e-6 * scale);
        assert!(e < 1e-3, "params {e}");
        let num = numeric_gradient(render.data(), 1e-5, |x| {
            diffusion_loss_at(&net, &gt, &render.with_data(x.to_vec()).unwrap(), &s, 17, &eps)
                .unwrap()
                .loss
        });
        let scale = r.grad_render.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let e = relative_error(r.grad_render.data(), &num, 1e-6 * scale);
        assert!(e < 1e-3, "render {e}");
    }

    #[test]
    fn denoise_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = perturbed(&mut rng, 2);
        let render = rand_cube(&mut rng, 5, 6, 2);
        let s = make_schedule(8, 1e-3, 0.2).unwrap();
        assert!(denoise(&net, &render, &s, &mut rng, 0).is_err());
        assert!(denoise(&net, &render, &s, &mut rng, 9).is_err());
        let a = denoise(&net, &render, &s, &mut ChaCha8Rng::seed_from_u64(9), 8).unwrap();
        let b = denoise(&net, &render, &s, &mut ChaCha8Rng::seed_from_u64(9), 8).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.same_shape(&render));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(respaced_steps(50, 50).len(), 50);
        assert_eq!(respaced_steps(50, 1), vec![50]);
        assert_eq!(respaced_steps(50, 5), vec![50, 38, 26, 13, 1]);
    }
}
