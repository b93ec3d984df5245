//! Wavelength encoder: sinusoidal embedding of a normalized wavelength,
//! followed by an MLP that emits one 16-coefficient SH offset per band.
//! Offsets are shared by every Gaussian at that band.

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{silu, silu_grad, Dense, Layout};
use crate::sh::SH_COEFFS;

pub const DEFAULT_FREQUENCIES: usize = 6;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

/// Normalization range for wavelengths, in nanometers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WavelengthRange {
    pub min: f64,
    pub max: f64,
}

impl WavelengthRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min < max) {
            return Err(Error::InvalidArgument(format!(
                "wavelength range needs min < max, got [{min}, {max}]"
            )));
        }
        Ok(Self { min, max })
    }

    /// Range of a strictly increasing wavelength list. A single band gets a
    /// unit-width range centred on it.
    pub fn of(wavelengths: &[f64]) -> Result<Self> {
        match wavelengths {
            [] => Err(Error::InvalidArgument("no wavelengths".into())),
            [w] => Self::new(w - 0.5, w + 0.5),
            [first, .., last] => Self::new(*first, *last),
        }
    }
}

/// `[sin(2^k π λ̂)]_k ++ [cos(2^k π λ̂)]_k` with `λ̂ = (λ - min) / (max - min)`.
pub fn embed(lambda_nm: f64, range: WavelengthRange, frequencies: usize) -> Vec<f64> {
    let mut t = (lambda_nm - range.min) / (range.max - range.min);
    if !(0.0..=1.0).contains(&t) {
        warn!(
            "wavelength {lambda_nm} nm outside [{}, {}]; clamping",
            range.min, range.max
        );
        t = t.clamp(0.0, 1.0);
    }
    let mut out = vec![0.0; 2 * frequencies];
    for k in 0..frequencies {
        let arg = (1u64 << k) as f64 * std::f64::consts::PI * t;
        out[k] = arg.sin();
        out[frequencies + k] = arg.cos();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub num_frequencies: usize,
    pub hidden_sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// `N x 16` offsets, row `i` for wavelength `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralOffsets {
    pub bands: usize,
    pub values: Vec<f64>,
}

impl SpectralOffsets {
    pub fn zeros(bands: usize) -> Self {
        Self {
            bands,
            values: vec![0.0; bands * SH_COEFFS],
        }
    }

    pub fn row(&self, band: usize) -> &[f64] {
        &self.values[band * SH_COEFFS..(band + 1) * SH_COEFFS]
    }
}

fn layers_for(num_frequencies: usize, hidden: &[usize]) -> (Vec<Dense>, usize) {
    let mut layout = Layout::default();
    let mut widths = vec![2 * num_frequencies];
    widths.extend_from_slice(hidden);
    widths.push(SH_COEFFS);
    let layers = widths.windows(2).map(|w| Dense::new(&mut layout, w[0], w[1])).collect();
    (layers, layout.total())
}

impl EncoderParams {
    /// Random hidden layers, zero final layer: offsets start at exactly zero.
    pub fn new(num_frequencies: usize, hidden_sizes: &[usize], rng: &mut impl Rng) -> Self {
        let (layers, total) = layers_for(num_frequencies, hidden_sizes);
        let mut params = vec![0.0; total];
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            if i != last {
                l.init(&mut params, rng);
            }
        }
        Self {
            num_frequencies,
            hidden_sizes: hidden_sizes.to_vec(),
            params,
        }
    }

    pub fn from_parts(num_frequencies: usize, hidden_sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let (_, total) = layers_for(num_frequencies, &hidden_sizes);
        if params.len() != total {
            return Err(Error::Shape(format!(
                "encoder with L={num_frequencies}, hidden {hidden_sizes:?} needs {total} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite encoder weight".into()));
        }
        Ok(Self {
            num_frequencies,
            hidden_sizes,
            params,
        })
    }

    pub fn layers(&self) -> Vec<Dense> {
        layers_for(self.num_frequencies, &self.hidden_sizes).0
    }

    fn check(&self) -> Result<Vec<Dense>> {
        let (layers, total) = layers_for(self.num_frequencies, &self.hidden_sizes);
        if self.params.len() != total {
            return Err(Error::Shape(format!(
                "encoder parameter vector has {} entries, layer shapes need {total}",
                self.params.len()
            )));
        }
        Ok(layers)
    }

    /// Forward pass for one wavelength, keeping pre-activations.
    fn forward_one(&self, layers: &[Dense], input: Vec<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        // inputs[i] feeds layer i; pre[i] is layer i's output before activation
        let mut inputs = vec![input];
        let mut pre = Vec::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            let z = l.forward(&self.params, inputs.last().unwrap());
            if i + 1 < layers.len() {
                inputs.push(z.iter().map(|&v| silu(v)).collect());
            }
            pre.push(z);
        }
        (inputs, pre)
    }
}

pub fn offsets_for(params: &EncoderParams, wavelengths: &[f64], range: WavelengthRange) -> Result<SpectralOffsets> {
    let layers = params.check()?;
    let mut values = Vec::with_capacity(wavelengths.len() * SH_COEFFS);
    for &w in wavelengths {
        let (_, mut pre) = params.forward_one(&layers, embed(w, range, params.num_frequencies));
        values.extend(pre.pop().unwrap());
    }
    Ok(SpectralOffsets {
        bands: wavelengths.len(),
        values,
    })
}

/// Gradient of the encoder parameters given `dL/d offsets` (`N x 16`).
pub fn encoder_backward(
    params: &EncoderParams,
    wavelengths: &[f64],
    range: WavelengthRange,
    d_offsets: &[f64],
) -> Result<Vec<f64>> {
    let layers = params.check()?;
    if d_offsets.len() != wavelengths.len() * SH_COEFFS {
        return Err(Error::Shape(format!(
            "offset gradient has {} entries, expected {}",
            d_offsets.len(),
            wavelengths.len() * SH_COEFFS
        )));
    }
    let mut grads = vec![0.0; params.params.len()];
    for (b, &w) in wavelengths.iter().enumerate() {
        let dy = &d_offsets[b * SH_COEFFS..(b + 1) * SH_COEFFS];
        if dy.iter().all(|&v| v == 0.0) {
            continue;
        }
        let (inputs, pre) = params.forward_one(&layers, embed(w, range, params.num_frequencies));
        let mut d = dy.to_vec();
        for i in (0..layers.len()).rev() {
            if i + 1 < layers.len() {
                for (dv, z) in d.iter_mut().zip(&pre[i]) {
                    *dv *= silu_grad(*z);
                }
            }
            d = layers[i].backward(&params.params, &mut grads, &inputs[i], &d);
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn range() -> WavelengthRange {
        WavelengthRange::new(400.0, 1000.0).unwrap()
    }

    #[test]
    fn embed_endpoints() {
        let e = embed(400.0, range(), 4);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        let e = embed(1000.0, range(), 4);
        assert!(e[0].abs() < 1e-15);
        assert_eq!(e[4], -1.0);
        let e = embed(700.0, range(), 4);
        assert!(e[1].abs() < 1e-15);
        assert_eq!(e[5], -1.0);
    }

    #[test]
    fn embed_clamps_out_of_range() {
        assert_eq!(embed(1200.0, range(), 3), embed(1000.0, range(), 3));
        assert_eq!(embed(100.0, range(), 3), embed(400.0, range(), 3));
    }

    #[test]
    fn fresh_encoder_has_zero_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = EncoderParams::new(6, &[64, 64], &mut rng);
        let off = offsets_for(&p, &[400.0, 550.0, 1000.0], range()).unwrap();
        assert!(off.values.iter().all(|&v| v == 0.0));
        assert_eq!(p.params.len(), (12 * 64 + 64) + (64 * 64 + 64) + (64 * 16 + 16));
    }

    #[test]
    fn equal_wavelengths_equal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = EncoderParams::new(3, &[8], &mut rng);
        p.params.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
        let off = offsets_for(&p, &[600.0, 600.0], range()).unwrap();
        assert_eq!(off.row(0), off.row(1));
    }

    #[test]
    fn hand_evaluated_two_by_two() {
        // L = 1, one hidden layer of width 2.
        let hidden = vec![2];
        let (layers, total) = layers_for(1, &hidden);
        let mut params = vec![0.0; total];
        // hidden = identity, bias (0.1, -0.2)
        params[layers[0].weight.offset..layers[0].weight.offset + 4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        params[layers[0].bias.offset..layers[0].bias.offset + 2].copy_from_slice(&[0.1, -0.2]);
        // output k = (k+1) * h0 - h1 + 0.01 k
        for k in 0..SH_COEFFS {
            params[layers[1].weight.offset + 2 * k] = (k + 1) as f64;
            params[layers[1].weight.offset + 2 * k + 1] = -1.0;
            params[layers[1].bias.offset + k] = 0.01 * k as f64;
        }
        let p = EncoderParams::from_parts(1, hidden, params).unwrap();
        let r = WavelengthRange::new(500.0, 600.0).unwrap();
        let off = offsets_for(&p, &[500.0, 550.0], r).unwrap();
        // 500 nm: embedding (sin 0, cos 0) = (0, 1)
        let h = [silu(0.0 + 0.1), silu(1.0 - 0.2)];
        for k in 0..SH_COEFFS {
            let expect = (k + 1) as f64 * h[0] - h[1] + 0.01 * k as f64;
            assert!((off.row(0)[k] - expect).abs() < 1e-14);
        }
        // 550 nm: embedding (sin π/2, cos π/2) = (1, ~0)
        let c = (std::f64::consts::FRAC_PI_2).cos();
        let h = [silu(1.0 + 0.1), silu(c - 0.2)];
        for k in 0..SH_COEFFS {
            let expect = (k + 1) as f64 * h[0] - h[1] + 0.01 * k as f64;
            assert!((off.row(1)[k] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn final_bias_gradient_is_column_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = EncoderParams::new(4, &[8, 8], &mut rng);
        p.params.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        let wl = [420.0, 600.0, 777.0];
        let d: Vec<f64> = (0..3 * SH_COEFFS).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = encoder_backward(&p, &wl, range(), &d).unwrap();
        let last = p.layers().pop().unwrap();
        for k in 0..SH_COEFFS {
            let col: f64 = (0..3).map(|b| d[b * SH_COEFFS + k]).sum();
            assert!((g[last.bias.offset + k] - col).abs() < 1e-12);
        }
        let zero = encoder_backward(&p, &wl, range(), &vec![0.0; 3 * SH_COEFFS]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = EncoderParams::new(2, &[4], &mut rng);
        assert!(encoder_backward(&p, &[500.0], range(), &[0.0; 3]).is_err());
        p.params.pop();
        assert!(offsets_for(&p, &[500.0], range()).is_err());
        assert!(EncoderParams::from_parts(2, vec![4], vec![0.0; 3]).is_err());
    }
}
