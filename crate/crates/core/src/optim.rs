//! First-order adaptive-moment updates over flat parameter vectors.

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One update at 1-based `step`. `hyper(i)` gives `(lr, eps)` for entry `i`.
pub fn adam_step(params: &mut [f64], grads: &[f64], mom: &mut Moments, step: u64, hyper: impl Fn(usize) -> (f64, f64)) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), mom.len());
    let bc1 = 1.0 - BETA1.powf(step as f64);
    let bc2 = 1.0 - BETA2.powf(step as f64);
    let bc2s = bc2.sqrt();
    for i in 0..params.len() {
        let g = grads[i];
        let m = BETA1 * mom.m[i] + (1.0 - BETA1) * g;
        let v = BETA2 * mom.v[i] + (1.0 - BETA2) * g * g;
        mom.m[i] = m;
        mom.v[i] = v;
        let (lr, eps) = hyper(i);
        if lr == 0.0 {
            continue;
        }
        params[i] -= lr / bc1 * m / (v.sqrt() / bc2s + eps);
    }
}
