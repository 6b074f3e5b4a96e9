//! Small numeric helpers shared across modules.

use alloc::vec;
use alloc::vec::Vec;
use core::hash::Hasher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use siphasher::sip::SipHasher13;

/// Seeded generator used by every stochastic routine in the crate.
pub(crate) type Rng = ChaCha8Rng;

pub(crate) fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a child seed from a parent seed and a byte label.
pub(crate) fn derive_seed(seed: u64, label: &[u8]) -> u64 {
    let mut h = SipHasher13::new_with_keys(seed, 0x5eed_5eed_5eed_5eed);
    h.write(label);
    h.finish()
}

/// Running arithmetic mean, `m += (x - m) / n`.
///
/// A stream of identical values `c` yields exactly `c`.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct RunningMean {
    mean: f64,
    count: usize,
}

impl RunningMean {
    pub(crate) fn push(&mut self, x: f64) {
        self.count += 1;
        self.mean += (x - self.mean) / self.count as f64;
    }

    pub(crate) fn count(&self) -> usize {
        self.count
    }

    pub(crate) fn mean(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }
}

/// Sum in slice order; the order every sum-constraint check uses.
pub(crate) fn ordered_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().fold(0.0, |acc, x| acc + x)
}

/// Splits `total` into `n` near-equal parts whose left-to-right sum is exactly
/// `total`. All parts equal `total / n` except that the last absorbs rounding.
pub(crate) fn exact_even_split(total: f64, n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let mut parts = vec![total / n as f64; n];
    let prefix = ordered_sum(parts[..n - 1].iter().copied());
    parts[n - 1] = closing_term(prefix, total);
    parts
}

/// Total order on finite floats, as integers.
fn float_key(x: f64) -> i64 {
    let b = x.to_bits() as i64;
    if b < 0 {
        -(b & i64::MAX)
    } else {
        b
    }
}

fn from_key(k: i64) -> f64 {
    if k < 0 {
        f64::from_bits((-k) as u64 | (1 << 63))
    } else {
        f64::from_bits(k as u64)
    }
}

/// A value `x` with `prefix + x == total` in floating point, or the closest
/// candidate found when no such value exists.
pub(crate) fn closing_term(prefix: f64, total: f64) -> f64 {
    let guess = total - prefix;
    if prefix + guess == total || !guess.is_finite() {
        return guess;
    }
    // `prefix + x` is monotone in `x`; search the float lattice around `guess`
    let slack = 4.0 * (libm::fabs(total) + libm::fabs(prefix)) * f64::EPSILON;
    let (mut lo, mut hi) = (float_key(guess - slack), float_key(guess + slack));
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if prefix + from_key(mid) < total {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let x = from_key(lo);
    if prefix + x == total {
        x
    } else {
        guess
    }
}

pub(crate) fn population_variance(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = ordered_sum(values.iter().copied()) / n;
    Some(ordered_sum(values.iter().map(|v| (v - mean) * (v - mean))) / n)
}

/// Adam with bias correction, operating on a flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub(crate) fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descends along `grad`. Coordinates with zero gradient and zero moment
    /// are skipped so sparse updates stay cheap.
    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grad[i];
            if g == 0.0 && self.m[i] == 0.0 && self.v[i] == 0.0 {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
        }
    }
}

/// Plain or adaptive first-order update rule.
#[derive(Debug, Clone)]
pub(crate) enum Stepper {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Stepper {
    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Stepper::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Stepper::Adam(adam) => adam.step(params, grad),
        }
    }
}
