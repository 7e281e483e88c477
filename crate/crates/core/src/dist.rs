//! Numeric primitives for truncated discrete distributions.
//!
//! Everything here works on plain `f64` slices indexed by time step. The
//! convolutions are windowed: the output has the length of the inputs and
//! mass that falls past the window is dropped, never folded back.

use std::cell::RefCell;
use std::sync::Arc;

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this length convolutions use the direct quadratic loop.
pub const DIRECT_CONVOLUTION_CUTOFF: usize = 64;

/// Tolerance on the total mass of a truncated PMF.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Negative entries of magnitude below this are treated as round-off.
pub const CANCELLATION_FLOOR: f64 = 1e-15;

/// Largest exponent used when rescaling exponential weights blockwise.
const MAX_WEIGHT_EXPONENT: f64 = 300.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    Empty,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("negative value {value:e} at index {index} is larger than round-off")]
    NegativeValue { index: usize, value: f64 },
    #[error("invalid probability mass function: {0}")]
    InvalidPmf(String),
}

/// Probability mass over time steps `0..=ttr`.
///
/// Mass past `ttr` is simply absent; the total may be below one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TruncatedPmf(Vec<f64>);

impl TruncatedPmf {
    pub fn new(values: Vec<f64>) -> Result<Self, DistError> {
        if values.is_empty() {
            return Err(DistError::Empty);
        }
        let mut total = 0.0;
        for (index, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(DistError::NonFinite { index });
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(DistError::InvalidPmf(format!(
                    "entry {v} at t={index} outside [0, 1]"
                )));
            }
            total += v;
        }
        if total > 1.0 + MASS_TOLERANCE {
            return Err(DistError::InvalidPmf(format!(
                "total mass {total} exceeds 1"
            )));
        }
        Ok(Self(values))
    }

    /// Geometric law `p (1-p)^(t-1)` for `t >= 1`, truncated at `ttr`.
    pub fn geometric(p: f64, ttr: usize) -> Self {
        let mut values = vec![0.0; ttr + 1];
        let log_q = (-p).ln_1p();
        for (t, v) in values.iter_mut().enumerate().skip(1) {
            *v = if p >= 1.0 {
                if t == 1 {
                    1.0
                } else {
                    0.0
                }
            } else {
                p * ((t - 1) as f64 * log_q).exp()
            };
        }
        Self(values)
    }

    pub fn ttr(&self) -> usize {
        self.0.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn mass(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn cdf(&self) -> Vec<f64> {
        cumulative(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for TruncatedPmf {
    type Error = DistError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<TruncatedPmf> for Vec<f64> {
    fn from(pmf: TruncatedPmf) -> Self {
        pmf.0
    }
}

fn check_finite(x: &[f64]) -> Result<(), DistError> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(DistError::NonFinite { index }),
        None => Ok(()),
    }
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<(), DistError> {
    if a.len() != b.len() {
        return Err(DistError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Running sum `out[t] = x[0] + ... + x[t]`.
pub fn cumulative(x: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    x.iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

/// Linear convolution restricted to the window `0..len(a)`.
pub fn convolve_linear(a: &[f64], b: &[f64]) -> Result<Vec<f64>, DistError> {
    check_same_len(a, b)?;
    check_finite(a)?;
    check_finite(b)?;
    let mut out = convolve_full(a, b);
    out.truncate(a.len());
    Ok(out)
}

/// Untruncated linear convolution, length `len(a) + len(b) - 1`.
pub fn convolve_full(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    if a.len().min(b.len()) < DIRECT_CONVOLUTION_CUTOFF {
        let mut out = vec![0.0; out_len];
        for (i, &x) in a.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (j, &y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        return out;
    }
    let n = fft_len(out_len);
    let fa = forward_real(a, n);
    let fb = forward_real(b, n);
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    let mut out = inverse_real(prod, n);
    out.truncate(out_len);
    out
}

/// Circular convolution of two length-`L` sequences via the fast transform.
pub fn convolve_circular(a: &[f64], b: &[f64]) -> Result<Vec<f64>, DistError> {
    check_same_len(a, b)?;
    if a.is_empty() {
        return Err(DistError::Empty);
    }
    check_finite(a)?;
    check_finite(b)?;
    let to_complex =
        |x: &[f64]| -> Vec<Complex64> { x.iter().map(|&v| Complex64::new(v, 0.0)).collect() };
    let fa = dft(&to_complex(a), Direction::Forward);
    let fb = dft(&to_complex(b), Direction::Forward);
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    Ok(dft(&prod, Direction::Inverse)
        .iter()
        .map(|c| c.re)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Discrete Fourier transform `y_j = sum_k x_k exp(-2 pi i j k / L)`.
///
/// The inverse carries the `1/L` normalisation so that it exactly undoes
/// the forward transform.
pub fn dft(x: &[Complex64], direction: Direction) -> Vec<Complex64> {
    if x.is_empty() {
        return Vec::new();
    }
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fft = match direction {
        Direction::Forward => planner.plan_fft_forward(x.len()),
        Direction::Inverse => planner.plan_fft_inverse(x.len()),
    };
    let mut buf = x.to_vec();
    fft.process(&mut buf);
    if direction == Direction::Inverse {
        let scale = 1.0 / x.len() as f64;
        buf.iter_mut().for_each(|c| *c *= scale);
    }
    buf
}

/// `out[t] = sum_{s <= t} weights[s] * g[s]`.
pub fn prefix_sums(weights: &[f64], g: &[f64]) -> Result<Vec<f64>, DistError> {
    check_same_len(weights, g)?;
    let mut acc = 0.0;
    Ok(weights
        .iter()
        .zip(g)
        .map(|(w, v)| {
            acc += w * v;
            acc
        })
        .collect())
}

/// Exponentially discounted running sum
/// `out[t] = sum_{s <= t} x[s] * exp(-rate * (t - s))`.
///
/// Built from [`prefix_sums`] with weights `exp(rate * (s - r))` relative to
/// a per-block reference time `r`, so no weight exceeds `e^300`.
pub fn decayed_prefix_sums(x: &[f64], rate: f64) -> Vec<f64> {
    if rate == 0.0 {
        return cumulative(x);
    }
    let block = ((MAX_WEIGHT_EXPONENT / rate).floor() as usize).max(1);
    let mut out = Vec::with_capacity(x.len());
    let mut carry = 0.0;
    for chunk in x.chunks(block) {
        let up: Vec<f64> = (0..chunk.len()).map(|k| (rate * k as f64).exp()).collect();
        // Chunk lengths match by construction.
        let partial = prefix_sums(chunk, &up).expect("equal lengths");
        for (k, g) in partial.iter().enumerate() {
            let down = (-rate * k as f64).exp();
            out.push(carry * (-rate * (k as f64 + 1.0)).exp() + g * down);
        }
        carry = *out.last().expect("non-empty chunk");
    }
    out
}

/// Sum of `x[s] * exp(-rate * (hi - s))` over `s` in `lo..=hi`, read off a
/// table produced by [`decayed_prefix_sums`].
pub fn decayed_window(decayed: &[f64], rate: f64, lo: usize, hi: usize) -> f64 {
    if lo > hi {
        return 0.0;
    }
    if lo == 0 {
        return decayed[hi];
    }
    let width = (hi - lo + 1) as f64;
    decayed[hi] - (-rate * width).exp() * decayed[lo - 1]
}

/// Plain window sum `x[lo] + ... + x[hi]` from a cumulative table.
pub fn window(cumulative: &[f64], lo: usize, hi: usize) -> f64 {
    if lo > hi {
        return 0.0;
    }
    if lo == 0 {
        cumulative[hi]
    } else {
        cumulative[hi] - cumulative[lo - 1]
    }
}

/// Clamps round-off negatives to zero; larger negatives are an error.
pub fn settle_negatives(x: &mut [f64]) -> Result<(), DistError> {
    for (index, v) in x.iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(DistError::NonFinite { index });
        }
        if *v < 0.0 {
            if *v > -CANCELLATION_FLOOR {
                *v = 0.0;
            } else {
                return Err(DistError::NegativeValue { index, value: *v });
            }
        }
    }
    Ok(())
}

/// Smallest even length `>= n` of the form `2^a 3^b`.
pub fn fft_len(n: usize) -> usize {
    let n = n.max(2);
    let mut best = n.next_power_of_two();
    let mut pow3 = 1usize;
    while pow3 < best {
        let mut candidate = pow3 * 2;
        while candidate < n {
            candidate *= 2;
        }
        best = best.min(candidate);
        pow3 *= 3;
    }
    best
}

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

fn r2c_plan(n: usize) -> Arc<dyn RealToComplex<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn c2r_plan(n: usize) -> Arc<dyn ComplexToReal<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Half spectrum (`n/2 + 1` bins) of `x` zero-padded to length `n`.
pub fn forward_real(x: &[f64], n: usize) -> Vec<Complex64> {
    assert!(x.len() <= n, "input longer than transform length");
    let plan = r2c_plan(n);
    let mut input = vec![0.0; n];
    input[..x.len()].copy_from_slice(x);
    let mut output = plan.make_output_vec();
    plan.process(&mut input, &mut output)
        .expect("buffer sizes come from the plan");
    output
}

/// Inverse of [`forward_real`], normalised, returning all `n` samples.
pub fn inverse_real(mut spectrum: Vec<Complex64>, n: usize) -> Vec<f64> {
    let plan = c2r_plan(n);
    // The DC and Nyquist bins of a real signal are real; drop round-off.
    if let Some(first) = spectrum.first_mut() {
        first.im = 0.0;
    }
    if n.is_multiple_of(2) {
        if let Some(last) = spectrum.last_mut() {
            last.im = 0.0;
        }
    }
    let mut output = plan.make_output_vec();
    plan.process(&mut spectrum, &mut output)
        .expect("buffer sizes come from the plan");
    let scale = 1.0 / n as f64;
    output.iter_mut().for_each(|v| *v *= scale);
    output
}
