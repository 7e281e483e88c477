//! Compound-geometric aggregation: sums over all sequences of failed
//! attempts followed by one terminating attempt.
//!
//! Both routines compute, for each numerator `x`,
//! `sum_{k>=1} (pf^{*(k-1)} * x)(t)` on the window `t = 0..len`.

use realfft::num_complex::Complex64;

use crate::dist::{
    fft_len, forward_real, inverse_real, settle_negatives, DIRECT_CONVOLUTION_CUTOFF,
};
use crate::par;

use super::EvalError;

/// Tail mass below which the iterated convolution stops.
pub const TAIL_STOP: f64 = 1e-15;

/// Smallest admissible `|1 - F[pf]|` in the Fourier route.
pub const SINGULARITY_FLOOR: f64 = 1e-14;

/// Windowed convolution against a fixed set of sequences, reusing their
/// spectra across calls.
struct WindowedConvolver {
    len: usize,
    fft_len: usize,
    spectra: Vec<Vec<Complex64>>,
    raw: Vec<Vec<f64>>,
}

impl WindowedConvolver {
    fn new(len: usize, kernels: &[&[f64]]) -> Self {
        let fft_len = fft_len(2 * len);
        let spectra = if len >= DIRECT_CONVOLUTION_CUTOFF {
            kernels.iter().map(|k| forward_real(k, fft_len)).collect()
        } else {
            Vec::new()
        };
        Self {
            len,
            fft_len,
            spectra,
            raw: kernels.iter().map(|k| k.to_vec()).collect(),
        }
    }

    /// `x * kernels[i]` for every kernel, truncated to the window.
    fn apply(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n = self.len;
        if n < DIRECT_CONVOLUTION_CUTOFF {
            return self
                .raw
                .iter()
                .map(|k| {
                    let mut out = vec![0.0; n];
                    for (i, &xi) in x.iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        for (j, &kj) in k[..n - i].iter().enumerate() {
                            out[i + j] += xi * kj;
                        }
                    }
                    out
                })
                .collect();
        }
        let fx = forward_real(x, self.fft_len);
        par::map_slice(&self.spectra, |spec| {
            let prod: Vec<Complex64> = fx.iter().zip(spec).map(|(a, b)| a * b).collect();
            let mut out = inverse_real(prod, self.fft_len);
            out.truncate(n);
            out
        })
    }
}

/// Iterated-convolution evaluation of the geometric series.
///
/// Accumulates `state_k = state_{k-1} * pf` and adds `state_k * x`, stopping
/// once the windowed mass of `state_k` drops below [`TAIL_STOP`] or the
/// state has shifted out of the window.
pub fn geometric_series_direct(
    pf: &[f64],
    numerators: &[&[f64]],
) -> Result<Vec<Vec<f64>>, EvalError> {
    let n = pf.len();
    for x in numerators {
        if x.len() != n {
            return Err(EvalError::WindowMismatch {
                left: n,
                right: x.len(),
            });
        }
    }
    if n == 0 {
        return Ok(numerators.iter().map(|_| Vec::new()).collect());
    }
    if pf[0] > TAIL_STOP {
        return Err(EvalError::ZeroDurationFailure { mass: pf[0] });
    }
    let mut pf = pf.to_vec();
    pf[0] = 0.0;

    let mut kernels: Vec<&[f64]> = vec![&pf];
    kernels.extend_from_slice(numerators);
    let conv = WindowedConvolver::new(n, &kernels);

    let mut results: Vec<Vec<f64>> = numerators.iter().map(|x| x.to_vec()).collect();
    let mut state = pf.clone();
    // With pf[0] == 0 every extra failure shifts support by at least one step.
    for _ in 1..n {
        let mass: f64 = state.iter().sum();
        if mass < TAIL_STOP {
            break;
        }
        let mut products = conv.apply(&state);
        for (acc, term) in results.iter_mut().zip(&products[1..]) {
            acc.iter_mut().zip(term).for_each(|(a, b)| *a += b);
        }
        state = products.swap_remove(0);
    }
    for r in &mut results {
        settle_negatives(r)?;
    }
    Ok(results)
}

/// Exponential tilt that keeps wrap-around below rounding level.
///
/// The series tail decays like `e^(-kappa t)` with `sum_t pf[t] e^(kappa t) = 1`.
/// Mass wrapping from beyond the padded length `l` is damped by
/// `e^(-(a + kappa) l)`, while untilting multiplies rounding errors by up to
/// `e^(a n)`. The two balance at `a + kappa = ln(1/EPSILON) / (l + n)`, so
/// only the shortfall of `kappa` below that rate is made up by tilting.
fn tilt_rate(pf: &[f64], l: usize) -> f64 {
    let n = pf.len();
    let target = -f64::EPSILON.ln() / (l + n) as f64;
    // f(k) = sum pf[t] e^(k t) and its derivative, by running powers.
    let moments = |k: f64| -> (f64, f64) {
        let z = k.exp();
        let (mut zt, mut f, mut df) = (1.0, 0.0, 0.0);
        for (t, &p) in pf.iter().enumerate() {
            f += p * zt;
            df += t as f64 * p * zt;
            zt *= z;
        }
        (f, df)
    };
    let (f, _) = moments(target);
    if f <= 1.0 {
        return 0.0;
    }
    if pf.iter().sum::<f64>() >= 1.0 {
        return target;
    }
    // f is convex and increasing, so Newton from the right converges
    // monotonically onto the root.
    let mut k = target;
    for _ in 0..60 {
        let (f, df) = moments(k);
        if f - 1.0 < 1e-13 || df <= 0.0 {
            break;
        }
        k -= (f - 1.0) / df;
        if k <= 0.0 {
            k = 0.0;
            break;
        }
    }
    target - k
}

/// Fourier-domain evaluation `F^{-1}[F[x] / (1 - F[pf])]` on arrays
/// zero-padded to `padding * len`, truncated back to the window.
///
/// When the series decays too slowly to vanish before the padded length,
/// every sequence is tilted by `e^(-a t)` before transforming and untilted
/// afterwards; see [`tilt_rate`].
pub fn geometric_series_fourier(
    pf: &[f64],
    numerators: &[&[f64]],
    padding: usize,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let n = pf.len();
    for x in numerators {
        if x.len() != n {
            return Err(EvalError::WindowMismatch {
                left: n,
                right: x.len(),
            });
        }
    }
    if n == 0 {
        return Ok(numerators.iter().map(|_| Vec::new()).collect());
    }
    if pf[0] > TAIL_STOP {
        return Err(EvalError::ZeroDurationFailure { mass: pf[0] });
    }
    let l = fft_len(padding.max(1) * n);
    let rate = tilt_rate(pf, l);
    let tilt: Vec<f64> = (0..n).map(|t| (-rate * t as f64).exp()).collect();
    let tilted = |x: &[f64]| -> Vec<f64> { x.iter().zip(&tilt).map(|(v, w)| v * w).collect() };

    let mut pf = tilted(pf);
    pf[0] = 0.0;
    let denom: Vec<Complex64> = forward_real(&pf, l)
        .into_iter()
        .map(|c| Complex64::new(1.0, 0.0) - c)
        .collect();
    if let Some((index, d)) = denom
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.norm().total_cmp(&y.1.norm()))
    {
        if d.norm() < SINGULARITY_FLOOR {
            return Err(EvalError::Singular {
                frequency: index,
                magnitude: d.norm(),
            });
        }
    }
    let mut outputs = par::map_slice(numerators, |x| {
        let spec: Vec<Complex64> = forward_real(&tilted(x), l)
            .into_iter()
            .zip(&denom)
            .map(|(a, d)| a / d)
            .collect();
        let mut out = inverse_real(spec, l);
        out.truncate(n);
        // Attempts take at least one step, so time 0 is exact.
        out[0] = x[0];
        out
    });
    // Round-off is uniform in the tilted frame, so settle before untilting.
    for r in &mut outputs {
        settle_negatives(r)?;
        r.iter_mut().zip(&tilt).for_each(|(v, w)| *v /= w);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_attempts_give_geometric_law() {
        let n = 40;
        let mut ps = vec![0.0; n];
        let mut pf = vec![0.0; n];
        ps[1] = 0.5;
        pf[1] = 0.5;
        let direct = geometric_series_direct(&pf, &[&ps]).unwrap();
        let fourier = geometric_series_fourier(&pf, &[&ps], 3).unwrap();
        for t in 1..n {
            let expected = 0.5f64.powi(t as i32);
            assert!((direct[0][t] - expected).abs() < 1e-15);
            assert!((fourier[0][t] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn no_failures_is_identity() {
        let ps = [0.0, 0.2, 0.3, 0.1];
        let pf = [0.0; 4];
        let out = geometric_series_direct(&pf, &[&ps]).unwrap();
        assert_eq!(out[0], ps.to_vec());
    }

    #[test]
    fn certain_failure_stays_exact_on_the_window() {
        // Unit failure mass makes the untilted denominator vanish at zero
        // frequency; inside the window the series is still well defined.
        let mut pf = vec![0.0; 50];
        let mut x = vec![0.0; 50];
        pf[1] = 1.0;
        x[1] = 1.0;
        let f = geometric_series_fourier(&pf, &[&x], 3).unwrap();
        for (t, y) in f[0].iter().enumerate().skip(1) {
            assert!((y - 1.0).abs() < 1e-10, "t={t}: {y}");
        }
    }

    #[test]
    fn near_certain_failure_does_not_alias() {
        // Mean series duration far beyond the padded length.
        let n = 400;
        let mut pf = vec![0.0; n];
        let mut x = vec![0.0; n];
        for t in 20..60 {
            pf[t] = (1.0 - 1e-6) / 40.0;
            x[t] = 1e-6 / 40.0;
        }
        let d = geometric_series_direct(&pf, &[&x]).unwrap();
        let f = geometric_series_fourier(&pf, &[&x], 3).unwrap();
        for t in 0..n {
            assert!((d[0][t] - f[0][t]).abs() < 1e-15 + 1e-9 * d[0][t], "t={t}");
        }
    }

    #[test]
    fn zero_duration_failures_are_rejected() {
        assert!(matches!(
            geometric_series_direct(&[0.5, 0.0], &[&[0.0, 0.5]]),
            Err(EvalError::ZeroDurationFailure { .. })
        ));
    }

    #[test]
    fn long_windows_use_fft_and_agree() {
        let n = 300;
        let mut ps = vec![0.0; n];
        let mut pf = vec![0.0; n];
        for t in 1..40 {
            ps[t] = 0.7 / 39.0;
            pf[t] = 0.7 / 39.0 * (t as f64 / 20.0);
        }
        let s: f64 = pf.iter().sum();
        pf.iter_mut().for_each(|v| *v *= 0.3 / s);
        let d = geometric_series_direct(&pf, &[&ps]).unwrap();
        let f = geometric_series_fourier(&pf, &[&ps], 3).unwrap();
        for t in 0..n {
            assert!((d[0][t] - f[0][t]).abs() < 1e-12, "t={t}");
        }
    }
}
