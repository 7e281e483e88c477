//! Secret-key rate of BB84 run over the delivered links.

use serde::Serialize;
use thiserror::Error;

use crate::evaluator::{eval_protocol, EvalError, LinkState};
use crate::protocol::{EvalConfig, ProtocolNode};

#[derive(Debug, Error)]
pub enum KeyRateError {
    #[error("{what} = {value} outside [0, 1]")]
    Range { what: &'static str, value: f64 },
    #[error("no delivery within the truncation window; no key can be produced")]
    NoKey,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// How the secret-key fraction is averaged over delivery times.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FractionMode {
    /// `r` of the averaged Werner parameter.
    #[default]
    Averaged,
    /// Average of `r(W(t))` over delivery times.
    Pointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SecretKeyReport {
    /// Mean waiting time including restarts after windows without delivery.
    pub t_bar: f64,
    pub w_bar: f64,
    pub f_bar: f64,
    /// Secret-key fraction.
    pub r: f64,
    /// Secret bits per time step.
    pub rate: f64,
    pub covered_mass: f64,
}

pub fn binary_entropy(p: f64) -> Result<f64, KeyRateError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(KeyRateError::Range {
            what: "probability",
            value: p,
        });
    }
    if p == 0.0 || p == 1.0 {
        return Ok(0.0);
    }
    Ok(-p * p.log2() - (1.0 - p) * (1.0 - p).log2())
}

/// `max(0, 1 - 2 h((1 - w) / 2))`; bit and phase error rates coincide for
/// Werner states.
pub fn secret_key_fraction(w: f64) -> Result<f64, KeyRateError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(KeyRateError::Range {
            what: "werner parameter",
            value: w,
        });
    }
    Ok((1.0 - 2.0 * binary_entropy((1.0 - w) / 2.0)?).max(0.0))
}

/// `(t_bar, w_bar)` for a protocol restarted whenever a window of `ttr`
/// steps passes without delivery.
pub fn truncated_averages(ls: &LinkState) -> Result<(f64, f64), KeyRateError> {
    let p_tr = ls.covered_mass();
    if p_tr <= 0.0 {
        return Err(KeyRateError::NoKey);
    }
    let ttr = ls.ttr() as f64;
    let mean: f64 = ls.pmf().iter().enumerate().map(|(t, p)| t as f64 * p).sum();
    let w: f64 = ls.pmf().iter().zip(ls.werner()).map(|(p, w)| p * w).sum();
    let t_bar = ttr * (1.0 - p_tr) / p_tr + mean / p_tr;
    Ok((t_bar, (w / p_tr).clamp(0.0, 1.0)))
}

pub fn secret_key_rate(ls: &LinkState) -> Result<SecretKeyReport, KeyRateError> {
    secret_key_rate_with(ls, FractionMode::Averaged)
}

pub fn secret_key_rate_with(
    ls: &LinkState,
    mode: FractionMode,
) -> Result<SecretKeyReport, KeyRateError> {
    let (t_bar, w_bar) = truncated_averages(ls)?;
    let covered_mass = ls.covered_mass();
    let r = match mode {
        FractionMode::Averaged => secret_key_fraction(w_bar)?,
        FractionMode::Pointwise => {
            let mut acc = 0.0;
            for (p, w) in ls.pmf().iter().zip(ls.werner()) {
                if *p > 0.0 {
                    acc += p * secret_key_fraction(*w)?;
                }
            }
            (acc / covered_mass).clamp(0.0, 1.0)
        }
    };
    Ok(SecretKeyReport {
        t_bar,
        w_bar,
        f_bar: (1.0 + 3.0 * w_bar) / 4.0,
        r,
        rate: r / t_bar,
        covered_mass,
    })
}

/// Doubles `ttr` from `cfg.ttr` until the covered mass reaches `target`
/// or `max_ttr` is hit. Returns the last evaluation and its `ttr`.
pub fn grow_ttr(
    protocol: &ProtocolNode,
    cfg: &EvalConfig,
    target: f64,
    max_ttr: usize,
) -> Result<(LinkState, usize), KeyRateError> {
    let mut c = *cfg;
    loop {
        let ls = eval_protocol(protocol, &c)?;
        if ls.covered_mass() >= target || c.ttr >= max_ttr {
            return Ok((ls, c.ttr));
        }
        c.ttr = (c.ttr * 2).min(max_ttr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::eval_gen;
    use crate::protocol::{Backend, HardwareParams};

    #[test]
    fn entropy_values() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert!((binary_entropy(0.11).unwrap() - 0.499916).abs() < 1e-6);
        assert!(binary_entropy(1.5).is_err());
    }

    #[test]
    fn fraction_values() {
        assert_eq!(secret_key_fraction(1.0).unwrap(), 1.0);
        assert!((secret_key_fraction(0.98).unwrap() - 0.838414).abs() < 1e-6);
        assert_eq!(secret_key_fraction(0.5).unwrap(), 0.0);
        assert!(secret_key_fraction(-0.1).is_err());
    }

    #[test]
    fn fraction_is_monotone() {
        let mut prev = 0.0;
        for i in 0..=1000 {
            let r = secret_key_fraction(i as f64 / 1000.0).unwrap();
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn deterministic_delivery() {
        let mut pmf = vec![0.0; 8];
        pmf[5] = 1.0;
        let ls = LinkState::new(pmf, vec![1.0; 8]).unwrap();
        let (t, w) = truncated_averages(&ls).unwrap();
        assert_eq!((t, w), (5.0, 1.0));
    }

    #[test]
    fn truncation_of_a_geometric_law_is_cost_neutral() {
        let ls = eval_gen(0.5, 1.0, 1);
        let (t, _) = truncated_averages(&ls).unwrap();
        assert!((t - 2.0).abs() < 1e-15);
        let ls = eval_gen(0.3, 1.0, 7);
        let (t, _) = truncated_averages(&ls).unwrap();
        assert!((t - 1.0 / 0.3).abs() < 1e-12);
    }

    #[test]
    fn perfect_chain_has_unit_rate() {
        let ls = eval_gen(1.0, 1.0, 4);
        let rep = secret_key_rate(&ls).unwrap();
        assert!((rep.rate - 1.0).abs() < 1e-15);
        assert_eq!(rep.f_bar, 1.0);
    }

    #[test]
    fn poor_links_give_no_key() {
        let ls = eval_gen(0.5, 0.5, 30);
        assert_eq!(secret_key_rate(&ls).unwrap().rate, 0.0);
    }

    #[test]
    fn empty_window_is_an_error() {
        let ls = LinkState::new(vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert!(matches!(secret_key_rate(&ls), Err(KeyRateError::NoKey)));
    }

    #[test]
    fn pointwise_mode_is_below_averaged_for_spread_werner() {
        let ls = LinkState::new(vec![0.0, 0.5, 0.5], vec![0.0, 1.0, 0.9]).unwrap();
        let a = secret_key_rate_with(&ls, FractionMode::Averaged).unwrap();
        let p = secret_key_rate_with(&ls, FractionMode::Pointwise).unwrap();
        assert!(p.r > 0.0 && (p.r - a.r).abs() > 1e-6);
    }

    #[test]
    fn ttr_growth_reaches_coverage() {
        let hw = HardwareParams {
            p_gen: 0.05,
            p_swap: 0.5,
            w0: 0.99,
            t_coh: 1e4,
        };
        let tree = ProtocolNode::swap(ProtocolNode::gen(), ProtocolNode::gen());
        let cfg = EvalConfig::new(16, Backend::Fast, hw);
        let (ls, ttr) = grow_ttr(&tree, &cfg, 0.99, 1 << 14).unwrap();
        assert!(ls.covered_mass() >= 0.99);
        assert!(ttr > 16 && ttr.is_power_of_two());
    }
}
