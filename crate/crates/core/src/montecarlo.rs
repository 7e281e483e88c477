//! Monte Carlo sampling of delivery time and Werner parameter, used to
//! validate the exact evaluator.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::LinkState;
use crate::par;
use crate::protocol::{
    validate_protocol, CutoffSpec, EvalConfig, NodeKind, ProtocolNode, Violation,
};

/// Attempt budget per sample before the sampler gives up.
pub const DEFAULT_STEP_CAP: u64 = 1_000_000_000;

/// Samples per independently seeded stream.
pub const CHUNK: usize = 1024;

/// Decile z-scores beyond this bound fail a comparison.
pub const Z_LIMIT: f64 = 4.0;

#[derive(Debug, Error)]
pub enum McError {
    #[error("invalid protocol: {0:?}")]
    InvalidProtocol(Vec<Violation>),
    #[error("sample exceeded {cap} attempts")]
    StepCap { cap: u64 },
    #[error("n must be at least 1")]
    NoSamples,
    #[error("window mismatch: samples cover ttr={samples}, exact covers ttr={exact}")]
    WindowMismatch { samples: usize, exact: usize },
}

pub type McRng = Xoshiro256PlusPlus;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSample {
    pub t: u64,
    pub w: f64,
}

/// Histogram of sampled delivery times with per-time Werner moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub ttr: usize,
    pub n: u64,
    pub seed: u64,
    /// `counts[t]` for `t = 0..=ttr`; index 0 stays empty.
    pub counts: Vec<u64>,
    /// Samples with `t > ttr`.
    pub overflow: u64,
    pub werner_sum: Vec<f64>,
    pub werner_sq_sum: Vec<f64>,
}

impl McEstimate {
    fn empty(ttr: usize, seed: u64) -> Self {
        Self {
            ttr,
            n: 0,
            seed,
            counts: vec![0; ttr + 1],
            overflow: 0,
            werner_sum: vec![0.0; ttr + 1],
            werner_sq_sum: vec![0.0; ttr + 1],
        }
    }

    fn record(&mut self, s: McSample) {
        self.n += 1;
        match usize::try_from(s.t) {
            Ok(t) if t <= self.ttr => {
                self.counts[t] += 1;
                self.werner_sum[t] += s.w;
                self.werner_sq_sum[t] += s.w * s.w;
            }
            _ => self.overflow += 1,
        }
    }

    fn merge(&mut self, other: &Self) {
        self.n += other.n;
        self.overflow += other.overflow;
        for t in 0..=self.ttr {
            self.counts[t] += other.counts[t];
            self.werner_sum[t] += other.werner_sum[t];
            self.werner_sq_sum[t] += other.werner_sq_sum[t];
        }
    }

    pub fn werner_mean(&self, t: usize) -> Option<f64> {
        (self.counts[t] > 0).then(|| self.werner_sum[t] / self.counts[t] as f64)
    }

    pub fn empirical_cdf(&self) -> Vec<f64> {
        let mut acc = 0u64;
        self.counts
            .iter()
            .map(|c| {
                acc += c;
                acc as f64 / self.n as f64
            })
            .collect()
    }

    pub fn mean_time(&self) -> f64 {
        let s: f64 = self
            .counts
            .iter()
            .enumerate()
            .map(|(t, &c)| t as f64 * c as f64)
            .sum();
        s / (self.n - self.overflow) as f64
    }
}

struct Sampler<'a> {
    cfg: &'a EvalConfig,
    rate: f64,
    cap: u64,
    steps: u64,
}

impl Sampler<'_> {
    fn geometric(rng: &mut McRng, p: f64) -> u64 {
        if p >= 1.0 {
            return 1;
        }
        // U in (0, 1] keeps the logarithm finite.
        let u = 1.0 - rng.random::<f64>();
        let t = (u.ln() / (-p).ln_1p()).ceil();
        if t < 1.0 {
            1
        } else if t >= u64::MAX as f64 {
            u64::MAX
        } else {
            t as u64
        }
    }

    fn sample(&mut self, node: &ProtocolNode, rng: &mut McRng) -> Result<McSample, McError> {
        if node.kind == NodeKind::Gen {
            let o = node.leaf_override.unwrap_or_default();
            let p = o.p_gen.unwrap_or(self.cfg.hardware.p_gen);
            let w0 = o.w0.unwrap_or(self.cfg.hardware.w0);
            return Ok(McSample {
                t: Self::geometric(rng, p),
                w: w0,
            });
        }
        let mut elapsed: u64 = 0;
        loop {
            self.steps += 1;
            if self.steps > self.cap {
                return Err(McError::StepCap { cap: self.cap });
            }
            let a = self.sample(&node.children[0], rng)?;
            let b = self.sample(&node.children[1], rng)?;
            let gap = a.t.abs_diff(b.t);
            let decay = (-self.rate * gap as f64).exp();
            let (wa, wb) = match a.t.cmp(&b.t) {
                std::cmp::Ordering::Less => (a.w * decay, b.w),
                std::cmp::Ordering::Greater => (a.w, b.w * decay),
                std::cmp::Ordering::Equal => (a.w, b.w),
            };
            let later = a.t.max(b.t);
            let rejected_at = match node.cutoff {
                None => None,
                Some(CutoffSpec::DifTime { tau }) => {
                    (gap > tau).then(|| a.t.min(b.t).saturating_add(tau))
                }
                Some(CutoffSpec::MaxTime { tau }) => (later > tau).then_some(tau),
                Some(CutoffSpec::Fidelity { w_cut }) => (wa < w_cut || wb < w_cut).then_some(later),
            };
            if let Some(d) = rejected_at {
                elapsed = elapsed.saturating_add(d);
                continue;
            }
            let (p, w_out) = match node.kind {
                NodeKind::Swap => (self.cfg.hardware.p_swap, wa * wb),
                _ => {
                    let p = (1.0 + wa * wb) / 2.0;
                    (p, (wa + wb + 4.0 * wa * wb) / 6.0 / p)
                }
            };
            elapsed = elapsed.saturating_add(later);
            if rng.random::<f64>() < p {
                return Ok(McSample {
                    t: elapsed,
                    w: w_out.clamp(0.0, 1.0),
                });
            }
        }
    }
}

/// Draws one `(t, w)` tuple.
pub fn sample_protocol(
    root: &ProtocolNode,
    cfg: &EvalConfig,
    rng: &mut McRng,
) -> Result<McSample, McError> {
    sample_with_cap(root, cfg, rng, DEFAULT_STEP_CAP)
}

pub fn sample_with_cap(
    root: &ProtocolNode,
    cfg: &EvalConfig,
    rng: &mut McRng,
    cap: u64,
) -> Result<McSample, McError> {
    let mut s = Sampler {
        cfg,
        rate: cfg.hardware.decay_rate(),
        cap,
        steps: 0,
    };
    s.sample(root, rng)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for chunk `index` of a run seeded with `seed`.
pub fn chunk_rng(seed: u64, index: u64) -> McRng {
    McRng::seed_from_u64(splitmix(splitmix(seed) ^ index))
}

/// Histogram of `n` samples on the window `0..=cfg.ttr`. Identical for a
/// given seed regardless of thread count.
pub fn estimate_distribution(
    root: &ProtocolNode,
    cfg: &EvalConfig,
    n: u64,
    seed: u64,
) -> Result<McEstimate, McError> {
    if n == 0 {
        return Err(McError::NoSamples);
    }
    let v = validate_protocol(root);
    if !v.is_empty() {
        return Err(McError::InvalidProtocol(v));
    }
    let chunks = n.div_ceil(CHUNK as u64) as usize;
    let parts = par::map_range(chunks, |c| -> Result<McEstimate, McError> {
        let mut rng = chunk_rng(seed, c as u64);
        let mut est = McEstimate::empty(cfg.ttr, seed);
        let todo = (n - c as u64 * CHUNK as u64).min(CHUNK as u64);
        for _ in 0..todo {
            est.record(sample_protocol(root, cfg, &mut rng)?);
        }
        Ok(est)
    });
    let mut total = McEstimate::empty(cfg.ttr, seed);
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecileCheck {
    pub q: f64,
    pub t: usize,
    pub exact_cdf: f64,
    pub empirical_cdf: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub n: u64,
    pub seed: u64,
    pub deciles: Vec<DecileCheck>,
    pub max_cdf_gap: f64,
    /// Count-weighted share of delivery times whose sampled Werner mean lies
    /// within three standard errors of the exact value.
    pub werner_within_3sigma: f64,
    pub pass: bool,
}

/// Compares a sampled histogram with the exact distribution.
pub fn compare_to_exact(est: &McEstimate, exact: &LinkState) -> Result<ComparisonReport, McError> {
    if est.ttr != exact.ttr() {
        return Err(McError::WindowMismatch {
            samples: est.ttr,
            exact: exact.ttr(),
        });
    }
    let n = est.n as f64;
    let exact_cdf = exact.distribution().cdf();
    let emp_cdf = est.empirical_cdf();

    let mut deciles = Vec::new();
    for k in 1..=9 {
        let q = k as f64 / 10.0;
        let Some(t) = exact_cdf.iter().position(|&f| f >= q) else {
            continue;
        };
        let (f, fh) = (exact_cdf[t].min(1.0), emp_cdf[t]);
        let var = f * (1.0 - f) / n;
        let z = if var > 0.0 {
            (fh - f) / var.sqrt()
        } else if (fh - f).abs() < 1e-12 {
            0.0
        } else {
            f64::INFINITY.copysign(fh - f)
        };
        deciles.push(DecileCheck {
            q,
            t,
            exact_cdf: f,
            empirical_cdf: fh,
            z,
        });
    }
    let max_cdf_gap = exact_cdf
        .iter()
        .zip(&emp_cdf)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let (mut within, mut weight) = (0.0, 0.0);
    for t in 0..=est.ttr {
        let c = est.counts[t];
        if c < 2 || exact.pmf()[t] == 0.0 {
            continue;
        }
        let cf = c as f64;
        let mean = est.werner_sum[t] / cf;
        let var = ((est.werner_sq_sum[t] - est.werner_sum[t] * mean) / (cf - 1.0)).max(0.0);
        let se = (var / cf).sqrt();
        weight += cf;
        if (mean - exact.werner()[t]).abs() <= 3.0 * se + 1e-9 {
            within += cf;
        }
    }
    let pass = deciles.iter().all(|d| d.z.abs() <= Z_LIMIT);
    Ok(ComparisonReport {
        n: est.n,
        seed: est.seed,
        deciles,
        max_cdf_gap,
        werner_within_3sigma: if weight > 0.0 { within / weight } else { 1.0 },
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{eval_gen, eval_protocol};
    use crate::protocol::{Backend, HardwareParams};

    fn cfg(p_gen: f64, p_swap: f64, ttr: usize) -> EvalConfig {
        EvalConfig::new(
            ttr,
            Backend::Fast,
            HardwareParams {
                p_gen,
                p_swap,
                w0: 0.9,
                t_coh: 50.0,
            },
        )
    }

    fn chain() -> ProtocolNode {
        ProtocolNode::swap(ProtocolNode::gen(), ProtocolNode::gen())
    }

    #[test]
    fn certain_links_arrive_at_once() {
        let c = cfg(1.0, 1.0, 5);
        let mut rng = McRng::seed_from_u64(1);
        for _ in 0..20 {
            let s = sample_protocol(&chain(), &c, &mut rng).unwrap();
            assert_eq!(s.t, 1);
            assert!((s.w - 0.81).abs() < 1e-15);
        }
    }

    #[test]
    fn geometric_mean_is_inverse_probability() {
        let c = cfg(0.5, 1.0, 200);
        let est = estimate_distribution(&ProtocolNode::gen(), &c, 100_000, 7).unwrap();
        // sd of a geometric(0.5) is sqrt(2).
        let se = 2f64.sqrt() / (100_000f64).sqrt();
        assert!((est.mean_time() - 2.0).abs() < 3.0 * se);
    }

    #[test]
    fn runs_are_reproducible() {
        let c = cfg(0.3, 0.5, 100);
        for seed in [1, 2, 3] {
            let a = estimate_distribution(&chain(), &c, 5000, seed).unwrap();
            let b = estimate_distribution(&chain(), &c, 5000, seed).unwrap();
            assert_eq!(a, b);
        }
        let a = estimate_distribution(&chain(), &c, 5000, 1).unwrap();
        let b = estimate_distribution(&chain(), &c, 5000, 2).unwrap();
        assert_ne!(a.counts, b.counts);
    }

    #[test]
    fn counts_add_up() {
        let c = cfg(0.1, 0.5, 20);
        let est = estimate_distribution(&chain(), &c, 3000, 5).unwrap();
        assert_eq!(est.counts.iter().sum::<u64>() + est.overflow, 3000);
        assert!(est.overflow > 0);
    }

    #[test]
    fn sampling_the_exact_law_passes() {
        let c = cfg(0.3, 0.6, 200);
        let tree = chain().with_cutoff(CutoffSpec::DifTime { tau: 4 });
        let exact = eval_protocol(&tree, &c).unwrap();
        let est = estimate_distribution(&tree, &c, 100_000, 11).unwrap();
        let rep = compare_to_exact(&est, &exact).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.werner_within_3sigma > 0.95);
    }

    #[test]
    fn shifted_law_fails() {
        let c = cfg(0.5, 1.0, 60);
        let est = estimate_distribution(&ProtocolNode::gen(), &c, 20_000, 3).unwrap();
        let exact = eval_gen(0.5, 0.9, 60);
        let mut shifted = vec![0.0; 61];
        shifted[1..].copy_from_slice(&exact.pmf()[..60]);
        let shifted = LinkState::new(shifted, vec![0.9; 61]).unwrap();
        assert!(!compare_to_exact(&est, &shifted).unwrap().pass);
    }

    #[test]
    fn deterministic_case_has_no_gap() {
        let c = cfg(1.0, 1.0, 4);
        let est = estimate_distribution(&chain(), &c, 100, 0).unwrap();
        let exact = eval_protocol(&chain(), &c).unwrap();
        let rep = compare_to_exact(&est, &exact).unwrap();
        assert!(rep.max_cdf_gap < 1e-15);
        assert!(rep.pass);
    }

    #[test]
    fn step_cap_aborts() {
        let c = cfg(0.5, 0.01, 10);
        let tree = chain().with_cutoff(CutoffSpec::DifTime { tau: 0 });
        let mut failures = 0;
        for s in 0..50 {
            let mut rng = McRng::seed_from_u64(s);
            if matches!(
                sample_with_cap(&tree, &c, &mut rng, 1),
                Err(McError::StepCap { .. })
            ) {
                failures += 1;
            }
        }
        assert!(failures > 40);
    }

    #[test]
    fn mismatched_window_is_rejected() {
        let c = cfg(0.5, 1.0, 10);
        let est = estimate_distribution(&ProtocolNode::gen(), &c, 10, 0).unwrap();
        let exact = eval_gen(0.5, 0.9, 11);
        assert!(compare_to_exact(&est, &exact).is_err());
    }
}
