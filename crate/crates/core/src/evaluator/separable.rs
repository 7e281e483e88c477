//! Linear-time attempt kernels.
//!
//! For a fixed later arrival `t` the sum over the earlier arrival only
//! involves window sums of `pmf` and of `pmf * w * exp(-gap / t_coh)`, both
//! of which are read off running tables.

use crate::dist::{cumulative, decayed_prefix_sums, decayed_window, window};
use crate::par;
use crate::protocol::{CutoffSpec, HardwareParams};

use super::{EvalError, LinkState, PrimedKernels, UnitKind};

/// Primed kernels of one attempt in `O(ttr)`.
///
/// Supports no cut-off and the time-based strategies; `Fidelity` yields
/// [`EvalError::Unsupported`].
pub fn separable_kernels(
    a: &LinkState,
    b: &LinkState,
    unit: UnitKind,
    cutoff: Option<&CutoffSpec>,
    hw: &HardwareParams,
) -> Result<PrimedKernels, EvalError> {
    let (tau, deadline) = match cutoff {
        None => (None, None),
        Some(CutoffSpec::DifTime { tau }) => (Some(to_usize(*tau)), None),
        Some(CutoffSpec::MaxTime { tau }) => (None, Some(to_usize(*tau))),
        Some(CutoffSpec::Fidelity { .. }) => {
            return Err(EvalError::Unsupported {
                what: "fidelity cut-offs with the fast backend".into(),
            })
        }
    };
    let n = a.len().min(b.len());
    let rate = hw.decay_rate();
    let (pa, wa) = (&a.pmf()[..n], &a.werner()[..n]);
    let (pb, wb) = (&b.pmf()[..n], &b.werner()[..n]);
    let ca = cumulative(pa);
    let cb = cumulative(pb);
    let xa: Vec<f64> = pa.iter().zip(wa).map(|(p, w)| p * w).collect();
    let xb: Vec<f64> = pb.iter().zip(wb).map(|(p, w)| p * w).collect();
    let (ha, hb) = par::join(
        || decayed_prefix_sums(&xa, rate),
        || decayed_prefix_sums(&xb, rate),
    );
    let step = (-rate).exp();
    let p_swap = hw.p_swap;

    let rows = par::map_range(n, |t| {
        if deadline.is_some_and(|d| t > d) {
            return (0.0, 0.0, 0.0, 0.0);
        }
        let lo = tau.map_or(0, |tau| t.saturating_sub(tau));
        // A arrives at t, B at s in [lo, t].
        let cb1 = window(&cb, lo, t);
        let hb1 = decayed_window(&hb, rate, lo, t);
        // B arrives at t, A strictly earlier at s in [lo, t - 1].
        let (ca2, ha2) = if t == 0 || lo > t - 1 {
            (0.0, 0.0)
        } else {
            (
                window(&ca, lo, t - 1),
                step * decayed_window(&ha, rate, lo, t - 1),
            )
        };
        let (at, bt) = (pa[t], pb[t]);
        let (wat, wbt) = (wa[t], wb[t]);
        let mass = at * cb1 + bt * ca2;
        match unit {
            UnitKind::Swap => {
                let num = p_swap * (at * wat * hb1 + bt * wbt * ha2);
                (mass, p_swap * mass, (1.0 - p_swap) * mass, num)
            }
            UnitKind::Dist => {
                let psum = at * 0.5 * (cb1 + wat * hb1) + bt * 0.5 * (ca2 + wbt * ha2);
                let num = at / 6.0 * (wat * cb1 + hb1 + 4.0 * wat * hb1)
                    + bt / 6.0 * (wbt * ca2 + ha2 + 4.0 * wbt * ha2);
                (mass, psum, (mass - psum).max(0.0), num)
            }
        }
    });

    let mut out = PrimedKernels::zeros(n);
    for (t, (_, ss, sf, num)) in rows.into_iter().enumerate() {
        out.succ_succ[t] = ss;
        out.succ_fail[t] = sf;
        out.succ_num[t] = num;
    }
    if let Some(tau) = tau {
        for t in tau..n {
            let u = t - tau;
            out.fail[t] = pa[u] * (1.0 - cb[t]).max(0.0) + pb[u] * (1.0 - ca[t]).max(0.0);
        }
    }
    if let Some(d) = deadline {
        if d < n {
            out.fail[d] = (1.0 - ca[d] * cb[d]).max(0.0);
        }
    }
    Ok(out)
}

fn to_usize(tau: u64) -> usize {
    usize::try_from(tau).unwrap_or(usize::MAX)
}
