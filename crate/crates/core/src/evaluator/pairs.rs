//! Attempt kernels by explicit enumeration of every arrival-time pair.
//!
//! Cost is quadratic in the window length. This route shares no algebra with
//! the prefix-sum kernels in [`super::separable`], which makes the two useful
//! as cross-checks.

use crate::par;
use crate::protocol::{CutoffSpec, HardwareParams};

use super::{LinkState, PrimedKernels, UnitKind};

/// Success probability and `p * w_out` of one operation on two links.
pub(crate) trait Response: Sync {
    fn eval(&self, wa: f64, wb: f64) -> (f64, f64);
}

pub(crate) struct SwapResponse(pub f64);

impl Response for SwapResponse {
    #[inline(always)]
    fn eval(&self, wa: f64, wb: f64) -> (f64, f64) {
        (self.0, self.0 * wa * wb)
    }
}

pub(crate) struct DistResponse;

impl Response for DistResponse {
    #[inline(always)]
    fn eval(&self, wa: f64, wb: f64) -> (f64, f64) {
        let prod = wa * wb;
        ((1.0 + prod) / 2.0, (wa + wb + 4.0 * prod) / 6.0)
    }
}

/// Value-dependent acceptance: 1.0 to accept a pair, 0.0 to reject it.
trait Gate: Sync {
    fn pass(&self, wa: f64, wb: f64) -> f64;
}

struct Accept;
impl Gate for Accept {
    #[inline(always)]
    fn pass(&self, _: f64, _: f64) -> f64 {
        1.0
    }
}

struct Reject;
impl Gate for Reject {
    #[inline(always)]
    fn pass(&self, _: f64, _: f64) -> f64 {
        0.0
    }
}

struct Threshold(f64);
impl Gate for Threshold {
    #[inline(always)]
    fn pass(&self, wa: f64, wb: f64) -> f64 {
        if wa >= self.0 && wb >= self.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Sums over the earlier link of a set of pairs sharing the later link.
#[derive(Default, Clone, Copy)]
struct Sweep {
    mass: f64,
    accepted: f64,
    p: f64,
    pw: f64,
}

const LANES: usize = 4;

/// Pairs of a later link with Werner value `w_late` against earlier links
/// `p[j]`, `w[j]` that have decayed by `decay[j]`. Four independent
/// accumulator lanes let the loop vectorize.
#[inline(always)]
fn sweep<R: Response, G: Gate>(
    w_late: f64,
    p: &[f64],
    w: &[f64],
    decay: &[f64],
    resp: &R,
    gate: &G,
) -> Sweep {
    let n = p.len();
    let (w, decay) = (&w[..n], &decay[..n]);
    let mut mass = [0.0; LANES];
    let mut acc = [0.0; LANES];
    let mut ps = [0.0; LANES];
    let mut pws = [0.0; LANES];
    let body = n / LANES * LANES;
    let chunks = p[..body]
        .chunks_exact(LANES)
        .zip(w[..body].chunks_exact(LANES))
        .zip(decay[..body].chunks_exact(LANES));
    for ((pc, wc), dc) in chunks {
        let pc: &[f64; LANES] = pc.try_into().expect("exact chunk");
        let wc: &[f64; LANES] = wc.try_into().expect("exact chunk");
        let dc: &[f64; LANES] = dc.try_into().expect("exact chunk");
        for l in 0..LANES {
            let x = pc[l];
            let we = wc[l] * dc[l];
            let m = x * gate.pass(w_late, we);
            let (pr, pw) = resp.eval(w_late, we);
            mass[l] += x;
            acc[l] += m;
            ps[l] += m * pr;
            pws[l] += m * pw;
        }
    }
    for j in body..n {
        let x = p[j];
        let we = w[j] * decay[j];
        let m = x * gate.pass(w_late, we);
        let (pr, pw) = resp.eval(w_late, we);
        mass[0] += x;
        acc[0] += m;
        ps[0] += m * pr;
        pws[0] += m * pw;
    }
    let total = |v: [f64; LANES]| (v[0] + v[1]) + (v[2] + v[3]);
    Sweep {
        mass: total(mass),
        accepted: total(acc),
        p: total(ps),
        pw: total(pws),
    }
}

#[derive(Default, Clone, Copy)]
struct Row {
    succ_succ: f64,
    succ_fail: f64,
    succ_num: f64,
    rejected: f64,
}

impl Row {
    fn add(&mut self, weight: f64, s: Sweep) {
        self.succ_succ += weight * s.p;
        self.succ_fail += weight * (s.accepted - s.p).max(0.0);
        self.succ_num += weight * s.pw;
        self.rejected += weight * (s.mass - s.accepted).max(0.0);
    }
}

struct Inputs<'a> {
    a: &'a [f64],
    wa: &'a [f64],
    b: &'a [f64],
    wb: &'a [f64],
    /// `exp(-rate * (n - 1 - k))`, so that a contiguous slice ending at
    /// `n - 1` holds the decay factors of the gaps `t - s` for `s = 0..=t`.
    decay_rev: &'a [f64],
}

/// All pairs whose later arrival is at `t` and whose earlier arrival is at
/// least `lo`. Equal arrivals are not decayed.
fn row<R: Response, G: Gate>(inp: &Inputs, resp: &R, gate: &G, t: usize, lo: usize) -> Row {
    let n = inp.a.len();
    let mut out = Row::default();
    if lo > t {
        return out;
    }
    // Decay factor for earlier arrival s sits at index n - 1 - t + s.
    let off = n - 1 - t;
    let at = inp.a[t];
    if at != 0.0 {
        // A arrives at t, B at s in [lo, t].
        let s = sweep(
            inp.wa[t],
            &inp.b[lo..=t],
            &inp.wb[lo..=t],
            &inp.decay_rev[off + lo..=off + t],
            resp,
            gate,
        );
        out.add(at, s);
    }
    let bt = inp.b[t];
    if bt != 0.0 && lo < t {
        // B arrives at t, A strictly earlier at s in [lo, t - 1].
        let s = sweep(
            inp.wb[t],
            &inp.a[lo..t],
            &inp.wa[lo..t],
            &inp.decay_rev[off + lo..off + t],
            resp,
            gate,
        );
        out.add(bt, s);
    }
    out
}

/// `exp(-rate * d)` for `d = 0..n`.
pub(crate) fn decay_table(rate: f64, n: usize) -> Vec<f64> {
    (0..n).map(|d| (-rate * d as f64).exp()).collect()
}

fn rows_for<R: Response>(inp: &Inputs, resp: &R, cutoff: Option<&CutoffSpec>) -> Vec<Row> {
    let n = inp.a.len();
    match cutoff {
        None => par::map_range(n, |t| row(inp, resp, &Accept, t, 0)),
        // Pairs further apart than tau are rejected; they are accounted for
        // at their decision time separately.
        Some(CutoffSpec::DifTime { tau }) => {
            let tau = clamp_tau(*tau);
            par::map_range(n, |t| row(inp, resp, &Accept, t, t.saturating_sub(tau)))
        }
        Some(CutoffSpec::MaxTime { tau }) => {
            let tau = clamp_tau(*tau);
            par::map_range(n, |t| {
                if t <= tau {
                    row(inp, resp, &Accept, t, 0)
                } else {
                    row(inp, resp, &Reject, t, 0)
                }
            })
        }
        Some(CutoffSpec::Fidelity { w_cut }) => {
            let gate = Threshold(*w_cut);
            par::map_range(n, |t| row(inp, resp, &gate, t, 0))
        }
    }
}

fn clamp_tau(tau: u64) -> usize {
    usize::try_from(tau).unwrap_or(usize::MAX)
}

/// Primed kernels of one attempt on inputs `a`, `b` by pair enumeration.
///
/// Failed attempts are placed at their decision time: `min + tau` for
/// `DifTime`, `tau` for `MaxTime`, the later arrival for `Fidelity`. Input
/// mass beyond the window is routed to the same decision times whenever
/// those fall inside it.
pub fn pair_kernels(
    a: &LinkState,
    b: &LinkState,
    unit: UnitKind,
    cutoff: Option<&CutoffSpec>,
    hw: &HardwareParams,
) -> PrimedKernels {
    let n = a.len().min(b.len());
    let mut decay_rev = decay_table(hw.decay_rate(), n);
    decay_rev.reverse();
    let inp = Inputs {
        a: &a.pmf()[..n],
        wa: &a.werner()[..n],
        b: &b.pmf()[..n],
        wb: &b.werner()[..n],
        decay_rev: &decay_rev,
    };
    let rows = match unit {
        UnitKind::Swap => rows_for(&inp, &SwapResponse(hw.p_swap), cutoff),
        UnitKind::Dist => rows_for(&inp, &DistResponse, cutoff),
    };

    let mut out = PrimedKernels::zeros(n);
    for (t, r) in rows.iter().enumerate() {
        out.succ_succ[t] = r.succ_succ;
        out.succ_fail[t] = r.succ_fail;
        out.succ_num[t] = r.succ_num;
    }
    let tail_a = (1.0 - inp.a.iter().sum::<f64>()).max(0.0);
    let tail_b = (1.0 - inp.b.iter().sum::<f64>()).max(0.0);
    match cutoff {
        None => {}
        Some(CutoffSpec::Fidelity { .. }) => {
            for (t, r) in rows.iter().enumerate() {
                out.fail[t] = r.rejected;
            }
        }
        Some(CutoffSpec::DifTime { tau }) => {
            let tau = clamp_tau(*tau);
            if tau < n {
                let fails = par::map_range(n - tau, |u| {
                    let t = u + tau;
                    let (au, bu) = (inp.a[u], inp.b[u]);
                    let mut f = au * tail_b + bu * tail_a;
                    for s in t + 1..n {
                        f += au * inp.b[s] + inp.a[s] * bu;
                    }
                    f
                });
                out.fail[tau..].copy_from_slice(&fails);
            }
        }
        Some(CutoffSpec::MaxTime { tau }) => {
            let tau = clamp_tau(*tau);
            if tau < n {
                let mass_a = 1.0 - tail_a;
                let mass_b = 1.0 - tail_b;
                let late: f64 = rows[tau + 1..].iter().map(|r| r.rejected).sum();
                out.fail[tau] = late + (1.0 - mass_a * mass_b).max(0.0);
            }
        }
    }
    out
}
