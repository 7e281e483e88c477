//! Exact waiting-time distributions and Werner parameters of protocol trees.

mod compound;
mod pairs;
mod separable;

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::dist::{DistError, TruncatedPmf};
use crate::par;
use crate::protocol::{
    validate_protocol, Backend, CutoffSpec, EvalConfig, NodeKind, ProtocolNode, Violation,
};

pub use compound::{
    geometric_series_direct, geometric_series_fourier, SINGULARITY_FLOOR, TAIL_STOP,
};
pub use pairs::pair_kernels;
pub use separable::separable_kernels;

/// Covered mass below which evaluation logs a truncation warning.
pub const COVERAGE_WARNING: f64 = 0.99;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid protocol: {}", join_violations(.0))]
    InvalidProtocol(Vec<Violation>),
    #[error("invalid evaluation settings: {}", join_violations(.0))]
    InvalidConfig(Vec<Violation>),
    #[error("unsupported: {what}")]
    Unsupported { what: String },
    #[error("window lengths differ: {left} vs {right}")]
    WindowMismatch { left: usize, right: usize },
    #[error("1 - F[pf] nearly vanishes at frequency {frequency} (|.| = {magnitude:e})")]
    Singular { frequency: usize, magnitude: f64 },
    #[error("failed attempts of zero duration carry mass {mass:e}")]
    ZeroDurationFailure { mass: f64 },
    #[error(transparent)]
    Numerical(#[from] DistError),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Which two-link operation a node performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnitKind {
    Swap,
    Dist,
}

/// Waiting-time pmf of a link together with its average Werner parameter
/// conditioned on each delivery time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkState {
    pmf: TruncatedPmf,
    werner: Vec<f64>,
}

impl LinkState {
    /// Validates the pmf, clamps `werner` into `[0, 1]` and zeroes it where
    /// the pmf vanishes.
    pub fn new(pmf: Vec<f64>, mut werner: Vec<f64>) -> Result<Self, EvalError> {
        if pmf.len() != werner.len() {
            return Err(EvalError::WindowMismatch {
                left: pmf.len(),
                right: werner.len(),
            });
        }
        let pmf = TruncatedPmf::new(pmf)?;
        for (index, (w, &p)) in werner.iter_mut().zip(pmf.values()).enumerate() {
            if w.is_nan() {
                return Err(DistError::NonFinite { index }.into());
            }
            *w = if p == 0.0 { 0.0 } else { w.clamp(0.0, 1.0) };
        }
        Ok(Self { pmf, werner })
    }

    /// Builds a state from compounded `pmf` and `pmf * W` arrays.
    pub fn from_numerator(pmf: Vec<f64>, numerator: &[f64]) -> Result<Self, EvalError> {
        let werner = pmf
            .iter()
            .zip(numerator)
            .map(|(&p, &n)| if p > 0.0 { n / p } else { 0.0 })
            .collect();
        Self::new(pmf, werner)
    }

    pub fn pmf(&self) -> &[f64] {
        self.pmf.values()
    }

    pub fn werner(&self) -> &[f64] {
        &self.werner
    }

    pub fn distribution(&self) -> &TruncatedPmf {
        &self.pmf
    }

    /// Number of grid points, `ttr + 1`.
    pub fn len(&self) -> usize {
        self.werner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.werner.is_empty()
    }

    pub fn ttr(&self) -> usize {
        self.len().saturating_sub(1)
    }

    pub fn covered_mass(&self) -> f64 {
        self.pmf.mass()
    }

    /// `(1 + 3 W) / 4`.
    pub fn fidelity(&self) -> Vec<f64> {
        self.werner.iter().map(|w| (1.0 + 3.0 * w) / 4.0).collect()
    }
}

/// Kernels of one attempt before the cut-off retry loop is resolved.
///
/// `succ_succ`/`succ_fail`: inputs accepted and the operation then
/// succeeded/failed, indexed by the time of the later input.
/// `succ_num`: `pmf * p * w_out` of accepted pairs. `fail`: rejected by the
/// cut-off, indexed by the decision time.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimedKernels {
    pub succ_succ: Vec<f64>,
    pub succ_fail: Vec<f64>,
    pub succ_num: Vec<f64>,
    pub fail: Vec<f64>,
}

impl PrimedKernels {
    pub fn zeros(n: usize) -> Self {
        Self {
            succ_succ: vec![0.0; n],
            succ_fail: vec![0.0; n],
            succ_num: vec![0.0; n],
            fail: vec![0.0; n],
        }
    }

    pub fn mass(&self) -> f64 {
        [&self.succ_succ, &self.succ_fail, &self.fail]
            .iter()
            .map(|v| v.iter().sum::<f64>())
            .sum()
    }

    /// Without a cut-off nothing is rejected and the primed kernels are
    /// already the attempt kernels.
    pub fn into_attempt(self) -> AttemptKernels {
        AttemptKernels {
            success: self.succ_succ,
            failure: self.succ_fail,
            success_num: self.succ_num,
        }
    }
}

/// Distribution of the duration of one attempt of a node, split by outcome,
/// plus the Werner numerator of successful attempts.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptKernels {
    pub success: Vec<f64>,
    pub failure: Vec<f64>,
    pub success_num: Vec<f64>,
}

impl AttemptKernels {
    pub fn mass(&self) -> f64 {
        self.success.iter().sum::<f64>() + self.failure.iter().sum::<f64>()
    }
}

/// Elementary link with geometric waiting time and constant Werner value.
pub fn eval_gen(p_gen: f64, w0: f64, ttr: usize) -> LinkState {
    let pmf = TruncatedPmf::geometric(p_gen, ttr);
    let werner = pmf
        .values()
        .iter()
        .map(|&p| if p > 0.0 { w0 } else { 0.0 })
        .collect();
    LinkState { pmf, werner }
}

/// Attempt kernels of a swap without cut-off, by pair enumeration.
pub fn swap_attempt_kernels(a: &LinkState, b: &LinkState, cfg: &EvalConfig) -> AttemptKernels {
    pair_kernels(a, b, UnitKind::Swap, None, &cfg.hardware).into_attempt()
}

/// Attempt kernels of a distillation without cut-off, by pair enumeration.
pub fn dist_attempt_kernels(a: &LinkState, b: &LinkState, cfg: &EvalConfig) -> AttemptKernels {
    pair_kernels(a, b, UnitKind::Dist, None, &cfg.hardware).into_attempt()
}

/// Primed kernels using the backend's kernel route.
pub fn primed_kernels(
    a: &LinkState,
    b: &LinkState,
    unit: UnitKind,
    cutoff: Option<&CutoffSpec>,
    cfg: &EvalConfig,
) -> Result<PrimedKernels, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::WindowMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    match cfg.backend {
        Backend::Fast => separable_kernels(a, b, unit, cutoff, &cfg.hardware),
        Backend::Direct | Backend::Fourier => Ok(pair_kernels(a, b, unit, cutoff, &cfg.hardware)),
    }
}

fn series(pf: &[f64], numerators: &[&[f64]], cfg: &EvalConfig) -> Result<Vec<Vec<f64>>, EvalError> {
    match cfg.backend {
        Backend::Direct => geometric_series_direct(pf, numerators),
        Backend::Fourier | Backend::Fast => {
            geometric_series_fourier(pf, numerators, cfg.padding_factor)
        }
    }
}

/// Resolves the cut-off retry loop: sums over every run of rejected
/// attempts followed by an accepted one.
///
/// For swaps the failure kernel is a fixed multiple of the success kernel
/// and is derived from it instead of compounded separately.
pub fn resolve_cutoff(
    primed: &PrimedKernels,
    unit: UnitKind,
    cfg: &EvalConfig,
) -> Result<AttemptKernels, EvalError> {
    if unit == UnitKind::Swap {
        let p = cfg.hardware.p_swap;
        let mut out = series(&primed.fail, &[&primed.succ_succ, &primed.succ_num], cfg)?;
        let success_num = out.pop().expect("two outputs");
        let success = out.pop().expect("two outputs");
        let failure = success.iter().map(|s| s * (1.0 - p) / p).collect();
        return Ok(AttemptKernels {
            success,
            failure,
            success_num,
        });
    }
    resolve_cutoff_generic(primed, cfg)
}

/// Cut-off retry loop with every kernel compounded independently.
pub fn resolve_cutoff_generic(
    primed: &PrimedKernels,
    cfg: &EvalConfig,
) -> Result<AttemptKernels, EvalError> {
    let mut out = series(
        &primed.fail,
        &[&primed.succ_succ, &primed.succ_fail, &primed.succ_num],
        cfg,
    )?;
    let success_num = out.pop().expect("three outputs");
    let failure = out.pop().expect("three outputs");
    let success = out.pop().expect("three outputs");
    Ok(AttemptKernels {
        success,
        failure,
        success_num,
    })
}

/// Attempt kernels of a node carrying a cut-off.
pub fn cutoff_attempt_kernels(
    a: &LinkState,
    b: &LinkState,
    unit: UnitKind,
    cutoff: &CutoffSpec,
    cfg: &EvalConfig,
) -> Result<AttemptKernels, EvalError> {
    let primed = primed_kernels(a, b, unit, Some(cutoff), cfg)?;
    resolve_cutoff(&primed, unit, cfg)
}

/// Repeats attempts until one succeeds: iterated convolution.
pub fn compound_direct(k: &AttemptKernels) -> Result<LinkState, EvalError> {
    let mut out = geometric_series_direct(&k.failure, &[&k.success, &k.success_num])?;
    let num = out.pop().expect("two outputs");
    let pmf = out.pop().expect("two outputs");
    LinkState::from_numerator(pmf, &num)
}

/// Repeats attempts until one succeeds: closed form in the Fourier domain.
pub fn compound_fourier(k: &AttemptKernels, padding: usize) -> Result<LinkState, EvalError> {
    let mut out = geometric_series_fourier(&k.failure, &[&k.success, &k.success_num], padding)?;
    let num = out.pop().expect("two outputs");
    let pmf = out.pop().expect("two outputs");
    LinkState::from_numerator(pmf, &num)
}

/// Per-node diagnostics from [`eval_protocol_traced`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeTrace {
    pub kind: NodeKind,
    pub cutoff: Option<CutoffSpec>,
    /// Longest path to a leaf.
    pub height: usize,
    /// Mass of the primed kernels of one attempt.
    pub primed_mass: f64,
    /// Product of the covered masses of the two inputs.
    pub input_mass: f64,
    /// Mass of the attempt kernels after the cut-off loop.
    pub attempt_mass: f64,
    /// Covered mass of the node's output.
    pub output_mass: f64,
}

/// Result of evaluating a protocol tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub state: LinkState,
    pub covered_mass: f64,
    /// One entry per distinct internal node, children before parents.
    pub nodes: Vec<NodeTrace>,
}

#[derive(Clone, PartialEq, Eq, Hash)]
enum Key {
    Gen {
        p_gen: u64,
        w0: u64,
    },
    Unit {
        kind: UnitKind,
        cutoff: Option<(u8, u64)>,
        left: usize,
        right: usize,
    },
}

struct Interned {
    keys: Vec<Key>,
    cutoffs: Vec<Option<CutoffSpec>>,
    heights: Vec<usize>,
}

impl Interned {
    fn build(root: &ProtocolNode, cfg: &EvalConfig) -> (Self, usize) {
        let mut this = Self {
            keys: Vec::new(),
            cutoffs: Vec::new(),
            heights: Vec::new(),
        };
        let mut index = HashMap::new();
        let root_id = this.intern(root, cfg, &mut index);
        (this, root_id)
    }

    fn intern(
        &mut self,
        node: &ProtocolNode,
        cfg: &EvalConfig,
        index: &mut HashMap<Key, usize>,
    ) -> usize {
        let (key, height) = match node.kind {
            NodeKind::Gen => {
                let o = node.leaf_override.unwrap_or_default();
                let p_gen = o.p_gen.unwrap_or(cfg.hardware.p_gen);
                let w0 = o.w0.unwrap_or(cfg.hardware.w0);
                (
                    Key::Gen {
                        p_gen: p_gen.to_bits(),
                        w0: w0.to_bits(),
                    },
                    0,
                )
            }
            NodeKind::Swap | NodeKind::Dist => {
                let left = self.intern(&node.children[0], cfg, index);
                let right = self.intern(&node.children[1], cfg, index);
                let kind = if node.kind == NodeKind::Swap {
                    UnitKind::Swap
                } else {
                    UnitKind::Dist
                };
                let cutoff = node.cutoff.map(|c| match c {
                    CutoffSpec::DifTime { tau } => (0, tau),
                    CutoffSpec::MaxTime { tau } => (1, tau),
                    CutoffSpec::Fidelity { w_cut } => (2, w_cut.to_bits()),
                });
                let height = 1 + self.heights[left].max(self.heights[right]);
                (
                    Key::Unit {
                        kind,
                        cutoff,
                        left,
                        right,
                    },
                    height,
                )
            }
        };
        *index.entry(key.clone()).or_insert_with(|| {
            self.keys.push(key);
            self.cutoffs.push(node.cutoff);
            self.heights.push(height);
            self.keys.len() - 1
        })
    }
}

fn eval_unit(
    a: &LinkState,
    b: &LinkState,
    unit: UnitKind,
    cutoff: Option<&CutoffSpec>,
    cfg: &EvalConfig,
    height: usize,
) -> Result<(LinkState, NodeTrace), EvalError> {
    let primed = primed_kernels(a, b, unit, cutoff, cfg)?;
    let primed_mass = primed.mass();
    let attempt = match cutoff {
        None => primed.into_attempt(),
        Some(_) => resolve_cutoff(&primed, unit, cfg)?,
    };
    let attempt_mass = attempt.mass();
    let state = match cfg.backend {
        Backend::Direct => compound_direct(&attempt)?,
        Backend::Fourier | Backend::Fast => compound_fourier(&attempt, cfg.padding_factor)?,
    };
    let trace = NodeTrace {
        kind: match unit {
            UnitKind::Swap => NodeKind::Swap,
            UnitKind::Dist => NodeKind::Dist,
        },
        cutoff: cutoff.copied(),
        height,
        primed_mass,
        input_mass: a.covered_mass() * b.covered_mass(),
        attempt_mass,
        output_mass: state.covered_mass(),
    };
    Ok((state, trace))
}

/// Evaluates a protocol tree. Identical subtrees are evaluated once and
/// nodes of equal height are evaluated concurrently.
pub fn eval_protocol_traced(
    root: &ProtocolNode,
    cfg: &EvalConfig,
) -> Result<Evaluation, EvalError> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(EvalError::InvalidConfig(v));
    }
    let v = validate_protocol(root);
    if !v.is_empty() {
        return Err(EvalError::InvalidProtocol(v));
    }
    if cfg.backend == Backend::Fast && contains_fidelity(root) {
        return Err(EvalError::Unsupported {
            what: "fidelity cut-offs with the fast backend".into(),
        });
    }

    let (graph, root_id) = Interned::build(root, cfg);
    let mut states: Vec<Option<LinkState>> = vec![None; graph.keys.len()];
    let mut traces = Vec::new();
    let max_height = graph.heights[root_id];
    for h in 0..=max_height {
        let ids: Vec<usize> = (0..graph.keys.len())
            .filter(|&i| graph.heights[i] == h)
            .collect();
        let results = par::map_slice(
            &ids,
            |&id| -> Result<(LinkState, Option<NodeTrace>), EvalError> {
                match &graph.keys[id] {
                    Key::Gen { p_gen, w0 } => Ok((
                        eval_gen(f64::from_bits(*p_gen), f64::from_bits(*w0), cfg.ttr),
                        None,
                    )),
                    Key::Unit {
                        kind, left, right, ..
                    } => {
                        let a = states[*left].as_ref().expect("children evaluated first");
                        let b = states[*right].as_ref().expect("children evaluated first");
                        let (s, t) = eval_unit(a, b, *kind, graph.cutoffs[id].as_ref(), cfg, h)?;
                        Ok((s, Some(t)))
                    }
                }
            },
        );
        for (id, r) in ids.into_iter().zip(results) {
            let (state, trace) = r?;
            states[id] = Some(state);
            traces.extend(trace);
        }
    }
    let state = states[root_id].take().expect("root evaluated");
    let covered_mass = state.covered_mass();
    if covered_mass < COVERAGE_WARNING {
        log::warn!(
            "covered mass {covered_mass:.6} below {COVERAGE_WARNING}; consider a larger ttr than {}",
            cfg.ttr
        );
    }
    Ok(Evaluation {
        state,
        covered_mass,
        nodes: traces,
    })
}

/// Evaluates a protocol tree and returns the root link state.
pub fn eval_protocol(root: &ProtocolNode, cfg: &EvalConfig) -> Result<LinkState, EvalError> {
    eval_protocol_traced(root, cfg).map(|e| e.state)
}

fn contains_fidelity(node: &ProtocolNode) -> bool {
    matches!(node.cutoff, Some(CutoffSpec::Fidelity { .. }))
        || node.children.iter().any(contains_fidelity)
}
