//! Protocol trees, hardware parameters and the JSON configuration format.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hardware shared by every segment of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareParams {
    /// Success probability of one elementary-link attempt.
    pub p_gen: f64,
    /// Success probability of an entanglement swap.
    pub p_swap: f64,
    /// Werner parameter of fresh elementary links.
    pub w0: f64,
    /// Joint memory coherence time in time steps; may be infinite.
    #[serde(with = "coherence_time")]
    pub t_coh: f64,
}

impl HardwareParams {
    /// Exponential decay rate `1/t_coh` (zero for perfect memories).
    pub fn decay_rate(&self) -> f64 {
        if self.t_coh.is_infinite() {
            0.0
        } else {
            1.0 / self.t_coh
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut check = |field: &str, ok: bool, what: &str| {
            if !ok {
                out.push(Violation::new(
                    format!("hardware.{field}"),
                    ViolationKind::Range,
                    what.to_string(),
                ));
            }
        };
        check(
            "p_gen",
            self.p_gen > 0.0 && self.p_gen <= 1.0,
            "must lie in (0, 1]",
        );
        check(
            "p_swap",
            self.p_swap > 0.0 && self.p_swap <= 1.0,
            "must lie in (0, 1]",
        );
        check("w0", (0.0..=1.0).contains(&self.w0), "must lie in [0, 1]");
        check(
            "t_coh",
            self.t_coh > 0.0 && !self.t_coh.is_nan(),
            "must be positive",
        );
        out
    }
}

mod coherence_time {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "Infinity") => {
                Ok(f64::INFINITY)
            }
            Repr::Text(t) => Err(serde::de::Error::custom(format!(
                "t_coh must be a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffStrategy {
    DifTime,
    MaxTime,
    Fidelity,
}

impl CutoffStrategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::DifTime => "dif_time",
            Self::MaxTime => "max_time",
            Self::Fidelity => "fidelity",
        }
    }

    /// Builds a spec from a numeric threshold; time thresholds are rounded.
    pub fn with_threshold(self, value: f64) -> CutoffSpec {
        match self {
            Self::DifTime => CutoffSpec::DifTime {
                tau: value.round().max(0.0) as u64,
            },
            Self::MaxTime => CutoffSpec::MaxTime {
                tau: value.round().max(0.0) as u64,
            },
            Self::Fidelity => CutoffSpec::Fidelity { w_cut: value },
        }
    }
}

impl fmt::Display for CutoffStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Cut-off condition checked on a pair of links before a swap or distillation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum CutoffSpec {
    /// Accept iff the production times differ by at most `tau`.
    DifTime { tau: u64 },
    /// Accept iff both links are ready by time `tau`.
    MaxTime { tau: u64 },
    /// Accept iff both (decayed) Werner parameters reach `w_cut`.
    Fidelity { w_cut: f64 },
}

impl CutoffSpec {
    pub fn strategy(&self) -> CutoffStrategy {
        match self {
            Self::DifTime { .. } => CutoffStrategy::DifTime,
            Self::MaxTime { .. } => CutoffStrategy::MaxTime,
            Self::Fidelity { .. } => CutoffStrategy::Fidelity,
        }
    }

    pub fn threshold(&self) -> f64 {
        match *self {
            Self::DifTime { tau } | Self::MaxTime { tau } => tau as f64,
            Self::Fidelity { w_cut } => w_cut,
        }
    }

    fn violation(&self) -> Option<String> {
        match *self {
            Self::Fidelity { w_cut } if !(0.0..=1.0).contains(&w_cut) => {
                Some(format!("w_cut {w_cut} outside [0, 1]"))
            }
            Self::MaxTime { tau: 0 } => Some("max_time cut-off needs tau >= 1".into()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Gen,
    Swap,
    Dist,
}

impl NodeKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gen => "gen",
            Self::Swap => "swap",
            Self::Dist => "dist",
        }
    }
}

/// Per-leaf replacement for the global generation parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeafOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_gen: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w0: Option<f64>,
}

/// One node of a protocol tree.
///
/// The representation admits malformed trees (wrong arity, cut-offs on
/// leaves); [`validate_protocol`] reports those.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolNode {
    pub kind: NodeKind,
    pub cutoff: Option<CutoffSpec>,
    pub children: Vec<ProtocolNode>,
    pub leaf_override: Option<LeafOverride>,
}

impl ProtocolNode {
    pub fn gen() -> Self {
        Self {
            kind: NodeKind::Gen,
            cutoff: None,
            children: Vec::new(),
            leaf_override: None,
        }
    }

    pub fn swap(left: ProtocolNode, right: ProtocolNode) -> Self {
        Self::unit(NodeKind::Swap, left, right)
    }

    pub fn dist(left: ProtocolNode, right: ProtocolNode) -> Self {
        Self::unit(NodeKind::Dist, left, right)
    }

    fn unit(kind: NodeKind, left: ProtocolNode, right: ProtocolNode) -> Self {
        Self {
            kind,
            cutoff: None,
            children: vec![left, right],
            leaf_override: None,
        }
    }

    pub fn with_cutoff(mut self, cutoff: CutoffSpec) -> Self {
        self.cutoff = Some(cutoff);
        self
    }

    pub fn with_override(mut self, leaf: LeafOverride) -> Self {
        self.leaf_override = Some(leaf);
        self
    }

    pub fn left(&self) -> Option<&ProtocolNode> {
        self.children.first()
    }

    pub fn right(&self) -> Option<&ProtocolNode> {
        self.children.get(1)
    }

    pub fn leaf_count(&self) -> usize {
        match self.kind {
            NodeKind::Gen => 1,
            _ => self.children.iter().map(Self::leaf_count).sum(),
        }
    }

    pub fn internal_count(&self) -> usize {
        match self.kind {
            NodeKind::Gen => 0,
            _ => {
                1 + self
                    .children
                    .iter()
                    .map(Self::internal_count)
                    .sum::<usize>()
            }
        }
    }

    /// Number of elementary segments between the two nodes the output link
    /// connects.
    pub fn span(&self) -> usize {
        match self.kind {
            NodeKind::Gen => 1,
            NodeKind::Swap => self.children.iter().map(Self::span).sum(),
            NodeKind::Dist => self.children.first().map_or(0, Self::span),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Arity,
    CutoffPlacement,
    Range,
    Span,
    OverridePlacement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Dotted path to the offending field, e.g. `protocol.left.cutoff`.
    pub path: String,
    pub kind: ViolationKind,
    pub message: String,
}

impl Violation {
    fn new(path: String, kind: ViolationKind, message: String) -> Self {
        Self {
            path,
            kind,
            message,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Returns every structural or range problem in the tree; empty means valid.
pub fn validate_protocol(node: &ProtocolNode) -> Vec<Violation> {
    let mut out = Vec::new();
    validate_at(node, "protocol", &mut out);
    out
}

fn validate_at(node: &ProtocolNode, path: &str, out: &mut Vec<Violation>) {
    match node.kind {
        NodeKind::Gen => {
            if !node.children.is_empty() {
                out.push(Violation::new(
                    path.to_string(),
                    ViolationKind::Arity,
                    format!("gen leaf has {} children", node.children.len()),
                ));
            }
            if node.cutoff.is_some() {
                out.push(Violation::new(
                    format!("{path}.cutoff"),
                    ViolationKind::CutoffPlacement,
                    "a cut-off must feed a swap or dist node, not a gen leaf".into(),
                ));
            }
            if let Some(leaf) = node.leaf_override {
                if let Some(p) = leaf.p_gen {
                    if !(p > 0.0 && p <= 1.0) {
                        out.push(Violation::new(
                            format!("{path}.override.p_gen"),
                            ViolationKind::Range,
                            "must lie in (0, 1]".into(),
                        ));
                    }
                }
                if let Some(w) = leaf.w0 {
                    if !(0.0..=1.0).contains(&w) {
                        out.push(Violation::new(
                            format!("{path}.override.w0"),
                            ViolationKind::Range,
                            "must lie in [0, 1]".into(),
                        ));
                    }
                }
            }
        }
        NodeKind::Swap | NodeKind::Dist => {
            if node.children.len() != 2 {
                out.push(Violation::new(
                    path.to_string(),
                    ViolationKind::Arity,
                    format!(
                        "{} node needs exactly 2 children, has {}",
                        node.kind.name(),
                        node.children.len()
                    ),
                ));
            }
            if node.leaf_override.is_some() {
                out.push(Violation::new(
                    format!("{path}.override"),
                    ViolationKind::OverridePlacement,
                    "parameter overrides only apply to gen leaves".into(),
                ));
            }
            if let Some(msg) = node.cutoff.as_ref().and_then(CutoffSpec::violation) {
                out.push(Violation::new(
                    format!("{path}.cutoff"),
                    ViolationKind::Range,
                    msg,
                ));
            }
            if node.kind == NodeKind::Dist && node.children.len() == 2 {
                let (l, r) = (node.children[0].span(), node.children[1].span());
                if l != r {
                    out.push(Violation::new(
                        path.to_string(),
                        ViolationKind::Span,
                        format!("dist inputs span different node pairs ({l} vs {r} segments)"),
                    ));
                }
            }
            for (child, name) in node.children.iter().zip(["left", "right", "extra"]) {
                validate_at(child, &format!("{path}.{name}"), out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("cut-off list has length {got}; expected 0, 1 or {levels}")]
    CutoffCount { got: usize, levels: usize },
    #[error("invalid protocol: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

/// Balanced swap tree over `2^levels` segments.
///
/// `cutoffs[l]` guards every swap at nesting level `l + 1` (level 1 joins
/// elementary links). A single entry is replicated over all levels; an empty
/// list means no cut-off.
pub fn build_nested_chain(
    levels: usize,
    cutoffs: &[CutoffSpec],
) -> Result<ProtocolNode, ProtocolError> {
    let per_level: Vec<Option<CutoffSpec>> = match cutoffs.len() {
        0 => vec![None; levels],
        1 => vec![Some(cutoffs[0]); levels],
        n if n == levels => cutoffs.iter().copied().map(Some).collect(),
        n => {
            return Err(ProtocolError::CutoffCount { got: n, levels });
        }
    };
    let mut node = ProtocolNode::gen();
    for cutoff in per_level {
        let mut next = ProtocolNode::swap(node.clone(), node);
        next.cutoff = cutoff;
        node = next;
    }
    Ok(node)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Double-sum attempt kernels, iterated-convolution compounding.
    Direct,
    /// Double-sum attempt kernels, Fourier-domain compounding.
    Fourier,
    /// Separable O(ttr) attempt kernels, Fourier-domain compounding.
    Fast,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Fourier => "fourier",
            Self::Fast => "fast",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(Self::Direct),
            "fourier" => Ok(Self::Fourier),
            "fast" => Ok(Self::Fast),
            other => Err(format!("unknown backend {other:?}")),
        }
    }
}

pub const DEFAULT_PADDING_FACTOR: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Truncation time; distributions cover `t = 0..=ttr`.
    pub ttr: usize,
    pub backend: Backend,
    /// Zero-padding factor for the Fourier compounding.
    pub padding_factor: usize,
    pub hardware: HardwareParams,
}

impl EvalConfig {
    pub fn new(ttr: usize, backend: Backend, hardware: HardwareParams) -> Self {
        Self {
            ttr,
            backend,
            padding_factor: DEFAULT_PADDING_FACTOR,
            hardware,
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = self.hardware.violations();
        if self.ttr < 1 {
            out.push(Violation::new(
                "eval.ttr".into(),
                ViolationKind::Range,
                "must be at least 1".into(),
            ));
        }
        if self.padding_factor < 2 {
            out.push(Violation::new(
                "eval.padding_factor".into(),
                ViolationKind::Range,
                "must be at least 2".into(),
            ));
        }
        out
    }
}

/// A fully parsed and validated configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub protocol: ProtocolNode,
    pub eval: EvalConfig,
    /// Present when the file used the `nested_swap` shorthand.
    pub nested: Option<NestedChain>,
}

/// Description of a balanced swap chain, kept for the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedChain {
    pub levels: usize,
    pub strategy: Option<CutoffStrategy>,
    pub cutoffs: Vec<CutoffSpec>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid field `{field}`: {message}")]
    Semantic { field: String, message: String },
}

impl ConfigError {
    fn semantic(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Semantic {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    version: u32,
    hardware: HardwareParams,
    eval: RawEval,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    protocol: Option<RawNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nested_swap: Option<RawNested>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    ttr: usize,
    #[serde(default = "default_backend")]
    backend: Backend,
    #[serde(default = "default_padding")]
    padding_factor: usize,
}

fn default_backend() -> Backend {
    Backend::Fast
}

fn default_padding() -> usize {
    DEFAULT_PADDING_FACTOR
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNested {
    levels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strategy: Option<CutoffStrategy>,
    #[serde(default)]
    cutoffs: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    #[serde(rename = "type")]
    kind: RawKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cutoff: Option<RawCutoff>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    left: Option<Box<RawNode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    right: Option<Box<RawNode>>,
    #[serde(default, rename = "override", skip_serializing_if = "Option::is_none")]
    leaf_override: Option<LeafOverride>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawKind {
    Gen,
    Swap,
    Dist,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCutoff {
    strategy: CutoffStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w_cut: Option<f64>,
}

impl RawCutoff {
    fn to_spec(&self, path: &str) -> Result<CutoffSpec, ConfigError> {
        match (self.strategy, self.tau, self.w_cut) {
            (CutoffStrategy::DifTime, Some(tau), None) => Ok(CutoffSpec::DifTime { tau }),
            (CutoffStrategy::MaxTime, Some(tau), None) => Ok(CutoffSpec::MaxTime { tau }),
            (CutoffStrategy::Fidelity, None, Some(w_cut)) => Ok(CutoffSpec::Fidelity { w_cut }),
            (CutoffStrategy::Fidelity, _, _) => Err(ConfigError::semantic(
                format!("{path}.w_cut"),
                "fidelity cut-off takes exactly one threshold, `w_cut`",
            )),
            (s, _, _) => Err(ConfigError::semantic(
                format!("{path}.tau"),
                format!("{s} cut-off takes exactly one threshold, `tau`"),
            )),
        }
    }

    fn from_spec(spec: &CutoffSpec) -> Self {
        let (tau, w_cut) = match *spec {
            CutoffSpec::DifTime { tau } | CutoffSpec::MaxTime { tau } => (Some(tau), None),
            CutoffSpec::Fidelity { w_cut } => (None, Some(w_cut)),
        };
        Self {
            strategy: spec.strategy(),
            tau,
            w_cut,
        }
    }
}

impl RawNode {
    fn into_node(self, path: &str) -> Result<ProtocolNode, ConfigError> {
        let cutoff = match &self.cutoff {
            Some(c) => Some(c.to_spec(&format!("{path}.cutoff"))?),
            None => None,
        };
        let mut children = Vec::new();
        if let Some(left) = self.left {
            children.push(left.into_node(&format!("{path}.left"))?);
        }
        if let Some(right) = self.right {
            children.push(right.into_node(&format!("{path}.right"))?);
        }
        let kind = match self.kind {
            RawKind::Gen => NodeKind::Gen,
            RawKind::Swap => NodeKind::Swap,
            RawKind::Dist => NodeKind::Dist,
        };
        Ok(ProtocolNode {
            kind,
            cutoff,
            children,
            leaf_override: self.leaf_override,
        })
    }

    fn from_node(node: &ProtocolNode) -> Self {
        let kind = match node.kind {
            NodeKind::Gen => RawKind::Gen,
            NodeKind::Swap => RawKind::Swap,
            NodeKind::Dist => RawKind::Dist,
        };
        Self {
            kind,
            cutoff: node.cutoff.as_ref().map(RawCutoff::from_spec),
            left: node.left().map(|n| Box::new(Self::from_node(n))),
            right: node.right().map(|n| Box::new(Self::from_node(n))),
            leaf_override: node.leaf_override,
        }
    }
}

fn nested_specs(raw: &RawNested) -> Result<Vec<CutoffSpec>, ConfigError> {
    if raw.cutoffs.is_empty() {
        return Ok(Vec::new());
    }
    let strategy = raw.strategy.ok_or_else(|| {
        ConfigError::semantic("nested_swap.strategy", "required when cut-offs are given")
    })?;
    raw.cutoffs
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let field = format!("nested_swap.cutoffs[{i}]");
            match strategy {
                CutoffStrategy::Fidelity => Ok(CutoffSpec::Fidelity { w_cut: v }),
                _ if v < 0.0 || v.fract() != 0.0 || !v.is_finite() => Err(ConfigError::semantic(
                    field,
                    "time thresholds must be non-negative integers",
                )),
                _ => Ok(strategy.with_threshold(v)),
            }
        })
        .collect()
}

/// Parses and validates a JSON configuration document.
pub fn parse_config(text: &[u8]) -> Result<Config, ConfigError> {
    let raw: RawConfig = serde_json::from_slice(text).map_err(|e| {
        if e.is_syntax() || e.is_eof() {
            ConfigError::Syntax {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            }
        } else {
            ConfigError::semantic(field_from_serde(&e), e.to_string())
        }
    })?;
    if raw.version != CONFIG_VERSION {
        return Err(ConfigError::semantic(
            "version",
            format!(
                "unsupported version {}; expected {CONFIG_VERSION}",
                raw.version
            ),
        ));
    }
    let eval = EvalConfig {
        ttr: raw.eval.ttr,
        backend: raw.eval.backend,
        padding_factor: raw.eval.padding_factor,
        hardware: raw.hardware,
    };
    if let Some(v) = eval.violations().into_iter().next() {
        return Err(ConfigError::semantic(v.path, v.message));
    }
    let (protocol, nested) = match (raw.protocol, raw.nested_swap) {
        (Some(node), None) => (node.into_node("protocol")?, None),
        (None, Some(nested)) => {
            let cutoffs = nested_specs(&nested)?;
            let node = build_nested_chain(nested.levels, &cutoffs)
                .map_err(|e| ConfigError::semantic("nested_swap.cutoffs", e.to_string()))?;
            let chain = NestedChain {
                levels: nested.levels,
                strategy: nested.strategy,
                cutoffs,
            };
            (node, Some(chain))
        }
        (Some(_), Some(_)) => {
            return Err(ConfigError::semantic(
                "protocol",
                "give either `protocol` or `nested_swap`, not both",
            ))
        }
        (None, None) => {
            return Err(ConfigError::semantic(
                "protocol",
                "missing `protocol` (or `nested_swap` shorthand)",
            ))
        }
    };
    if let Some(v) = validate_protocol(&protocol).into_iter().next() {
        return Err(ConfigError::semantic(v.path, v.message));
    }
    Ok(Config {
        protocol,
        eval,
        nested,
    })
}

fn field_from_serde(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for marker in ["unknown field `", "missing field `", "duplicate field `"] {
        if let Some(start) = msg.find(marker) {
            let rest = &msg[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    format!("<line {}, column {}>", e.line(), e.column())
}

/// Serializes a configuration in its expanded (tree) form.
pub fn config_to_json(protocol: &ProtocolNode, eval: &EvalConfig) -> String {
    let raw = RawConfig {
        version: CONFIG_VERSION,
        hardware: eval.hardware,
        eval: RawEval {
            ttr: eval.ttr,
            backend: eval.backend,
            padding_factor: eval.padding_factor,
        },
        protocol: Some(RawNode::from_node(protocol)),
        nested_swap: None,
    };
    serde_json::to_string_pretty(&raw).expect("config is always serializable")
}

#[cfg(test)]
mod tests {
    use super::*;

    const HW: &str = r#""hardware":{"p_gen":0.5,"p_swap":0.5,"w0":0.98,"t_coh":100}"#;
    const EVAL: &str = r#""eval":{"ttr":50,"backend":"direct","padding_factor":3}"#;

    fn doc(protocol: &str) -> String {
        format!(r#"{{"version":1,{HW},{EVAL},{protocol}}}"#)
    }

    #[test]
    fn gen_only_config() {
        let cfg = parse_config(doc(r#""protocol":{"type":"gen"}"#).as_bytes()).unwrap();
        assert_eq!(cfg.protocol, ProtocolNode::gen());
        assert_eq!(cfg.eval.ttr, 50);
    }

    #[test]
    fn nested_shorthand_builds_three_levels() {
        let text = doc(
            r#""nested_swap":{"levels":3,"cutoffs":[17000,32000,55000],"strategy":"dif_time"}"#,
        );
        let cfg = parse_config(text.as_bytes()).unwrap();
        let root = &cfg.protocol;
        assert_eq!(root.leaf_count(), 8);
        assert_eq!(root.internal_count(), 7);
        assert_eq!(root.cutoff, Some(CutoffSpec::DifTime { tau: 55000 }));
        let mid = root.left().unwrap();
        assert_eq!(mid.cutoff, Some(CutoffSpec::DifTime { tau: 32000 }));
        let low = mid.right().unwrap();
        assert_eq!(low.cutoff, Some(CutoffSpec::DifTime { tau: 17000 }));
        assert_eq!(low.left().unwrap().kind, NodeKind::Gen);
    }

    #[test]
    fn cutoff_on_gen_is_semantic_error() {
        let text = doc(r#""protocol":{"type":"gen","cutoff":{"strategy":"dif_time","tau":3}}"#);
        match parse_config(text.as_bytes()) {
            Err(ConfigError::Semantic { field, .. }) => assert_eq!(field, "protocol.cutoff"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_config(b"{\n  \"version\": 1,\n  oops }").unwrap_err();
        match err {
            ConfigError::Syntax { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = doc(r#""protocol":{"type":"gen"},"extra":1"#);
        match parse_config(text.as_bytes()) {
            Err(ConfigError::Semantic { field, .. }) => assert_eq!(field, "extra"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn infinite_coherence_time_round_trips() {
        let text = r#"{"version":1,"hardware":{"p_gen":1,"p_swap":1,"w0":0.9,"t_coh":"inf"},
            "eval":{"ttr":4},"protocol":{"type":"gen"}}"#;
        let cfg = parse_config(text.as_bytes()).unwrap();
        assert!(cfg.eval.hardware.t_coh.is_infinite());
        let again = parse_config(config_to_json(&cfg.protocol, &cfg.eval).as_bytes()).unwrap();
        assert_eq!(again.eval, cfg.eval);
    }

    #[test]
    fn fidelity_cutoff_with_tau_is_rejected() {
        let text = doc(
            r#""protocol":{"type":"swap","cutoff":{"strategy":"fidelity","tau":3},
                "left":{"type":"gen"},"right":{"type":"gen"}}"#,
        );
        assert!(matches!(
            parse_config(text.as_bytes()),
            Err(ConfigError::Semantic { .. })
        ));
    }

    #[test]
    fn validation_examples() {
        let three_level = build_nested_chain(3, &[]).unwrap();
        assert!(validate_protocol(&three_level).is_empty());

        let mut one_child = ProtocolNode::dist(ProtocolNode::gen(), ProtocolNode::gen());
        one_child.children.pop();
        let v = validate_protocol(&one_child);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::Arity);

        let bad_cut = ProtocolNode::swap(ProtocolNode::gen(), ProtocolNode::gen())
            .with_cutoff(CutoffSpec::Fidelity { w_cut: 1.2 });
        let v = validate_protocol(&bad_cut);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::Range);
    }

    #[test]
    fn dist_requires_matching_spans() {
        let two_seg = ProtocolNode::swap(ProtocolNode::gen(), ProtocolNode::gen());
        let bad = ProtocolNode::dist(two_seg.clone(), ProtocolNode::gen());
        assert_eq!(validate_protocol(&bad)[0].kind, ViolationKind::Span);
        let good = ProtocolNode::dist(two_seg.clone(), two_seg);
        assert!(validate_protocol(&good).is_empty());
    }

    #[test]
    fn nested_chain_examples() {
        assert_eq!(build_nested_chain(0, &[]).unwrap(), ProtocolNode::gen());
        let uniform = build_nested_chain(3, &[CutoffSpec::DifTime { tau: 9 }]).unwrap();
        let mut swaps = Vec::new();
        fn collect<'a>(n: &'a ProtocolNode, out: &mut Vec<&'a ProtocolNode>) {
            if n.kind == NodeKind::Swap {
                out.push(n);
            }
            n.children.iter().for_each(|c| collect(c, out));
        }
        collect(&uniform, &mut swaps);
        assert_eq!(swaps.len(), 7);
        assert!(swaps
            .iter()
            .all(|n| n.cutoff == Some(CutoffSpec::DifTime { tau: 9 })));
        let two = [
            CutoffSpec::DifTime { tau: 1 },
            CutoffSpec::DifTime { tau: 2 },
        ];
        assert_eq!(
            build_nested_chain(3, &two),
            Err(ProtocolError::CutoffCount { got: 2, levels: 3 })
        );
    }

    #[test]
    fn leaf_override_parses() {
        let text = doc(
            r#""protocol":{"type":"swap","left":{"type":"gen","override":{"p_gen":0.2}},
                "right":{"type":"gen"},"cutoff":null}"#,
        );
        let cfg = parse_config(text.as_bytes()).unwrap();
        assert_eq!(
            cfg.protocol.left().unwrap().leaf_override,
            Some(LeafOverride {
                p_gen: Some(0.2),
                w0: None
            })
        );
    }
}
