//! Model and cluster descriptions plus closed-form transformer accounting.
//!
//! All sizes are in bytes, rates in bytes/s or flop/s, and times in seconds.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::symexpr::{Domain, Expr, ExprError, SymbolTable};

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("expression for `{key}`: {source}")]
    Expr { key: String, source: ExprError },
}

fn invalid(key: &str, msg: impl Into<String>) -> SpecError {
    SpecError::Invalid {
        key: key.to_string(),
        msg: msg.into(),
    }
}

/// Free symbols shared by every stage cost expression.
pub struct Vars {
    pub table: SymbolTable,
    /// micro batch size
    pub b: Expr,
    pub dp: Expr,
    pub tp: Expr,
    /// layers in the stage
    pub l: Expr,
    /// recomputed layers
    pub ckpt: Expr,
    pub wo: Expr,
    pub go: Expr,
    pub oo: Expr,
    pub ao: Expr,
    /// microbatches in flight at the stage
    pub w: Expr,
    /// per-layer forward seconds
    pub tf: Expr,
    /// per-layer backward seconds
    pub tb: Expr,
}

pub fn vars() -> &'static Vars {
    static VARS: OnceLock<Vars> = OnceLock::new();
    VARS.get_or_init(|| {
        let mut t = SymbolTable::new();
        let mut d = |n: &str, dom| t.declare(n, dom).expect("fresh table");
        let b = d("b", Domain::PositiveInteger);
        let dp = d("dp", Domain::PositiveInteger);
        let tp = d("tp", Domain::PositiveInteger);
        let l = d("l", Domain::PositiveInteger);
        let ckpt = d("ckpt", Domain::NonNegativeReal);
        let wo = d("wo", Domain::UnitInterval);
        let go = d("go", Domain::UnitInterval);
        let oo = d("oo", Domain::UnitInterval);
        let ao = d("ao", Domain::UnitInterval);
        let w = d("w", Domain::PositiveInteger);
        let tf = d("tf", Domain::NonNegativeReal);
        let tb = d("tb", Domain::NonNegativeReal);
        Vars {
            table: t,
            b,
            dp,
            tp,
            l,
            ckpt,
            wo,
            go,
            oo,
            ao,
            w,
            tf,
            tb,
        }
    })
}

fn default_elem_bytes() -> u64 {
    2
}

fn default_name() -> String {
    "unnamed".to_string()
}

/// Activation byte formulas given in canonical prefix form over `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationOverride {
    pub full: String,
    pub boundary: String,
}

/// Uniform decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub num_layers: u32,
    pub hidden: u64,
    pub heads: u64,
    /// MLP width; 4·hidden when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn: Option<u64>,
    pub vocab: u64,
    pub seq: u64,
    #[serde(default = "default_elem_bytes")]
    pub elem_bytes: u64,
    #[serde(default)]
    pub flash_attention: bool,
    /// Attention and MLP share one tensor-parallel all-reduce per layer.
    #[serde(default)]
    pub parallel_attention: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<ActivationOverride>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    model: ModelSpec,
}

#[derive(Serialize, Deserialize)]
struct ClusterFile {
    cluster: ClusterSpec,
}

#[derive(Serialize, Deserialize)]
struct OpTimeFile {
    #[serde(default)]
    op_time: Vec<OpTimeEntry>,
}

fn read(path: &Path) -> Result<String, SpecError> {
    std::fs::read_to_string(path).map_err(|source| SpecError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, SpecError> {
    toml::from_str(text).map_err(|e| SpecError::Parse(e.to_string()))
}

impl ModelSpec {
    pub fn ffn(&self) -> u64 {
        self.ffn.unwrap_or(4 * self.hidden)
    }

    pub fn from_toml(text: &str) -> Result<Self, SpecError> {
        let f: ModelFile = parse_toml(text)?;
        f.model.validate()?;
        Ok(f.model)
    }

    pub fn load(path: &Path) -> Result<Self, SpecError> {
        Self::from_toml(&read(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&ModelFile {
            model: self.clone(),
        })
        .expect("model spec serializes")
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let counts = [
            ("model.num_layers", u64::from(self.num_layers)),
            ("model.hidden", self.hidden),
            ("model.heads", self.heads),
            ("model.ffn", self.ffn()),
            ("model.vocab", self.vocab),
            ("model.seq", self.seq),
            ("model.elem_bytes", self.elem_bytes),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(invalid(key, "must be positive"));
            }
        }
        if self.activation.is_some() {
            let (full, boundary) = self.act_bytes(&vars().b)?;
            for b in 1..=64 {
                let bind = vars()
                    .table
                    .bind([("b", f64::from(b))])
                    .expect("b in domain");
                let value = |key: &str, e: &Expr| {
                    e.eval(&bind).map_err(|source| SpecError::Expr {
                        key: key.to_string(),
                        source,
                    })
                };
                let f = value("model.activation.full", &full)?;
                let bd = value("model.activation.boundary", &boundary)?;
                if !(bd >= 0.0 && bd <= f) {
                    return Err(invalid(
                        "model.activation.boundary",
                        format!("must lie in [0, full] (b={b}: boundary={bd}, full={f})"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Saved-activation bytes per layer and microbatch: (no checkpointing,
    /// checkpointed), using the override when present.
    pub fn act_bytes(&self, b: &Expr) -> Result<(Expr, Expr), SpecError> {
        match &self.activation {
            None => Ok(default_act_bytes(self, b)),
            Some(o) => {
                let v = vars();
                let parse = |key: &str, text: &str| {
                    let e = Expr::parse(text, &v.table).map_err(|source| SpecError::Expr {
                        key: key.to_string(),
                        source,
                    })?;
                    if let Some(extra) = e.free_symbols().into_iter().find(|s| s != "b") {
                        return Err(invalid(
                            key,
                            format!("only `b` may appear, found `{extra}`"),
                        ));
                    }
                    let mut bind = crate::symexpr::Bindings::new();
                    bind.set_expr(&v.table, "b", b.clone()).expect("b declared");
                    e.substitute(&bind).map_err(|source| SpecError::Expr {
                        key: key.to_string(),
                        source,
                    })
                };
                Ok((
                    parse("model.activation.full", &o.full)?,
                    parse("model.activation.boundary", &o.boundary)?,
                ))
            }
        }
    }

    /// Stable digest of the canonical serialization.
    pub fn digest(&self) -> String {
        digest(&self.to_toml())
    }
}

/// Accelerator cluster of `nodes × gpus_per_node` identical devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub nodes: u32,
    pub gpus_per_node: u32,
    /// bytes
    pub gpu_mem_capacity: f64,
    /// flop/s per device
    pub peak_flops: f64,
    /// achieved fraction of peak, in (0, 1]
    pub mfu: f64,
    /// bytes/s between devices of one node
    pub bw_intra: f64,
    /// bytes/s between nodes
    pub bw_inter: f64,
    /// bytes/s device to host
    pub bw_d2h: f64,
    /// bytes/s host to device
    pub bw_h2d: f64,
    /// seconds per collective launch
    #[serde(default = "default_latency")]
    pub comm_latency: f64,
    /// usable fraction of device memory, in (0, 1]
    #[serde(default = "default_headroom")]
    pub mem_headroom: f64,
}

fn default_latency() -> f64 {
    20e-6
}

fn default_headroom() -> f64 {
    1.0
}

impl ClusterSpec {
    pub fn from_toml(text: &str) -> Result<Self, SpecError> {
        let f: ClusterFile = parse_toml(text)?;
        f.cluster.validate()?;
        Ok(f.cluster)
    }

    pub fn load(path: &Path) -> Result<Self, SpecError> {
        Self::from_toml(&read(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&ClusterFile {
            cluster: self.clone(),
        })
        .expect("cluster spec serializes")
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.nodes == 0 {
            return Err(invalid("cluster.nodes", "must be positive"));
        }
        if self.gpus_per_node == 0 {
            return Err(invalid("cluster.gpus_per_node", "must be positive"));
        }
        let positive = [
            ("cluster.gpu_mem_capacity", self.gpu_mem_capacity),
            ("cluster.peak_flops", self.peak_flops),
            ("cluster.bw_intra", self.bw_intra),
            ("cluster.bw_inter", self.bw_inter),
            ("cluster.bw_d2h", self.bw_d2h),
            ("cluster.bw_h2d", self.bw_h2d),
            ("cluster.comm_latency", self.comm_latency),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(
                    key,
                    format!("must be positive and finite, got {v}"),
                ));
            }
        }
        for (key, v) in [
            ("cluster.mfu", self.mfu),
            ("cluster.mem_headroom", self.mem_headroom),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(invalid(key, format!("must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn devices(&self) -> u32 {
        self.nodes * self.gpus_per_node
    }

    /// Usable bytes per device.
    pub fn mem_budget(&self) -> f64 {
        self.gpu_mem_capacity * self.mem_headroom
    }

    pub fn digest(&self) -> String {
        digest(&self.to_toml())
    }
}

fn digest(text: &str) -> String {
    use sha2::{Digest, Sha256};
    let h = Sha256::digest(text.as_bytes());
    h.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Kernel kinds that can carry a measured time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    LayerFwd,
    LayerBwd,
}

/// One measured kernel time for an exact shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpTimeEntry {
    pub kind: OpKind,
    pub b: u64,
    pub s: u64,
    pub h: u64,
    pub tp: u64,
    pub seconds: f64,
}

/// Measured per-layer times keyed by exact shape. Lookups never
/// interpolate; a miss falls back to the analytical formula.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpTimeTable {
    entries: BTreeMap<(OpKind, u64, u64, u64, u64), f64>,
}

impl OpTimeTable {
    pub fn new(entries: impl IntoIterator<Item = OpTimeEntry>) -> Result<Self, SpecError> {
        let mut t = OpTimeTable::default();
        for e in entries {
            if !(e.seconds.is_finite() && e.seconds > 0.0) {
                return Err(invalid(
                    "op_time.seconds",
                    format!("must be positive, got {}", e.seconds),
                ));
            }
            t.entries.insert((e.kind, e.b, e.s, e.h, e.tp), e.seconds);
        }
        Ok(t)
    }

    pub fn from_toml(text: &str) -> Result<Self, SpecError> {
        let f: OpTimeFile = parse_toml(text)?;
        Self::new(f.op_time)
    }

    pub fn load(path: &Path) -> Result<Self, SpecError> {
        Self::from_toml(&read(path)?)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, kind: OpKind, b: u64, s: u64, h: u64, tp: u64) -> Option<f64> {
        self.entries.get(&(kind, b, s, h, tp)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = OpTimeEntry> + '_ {
        self.entries
            .iter()
            .map(|(&(kind, b, s, h, tp), &seconds)| OpTimeEntry {
                kind,
                b,
                s,
                h,
                tp,
                seconds,
            })
    }
}

fn c(v: u64) -> f64 {
    v as f64
}

/// Parameters of one transformer layer: attention projections, MLP and
/// norms.
pub fn layer_param_count(m: &ModelSpec) -> Expr {
    let (h, f) = (c(m.hidden), c(m.ffn()));
    Expr::constant(4.0 * h * h + 2.0 * h * f + 4.0 * h)
}

/// Token embedding (first stage) or LM head (last stage) parameters.
pub fn embedding_param_count(m: &ModelSpec) -> Expr {
    Expr::constant(c(m.vocab) * c(m.hidden))
}

/// Whole-model parameter count, embedding table counted once.
///
/// Stage accounting still charges the table to both terminal stages,
/// since the input embedding and the output projection live there.
pub fn total_param_count(m: &ModelSpec) -> f64 {
    let layer = layer_param_count(m).as_const().expect("constant");
    let emb = embedding_param_count(m).as_const().expect("constant");
    f64::from(m.num_layers) * layer + emb
}

/// Forward FLOPs of one layer for micro batch `b`. Backward is twice this;
/// recomputing a checkpointed layer costs one more forward.
pub fn layer_fwd_flops(m: &ModelSpec, b: &Expr) -> Expr {
    let (s, h, f) = (c(m.seq), c(m.hidden), c(m.ffn()));
    let dense = 2.0 * s * (4.0 * h * h + 2.0 * h * f);
    let attn = 4.0 * s * s * h;
    b * dense + b * attn
}

pub fn layer_bwd_flops(m: &ModelSpec, b: &Expr) -> Expr {
    2.0 * layer_fwd_flops(m, b)
}

/// Forward FLOPs of the LM head projection.
pub fn head_fwd_flops(m: &ModelSpec, b: &Expr) -> Expr {
    b * (2.0 * c(m.seq) * c(m.hidden) * c(m.vocab))
}

/// (full, boundary) saved-activation bytes per layer and microbatch.
///
/// Boundary keeps only the layer input. Full follows the usual
/// half-precision count `b·s·h·(34 + 5·a·s/h)`; FlashAttention drops the
/// score term.
pub fn default_act_bytes(m: &ModelSpec, b: &Expr) -> (Expr, Expr) {
    let (s, h, a) = (c(m.seq), c(m.hidden), c(m.heads));
    let per_token = if m.flash_attention {
        34.0
    } else {
        34.0 + 5.0 * a * s / h
    };
    let full = b * (s * h * per_token);
    let boundary = b * (c(m.elem_bytes) * s * h);
    (full, boundary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
    ReduceScatter,
    P2p,
    D2h,
    H2d,
}

impl FromStr for CollectiveKind {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "all-reduce" => CollectiveKind::AllReduce,
            "all-gather" => CollectiveKind::AllGather,
            "reduce-scatter" => CollectiveKind::ReduceScatter,
            "p2p" => CollectiveKind::P2p,
            "d2h" => CollectiveKind::D2h,
            "h2d" => CollectiveKind::H2d,
            other => return Err(invalid("kind", format!("unknown collective `{other}`"))),
        })
    }
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CollectiveKind::AllReduce => "all-reduce",
            CollectiveKind::AllGather => "all-gather",
            CollectiveKind::ReduceScatter => "reduce-scatter",
            CollectiveKind::P2p => "p2p",
            CollectiveKind::D2h => "d2h",
            CollectiveKind::H2d => "h2d",
        })
    }
}

/// Communicator: size may be symbolic (must be a positive expression).
#[derive(Debug, Clone)]
pub struct Group {
    pub size: Expr,
    pub spans_nodes: bool,
}

impl Group {
    pub fn new(size: Expr, spans_nodes: bool) -> Self {
        Group { size, spans_nodes }
    }
}

/// Ring-model transfer time. Collectives over a group of one cost nothing;
/// host copies carry no launch latency.
pub fn collective_time(
    kind: CollectiveKind,
    bytes: &Expr,
    group: &Group,
    cluster: &ClusterSpec,
) -> Expr {
    let bw = if group.spans_nodes {
        cluster.bw_inter
    } else {
        cluster.bw_intra
    };
    let lat = Expr::constant(cluster.comm_latency);
    let g = &group.size;
    let active = g.ind_ge(&Expr::constant(2.0));
    // (g-1)/g
    let frac = || 1.0 - 1.0 / g;
    match kind {
        CollectiveKind::AllReduce => 2.0 * frac() * bytes / bw + lat * active,
        CollectiveKind::AllGather | CollectiveKind::ReduceScatter => {
            frac() * bytes / bw + lat * active
        }
        CollectiveKind::P2p => bytes / bw + lat,
        CollectiveKind::D2h => bytes / cluster.bw_d2h,
        CollectiveKind::H2d => bytes / cluster.bw_h2d,
    }
}
