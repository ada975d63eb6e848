//! Per-stage time and memory accounting.
//!
//! Costs are built as symbolic expressions over the shared stage symbols,
//! one expression family per discrete key (stage role, ZeRO level and which
//! communicators cross node boundaries). The family is split into *parts*
//! that depend on the outer configuration (b, dp, tp, l, ckpt, wo, ao and
//! the per-layer op times) and a thin tail that folds in the gradient and
//! optimizer offload ratios and the in-flight microbatch count. The tail is
//! written once over [`Scalar`], so the symbolic form and the numeric fast
//! path perform the same floating-point operations in the same order.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::ops::{Add, Mul, Sub};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::interference::{ChannelVector, InterferenceParams};
use crate::symexpr::{BindingTable, Bindings, Expr, ExprError, Program};
use crate::workload::{
    collective_time, embedding_param_count, head_fwd_flops, layer_param_count, vars, ClusterSpec,
    CollectiveKind, Group, ModelSpec, OpKind, OpTimeTable, SpecError,
};

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("invalid stage config: {0}")]
    InvalidConfig(String),
    #[error("invalid iteration context: {0}")]
    InvalidContext(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// One pipeline stage's parallel layout and memory-saving choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// 1-based position in the pipeline.
    pub stage: u32,
    pub layers: u32,
    /// Micro batch size.
    pub b: u32,
    pub dp: u32,
    pub tp: u32,
    pub nodes: u32,
    pub gpus_per_node: u32,
    pub zero: u8,
    /// Number of recomputed layers.
    pub ckpt: u32,
    pub wo: f64,
    pub go: f64,
    pub oo: f64,
    pub ao: f64,
}

impl StageConfig {
    pub fn devices(&self) -> u32 {
        self.nodes * self.gpus_per_node
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |m: String| Err(CostError::InvalidConfig(m));
        if self.stage == 0 || self.layers == 0 || self.b == 0 {
            return bad("stage, layers and b must be positive".into());
        }
        if self.nodes == 0 || self.gpus_per_node == 0 || self.dp == 0 || self.tp == 0 {
            return bad("device counts must be positive".into());
        }
        if self.dp * self.tp != self.devices() {
            return bad(format!(
                "dp*tp = {} but the submesh has {} devices",
                self.dp * self.tp,
                self.devices()
            ));
        }
        if self.ckpt > self.layers {
            return bad(format!("ckpt {} exceeds layers {}", self.ckpt, self.layers));
        }
        if self.zero > 3 {
            return bad(format!("zero level {} not in 0..=3", self.zero));
        }
        for (name, r) in [
            ("wo", self.wo),
            ("go", self.go),
            ("oo", self.oo),
            ("ao", self.ao),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} = {r} not in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Tie-break order over (L, b, DP, TP, ZeRO, CKPT, WO, GO, OO, AO).
    pub fn tuple_cmp(&self, other: &Self) -> Ordering {
        (self.layers, self.b, self.dp, self.tp, self.zero, self.ckpt)
            .cmp(&(
                other.layers,
                other.b,
                other.dp,
                other.tp,
                other.zero,
                other.ckpt,
            ))
            .then(self.wo.total_cmp(&other.wo))
            .then(self.go.total_cmp(&other.go))
            .then(self.oo.total_cmp(&other.oo))
            .then(self.ao.total_cmp(&other.ao))
    }
}

/// Iteration-wide quantities shared by all stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationContext {
    /// Gradient accumulation steps (microbatches per iteration).
    pub g: u32,
    pub stages: u32,
    pub global_batch: u32,
    /// Bytes available per device.
    pub mem_budget: f64,
}

impl IterationContext {
    pub fn validate(&self) -> Result<(), CostError> {
        if self.g == 0 || self.stages == 0 || self.global_batch == 0 {
            return Err(CostError::InvalidContext(
                "g, stages and global batch must be positive".into(),
            ));
        }
        if !(self.mem_budget > 0.0) {
            return Err(CostError::InvalidContext(
                "memory budget must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Microbatches alive at once on stage `i` under 1F1B.
    pub fn in_flight(&self, stage: u32) -> u32 {
        self.g.min(self.stages + 1 - stage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub t: f64,
    pub d: f64,
    pub mem_fwd: f64,
    pub mem_bwd: f64,
}

impl StageCost {
    pub fn mem_peak(&self) -> f64 {
        self.mem_fwd.max(self.mem_bwd)
    }
}

/// Discrete choices that change the shape of the cost expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FamilyKey {
    pub first: bool,
    pub last: bool,
    pub zero: u8,
    pub tp_spans_nodes: bool,
    pub dp_spans_nodes: bool,
}

impl FamilyKey {
    pub fn of(cfg: &StageConfig, stages: u32) -> Self {
        FamilyKey {
            first: cfg.stage == 1,
            last: cfg.stage == stages,
            zero: cfg.zero,
            tp_spans_nodes: cfg.tp > cfg.gpus_per_node,
            dp_spans_nodes: cfg.nodes > 1 && cfg.dp > 1,
        }
    }
}

/// Arithmetic shared by the symbolic and numeric tails.
pub trait Scalar: Clone + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    fn lit(v: f64) -> Self;
}

impl Scalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }
}

impl Scalar for Expr {
    fn lit(v: f64) -> Self {
        Expr::constant(v)
    }
}

/// Outer-configuration parts of a stage's cost.
#[derive(Debug, Clone)]
pub struct Parts<T> {
    /// Stable-microbatch channels (C, G2G, C2G, G2C).
    pub stable: [T; 4],
    /// Iteration-boundary G2G work charged to the first microbatch.
    pub sync: T,
    /// H2D / D2H seconds per unit of optimizer-state and gradient offload.
    pub c2g_oo: T,
    pub c2g_go: T,
    pub g2c_oo: T,
    pub g2c_go: T,
    /// Resident weight bytes, and gradient / optimizer bytes before offload.
    pub weights: T,
    pub grads: T,
    pub opt: T,
    /// Prefetch buffer plus forward / backward working set.
    pub extra_fwd: T,
    pub extra_bwd: T,
    /// Saved activations per in-flight microbatch.
    pub act: T,
}

pub const PART_COUNT: usize = 15;

impl<T: Scalar> Parts<T> {
    fn to_vec(&self) -> Vec<T> {
        let mut v: Vec<T> = self.stable.to_vec();
        v.extend([
            self.sync.clone(),
            self.c2g_oo.clone(),
            self.c2g_go.clone(),
            self.g2c_oo.clone(),
            self.g2c_go.clone(),
            self.weights.clone(),
            self.grads.clone(),
            self.opt.clone(),
            self.extra_fwd.clone(),
            self.extra_bwd.clone(),
            self.act.clone(),
        ]);
        v
    }

    fn from_slice(v: &[T]) -> Self {
        Parts {
            stable: [v[0].clone(), v[1].clone(), v[2].clone(), v[3].clone()],
            sync: v[4].clone(),
            c2g_oo: v[5].clone(),
            c2g_go: v[6].clone(),
            g2c_oo: v[7].clone(),
            g2c_go: v[8].clone(),
            weights: v[9].clone(),
            grads: v[10].clone(),
            opt: v[11].clone(),
            extra_fwd: v[12].clone(),
            extra_bwd: v[13].clone(),
            act: v[14].clone(),
        }
    }

    /// First-microbatch channels for offload ratios `go`, `oo`.
    pub fn first(&self, go: T, oo: T) -> [T; 4] {
        let [c, g2g, c2g, g2c] = self.stable.clone();
        [
            c,
            g2g + self.sync.clone(),
            c2g + oo.clone() * self.c2g_oo.clone() + go.clone() * self.c2g_go.clone(),
            g2c + oo * self.g2c_oo.clone() + go * self.g2c_go.clone(),
        ]
    }

    /// Resident model states: weights, gradients and optimizer states.
    pub fn states(&self, go: T, oo: T) -> T {
        self.weights.clone()
            + (T::lit(1.0) - go) * self.grads.clone()
            + (T::lit(1.0) - oo) * self.opt.clone()
    }

    /// (forward, backward) peak bytes with `w` microbatches in flight.
    pub fn memory(&self, go: T, oo: T, w: T) -> (T, T) {
        let states = self.states(go, oo);
        let acts = w * self.act.clone();
        (
            states.clone() + self.extra_fwd.clone() + acts.clone(),
            states + self.extra_bwd.clone() + acts,
        )
    }
}

/// Symbolic cost family for one key plus its compiled batch program.
pub struct Family {
    pub key: FamilyKey,
    pub parts: Parts<Expr>,
    program: Program,
}

/// Inputs of the batch program, in column order.
pub const OUTER_INPUTS: [&str; 9] = ["b", "dp", "tp", "l", "ckpt", "wo", "ao", "tf", "tb"];

impl Family {
    pub fn build(
        key: FamilyKey,
        model: &ModelSpec,
        cluster: &ClusterSpec,
    ) -> Result<Self, CostError> {
        let parts = build_parts(key, model, cluster)?;
        let program = Program::compile(&parts.to_vec());
        Ok(Family {
            key,
            parts,
            program,
        })
    }

    /// Full symbolic stable channels, first channels and memory peaks.
    pub fn full_exprs(&self) -> ([Expr; 4], [Expr; 4], Expr, Expr) {
        let v = vars();
        let first = self.parts.first(v.go.clone(), v.oo.clone());
        let (mf, mb) = self.parts.memory(v.go.clone(), v.oo.clone(), v.w.clone());
        (self.parts.stable.clone(), first, mf, mb)
    }

    /// Evaluates the parts for a table with the [`OUTER_INPUTS`] columns.
    pub fn eval_parts(&self, table: &BindingTable) -> Result<Vec<Parts<f64>>, CostError> {
        let cols = self.program.run(table)?;
        Ok((0..table.rows())
            .map(|r| {
                let row: Vec<f64> = cols.iter().map(|c| c[r]).collect();
                Parts::from_slice(&row)
            })
            .collect())
    }

    pub fn program(&self) -> &Program {
        &self.program
    }
}

fn build_parts(key: FamilyKey, m: &ModelSpec, cl: &ClusterSpec) -> Result<Parts<Expr>, CostError> {
    let v = vars();
    let (b, dp, tp, l, ckpt) = (&v.b, &v.dp, &v.tp, &v.l, &v.ckpt);
    let elem = m.elem_bytes as f64;
    let (s, h, voc) = (m.seq as f64, m.hidden as f64, m.vocab as f64);
    let rate = cl.mfu * cl.peak_flops;

    let p_layer = layer_param_count(m);
    let mut p_raw = l * &p_layer;
    let emb = embedding_param_count(m);
    if key.first {
        p_raw = p_raw + &emb;
    }
    if key.last {
        p_raw = p_raw + &emb;
    }
    // per tensor-parallel rank
    let p_stage = p_raw / tp;

    let (full, boundary) = m.act_bytes(b)?;
    let act_stage = (ckpt * &boundary + (l - ckpt) * &full) / tp;

    // compute
    let mut c = l * (&v.tf + &v.tb) + ckpt * &v.tf;
    if key.last {
        c = c + 3.0 * head_fwd_flops(m, b) / (tp * rate);
    }

    // device-to-device
    let tp_group = Group::new(tp.clone(), key.tp_spans_nodes);
    let dp_group = Group::new(dp.clone(), key.dp_spans_nodes);
    let act_msg = b * (elem * s * h);
    let per_layer = if m.parallel_attention { 1.0 } else { 2.0 };
    let tp_ar = collective_time(CollectiveKind::AllReduce, &act_msg, &tp_group, cl);
    let mut g2g = (per_layer * 2.0 * l + per_layer * ckpt) * tp_ar;
    let neighbors = u32::from(!key.first) + u32::from(!key.last);
    if neighbors > 0 {
        let p2p = collective_time(
            CollectiveKind::P2p,
            &act_msg,
            &Group::new(Expr::constant(2.0), cl.nodes > 1),
            cl,
        );
        g2g = g2g + (2.0 * neighbors as f64) * p2p;
    }
    let weight_bytes = elem * &p_stage;
    let gather = collective_time(CollectiveKind::AllGather, &weight_bytes, &dp_group, cl);
    if key.zero == 3 {
        g2g = g2g + 2.0 * &gather;
    }

    // host copies
    let d2h = |bytes: &Expr| collective_time(CollectiveKind::D2h, bytes, &dp_group, cl);
    let h2d = |bytes: &Expr| collective_time(CollectiveKind::H2d, bytes, &dp_group, cl);
    let swapped_acts = &v.ao * &act_stage;
    let g2c = d2h(&swapped_acts);
    let shard = |bytes: Expr, sharded: bool| if sharded { bytes / dp } else { bytes };
    let fetched_weights = shard(2.0 * &v.wo * &weight_bytes, key.zero == 3);
    let c2g = h2d(&swapped_acts) + h2d(&fetched_weights);

    // iteration boundary
    let grad_kind = if key.zero <= 1 {
        CollectiveKind::AllReduce
    } else {
        CollectiveKind::ReduceScatter
    };
    let mut sync = collective_time(grad_kind, &weight_bytes, &dp_group, cl);
    if key.zero == 3 {
        sync = sync + gather;
    }
    let opt_bytes = shard(12.0 * &p_stage, key.zero >= 1);
    let grad_bytes = shard(elem * &p_stage, key.zero >= 2);

    // memory
    let weights = shard(weight_bytes.clone() * (1.0 - &v.wo), key.zero == 3);
    let prefetch = (2.0 * elem * &p_layer / tp).min(&(weight_bytes - &weights));
    let mut working = full.clone() / tp;
    if key.last {
        working = working + 4.0 * b * (s * voc) / tp;
    }
    let extra_fwd = prefetch.clone() + &working;
    let extra_bwd = prefetch + working + elem * &p_layer / tp;
    let act = (1.0 - &v.ao) * act_stage;

    Ok(Parts {
        stable: [c, g2g, c2g, g2c],
        sync,
        c2g_oo: h2d(&opt_bytes),
        c2g_go: h2d(&grad_bytes),
        g2c_oo: d2h(&opt_bytes),
        g2c_go: d2h(&grad_bytes),
        weights,
        grads: grad_bytes,
        opt: opt_bytes,
        extra_fwd,
        extra_bwd,
        act,
    })
}

/// Owns the specs and lazily builds one [`Family`] per key.
pub struct CostModel {
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
    pub op_times: OpTimeTable,
    pub params: InterferenceParams,
    families: Mutex<HashMap<FamilyKey, Arc<Family>>>,
}

impl CostModel {
    pub fn new(
        model: ModelSpec,
        cluster: ClusterSpec,
        op_times: OpTimeTable,
        params: InterferenceParams,
    ) -> Result<Self, CostError> {
        model.validate()?;
        cluster.validate()?;
        Ok(CostModel {
            model,
            cluster,
            op_times,
            params,
            families: Mutex::new(HashMap::new()),
        })
    }

    pub fn family(&self, key: FamilyKey) -> Result<Arc<Family>, CostError> {
        if let Some(f) = self.families.lock().expect("family cache").get(&key) {
            return Ok(f.clone());
        }
        let fam = Arc::new(Family::build(key, &self.model, &self.cluster)?);
        let mut cache = self.families.lock().expect("family cache");
        Ok(cache.entry(key).or_insert(fam).clone())
    }

    /// Per-layer (forward, backward) seconds at micro batch `b` and TP
    /// degree `tp`, from the op-time table when it has the entry.
    pub fn layer_times(&self, b: u32, tp: u32) -> (f64, f64) {
        let m = &self.model;
        let look = |kind| {
            self.op_times
                .lookup(kind, b as u64, m.seq, m.hidden, tp as u64)
        };
        let rate = f64::from(tp) * (self.cluster.mfu * self.cluster.peak_flops);
        let (s, h, f) = (m.seq as f64, m.hidden as f64, m.ffn() as f64);
        let bf = f64::from(b);
        let flops = bf * (2.0 * s * (4.0 * h * h + 2.0 * h * f)) + bf * (4.0 * s * s * h);
        let tf = look(OpKind::LayerFwd).unwrap_or(flops / rate);
        let tb = look(OpKind::LayerBwd).unwrap_or(2.0 * flops / rate);
        (tf, tb)
    }

    /// Outer-input values for a config, in [`OUTER_INPUTS`] order.
    pub fn outer_values(&self, cfg: &StageConfig) -> [f64; 9] {
        let (tf, tb) = self.layer_times(cfg.b, cfg.tp);
        [
            f64::from(cfg.b),
            f64::from(cfg.dp),
            f64::from(cfg.tp),
            f64::from(cfg.layers),
            f64::from(cfg.ckpt),
            cfg.wo,
            cfg.ao,
            tf,
            tb,
        ]
    }

    fn bindings(&self, cfg: &StageConfig, ctx: &IterationContext) -> Result<Bindings, CostError> {
        let vals = self.outer_values(cfg);
        let mut pairs: Vec<(&str, f64)> = OUTER_INPUTS.iter().copied().zip(vals).collect();
        pairs.push(("go", cfg.go));
        pairs.push(("oo", cfg.oo));
        pairs.push(("w", f64::from(ctx.in_flight(cfg.stage))));
        Ok(vars().table.bind(pairs)?)
    }

    fn check(&self, cfg: &StageConfig, ctx: &IterationContext) -> Result<(), CostError> {
        cfg.validate()?;
        ctx.validate()?;
        if cfg.stage > ctx.stages {
            return Err(CostError::InvalidConfig(format!(
                "stage {} beyond {} stages",
                cfg.stage, ctx.stages
            )));
        }
        if u64::from(cfg.b) * u64::from(cfg.dp) * u64::from(ctx.g) != u64::from(ctx.global_batch) {
            return Err(CostError::InvalidConfig(format!(
                "b*dp*G = {}*{}*{} differs from global batch {}",
                cfg.b, cfg.dp, ctx.g, ctx.global_batch
            )));
        }
        Ok(())
    }

    /// Stable and first-microbatch channel vectors, by direct substitution.
    pub fn time_components(
        &self,
        cfg: &StageConfig,
        ctx: &IterationContext,
    ) -> Result<(ChannelVector, ChannelVector), CostError> {
        self.check(cfg, ctx)?;
        let fam = self.family(FamilyKey::of(cfg, ctx.stages))?;
        let (stable, first, _, _) = fam.full_exprs();
        let bind = self.bindings(cfg, ctx)?;
        let ev = |es: &[Expr; 4]| -> Result<ChannelVector, CostError> {
            let mut a = [0.0; 4];
            for (slot, e) in a.iter_mut().zip(es) {
                *slot = e.substitute_value(&bind)?;
            }
            Ok(ChannelVector::from_array(a))
        };
        Ok((ev(&stable)?, ev(&first)?))
    }

    pub fn stable_time(&self, cfg: &StageConfig, ctx: &IterationContext) -> Result<f64, CostError> {
        let (stable, _) = self.time_components(cfg, ctx)?;
        Ok(self.params.predict(&stable))
    }

    pub fn delta_time(&self, cfg: &StageConfig, ctx: &IterationContext) -> Result<f64, CostError> {
        let (stable, first) = self.time_components(cfg, ctx)?;
        Ok(delta(&self.params, &stable, &first).1)
    }

    /// Symbolic (forward, backward) peak memory for the config's family.
    pub fn peak_memory_exprs(
        &self,
        cfg: &StageConfig,
        ctx: &IterationContext,
    ) -> Result<(Expr, Expr), CostError> {
        let fam = self.family(FamilyKey::of(cfg, ctx.stages))?;
        let (_, _, mf, mb) = fam.full_exprs();
        Ok((mf, mb))
    }

    /// (forward, backward) peak bytes, by direct substitution.
    pub fn peak_memory(
        &self,
        cfg: &StageConfig,
        ctx: &IterationContext,
    ) -> Result<(f64, f64), CostError> {
        self.check(cfg, ctx)?;
        let (mf, mb) = self.peak_memory_exprs(cfg, ctx)?;
        let bind = self.bindings(cfg, ctx)?;
        Ok((mf.substitute_value(&bind)?, mb.substitute_value(&bind)?))
    }

    /// Resident model-state bytes per device.
    pub fn state_bytes(&self, cfg: &StageConfig, ctx: &IterationContext) -> Result<f64, CostError> {
        self.check(cfg, ctx)?;
        let fam = self.family(FamilyKey::of(cfg, ctx.stages))?;
        let v = vars();
        let e = fam.parts.states(v.go.clone(), v.oo.clone());
        Ok(e.substitute_value(&self.bindings(cfg, ctx)?)?)
    }

    /// All four numbers for one config, each by direct substitution.
    pub fn evaluate(
        &self,
        cfg: &StageConfig,
        ctx: &IterationContext,
    ) -> Result<StageCost, CostError> {
        let (stable, first) = self.time_components(cfg, ctx)?;
        let (t, d) = delta(&self.params, &stable, &first);
        let (mem_fwd, mem_bwd) = self.peak_memory(cfg, ctx)?;
        Ok(StageCost {
            t,
            d,
            mem_fwd,
            mem_bwd,
        })
    }
}

/// (t, d) from stable and first channels; d is clamped at zero.
pub fn delta(
    params: &InterferenceParams,
    stable: &ChannelVector,
    first: &ChannelVector,
) -> (f64, f64) {
    let t = params.predict(stable);
    let d = (params.predict(first) - t).max(0.0);
    (t, d)
}

/// Writes one CSV row per evaluated config.
pub fn write_cost_csv<W: std::io::Write>(
    writer: W,
    rows: &[(StageConfig, StageCost)],
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "stage",
        "layers",
        "b",
        "dp",
        "tp",
        "nodes",
        "gpus_per_node",
        "zero",
        "ckpt",
        "wo",
        "go",
        "oo",
        "ao",
        "t",
        "d",
        "mem_fwd",
        "mem_bwd",
    ])?;
    for (c, k) in rows {
        let mut rec: Vec<String> = [c.stage, c.layers, c.b, c.dp, c.tp, c.nodes, c.gpus_per_node]
            .iter()
            .map(u32::to_string)
            .collect();
        rec.push(c.zero.to_string());
        rec.push(c.ckpt.to_string());
        for v in [c.wo, c.go, c.oo, c.ao, k.t, k.d, k.mem_fwd, k.mem_bwd] {
            rec.push(format!("{v:?}"));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::tests::{cluster, gpt};

    fn base(layers: u32, b: u32, dp: u32, tp: u32) -> StageConfig {
        StageConfig {
            stage: 1,
            layers,
            b,
            dp,
            tp,
            nodes: 1,
            gpus_per_node: dp * tp,
            zero: 0,
            ckpt: 0,
            wo: 0.0,
            go: 0.0,
            oo: 0.0,
            ao: 0.0,
        }
    }

    fn ctx(g: u32, stages: u32, batch: u32) -> IterationContext {
        IterationContext {
            g,
            stages,
            global_batch: batch,
            mem_budget: 80e9,
        }
    }

    fn cost_model() -> CostModel {
        CostModel::new(
            gpt(32, 2560, 32),
            cluster(1, 8),
            OpTimeTable::default(),
            InterferenceParams::default(),
        )
        .unwrap()
    }

    #[test]
    fn trivial_config_has_no_delta() {
        let cm = cost_model();
        let cfg = base(4, 2, 1, 1);
        let cx = ctx(4, 1, 8);
        let (stable, first) = cm.time_components(&cfg, &cx).unwrap();
        assert_eq!(stable, first);
        assert_eq!(stable.g2g, 0.0);
        assert_eq!(cm.delta_time(&cfg, &cx).unwrap(), 0.0);
        assert_eq!(cm.stable_time(&cfg, &cx).unwrap(), stable.c);
    }

    #[test]
    fn full_recompute_doubles_forward_share() {
        let cm = cost_model();
        let cx = ctx(4, 2, 8);
        let mut cfg = base(4, 2, 1, 1);
        cfg.stage = 2;
        let (tf, tb) = cm.layer_times(2, 1);
        let c0 = cm.time_components(&cfg, &cx).unwrap().0.c;
        cfg.ckpt = 4;
        let c1 = cm.time_components(&cfg, &cx).unwrap().0.c;
        let head = c0 - 4.0 * (tf + tb);
        assert!(((c1 - head) - 4.0 * (2.0 * tf + tb)).abs() < 1e-12 * c1);
    }

    #[test]
    fn grad_sync_volume_for_zero2() {
        // middle stage, 8 layers of a 2.7B-like model, b=2, DP=4, ZeRO-2
        let model = gpt(32, 2560, 32);
        let cl = cluster(1, 4);
        let cm = CostModel::new(
            model.clone(),
            cl.clone(),
            OpTimeTable::default(),
            InterferenceParams::unit(),
        )
        .unwrap();
        let mut cfg = base(8, 2, 4, 1);
        cfg.stage = 2;
        cfg.zero = 2;
        let cx = ctx(4, 3, 32);
        let (stable, first) = cm.time_components(&cfg, &cx).unwrap();
        let params = 8.0 * 78_653_440.0;
        // reduce-scatter of half-precision grads: (g-1)/g of 2 bytes/param
        let want = 0.75 * 2.0 * params / 1e11 + 20e-6;
        assert!((first.g2g - stable.g2g - want).abs() < 1e-12);
    }

    #[test]
    fn state_bytes_hand_examples() {
        let cm = cost_model();
        let cx = ctx(1, 3, 8);
        let p = 8.0 * 78_653_440.0;
        let mut cfg = base(8, 2, 4, 1);
        cfg.stage = 2;
        assert_eq!(cm.state_bytes(&cfg, &cx).unwrap(), 16.0 * p);
        cfg.zero = 3;
        assert_eq!(cm.state_bytes(&cfg, &cx).unwrap(), 4.0 * p);
        cfg.zero = 0;
        cfg.oo = 1.0;
        assert_eq!(cm.state_bytes(&cfg, &cx).unwrap(), 4.0 * p);
    }

    #[test]
    fn rejects_inconsistent_batch() {
        let cm = cost_model();
        let cfg = base(4, 2, 1, 1);
        assert!(matches!(
            cm.evaluate(&cfg, &ctx(3, 1, 8)),
            Err(CostError::InvalidConfig(_))
        ));
        let mut bad = cfg;
        bad.ckpt = 5;
        assert!(cm.evaluate(&bad, &ctx(4, 1, 8)).is_err());
        let mut bad = cfg;
        bad.ao = 1.5;
        assert!(cm.evaluate(&bad, &ctx(4, 1, 8)).is_err());
    }

    #[test]
    fn batch_parts_match_substitution() {
        let cm = cost_model();
        let cx = ctx(2, 4, 16);
        let mut cfgs = Vec::new();
        for ckpt in [0, 3, 6] {
            for ao in [0.0, 0.5] {
                for wo in [0.0, 0.25] {
                    let mut c = base(6, 2, 4, 2);
                    c.stage = 2;
                    c.zero = 3;
                    c.ckpt = ckpt;
                    c.ao = ao;
                    c.wo = wo;
                    c.go = 0.375;
                    c.oo = 0.625;
                    cfgs.push(c);
                }
            }
        }
        let fam = cm.family(FamilyKey::of(&cfgs[0], cx.stages)).unwrap();
        let cols: Vec<(String, Vec<f64>)> = OUTER_INPUTS
            .iter()
            .enumerate()
            .map(|(j, n)| {
                (
                    n.to_string(),
                    cfgs.iter().map(|c| cm.outer_values(c)[j]).collect(),
                )
            })
            .collect();
        let table = BindingTable::new(&vars().table, cols).unwrap();
        let parts = fam.eval_parts(&table).unwrap();
        for (c, p) in cfgs.iter().zip(&parts) {
            let want = cm.evaluate(c, &cx).unwrap();
            let stable = ChannelVector::from_array(p.stable);
            let first = ChannelVector::from_array(p.first(c.go, c.oo));
            let (t, d) = delta(&cm.params, &stable, &first);
            let (mf, mb) = p.memory(c.go, c.oo, f64::from(cx.in_flight(c.stage)));
            assert_eq!(t.to_bits(), want.t.to_bits());
            assert_eq!(d.to_bits(), want.d.to_bits());
            assert_eq!(mf.to_bits(), want.mem_fwd.to_bits());
            assert_eq!(mb.to_bits(), want.mem_bwd.to_bits());
        }
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let cm = cost_model();
        let cfg = base(4, 2, 1, 1);
        let k = cm.evaluate(&cfg, &ctx(4, 1, 8)).unwrap();
        let mut buf = Vec::new();
        write_cost_csv(&mut buf, &[(cfg, k)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("stage,layers,b,"));
    }
}
