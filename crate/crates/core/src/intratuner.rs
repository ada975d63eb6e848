//! Exhaustive per-stage search returning the (t, d) Pareto frontier.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::interference::ChannelVector;
use crate::stagecost::{
    CostError, CostModel, FamilyKey, IterationContext, Parts, StageConfig, OUTER_INPUTS,
};
use crate::symexpr::BindingTable;
use crate::workload::vars;

#[derive(Debug, thiserror::Error)]
pub enum IntraError {
    #[error("no (dp, tp) layout of {devices} devices is compatible with the batch")]
    EmptySpace { devices: u32 },
    #[error("no config fits in memory (smallest overshoot {overshoot:.4e} bytes)")]
    Infeasible { overshoot: f64 },
    #[error("invalid search space: {0}")]
    BadSpace(String),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CkptChoice {
    /// No recomputation.
    Off,
    /// Every layer recomputed.
    Full,
    /// Any count in `0..=l`.
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffloadChoice {
    Off,
    /// Ratios in {0, 1}.
    Binary,
    /// Ratios `k / divisions` for `k` in `0..=divisions`.
    Grid,
}

/// Which values each decision axis may take.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub zero_levels: Vec<u8>,
    pub ckpt: CkptChoice,
    pub offload: OffloadChoice,
    /// Offload-ratio grid resolution (8 means steps of 1/8).
    pub divisions: u32,
    /// Allow TP groups larger than one node.
    pub tp_across_nodes: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    ParallelismOnly,
    Ckpt,
    Zero,
    Offload,
    Full,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::ParallelismOnly,
        Preset::Ckpt,
        Preset::Zero,
        Preset::Offload,
        Preset::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ParallelismOnly => "parallelism-only",
            Preset::Ckpt => "+ckpt",
            Preset::Zero => "+zero",
            Preset::Offload => "+offload",
            Preset::Full => "full",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl SearchSpace {
    /// Nested presets: each one adds an axis to the previous.
    pub fn preset(p: Preset, divisions: u32) -> Self {
        let mut s = SearchSpace {
            zero_levels: vec![0],
            ckpt: CkptChoice::Off,
            offload: OffloadChoice::Off,
            divisions,
            tp_across_nodes: false,
        };
        if p >= Preset::Ckpt {
            s.ckpt = CkptChoice::Any;
        }
        if p >= Preset::Zero {
            s.zero_levels = vec![0, 1, 2, 3];
        }
        if p >= Preset::Offload {
            s.offload = OffloadChoice::Binary;
        }
        if p >= Preset::Full {
            s.offload = OffloadChoice::Grid;
        }
        s
    }

    pub fn full(divisions: u32) -> Self {
        Self::preset(Preset::Full, divisions)
    }

    pub fn validate(&self) -> Result<(), IntraError> {
        if self.zero_levels.is_empty() || self.zero_levels.iter().any(|&z| z > 3) {
            return Err(IntraError::BadSpace(
                "zero levels must be a nonempty subset of 0..=3".into(),
            ));
        }
        if self.offload == OffloadChoice::Grid && self.divisions == 0 {
            return Err(IntraError::BadSpace(
                "grid divisions must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn ratios(&self) -> Vec<f64> {
        match self.offload {
            OffloadChoice::Off => vec![0.0],
            OffloadChoice::Binary => vec![0.0, 1.0],
            OffloadChoice::Grid => (0..=self.divisions)
                .map(|k| f64::from(k) / f64::from(self.divisions))
                .collect(),
        }
    }

    pub fn ckpt_values(&self, layers: u32) -> Vec<u32> {
        match self.ckpt {
            CkptChoice::Off => vec![0],
            CkptChoice::Full => vec![layers],
            CkptChoice::Any => (0..=layers).collect(),
        }
    }

    fn zero_levels_sorted(&self) -> Vec<u8> {
        let mut z = self.zero_levels.clone();
        z.sort_unstable();
        z.dedup();
        z
    }
}

/// (dp, tp, b) layouts of a submesh consistent with the global batch,
/// ordered by (b, dp, tp).
pub fn layouts(
    nodes: u32,
    gpus_per_node: u32,
    g: u32,
    global_batch: u32,
    tp_across_nodes: bool,
) -> Vec<(u32, u32, u32)> {
    let devices = nodes * gpus_per_node;
    if g == 0 || !global_batch.is_multiple_of(g) {
        return Vec::new();
    }
    let per_mb = global_batch / g;
    let mut out: Vec<(u32, u32, u32)> = (1..=devices)
        .filter(|tp| devices.is_multiple_of(*tp))
        .filter(|&tp| tp_across_nodes || tp <= gpus_per_node)
        .map(|tp| (devices / tp, tp))
        .filter(|&(dp, _)| per_mb.is_multiple_of(dp))
        .map(|(dp, tp)| (dp, tp, per_mb / dp))
        .collect();
    out.sort_by_key(|&(dp, tp, b)| (b, dp, tp));
    out
}

/// A stage slot to tune: position, layer count and submesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub stage: u32,
    pub layers: u32,
    pub nodes: u32,
    pub gpus_per_node: u32,
}

/// Every config of the space, in tuple order.
pub fn enumerate(
    space: &SearchSpace,
    cand: &Candidate,
    ctx: &IterationContext,
) -> Result<Vec<StageConfig>, IntraError> {
    space.validate()?;
    let lay = layouts(
        cand.nodes,
        cand.gpus_per_node,
        ctx.g,
        ctx.global_batch,
        space.tp_across_nodes,
    );
    if lay.is_empty() {
        return Err(IntraError::EmptySpace {
            devices: cand.nodes * cand.gpus_per_node,
        });
    }
    let ratios = space.ratios();
    let mut out = Vec::new();
    for &(dp, tp, b) in &lay {
        for zero in space.zero_levels_sorted() {
            for ckpt in space.ckpt_values(cand.layers) {
                for &wo in &ratios {
                    for &go in &ratios {
                        for &oo in &ratios {
                            for &ao in &ratios {
                                out.push(StageConfig {
                                    stage: cand.stage,
                                    layers: cand.layers,
                                    b,
                                    dp,
                                    tp,
                                    nodes: cand.nodes,
                                    gpus_per_node: cand.gpus_per_node,
                                    zero,
                                    ckpt,
                                    wo,
                                    go,
                                    oo,
                                    ao,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub t: f64,
    pub d: f64,
    pub config: StageConfig,
}

/// Non-dominated (t, d) points, t strictly increasing, d strictly
/// decreasing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParetoFrontier {
    pub points: Vec<FrontierPoint>,
}

fn point_cmp(a: &FrontierPoint, b: &FrontierPoint) -> Ordering {
    a.t.total_cmp(&b.t)
        .then(a.d.total_cmp(&b.d))
        .then_with(|| a.config.tuple_cmp(&b.config))
}

impl ParetoFrontier {
    /// Non-dominated subset of arbitrary points; equal (t, d) pairs keep
    /// the smallest config tuple.
    pub fn from_points(mut pts: Vec<FrontierPoint>) -> Self {
        pts.sort_by(point_cmp);
        let mut out: Vec<FrontierPoint> = Vec::new();
        for p in pts {
            match out.last() {
                Some(q) if q.d <= p.d => {}
                _ => out.push(p),
            }
        }
        ParetoFrontier { points: out }
    }

    /// Dominance merge; associative and independent of input order.
    pub fn merge(&self, other: &ParetoFrontier) -> ParetoFrontier {
        let mut all = self.points.clone();
        all.extend_from_slice(&other.points);
        Self::from_points(all)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.points
            .windows(2)
            .all(|w| w[0].t < w[1].t && w[0].d > w[1].d)
    }

    fn with_stage(mut self, stage: u32) -> Self {
        for p in &mut self.points {
            p.config.stage = stage;
        }
        self
    }
}

/// Keeps both endpoints and fills up to `k` points by farthest-point
/// selection in t (ties go to the lower index).
pub fn downsample_frontier(fr: &ParetoFrontier, k: usize) -> ParetoFrontier {
    let n = fr.points.len();
    let k = k.max(2);
    if n <= k {
        return fr.clone();
    }
    let t: Vec<f64> = fr.points.iter().map(|p| p.t).collect();
    let mut chosen = vec![false; n];
    chosen[0] = true;
    chosen[n - 1] = true;
    let mut gap: Vec<f64> = t
        .iter()
        .map(|&x| (x - t[0]).abs().min((x - t[n - 1]).abs()))
        .collect();
    for _ in 2..k {
        let mut best = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            match best {
                Some(j) if gap[j] >= gap[i] => {}
                _ => best = Some(i),
            }
        }
        let Some(j) = best else { break };
        chosen[j] = true;
        for i in 0..n {
            gap[i] = gap[i].min((t[i] - t[j]).abs());
        }
    }
    ParetoFrontier {
        points: fr
            .points
            .iter()
            .zip(&chosen)
            .filter(|(_, &c)| c)
            .map(|(p, _)| *p)
            .collect(),
    }
}

/// Position-dependent shape of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub first: bool,
    pub last: bool,
}

impl Slot {
    pub fn of(stage: u32, stages: u32) -> Self {
        Slot {
            first: stage == 1,
            last: stage == stages,
        }
    }
}

/// Frontier request that shares evaluation across in-flight counts.
#[derive(Debug, Clone)]
pub struct Request {
    pub slot: Slot,
    pub layers: u32,
    pub nodes: u32,
    pub gpus_per_node: u32,
    pub g: u32,
    pub global_batch: u32,
    pub mem_budget: f64,
}

struct Row {
    t: f64,
    /// Lower bound on d over every (go, oo) choice.
    lb_d: f64,
    parts: Parts<f64>,
    cfg: StageConfig,
}

#[derive(Clone, Copy)]
struct Best {
    d: f64,
    cfg: StageConfig,
}

/// Frontier for every in-flight count in `ws`; `Err(Infeasible)` entries
/// carry the smallest memory overshoot seen for that count.
pub fn frontiers(
    cm: &CostModel,
    space: &SearchSpace,
    req: &Request,
    ws: &[u32],
) -> Result<Vec<Result<ParetoFrontier, IntraError>>, IntraError> {
    space.validate()?;
    let lay = layouts(
        req.nodes,
        req.gpus_per_node,
        req.g,
        req.global_batch,
        space.tp_across_nodes,
    );
    if lay.is_empty() {
        return Err(IntraError::EmptySpace {
            devices: req.nodes * req.gpus_per_node,
        });
    }
    let ratios = space.ratios();
    let rmax = *ratios.last().expect("nonempty ratios");
    let ckpts = space.ckpt_values(req.layers);
    let wf: Vec<f64> = ws.iter().map(|&w| f64::from(w)).collect();
    let nw = ws.len();
    let mut overshoot = vec![f64::INFINITY; nw];

    let mut rows: Vec<Row> = Vec::new();
    for &(dp, tp, b) in &lay {
        for zero in space.zero_levels_sorted() {
            // with one replica every ZeRO level costs exactly what level 0
            // does, and level 0 wins the tie-break
            if dp == 1 && zero > 0 {
                continue;
            }
            let proto = StageConfig {
                stage: 0,
                layers: req.layers,
                b,
                dp,
                tp,
                nodes: req.nodes,
                gpus_per_node: req.gpus_per_node,
                zero,
                ckpt: 0,
                wo: 0.0,
                go: 0.0,
                oo: 0.0,
                ao: 0.0,
            };
            let key = FamilyKey {
                first: req.slot.first,
                last: req.slot.last,
                zero,
                tp_spans_nodes: tp > req.gpus_per_node,
                dp_spans_nodes: req.nodes > 1 && dp > 1,
            };
            let fam = cm.family(key)?;
            let mut cfgs = Vec::with_capacity(ckpts.len() * ratios.len() * ratios.len());
            for &ckpt in &ckpts {
                for &wo in &ratios {
                    for &ao in &ratios {
                        cfgs.push(StageConfig {
                            ckpt,
                            wo,
                            ao,
                            ..proto
                        });
                    }
                }
            }
            let (tf, tbk) = cm.layer_times(b, tp);
            let cols: Vec<(String, Vec<f64>)> = OUTER_INPUTS
                .iter()
                .map(|&name| {
                    let col: Vec<f64> = cfgs
                        .iter()
                        .map(|c| match name {
                            "b" => f64::from(c.b),
                            "dp" => f64::from(c.dp),
                            "tp" => f64::from(c.tp),
                            "l" => f64::from(c.layers),
                            "ckpt" => f64::from(c.ckpt),
                            "wo" => c.wo,
                            "ao" => c.ao,
                            "tf" => tf,
                            "tb" => tbk,
                            _ => unreachable!(),
                        })
                        .collect();
                    (name.to_string(), col)
                })
                .collect();
            let table = BindingTable::new(&vars().table, cols).map_err(CostError::from)?;
            let parts = fam.eval_parts(&table)?;
            for (cfg, p) in cfgs.into_iter().zip(parts) {
                let t = cm.params.predict(&ChannelVector::from_array(p.stable));
                let floor = ChannelVector::from_array(p.first(0.0, 0.0)).max();
                let lb_d = (floor - t).max(0.0);
                let mut any = false;
                for (wi, &w) in wf.iter().enumerate() {
                    let (mf, mb) = p.memory(rmax, rmax, w);
                    let over = mf.max(mb) - req.mem_budget;
                    if over <= 0.0 {
                        any = true;
                    } else if over < overshoot[wi] {
                        overshoot[wi] = over;
                    }
                }
                if any {
                    rows.push(Row {
                        t,
                        lb_d,
                        parts: p,
                        cfg,
                    });
                }
            }
        }
    }
    rows.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.cfg.tuple_cmp(&b.cfg)));

    let mut prev_d = vec![f64::INFINITY; nw];
    let mut out: Vec<Vec<FrontierPoint>> = vec![Vec::new(); nw];
    let mut inner: Vec<(f64, f64, f64)> = Vec::new();
    let mut i = 0;
    while i < rows.len() && prev_d.iter().any(|&d| d > 0.0) {
        let t = rows[i].t;
        let mut j = i;
        while j < rows.len() && rows[j].t == t {
            j += 1;
        }
        let mut group: Vec<Option<Best>> = vec![None; nw];
        for row in &rows[i..j] {
            let wanted: Vec<usize> = (0..nw)
                .filter(|&wi| {
                    row.lb_d < prev_d[wi] && group[wi].is_none_or(|g| row.lb_d <= g.d) && {
                        let (mf, mb) = row.parts.memory(rmax, rmax, wf[wi]);
                        mf.max(mb) <= req.mem_budget
                    }
                })
                .collect();
            if wanted.is_empty() {
                continue;
            }
            inner.clear();
            for &go in &ratios {
                for &oo in &ratios {
                    let first = ChannelVector::from_array(row.parts.first(go, oo));
                    let d = (cm.params.predict(&first) - row.t).max(0.0);
                    inner.push((go, oo, d));
                }
            }
            for &wi in &wanted {
                for &(go, oo, d) in &inner {
                    if d >= prev_d[wi] {
                        continue;
                    }
                    let (mf, mb) = row.parts.memory(go, oo, wf[wi]);
                    if mf.max(mb) > req.mem_budget {
                        continue;
                    }
                    let cfg = StageConfig { go, oo, ..row.cfg };
                    let better = match group[wi] {
                        None => true,
                        Some(g) => d < g.d || (d == g.d && cfg.tuple_cmp(&g.cfg) == Ordering::Less),
                    };
                    if better {
                        group[wi] = Some(Best { d, cfg });
                    }
                }
            }
        }
        for wi in 0..nw {
            if let Some(g) = group[wi] {
                if g.d < prev_d[wi] {
                    out[wi].push(FrontierPoint {
                        t,
                        d: g.d,
                        config: g.cfg,
                    });
                    prev_d[wi] = g.d;
                }
            }
        }
        i = j;
    }
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(wi, pts)| {
            if pts.is_empty() {
                Err(IntraError::Infeasible {
                    overshoot: overshoot[wi],
                })
            } else {
                Ok(ParetoFrontier { points: pts })
            }
        })
        .collect())
}

/// Frontier for one stage slot under `ctx`.
pub fn tune_intra(
    cm: &CostModel,
    space: &SearchSpace,
    cand: &Candidate,
    ctx: &IterationContext,
) -> Result<ParetoFrontier, IntraError> {
    ctx.validate()?;
    if cand.stage == 0 || cand.stage > ctx.stages || cand.layers == 0 {
        return Err(IntraError::BadSpace(format!(
            "stage {} of {} with {} layers",
            cand.stage, ctx.stages, cand.layers
        )));
    }
    let req = Request {
        slot: Slot::of(cand.stage, ctx.stages),
        layers: cand.layers,
        nodes: cand.nodes,
        gpus_per_node: cand.gpus_per_node,
        g: ctx.g,
        global_batch: ctx.global_batch,
        mem_budget: ctx.mem_budget,
    };
    let w = ctx.in_flight(cand.stage);
    let mut out = frontiers(cm, space, &req, &[w])?;
    out.pop()
        .expect("one result")
        .map(|f| f.with_stage(cand.stage))
}

/// Scalarization sweep: for each `alpha`, the config minimizing
/// `alpha·G·t + (1−alpha)·d` (ties by d, then t, then config tuple).
pub fn alpha_sweep(points: &[FrontierPoint], g: u32, alphas: &[f64]) -> Vec<Option<FrontierPoint>> {
    let gf = f64::from(g);
    alphas
        .iter()
        .map(|&a| {
            points.iter().copied().min_by(|p, q| {
                let vp = a * gf * p.t + (1.0 - a) * p.d;
                let vq = a * gf * q.t + (1.0 - a) * q.d;
                vp.total_cmp(&vq)
                    .then(p.d.total_cmp(&q.d))
                    .then(p.t.total_cmp(&q.t))
                    .then_with(|| p.config.tuple_cmp(&q.config))
            })
        })
        .collect()
}
