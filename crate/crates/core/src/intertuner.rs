//! Pipeline partitioning: layer split, submesh per stage and frontier point
//! per stage, minimizing the iteration objective exactly; plus the outer
//! search over gradient-accumulation steps and stage counts.
//!
//! The solver is a dynamic program over pipeline suffixes. Writing the
//! objective as `(G−1)·Tmax + max_i (d_i + Σ_{j≥i} t_j)`, a suffix is
//! summarized by `Tmax`, `U = Σ t` and `V = max (d_i + Σ_{j≥i} t_j)`, and the
//! final value is monotone in all three, so each (layers, devices) state
//! keeps only labels not dominated in (Tmax, U, V). Labels whose admissible
//! completion bound exceeds the incumbent are dropped.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::intratuner::{
    downsample_frontier, frontiers, layouts, IntraError, ParetoFrontier, Request, SearchSpace, Slot,
};
use crate::pipesim::{objective_unchecked, StageTiming};
use crate::stagecost::{CostError, CostModel, IterationContext, StageConfig};

#[derive(Debug, thiserror::Error)]
pub enum InterError {
    #[error("no feasible plan (smallest per-device memory overshoot {overshoot:.4e} bytes)")]
    Infeasible { overshoot: f64 },
    #[error("no selection covers {layers} layers on {devices} devices")]
    NoCover { layers: u32, devices: u32 },
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("plan re-evaluation mismatch at stage {0}")]
    Inconsistent(u32),
    #[error(transparent)]
    Intra(#[from] IntraError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Submesh {
    pub nodes: u32,
    pub gpus_per_node: u32,
}

impl Submesh {
    pub fn devices(&self) -> u32 {
        self.nodes * self.gpus_per_node
    }
}

/// Power-of-two slices of one node, then whole-node multiples.
pub fn enumerate_submeshes(nodes: u32, gpus_per_node: u32) -> Vec<Submesh> {
    let mut out = Vec::new();
    let mut m = 1;
    while m <= gpus_per_node {
        if gpus_per_node.is_multiple_of(m) {
            out.push(Submesh {
                nodes: 1,
                gpus_per_node: m,
            });
        }
        m *= 2;
    }
    for n in 1..=nodes {
        let s = Submesh {
            nodes: n,
            gpus_per_node,
        };
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// One choice for a stage: layer count, device count, (t, d) and an
/// opaque tag. Tags order equal-objective selections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageOption {
    pub layers: u32,
    pub devices: u32,
    pub t: f64,
    pub d: f64,
    pub tag: u64,
}

/// Explicit instance: `stages[i]` lists the options of stage `i + 1`.
#[derive(Debug, Clone)]
pub struct InterProblem {
    pub g: u32,
    pub total_layers: u32,
    pub total_devices: u32,
    pub stages: Vec<Vec<StageOption>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterSolution {
    /// Index into each stage's option list.
    pub selection: Vec<usize>,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy)]
struct Label {
    tmax: f64,
    u: f64,
    v: f64,
    opt: StageOption,
    parent: u32,
}

const ROOT: u32 = u32::MAX;

struct Engine {
    gm1: f64,
    total_layers: u32,
    total_devices: u32,
    /// Seconds per layer per device for one microbatch, a lower bound on
    /// stage time density; zero disables the completion bound.
    rate: f64,
    labels: Vec<Label>,
    tables: Vec<HashMap<(u32, u32), Vec<u32>>>,
}

#[derive(Debug, Clone)]
struct Closed {
    objective: f64,
    chain: Vec<StageOption>,
}

impl Engine {
    fn new(g: u32, total_layers: u32, total_devices: u32, rate: f64) -> Self {
        let mut root = HashMap::new();
        root.insert((0, 0), vec![ROOT]);
        Engine {
            gm1: f64::from(g - 1),
            total_layers,
            total_devices,
            rate,
            labels: Vec::new(),
            tables: vec![root],
        }
    }

    fn label(&self, id: u32) -> (f64, f64, f64) {
        if id == ROOT {
            (0.0, 0.0, f64::NEG_INFINITY)
        } else {
            let l = &self.labels[id as usize];
            (l.tmax, l.u, l.v)
        }
    }

    /// Options of this label's chain, outermost first.
    fn chain(&self, mut id: u32) -> Vec<StageOption> {
        let mut out = Vec::new();
        while id != ROOT {
            let l = &self.labels[id as usize];
            out.push(l.opt);
            id = l.parent;
        }
        out
    }

    fn bound(&self, tmax: f64, u: f64, v: f64, layers: u32, devices: u32) -> f64 {
        let rest_l = self.total_layers - layers;
        let rest_d = self.total_devices - devices;
        let r = if rest_d == 0 || self.rate == 0.0 {
            0.0
        } else {
            self.rate * f64::from(rest_l) / f64::from(rest_d) * (1.0 - 1e-9)
        };
        (self.gm1 * tmax.max(r) + v.max(u + r)) * (1.0 - 1e-12)
    }

    /// Prepends one stage to every suffix of length `j − 1`, keeping at
    /// least `reserve` layers and devices for the stages still to come.
    fn extend(&mut self, opts: &[StageOption], reserve: u32, incumbent: f64) {
        let j = self.tables.len();
        let prev = &self.tables[j - 1];
        let mut states: Vec<(u32, u32)> = prev.keys().copied().collect();
        states.sort_unstable();
        let mut next: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        for (ly, dv) in states {
            let ids = self.tables[j - 1][&(ly, dv)].clone();
            for opt in opts {
                let nl = ly + opt.layers;
                let nd = dv + opt.devices;
                if nl + reserve > self.total_layers || nd + reserve > self.total_devices {
                    continue;
                }
                for &pid in &ids {
                    let (tmax, u, v) = self.label(pid);
                    let nt = tmax.max(opt.t);
                    let nu = opt.t + u;
                    let nv = v.max(opt.d + nu);
                    if self.bound(nt, nu, nv, nl, nd) > incumbent {
                        continue;
                    }
                    let cand = Label {
                        tmax: nt,
                        u: nu,
                        v: nv,
                        opt: *opt,
                        parent: pid,
                    };
                    self.insert(&mut next, (nl, nd), cand);
                }
            }
        }
        self.tables.push(next);
    }

    fn insert(&mut self, table: &mut HashMap<(u32, u32), Vec<u32>>, key: (u32, u32), cand: Label) {
        let set = table.entry(key).or_default();
        for &id in set.iter() {
            let l = &self.labels[id as usize];
            if l.tmax <= cand.tmax && l.u <= cand.u && l.v <= cand.v {
                let equal = l.tmax == cand.tmax && l.u == cand.u && l.v == cand.v;
                if !equal {
                    return;
                }
                // same summary: keep the smaller encoding
                let existing = self.chain(id);
                let mut mine = vec![cand.opt];
                mine.extend(self.chain(cand.parent));
                if mine
                    .iter()
                    .map(|o| o.tag)
                    .cmp(existing.iter().map(|o| o.tag))
                    != Ordering::Less
                {
                    return;
                }
            }
        }
        let labels = &self.labels;
        set.retain(|&id| {
            let l = &labels[id as usize];
            !(cand.tmax <= l.tmax && cand.u <= l.u && cand.v <= l.v)
        });
        self.labels.push(cand);
        set.push((self.labels.len() - 1) as u32);
    }

    /// Best complete pipeline whose first stage is drawn from `opts` and
    /// whose suffix has `self.tables.len() − 1` stages.
    fn close(&self, g: u32, opts: &[StageOption], incumbent: f64) -> Option<Closed> {
        let table = self.tables.last()?;
        let mut best: Option<Closed> = None;
        for opt in opts {
            if opt.layers > self.total_layers || opt.devices > self.total_devices {
                continue;
            }
            let key = (
                self.total_layers - opt.layers,
                self.total_devices - opt.devices,
            );
            let Some(ids) = table.get(&key) else { continue };
            for &pid in ids {
                let (tmax, u, v) = self.label(pid);
                let nt = tmax.max(opt.t);
                let nu = opt.t + u;
                let nv = v.max(opt.d + nu);
                let approx = self.gm1 * nt + nv;
                if approx * (1.0 - 1e-12) > incumbent {
                    continue;
                }
                let mut chain = vec![*opt];
                chain.extend(self.chain(pid));
                let timings: Vec<StageTiming> = chain
                    .iter()
                    .map(|o| StageTiming { t: o.t, d: o.d })
                    .collect();
                let exact = objective_unchecked(g, &timings);
                let better = match &best {
                    None => true,
                    Some(b) => {
                        exact < b.objective
                            || (exact == b.objective
                                && chain
                                    .iter()
                                    .map(|o| o.tag)
                                    .cmp(b.chain.iter().map(|o| o.tag))
                                    == Ordering::Less)
                    }
                };
                if better {
                    best = Some(Closed {
                        objective: exact,
                        chain,
                    });
                }
            }
        }
        best
    }
}

/// Exact minimizer of the pipeline objective over an explicit table.
pub fn solve_inter(p: &InterProblem) -> Result<InterSolution, InterError> {
    let s = p.stages.len() as u32;
    if s == 0 || p.g == 0 {
        return Err(InterError::Invalid(
            "need at least one stage and G >= 1".into(),
        ));
    }
    for (i, opts) in p.stages.iter().enumerate() {
        for o in opts {
            if !(o.t > 0.0 && o.d >= 0.0 && o.layers > 0 && o.devices > 0) {
                return Err(InterError::Invalid(format!(
                    "stage {} has a bad option",
                    i + 1
                )));
            }
        }
    }
    // tags become the option index so the tie-break follows list order
    let tagged: Vec<Vec<StageOption>> = p
        .stages
        .iter()
        .map(|opts| {
            opts.iter()
                .enumerate()
                .map(|(k, o)| StageOption {
                    tag: k as u64,
                    ..*o
                })
                .collect()
        })
        .collect();
    let mut eng = Engine::new(p.g, p.total_layers, p.total_devices, 0.0);
    for j in 1..s {
        let stage = (s - j) as usize;
        eng.extend(&tagged[stage], s - j, f64::INFINITY);
    }
    let best = eng
        .close(p.g, &tagged[0], f64::INFINITY)
        .ok_or(InterError::NoCover {
            layers: p.total_layers,
            devices: p.total_devices,
        })?;
    Ok(InterSolution {
        selection: best.chain.iter().map(|o| o.tag as usize).collect(),
        objective: best.objective,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    pub space: SearchSpace,
    /// Frontier points kept per stage candidate.
    pub frontier_cap: usize,
    /// Worker threads; results do not depend on it.
    #[serde(skip, default = "one")]
    pub jobs: usize,
    pub max_stages: Option<u32>,
}

fn one() -> usize {
    1
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            space: SearchSpace::full(8),
            frontier_cap: 16,
            jobs: 1,
            max_stages: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedStage {
    pub config: StageConfig,
    pub t: f64,
    pub d: f64,
    pub mem_fwd: f64,
    pub mem_bwd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub g: u32,
    pub global_batch: u32,
    pub stages: Vec<PlannedStage>,
    /// Predicted seconds per iteration.
    pub objective: f64,
    /// Samples per second.
    pub throughput: f64,
}

impl TrainingPlan {
    pub fn timings(&self) -> Vec<StageTiming> {
        self.stages
            .iter()
            .map(|s| StageTiming { t: s.t, d: s.d })
            .collect()
    }

    pub fn context(&self, mem_budget: f64) -> IterationContext {
        IterationContext {
            g: self.g,
            stages: self.stages.len() as u32,
            global_batch: self.global_batch,
            mem_budget,
        }
    }

    fn encoding(&self) -> Vec<(u32, u32, u32, u32)> {
        self.stages
            .iter()
            .map(|s| {
                (
                    s.config.layers,
                    s.config.nodes,
                    s.config.gpus_per_node,
                    s.config.b,
                )
            })
            .collect()
    }

    /// Smaller objective, then fewer stages, then smaller G, then layer /
    /// submesh encoding.
    pub fn preference(&self, other: &Self) -> Ordering {
        self.objective
            .total_cmp(&other.objective)
            .then(self.stages.len().cmp(&other.stages.len()))
            .then(self.g.cmp(&other.g))
            .then_with(|| self.encoding().cmp(&other.encoding()))
            .then_with(|| {
                for (a, b) in self.stages.iter().zip(&other.stages) {
                    let o = a.config.tuple_cmp(&b.config);
                    if o != Ordering::Equal {
                        return o;
                    }
                }
                Ordering::Equal
            })
    }
}

pub fn divisors(n: u32) -> Vec<u32> {
    (1..=n).filter(|k| n.is_multiple_of(*k)).collect()
}

struct Incumbent(AtomicU64);

impl Incumbent {
    fn get(&self) -> f64 {
        f64::from_bits(self.0.load(AtomicOrdering::Relaxed))
    }

    fn offer(&self, v: f64) {
        let mut cur = self.0.load(AtomicOrdering::Relaxed);
        while v < f64::from_bits(cur) {
            match self.0.compare_exchange(
                cur,
                v.to_bits(),
                AtomicOrdering::Relaxed,
                AtomicOrdering::Relaxed,
            ) {
                Ok(_) => break,
                Err(now) => cur = now,
            }
        }
    }
}

/// In-flight counts a slot can see across all stage counts up to `max_s`.
fn in_flight_set(g: u32, max_s: u32, slot: Slot) -> Vec<u32> {
    let mut ws: Vec<u32> = match (slot.first, slot.last) {
        (_, true) => vec![1],
        (true, false) => (2..=max_s).map(|k| g.min(k)).collect(),
        (false, false) => (2..max_s).map(|k| g.min(k)).collect(),
    };
    ws.sort_unstable();
    ws.dedup();
    ws
}

struct Cell<'a> {
    cm: &'a CostModel,
    opts: &'a TuneOptions,
    g: u32,
    global_batch: u32,
    budget: f64,
    submeshes: Vec<Submesh>,
    max_stages: u32,
    memo: HashMap<(Slot, u32, usize), Vec<Option<ParetoFrontier>>>,
    ws: HashMap<Slot, Vec<u32>>,
    overshoot: f64,
}

impl<'a> Cell<'a> {
    /// Lower bound on stable time: compute for every layer, no recompute.
    fn time_floor(&self, layers: u32, sm: Submesh) -> Option<f64> {
        let lay = layouts(
            sm.nodes,
            sm.gpus_per_node,
            self.g,
            self.global_batch,
            self.opts.space.tp_across_nodes,
        );
        lay.iter()
            .map(|&(_, tp, b)| {
                let (tf, tb) = self.cm.layer_times(b, tp);
                f64::from(layers) * (tf + tb)
            })
            .min_by(f64::total_cmp)
    }

    fn frontier(
        &mut self,
        slot: Slot,
        layers: u32,
        sm_idx: usize,
        w: u32,
    ) -> Result<Option<&ParetoFrontier>, InterError> {
        let key = (slot, layers, sm_idx);
        if !self.memo.contains_key(&key) {
            let ws = self
                .ws
                .entry(slot)
                .or_insert_with(|| in_flight_set(self.g, self.max_stages, slot))
                .clone();
            let sm = self.submeshes[sm_idx];
            let req = Request {
                slot,
                layers,
                nodes: sm.nodes,
                gpus_per_node: sm.gpus_per_node,
                g: self.g,
                global_batch: self.global_batch,
                mem_budget: self.budget,
            };
            let res = match frontiers(self.cm, &self.opts.space, &req, &ws) {
                Ok(v) => v,
                Err(IntraError::EmptySpace { .. }) => ws
                    .iter()
                    .map(|_| Err(IntraError::BadSpace(String::new())))
                    .collect(),
                Err(e) => return Err(e.into()),
            };
            let mut per_w = Vec::with_capacity(ws.len());
            for r in res {
                match r {
                    Ok(f) => per_w.push(Some(downsample_frontier(&f, self.opts.frontier_cap))),
                    Err(IntraError::Infeasible { overshoot }) => {
                        self.overshoot = self.overshoot.min(overshoot);
                        per_w.push(None);
                    }
                    Err(_) => per_w.push(None),
                }
            }
            self.memo.insert(key, per_w);
        }
        let ws = &self.ws[&slot];
        let idx = ws.binary_search(&w).expect("requested in-flight count");
        Ok(self.memo[&key][idx].as_ref())
    }

    fn tag(&self, layers: u32, sm_idx: usize, f: usize) -> u64 {
        (u64::from(layers) * 256 + sm_idx as u64) * 65536 + f as u64
    }

    /// Options for a stage slot; candidates whose compute floor alone
    /// exceeds the incumbent are skipped.
    fn options(
        &mut self,
        slot: Slot,
        w: u32,
        layer_range: (u32, u32),
        max_devices: u32,
        incumbent: f64,
    ) -> Result<Vec<StageOption>, InterError> {
        let gf = f64::from(self.g);
        let mut out = Vec::new();
        for layers in layer_range.0..=layer_range.1 {
            for sm_idx in 0..self.submeshes.len() {
                let sm = self.submeshes[sm_idx];
                if sm.devices() > max_devices {
                    continue;
                }
                if slot.first && slot.last && sm.devices() != max_devices {
                    continue;
                }
                let Some(floor) = self.time_floor(layers, sm) else {
                    continue;
                };
                if gf * floor * (1.0 - 1e-12) > incumbent {
                    continue;
                }
                let tag_base = self.tag(layers, sm_idx, 0);
                if let Some(fr) = self.frontier(slot, layers, sm_idx, w)? {
                    for (f, p) in fr.points.iter().enumerate() {
                        if gf * p.t * (1.0 - 1e-12) > incumbent {
                            continue;
                        }
                        out.push(StageOption {
                            layers,
                            devices: sm.devices(),
                            t: p.t,
                            d: p.d,
                            tag: tag_base + f as u64,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    fn decode(&self, slot: Slot, w: u32, opt: &StageOption) -> StageConfig {
        let f = (opt.tag % 65536) as usize;
        let sm_idx = ((opt.tag / 65536) % 256) as usize;
        let layers = (opt.tag / 65536 / 256) as u32;
        let ws = &self.ws[&slot];
        let idx = ws.binary_search(&w).expect("in-flight count");
        self.memo[&(slot, layers, sm_idx)][idx]
            .as_ref()
            .expect("frontier present")
            .points[f]
            .config
    }

    fn run(&mut self, inc: &Incumbent) -> Result<Option<(Vec<StageConfig>, f64)>, InterError> {
        let total_l = self.cm.model.num_layers;
        let total_d = self
            .submeshes
            .iter()
            .map(|s| s.devices())
            .max()
            .unwrap_or(0);
        let (tf1, tb1) = if self.cm.op_times.is_empty() {
            self.cm.layer_times(self.global_batch / self.g, 1)
        } else {
            (0.0, 0.0)
        };
        let mut eng = Engine::new(self.g, total_l, total_d, tf1 + tb1);
        let mut best: Option<(Vec<StageConfig>, f64)> = None;

        let consider =
            |cell: &Self, s: u32, closed: Closed, best: &mut Option<(Vec<StageConfig>, f64)>| {
                let cfgs: Vec<StageConfig> = closed
                    .chain
                    .iter()
                    .enumerate()
                    .map(|(i, o)| {
                        let stage = i as u32 + 1;
                        let slot = Slot::of(stage, s);
                        let w = cell.g.min(s - stage + 1);
                        StageConfig {
                            stage,
                            ..cell.decode(slot, w, o)
                        }
                    })
                    .collect();
                inc.offer(closed.objective);
                let replace = match best {
                    None => true,
                    Some((_, v)) => closed.objective < *v,
                };
                if replace {
                    *best = Some((cfgs, closed.objective));
                }
            };

        // single stage
        let only = Slot {
            first: true,
            last: true,
        };
        let opts = self.options(only, 1, (total_l, total_l), total_d, inc.get())?;
        if let Some(c) = eng.close(self.g, &opts, inc.get()) {
            consider(self, 1, c, &mut best);
        }
        for j in 1..self.max_stages {
            let slot = Slot {
                first: false,
                last: j == 1,
            };
            let w = self.g.min(j);
            let opts = self.options(slot, w, (1, total_l - 1), total_d - 1, inc.get())?;
            eng.extend(&opts, 1, inc.get());
            if eng.tables.last().is_none_or(|t| t.is_empty()) {
                break;
            }
            let s = j + 1;
            let first = Slot {
                first: true,
                last: false,
            };
            let opts = self.options(
                first,
                self.g.min(s),
                (1, total_l - 1),
                total_d - 1,
                inc.get(),
            )?;
            if let Some(c) = eng.close(self.g, &opts, inc.get()) {
                // fewer stages win ties, so only strictly better replaces
                consider(self, s, c, &mut best);
            }
        }
        Ok(best)
    }
}

/// Searches G over the divisors of the global batch and S over
/// `1..=min(L, devices)`, returning the best plan.
pub fn tune(
    cm: &CostModel,
    global_batch: u32,
    opts: &TuneOptions,
) -> Result<TrainingPlan, InterError> {
    opts.space.validate()?;
    if global_batch == 0 {
        return Err(InterError::Invalid("global batch must be positive".into()));
    }
    if opts.frontier_cap < 2 {
        return Err(InterError::Invalid(
            "frontier cap must be at least 2".into(),
        ));
    }
    let cl = &cm.cluster;
    let submeshes = enumerate_submeshes(cl.nodes, cl.gpus_per_node);
    let total_d = cl.devices();
    let mut max_stages = cm.model.num_layers.min(total_d);
    if let Some(m) = opts.max_stages {
        max_stages = max_stages.min(m.max(1));
    }
    let budget = cl.mem_budget();
    let inc = Incumbent(AtomicU64::new(f64::INFINITY.to_bits()));
    let gs = divisors(global_batch);

    let work = |g: u32| -> Result<(Option<TrainingPlan>, f64), InterError> {
        let mut cell = Cell {
            cm,
            opts,
            g,
            global_batch,
            budget,
            submeshes: submeshes.clone(),
            max_stages,
            memo: HashMap::new(),
            ws: HashMap::new(),
            overshoot: f64::INFINITY,
        };
        let found = cell.run(&inc)?;
        let plan = match found {
            None => None,
            Some((cfgs, _)) => Some(finish(cm, g, global_batch, budget, cfgs)?),
        };
        Ok((plan, cell.overshoot))
    };

    let results: Vec<Result<(Option<TrainingPlan>, f64), InterError>> = if opts.jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| InterError::Invalid(e.to_string()))?;
        pool.install(|| gs.par_iter().map(|&g| work(g)).collect())
    } else {
        gs.iter().map(|&g| work(g)).collect()
    };

    let mut best: Option<TrainingPlan> = None;
    let mut overshoot = f64::INFINITY;
    for r in results {
        let (plan, over) = r?;
        overshoot = overshoot.min(over);
        if let Some(p) = plan {
            let take = match &best {
                None => true,
                Some(b) => p.preference(b) == Ordering::Less,
            };
            if take {
                best = Some(p);
            }
        }
    }
    best.ok_or(InterError::Infeasible { overshoot })
}

/// Re-derives every stage by direct substitution and checks it against
/// the values the search used.
fn finish(
    cm: &CostModel,
    g: u32,
    global_batch: u32,
    budget: f64,
    cfgs: Vec<StageConfig>,
) -> Result<TrainingPlan, InterError> {
    let ctx = IterationContext {
        g,
        stages: cfgs.len() as u32,
        global_batch,
        mem_budget: budget,
    };
    let mut stages = Vec::with_capacity(cfgs.len());
    for c in cfgs {
        let k = cm.evaluate(&c, &ctx)?;
        if k.mem_peak() > budget {
            return Err(InterError::Inconsistent(c.stage));
        }
        stages.push(PlannedStage {
            config: c,
            t: k.t,
            d: k.d,
            mem_fwd: k.mem_fwd,
            mem_bwd: k.mem_bwd,
        });
    }
    let timings: Vec<StageTiming> = stages
        .iter()
        .map(|s| StageTiming { t: s.t, d: s.d })
        .collect();
    let objective = objective_unchecked(g, &timings);
    Ok(TrainingPlan {
        g,
        global_batch,
        stages,
        objective,
        throughput: f64::from(global_batch) / objective,
    })
}
