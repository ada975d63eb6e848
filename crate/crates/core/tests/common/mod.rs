//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use pipetune_core::interference::InterferenceParams;
use pipetune_core::intertuner::{InterProblem, StageOption};
use pipetune_core::intratuner::{enumerate, Candidate, FrontierPoint, ParetoFrontier, SearchSpace};
use pipetune_core::pipesim::{objective, PipelinePlan};
use pipetune_core::stagecost::{CostModel, IterationContext, StageConfig};
use pipetune_core::workload::{ClusterSpec, ModelSpec, OpTimeTable};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cmp::Ordering;

pub fn gpt(layers: u32, hidden: u64, heads: u64) -> ModelSpec {
    ModelSpec {
        name: format!("gpt-{layers}x{hidden}"),
        num_layers: layers,
        hidden,
        heads,
        ffn: None,
        vocab: 50257,
        seq: 2048,
        elem_bytes: 2,
        flash_attention: false,
        parallel_attention: false,
        activation: None,
    }
}

pub fn cluster(nodes: u32, gpus: u32, mem: f64) -> ClusterSpec {
    ClusterSpec {
        name: format!("{nodes}x{gpus}"),
        nodes,
        gpus_per_node: gpus,
        gpu_mem_capacity: mem,
        peak_flops: 312e12,
        mfu: 0.5,
        bw_intra: 1e11,
        bw_inter: 1.25e10,
        bw_d2h: 2e10,
        bw_h2d: 2e10,
        comm_latency: 20e-6,
        mem_headroom: 1.0,
    }
}

pub fn cost_model(m: ModelSpec, c: ClusterSpec, p: InterferenceParams) -> CostModel {
    CostModel::new(m, c, OpTimeTable::default(), p).unwrap()
}

/// Random factors in [1, 2] for all 28 subset members.
pub fn random_params<R: Rng>(rng: &mut R) -> InterferenceParams {
    let mut p = InterferenceParams::unit();
    for (name, fs) in InterferenceParams::unit().to_map() {
        let v: Vec<f64> = fs.iter().map(|_| rng.gen_range(1.0..2.0)).collect();
        p.set_factors(&name, &v).unwrap();
    }
    p
}

/// Every config within budget, costed by direct substitution.
pub fn feasible_points(
    cm: &CostModel,
    space: &SearchSpace,
    cand: &Candidate,
    ctx: &IterationContext,
) -> Vec<FrontierPoint> {
    let cfgs = enumerate(space, cand, ctx).unwrap();
    let mut pts: Vec<FrontierPoint> = Vec::new();
    for c in cfgs {
        let k = cm.evaluate(&c, ctx).unwrap();
        if k.mem_fwd.max(k.mem_bwd) <= ctx.mem_budget {
            pts.push(FrontierPoint {
                t: k.t,
                d: k.d,
                config: c,
            });
        }
    }
    pts
}

/// Quadratic dominance filter. Equal (t, d) pairs keep the smallest config
/// tuple.
pub fn dominance_filter(pts: &[FrontierPoint]) -> Vec<FrontierPoint> {
    let beats = |q: &FrontierPoint, p: &FrontierPoint| {
        let dominates = q.t <= p.t && q.d <= p.d && (q.t < p.t || q.d < p.d);
        let tie = q.t == p.t && q.d == p.d && q.config.tuple_cmp(&p.config) == Ordering::Less;
        dominates || tie
    };
    let mut keep: Vec<FrontierPoint> = pts
        .iter()
        .filter(|p| !pts.iter().any(|q| beats(q, p)))
        .copied()
        .collect();
    keep.sort_by(|a, b| a.t.total_cmp(&b.t));
    keep
}

pub fn same_points(a: &ParetoFrontier, b: &[FrontierPoint]) -> bool {
    a.points.len() == b.len()
        && a.points.iter().zip(b).all(|(p, q)| {
            p.t.to_bits() == q.t.to_bits()
                && p.d.to_bits() == q.d.to_bits()
                && p.config.tuple_cmp(&q.config) == Ordering::Equal
                && p.config.stage == q.config.stage
        })
}

/// Peak memory quantile over a space, used to pick budgets that cut it.
pub fn budget_quantile(
    cm: &CostModel,
    space: &SearchSpace,
    cand: &Candidate,
    ctx: &IterationContext,
    q: f64,
) -> f64 {
    let mut mems: Vec<f64> = enumerate(space, cand, ctx)
        .unwrap()
        .iter()
        .map(|c: &StageConfig| {
            let (f, b) = cm.peak_memory(c, ctx).unwrap();
            f.max(b)
        })
        .collect();
    mems.sort_by(f64::total_cmp);
    mems[((mems.len() - 1) as f64 * q) as usize]
}

pub fn plan_value(g: u32, picks: &[(f64, f64)]) -> f64 {
    objective(&PipelinePlan::new(g, picks).unwrap()).unwrap()
}

/// Every selection with exact layer and device totals.
pub fn exhaustive(p: &InterProblem) -> Option<f64> {
    fn go(
        p: &InterProblem,
        i: usize,
        layers: u32,
        devices: u32,
        acc: &mut Vec<(f64, f64)>,
        best: &mut Option<f64>,
    ) {
        if i == p.stages.len() {
            if layers == p.total_layers && devices == p.total_devices {
                let v = plan_value(p.g, acc);
                if best.is_none_or(|b| v < b) {
                    *best = Some(v);
                }
            }
            return;
        }
        for o in &p.stages[i] {
            if layers + o.layers > p.total_layers || devices + o.devices > p.total_devices {
                continue;
            }
            acc.push((o.t, o.d));
            go(p, i + 1, layers + o.layers, devices + o.devices, acc, best);
            acc.pop();
        }
    }
    let mut best = None;
    go(p, 0, 0, 0, &mut Vec::new(), &mut best);
    best
}

pub fn random_problem(rng: &mut ChaCha8Rng) -> InterProblem {
    let total_layers = rng.gen_range(1..=8);
    let s = rng.gen_range(1..=total_layers.min(4));
    let mut sizes: Vec<u32> = vec![1, 2, 4, 8];
    let nsub = rng.gen_range(1..=3);
    while sizes.len() > nsub {
        let k = rng.gen_range(0..sizes.len());
        sizes.remove(k);
    }
    let total_devices: u32 = (0..s).map(|_| sizes[rng.gen_range(0..sizes.len())]).sum();
    let g = rng.gen_range(1..=16);
    let stages = (0..s)
        .map(|_| {
            let mut opts = Vec::new();
            for layers in 1..=total_layers {
                for &devices in &sizes {
                    for _ in 0..rng.gen_range(1..=3) {
                        opts.push(StageOption {
                            layers,
                            devices,
                            t: f64::from(rng.gen_range(1..64u32)) / 8.0,
                            d: f64::from(rng.gen_range(0..32u32)) / 8.0,
                            tag: 0,
                        });
                    }
                }
            }
            opts
        })
        .collect();
    InterProblem {
        g,
        total_layers,
        total_devices,
        stages,
    }
}
