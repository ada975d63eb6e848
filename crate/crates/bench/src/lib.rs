//! Shared fixtures for the criterion benches.

use pipetune_core::stagecost::{FamilyKey, StageConfig, OUTER_INPUTS};
use pipetune_core::symexpr::BindingTable;
use pipetune_core::workload::vars;
use pipetune_core::{ClusterSpec, CostModel, InterferenceParams, ModelSpec, OpTimeTable};

pub fn gpt(layers: u32, hidden: u64, heads: u64) -> ModelSpec {
    ModelSpec {
        name: format!("gpt-{layers}x{hidden}"),
        num_layers: layers,
        hidden,
        heads,
        ffn: None,
        vocab: 51200,
        seq: 2048,
        elem_bytes: 2,
        flash_attention: false,
        parallel_attention: false,
        activation: None,
    }
}

pub fn a100(nodes: u32, gpus: u32) -> ClusterSpec {
    ClusterSpec {
        name: format!("a100-{nodes}x{gpus}"),
        nodes,
        gpus_per_node: gpus,
        gpu_mem_capacity: 80e9,
        peak_flops: 312e12,
        mfu: 0.5,
        bw_intra: 150e9,
        bw_inter: 12.5e9,
        bw_d2h: 20e9,
        bw_h2d: 20e9,
        comm_latency: 20e-6,
        mem_headroom: 0.95,
    }
}

pub fn cost_model(model: ModelSpec, cluster: ClusterSpec) -> CostModel {
    CostModel::new(
        model,
        cluster,
        OpTimeTable::default(),
        InterferenceParams::default(),
    )
    .expect("valid fixture")
}

/// A middle-stage family with ZeRO-2 across nodes.
pub fn middle_family_key() -> FamilyKey {
    let cfg = StageConfig {
        stage: 2,
        layers: 4,
        b: 1,
        dp: 4,
        tp: 4,
        nodes: 2,
        gpus_per_node: 8,
        zero: 2,
        ckpt: 0,
        wo: 0.0,
        go: 0.0,
        oo: 0.0,
        ao: 0.0,
    };
    FamilyKey::of(&cfg, 3)
}

/// `rows` pseudo-random bindings of every stage-cost symbol, in the
/// column order of [`symbol_names`].
pub fn random_rows(cm: &CostModel, rows: usize) -> Vec<Vec<f64>> {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    let mut next = |m: u64| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state % m
    };
    let mut cols: Vec<Vec<f64>> = (0..12).map(|_| Vec::with_capacity(rows)).collect();
    for _ in 0..rows {
        let b = 1u32 << next(4);
        let tp = 1u32 << next(4);
        let l = 1 + next(12) as u32;
        let (tf, tb) = cm.layer_times(b, tp);
        let row = [
            f64::from(b),
            f64::from(1u32 << next(3)),
            f64::from(tp),
            f64::from(l),
            next(u64::from(l) + 1) as f64,
            next(9) as f64 / 8.0,
            next(9) as f64 / 8.0,
            tf,
            tb,
            next(9) as f64 / 8.0,
            next(9) as f64 / 8.0,
            (1 + next(4)) as f64,
        ];
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
    }
    cols
}

pub fn symbol_names() -> Vec<&'static str> {
    let mut names: Vec<&str> = OUTER_INPUTS.to_vec();
    names.extend(["go", "oo", "w"]);
    names
}

pub fn binding_table(cols: &[Vec<f64>]) -> BindingTable {
    BindingTable::new(
        &vars().table,
        symbol_names()
            .iter()
            .map(|s| s.to_string())
            .zip(cols.iter().cloned()),
    )
    .expect("fixture columns are in domain")
}
