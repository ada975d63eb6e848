mod common;

use common::*;
use pipetune_core::intertuner::{tune, TuneOptions};
use pipetune_core::intratuner::SearchSpace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Capping each stage frontier at 16 points costs at most 2% against the
/// uncapped optimum.
#[test]
fn capped_frontiers_stay_within_two_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for _ in 0..8 {
        let layers = [4, 6, 8][rng.gen_range(0..3)];
        let hidden = [512, 1024, 2048][rng.gen_range(0..3)];
        let (nodes, gpus) = [(1, 4), (2, 2), (1, 8), (2, 4)][rng.gen_range(0..4)];
        let mem = [6e9, 12e9, 80e9][rng.gen_range(0..3)];
        let batch = [8, 16][rng.gen_range(0..2)];
        let params = random_params(&mut rng);
        let cm = cost_model(gpt(layers, hidden, 16), cluster(nodes, gpus, mem), params);
        let run = |cap| {
            let opts = TuneOptions {
                space: SearchSpace::full(4),
                frontier_cap: cap,
                jobs: 1,
                max_stages: None,
            };
            tune(&cm, batch, &opts).map(|p| p.objective).ok()
        };
        match (run(16), run(usize::MAX)) {
            (Some(capped), Some(full)) => {
                compared += 1;
                assert!(capped >= full);
                worst = worst.max(capped / full - 1.0);
            }
            (None, None) => {}
            (a, b) => panic!("feasibility differs: {a:?} vs {b:?}"),
        }
    }
    assert!(compared >= 5, "only {compared} feasible instances");
    assert!(worst <= 0.02, "worst gap {worst}");
}
