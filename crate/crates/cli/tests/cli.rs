use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pipetune_core::interference::{write_observations, ChannelVector, Observation};
use pipetune_core::intratuner::{tune_intra, Candidate};
use pipetune_core::{
    tune, ClusterSpec, CostModel, InterferenceParams, IterationContext, ModelSpec, OpTimeTable,
    PlanFile, Preset, SearchSpace, StageConfig, TuneOptions,
};
use rand::{Rng, SeedableRng};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cfg(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipetune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// `key value` lines of a command's output.
fn field(o: &Output, key: &str) -> f64 {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no {key} in {}", stdout(o)))
        .trim()
        .parse()
        .unwrap()
}

fn library_model(model: &str, cluster: &str) -> CostModel {
    CostModel::new(
        ModelSpec::load(&configs().join(model)).unwrap(),
        ClusterSpec::load(&configs().join(cluster)).unwrap(),
        OpTimeTable::default(),
        InterferenceParams::default(),
    )
    .unwrap()
}

#[test]
fn tune_single_device_matches_library_and_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plan.toml");
    let o = run(&[
        "tune",
        "--model",
        &cfg("tiny.toml"),
        "--cluster",
        &cfg("single.toml"),
        "--global-batch",
        "4",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let pf = PlanFile::load(&out).unwrap();
    let cm = library_model("tiny.toml", "single.toml");
    let lib = tune(&cm, 4, &TuneOptions::default()).unwrap();
    assert_eq!(pf.plan, lib);
    assert_eq!(field(&o, "objective"), lib.objective);
    assert_eq!(pf.plan.stages.len(), 1);
    assert_eq!(pf.plan.stages[0].d, 0.0);
    pf.verify(&cm).unwrap();

    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/tiny-single.toml");
    assert_eq!(
        std::fs::read_to_string(&out).unwrap(),
        std::fs::read_to_string(golden).unwrap()
    );
}

#[test]
fn plan_files_are_byte_identical_across_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let mut texts = Vec::new();
    for jobs in ["1", "3"] {
        let out = dir.path().join(format!("p{jobs}.toml"));
        let o = run(&[
            "tune",
            "--model",
            &cfg("tiny.toml"),
            "--cluster",
            &cfg("l4-2x4.toml"),
            "--global-batch",
            "8",
            "--grid-step",
            "0.5",
            "--jobs",
            jobs,
            "-o",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
        texts.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn malformed_cluster_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(configs().join("single.toml"))
        .unwrap()
        .replace("bw_inter", "bw_intre");
    std::fs::write(&bad, text).unwrap();
    let o = run(&[
        "tune",
        "--model",
        &cfg("tiny.toml"),
        "--cluster",
        bad.to_str().unwrap(),
        "--global-batch",
        "4",
        "-o",
        dir.path().join("p.toml").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bw_intre"));

    let neg = dir.path().join("neg.toml");
    let text = std::fs::read_to_string(configs().join("single.toml"))
        .unwrap()
        .replace("mfu = 0.5", "mfu = 1.5");
    std::fs::write(&neg, text).unwrap();
    let o = run(&[
        "tune",
        "--model",
        &cfg("tiny.toml"),
        "--cluster",
        neg.to_str().unwrap(),
        "--global-batch",
        "4",
        "-o",
        dir.path().join("p.toml").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cluster.mfu"));
}

#[test]
fn infeasible_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "tune",
        "--model",
        &cfg("gpt-1.3b.toml"),
        "--cluster",
        &cfg("single.toml"),
        "--global-batch",
        "4",
        "--mem-headroom",
        "0.01",
        "-o",
        dir.path().join("p.toml").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("overshoot"));
}

#[test]
fn preset_sweep_is_non_increasing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plan.toml");
    let o = run(&[
        "tune",
        "--model",
        &cfg("tiny.toml"),
        "--cluster",
        &cfg("l4-2x4.toml"),
        "--global-batch",
        "8",
        "--grid-step",
        "1/2",
        "--frontier-cap",
        "100000",
        "--sweep",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let mut prev = f64::INFINITY;
    for p in Preset::ALL {
        let tag = p.name().trim_start_matches('+');
        let pf = PlanFile::load(&dir.path().join(format!("plan.{tag}.toml"))).unwrap();
        assert_eq!(pf.preset, p.name());
        assert!(
            pf.plan.objective <= prev,
            "{} {} > {prev}",
            p.name(),
            pf.plan.objective
        );
        prev = pf.plan.objective;
    }
}

#[test]
fn eval_matches_library_on_stage_examples() {
    let cm = library_model("gpt-1.3b.toml", "a100-4x8.toml");
    let cases: [(StageConfig, IterationContext); 3] = [
        (
            StageConfig {
                stage: 1,
                layers: 24,
                b: 2,
                dp: 1,
                tp: 1,
                nodes: 1,
                gpus_per_node: 1,
                zero: 0,
                ckpt: 0,
                wo: 0.0,
                go: 0.0,
                oo: 0.0,
                ao: 0.0,
            },
            IterationContext {
                g: 4,
                stages: 1,
                global_batch: 8,
                mem_budget: cm.cluster.mem_budget(),
            },
        ),
        (
            StageConfig {
                stage: 1,
                layers: 12,
                b: 1,
                dp: 2,
                tp: 4,
                nodes: 1,
                gpus_per_node: 8,
                zero: 0,
                ckpt: 12,
                wo: 0.0,
                go: 0.0,
                oo: 0.0,
                ao: 0.0,
            },
            IterationContext {
                g: 4,
                stages: 2,
                global_batch: 8,
                mem_budget: cm.cluster.mem_budget(),
            },
        ),
        (
            StageConfig {
                stage: 2,
                layers: 12,
                b: 1,
                dp: 4,
                tp: 2,
                nodes: 1,
                gpus_per_node: 8,
                zero: 2,
                ckpt: 3,
                wo: 0.25,
                go: 0.5,
                oo: 1.0,
                ao: 0.125,
            },
            IterationContext {
                g: 2,
                stages: 2,
                global_batch: 8,
                mem_budget: cm.cluster.mem_budget(),
            },
        ),
    ];
    for (c, ctx) in cases {
        let want = cm.evaluate(&c, &ctx).unwrap();
        let s = |v: u32| v.to_string();
        let f = |v: f64| v.to_string();
        let o = run(&[
            "eval",
            "--model",
            &cfg("gpt-1.3b.toml"),
            "--cluster",
            &cfg("a100-4x8.toml"),
            "--global-batch",
            &s(ctx.global_batch),
            "--g",
            &s(ctx.g),
            "--stages",
            &s(ctx.stages),
            "--stage",
            &s(c.stage),
            "--layers",
            &s(c.layers),
            "--b",
            &s(c.b),
            "--dp",
            &s(c.dp),
            "--tp",
            &s(c.tp),
            "--nodes",
            &s(c.nodes),
            "--gpus-per-node",
            &s(c.gpus_per_node),
            "--zero",
            &c.zero.to_string(),
            "--ckpt",
            &s(c.ckpt),
            "--wo",
            &f(c.wo),
            "--go",
            &f(c.go),
            "--oo",
            &f(c.oo),
            "--ao",
            &f(c.ao),
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert_eq!(field(&o, "t").to_bits(), want.t.to_bits());
        assert_eq!(field(&o, "d").to_bits(), want.d.to_bits());
        assert_eq!(field(&o, "mem_fwd").to_bits(), want.mem_fwd.to_bits());
        assert_eq!(field(&o, "mem_bwd").to_bits(), want.mem_bwd.to_bits());
    }
    // b·dp·G must equal the global batch
    let o = run(&[
        "eval",
        "--model",
        &cfg("gpt-1.3b.toml"),
        "--cluster",
        &cfg("a100-4x8.toml"),
        "--global-batch",
        "8",
        "--g",
        "3",
        "--b",
        "1",
        "--gpus-per-node",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_and_gantt() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.toml");
    let o = run(&[
        "tune",
        "--model",
        &cfg("tiny.toml"),
        "--cluster",
        &cfg("single.toml"),
        "--global-batch",
        "4",
        "-o",
        plan.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let o = run(&["simulate", "--plan", plan.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(field(&o, "gap"), 0.0);
    assert_eq!(field(&o, "objective"), field(&o, "simulated"));

    let svg = dir.path().join("g.svg");
    let o = run(&[
        "gantt",
        "--plan",
        plan.to_str().unwrap(),
        "-o",
        svg.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let doc = std::fs::read_to_string(&svg).unwrap();
    assert!(doc.starts_with("<svg") && doc.contains("class=\"event\""));

    let o = run(&[
        "simulate",
        "--plan",
        dir.path().join("missing.toml").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["gantt", "--plan", "nope.toml", "-o", svg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pareto_csv_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f.csv");
    let o = run(&[
        "pareto",
        "--model",
        &cfg("gpt-1.3b.toml"),
        "--cluster",
        &cfg("a100-4x8.toml"),
        "--global-batch",
        "16",
        "--g",
        "4",
        "--stages",
        "2",
        "--stage",
        "1",
        "--layers",
        "12",
        "--nodes",
        "1",
        "--gpus-per-node",
        "8",
        "--grid-step",
        "0.25",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let cm = library_model("gpt-1.3b.toml", "a100-4x8.toml");
    let fr = tune_intra(
        &cm,
        &SearchSpace::full(4),
        &Candidate {
            stage: 1,
            layers: 12,
            nodes: 1,
            gpus_per_node: 8,
        },
        &IterationContext {
            g: 4,
            stages: 2,
            global_batch: 16,
            mem_budget: cm.cluster.mem_budget(),
        },
    )
    .unwrap();
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), fr.points.len());
    for (r, p) in rows.iter().zip(&fr.points) {
        assert_eq!(r[0].parse::<f64>().unwrap().to_bits(), p.t.to_bits());
        assert_eq!(r[1].parse::<f64>().unwrap().to_bits(), p.d.to_bits());
        assert_eq!(r[9].parse::<u8>().unwrap(), p.config.zero);
        assert_eq!(r[10].parse::<u32>().unwrap(), p.config.ckpt);
    }
}

#[test]
fn fit_intf_round_trip() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut truth = InterferenceParams::unit();
    for (name, fs) in InterferenceParams::unit().to_map() {
        let v: Vec<f64> = fs.iter().map(|_| rng.gen_range(1.0..2.0)).collect();
        truth.set_factors(&name, &v).unwrap();
    }
    let obs: Vec<Observation> = (0..600)
        .map(|_| {
            let mut a = [0.0; 4];
            for x in a.iter_mut() {
                if rng.gen_bool(0.7) {
                    *x = rng.gen_range(0.1..2.0);
                }
            }
            let ch = ChannelVector::from_array(a);
            Observation {
                channels: ch,
                total: truth.predict(&ch),
            }
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("obs.csv");
    write_observations(std::fs::File::create(&csv_path).unwrap(), &obs).unwrap();
    let out = dir.path().join("params.toml");
    let o = run(&[
        "fit-intf",
        "--observations",
        csv_path.to_str().unwrap(),
        "--holdout",
        "0.25",
        "--seed",
        "9",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(field(&o, "holdout_rel_error") <= 0.01);
    assert!(field(&o, "loss") <= field(&o, "initial_loss"));
    InterferenceParams::load(&out).unwrap();

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "C,G2G,C2G\n1,2,3\n").unwrap();
    let o = run(&[
        "fit-intf",
        "--observations",
        bad.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
