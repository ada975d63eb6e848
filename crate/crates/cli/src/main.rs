//! `pipetune`: tune, inspect and simulate pipeline-parallel training plans.
//!
//! Exit status: 0 on success, 2 for unreadable or invalid input, 3 when no
//! configuration fits in device memory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pipetune_core::interference::{fit_params, read_observations, FitOptions, Observation};
use pipetune_core::intertuner::InterError;
use pipetune_core::intratuner::{tune_intra, Candidate, IntraError};
use pipetune_core::pipesim::{closed_form_makespan, export_gantt, objective, simulate};
use pipetune_core::{
    tune, ClusterSpec, CostModel, InterferenceParams, IterationContext, ModelSpec, OpTimeTable,
    PipelinePlan, PlanFile, Preset, SearchSpace, StageConfig, TuneOptions,
};

#[derive(Parser)]
#[command(
    name = "pipetune",
    version,
    about = "Pipeline-parallel training planner"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Search for the fastest training plan and write it to a plan file.
    Tune(TuneArgs),
    /// Cost a stored plan or one explicit stage config.
    Eval(EvalArgs),
    /// Compare a plan's objective with the event simulator.
    Simulate(PlanArgs),
    /// Render a plan's schedule.
    Gantt(GanttArgs),
    /// Dump one stage candidate's (t, d) frontier as CSV.
    Pareto(ParetoArgs),
    /// Fit interference factors to measured channel timings.
    FitIntf(FitArgs),
}

#[derive(Args, Clone)]
struct SpecArgs {
    /// Model spec (TOML, `[model]` table).
    #[arg(long)]
    model: PathBuf,
    /// Cluster spec (TOML, `[cluster]` table).
    #[arg(long)]
    cluster: PathBuf,
    /// Interference factors (TOML); built-in defaults when absent.
    #[arg(long)]
    interference: Option<PathBuf>,
    /// Measured per-layer kernel times (TOML, `[[op_time]]` entries).
    #[arg(long)]
    op_times: Option<PathBuf>,
    /// Usable fraction of device memory, in (0, 1]; overrides the cluster file.
    #[arg(long)]
    mem_headroom: Option<f64>,
}

#[derive(Args, Clone)]
struct SpaceArgs {
    /// Search-space preset: parallelism-only, +ckpt, +zero, +offload or full.
    #[arg(long, default_value = "full")]
    preset: String,
    /// Offloading ratio step, a fraction such as 0.125 or 1/8.
    #[arg(long, default_value = "1/8")]
    grid_step: String,
    /// Allow tensor-parallel groups to span nodes.
    #[arg(long)]
    tp_across_nodes: bool,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    space: SpaceArgs,
    /// Samples per optimizer step.
    #[arg(long)]
    global_batch: u32,
    /// Frontier points kept per stage candidate.
    #[arg(long, default_value_t = 16)]
    frontier_cap: usize,
    /// Upper bound on pipeline stages.
    #[arg(long)]
    max_stages: Option<u32>,
    /// Worker threads; the plan does not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Run every preset; plan files get the preset name inserted before the extension.
    #[arg(long)]
    sweep: bool,
    /// Plan file to write.
    #[arg(short, long, default_value = "plan.toml")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Plan file; when absent the stage flags below describe one config.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    global_batch: Option<u32>,
    /// Gradient accumulation steps.
    #[arg(long, default_value_t = 1)]
    g: u32,
    #[arg(long, default_value_t = 1)]
    stages: u32,
    #[arg(long, default_value_t = 1)]
    stage: u32,
    #[arg(long)]
    layers: Option<u32>,
    /// Microbatch size per data-parallel replica.
    #[arg(long, default_value_t = 1)]
    b: u32,
    #[arg(long, default_value_t = 1)]
    dp: u32,
    #[arg(long, default_value_t = 1)]
    tp: u32,
    #[arg(long, default_value_t = 1)]
    nodes: u32,
    #[arg(long)]
    gpus_per_node: Option<u32>,
    #[arg(long, default_value_t = 0)]
    zero: u8,
    /// Checkpointed layers.
    #[arg(long, default_value_t = 0)]
    ckpt: u32,
    /// Weight offload ratio in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    wo: f64,
    /// Gradient offload ratio in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    go: f64,
    /// Optimizer-state offload ratio in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    oo: f64,
    /// Activation offload ratio in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    ao: f64,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    plan: PathBuf,
}

#[derive(Args)]
struct GanttArgs {
    #[arg(long)]
    plan: PathBuf,
    /// svg or rows-text.
    #[arg(long, default_value = "svg")]
    format: String,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParetoArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    space: SpaceArgs,
    #[arg(long)]
    global_batch: u32,
    #[arg(long, default_value_t = 1)]
    g: u32,
    #[arg(long, default_value_t = 1)]
    stages: u32,
    #[arg(long, default_value_t = 1)]
    stage: u32,
    #[arg(long)]
    layers: Option<u32>,
    #[arg(long, default_value_t = 1)]
    nodes: u32,
    #[arg(long)]
    gpus_per_node: Option<u32>,
    /// CSV destination; stdout when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// CSV with columns C, G2G, C2G, G2C, total (seconds).
    #[arg(long)]
    observations: PathBuf,
    /// Starting factors; built-in defaults when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Fraction of rows held out to report prediction error.
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
    /// Shuffle seed for the held-out split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

enum Failure {
    Input(String),
    Infeasible(String),
}

impl Failure {
    fn input(e: impl std::fmt::Display) -> Self {
        Failure::Input(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Tune(a) => cmd_tune(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Gantt(a) => cmd_gantt(a),
        Cmd::Pareto(a) => cmd_pareto(a),
        Cmd::FitIntf(a) => cmd_fit_intf(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Infeasible(msg)) => {
            eprintln!("infeasible: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load_model(spec: &SpecArgs) -> Result<CostModel, Failure> {
    let model = ModelSpec::load(&spec.model).map_err(Failure::input)?;
    let mut cluster = ClusterSpec::load(&spec.cluster).map_err(Failure::input)?;
    if let Some(h) = spec.mem_headroom {
        cluster.mem_headroom = h;
        cluster.validate().map_err(Failure::input)?;
    }
    let params = match &spec.interference {
        Some(p) => InterferenceParams::load(p).map_err(Failure::input)?,
        None => InterferenceParams::default(),
    };
    let ops = match &spec.op_times {
        Some(p) => OpTimeTable::load(p).map_err(Failure::input)?,
        None => OpTimeTable::default(),
    };
    CostModel::new(model, cluster, ops, params).map_err(Failure::input)
}

fn parse_step(s: &str) -> Result<u32, Failure> {
    let step = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(Failure::input)?;
            let d: f64 = d.trim().parse().map_err(Failure::input)?;
            n / d
        }
        None => s.trim().parse().map_err(Failure::input)?,
    };
    let k = (1.0 / step).round();
    if !(step > 0.0 && step <= 1.0) || ((1.0 / step) - k).abs() > 1e-9 {
        return Err(Failure::Input(format!(
            "--grid-step {s} must be 1/k for a positive integer k"
        )));
    }
    Ok(k as u32)
}

fn build_space(a: &SpaceArgs, preset: Preset) -> Result<SearchSpace, Failure> {
    let mut s = SearchSpace::preset(preset, parse_step(&a.grid_step)?);
    s.tp_across_nodes = a.tp_across_nodes;
    Ok(s)
}

fn preset_of(name: &str) -> Result<Preset, Failure> {
    Preset::from_name(name).ok_or_else(|| {
        Failure::Input(format!(
            "unknown preset {name}; expected one of parallelism-only, +ckpt, +zero, +offload, full"
        ))
    })
}

fn sweep_path(out: &Path, preset: Preset) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("plan");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("toml");
    let tag = preset.name().trim_start_matches('+');
    out.with_file_name(format!("{stem}.{tag}.{ext}"))
}

fn print_plan(pf: &PlanFile) {
    let p = &pf.plan;
    println!("objective {}", p.objective);
    println!("throughput {}", p.throughput);
    println!("g {} stages {}", p.g, p.stages.len());
    println!("stage layers nodes gpus dp tp b zero ckpt wo go oo ao t d mem_fwd mem_bwd");
    for s in &p.stages {
        let c = &s.config;
        println!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            c.stage,
            c.layers,
            c.nodes,
            c.gpus_per_node,
            c.dp,
            c.tp,
            c.b,
            c.zero,
            c.ckpt,
            c.wo,
            c.go,
            c.oo,
            c.ao,
            s.t,
            s.d,
            s.mem_fwd,
            s.mem_bwd
        );
    }
}

fn cmd_tune(a: TuneArgs) -> Outcome {
    let cm = load_model(&a.spec)?;
    let presets = if a.sweep {
        Preset::ALL.to_vec()
    } else {
        vec![preset_of(&a.space.preset)?]
    };
    let mut any = false;
    let mut last_err = None;
    for preset in presets {
        let opts = TuneOptions {
            space: build_space(&a.space, preset)?,
            frontier_cap: a.frontier_cap,
            jobs: a.jobs.max(1),
            max_stages: a.max_stages,
        };
        let out = if a.sweep {
            sweep_path(&a.out, preset)
        } else {
            a.out.clone()
        };
        if a.sweep {
            println!("preset {}", preset.name());
        }
        match tune(&cm, a.global_batch, &opts) {
            Ok(plan) => {
                let pf = PlanFile::new(&cm, preset.name(), opts, plan).map_err(Failure::input)?;
                pf.save(&out).map_err(Failure::input)?;
                print_plan(&pf);
                println!("wrote {}", out.display());
                any = true;
            }
            Err(e @ InterError::Infeasible { .. }) => {
                println!("infeasible: {e}");
                last_err = Some(Failure::Infeasible(e.to_string()));
            }
            Err(e) => return Err(Failure::input(e)),
        }
    }
    match (any, last_err) {
        (false, Some(e)) => Err(e),
        _ => Ok(()),
    }
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let cm = load_model(&a.spec)?;
    if let Some(path) = &a.plan {
        let pf = PlanFile::load(path).map_err(Failure::input)?;
        pf.verify(&cm).map_err(Failure::input)?;
        let ctx = pf.plan.context(cm.cluster.mem_budget());
        println!("stage t d mem_fwd mem_bwd");
        for s in &pf.plan.stages {
            let k = cm.evaluate(&s.config, &ctx).map_err(Failure::input)?;
            println!(
                "{} {} {} {} {}",
                s.config.stage, k.t, k.d, k.mem_fwd, k.mem_bwd
            );
        }
        let obj = objective(&pf.pipeline()).map_err(Failure::input)?;
        println!("objective {obj}");
        return Ok(());
    }
    let layers = a.layers.unwrap_or(cm.model.num_layers);
    let gpus = a.gpus_per_node.unwrap_or(a.dp * a.tp / a.nodes.max(1));
    let global_batch = a.global_batch.unwrap_or(a.b * a.dp * a.g);
    let cfg = StageConfig {
        stage: a.stage,
        layers,
        b: a.b,
        dp: a.dp,
        tp: a.tp,
        nodes: a.nodes,
        gpus_per_node: gpus,
        zero: a.zero,
        ckpt: a.ckpt,
        wo: a.wo,
        go: a.go,
        oo: a.oo,
        ao: a.ao,
    };
    let ctx = IterationContext {
        g: a.g,
        stages: a.stages,
        global_batch,
        mem_budget: cm.cluster.mem_budget(),
    };
    let k = cm.evaluate(&cfg, &ctx).map_err(Failure::input)?;
    println!("t {}", k.t);
    println!("d {}", k.d);
    println!("mem_fwd {}", k.mem_fwd);
    println!("mem_bwd {}", k.mem_bwd);
    println!("fits {}", k.mem_peak() <= ctx.mem_budget);
    if a.stages == 1 {
        let obj = objective(&PipelinePlan::new(a.g, &[(k.t, k.d)]).map_err(Failure::input)?)
            .map_err(Failure::input)?;
        println!("objective {obj}");
    }
    Ok(())
}

fn load_plan(path: &Path) -> Result<PlanFile, Failure> {
    if !path.exists() {
        return Err(Failure::Input(format!(
            "plan file {} not found",
            path.display()
        )));
    }
    PlanFile::load(path).map_err(Failure::input)
}

fn cmd_simulate(a: PlanArgs) -> Outcome {
    let pf = load_plan(&a.plan)?;
    let pp = pf.pipeline();
    let obj = objective(&pp).map_err(Failure::input)?;
    let (makespan, _) = simulate(&pp).map_err(Failure::input)?;
    let closed = closed_form_makespan(&pp).map_err(Failure::input)?;
    println!("objective {obj}");
    println!("simulated {makespan}");
    println!("closed_form {closed}");
    println!("gap {}", obj - makespan);
    Ok(())
}

fn cmd_gantt(a: GanttArgs) -> Outcome {
    let pf = load_plan(&a.plan)?;
    let (_, tl) = simulate(&pf.pipeline()).map_err(Failure::input)?;
    let doc = export_gantt(&tl, &a.format).map_err(Failure::input)?;
    std::fs::write(&a.out, doc).map_err(Failure::input)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_pareto(a: ParetoArgs) -> Outcome {
    let cm = load_model(&a.spec)?;
    let space = build_space(&a.space, preset_of(&a.space.preset)?)?;
    let cand = Candidate {
        stage: a.stage,
        layers: a.layers.unwrap_or(cm.model.num_layers),
        nodes: a.nodes,
        gpus_per_node: a.gpus_per_node.unwrap_or(cm.cluster.gpus_per_node),
    };
    let ctx = IterationContext {
        g: a.g,
        stages: a.stages,
        global_batch: a.global_batch,
        mem_budget: cm.cluster.mem_budget(),
    };
    let fr = match tune_intra(&cm, &space, &cand, &ctx) {
        Ok(f) => f,
        Err(e @ IntraError::Infeasible { .. }) => return Err(Failure::Infeasible(e.to_string())),
        Err(e) => return Err(Failure::input(e)),
    };
    let sink: Box<dyn std::io::Write> = match &a.out {
        Some(p) => Box::new(std::fs::File::create(p).map_err(Failure::input)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "t",
        "d",
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
    ])
    .map_err(Failure::input)?;
    for p in &fr.points {
        let c = &p.config;
        w.write_record(&[
            p.t.to_string(),
            p.d.to_string(),
            c.stage.to_string(),
            c.layers.to_string(),
            c.b.to_string(),
            c.dp.to_string(),
            c.tp.to_string(),
            c.nodes.to_string(),
            c.gpus_per_node.to_string(),
            c.zero.to_string(),
            c.ckpt.to_string(),
            c.wo.to_string(),
            c.go.to_string(),
            c.oo.to_string(),
            c.ao.to_string(),
        ])
        .map_err(Failure::input)?;
    }
    w.flush().map_err(Failure::input)
}

fn mean_rel_error(params: &InterferenceParams, obs: &[Observation]) -> f64 {
    let total: f64 = obs
        .iter()
        .map(|o| {
            let p = params.predict(&o.channels);
            if o.total == 0.0 {
                p.abs()
            } else {
                ((p - o.total) / o.total).abs()
            }
        })
        .sum();
    total / obs.len() as f64
}

fn cmd_fit_intf(a: FitArgs) -> Outcome {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let file = std::fs::File::open(&a.observations).map_err(Failure::input)?;
    let mut obs = read_observations(file).map_err(Failure::input)?;
    if !(0.0..1.0).contains(&a.holdout) {
        return Err(Failure::Input("--holdout must lie in [0, 1)".into()));
    }
    let init = match &a.init {
        Some(p) => InterferenceParams::load(p).map_err(Failure::input)?,
        None => InterferenceParams::default(),
    };
    let held = (obs.len() as f64 * a.holdout).floor() as usize;
    if held > 0 {
        obs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(a.seed));
    }
    let (test, train) = obs.split_at(held);
    let rep = fit_params(train, &init, &FitOptions::default()).map_err(Failure::input)?;
    std::fs::write(&a.out, rep.params.to_toml()).map_err(Failure::input)?;
    println!("initial_loss {}", rep.initial_loss);
    println!("loss {}", rep.loss);
    println!("sweeps {}", rep.sweeps);
    if !test.is_empty() {
        println!("holdout_rel_error {}", mean_rel_error(&rep.params, test));
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
