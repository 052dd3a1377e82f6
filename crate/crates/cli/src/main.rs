use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mgpde_core::fem::{solve_field, CgOptions};
use mgpde_core::io::{
    manifest_entries, save_field, save_manifest, CsvLog, FieldHeader, FieldKind, RunConfig,
    RunRecorder, SCHEMA_VERSION,
};
use mgpde_core::mgtrain::{self, make_schedule, CycleKind, InputFeature, StepMode};
use mgpde_core::network::{load_checkpoint, save_checkpoint, ModelState};
use mgpde_core::parallel::{ClusterSpec, EnergyObjective, Engine};
use mgpde_core::problem::{diffusivity_field, GridSpec, OmegaSample};
use mgpde_core::tensor::Tensor;
use mgpde_core::validate::{interior_errors, predict_solution};
use mgpde_core::Error;

#[derive(Parser)]
#[command(name = "mgpde", version, about = "Multigrid-trained neural solvers for the parametric Poisson equation")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Write the sample manifest and optionally the diffusivity fields.
    Generate(GenerateArgs),
    /// Train a network on the configured multigrid schedule.
    Train(TrainArgs),
    /// Predict a solution field from a checkpoint.
    Infer(InferArgs),
    /// Solve one problem instance with the finite-element reference solver.
    FemSolve(FemArgs),
    /// Compare a checkpoint's prediction against the finite-element solution.
    Compare(CompareArgs),
    /// Print the steps of a multigrid schedule.
    Schedule(ScheduleArgs),
    /// Time training epochs across resolutions and worker counts.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct OmegaArgs {
    /// Explicit parameter vector, four comma-separated values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "omega")]
    omega_values: Option<Vec<f64>>,
    /// Index of a held-out sample of the configured sequence.
    #[arg(long)]
    omega: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory; defaults to output.directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write every diffusivity field at this resolution.
    #[arg(long)]
    render: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Worker count, overriding cluster.p.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory, overriding output.directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cap on total epochs, overriding training.max_epochs.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Print a progress line per step.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    omega: OmegaArgs,
    #[arg(long)]
    resolution: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FemArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    omega: OmegaArgs,
    /// Grid resolution; defaults to problem.max_resolution.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    omega: OmegaArgs,
    /// Grid resolution; defaults to problem.max_resolution.
    #[arg(long)]
    resolution: Option<usize>,
    /// Where to write the difference field.
    #[arg(long)]
    diff_out: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value = "half-v")]
    kind: CycleKind,
    #[arg(long, default_value_t = 64)]
    max_res: usize,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 5)]
    fixed_epochs: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
    resolutions: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    workers: Vec<usize>,
    /// Timed epochs per cell, after one warm-up epoch.
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidArgument { .. } | Error::ShapeMismatch { .. } => 2,
        Error::Io(_) | Error::Format(_) | Error::Json(_) => 4,
        _ => 3,
    }
}

fn kind_name(e: &Error) -> &'static str {
    match e {
        Error::ShapeMismatch { .. } => "shape_mismatch",
        Error::InvalidArgument { .. } => "invalid_argument",
        Error::NonScalarRoot(_) => "non_scalar_root",
        Error::NotConverged { .. } => "not_converged",
        Error::Collective(_) => "collective",
        Error::ReplicaDivergence(_) => "replica_divergence",
        Error::Numeric(_) => "numeric",
        Error::Config { .. } => "config",
        Error::Format(_) => "format",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, Error> {
    let mut cfg = match &arg.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", p.display()))),
            e => e,
        })?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var("MGPDE_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Error::Config {
            key: "MGPDE_THREADS".into(),
            msg: format!("expected a positive integer, found {v:?}"),
        })?;
        cfg.cluster.threads_per_worker = Some(n);
        cfg.validate().map_err(|_| Error::Config {
            key: "MGPDE_THREADS".into(),
            msg: "must be positive".into(),
        })?;
    }
    Ok(cfg)
}

fn omega_of(cfg: &RunConfig, args: &OmegaArgs) -> Result<(OmegaSample, Option<usize>), Error> {
    match (&args.omega_values, args.omega) {
        (Some(v), _) => {
            if v.len() != 4 {
                return Err(Error::InvalidArgument {
                    op: "omega",
                    msg: format!("--omega-values takes 4 values, found {}", v.len()),
                });
            }
            let w = OmegaSample([v[0], v[1], v[2], v[3]]);
            w.validate()?;
            Ok((w, None))
        }
        (None, Some(i)) => Ok((cfg.held_out(i), Some(i))),
        (None, None) => Err(Error::InvalidArgument {
            op: "omega",
            msg: "pass --omega <index> or --omega-values a,b,c,d".into(),
        }),
    }
}

fn feature_of(checkpoint_extra: &serde_json::Value, cfg: &RunConfig) -> InputFeature {
    checkpoint_extra
        .get("input_feature")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or(cfg.problem.input_feature)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<serde_json::Value, Error> {
    let cfg = load_config(&a.config)?;
    let dir = a.out.unwrap_or_else(|| cfg.output.directory.clone());
    std::fs::create_dir_all(&dir)?;
    let omegas = cfg.problem().omegas;
    let mut entries = manifest_entries(&omegas, cfg.problem.sample_seed);
    if let Some(r) = a.render {
        let grid = GridSpec::new(r, cfg.problem.rank)?;
        for e in &mut entries {
            let name = PathBuf::from(format!("nu_{:04}.mgpd", e.index));
            let mut h = FieldHeader::new(FieldKind::Nu, grid.rank, r);
            h.omega = Some(e.omega);
            h.seed = Some(e.seed);
            h.index = Some(e.index);
            save_field(&h, &diffusivity_field(&e.omega, &grid)?, &dir.join(&name))?;
            e.nu_file = Some(name);
        }
    }
    let manifest = dir.join("manifest.jsonl");
    save_manifest(&entries, &manifest)?;
    Ok(json!({ "schema_version": SCHEMA_VERSION, "manifest": manifest, "samples": entries.len() }))
}

fn train(a: TrainArgs) -> Result<serde_json::Value, Error> {
    let mut cfg = load_config(&a.config)?;
    if let Some(p) = a.workers {
        cfg.cluster.p = p;
    }
    if let Some(n) = a.max_epochs {
        cfg.training.max_epochs = n;
    }
    if let Some(d) = a.out {
        cfg.output.directory = d;
    }
    cfg.validate()?;
    let dir = cfg.output.directory.clone();
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), &cfg)?;
    let schedule = cfg.schedule()?;
    let model = ModelState::build(&cfg.unet_spec(), cfg.network.init_seed)?;
    let mut recorder = RunRecorder::create(&dir, cfg.output.checkpoint_every)?
        .verbose(a.verbose)
        .with_extra("input_feature", serde_json::to_value(cfg.problem.input_feature)?);
    let (model, report) = mgtrain::run(&schedule, model, &cfg.problem(), &cfg.run_options(), &mut recorder)?;
    let final_ckpt = dir.join("final.ckpt");
    save_checkpoint(
        &model,
        json!({ "input_feature": cfg.problem.input_feature, "epochs": report.total_epochs }),
        &final_ckpt,
    )?;
    let mut doc = serde_json::to_value(&report)?;
    doc["schema_version"] = json!(SCHEMA_VERSION);
    write_json(&dir.join("report.json"), &doc)?;
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "checkpoint": final_ckpt,
        "final_loss": report.final_loss(),
        "epochs": report.total_epochs,
        "total_s": report.total_s,
    }))
}

fn solution_header(kind: FieldKind, grid: &GridSpec, omega: OmegaSample, cfg: &RunConfig, index: Option<usize>) -> FieldHeader {
    let mut h = FieldHeader::new(kind, grid.rank, grid.resolution);
    h.omega = Some(omega);
    h.seed = Some(cfg.problem.sample_seed);
    h.index = index;
    h
}

fn infer(a: InferArgs) -> Result<serde_json::Value, Error> {
    let cfg = load_config(&a.config)?;
    let (omega, index) = omega_of(&cfg, &a.omega)?;
    let (header, model) = load_checkpoint(&a.checkpoint)?;
    let grid = GridSpec::new(a.resolution, model.spec().spatial_rank)?;
    let t = Instant::now();
    let u = predict_solution(&model, &omega, &grid, feature_of(&header.extra, &cfg))?;
    let seconds = t.elapsed().as_secs_f64();
    save_field(&solution_header(FieldKind::U, &grid, omega, &cfg, index), &u, &a.out)?;
    Ok(json!({ "schema_version": SCHEMA_VERSION, "out": a.out, "inference_s": seconds }))
}

fn fem_solve(a: FemArgs) -> Result<serde_json::Value, Error> {
    let cfg = load_config(&a.config)?;
    let (omega, index) = omega_of(&cfg, &a.omega)?;
    let grid = GridSpec::new(a.resolution.unwrap_or(cfg.problem.max_resolution), cfg.problem.rank)?;
    let t = Instant::now();
    let opts = CgOptions {
        tol: a.tol,
        ..CgOptions::default()
    };
    let u = solve_field(&diffusivity_field(&omega, &grid)?, &grid, &opts)?;
    let seconds = t.elapsed().as_secs_f64();
    save_field(&solution_header(FieldKind::U, &grid, omega, &cfg, index), &u, &a.out)?;
    Ok(json!({ "schema_version": SCHEMA_VERSION, "out": a.out, "fem_solve_s": seconds }))
}

fn compare(a: CompareArgs) -> Result<serde_json::Value, Error> {
    let cfg = load_config(&a.config)?;
    let (omega, index) = omega_of(&cfg, &a.omega)?;
    let (header, model) = load_checkpoint(&a.checkpoint)?;
    let grid = GridSpec::new(
        a.resolution.unwrap_or(cfg.problem.max_resolution),
        model.spec().spatial_rank,
    )?;
    let t = Instant::now();
    let u = predict_solution(&model, &omega, &grid, feature_of(&header.extra, &cfg))?;
    let inference_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let reference = solve_field(&diffusivity_field(&omega, &grid)?, &grid, &CgOptions::default())?;
    let fem_solve_s = t.elapsed().as_secs_f64();
    let norms = interior_errors(&u, &reference, &grid)?;
    if let Some(path) = &a.diff_out {
        let diff = Tensor::new(
            u.shape().to_vec(),
            u.data().iter().zip(reference.data()).map(|(p, r)| p - r).collect(),
        )?;
        save_field(&solution_header(FieldKind::Diff, &grid, omega, &cfg, index), &diff, path)?;
    }
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "resolution": grid.resolution,
        "omega": omega,
        "l2_rel_error": norms.l2_rel,
        "linf_error": norms.linf,
        "inference_s": inference_s,
        "fem_solve_s": fem_solve_s,
    }))
}

fn schedule(a: ScheduleArgs) -> Result<serde_json::Value, Error> {
    let s = make_schedule(a.kind, a.max_res, a.levels, a.fixed_epochs)?;
    for (i, step) in s.steps.iter().enumerate() {
        let mode = match step.mode {
            StepMode::Fixed(k) => format!("fixed {k}"),
            StepMode::Converge => "converge".to_string(),
        };
        println!("{i}\t{}\tlevel {}\t{mode}", step.resolution, step.level);
    }
    Ok(serde_json::Value::Null)
}

#[derive(serde::Serialize)]
struct BenchRow {
    schema_version: u32,
    resolution: usize,
    p: usize,
    epochs: usize,
    epoch_s: f64,
    compute_s: f64,
    comm_s: f64,
}

fn bench(a: BenchArgs) -> Result<serde_json::Value, Error> {
    let cfg = load_config(&a.config)?;
    if a.epochs == 0 {
        return Err(Error::InvalidArgument {
            op: "bench",
            msg: "--epochs must be positive".into(),
        });
    }
    let problem = cfg.problem();
    let model = ModelState::build(&cfg.unet_spec(), cfg.network.init_seed)?;
    let opts = cfg.run_options();
    let sink: Box<dyn std::io::Write> = match &a.out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut log = CsvLog::new(sink);
    for &r in &a.resolutions {
        let data = problem.dataset(r)?;
        let objective = EnergyObjective::new(GridSpec::new(r, cfg.problem.rank)?);
        for &p in &a.workers {
            let cluster = ClusterSpec {
                workers: p,
                threads_per_worker: cfg.cluster.threads_per_worker,
            };
            let mut engine = Engine::new(model.clone(), opts.optimizer, cluster)?;
            engine.train_epoch(&data, &objective, &opts.epoch)?;
            let (mut wall, mut compute, mut comm) = (0.0, 0.0, 0.0);
            for _ in 0..a.epochs {
                let rep = engine.train_epoch(&data, &objective, &opts.epoch)?;
                wall += rep.wall_s;
                compute += rep.compute_s;
                comm += rep.comm_s;
            }
            let n = a.epochs as f64;
            log.write(&BenchRow {
                schema_version: SCHEMA_VERSION,
                resolution: r,
                p,
                epochs: a.epochs,
                epoch_s: wall / n,
                compute_s: compute / n,
                comm_s: comm / n,
            })?;
        }
    }
    Ok(serde_json::Value::Null)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!(
                "{}",
                json!({
                    "schema_version": SCHEMA_VERSION,
                    "error": { "kind": "usage", "message": msg.trim() },
                    "exit_code": 2,
                })
            );
            return ExitCode::from(2);
        }
    };
    let result = match cli.verb {
        Verb::Generate(a) => generate(a),
        Verb::Train(a) => train(a),
        Verb::Infer(a) => infer(a),
        Verb::FemSolve(a) => fem_solve(a),
        Verb::Compare(a) => compare(a),
        Verb::Schedule(a) => schedule(a),
        Verb::Bench(a) => bench(a),
    };
    match result {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            let mut err = json!({ "kind": kind_name(&e), "message": e.to_string() });
            if let Error::Config { key, .. } = &e {
                err["key"] = json!(key);
            }
            eprintln!("{}", json!({ "schema_version": SCHEMA_VERSION, "error": err, "exit_code": code }));
            ExitCode::from(code)
        }
    }
}
