//! Command-line surface for the few-shot action matching toolkit: generate
//! synthetic feature stores, train adapters, evaluate episodes, inspect
//! individual matchings, and run the finite-difference gradient suites.
//!
//! stdout carries machine-readable payload only (JSON or CSV); diagnostics
//! go to stderr. Exit codes: 0 ok, 1 check failure, 2 usage, 3 I/O or file
//! format, 4 domain error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fsam_core::{
    evaluate, gen_synthetic, load_adapters, load_store, run_suites, save_adapters, save_store,
    train, video_distance_ota, video_similarity_km, Error, EvalConfig, FeatureStore,
    FusionWeights, Modality, SynthConfig, TrainConfig,
};

/// Non-usage failure: a message for stderr plus the process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            msg: msg.into(),
        }
    }

    fn check(msg: impl Into<String>) -> Self {
        Failure {
            code: 1,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    /// File and wire-format problems are I/O (3); everything else from the
    /// library is a domain error (4).
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_)
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::ChecksumMismatch { .. } => 3,
            _ => 4,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "fsam",
    version,
    about = "Few-shot action matching over paired feature streams"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired-modality feature store.
    Gen(GenArgs),
    /// Train the per-modality adapters; prints the loss trajectory as CSV.
    Train(TrainArgs),
    /// Run the episodic N-way K-shot protocol; prints a JSON report.
    Eval(EvalArgs),
    /// Inspect the matching between two videos.
    Match(MatchArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 12)]
    classes: usize,
    /// Videos per class.
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    /// Frames per video.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Latent sub-actions per class.
    #[arg(long, default_value_t = 3)]
    subactions: usize,
    /// Duration warp factor range as `low,high`.
    #[arg(long, default_value = "0.5,2.0", value_parser = parse_pair)]
    warp: (f64, f64),
    /// Shuffle sub-action order independently per video.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    permute: bool,
    /// Feature noise standard deviation.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Generator seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output file path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Feature store to train on.
    #[arg(long)]
    features: PathBuf,
    /// Training epochs.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Contrastive pairs per batch.
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Gradient descent step size.
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    /// Contrastive softmax temperature.
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    /// Loss weights as `cl,ota,km`.
    #[arg(long, default_value = "1,1,1", value_parser = parse_triple)]
    lambda: (f64, f64, f64),
    /// Adapter bottleneck width (default: dim / 4).
    #[arg(long)]
    bottleneck: Option<usize>,
    /// Seed for batch order and adapter initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to save the trained adapters.
    #[arg(long)]
    out_adapters: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Feature store to evaluate on.
    #[arg(long)]
    features: PathBuf,
    /// Optional trained adapter checkpoint.
    #[arg(long)]
    adapters: Option<PathBuf>,
    /// Classes per episode.
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    /// Support records per class.
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    /// Queries per class.
    #[arg(long, default_value_t = 1)]
    queries_per_class: usize,
    /// Number of episodes.
    #[arg(long, default_value_t = 10_000)]
    episodes: usize,
    /// Fusion weights as `ota_rgb,ota_flow,km_rgb,km_flow`.
    #[arg(long, default_value = "0.25,0.25,0.25,0.25", value_parser = parse_quad)]
    weights: (f64, f64, f64, f64),
    /// Report format; `csv` appends per-episode accuracies after the JSON.
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    report: ReportFormat,
    /// Write an N-way sweep (N = 5..10) as CSV to this path.
    #[arg(long)]
    plot_data: Option<PathBuf>,
    /// Worker threads (results are identical for every setting).
    #[arg(long)]
    threads: Option<usize>,
    /// Base episode seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

#[derive(Args)]
struct MatchArgs {
    /// Feature store holding both videos.
    #[arg(long)]
    features: PathBuf,
    /// First video id.
    #[arg(long)]
    a: u32,
    /// Second video id.
    #[arg(long)]
    b: u32,
    /// Matching method.
    #[arg(long, value_enum, default_value_t = Method::Joint)]
    method: Method,
    /// Stream to match on (ignored by `joint`, which reports both).
    #[arg(long, value_enum, default_value_t = StreamArg::Rgb)]
    modality: StreamArg,
    /// Write the per-step alignment or assignment as CSV to this path.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Method {
    Dtw,
    Km,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum StreamArg {
    Rgb,
    Flow,
}

impl From<StreamArg> for Modality {
    fn from(s: StreamArg) -> Modality {
        match s {
            StreamArg::Rgb => Modality::Rgb,
            StreamArg::Flow => Modality::Flow,
        }
    }
}

#[derive(Args)]
struct GradArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Maximum allowed relative error per suite.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Seeded instances per suite.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Base seed for the random instances.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Match(args) => cmd_match(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn parse_list(s: &str, n: usize, what: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != n {
        return Err(format!("expected {n} comma-separated {what}, got {}", parts.len()));
    }
    parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad value '{p}': {e}"))
        })
        .collect()
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let v = parse_list(s, 2, "numbers")?;
    Ok((v[0], v[1]))
}

fn parse_triple(s: &str) -> Result<(f64, f64, f64), String> {
    let v = parse_list(s, 3, "numbers")?;
    Ok((v[0], v[1], v[2]))
}

fn parse_quad(s: &str) -> Result<(f64, f64, f64, f64), String> {
    let v = parse_list(s, 4, "numbers")?;
    Ok((v[0], v[1], v[2], v[3]))
}

/// Rejects zero/invalid numeric flags up front so the message names the flag.
fn require(ok: bool, msg: &str) -> Result<(), Failure> {
    if ok {
        Ok(())
    } else {
        Err(Failure::usage(msg))
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), Failure> {
    require(args.classes >= 1, "--classes must be at least 1")?;
    require(args.per_class >= 1, "--per-class must be at least 1")?;
    require(args.frames >= 1, "--frames must be at least 1")?;
    require(args.dim >= 1, "--dim must be at least 1")?;
    require(
        args.subactions >= 1 && args.subactions <= args.frames,
        "--subactions must be between 1 and --frames",
    )?;
    require(
        args.warp.0 > 0.0 && args.warp.0.is_finite() && args.warp.1 >= args.warp.0 && args.warp.1.is_finite(),
        "--warp must satisfy 0 < low <= high",
    )?;
    require(
        args.noise.is_finite() && args.noise >= 0.0,
        "--noise must be finite and nonnegative",
    )?;
    let cfg = SynthConfig {
        num_classes: args.classes,
        videos_per_class: args.per_class,
        frames: args.frames,
        dim: args.dim,
        num_subactions: args.subactions,
        speed_warp_range: args.warp,
        permute_subactions: args.permute,
        noise_sigma: args.noise,
        seed: args.seed,
    };
    let store = gen_synthetic(&cfg)?;
    save_store(&store, &args.out).map_err(|e| Failure {
        code: 3,
        msg: e.to_string(),
    })?;
    println!(
        "{}",
        serde_json::json!({
            "records": store.len(),
            "classes": store.num_classes(),
            "frames": args.frames,
            "dim": store.dim(),
            "path": args.out.display().to_string(),
        })
    );
    Ok(())
}

fn load_features(path: &Path) -> Result<FeatureStore, Failure> {
    load_store(path).map_err(Failure::from)
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        temperature: args.tau,
        lambda_cl: args.lambda.0,
        lambda_ota: args.lambda.1,
        lambda_km: args.lambda.2,
        bottleneck: args.bottleneck,
        seed: args.seed,
    };
    // Flag-level validation failures are usage errors.
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let store = load_features(&args.features)?;
    let result = train(&store, &cfg)?;
    print!("{}", result.trajectory_csv());
    if let Some(path) = &args.out_adapters {
        save_adapters(&result.adapters, path).map_err(|e| Failure {
            code: 3,
            msg: e.to_string(),
        })?;
        eprintln!("adapters saved to {}", path.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    require(args.n_way >= 1, "--n-way must be at least 1")?;
    require(args.k_shot >= 1, "--k-shot must be at least 1")?;
    require(
        args.queries_per_class >= 1,
        "--queries-per-class must be at least 1",
    )?;
    require(args.episodes >= 1, "--episodes must be at least 1")?;
    let weights = FusionWeights {
        ota_rgb: args.weights.0,
        ota_flow: args.weights.1,
        km_rgb: args.weights.2,
        km_flow: args.weights.3,
    };
    weights
        .validate()
        .map_err(|e| Failure::usage(format!("--weights: {e}")))?;
    let store = load_features(&args.features)?;
    let adapters = match &args.adapters {
        Some(path) => Some(load_adapters(path)?),
        None => None,
    };
    let cfg = EvalConfig {
        n_way: args.n_way,
        k_shot: args.k_shot,
        queries_per_class: args.queries_per_class,
        episodes: args.episodes,
        weights,
        seed: args.seed,
        threads: args.threads,
    };
    let report = evaluate(&store, &cfg, adapters.as_ref())?;
    println!(
        "{}",
        serde_json::to_string(&report).map_err(|e| Failure {
            code: 4,
            msg: e.to_string()
        })?
    );
    if matches!(args.report, ReportFormat::Csv) {
        let mut csv = String::from("episode,accuracy\n");
        for (i, acc) in report.per_episode_accuracy.iter().enumerate() {
            let _ = writeln!(csv, "{i},{acc}");
        }
        print!("{csv}");
    }
    if let Some(path) = &args.plot_data {
        let mut csv = String::from("n_way,mean_accuracy,ci95\n");
        for n in 5..=10 {
            let sweep_cfg = EvalConfig {
                n_way: n,
                ..cfg.clone()
            };
            let r = evaluate(&store, &sweep_cfg, adapters.as_ref())?;
            let _ = writeln!(csv, "{n},{},{}", r.mean_accuracy, r.ci95);
        }
        std::fs::write(path, csv).map_err(|e| Failure {
            code: 3,
            msg: format!("writing {}: {e}", path.display()),
        })?;
        eprintln!("sweep written to {}", path.display());
    }
    Ok(())
}

fn cmd_match(args: MatchArgs) -> Result<(), Failure> {
    if args.dump.is_some() && args.method == Method::Joint {
        return Err(Failure::usage("--dump requires --method dtw or --method km"));
    }
    let store = load_features(&args.features)?;
    let lookup = |id: u32| -> Result<usize, Failure> {
        store.find_video(id).ok_or(Failure {
            code: 4,
            msg: format!("video id {id} not found in the store"),
        })
    };
    let ia = lookup(args.a)?;
    let ib = lookup(args.b)?;
    let frames = |idx: usize, m: Modality| store.record(idx).map(|r| r.sequence(m).to_frames());

    let mut out = serde_json::Map::new();
    let methods: &[Method] = match args.method {
        Method::Joint => &[Method::Dtw, Method::Km],
        ref m => std::slice::from_ref(m),
    };
    let streams: &[StreamArg] = match args.method {
        Method::Joint => &[StreamArg::Rgb, StreamArg::Flow],
        _ => std::slice::from_ref(&args.modality),
    };
    for &method in methods {
        for &stream in streams {
            let m: Modality = stream.into();
            let sa = frames(ia, m)?;
            let qb = frames(ib, m)?;
            let suffix = match stream {
                StreamArg::Rgb => "rgb",
                StreamArg::Flow => "flow",
            };
            match method {
                Method::Dtw => {
                    let (cost, path) = video_distance_ota(&sa, &qb)?;
                    out.insert(format!("dtw_{suffix}"), cost.into());
                    if let Some(dump) = &args.dump {
                        let dist = fsam_core::frame_distance_matrix(&sa, &qb)?;
                        let mut csv = String::new();
                        for &(l, mm) in path.steps() {
                            let _ = writeln!(csv, "{l},{mm},{}", dist.at(l, mm));
                        }
                        std::fs::write(dump, csv).map_err(|e| Failure {
                            code: 3,
                            msg: format!("writing {}: {e}", dump.display()),
                        })?;
                    }
                }
                Method::Km => {
                    let (total, matching) = video_similarity_km(&sa, &qb)?;
                    out.insert(format!("km_{suffix}"), total.into());
                    if let Some(dump) = &args.dump {
                        let sim = fsam_core::frame_similarity_matrix(&sa, &qb)?;
                        let mut csv = String::new();
                        for (l, &c) in matching.assignment().iter().enumerate() {
                            let _ = writeln!(csv, "{l},{c},{}", sim.at(l, c));
                        }
                        std::fs::write(dump, csv).map_err(|e| Failure {
                            code: 3,
                            msg: format!("writing {}: {e}", dump.display()),
                        })?;
                    }
                }
                Method::Joint => unreachable!("joint expands to dtw and km"),
            }
        }
    }
    println!("{}", serde_json::Value::Object(out));
    Ok(())
}

fn cmd_gradcheck(args: GradArgs) -> Result<(), Failure> {
    require(
        args.eps.is_finite() && args.eps > 0.0,
        "--eps must be positive and finite",
    )?;
    require(
        args.tol.is_finite() && args.tol >= 0.0,
        "--tol must be finite and nonnegative",
    )?;
    require(args.instances >= 1, "--instances must be at least 1")?;
    let report = run_suites(args.eps, args.instances, args.seed)?;
    println!(
        "{}",
        serde_json::to_string(&report).map_err(|e| Failure {
            code: 4,
            msg: e.to_string()
        })?
    );
    if !report.passes(args.tol) {
        let failing: Vec<&str> = report
            .suites
            .iter()
            .filter(|s| s.max_rel_err >= args.tol)
            .map(|s| s.name)
            .collect();
        return Err(Failure::check(format!(
            "gradient check failed (tol {}): {}",
            args.tol,
            failing.join(", ")
        )));
    }
    Ok(())
}
