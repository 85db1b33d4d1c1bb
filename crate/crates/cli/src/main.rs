//! `fsuda`: generate synthetic episodes, run and evaluate the pipeline, run
//! the module ablation and dump intermediates.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use fsuda_core::engine::{ablate, evaluate, inspect, DirSource, FeatureMode, EpisodeSource, Pipeline, PipelineConfig, Stage, SynthSource, Toggles};
use fsuda_core::feature_store::{load_episode_file, save_episode, save_tensor};
use fsuda_core::synthgen::generate_episode;
use fsuda_core::SynthConfig;

#[derive(Parser, Debug)]
#[command(name = "fsuda", version, about = "Few-shot unsupervised domain adaptation over local feature maps")]
struct Cli {
    /// Overrides the generator seed and the clustering seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic episodes (tensors and manifests).
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one stored episode and print its report as JSON.
    Run {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        pipeline: Option<PathBuf>,
    },
    /// Evaluate a pipeline over many episodes.
    Eval {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        pipeline: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        tasks: usize,
        /// Per-episode CSV; the summary goes next to it as `<out>.summary.txt`.
        #[arg(long)]
        out: PathBuf,
        /// Write 0 in the wall_ms column so reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
    },
    /// Evaluate the module ablation grid on shared episodes.
    Ablate {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        pipeline: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        tasks: usize,
        /// Semicolon-separated toggle sets, e.g. `tse;cs;tse+catt+cs`.
        /// Defaults to the five module rows.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one pipeline intermediate as tensors.
    Dump {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        stage: String,
        #[arg(long)]
        pipeline: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct Input {
    /// Directory searched recursively for `manifest.json` files.
    #[arg(long)]
    episodes: Option<PathBuf>,
    /// Synthetic generator config.
    #[arg(long)]
    synth: Option<PathBuf>,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage(anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Gen { config, out } => gen(&config, &out, seed),
        Command::Run { episode, pipeline } => run(&episode, pipeline.as_deref(), seed),
        Command::Eval {
            input,
            pipeline,
            tasks,
            out,
            no_timing,
        } => eval(&input, pipeline.as_deref(), tasks, &out, !no_timing, seed),
        Command::Ablate {
            input,
            pipeline,
            tasks,
            grid,
            out,
        } => run_ablation(&input, pipeline.as_deref(), tasks, grid.as_deref(), &out, seed),
        Command::Dump {
            episode,
            stage,
            pipeline,
            out,
        } => dump(&episode, &stage, pipeline.as_deref(), &out, seed),
    }
}

fn read_synth(path: &Path, seed: Option<u64>) -> CliResult<SynthConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    let mut cfg = SynthConfig::from_json(&text).with_context(|| format!("invalid synth config {}", path.display())).map_err(usage)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn read_pipeline(path: Option<&Path>, seed: Option<u64>) -> CliResult<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::read(p).with_context(|| format!("invalid pipeline config {}", p.display())).map_err(usage)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.tse.seed = s;
    }
    Ok(cfg)
}

fn open_source(input: &Input, seed: Option<u64>) -> CliResult<Box<dyn EpisodeSource>> {
    match (&input.episodes, &input.synth) {
        (Some(dir), None) => Ok(Box::new(DirSource::scan(dir).map_err(usage)?)),
        (None, Some(cfg)) => Ok(Box::new(SynthSource::new(read_synth(cfg, seed)?).map_err(usage)?)),
        _ => Err(usage(anyhow!("pass exactly one of --episodes or --synth"))),
    }
}

fn gen(config: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let cfg = read_synth(config, seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(runtime)?;
    for i in 0..cfg.episodes {
        let (episode, _) = generate_episode(&cfg.for_episode(i as u64)).map_err(runtime)?;
        let dir = out.join(format!("episode_{i:05}"));
        save_episode(&episode, &dir).with_context(|| format!("writing {}", dir.display())).map_err(runtime)?;
    }
    println!("wrote {} episodes to {} (seed {})", cfg.episodes, out.display(), cfg.seed);
    Ok(())
}

fn run(episode: &Path, pipeline: Option<&Path>, seed: Option<u64>) -> CliResult<()> {
    let cfg = read_pipeline(pipeline, seed)?;
    let ep = load_episode_file(episode).map_err(runtime)?;
    let pipe = Pipeline::new(cfg).map_err(usage)?;
    let (r, _) = pipe.run_episode(&ep, 0, None).map_err(runtime)?;
    let report = serde_json::json!({
        "variant": pipe.config.variant_label(),
        "content_hash": r.content_hash,
        "accuracy": r.accuracy,
        "initial_accuracy": r.initial_accuracy,
        "predictions": r.predictions,
        "losses": {
            "l_cls": r.losses.cls,
            "l_sfa": r.losses.sfa,
            "l_spa": r.losses.spa,
            "l_clm": r.losses.clm,
            "total": r.losses.total,
        },
        "k": r.k,
        "rounds": r.rounds,
        "confident_count": r.confident_count(),
        "promoted": r.promoted,
        "spa_skipped_classes": r.spa_skipped,
    });
    println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
    Ok(())
}

fn create(path: &Path) -> CliResult<fs::File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display())).map_err(runtime)?;
    }
    fs::File::create(path).with_context(|| format!("creating {}", path.display())).map_err(runtime)
}

fn summary_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".summary.txt");
    out.with_file_name(name)
}

fn eval(input: &Input, pipeline: Option<&Path>, tasks: usize, out: &Path, timing: bool, seed: Option<u64>) -> CliResult<()> {
    if tasks == 0 {
        return Err(usage(anyhow!("--tasks must be at least 1")));
    }
    let cfg = read_pipeline(pipeline, seed)?;
    let source = open_source(input, seed)?;
    let report = evaluate(source.as_ref(), tasks, &cfg).map_err(runtime)?;
    for (i, msg) in &report.failures {
        log::error!("episode {i}: {msg}");
    }
    if report.episodes.is_empty() {
        return Err(runtime(anyhow!("all {tasks} episodes failed")));
    }
    report.write_csv(create(out)?, timing).map_err(runtime)?;
    let summary = report.summary();
    create(&summary_path(out))?.write_all(summary.as_bytes()).map_err(runtime)?;
    print!("{summary}");
    Ok(())
}

fn parse_grid(grid: Option<&str>) -> CliResult<Vec<Toggles>> {
    match grid {
        None => Ok(Toggles::module_grid()),
        Some(s) => s
            .split(';')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<Toggles>().map_err(usage))
            .collect(),
    }
}

fn run_ablation(input: &Input, pipeline: Option<&Path>, tasks: usize, grid: Option<&str>, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let grid = parse_grid(grid)?;
    let cfg = read_pipeline(pipeline, seed)?;
    let source = open_source(input, seed)?;
    let table = ablate(source.as_ref(), &cfg, &grid, tasks).map_err(runtime)?;
    table.write_csv(create(out)?).map_err(runtime)?;
    for row in &table.rows {
        let r = &row.report;
        println!(
            "{:<14} {:6.2}% ± {:.2}  ({} tasks, {} failed)",
            row.toggles.to_string(),
            100.0 * r.mean_accuracy,
            100.0 * r.ci95_half_width,
            r.episodes.len(),
            r.failures.len()
        );
    }
    Ok(())
}

fn dump(episode: &Path, stage: &str, pipeline: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let stage: Stage = stage.parse().map_err(usage)?;
    let cfg = read_pipeline(pipeline, seed)?;
    let pipe = Pipeline::new(cfg).map_err(usage)?;
    let ep = load_episode_file(episode).map_err(runtime)?;
    if matches!(stage, Stage::Centroids | Stage::Semantic) && pipe.config.feature_mode == FeatureMode::RawLocal {
        return Err(usage(anyhow!("stage `{stage}` needs feature_mode = semantic")));
    }
    let tensors = inspect(&pipe, &ep, stage, None).map_err(runtime)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(runtime)?;
    for (name, blob) in &tensors {
        save_tensor(&out.join(format!("{name}.ftns")), blob).map_err(runtime)?;
    }
    println!("wrote {} {stage} tensors to {}", tensors.len(), out.display());
    Ok(())
}
