use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gaussocc_core::harness::{
    bench_table, execute_run, with_workers, write_run, GaussianSetFile, RunConfig, INDEX_FILE,
};
use gaussocc_core::io::{save_label_grid, save_semantic_grid};
use gaussocc_core::splatter::{splat, SplatOptions, VoxelGridSpec};
use gaussocc_core::temporal::HistoryMode;
use gaussocc_core::verification::{
    attention_transcript_suite, run_gradient_suites, sparse_conv_oracle_suite, splat_oracle_suite, GRADIENT_TOLERANCE,
};

/// Maximum deviation allowed between exact splatting and the dense reference.
const EXACT_SPLAT_TOLERANCE: f64 = 1e-9;
/// Maximum deviation allowed between truncated splatting and the dense reference.
const TRUNCATED_SPLAT_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "gaussocc",
    version,
    about = "Semantic Gaussian occupancy: pipeline runs, splatting and verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a generated or manifest-loaded sequence.
    Run(RunArgs),
    /// Splat a Gaussian set file onto its grid.
    Splat(SplatArgs),
    /// Verification suites.
    Check {
        #[command(subcommand)]
        suite: CheckSuite,
    },
    /// Splat timing and storage across Gaussian counts and grid sizes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured frame count.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value = "gaussocc-out")]
    out: PathBuf,
    /// Never feed history to temporal attention.
    #[arg(long)]
    degenerate_history: bool,
}

#[derive(Args)]
struct SplatArgs {
    /// Gaussian set file (JSON).
    #[arg(long)]
    scene: PathBuf,
    /// Output grid; a `.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Cutoff in standard deviations, overriding the file.
    #[arg(long)]
    k_sigma: Option<f64>,
    /// Also write thresholded labels here.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = gaussocc_core::gaussian::DEFAULT_OCCUPANCY_THRESHOLD)]
    tau: f64,
}

#[derive(Subcommand)]
enum CheckSuite {
    /// Finite-difference check of every analytic gradient.
    Gradients {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Splat, sparse convolution and attention against brute-force references.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated Gaussian counts.
    #[arg(long = "p", value_delimiter = ',', default_value = "512,25600")]
    counts: Vec<usize>,
    /// Comma-separated grid sizes such as `64x64x8`.
    #[arg(long, value_delimiter = ',', default_value = "64x64x8,200x200x16", value_parser = parse_dims)]
    grid: Vec<[usize; 3]>,
    /// Settings other than counts and grids (classes, voxel size, cutoff, workers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report storage only, without timing a splat.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("bad grid {s:?}: {e}"))?;
    match dims.as_slice() {
        &[x, y, z] if x > 0 && y > 0 && z > 0 => Ok([x, y, z]),
        _ => Err(format!("grid must look like 64x64x8, got {s:?}")),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    Ok(cfg.with_env_seed()?)
}

fn write_index(dir: &Path, value: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn run(args: RunArgs) -> Result<bool> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(n) = args.frames {
        cfg.frames = n;
    }
    if args.degenerate_history {
        cfg.history = HistoryMode::Degenerate;
    }
    cfg.validate()?;
    let outcome = execute_run(&cfg)?;
    let index = write_run(&args.out, &outcome)?;
    println!(
        "{:>5}  {:>9}  {:>7}  {:>7}  {:>9}",
        "frame", "gaussians", "mIoU", "SC-IoU", "ms"
    );
    for (t, f) in outcome.sequence.frames.iter().enumerate() {
        let entry = &index.frames[t];
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{t:>5}  {:>9}  {:>7}  {:>7}  {:>9.1}",
            entry.gaussian_count,
            fmt(entry.miou),
            fmt(entry.sc_iou),
            f.wall_time_ms
        );
    }
    let m = &outcome.sequence.memory;
    println!(
        "memory: {} gaussian floats vs {} dense floats, ratio {:.6}",
        m.gaussian_floats, m.dense_floats, m.ratio
    );
    println!("wrote {}", args.out.join(INDEX_FILE).display());
    Ok(true)
}

fn splat_cmd(args: SplatArgs) -> Result<bool> {
    let file = GaussianSetFile::load(&args.scene).with_context(|| format!("loading {}", args.scene.display()))?;
    let set = file.set()?;
    let k_sigma = args.k_sigma.or(file.k_sigma).unwrap_or(f64::INFINITY);
    if !(k_sigma > 0.0) {
        bail!("k_sigma must be positive, got {k_sigma}");
    }
    let grid = splat(&set, &file.grid, &SplatOptions::with_k_sigma(k_sigma));
    save_semantic_grid(&grid, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.labels {
        save_label_grid(&grid.classify(args.tau), path).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "splatted {} gaussians onto {}x{}x{} ({} classes) -> {}",
        set.len(),
        file.grid.dims[0],
        file.grid.dims[1],
        file.grid.dims[2],
        file.num_classes,
        args.out.display()
    );
    Ok(true)
}

fn check_gradients(trials: usize, seed: u64, out: Option<PathBuf>) -> Result<bool> {
    if trials == 0 {
        bail!("--trials must be positive");
    }
    let reports = run_gradient_suites(trials, seed)?;
    let mut ok = true;
    println!(
        "{:<34} {:>6} {:>8} {:>12} {:>12}",
        "op", "cases", "rejected", "max rel err", "mean rel err"
    );
    for r in &reports {
        let pass = r.passes(GRADIENT_TOLERANCE);
        ok &= pass;
        println!(
            "{:<34} {:>6} {:>8} {:>12.3e} {:>12.3e}  {}",
            r.op,
            r.cases,
            r.rejected,
            r.max_rel_error,
            r.mean_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        write_index(
            &dir,
            &json!({"command": "check gradients", "seed": seed, "tolerance": GRADIENT_TOLERANCE, "passed": ok, "reports": reports}),
        )?;
    }
    Ok(ok)
}

fn check_oracle(seed: u64, scenes: usize, out: Option<PathBuf>) -> Result<bool> {
    let spec = VoxelGridSpec::new([0.0; 3], 1.0, [32, 32, 8])?;
    let s = splat_oracle_suite(scenes, 50, &spec, 3.0, seed);
    let exact_ok = s.max_exact_error <= EXACT_SPLAT_TOLERANCE;
    let truncated_ok = s.max_truncated_error <= TRUNCATED_SPLAT_TOLERANCE;
    let bound_ok = s.bound_violations == 0;
    let verdict = |b: bool| if b { "ok" } else { "FAIL" };
    println!("splat vs dense over {} scenes ({:.0} ms)", s.scenes, s.elapsed_ms);
    println!(
        "  k_sigma=inf   max abs {:.3e}  (tol {EXACT_SPLAT_TOLERANCE:e})  {}",
        s.max_exact_error,
        verdict(exact_ok)
    );
    println!(
        "  k_sigma={}     max abs {:.3e}  (tol {TRUNCATED_SPLAT_TOLERANCE:e})  {}",
        s.k_sigma,
        s.max_truncated_error,
        verdict(truncated_ok)
    );
    println!(
        "  k_sigma={}     max rel frobenius {:.3e}",
        s.k_sigma, s.max_truncated_frobenius
    );
    println!(
        "  truncation bound violations {}  {}",
        s.bound_violations,
        verdict(bound_ok)
    );
    let conv = sparse_conv_oracle_suite(50, seed)?;
    let attn = attention_transcript_suite(200, seed)?;
    let mut ok = exact_ok && truncated_ok && bound_ok;
    for r in std::iter::once(&conv).chain(&attn) {
        ok &= r.passes();
        println!(
            "{:<32} {:>4} cases  max abs {:.3e}  (tol {:e})  {}",
            r.name,
            r.cases,
            r.max_abs_error,
            r.tolerance,
            verdict(r.passes())
        );
    }
    if let Some(dir) = out {
        write_index(
            &dir,
            &json!({"command": "check oracle", "seed": seed, "passed": ok, "splat": s, "sparse_conv": conv, "attention": attn}),
        )?;
    }
    Ok(ok)
}

fn bench(args: BenchArgs) -> Result<bool> {
    let cfg = load_config(args.config.as_deref())?;
    if args.counts.is_empty() || args.counts.contains(&0) {
        bail!("--p needs positive Gaussian counts");
    }
    let rows = bench_table(&cfg, &args.counts, &args.grid, !args.no_timing)?;
    println!(
        "{:>8}  {:>12}  {:>10}  {:>14}  {:>14}  {:>8}",
        "P", "grid", "splat ms", "gaussian bytes", "dense bytes", "ratio"
    );
    for r in &rows {
        let [x, y, z] = r.grid_dims;
        println!(
            "{:>8}  {:>12}  {:>10.1}  {:>14}  {:>14}  {:>8.4}",
            r.num_gaussians,
            format!("{x}x{y}x{z}"),
            r.splat_ms,
            r.memory.gaussian_bytes,
            r.memory.dense_bytes,
            r.memory.ratio
        );
    }
    if let Some(dir) = args.out {
        write_index(
            &dir,
            &json!({"command": "bench", "classes": cfg.num_classes, "rows": rows}),
        )?;
    }
    Ok(true)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Splat(args) => splat_cmd(args),
        Command::Check { suite } => match suite {
            CheckSuite::Gradients { trials, seed, out } => with_workers(0, || check_gradients(trials, seed, out))?,
            CheckSuite::Oracle { seed, scenes, out } => check_oracle(seed, scenes, out),
        },
        Command::Bench(args) => bench(args),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gaussocc: one or more checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("gaussocc: error: {e:#}");
            ExitCode::from(2)
        }
    }
}
