//! `surfelsplat`: one binary exposing the whole workflow as subcommands.
//!
//! Every subcommand emits machine-readable JSON/CSV/PNG/PLY artifacts and
//! keeps human-oriented progress on standard error. Exit codes are a stable
//! contract: 0 success, 2 usage or configuration errors, 3 numerical or
//! metric failures. Given the same arguments and seed, primary outputs are
//! byte-identical regardless of `--threads`.

use clap::Parser;

mod config;
mod evaluate;
mod gradcheck;
mod make_scene;
mod mesh;
mod render;
mod report;
mod train;

use config::CliError;

#[derive(Parser)]
#[command(name = "surfelsplat", version, about = "2D Gaussian surfel splatting toolkit")]
struct Cli {
    /// Worker threads (default: all cores; SURFELSPLAT_THREADS as fallback).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Generate a synthetic scene: posed PNGs, transforms.json, gt_mesh.ply.
    MakeScene(make_scene::MakeSceneArgs),
    /// Run the three-stage training pipeline (or one stage of it).
    Train(train::TrainArgs),
    /// Render color/depth/normal maps from a checkpoint.
    Render(render::RenderArgs),
    /// Fuse rendered depth into a TSDF and extract a PLY mesh.
    Mesh(mesh::MeshArgs),
    /// Compare an image or mesh pair and report metrics.
    Evaluate(evaluate::EvaluateArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Aggregate per-stage metrics files into one CSV + JSON summary.
    Report(report::ReportArgs),
}

fn init_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("SURFELSPLAT_THREADS") {
            Ok(v) => Some(v.parse::<usize>().map_err(|_| {
                CliError::Usage(format!("SURFELSPLAT_THREADS must be a number, got {v:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::MakeScene(args) => make_scene::run(args),
        Command::Train(args) => train::run(args),
        Command::Render(args) => render::run(args),
        Command::Mesh(args) => mesh::run(args),
        Command::Evaluate(args) => evaluate::run(args),
        Command::Gradcheck(args) => gradcheck::run(args),
        Command::Report(args) => report::run(args),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print to stdout and succeed; everything else
            // is a usage error.
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = init_threads(cli.threads).and_then(|()| run(cli.command)) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
