//! `train`: run the three-stage pipeline, or a single stage resuming from
//! the previous stage's checkpoint in the same output directory.

use clap::Args;
use std::path::{Path, PathBuf};

use surfelsplat_data::checkpoint_read;
use surfelsplat_data::scene::{make_scene, SceneBundle};
use surfelsplat_train::{
    pipeline_stage1, pipeline_stage2, pipeline_stage3, run_pipeline, OptimState, PipelineConfig,
    TrainError,
};

use crate::config::{create_dir, load_run_config, write_json, CliError, RunConfig};

#[derive(Args)]
pub struct TrainArgs {
    /// Run config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and reports.
    #[arg(long)]
    out: PathBuf,
    /// 1 | 2 | 3 | all. Stages 2 and 3 resume from the previous stage's
    /// checkpoint in --out.
    #[arg(long, default_value = "all")]
    stage: String,
    /// Master seed override (scene + training).
    #[arg(long)]
    seed: Option<u64>,
    /// High-error selection percentage override.
    #[arg(long = "K")]
    k_percent: Option<f64>,
    /// Iteration scale override (1.0 = full schedule).
    #[arg(long)]
    iters_scale: Option<f64>,
    /// Ablation: skip the stage-3 in-place cloning.
    #[arg(long)]
    no_clone: bool,
    /// Ablation: leave opacity trainable in stage 3.
    #[arg(long)]
    no_fo: bool,
    /// Ablation: keep normal consistency off in stage 3.
    #[arg(long)]
    no_rnc: bool,
}

fn apply_overrides(cfg: &mut RunConfig, args: &TrainArgs) {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(k) = args.k_percent {
        cfg.pipeline.k_percent = k;
    }
    if let Some(s) = args.iters_scale {
        cfg.pipeline.iter_scale = s;
    }
    if args.no_clone {
        cfg.pipeline.enable_clone = false;
    }
    if args.no_fo {
        cfg.pipeline.enable_fo = false;
    }
    if args.no_rnc {
        cfg.pipeline.enable_rnc = false;
    }
    cfg.resolve();
}

/// Runs one stage, resuming stages 2/3 from the prior checkpoint. Optimizer
/// moments are not checkpointed, so a resumed stage starts them fresh.
fn run_single_stage(
    stage: u32,
    scene: &SceneBundle,
    pipeline: &PipelineConfig,
    out: &Path,
) -> Result<(), TrainError> {
    let mut optim = OptimState::new(pipeline.adam, pipeline.max_sh_degree);
    match stage {
        1 => {
            let mut set = scene.initial_surfels(pipeline.max_sh_degree, pipeline.seed);
            let mut step = 0;
            pipeline_stage1(scene, pipeline, out, &mut set, &mut optim, &mut step)?;
        }
        n => {
            let prev = out.join(format!("stage{}.ckpt", n - 1));
            let (mut set, meta) = checkpoint_read(&prev)?;
            let mut step = meta.iteration as usize;
            if n == 2 {
                pipeline_stage2(scene, pipeline, out, &mut set, &mut optim, &mut step)?;
            } else {
                pipeline_stage3(scene, pipeline, out, &mut set, &mut optim, &mut step)?;
            }
        }
    }
    Ok(())
}

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    let stage = match args.stage.as_str() {
        "all" => None,
        "1" => Some(1u32),
        "2" => Some(2),
        "3" => Some(3),
        other => {
            return Err(CliError::Usage(format!("--stage must be 1, 2, 3 or all, got {other:?}")))
        }
    };
    let mut cfg = load_run_config(args.config.as_deref())?;
    apply_overrides(&mut cfg, &args);
    create_dir(&args.out)?;
    write_json(&args.out.join("run_config.json"), &cfg)?;

    let params = cfg.scene.to_params()?;
    eprintln!("generating {} scene ({} views)...", cfg.scene.kind, params.n_cameras);
    let scene = make_scene(&params, cfg.seed)?;

    let iters = cfg.pipeline.stage_iterations();
    let result = match stage {
        None => {
            eprintln!("training stages 1-3 ({} + {} + {} iterations)...", iters[0], iters[1], iters[2]);
            run_pipeline(&scene, &cfg.pipeline, &args.out).map(|_| ())
        }
        Some(n) => {
            eprintln!("training stage {n} ({} iterations)...", iters[n as usize - 1]);
            let r = run_single_stage(n, &scene, &cfg.pipeline, &args.out);
            if let Err(e) = &r {
                // Mirror run_pipeline's failure marker for single stages.
                let marker = serde_json::json!({ "failed": true, "error": e.to_string() });
                let _ = write_json(&args.out.join("failure.json"), &marker);
            }
            r
        }
    };
    result?;
    eprintln!("done: artifacts in {}", args.out.display());
    Ok(())
}
