//! `evaluate`: compare a prediction against ground truth — either a PNG
//! pair (PSNR/SSIM) or a PLY pair (Chamfer/F-score).

use clap::Args;
use serde::Serialize;
use std::path::PathBuf;

use surfelsplat_data::{load_ply, load_png};
use surfelsplat_geom::metrics::inf_as_string;
use surfelsplat_geom::{chamfer_and_fscore, psnr, ssim};

use crate::config::{write_json, CliError};

#[derive(Args)]
pub struct EvaluateArgs {
    /// Predicted image (PNG); requires --gt.
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    /// Ground-truth image (PNG).
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Predicted mesh (PLY); requires --gt-mesh.
    #[arg(long, requires = "gt_mesh")]
    pred_mesh: Option<PathBuf>,
    /// Ground-truth mesh (PLY).
    #[arg(long)]
    gt_mesh: Option<PathBuf>,
    /// F-score distance threshold for mesh pairs.
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    /// Point samples per mesh.
    #[arg(long, default_value_t = 8000)]
    samples: usize,
    #[arg(long, default_value_t = 17)]
    sample_seed: u64,
    /// Also write the metrics JSON here (always printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ImageEval {
    /// `"inf"` when the images match exactly.
    #[serde(with = "inf_as_string")]
    psnr: f64,
    ssim: f64,
}

#[derive(Serialize)]
struct MeshEval {
    chamfer: f64,
    precision: f64,
    recall: f64,
    fscore: f64,
    tau: f64,
}

pub fn run(args: EvaluateArgs) -> Result<(), CliError> {
    let text = match (&args.pred, &args.pred_mesh) {
        (Some(pred), None) => {
            let gt = args.gt.as_ref().expect("clap enforces --gt");
            let a = load_png(pred)?;
            let b = load_png(gt)?;
            let eval = ImageEval { psnr: psnr(&a, &b)?, ssim: ssim(&a, &b)? };
            serde_json::to_string_pretty(&eval).expect("serializable")
        }
        (None, Some(pred)) => {
            let gt = args.gt_mesh.as_ref().expect("clap enforces --gt-mesh");
            let a = load_ply(pred)?;
            let b = load_ply(gt)?;
            let r = chamfer_and_fscore(&a, &b, args.tau, args.samples, args.sample_seed)?;
            let eval = MeshEval {
                chamfer: r.chamfer,
                precision: r.precision,
                recall: r.recall,
                fscore: r.fscore,
                tau: r.tau,
            };
            serde_json::to_string_pretty(&eval).expect("serializable")
        }
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "give either an image pair (--pred/--gt) or a mesh pair \
                 (--pred-mesh/--gt-mesh), not both"
                    .into(),
            ))
        }
        (None, None) => {
            return Err(CliError::Usage(
                "nothing to evaluate: give --pred/--gt or --pred-mesh/--gt-mesh".into(),
            ))
        }
    };
    println!("{text}");
    if let Some(path) = &args.out {
        let value: serde_json::Value = serde_json::from_str(&text).expect("own output");
        write_json(path, &value)?;
    }
    Ok(())
}
