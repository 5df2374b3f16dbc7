//! `render`: rasterize a checkpoint from saved camera poses into PNG maps.

use clap::Args;
use std::path::PathBuf;

use surfelsplat_core::raster::render;
use surfelsplat_core::{Image1, Image3, RenderOptions};
use surfelsplat_data::transforms::load_transforms;
use surfelsplat_data::{checkpoint_read, save_png};

use crate::config::{create_dir, CliError};

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// transforms.json with the camera poses.
    #[arg(long)]
    transforms: PathBuf,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Render only this view index (default: all).
    #[arg(long)]
    view: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Depth map scaled into [0, 1] by the farthest covered pixel; uncovered
/// pixels (accumulated alpha <= 0.5) render black.
fn depth_to_image(depth: &Image1, accum: &Image1) -> Image3 {
    let mut max_depth = 0.0f64;
    for y in 0..depth.height {
        for x in 0..depth.width {
            if accum.get(x, y) > 0.5 {
                max_depth = max_depth.max(depth.get(x, y));
            }
        }
    }
    Image3::from_fn(depth.width, depth.height, |x, y| {
        if accum.get(x, y) > 0.5 && max_depth > 0.0 {
            let v = depth.get(x, y) / max_depth;
            [v, v, v]
        } else {
            [0.0; 3]
        }
    })
}

/// Blended camera-space normals remapped from [-1, 1] to RGB; empty pixels
/// render mid-gray.
fn normal_to_image(normal: &Image3) -> Image3 {
    Image3::from_fn(normal.width, normal.height, |x, y| {
        let n = normal.get(x, y);
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len > 1e-12 {
            [0.5 + 0.5 * n[0] / len, 0.5 + 0.5 * n[1] / len, 0.5 + 0.5 * n[2] / len]
        } else {
            [0.5; 3]
        }
    })
}

pub fn run(args: RenderArgs) -> Result<(), CliError> {
    let (set, meta) = checkpoint_read(&args.checkpoint)?;
    let frames = load_transforms(&args.transforms, args.width, args.height)?;
    let indices: Vec<usize> = match args.view {
        Some(i) if i >= frames.len() => {
            return Err(CliError::Usage(format!(
                "--view {i} out of range: transforms file has {} frames",
                frames.len()
            )))
        }
        Some(i) => vec![i],
        None => (0..frames.len()).collect(),
    };
    create_dir(&args.out)?;
    let opts = RenderOptions { retain_contributions: false, ..Default::default() };
    for &i in &indices {
        let outputs = render(&set, &frames[i].camera, &opts)?;
        save_png(&outputs.color, args.out.join(format!("view_{i:03}_color.png")))?;
        save_png(
            &depth_to_image(&outputs.depth_median, &outputs.accum),
            args.out.join(format!("view_{i:03}_depth.png")),
        )?;
        save_png(
            &normal_to_image(&outputs.normal_splat),
            args.out.join(format!("view_{i:03}_normal.png")),
        )?;
    }
    eprintln!(
        "rendered {} view(s) of a stage-{} checkpoint ({} surfels) to {}",
        indices.len(),
        meta.stage,
        set.len(),
        args.out.display()
    );
    Ok(())
}
