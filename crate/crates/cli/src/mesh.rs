//! `mesh`: fuse a checkpoint's rendered depth maps into a TSDF volume and
//! extract the isosurface as a binary PLY mesh.

use clap::Args;
use nalgebra::Vector3;
use std::path::PathBuf;

use surfelsplat_core::raster::render;
use surfelsplat_core::RenderOptions;
use surfelsplat_data::transforms::load_transforms;
use surfelsplat_data::{checkpoint_read, save_ply};
use surfelsplat_geom::{marching_cubes, tsdf_integrate, TsdfVolume};

use crate::config::CliError;

#[derive(Args)]
pub struct MeshArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// transforms.json with the camera poses to fuse.
    #[arg(long)]
    transforms: PathBuf,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// TSDF voxel size; 0 picks 1/24 of the model's bounding radius.
    #[arg(long, default_value_t = 0.0)]
    voxel_size: f64,
    /// Output PLY path.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: MeshArgs) -> Result<(), CliError> {
    let (set, _) = checkpoint_read(&args.checkpoint)?;
    if set.is_empty() {
        return Err(CliError::Usage("checkpoint contains no surfels".into()));
    }
    let frames = load_transforms(&args.transforms, args.width, args.height)?;

    // Volume bounds from the surfel centers, padded by the truncation band.
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for s in &set.surfels {
        lo = lo.inf(&s.mu);
        hi = hi.sup(&s.mu);
    }
    let center = 0.5 * (lo + hi);
    let radius = (hi - lo).amax().max(1e-3) * 0.5;
    let voxel = if args.voxel_size > 0.0 { args.voxel_size } else { radius / 24.0 };
    let pad = radius + 3.0 * voxel;
    let min = center - Vector3::repeat(pad)
        + voxel * Vector3::new(0.137, 0.211, 0.059);
    let mut volume = TsdfVolume::from_bounds(min, center + Vector3::repeat(pad), voxel);
    let trunc = volume.default_trunc();

    let opts = RenderOptions { retain_contributions: false, ..Default::default() };
    for frame in &frames {
        let outputs = render(&set, &frame.camera, &opts)?;
        tsdf_integrate(&mut volume, &outputs.depth_median, &outputs.accum, &frame.camera, trunc)?;
    }
    let mesh = marching_cubes(&volume, 0.0);
    if mesh.is_empty() {
        return Err(CliError::Numeric(
            "no surface crossed the TSDF iso level; nothing to extract".into(),
        ));
    }
    save_ply(&mesh, &args.out)?;
    eprintln!(
        "fused {} views at voxel {:.4} -> {} vertices, {} triangles -> {}",
        frames.len(),
        voxel,
        mesh.vertices.len(),
        mesh.triangles.len(),
        args.out.display()
    );
    Ok(())
}
