//! `make-scene`: synthesize a posed multi-view dataset on disk.

use clap::Args;
use std::path::PathBuf;

use surfelsplat_data::scene::make_scene;
use surfelsplat_data::transforms::{save_transforms, FrameCamera};
use surfelsplat_data::{save_ply, save_png};

use crate::config::{create_dir, write_json, CliError, SceneSection};

#[derive(Args)]
pub struct MakeSceneArgs {
    /// textured_plane | sphere | plane_plus_sphere | checker_box
    #[arg(long, default_value = "textured_plane")]
    kind: String,
    /// checker | noise | mottled
    #[arg(long, default_value = "checker")]
    texture: String,
    #[arg(long, default_value_t = 20)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 3.0)]
    ring_radius: f64,
    #[arg(long, default_value_t = 8.0)]
    texture_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: MakeSceneArgs) -> Result<(), CliError> {
    let section = SceneSection {
        kind: args.kind,
        texture: args.texture,
        views: args.views,
        width: args.width,
        height: args.height,
        ring_radius: args.ring_radius,
        texture_scale: args.texture_scale,
        ..SceneSection::default()
    };
    let params = section.to_params()?;
    let scene = make_scene(&params, args.seed)?;
    create_dir(&args.out)?;

    let mut frames = Vec::with_capacity(scene.cameras.len());
    for (i, (camera, image)) in scene.cameras.iter().zip(&scene.gt_images).enumerate() {
        let name = format!("r_{i:03}");
        save_png(image, args.out.join(format!("{name}.png")))?;
        frames.push(FrameCamera { camera: camera.clone(), file_path: name });
    }
    save_transforms(args.out.join("transforms.json"), &frames)?;
    if let Some(mesh) = &scene.gt_mesh {
        save_ply(mesh, args.out.join("gt_mesh.ply"))?;
    }
    write_json(
        &args.out.join("scene.json"),
        &serde_json::json!({ "seed": args.seed, "scene": &section, "extent": scene.extent }),
    )?;
    eprintln!(
        "wrote {} views ({}x{}) of {} to {}",
        scene.cameras.len(),
        params.width,
        params.height,
        section_label(&section),
        args.out.display()
    );
    Ok(())
}

fn section_label(s: &SceneSection) -> String {
    format!("{} ({})", s.kind, s.texture)
}
