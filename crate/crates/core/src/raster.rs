//! Tiled, deterministic forward rasterization.
//!
//! Surfels are depth-sorted once per view, binned into pixel tiles, and each
//! pixel alpha-composites its tile's splats front to back. Per-pixel
//! contribution lists are retained for the loss terms and the backward pass.
//! Tiles are rendered in parallel but every pixel always sums the same
//! contributions in the same order, so output is independent of tiling and
//! thread count.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::image::{Image1, Image3};
use crate::kernel::{intersect_prepared, screen_bbox, splat_view, KernelOptions, SplatView};
use crate::surfel::SurfelSet;
use crate::CoreError;

/// Rasterization settings. The defaults are used throughout training.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    pub tile_size: usize,
    /// Gaussian cutoff in standard deviations.
    pub cutoff: f64,
    /// Contributions with `alpha * ghat` below this are dropped.
    pub alpha_min: f64,
    /// Screen-space low-pass sigma (pixels); `None` disables the guard.
    pub lowpass_sigma: Option<f64>,
    pub near_clip: f64,
    /// Stop compositing once transmittance falls below this; `None` keeps
    /// going (useful for gradient checking, where the stop is a kink).
    pub early_stop: Option<f64>,
    pub background: [f64; 3],
    /// Hard cap on contributions per pixel; the overflow count reports how
    /// many pixels were truncated by it.
    pub max_contributions: usize,
    /// Keep per-pixel contribution lists (required by losses/backward).
    pub retain_contributions: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            tile_size: 16,
            cutoff: 3.0,
            alpha_min: 1.0 / 255.0,
            lowpass_sigma: Some(std::f64::consts::FRAC_1_SQRT_2),
            near_clip: 0.01,
            early_stop: Some(1e-4),
            background: [0.0; 3],
            max_contributions: 64,
            retain_contributions: true,
        }
    }
}

impl RenderOptions {
    pub fn kernel(&self) -> KernelOptions {
        KernelOptions { cutoff: self.cutoff, lowpass_sigma: self.lowpass_sigma, near_clip: self.near_clip }
    }

    /// Pixel padding for conservative tile binning: the low-pass disk plus
    /// half a pixel of sampling slack.
    fn bbox_margin(&self) -> f64 {
        self.cutoff * self.lowpass_sigma.unwrap_or(0.0) + 0.5
    }
}

/// One composited sample at a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    /// Stable surfel id (not an index), so records survive reordering.
    pub surfel_id: u64,
    /// Blending weight `T * alpha * ghat`.
    pub weight: f64,
    /// Transmittance *before* this sample.
    pub trans: f64,
    /// Camera-space depth of the ray-splat intersection.
    pub z: f64,
    pub u: f64,
    pub v: f64,
}

/// Everything the forward pass produces for one view.
#[derive(Debug, Clone)]
pub struct RenderOutputs {
    pub color: Image3,
    /// Weighted mean depth `sum(w z) / (sum(w) + 1e-6)`.
    pub depth_mean: Image1,
    /// Depth of the last splat crossing transmittance 0.5 (or the last
    /// composited splat where accumulation stays below 0.5).
    pub depth_median: Image1,
    /// Total blending weight per pixel.
    pub accum: Image1,
    /// Weight-blended, camera-facing splat normals (camera frame, unnormalized).
    pub normal_splat: Image3,
    /// Row-major per-pixel contribution lists; empty when
    /// `retain_contributions` is off.
    pub per_pixel: Vec<Vec<Contribution>>,
    /// Number of pixels whose contribution list hit `max_contributions`.
    pub overflow: usize,
}

/// Pixels touched by one surfel in one view, with its view-dependent color.
#[derive(Debug, Clone)]
pub struct FootprintRecord {
    pub surfel_id: u64,
    pub view: usize,
    pub pixels: Vec<(u32, u32)>,
    pub color: [f64; 3],
}

struct Prepared {
    views: Vec<SplatView>,
    /// Indices into the surfel set, front to back (ties broken by id).
    order: Vec<usize>,
}

fn prepare(set: &SurfelSet, camera: &Camera, opts: &RenderOptions) -> Prepared {
    let views: Vec<SplatView> = set
        .surfels
        .par_iter()
        .map(|s| splat_view(s, camera, set.active_sh_degree, opts.near_clip))
        .collect();
    let mut order: Vec<usize> = (0..set.len())
        .filter(|&i| views[i].center_depth > opts.near_clip)
        .collect();
    order.sort_by(|&a, &b| {
        views[a]
            .center_depth
            .total_cmp(&views[b].center_depth)
            .then_with(|| set.surfels[a].id.cmp(&set.surfels[b].id))
    });
    Prepared { views, order }
}

/// Renders one view. Deterministic for a fixed surfel order; tiling and
/// rayon parallelism never change the per-pixel compositing order.
pub fn render(set: &SurfelSet, camera: &Camera, opts: &RenderOptions) -> Result<RenderOutputs, CoreError> {
    let (w, h) = (camera.width, camera.height);
    let ts = opts.tile_size.max(1);
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let prepared = prepare(set, camera, opts);
    let kernel = opts.kernel();

    // Bin surfels into tiles; pushing in sorted order keeps each tile list
    // depth sorted.
    let mut tile_bins: Vec<Vec<usize>> = vec![Vec::new(); tiles_x * tiles_y];
    let margin = opts.bbox_margin();
    for &i in &prepared.order {
        let bbox = screen_bbox(&set.surfels[i], camera, opts.cutoff, opts.near_clip, margin)
            .unwrap_or((0.0, 0.0, (w - 1) as f64 + 1.0, (h - 1) as f64 + 1.0));
        let tx0 = ((bbox.0.floor().max(0.0) as usize) / ts).min(tiles_x - 1);
        let ty0 = ((bbox.1.floor().max(0.0) as usize) / ts).min(tiles_y - 1);
        if bbox.2 < 0.0 || bbox.3 < 0.0 || bbox.0 >= w as f64 || bbox.1 >= h as f64 {
            continue;
        }
        let tx1 = ((bbox.2.ceil().max(0.0) as usize) / ts).min(tiles_x - 1);
        let ty1 = ((bbox.3.ceil().max(0.0) as usize) / ts).min(tiles_y - 1);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tile_bins[ty * tiles_x + tx].push(i);
            }
        }
    }

    struct TilePixel {
        color: [f64; 3],
        depth_mean: f64,
        depth_median: f64,
        accum: f64,
        normal: [f64; 3],
        contribs: Vec<Contribution>,
        overflowed: bool,
    }

    let tile_results: Vec<Vec<TilePixel>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let tx = tile % tiles_x;
            let ty = tile / tiles_x;
            let x0 = tx * ts;
            let y0 = ty * ts;
            let x1 = (x0 + ts).min(w);
            let y1 = (y0 + ts).min(h);
            let bin = &tile_bins[tile];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for iy in y0..y1 {
                for ix in x0..x1 {
                    let (px, py) = (ix as f64 + 0.5, iy as f64 + 0.5);
                    let mut t = 1.0;
                    let mut color = [0.0; 3];
                    let mut normal = [0.0; 3];
                    let mut sum_w = 0.0;
                    let mut sum_wz = 0.0;
                    let mut median: f64 = 0.0;
                    let mut last_z = 0.0;
                    let mut contribs: Vec<Contribution> = Vec::new();
                    let mut overflowed = false;
                    for &i in bin {
                        if let Some(stop) = opts.early_stop {
                            if t < stop {
                                break;
                            }
                        }
                        let view = &prepared.views[i];
                        let Some(hit) = intersect_prepared(view, px, py, &kernel) else { continue };
                        let a = (view.alpha * hit.ghat).min(0.999_999);
                        if a < opts.alpha_min {
                            continue;
                        }
                        if contribs.len() >= opts.max_contributions {
                            overflowed = true;
                            break;
                        }
                        let weight = t * a;
                        for c in 0..3 {
                            color[c] += weight * view.color[c];
                        }
                        // Flip each normal toward the camera before blending.
                        let ray = camera.ray_dir_cam(px, py);
                        let flip = if view.normal_cam.dot(&ray) > 0.0 { -1.0 } else { 1.0 };
                        normal[0] += weight * flip * view.normal_cam.x;
                        normal[1] += weight * flip * view.normal_cam.y;
                        normal[2] += weight * flip * view.normal_cam.z;
                        sum_w += weight;
                        sum_wz += weight * hit.z;
                        // Median depth: the deepest sample still reached with
                        // transmittance above one half.
                        if t > 0.5 {
                            median = median.max(hit.z);
                        }
                        last_z = hit.z;
                        contribs.push(Contribution {
                            surfel_id: set.surfels[i].id,
                            weight,
                            trans: t,
                            z: hit.z,
                            u: hit.u,
                            v: hit.v,
                        });
                        t *= 1.0 - a;
                    }
                    for c in 0..3 {
                        color[c] += t * opts.background[c];
                    }
                    let depth_mean = sum_wz / (sum_w + 1e-6);
                    let depth_median = if sum_w < 0.5 { last_z } else { median };
                    if !opts.retain_contributions {
                        contribs.clear();
                    }
                    out.push(TilePixel {
                        color,
                        depth_mean,
                        depth_median,
                        accum: sum_w,
                        normal,
                        contribs,
                        overflowed,
                    });
                }
            }
            out
        })
        .collect();

    let mut outputs = RenderOutputs {
        color: Image3::zeros(w, h),
        depth_mean: Image1::zeros(w, h),
        depth_median: Image1::zeros(w, h),
        accum: Image1::zeros(w, h),
        normal_splat: Image3::zeros(w, h),
        per_pixel: vec![Vec::new(); w * h],
        overflow: 0,
    };
    for (tile, pixels) in tile_results.into_iter().enumerate() {
        let tx = tile % tiles_x;
        let ty = tile / tiles_x;
        let x0 = tx * ts;
        let y0 = ty * ts;
        let x1 = (x0 + ts).min(w);
        let mut it = pixels.into_iter();
        for iy in y0..((ty * ts + ts).min(h)) {
            for ix in x0..x1 {
                let p = it.next().expect("tile pixel count mismatch");
                outputs.color.set(ix, iy, p.color);
                outputs.depth_mean.set(ix, iy, p.depth_mean);
                outputs.depth_median.set(ix, iy, p.depth_median);
                outputs.accum.set(ix, iy, p.accum);
                outputs.normal_splat.set(ix, iy, p.normal);
                outputs.per_pixel[iy * w + ix] = p.contribs;
                outputs.overflow += p.overflowed as usize;
            }
        }
    }
    Ok(outputs)
}

/// Records, for every view and every surfel, the pixels whose ray-splat test
/// succeeds, independent of opacity and occlusion, together with the
/// surfel's view-dependent color. Surfels touching no pixel in a view are
/// omitted from that view's list.
pub fn footprint_pass(
    set: &SurfelSet,
    cameras: &[Camera],
    opts: &RenderOptions,
) -> Vec<Vec<FootprintRecord>> {
    let kernel = opts.kernel();
    let margin = opts.bbox_margin();
    cameras
        .par_iter()
        .enumerate()
        .map(|(view_idx, camera)| {
            let (w, h) = (camera.width, camera.height);
            let mut records = Vec::new();
            for surfel in &set.surfels {
                let view = splat_view(surfel, camera, set.active_sh_degree, opts.near_clip);
                if view.center_depth <= opts.near_clip {
                    continue;
                }
                let bbox = screen_bbox(surfel, camera, opts.cutoff, opts.near_clip, margin)
                    .unwrap_or((0.0, 0.0, w as f64, h as f64));
                let ix0 = bbox.0.floor().max(0.0) as usize;
                let iy0 = bbox.1.floor().max(0.0) as usize;
                if bbox.2 < 0.0 || bbox.3 < 0.0 || bbox.0 >= w as f64 || bbox.1 >= h as f64 {
                    continue;
                }
                let ix1 = (bbox.2.ceil() as usize).min(w - 1);
                let iy1 = (bbox.3.ceil() as usize).min(h - 1);
                let mut pixels = Vec::new();
                for iy in iy0..=iy1 {
                    for ix in ix0..=ix1 {
                        let (px, py) = (ix as f64 + 0.5, iy as f64 + 0.5);
                        if intersect_prepared(&view, px, py, &kernel).is_some() {
                            pixels.push((ix as u32, iy as u32));
                        }
                    }
                }
                if !pixels.is_empty() {
                    records.push(FootprintRecord {
                        surfel_id: surfel.id,
                        view: view_idx,
                        pixels,
                        color: view.color,
                    });
                }
            }
            records
        })
        .collect()
}
