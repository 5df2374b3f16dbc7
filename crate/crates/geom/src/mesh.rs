//! Triangle meshes, surface sampling and Chamfer/F-score evaluation.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashMap;

use crate::GeomError;

#[derive(Debug, Clone, Default)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        for (i, v) in self.vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(GeomError::InvalidMesh(format!("vertex {i} is not finite")));
            }
        }
        let n = self.vertices.len() as u32;
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&vi| vi >= n) {
                return Err(GeomError::InvalidMesh(format!("triangle {i} indexes out of range")));
            }
        }
        Ok(())
    }

    fn triangle(&self, t: [u32; 3]) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        (
            Vector3::from(self.vertices[t[0] as usize]),
            Vector3::from(self.vertices[t[1] as usize]),
            Vector3::from(self.vertices[t[2] as usize]),
        )
    }

    fn triangle_area(&self, t: [u32; 3]) -> f64 {
        let (a, b, c) = self.triangle(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn total_area(&self) -> f64 {
        self.triangles.iter().map(|&t| self.triangle_area(t)).sum()
    }

    /// Uniform area-weighted surface samples (deterministic per seed).
    pub fn sample_points(&self, n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for &t in &self.triangles {
            total += self.triangle_area(t);
            cumulative.push(total);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(n);
        if total <= 0.0 {
            return points;
        }
        for _ in 0..n {
            let target = rng.random_range(0.0..total);
            let idx = cumulative.partition_point(|&c| c < target).min(self.triangles.len() - 1);
            let (a, b, c) = self.triangle(self.triangles[idx]);
            // Square-root trick for uniform barycentric sampling.
            let r1 = rng.random_range(0.0..1.0f64).sqrt();
            let r2 = rng.random_range(0.0..1.0f64);
            points.push(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
        }
        points
    }
}

/// Uniform-grid spatial hash for nearest-neighbor distance queries.
struct GridIndex {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
    points: Vec<Vector3<f64>>,
    key_min: (i64, i64, i64),
    key_max: (i64, i64, i64),
}

impl GridIndex {
    fn build(points: Vec<Vector3<f64>>, cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        let mut key_min = (i64::MAX, i64::MAX, i64::MAX);
        let mut key_max = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = Self::key(p, cell);
            key_min = (key_min.0.min(k.0), key_min.1.min(k.1), key_min.2.min(k.2));
            key_max = (key_max.0.max(k.0), key_max.1.max(k.1), key_max.2.max(k.2));
            cells.entry(k).or_default().push(i);
        }
        Self { cell, cells, points, key_min, key_max }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Distance to the nearest stored point, by expanding shell search.
    fn nearest_distance(&self, q: &Vector3<f64>) -> f64 {
        if self.points.is_empty() {
            return f64::INFINITY;
        }
        let (cx, cy, cz) = Self::key(q, self.cell);
        // Once the shell radius covers the whole occupied key box, every
        // stored point has been compared.
        let reach = |c: i64, lo: i64, hi: i64| (c - lo).abs().max((hi - c).abs());
        let max_ring = reach(cx, self.key_min.0, self.key_max.0)
            .max(reach(cy, self.key_min.1, self.key_max.1))
            .max(reach(cz, self.key_min.2, self.key_max.2));
        let mut best = f64::INFINITY;
        let visit = |dx: i64, dy: i64, dz: i64, best: &mut f64| {
            if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                for &i in bucket {
                    *best = best.min((self.points[i] - q).norm());
                }
            }
        };
        for ring in 0..=max_ring {
            // Any point in shell `ring` or beyond is at least
            // `(ring - 1) * cell` away, so a smaller best is final.
            if best <= (ring - 1).max(0) as f64 * self.cell {
                break;
            }
            if ring == 0 {
                visit(0, 0, 0, &mut best);
                continue;
            }
            // Exactly the cells of the hollow shell: two full caps plus the
            // four side bands.
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    visit(dx, dy, ring, &mut best);
                    visit(dx, dy, -ring, &mut best);
                }
                for dz in -(ring - 1)..=(ring - 1) {
                    visit(dx, ring, dz, &mut best);
                    visit(dx, -ring, dz, &mut best);
                }
            }
            for dy in -(ring - 1)..=(ring - 1) {
                for dz in -(ring - 1)..=(ring - 1) {
                    visit(ring, dy, dz, &mut best);
                    visit(-ring, dy, dz, &mut best);
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ChamferResult {
    /// Mean of the two directed mean nearest-neighbor distances.
    pub chamfer: f64,
    /// Fraction of `a` samples within `tau` of `b`.
    pub precision: f64,
    /// Fraction of `b` samples within `tau` of `a`.
    pub recall: f64,
    pub fscore: f64,
    pub tau: f64,
}

/// Samples both meshes (area-weighted, same seed for both so identical
/// meshes compare exactly equal) and reports Chamfer distance, precision,
/// recall and F-score at threshold `tau`.
pub fn chamfer_and_fscore(
    mesh_a: &Mesh,
    mesh_b: &Mesh,
    tau: f64,
    n_samples: usize,
    seed: u64,
) -> Result<ChamferResult, GeomError> {
    if mesh_a.is_empty() || mesh_b.is_empty() {
        return Err(GeomError::EmptyMesh);
    }
    let samples_a = mesh_a.sample_points(n_samples, seed);
    let samples_b = mesh_b.sample_points(n_samples, seed);
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(GeomError::EmptyMesh);
    }
    // Cell size on the order of the expected sample spacing keeps buckets
    // small without inflating the shell search.
    let spacing = |mesh: &Mesh, n: usize| (mesh.total_area() / n.max(1) as f64).sqrt();
    let cell_a = (spacing(mesh_a, n_samples) + spacing(mesh_b, n_samples)).max(1e-9);
    let index_a = GridIndex::build(samples_a.clone(), cell_a);
    let index_b = GridIndex::build(samples_b.clone(), cell_a);

    let distances_ab: Vec<f64> =
        samples_a.par_iter().map(|p| index_b.nearest_distance(p)).collect();
    let distances_ba: Vec<f64> =
        samples_b.par_iter().map(|p| index_a.nearest_distance(p)).collect();
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let within = |d: &[f64]| d.iter().filter(|&&x| x <= tau).count() as f64 / d.len() as f64;
    let precision = within(&distances_ab);
    let recall = within(&distances_ba);
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ChamferResult {
        chamfer: 0.5 * (mean(&distances_ab) + mean(&distances_ba)),
        precision,
        recall,
        fscore,
        tau,
    })
}
