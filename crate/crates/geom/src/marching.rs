//! Marching cubes over a fused TSDF volume.

use std::collections::HashMap;

use crate::mesh::Mesh;
use crate::tables::{EDGE_CORNERS, TRI_TABLE};
use crate::tsdf::TsdfVolume;

/// Extracts the `iso` level set with the standard 256-case table and linear
/// interpolation along cell edges. Only cells whose eight corners all carry
/// observation weight emit triangles; vertices are shared between cells, so
/// the mesh is watertight wherever the surface stays inside observed space.
pub fn marching_cubes(volume: &TsdfVolume, iso: f64) -> Mesh {
    let [nx, ny, nz] = volume.dims;
    let mut mesh = Mesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    // Lattice-point pair -> vertex id, so neighbors reuse cut vertices.
    let mut edge_vertices: HashMap<(usize, usize), u32> = HashMap::new();
    let corner_offset = |c: usize| -> [usize; 3] {
        let (a, b, z) = match c {
            0 => (0, 0, 0),
            1 => (1, 0, 0),
            2 => (1, 1, 0),
            3 => (0, 1, 0),
            4 => (0, 0, 1),
            5 => (1, 0, 1),
            6 => (1, 1, 1),
            _ => (0, 1, 1),
        };
        [a, b, z]
    };
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut mask = 0usize;
                let mut values = [0.0; 8];
                let mut point_ids = [0usize; 8];
                let mut observed = true;
                for c in 0..8 {
                    let [di, dj, dk] = corner_offset(c);
                    let idx = volume.index(i + di, j + dj, k + dk);
                    point_ids[c] = idx;
                    if volume.weight[idx] <= 0.0 {
                        observed = false;
                        break;
                    }
                    values[c] = volume.tsdf[idx];
                    if values[c] < iso {
                        mask |= 1 << c;
                    }
                }
                if !observed {
                    continue;
                }
                let triangles = &TRI_TABLE[mask];
                if triangles.is_empty() {
                    continue;
                }
                let mut cut_vertex = |edge: usize| -> u32 {
                    let (ca, cb) = EDGE_CORNERS[edge];
                    let key = (point_ids[ca].min(point_ids[cb]), point_ids[ca].max(point_ids[cb]));
                    *edge_vertices.entry(key).or_insert_with(|| {
                        let (va, vb) = (values[ca], values[cb]);
                        let t = if (vb - va).abs() < 1e-30 {
                            0.5
                        } else {
                            ((iso - va) / (vb - va)).clamp(0.0, 1.0)
                        };
                        let [dia, dja, dka] = corner_offset(ca);
                        let [dib, djb, dkb] = corner_offset(cb);
                        let pa = volume.point(i + dia, j + dja, k + dka);
                        let pb = volume.point(i + dib, j + djb, k + dkb);
                        let p = pa + t * (pb - pa);
                        mesh.vertices.push([p.x, p.y, p.z]);
                        (mesh.vertices.len() - 1) as u32
                    })
                };
                for tri in triangles {
                    let v = [cut_vertex(tri[0]), cut_vertex(tri[1]), cut_vertex(tri[2])];
                    if v[0] != v[1] && v[1] != v[2] && v[0] != v[2] {
                        mesh.triangles.push(v);
                    }
                }
            }
        }
    }
    mesh
}
