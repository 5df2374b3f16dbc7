//! The 256-case marching-cubes triangulation table.
//!
//! Corner and edge numbering follow the usual convention (corner 0 at the
//! cube origin, corners 0-3 on the bottom face counterclockwise, 4-7 above
//! them; edges 0-3 bottom, 4-7 top, 8-11 vertical). Rather than embedding
//! four kilobytes of literals, the table is generated once on first use by
//! slicing each sign configuration's isosurface loops out of the cube faces:
//! every face contributes segments between its sign-crossing edges (the
//! ambiguous all-alternating face always wraps its *inside* corners, so two
//! cells sharing a face always cut it the same way and the surface stays
//! crack-free), the segments chain into closed loops, and each loop is
//! fan-triangulated with the winding chosen so right-hand normals point from
//! inside (below the iso value) to outside.

use std::sync::LazyLock;

/// Corner index pairs for the 12 cube edges.
pub const EDGE_CORNERS: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Unit-cube positions of the 8 corners.
pub const CORNER_POS: [[f64; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
    [0.0, 1.0, 1.0],
];

/// The six faces as corner cycles.
const FACES: [[usize; 4]; 6] = [
    [0, 1, 2, 3],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [3, 2, 6, 7],
    [0, 3, 7, 4],
    [1, 2, 6, 5],
];

/// `TRI_TABLE[mask]` lists the triangles (as triples of cut-edge indices)
/// for the configuration where bit `c` of `mask` marks corner `c` as inside.
pub static TRI_TABLE: LazyLock<[Vec<[usize; 3]>; 256]> =
    LazyLock::new(|| std::array::from_fn(|mask| triangulate_case(mask as u8)));

fn edge_between(a: usize, b: usize) -> usize {
    EDGE_CORNERS
        .iter()
        .position(|&(u, v)| (u, v) == (a, b) || (u, v) == (b, a))
        .expect("corner pair is a cube edge")
}

fn edge_midpoint(e: usize) -> [f64; 3] {
    let (a, b) = EDGE_CORNERS[e];
    std::array::from_fn(|i| 0.5 * (CORNER_POS[a][i] + CORNER_POS[b][i]))
}

/// Gradient of the trilinear interpolant of `values` at point `p`.
fn trilinear_gradient(values: &[f64; 8], p: [f64; 3]) -> [f64; 3] {
    let mut g = [0.0; 3];
    for (c, v) in values.iter().enumerate() {
        let w = |axis: usize| {
            if CORNER_POS[c][axis] == 1.0 {
                p[axis]
            } else {
                1.0 - p[axis]
            }
        };
        let dw = |axis: usize| if CORNER_POS[c][axis] == 1.0 { 1.0 } else { -1.0 };
        g[0] += v * dw(0) * w(1) * w(2);
        g[1] += v * w(0) * dw(1) * w(2);
        g[2] += v * w(0) * w(1) * dw(2);
    }
    g
}

fn triangulate_case(mask: u8) -> Vec<[usize; 3]> {
    let inside = |c: usize| mask >> c & 1 == 1;

    // Segments between cut edges, face by face.
    let mut adjacency: [Vec<usize>; 12] = Default::default();
    let mut push = |a: usize, b: usize| {
        adjacency[a].push(b);
        adjacency[b].push(a);
    };
    for face in FACES {
        let cut_after: [Option<usize>; 4] = std::array::from_fn(|k| {
            let (a, b) = (face[k], face[(k + 1) % 4]);
            (inside(a) != inside(b)).then(|| edge_between(a, b))
        });
        match cut_after.iter().flatten().count() {
            0 => {}
            2 => {
                let pair: Vec<usize> = cut_after.iter().flatten().copied().collect();
                push(pair[0], pair[1]);
            }
            4 => {
                // Signs alternate around the face: wrap each inside corner so
                // the two inside corners end up separated.
                for k in 0..4 {
                    if inside(face[k]) {
                        push(cut_after[(k + 3) % 4].unwrap(), cut_after[k].unwrap());
                    }
                }
            }
            _ => unreachable!("a 4-cycle has an even number of sign changes"),
        }
    }

    // Every cut edge has exactly two segment partners, so the segments form
    // disjoint closed loops.
    let values: [f64; 8] = std::array::from_fn(|c| if inside(c) { -1.0 } else { 1.0 });
    let mut used = [false; 12];
    let mut triangles = Vec::new();
    for start in 0..12 {
        if used[start] || adjacency[start].is_empty() {
            continue;
        }
        let mut ring = vec![start];
        used[start] = true;
        let mut cur = start;
        while let Some(&next) = adjacency[cur].iter().find(|&&e| !used[e]) {
            used[next] = true;
            ring.push(next);
            cur = next;
        }
        debug_assert!(ring.len() >= 3, "isosurface loops have at least 3 edges");

        // Orient the loop so its normal points toward increasing values
        // (inside -> outside), judged by the trilinear gradient at the loop
        // centroid of the representative +-1 corner field.
        let points: Vec<[f64; 3]> = ring.iter().map(|&e| edge_midpoint(e)).collect();
        let mut normal = [0.0; 3];
        for (i, p) in points.iter().enumerate() {
            let q = points[(i + 1) % points.len()];
            normal[0] += (p[1] - q[1]) * (p[2] + q[2]);
            normal[1] += (p[2] - q[2]) * (p[0] + q[0]);
            normal[2] += (p[0] - q[0]) * (p[1] + q[1]);
        }
        let mut centroid = [0.0; 3];
        for p in &points {
            for i in 0..3 {
                centroid[i] += p[i] / points.len() as f64;
            }
        }
        let gradient = trilinear_gradient(&values, centroid);
        let align: f64 = (0..3).map(|i| normal[i] * gradient[i]).sum();
        assert!(
            align.abs() > 1e-9,
            "degenerate loop orientation for case {mask:#010b}"
        );
        if align < 0.0 {
            ring.reverse();
        }
        for i in 1..ring.len() - 1 {
            triangles.push([ring[0], ring[i], ring[i + 1]]);
        }
    }
    triangles
}
