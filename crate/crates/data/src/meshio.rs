//! Binary little-endian PLY mesh files.
//!
//! The writer emits a fixed layout — `vertex` with float `x, y, z` and
//! `face` with `list uchar int` indices — and the reader accepts exactly
//! that layout, rejecting anything else as unsupported. Vertices are stored
//! as `f32`, so a load -> save cycle of a written file is byte-identical.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::BufRead;
use std::path::Path;

use surfelsplat_geom::Mesh;

use crate::DataError;

/// Writes `mesh` to `path` in binary little-endian PLY.
pub fn save_ply(mesh: &Mesh, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::with_capacity(
        128 + mesh.vertices.len() * 12 + mesh.triangles.len() * 13,
    );
    buf.extend_from_slice(
        format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
             property float x\nproperty float y\nproperty float z\n\
             element face {}\nproperty list uchar int vertex_indices\nend_header\n",
            mesh.vertices.len(),
            mesh.triangles.len()
        )
        .as_bytes(),
    );
    for v in &mesh.vertices {
        for &coord in v {
            buf.write_f32::<LittleEndian>(coord as f32).expect("vec write");
        }
    }
    for t in &mesh.triangles {
        buf.push(3);
        for &idx in t {
            buf.write_i32::<LittleEndian>(idx as i32).expect("vec write");
        }
    }
    std::fs::write(path, buf).map_err(DataError::io(path))
}

/// Reads a binary little-endian PLY written by [`save_ply`] (or any file
/// with the same fixed layout).
pub fn load_ply(path: impl AsRef<Path>) -> Result<Mesh, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(DataError::io(path))?;
    let mut lines = bytes.lines();
    let mut header_len = 0usize;
    let mut next_line = |header_len: &mut usize| -> Result<String, DataError> {
        let line = lines
            .next()
            .ok_or_else(|| DataError::UnsupportedPly("header ended before end_header".into()))?
            .map_err(DataError::io(path))?;
        *header_len += line.len() + 1;
        Ok(line)
    };

    if next_line(&mut header_len)?.trim() != "ply" {
        return Err(DataError::UnsupportedPly("missing ply signature".into()));
    }
    if next_line(&mut header_len)?.trim() != "format binary_little_endian 1.0" {
        return Err(DataError::UnsupportedPly(
            "only binary_little_endian 1.0 is supported".into(),
        ));
    }
    let mut n_vertices: Option<usize> = None;
    let mut n_faces: Option<usize> = None;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current = None;
    loop {
        let line = next_line(&mut header_len)?;
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        if line.starts_with("comment") {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("element") => {
                let name = parts.next().unwrap_or_default().to_string();
                let count: usize = parts
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| DataError::UnsupportedPly(format!("bad element line {line:?}")))?;
                match name.as_str() {
                    "vertex" => n_vertices = Some(count),
                    "face" => n_faces = Some(count),
                    other => {
                        return Err(DataError::UnsupportedPly(format!(
                            "unsupported element {other:?}"
                        )))
                    }
                }
                current = Some(name);
            }
            Some("property") => match current.as_deref() {
                Some("vertex") => vertex_props.push(line.to_string()),
                Some("face") => {
                    if line != "property list uchar int vertex_indices"
                        && line != "property list uchar int32 vertex_index"
                        && line != "property list uchar int vertex_index"
                    {
                        return Err(DataError::UnsupportedPly(format!(
                            "unsupported face property {line:?}"
                        )));
                    }
                }
                _ => return Err(DataError::UnsupportedPly(format!("property before element: {line:?}"))),
            },
            _ => return Err(DataError::UnsupportedPly(format!("unrecognized header line {line:?}"))),
        }
    }
    if vertex_props != ["property float x", "property float y", "property float z"] {
        return Err(DataError::UnsupportedPly(format!(
            "unsupported vertex layout {vertex_props:?} (expected float x, y, z)"
        )));
    }
    let n_vertices = n_vertices.ok_or_else(|| DataError::UnsupportedPly("no vertex element".into()))?;
    let n_faces = n_faces.ok_or_else(|| DataError::UnsupportedPly("no face element".into()))?;

    let mut body = &bytes[header_len..];
    let need = n_vertices * 12 + n_faces * 13;
    if body.len() < need {
        return Err(DataError::UnsupportedPly(format!(
            "body holds {} bytes, layout needs {need}",
            body.len()
        )));
    }
    let mut mesh = Mesh::default();
    mesh.vertices.reserve(n_vertices);
    for _ in 0..n_vertices {
        let mut v = [0.0f64; 3];
        for slot in &mut v {
            *slot = body.read_f32::<LittleEndian>().expect("sized") as f64;
        }
        mesh.vertices.push(v);
    }
    mesh.triangles.reserve(n_faces);
    for _ in 0..n_faces {
        let n = body.read_u8().expect("sized");
        if n != 3 {
            return Err(DataError::UnsupportedPly(format!("face with {n} vertices (expected 3)")));
        }
        let mut t = [0u32; 3];
        for slot in &mut t {
            let idx = body.read_i32::<LittleEndian>().expect("sized");
            if idx < 0 || idx as usize >= n_vertices {
                return Err(DataError::UnsupportedPly(format!(
                    "face index {idx} out of range (vertices: {n_vertices})"
                )));
            }
            *slot = idx as u32;
        }
        mesh.triangles.push(t);
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_mesh() -> Mesh {
        Mesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.25, -0.5],
                [0.125, 1.0, 0.75],
                [-0.375, 0.5, 1.0],
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ply");
        let p2 = dir.path().join("b.ply");
        save_ply(&sample_mesh(), &p1).unwrap();
        let back = load_ply(&p1).unwrap();
        save_ply(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // The sample vertices are exactly representable, so values survive.
        assert_eq!(back.vertices, sample_mesh().vertices);
        assert_eq!(back.triangles, sample_mesh().triangles);
    }

    #[test]
    fn vertices_round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = Mesh {
            vertices: vec![[0.1, 0.2, 0.3], [std::f64::consts::PI, -1.0 / 3.0, 1e-7]],
            triangles: vec![[0, 1, 0]],
        };
        let path = dir.path().join("c.ply");
        save_ply(&mesh, &path).unwrap();
        let back = load_ply(&path).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&back.vertices) {
            for k in 0..3 {
                assert_eq!(a[k] as f32 as f64, b[k]);
            }
        }
    }

    #[test]
    fn ascii_and_foreign_layouts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ascii = dir.path().join("ascii.ply");
        std::fs::write(&ascii, "ply\nformat ascii 1.0\nelement vertex 0\nend_header\n").unwrap();
        assert!(matches!(load_ply(&ascii).unwrap_err(), DataError::UnsupportedPly(_)));

        let doubles = dir.path().join("doubles.ply");
        std::fs::write(
            &doubles,
            "ply\nformat binary_little_endian 1.0\nelement vertex 1\n\
             property double x\nproperty double y\nproperty double z\n\
             element face 0\nproperty list uchar int vertex_indices\nend_header\n",
        )
        .unwrap();
        let msg = load_ply(&doubles).unwrap_err().to_string();
        assert!(msg.contains("vertex layout"), "{msg}");
    }

    #[test]
    fn truncated_bodies_and_bad_indices_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ply");
        save_ply(&sample_mesh(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ply");
        std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_ply(&cut).unwrap_err().to_string().contains("body holds"));

        let bad = Mesh { vertices: sample_mesh().vertices, triangles: vec![[0, 1, 9]] };
        let bad_path = dir.path().join("bad.ply");
        save_ply(&bad, &bad_path).unwrap();
        assert!(load_ply(&bad_path).unwrap_err().to_string().contains("out of range"));
    }

    #[test]
    fn empty_meshes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        save_ply(&Mesh::default(), &path).unwrap();
        let back = load_ply(&path).unwrap();
        assert!(back.vertices.is_empty() && back.triangles.is_empty());
    }
}
