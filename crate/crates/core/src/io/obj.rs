//! Wavefront OBJ meshes. Polygons are fan-triangulated on load; only
//! positions and faces are kept.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::mesh::TriangleMesh;

pub fn parse_obj(text: &str) -> std::result::Result<TriangleMesh, String> {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let coords: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| format!("line {}: bad vertex coordinate: {e}", lineno + 1))?;
                if coords.len() != 3 {
                    return Err(format!(
                        "line {}: vertex needs three coordinates",
                        lineno + 1
                    ));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        let i: i64 = first
                            .parse()
                            .map_err(|_| format!("line {}: bad face index {t:?}", lineno + 1))?;
                        let n = vertices.len() as i64;
                        let resolved = if i > 0 { i - 1 } else { n + i };
                        if i == 0 || resolved < 0 || resolved >= n {
                            return Err(format!(
                                "line {}: face index {i} out of range",
                                lineno + 1
                            ));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<std::result::Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(format!(
                        "line {}: face with fewer than three vertices",
                        lineno + 1
                    ));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces).map_err(|e| e.to_string())
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text).map_err(|m| Error::parse(path, m))
}

pub fn format_obj(mesh: &TriangleMesh) -> String {
    let mut out = String::with_capacity(40 * (mesh.vertex_count() + mesh.face_count()));
    for v in mesh.vertices() {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in mesh.faces() {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    out
}

pub fn write_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    std::fs::write(path, format_obj(mesh)).map_err(|e| Error::io(path, e))
}
