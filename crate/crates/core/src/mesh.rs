//! Triangle meshes with fixed connectivity.
//!
//! Vertex positions are the optimisable state; faces are set once at
//! construction and never change afterwards. Every vertex edit bumps a
//! revision counter so spatial indices can detect that they are stale.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::spatial::Octree;

/// Minimum triangle area (scene units squared) accepted at load time.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// Voronoi region of a triangle that contains a query point.
///
/// Edges are numbered `0 = (a, b)`, `1 = (b, c)`, `2 = (c, a)` and vertices
/// `0 = a`, `1 = b`, `2 = c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Face,
    Edge(u8),
    Vertex(u8),
}

impl Region {
    /// Local corner indices of the edge `k`.
    pub fn edge_corners(k: u8) -> (usize, usize) {
        match k {
            0 => (0, 1),
            1 => (1, 2),
            _ => (2, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPointResult {
    /// Nearest point `p'` on the mesh.
    pub point: Vec3,
    pub face_id: usize,
    pub barycentric: [f64; 3],
    pub region: Region,
    pub distance: f64,
    /// Distance with the sign of `dot(p - p', pseudo_normal)`. Equal to
    /// `distance` for results that were never signed.
    pub signed_distance: f64,
}

/// Derivatives of the point-to-triangle distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceJacobians {
    pub d_point: Vec3,
    pub d_vertices: [Vec3; 3],
    /// Set when the distance was too small for a gradient; all derivatives
    /// are then zero.
    pub degenerate: bool,
}

fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Exact closest point on the closed triangle `(a, b, c)` to `p`.
///
/// `face_id` of the result is 0 and the distance is unsigned.
pub fn closest_point_on_triangle(
    p: &Vec3,
    a: &Vec3,
    b: &Vec3,
    c: &Vec3,
) -> Result<ClosestPointResult> {
    let area = triangle_area(a, b, c);
    if !(area > MIN_TRIANGLE_AREA) {
        return Err(Error::DegenerateTriangle { area });
    }
    Ok(closest_point_unchecked(p, a, b, c))
}

/// Closest-point query without the degeneracy check. Collapsed triangles
/// fall back to the nearest of their edges.
pub(crate) fn closest_point_unchecked(
    p: &Vec3,
    a: &Vec3,
    b: &Vec3,
    c: &Vec3,
) -> ClosestPointResult {
    let (bary, region) = closest_barycentric(p, a, b, c);
    let point = a * bary[0] + b * bary[1] + c * bary[2];
    let distance = (p - point).norm();
    ClosestPointResult {
        point,
        face_id: 0,
        barycentric: bary,
        region,
        distance,
        signed_distance: distance,
    }
}

fn closest_barycentric(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> ([f64; 3], Region) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ([1.0, 0.0, 0.0], Region::Vertex(0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return ([0.0, 1.0, 0.0], Region::Vertex(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return ([1.0 - v, v, 0.0], Region::Edge(0));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return ([0.0, 0.0, 1.0], Region::Vertex(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return ([1.0 - w, 0.0, w], Region::Edge(2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return ([0.0, 1.0 - w, w], Region::Edge(1));
    }
    let sum = va + vb + vc;
    if sum <= f64::MIN_POSITIVE * 1e3 {
        return closest_on_edges(p, a, b, c);
    }
    let denom = 1.0 / sum;
    let v = vb * denom;
    let w = vc * denom;
    ([1.0 - v - w, v, w], Region::Face)
}

fn closest_on_edges(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> ([f64; 3], Region) {
    let corners = [a, b, c];
    let mut best = ([1.0, 0.0, 0.0], Region::Vertex(0));
    let mut best_d2 = (p - a).norm_squared();
    for k in 0..3u8 {
        let (i, j) = Region::edge_corners(k);
        let (u, v) = (corners[i], corners[j]);
        let e = v - u;
        let len2 = e.norm_squared();
        let t = if len2 > 0.0 {
            ((p - u).dot(&e) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let d2 = (p - (u + e * t)).norm_squared();
        if d2 < best_d2 {
            best_d2 = d2;
            let mut bary = [0.0; 3];
            bary[i] = 1.0 - t;
            bary[j] = t;
            let region = if t == 0.0 {
                Region::Vertex(i as u8)
            } else if t == 1.0 {
                Region::Vertex(j as u8)
            } else {
                Region::Edge(k)
            };
            best = (bary, region);
        }
    }
    best
}

/// Derivatives of `d = |p - p'|` with respect to the query point and the
/// three triangle corners.
///
/// `p'` minimises the distance over the triangle, so by the envelope
/// argument only the explicit dependence through the barycentric
/// combination survives: `dd/dv_i = -w_i (p - p') / d`. The active region is
/// held fixed; inactive corners have zero weight.
pub fn closest_point_jacobians(p: &Vec3, result: &ClosestPointResult) -> DistanceJacobians {
    let diff = p - result.point;
    let d = diff.norm();
    if d <= 1e-9 {
        return DistanceJacobians {
            d_point: Vec3::zeros(),
            d_vertices: [Vec3::zeros(); 3],
            degenerate: true,
        };
    }
    let n = diff / d;
    let w = result.barycentric;
    DistanceJacobians {
        d_point: n,
        d_vertices: [-n * w[0], -n * w[1], -n * w[2]],
        degenerate: false,
    }
}

#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    adjacency: Vec<Vec<usize>>,
    vertex_faces: Vec<Vec<usize>>,
    edge_faces: HashMap<(usize, usize), Vec<usize>>,
    revision: u64,
}

impl TriangleMesh {
    /// Builds a mesh and its cached adjacency. Faces must reference valid,
    /// distinct vertices and have area above [`MIN_TRIANGLE_AREA`].
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (f, face) in faces.iter().enumerate() {
            if face.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {f} references a vertex out of range (n_v = {n})"
                )));
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {f} repeats a vertex index: {face:?}"
                )));
            }
        }
        if let Some(v) = vertices
            .iter()
            .position(|v| !v.iter().all(|x| x.is_finite()))
        {
            return Err(Error::InvalidMesh(format!("vertex {v} is not finite")));
        }
        let mut mesh = Self {
            vertices,
            faces,
            adjacency: Vec::new(),
            vertex_faces: Vec::new(),
            edge_faces: HashMap::new(),
            revision: 0,
        };
        mesh.validate_triangles()?;
        mesh.build_topology();
        Ok(mesh)
    }

    fn build_topology(&mut self) {
        let n = self.vertices.len();
        let mut adjacency = vec![Vec::new(); n];
        let mut vertex_faces = vec![Vec::new(); n];
        let mut edge_faces: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (f, face) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let (i, j) = (face[k], face[(k + 1) % 3]);
                adjacency[i].push(j);
                adjacency[j].push(i);
                vertex_faces[face[k]].push(f);
                edge_faces.entry((i.min(j), i.max(j))).or_default().push(f);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        self.adjacency = adjacency;
        self.vertex_faces = vertex_faces;
        self.edge_faces = edge_faces;
    }

    /// Checks every triangle against [`MIN_TRIANGLE_AREA`].
    pub fn validate_triangles(&self) -> Result<()> {
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            let area = triangle_area(&a, &b, &c);
            if !(area > MIN_TRIANGLE_AREA) {
                return Err(Error::InvalidMesh(format!(
                    "face {f} is degenerate (area {area:e})"
                )));
            }
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn neighbors(&self, vertex: usize) -> &[usize] {
        &self.adjacency[vertex]
    }

    pub fn incident_faces(&self, vertex: usize) -> &[usize] {
        &self.vertex_faces[vertex]
    }

    /// Faces sharing the undirected edge `(i, j)`.
    pub fn edge_faces(&self, i: usize, j: usize) -> &[usize] {
        self.edge_faces
            .get(&(i.min(j), i.max(j)))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Incremented on every vertex edit.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Mutable access to vertex positions. Bumps the revision.
    pub fn vertices_mut(&mut self) -> &mut [Vec3] {
        self.revision += 1;
        &mut self.vertices
    }

    pub fn set_vertices(&mut self, vertices: Vec<Vec3>) -> Result<()> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        self.vertices = vertices;
        self.revision += 1;
        Ok(())
    }

    #[inline]
    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        let [i, j, k] = self.faces[face];
        [self.vertices[i], self.vertices[j], self.vertices[k]]
    }

    pub fn bounding_box(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }

    /// Unit normal `normalize((b - a) x (c - a))` following the winding order.
    pub fn face_normal(&self, face: usize) -> Result<Vec3> {
        let [a, b, c] = self.triangle(face);
        let n = (b - a).cross(&(c - a));
        let area = 0.5 * n.norm();
        if !(area > MIN_TRIANGLE_AREA) {
            return Err(Error::DegenerateTriangle { area });
        }
        Ok(n / (2.0 * area))
    }

    fn face_normal_or_zero(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.triangle(face);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::zeros()
        }
    }

    /// Interior angle of `face` at its local corner `corner`.
    fn corner_angle(&self, face: usize, corner: usize) -> f64 {
        let tri = self.triangle(face);
        let u = tri[(corner + 1) % 3] - tri[corner];
        let v = tri[(corner + 2) % 3] - tri[corner];
        let denom = u.norm() * v.norm();
        if denom == 0.0 {
            return 0.0;
        }
        (u.dot(&v) / denom).clamp(-1.0, 1.0).acos()
    }

    /// Angle-weighted pseudo-normal of the mesh element nearest to a query.
    ///
    /// Face interiors use the face normal, edges the normalised average of
    /// the (one or two) incident face normals, vertices the incident face
    /// normals weighted by their corner angles.
    pub fn pseudo_normal(&self, closest: &ClosestPointResult) -> Vec3 {
        let face = closest.face_id;
        let n = match closest.region {
            Region::Face => return self.face_normal_or_zero(face),
            Region::Edge(k) => {
                let (ci, cj) = Region::edge_corners(k);
                let f = self.faces[face];
                self.edge_faces(f[ci], f[cj])
                    .iter()
                    .fold(Vec3::zeros(), |acc, &g| {
                        acc + self.face_normal_or_zero(g) * PI
                    })
            }
            Region::Vertex(k) => {
                let v = self.faces[face][k as usize];
                self.vertex_faces[v].iter().fold(Vec3::zeros(), |acc, &g| {
                    let corner = self.faces[g].iter().position(|&x| x == v).unwrap_or(0);
                    acc + self.face_normal_or_zero(g) * self.corner_angle(g, corner)
                })
            }
        };
        let len = n.norm();
        if len > 1e-300 {
            n / len
        } else {
            self.face_normal_or_zero(face)
        }
    }

    /// Nearest point by scanning every triangle. Used as a reference for the
    /// octree and by tiny meshes where building an index is not worth it.
    pub fn closest_point_brute_force(&self, p: &Vec3) -> Result<ClosestPointResult> {
        if self.faces.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let mut best: Option<ClosestPointResult> = None;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            let mut r = closest_point_unchecked(p, &a, &b, &c);
            r.face_id = f;
            if best.is_none_or(|b| r.distance < b.distance) {
                best = Some(r);
            }
        }
        Ok(best.expect("non-empty mesh"))
    }

    /// Applies the pseudo-normal sign to an unsigned result in place.
    pub fn apply_sign(&self, p: &Vec3, closest: &mut ClosestPointResult) {
        let n = self.pseudo_normal(closest);
        let side = (p - closest.point).dot(&n);
        closest.signed_distance = if side < 0.0 {
            -closest.distance
        } else {
            closest.distance
        };
    }

    /// `delta_i = v_i - mean(v_j for j in N(i))`. Isolated vertices get zero.
    pub fn laplacian_deltas(&self) -> Vec<Vec3> {
        let mut isolated = 0usize;
        let deltas = self
            .vertices
            .iter()
            .zip(&self.adjacency)
            .map(|(v, nbrs)| {
                if nbrs.is_empty() {
                    isolated += 1;
                    return Vec3::zeros();
                }
                let mean = nbrs
                    .iter()
                    .fold(Vec3::zeros(), |acc, &j| acc + self.vertices[j])
                    / nbrs.len() as f64;
                v - mean
            })
            .collect();
        if isolated > 0 {
            log::warn!(
                "{isolated} isolated vertices have no neighbours; their Laplacian delta is zero"
            );
        }
        deltas
    }

    /// Subdivided icosahedron projected onto a sphere. Subdivision level 3
    /// gives 642 vertices, level 4 gives 2562.
    pub fn icosphere(subdivisions: u32, radius: f64) -> Self {
        let t = (1.0 + 5.0f64.sqrt()) / 2.0;
        let mut vertices: Vec<Vec3> = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
            let mut mid = |i: usize, j: usize, vertices: &mut Vec<Vec3>| -> usize {
                *midpoints.entry((i.min(j), i.max(j))).or_insert_with(|| {
                    vertices.push(((vertices[i] + vertices[j]) * 0.5).normalize());
                    vertices.len() - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for &[a, b, c] in &faces {
                let ab = mid(a, b, &mut vertices);
                let bc = mid(b, c, &mut vertices);
                let ca = mid(c, a, &mut vertices);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        for v in &mut vertices {
            *v *= radius;
        }
        Self::new(vertices, faces).expect("icosphere is well formed")
    }
}

/// Signed distance from `p` to the mesh through the octree.
///
/// The sign is that of `dot(p - p', n)` where `n` is the pseudo-normal at
/// the nearest element; exactly zero counts as positive.
pub fn signed_distance(
    mesh: &TriangleMesh,
    index: &Octree,
    p: &Vec3,
) -> Result<ClosestPointResult> {
    if mesh.face_count() == 0 {
        return Err(Error::EmptyMesh);
    }
    let mut r = index
        .nearest_triangle(mesh, p, None)?
        .ok_or(Error::EmptyMesh)?;
    mesh.apply_sign(p, &mut r);
    Ok(r)
}
