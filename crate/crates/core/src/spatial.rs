//! Octree over mesh triangles.
//!
//! Two queries are served: exact nearest-triangle lookup (best-first descent
//! pruned by box distance) and conservative extraction of the ray intervals
//! that pass within a distance band of the surface, which the renderer uses
//! to skip empty space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Ray, Vec3};
use crate::mesh::{closest_point_unchecked, ClosestPointResult, TriangleMesh};

const NO_CHILD: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OctreeParams {
    pub max_depth: u32,
    pub max_leaf_triangles: usize,
    /// Root box margin as a fraction of the mesh bounding-box diagonal.
    pub margin: f64,
}

impl Default for OctreeParams {
    fn default() -> Self {
        Self {
            max_depth: 10,
            max_leaf_triangles: 16,
            margin: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Child node indices by octant; `u32::MAX` marks an empty octant.
    Internal { children: [u32; 8] },
    /// Range into the shared leaf triangle list.
    Leaf { start: u32, len: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OctreeNode {
    pub bounds: Aabb,
    pub kind: NodeKind,
}

#[derive(Debug, Clone)]
pub struct Octree {
    nodes: Vec<OctreeNode>,
    leaf_triangles: Vec<u32>,
    triangle_bounds: Vec<Aabb>,
    root_bounds: Aabb,
    params: OctreeParams,
    revision: u64,
}

impl Octree {
    pub fn build(mesh: &TriangleMesh, params: OctreeParams) -> Result<Self> {
        if mesh.face_count() == 0 {
            return Err(Error::EmptyMesh);
        }
        let bbox = mesh.bounding_box();
        let margin = params.margin * bbox.diagonal()
            + 1e-9 * (1.0 + bbox.max.amax().abs().max(bbox.min.amax().abs()));
        let root_bounds = bbox.expanded(margin);
        let triangle_bounds: Vec<Aabb> = (0..mesh.face_count())
            .map(|f| Aabb::from_points(&mesh.triangle(f)))
            .collect();

        let mut tree = Self {
            nodes: Vec::new(),
            leaf_triangles: Vec::new(),
            triangle_bounds,
            root_bounds,
            params,
            revision: mesh.revision(),
        };
        let all: Vec<u32> = (0..mesh.face_count() as u32).collect();
        tree.build_node(mesh, root_bounds, all, 0);
        Ok(tree)
    }

    fn build_node(
        &mut self,
        mesh: &TriangleMesh,
        bounds: Aabb,
        triangles: Vec<u32>,
        depth: u32,
    ) -> u32 {
        let index = self.nodes.len() as u32;
        if triangles.len() <= self.params.max_leaf_triangles || depth >= self.params.max_depth {
            let start = self.leaf_triangles.len() as u32;
            self.leaf_triangles.extend_from_slice(&triangles);
            self.nodes.push(OctreeNode {
                bounds,
                kind: NodeKind::Leaf {
                    start,
                    len: triangles.len() as u32,
                },
            });
            return index;
        }
        self.nodes.push(OctreeNode {
            bounds,
            kind: NodeKind::Internal {
                children: [NO_CHILD; 8],
            },
        });
        let mut children = [NO_CHILD; 8];
        for (octant, child) in children.iter_mut().enumerate() {
            let child_bounds = bounds.octant(octant);
            let inside: Vec<u32> = triangles
                .iter()
                .copied()
                .filter(|&t| {
                    let [a, b, c] = mesh.triangle(t as usize);
                    child_bounds.intersects_triangle(&a, &b, &c)
                })
                .collect();
            if !inside.is_empty() {
                *child = self.build_node(mesh, child_bounds, inside, depth + 1);
            }
        }
        self.nodes[index as usize].kind = NodeKind::Internal { children };
        index
    }

    pub fn nodes(&self) -> &[OctreeNode] {
        &self.nodes
    }

    pub fn root_bounds(&self) -> Aabb {
        self.root_bounds
    }

    pub fn params(&self) -> OctreeParams {
        self.params
    }

    /// Mesh revision the index was built at.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Triangle ids stored in a leaf node (empty for internal nodes).
    pub fn leaf_triangles(&self, node: usize) -> &[u32] {
        match self.nodes[node].kind {
            NodeKind::Leaf { start, len } => {
                &self.leaf_triangles[start as usize..(start + len) as usize]
            }
            NodeKind::Internal { .. } => &[],
        }
    }

    fn check_revision(&self, mesh: &TriangleMesh) -> Result<()> {
        if mesh.revision() != self.revision || mesh.face_count() != self.triangle_bounds.len() {
            return Err(Error::StaleIndex {
                index: self.revision,
                mesh: mesh.revision(),
            });
        }
        Ok(())
    }

    /// Nearest triangle to `p`, with an unsigned distance.
    ///
    /// With `upper_bound`, returns `None` when no triangle is strictly closer
    /// than the bound.
    pub fn nearest_triangle(
        &self,
        mesh: &TriangleMesh,
        p: &Vec3,
        upper_bound: Option<f64>,
    ) -> Result<Option<ClosestPointResult>> {
        self.check_revision(mesh)?;
        let mut best_d2 = upper_bound.map_or(f64::INFINITY, |u| u * u);
        let mut best: Option<ClosestPointResult> = None;
        let mut stack: Vec<(u32, f64)> =
            Vec::with_capacity(8 * (self.params.max_depth as usize + 1));
        // Points outside the root box still descend: the box distance only
        // orders the search.
        stack.push((0, self.nodes[0].bounds.distance_squared(p)));
        while let Some((node, d2)) = stack.pop() {
            if d2 >= best_d2 {
                continue;
            }
            match self.nodes[node as usize].kind {
                NodeKind::Leaf { start, len } => {
                    for &t in &self.leaf_triangles[start as usize..(start + len) as usize] {
                        if self.triangle_bounds[t as usize].distance_squared(p) >= best_d2 {
                            continue;
                        }
                        let [a, b, c] = mesh.triangle(t as usize);
                        let r = closest_point_unchecked(p, &a, &b, &c);
                        let rd2 = r.distance * r.distance;
                        if rd2 < best_d2 {
                            best_d2 = rd2;
                            best = Some(ClosestPointResult {
                                face_id: t as usize,
                                ..r
                            });
                        }
                    }
                }
                NodeKind::Internal { children } => {
                    let mut order: [(u32, f64); 8] = [(NO_CHILD, f64::INFINITY); 8];
                    let mut n = 0;
                    for &c in &children {
                        if c != NO_CHILD {
                            let cd2 = self.nodes[c as usize].bounds.distance_squared(p);
                            if cd2 < best_d2 {
                                order[n] = (c, cd2);
                                n += 1;
                            }
                        }
                    }
                    let order = &mut order[..n];
                    // farthest first so the nearest child is popped next
                    order.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
                    stack.extend_from_slice(order);
                }
            }
        }
        Ok(best)
    }

    /// Sorted, disjoint ray parameter intervals covering every `t >= 0`
    /// where the ray passes within `band` of the mesh. Intervals separated
    /// by less than `merge_gap` are fused.
    pub fn ray_active_intervals(
        &self,
        mesh: &TriangleMesh,
        ray: &Ray,
        band: f64,
        merge_gap: f64,
    ) -> Result<Vec<(f64, f64)>> {
        self.check_revision(mesh)?;
        if !(band > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "band must be positive, got {band}"
            )));
        }
        let mut raw: Vec<(f64, f64)> = Vec::new();
        let mut stack: Vec<u32> = vec![0];
        while let Some(node) = stack.pop() {
            let node = &self.nodes[node as usize];
            if node.bounds.expanded(band).ray_interval(ray).is_none() {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, len } => {
                    for &t in &self.leaf_triangles[start as usize..(start + len) as usize] {
                        if let Some(iv) = self.triangle_bounds[t as usize]
                            .expanded(band)
                            .ray_interval(ray)
                        {
                            raw.push(iv);
                        }
                    }
                }
                NodeKind::Internal { children } => {
                    stack.extend(children.iter().copied().filter(|&c| c != NO_CHILD));
                }
            }
        }
        raw.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(raw.len().min(8));
        for (t0, t1) in raw {
            match merged.last_mut() {
                Some(last) if t0 - last.1 < merge_gap => last.1 = last.1.max(t1),
                _ => merged.push((t0, t1)),
            }
        }
        Ok(merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_mesh(rng: &mut ChaCha8Rng, n_tris: usize, extent: f64) -> TriangleMesh {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        while faces.len() < n_tris {
            let c = Vec3::new(
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
            );
            let s = extent * 0.15;
            let tri: Vec<Vec3> = (0..3)
                .map(|_| {
                    c + Vec3::new(
                        rng.random_range(-s..s),
                        rng.random_range(-s..s),
                        rng.random_range(-s..s),
                    )
                })
                .collect();
            if (tri[1] - tri[0]).cross(&(tri[2] - tri[0])).norm() < 1e-3 {
                continue;
            }
            let base = vertices.len();
            vertices.extend(tri);
            faces.push([base, base + 1, base + 2]);
        }
        TriangleMesh::new(vertices, faces).unwrap()
    }

    #[test]
    fn single_triangle_root_is_leaf() {
        let m =
            TriangleMesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], vec![[0, 1, 2]]).unwrap();
        let t = Octree::build(&m, OctreeParams::default()).unwrap();
        assert_eq!(t.nodes().len(), 1);
        assert_eq!(t.leaf_triangles(0), &[0]);
    }

    #[test]
    fn leaves_cover_their_triangles_exactly() {
        // two separated clusters
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_mesh(&mut rng, 60, 1.0);
        let mut verts = a.vertices().to_vec();
        let mut faces = a.faces().to_vec();
        let n = verts.len();
        verts.extend(a.vertices().iter().map(|v| v + Vec3::new(20.0, 0.0, 0.0)));
        faces.extend(a.faces().iter().map(|f| [f[0] + n, f[1] + n, f[2] + n]));
        let m = TriangleMesh::new(verts, faces).unwrap();
        let params = OctreeParams {
            max_leaf_triangles: 4,
            ..Default::default()
        };
        let tree = Octree::build(&m, params).unwrap();
        let mut seen = vec![false; m.face_count()];
        for (i, node) in tree.nodes().iter().enumerate() {
            let leaf = tree.leaf_triangles(i);
            for &t in leaf {
                seen[t as usize] = true;
            }
            if let NodeKind::Leaf { .. } = node.kind {
                // exhaustive oracle: every triangle overlapping this leaf (and
                // only those) is listed, unless the leaf is a depth-limited one
                for f in 0..m.face_count() {
                    let [a, b, c] = m.triangle(f);
                    let overlaps = node.bounds.intersects_triangle(&a, &b, &c);
                    assert_eq!(
                        overlaps,
                        leaf.contains(&(f as u32)),
                        "leaf {i} triangle {f}"
                    );
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn children_partition_parent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_mesh(&mut rng, 300, 1.0);
        let tree = Octree::build(&m, OctreeParams::default()).unwrap();
        for node in tree.nodes() {
            if let NodeKind::Internal { children } = node.kind {
                for (o, &c) in children.iter().enumerate() {
                    if c != NO_CHILD {
                        assert_eq!(tree.nodes()[c as usize].bounds, node.bounds.octant(o));
                    }
                }
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_mesh(&mut rng, 500, 1.0);
        let a = Octree::build(&m, OctreeParams::default()).unwrap();
        let b = Octree::build(&m, OctreeParams::default()).unwrap();
        assert_eq!(a.nodes(), b.nodes());
        assert_eq!(a.leaf_triangles, b.leaf_triangles);
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_mesh(&mut rng, 500, 1.0);
        let tree = Octree::build(&m, OctreeParams::default()).unwrap();
        for _ in 0..1000 {
            let p = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let fast = tree.nearest_triangle(&m, &p, None).unwrap().unwrap();
            let slow = m.closest_point_brute_force(&p).unwrap();
            assert!((fast.distance - slow.distance).abs() < 1e-9);
        }
    }

    #[test]
    fn rebuilt_index_tracks_perturbed_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = TriangleMesh::icosphere(3, 1.0);
        let tree = Octree::build(&m, OctreeParams::default()).unwrap();
        for v in m.vertices_mut() {
            *v *= 1.0 + rng.random_range(-0.05..0.05);
        }
        let p = Vec3::new(0.1, 0.2, 0.3);
        assert!(matches!(
            tree.nearest_triangle(&m, &p, None),
            Err(Error::StaleIndex { .. })
        ));
        let tree = Octree::build(&m, OctreeParams::default()).unwrap();
        for _ in 0..200 {
            let p = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let fast = tree.nearest_triangle(&m, &p, None).unwrap().unwrap();
            let slow = m.closest_point_brute_force(&p).unwrap();
            assert!((fast.distance - slow.distance).abs() < 1e-9);
        }
    }

    #[test]
    fn query_at_vertex_and_bounded_query() {
        let m = TriangleMesh::icosphere(2, 1.0);
        let tree = Octree::build(&m, OctreeParams::default()).unwrap();
        let r = tree
            .nearest_triangle(&m, &m.vertices()[7], None)
            .unwrap()
            .unwrap();
        assert!(r.distance < 1e-12);
        let far = Vec3::new(10.0, 0.0, 0.0);
        assert!(tree
            .nearest_triangle(&m, &far, Some(0.01))
            .unwrap()
            .is_none());
        assert!(tree
            .nearest_triangle(&m, &far, Some(9.5))
            .unwrap()
            .is_some());
    }

    #[test]
    fn ray_intervals_basic() {
        let m = TriangleMesh::icosphere(3, 1.0);
        let tree = Octree::build(&m, OctreeParams::default()).unwrap();
        let ray = Ray::new(Vec3::new(0.0, 0.0, -5.0), Vec3::z());
        let iv = tree.ray_active_intervals(&m, &ray, 0.05, 0.01).unwrap();
        assert!(!iv.is_empty());
        // first surface crossing near t = 4
        assert!(iv.iter().any(|&(a, b)| a <= 4.0 && 4.0 <= b));
        let miss = Ray::new(Vec3::new(0.0, 10.0, -5.0), Vec3::z());
        assert!(tree
            .ray_active_intervals(&m, &miss, 0.05, 0.01)
            .unwrap()
            .is_empty());
        for w in iv.windows(2) {
            assert!(w[0].1 < w[1].0);
        }
    }
}
