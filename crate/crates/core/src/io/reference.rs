//! Reference surfaces for synthetic scenes and geometry evaluation.
//!
//! Ellipsoids are handled analytically. Blobs are star-shaped surfaces
//! `r(w) = R (1 + sum_j a_j exp(k_j (w . d_j - 1)))` around a centre; their
//! distance queries go through a dense radial mesh. Scan meshes are loaded
//! from OBJ files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Ray, Vec3};
use crate::io::obj::read_obj;
use crate::mesh::TriangleMesh;
use crate::spatial::{Octree, OctreeParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lobe {
    pub direction: [f64; 3],
    pub amplitude: f64,
    pub sharpness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SurfaceSpec {
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
    },
    Blob {
        center: [f64; 3],
        radius: f64,
        lobes: Vec<Lobe>,
    },
    Mesh {
        path: PathBuf,
    },
}

/// Subdivision level of the dense mesh used for blob distances.
const BLOB_MESH_LEVEL: u32 = 5;

// built once per evaluation, so the variant size does not matter
#[allow(clippy::large_enum_variant)]
pub enum Reference {
    Ellipsoid { center: Vec3, radii: Vec3 },
    Blob(Box<BlobSurface>),
    Mesh { mesh: TriangleMesh, octree: Octree },
}

pub struct BlobSurface {
    pub center: Vec3,
    pub radius: f64,
    pub lobes: Vec<(Vec3, f64, f64)>,
    dense: TriangleMesh,
    octree: Octree,
}

impl BlobSurface {
    pub fn radial(&self, dir: &Vec3) -> f64 {
        let w = dir.normalize();
        self.radius
            * (1.0
                + self
                    .lobes
                    .iter()
                    .map(|(d, a, k)| a * (k * (w.dot(d) - 1.0)).exp())
                    .sum::<f64>())
    }

    fn implicit(&self, p: &Vec3) -> f64 {
        let q = p - self.center;
        let n = q.norm();
        if n < 1e-12 {
            return -self.radius;
        }
        n - self.radial(&q)
    }

    fn max_radius(&self) -> f64 {
        self.radius * (1.0 + self.lobes.iter().map(|(_, a, _)| a.max(0.0)).sum::<f64>())
    }
}

impl Reference {
    pub fn build(spec: &SurfaceSpec, root: &Path) -> Result<Self> {
        match spec {
            SurfaceSpec::Ellipsoid { center, radii } => {
                if radii.iter().any(|r| !(*r > 0.0)) {
                    return Err(Error::InvalidScene(format!(
                        "ellipsoid radii must be positive: {radii:?}"
                    )));
                }
                Ok(Reference::Ellipsoid {
                    center: Vec3::from(*center),
                    radii: Vec3::from(*radii),
                })
            }
            SurfaceSpec::Blob {
                center,
                radius,
                lobes,
            } => {
                if !(*radius > 0.0) {
                    return Err(Error::InvalidScene("blob radius must be positive".into()));
                }
                let lobes: Vec<(Vec3, f64, f64)> = lobes
                    .iter()
                    .map(|l| {
                        (
                            Vec3::from(l.direction).normalize(),
                            l.amplitude,
                            l.sharpness,
                        )
                    })
                    .collect();
                let center = Vec3::from(*center);
                let mut blob = BlobSurface {
                    center,
                    radius: *radius,
                    lobes,
                    dense: TriangleMesh::icosphere(0, 1.0),
                    octree: Octree::build(
                        &TriangleMesh::icosphere(0, 1.0),
                        OctreeParams::default(),
                    )?,
                };
                let mut dense = TriangleMesh::icosphere(BLOB_MESH_LEVEL, 1.0);
                let moved: Vec<Vec3> = dense
                    .vertices()
                    .iter()
                    .map(|w| center + w * blob.radial(w))
                    .collect();
                dense.set_vertices(moved)?;
                blob.octree = Octree::build(&dense, OctreeParams::default())?;
                blob.dense = dense;
                Ok(Reference::Blob(Box::new(blob)))
            }
            SurfaceSpec::Mesh { path } => {
                let mesh = read_obj(&root.join(path))?;
                if mesh.face_count() == 0 {
                    return Err(Error::EmptyMesh);
                }
                let octree = Octree::build(&mesh, OctreeParams::default())?;
                Ok(Reference::Mesh { mesh, octree })
            }
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn distance(&self, p: &Vec3) -> Result<f64> {
        match self {
            Reference::Ellipsoid { center, radii } => Ok(ellipsoid_distance(radii, &(p - center))),
            Reference::Blob(b) => Ok(b
                .octree
                .nearest_triangle(&b.dense, p, None)?
                .ok_or(Error::EmptyMesh)?
                .distance),
            Reference::Mesh { mesh, octree } => Ok(octree
                .nearest_triangle(mesh, p, None)?
                .ok_or(Error::EmptyMesh)?
                .distance),
        }
    }

    pub fn bounding_box(&self) -> Aabb {
        match self {
            Reference::Ellipsoid { center, radii } => Aabb::new(center - radii, center + radii),
            Reference::Blob(b) => b.dense.bounding_box(),
            Reference::Mesh { mesh, .. } => mesh.bounding_box(),
        }
    }

    /// Centre for radial queries (star-shaped surfaces only).
    pub fn center(&self) -> Vec3 {
        match self {
            Reference::Ellipsoid { center, .. } => *center,
            Reference::Blob(b) => b.center,
            Reference::Mesh { mesh, .. } => mesh.bounding_box().center(),
        }
    }

    /// Surface point hit by the half-line from the centre along `dir`.
    pub fn radial_point(&self, dir: &Vec3) -> Result<Vec3> {
        let w = dir.normalize();
        match self {
            Reference::Ellipsoid { center, radii } => {
                let s = (0..3)
                    .map(|i| (w[i] / radii[i]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                Ok(center + w / s)
            }
            Reference::Blob(b) => Ok(b.center + w * b.radial(&w)),
            Reference::Mesh { .. } => Err(Error::InvalidArgument(
                "radial queries need an analytic surface".into(),
            )),
        }
    }

    /// Outward unit normal at (or near) a surface point.
    pub fn normal(&self, p: &Vec3) -> Result<Vec3> {
        match self {
            Reference::Ellipsoid { center, radii } => {
                let q = p - center;
                Ok(Vec3::new(
                    q.x / radii.x.powi(2),
                    q.y / radii.y.powi(2),
                    q.z / radii.z.powi(2),
                )
                .normalize())
            }
            Reference::Blob(b) => {
                let h = 1e-5 * b.radius;
                let g = Vec3::from_fn(|i, _| {
                    let mut e = Vec3::zeros();
                    e[i] = h;
                    b.implicit(&(p + e)) - b.implicit(&(p - e))
                });
                Ok(g.normalize())
            }
            Reference::Mesh { .. } => Err(Error::InvalidArgument(
                "normals need an analytic surface".into(),
            )),
        }
    }

    /// First intersection of the ray with the surface, by an exact solve
    /// for ellipsoids and march-and-bisect for blobs.
    pub fn intersect(&self, ray: &Ray) -> Result<Option<f64>> {
        match self {
            Reference::Ellipsoid { center, radii } => {
                let o = (ray.origin - center).component_div(radii);
                let d = ray.direction.component_div(radii);
                let a = d.norm_squared();
                let b = 2.0 * o.dot(&d);
                let c = o.norm_squared() - 1.0;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return Ok(None);
                }
                let sq = disc.sqrt();
                // numerically stable pair of roots
                let q = -0.5 * (b + b.signum() * sq);
                let (mut t0, mut t1) = (q / a, c / q);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                Ok(if t0 >= 0.0 {
                    Some(t0)
                } else if t1 >= 0.0 {
                    Some(t1)
                } else {
                    None
                })
            }
            Reference::Blob(b) => {
                let r = b.max_radius() * 1.01;
                let oc = ray.origin - b.center;
                let half_b = oc.dot(&ray.direction);
                let disc = half_b * half_b - (oc.norm_squared() - r * r);
                if disc < 0.0 {
                    return Ok(None);
                }
                let sq = disc.sqrt();
                let (t_in, t_out) = ((-half_b - sq).max(0.0), -half_b + sq);
                if t_out <= 0.0 {
                    return Ok(None);
                }
                let step = b.radius * 2e-3;
                let mut t = t_in;
                let mut f_prev = b.implicit(&ray.at(t));
                if f_prev <= 0.0 {
                    return Ok(Some(t));
                }
                while t < t_out {
                    let t_next = (t + step).min(t_out);
                    let f = b.implicit(&ray.at(t_next));
                    if f <= 0.0 {
                        let (mut lo, mut hi) = (t, t_next);
                        for _ in 0..60 {
                            let mid = 0.5 * (lo + hi);
                            if b.implicit(&ray.at(mid)) > 0.0 {
                                lo = mid;
                            } else {
                                hi = mid;
                            }
                        }
                        return Ok(Some(hi));
                    }
                    f_prev = f;
                    t = t_next;
                }
                let _ = f_prev;
                Ok(None)
            }
            Reference::Mesh { .. } => Err(Error::InvalidArgument(
                "ray casting needs an analytic surface".into(),
            )),
        }
    }
}

/// Distance from `p` (relative to the centre) to the axis-aligned ellipsoid
/// with semi-axes `radii`, using the robust bisection of Eberly's method.
pub fn ellipsoid_distance(radii: &Vec3, p: &Vec3) -> f64 {
    // sort axes in decreasing order and fold into the first octant
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| radii[b].total_cmp(&radii[a]));
    let e = [radii[order[0]], radii[order[1]], radii[order[2]]];
    let y = [p[order[0]].abs(), p[order[1]].abs(), p[order[2]].abs()];
    distance_ellipsoid_sorted(e, y)
}

fn robust_length(v: &[f64]) -> f64 {
    let m = v.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    if m == 0.0 {
        return 0.0;
    }
    m * v.iter().map(|x| (x / m).powi(2)).sum::<f64>().sqrt()
}

fn bisect(mut s0: f64, mut s1: f64, g_of: impl Fn(f64) -> f64) -> f64 {
    let mut s = 0.5 * (s0 + s1);
    for _ in 0..1100 {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let g = g_of(s);
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

fn distance_ellipse_sorted(e0: f64, e1: f64, y0: f64, y1: f64) -> f64 {
    if y1 > 0.0 {
        if y0 > 0.0 {
            let (z0, z1) = (y0 / e0, y1 / e1);
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g == 0.0 {
                return 0.0;
            }
            let r0 = (e0 / e1).powi(2);
            let n0 = r0 * z0;
            let s0 = z1 - 1.0;
            let s1 = if g < 0.0 {
                0.0
            } else {
                robust_length(&[n0, z1]) - 1.0
            };
            let s = bisect(s0, s1, |s| {
                (n0 / (s + r0)).powi(2) + (z1 / (s + 1.0)).powi(2) - 1.0
            });
            let x0 = r0 * y0 / (s + r0);
            let x1 = y1 / (s + 1.0);
            ((x0 - y0).powi(2) + (x1 - y1).powi(2)).sqrt()
        } else {
            (y1 - e1).abs()
        }
    } else {
        let numer0 = e0 * y0;
        let denom0 = e0 * e0 - e1 * e1;
        if numer0 < denom0 {
            let xde0 = numer0 / denom0;
            let x0 = e0 * xde0;
            let x1 = e1 * (1.0 - xde0 * xde0).max(0.0).sqrt();
            ((x0 - y0).powi(2) + x1 * x1).sqrt()
        } else {
            (y0 - e0).abs()
        }
    }
}

fn distance_ellipsoid_sorted(e: [f64; 3], y: [f64; 3]) -> f64 {
    let [e0, e1, e2] = e;
    let [y0, y1, y2] = y;
    if y2 > 0.0 {
        if y1 > 0.0 {
            if y0 > 0.0 {
                let (z0, z1, z2) = (y0 / e0, y1 / e1, y2 / e2);
                let g = z0 * z0 + z1 * z1 + z2 * z2 - 1.0;
                if g == 0.0 {
                    return 0.0;
                }
                let r0 = (e0 / e2).powi(2);
                let r1 = (e1 / e2).powi(2);
                let (n0, n1) = (r0 * z0, r1 * z1);
                let s0 = z2 - 1.0;
                let s1 = if g < 0.0 {
                    0.0
                } else {
                    robust_length(&[n0, n1, z2]) - 1.0
                };
                let s = bisect(s0, s1, |s| {
                    (n0 / (s + r0)).powi(2) + (n1 / (s + r1)).powi(2) + (z2 / (s + 1.0)).powi(2)
                        - 1.0
                });
                let x = [r0 * y0 / (s + r0), r1 * y1 / (s + r1), y2 / (s + 1.0)];
                ((x[0] - y0).powi(2) + (x[1] - y1).powi(2) + (x[2] - y2).powi(2)).sqrt()
            } else {
                distance_ellipse_sorted(e1, e2, y1, y2)
            }
        } else if y0 > 0.0 {
            distance_ellipse_sorted(e0, e2, y0, y2)
        } else {
            (y2 - e2).abs()
        }
    } else {
        let denom0 = e0 * e0 - e2 * e2;
        let denom1 = e1 * e1 - e2 * e2;
        let numer0 = e0 * y0;
        let numer1 = e1 * y1;
        if numer0 < denom0 && numer1 < denom1 {
            let xde0 = numer0 / denom0;
            let xde1 = numer1 / denom1;
            let discr = 1.0 - xde0 * xde0 - xde1 * xde1;
            if discr > 0.0 {
                let x0 = e0 * xde0;
                let x1 = e1 * xde1;
                let x2 = e2 * discr.sqrt();
                return ((x0 - y0).powi(2) + (x1 - y1).powi(2) + x2 * x2).sqrt();
            }
        }
        distance_ellipse_sorted(e0, e1, y0, y1)
    }
}
