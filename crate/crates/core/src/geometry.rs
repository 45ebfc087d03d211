//! Small geometric primitives shared by the mesh, index and renderer.

use nalgebra::Vector3;

pub type Vec3 = Vector3<f64>;

/// A half-line `origin + t * direction`, `t >= 0`, with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    #[inline]
    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x || self.min.y > self.max.y || self.min.z > self.max.z
    }

    pub fn expanded(&self, margin: f64) -> Self {
        Self {
            min: self.min.add_scalar(-margin),
            max: self.max.add_scalar(margin),
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Box of octant `index` (bit 0: x, bit 1: y, bit 2: z upper half).
    pub fn octant(&self, index: usize) -> Self {
        let c = self.center();
        let mut min = self.min;
        let mut max = c;
        for axis in 0..3 {
            if index >> axis & 1 == 1 {
                min[axis] = c[axis];
                max[axis] = self.max[axis];
            }
        }
        Self { min, max }
    }

    /// Squared distance from `p` to the box (zero inside).
    #[inline]
    pub fn distance_squared(&self, p: &Vec3) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let v = if p[i] < self.min[i] {
                self.min[i] - p[i]
            } else if p[i] > self.max[i] {
                p[i] - self.max[i]
            } else {
                0.0
            };
            d2 += v * v;
        }
        d2
    }

    /// Parametric interval where the ray is inside the box, clipped to `t >= 0`.
    #[inline]
    pub fn ray_interval(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let o = ray.origin[i];
            let d = ray.direction[i];
            if d == 0.0 {
                if o < self.min[i] || o > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut a, mut b) = ((self.min[i] - o) * inv, (self.max[i] - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }

    /// Separating-axis test between the box and a triangle. Touching counts
    /// as overlap, with a small relative tolerance so the test errs on the
    /// inclusive side.
    pub fn intersects_triangle(&self, a: &Vec3, b: &Vec3, c: &Vec3) -> bool {
        let center = self.center();
        let half = self.extent() * 0.5;
        let tol = 1e-9 * (1.0 + half.amax() + center.amax());
        let v = [a - center, b - center, c - center];
        let e = [v[1] - v[0], v[2] - v[1], v[0] - v[2]];

        let separated = |axis: Vec3| -> bool {
            if axis.norm_squared() < 1e-30 {
                return false;
            }
            let p = [axis.dot(&v[0]), axis.dot(&v[1]), axis.dot(&v[2])];
            let lo = p[0].min(p[1]).min(p[2]);
            let hi = p[0].max(p[1]).max(p[2]);
            let r = half.x * axis.x.abs() + half.y * axis.y.abs() + half.z * axis.z.abs();
            let scale = axis.norm();
            lo > r + tol * scale || hi < -r - tol * scale
        };

        for i in 0..3 {
            let lo = v[0][i].min(v[1][i]).min(v[2][i]);
            let hi = v[0][i].max(v[1][i]).max(v[2][i]);
            if lo > half[i] + tol || hi < -half[i] - tol {
                return false;
            }
        }
        if separated(e[0].cross(&e[1])) {
            return false;
        }
        let axes = [Vec3::x(), Vec3::y(), Vec3::z()];
        for edge in &e {
            for unit in &axes {
                if separated(edge.cross(unit)) {
                    return false;
                }
            }
        }
        true
    }
}
