//! Training objectives and their gradients.

use serde::{Deserialize, Serialize};

use crate::appearance::TriPlanes;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::mesh::TriangleMesh;
use crate::render::Camera;

/// Optimisation stage. `1a` fits landmarks, `1b` silhouettes, `2` appearance
/// only and `3` geometry and appearance jointly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1a")]
    Landmarks,
    #[serde(rename = "1b")]
    Silhouette,
    #[serde(rename = "2")]
    Appearance,
    #[serde(rename = "3")]
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Landmarks,
        Stage::Silhouette,
        Stage::Appearance,
        Stage::Joint,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Landmarks => "1a",
            Stage::Silhouette => "1b",
            Stage::Appearance => "2",
            Stage::Joint => "3",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.label() == s)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub color: f64,
    /// Total-variation weight at the first and last appearance iteration;
    /// interpolated linearly in between.
    pub tv_start: f64,
    pub tv_end: f64,
    pub landmark: f64,
    pub mask: f64,
    pub laplacian: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            color: 1.0,
            tv_start: 1e-2,
            tv_end: 1e-3,
            landmark: 1.0,
            mask: 1.0,
            laplacian: 19.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.color,
            self.tv_start,
            self.tv_end,
            self.landmark,
            self.mask,
            self.laplacian,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    /// TV weight at iteration `iter` of `total`.
    pub fn tv_at(&self, iter: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.tv_start;
        }
        let f = iter.min(total - 1) as f64 / (total - 1) as f64;
        self.tv_start + (self.tv_end - self.tv_start) * f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub view: usize,
    pub vertex: usize,
    pub pixel: [f64; 2],
}

/// 2D detections tied to template vertices, per view.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub entries: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(entries: Vec<Landmark>) -> Self {
        Self { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn validate(&self, n_vertices: usize, n_views: usize) -> Result<()> {
        for (i, l) in self.entries.iter().enumerate() {
            if l.vertex >= n_vertices {
                return Err(Error::InvalidScene(format!(
                    "landmark {i} refers to vertex {} but the template has {n_vertices}",
                    l.vertex
                )));
            }
            if l.view >= n_views {
                return Err(Error::InvalidScene(format!(
                    "landmark {i} refers to missing view {}",
                    l.view
                )));
            }
            if !l.pixel.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidScene(format!(
                    "landmark {i} has a non-finite position"
                )));
            }
        }
        Ok(())
    }

    /// Sorted ids of views that carry at least one landmark.
    pub fn views(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.entries.iter().map(|l| l.view).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Mean absolute difference over valid pixels and the three channels.
pub fn color_l1(rendered: &[[f64; 3]], observed: &[[f64; 3]], valid: &[bool]) -> Result<f64> {
    Ok(color_l1_with_grad(rendered, observed, valid)?.0)
}

/// [`color_l1`] and its gradient with respect to each rendered pixel.
pub fn color_l1_with_grad(
    rendered: &[[f64; 3]],
    observed: &[[f64; 3]],
    valid: &[bool],
) -> Result<(f64, Vec<[f64; 3]>)> {
    if rendered.len() != observed.len() || rendered.len() != valid.len() {
        return Err(Error::ShapeMismatch(format!(
            "colour loss over {} rendered, {} observed and {} mask entries",
            rendered.len(),
            observed.len(),
            valid.len()
        )));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    let norm = 1.0 / (3 * count) as f64;
    let mut sum = 0.0;
    let mut grad = vec![[0.0; 3]; rendered.len()];
    for i in 0..rendered.len() {
        if !valid[i] {
            continue;
        }
        for c in 0..3 {
            let d = rendered[i][c] - observed[i][c];
            sum += d.abs();
            grad[i][c] = norm * sign(d);
        }
    }
    Ok((sum * norm, grad))
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Total variation of the tri-planes: for every cell with both forward
/// neighbours, the root of the squared forward differences summed over
/// channels.
pub fn tv_loss(planes: &TriPlanes) -> f64 {
    tv_loss_impl(planes, None)
}

/// Adds `weight * dTV/dT` into `grad` (laid out like the plane data) and
/// returns the unweighted loss. Cells with zero variation contribute a zero
/// subgradient.
pub fn tv_loss_with_grad(planes: &TriPlanes, weight: f64, grad: &mut [f64]) -> f64 {
    tv_loss_impl(planes, Some((weight, grad)))
}

fn tv_loss_impl(planes: &TriPlanes, mut grad: Option<(f64, &mut [f64])>) -> f64 {
    let n = planes.resolution();
    let data = planes.data();
    let mut total = 0.0;
    for plane in 0..3 {
        let d = planes.dims()[plane];
        for v in 0..n - 1 {
            for u in 0..n - 1 {
                let o = planes.node_offset(plane, u, v);
                let ou = planes.node_offset(plane, u + 1, v);
                let ov = planes.node_offset(plane, u, v + 1);
                let mut sq = 0.0;
                for c in 0..d {
                    let du = data[ou + c] - data[o + c];
                    let dv = data[ov + c] - data[o + c];
                    sq += du * du + dv * dv;
                }
                let norm = sq.sqrt();
                total += norm;
                if let Some((w, g)) = grad.as_mut() {
                    if norm > 0.0 {
                        let s = *w / norm;
                        for c in 0..d {
                            let du = data[ou + c] - data[o + c];
                            let dv = data[ov + c] - data[o + c];
                            g[ou + c] += s * du;
                            g[ov + c] += s * dv;
                            g[o + c] -= s * (du + dv);
                        }
                    }
                }
            }
        }
    }
    total
}

/// Pixel position of a world point, `K (R v + t)` after the perspective
/// divide.
pub fn project_vertex(camera: &Camera, v: &Vec3) -> Result<[f64; 2]> {
    camera.project(v)
}

/// Sum of squared pixel distances between projected landmark vertices and
/// their detections, with the gradient per vertex. Landmarks whose vertex
/// lies behind its camera are skipped.
pub fn landmark_loss(
    mesh: &TriangleMesh,
    cameras: &[Camera],
    landmarks: &LandmarkSet,
) -> Result<(f64, Vec<Vec3>)> {
    landmarks.validate(mesh.vertex_count(), cameras.len())?;
    let mut loss = 0.0;
    let mut grad = vec![Vec3::zeros(); mesh.vertex_count()];
    for l in &landmarks.entries {
        let v = mesh.vertices()[l.vertex];
        match cameras[l.view].project_with_jacobian(&v) {
            Ok((uv, jac)) => {
                let r = [uv[0] - l.pixel[0], uv[1] - l.pixel[1]];
                loss += r[0] * r[0] + r[1] * r[1];
                grad[l.vertex] += jac[0] * (2.0 * r[0]) + jac[1] * (2.0 * r[1]);
            }
            Err(Error::BehindCamera { depth }) => {
                log::warn!(
                    "landmark vertex {} is behind camera {} (depth {depth}); skipped",
                    l.vertex,
                    l.view
                );
            }
            Err(e) => return Err(e),
        }
    }
    Ok((loss, grad))
}

/// Pixels whose `(2r + 1)^2` window (clipped to the image) contains both
/// foreground and background, i.e. pixels within Chebyshev distance `r` of
/// the mask contour. Returned as row-major indices.
pub fn mask_contour_band(
    mask: &[bool],
    width: usize,
    height: usize,
    radius: usize,
) -> Result<Vec<usize>> {
    if mask.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} pixels, expected {width}x{height}",
            mask.len()
        )));
    }
    if radius == 0 {
        return Err(Error::InvalidArgument(
            "contour band radius must be at least 1".into(),
        ));
    }
    // summed-area table of foreground counts
    let stride = width + 1;
    let mut sat = vec![0u32; stride * (height + 1)];
    for y in 0..height {
        let mut row = 0u32;
        for x in 0..width {
            row += mask[y * width + x] as u32;
            sat[(y + 1) * stride + x + 1] = sat[y * stride + x + 1] + row;
        }
    }
    let mut band = Vec::new();
    for y in 0..height {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(height));
        for x in 0..width {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(width));
            let count = sat[y1 * stride + x1] + sat[y0 * stride + x0]
                - sat[y0 * stride + x1]
                - sat[y1 * stride + x0];
            let area = ((y1 - y0) * (x1 - x0)) as u32;
            if count > 0 && count < area {
                band.push(y * width + x);
            }
        }
    }
    if band.is_empty() {
        log::warn!("mask has no contour; the band is empty");
    }
    Ok(band)
}

/// Mean of `(M - O)^2` over the given pixels; culled pixels count with
/// `O = 0`. Returns the loss and `dL/dO` per pixel (zero for culled ones).
pub fn mask_loss(opacity: &[f64], culled: &[bool], mask: &[f64]) -> Result<(f64, Vec<f64>)> {
    if opacity.len() != mask.len() || culled.len() != mask.len() {
        return Err(Error::ShapeMismatch(
            "mask loss inputs differ in length".into(),
        ));
    }
    if mask.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let n = mask.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; mask.len()];
    for i in 0..mask.len() {
        let o = if culled[i] { 0.0 } else { opacity[i] };
        let r = mask[i] - o;
        loss += r * r;
        if !culled[i] {
            grad[i] = -2.0 * r / n;
        }
    }
    Ok((loss / n, grad))
}

/// `sum_i |delta_i|^2` and its gradient with respect to every vertex.
pub fn laplacian_loss(mesh: &TriangleMesh) -> (f64, Vec<Vec3>) {
    let deltas = mesh.laplacian_deltas();
    let loss = deltas.iter().map(|d| d.norm_squared()).sum();
    let mut grad: Vec<Vec3> = deltas.iter().map(|d| d * 2.0).collect();
    for (i, d) in deltas.iter().enumerate() {
        let nbrs = mesh.neighbors(i);
        if nbrs.is_empty() {
            continue;
        }
        let share = d * (2.0 / nbrs.len() as f64);
        for &j in nbrs {
            grad[j] -= share;
        }
    }
    (loss, grad)
}

/// Raw loss values of one iteration; absent terms are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub color: Option<f64>,
    pub tv: Option<f64>,
    pub landmark: Option<f64>,
    pub mask: Option<f64>,
    pub laplacian: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: LossComponents,
}

/// Weighted total of the terms used by `stage`. `tv_weight` is the
/// scheduled TV weight of the current iteration.
pub fn total_loss(
    stage: Stage,
    components: &LossComponents,
    weights: &LossWeights,
    tv_weight: f64,
) -> Result<LossReport> {
    let need = |value: Option<f64>, name: &'static str| {
        value.ok_or(Error::MissingLossComponent {
            stage: stage.label().to_string(),
            component: name.to_string(),
        })
    };
    let total = match stage {
        Stage::Landmarks => {
            weights.landmark * need(components.landmark, "landmark")?
                + weights.laplacian * need(components.laplacian, "laplacian")?
        }
        Stage::Silhouette => {
            weights.mask * need(components.mask, "mask")?
                + weights.laplacian * need(components.laplacian, "laplacian")?
        }
        Stage::Appearance => {
            weights.color * need(components.color, "color")?
                + tv_weight * need(components.tv, "tv")?
        }
        Stage::Joint => {
            weights.color * need(components.color, "color")?
                + weights.laplacian * need(components.laplacian, "laplacian")?
        }
    };
    Ok(LossReport {
        total,
        components: *components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::AppearanceConfig;
    use crate::geometry::Aabb;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, Matrix3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn color_l1_examples() {
        let a = [[0.2, 0.4, 0.6], [0.1, 0.1, 0.9]];
        assert_eq!(color_l1(&a, &a, &[true, true]).unwrap(), 0.0);
        let b: Vec<[f64; 3]> = a.iter().map(|p| p.map(|x| x + 0.1)).collect();
        assert_abs_diff_eq!(
            color_l1(&b, &a, &[true, true]).unwrap(),
            0.1,
            epsilon = 1e-12
        );
        let r = [[0.0; 3], [1.0; 3]];
        let o = [[0.5; 3], [1.0; 3]];
        assert_abs_diff_eq!(
            color_l1(&r, &o, &[true, true]).unwrap(),
            0.25,
            epsilon = 1e-12
        );
        assert!(matches!(
            color_l1(&r, &o, &[false, false]),
            Err(Error::NoValidPixels)
        ));
    }

    fn planes_2x2(values: [f64; 4]) -> TriPlanes {
        let mut t =
            TriPlanes::zeros(2, [1, 1, 1], Aabb::new(Vec3::zeros(), Vec3::repeat(1.0))).unwrap();
        // row-major [[0,1],[2,3]] with rows along v
        t.node_mut(0, 0, 0)[0] = values[0];
        t.node_mut(0, 1, 0)[0] = values[1];
        t.node_mut(0, 0, 1)[0] = values[2];
        t.node_mut(0, 1, 1)[0] = values[3];
        t
    }

    #[test]
    fn tv_examples() {
        assert_abs_diff_eq!(
            tv_loss(&planes_2x2([0.0, 1.0, 2.0, 3.0])),
            5f64.sqrt(),
            epsilon = 1e-12
        );
        assert_eq!(tv_loss(&planes_2x2([4.0; 4])), 0.0);
        let cfg = AppearanceConfig {
            resolution: 6,
            plane_dims: [3, 2, 2],
            init_amplitude: 1.0,
            ..Default::default()
        };
        let t = TriPlanes::init(&cfg, &Aabb::new(Vec3::zeros(), Vec3::repeat(1.0)), 3).unwrap();
        let base = tv_loss(&t);
        for lambda in [-2.5, 0.3, 4.0] {
            let mut s = t.clone();
            s.data_mut().iter_mut().for_each(|x| *x *= lambda);
            assert_abs_diff_eq!(tv_loss(&s), lambda.abs() * base, epsilon = 1e-9);
        }
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let cfg = AppearanceConfig {
            resolution: 5,
            plane_dims: [2, 1, 3],
            init_amplitude: 1.0,
            ..Default::default()
        };
        let t = TriPlanes::init(&cfg, &Aabb::new(Vec3::zeros(), Vec3::repeat(1.0)), 8).unwrap();
        let mut g = vec![0.0; t.data().len()];
        tv_loss_with_grad(&t, 1.0, &mut g);
        let eps = 1e-6;
        for i in (0..g.len()).step_by(3) {
            let mut a = t.clone();
            let mut b = t.clone();
            a.data_mut()[i] += eps;
            b.data_mut()[i] -= eps;
            let fd = (tv_loss(&a) - tv_loss(&b)) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-6));
        }
    }

    fn axis_camera() -> Camera {
        let k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0);
        Camera::new(k, Matrix3::identity(), Vec3::zeros(), 100, 100).unwrap()
    }

    #[test]
    fn projection_examples() {
        let cam = axis_camera();
        assert_eq!(
            project_vertex(&cam, &Vec3::new(0.0, 0.0, 1.0)).unwrap(),
            [50.0, 50.0]
        );
        let p = project_vertex(&cam, &Vec3::new(0.1, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(p[0], 60.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 50.0, epsilon = 1e-12);
        assert!(matches!(
            project_vertex(&cam, &Vec3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
    }

    fn one_vertex_mesh(v: Vec3) -> TriangleMesh {
        TriangleMesh::new(
            vec![
                v,
                v + Vec3::new(1.0, 0.0, 0.0),
                v + Vec3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn landmark_examples() {
        let cam = axis_camera();
        let mesh = one_vertex_mesh(Vec3::new(0.0, 0.0, 1.0));
        let exact = LandmarkSet::new(vec![Landmark {
            view: 0,
            vertex: 0,
            pixel: [50.0, 50.0],
        }]);
        assert_eq!(
            landmark_loss(&mesh, std::slice::from_ref(&cam), &exact)
                .unwrap()
                .0,
            0.0
        );
        let off = LandmarkSet::new(vec![Landmark {
            view: 0,
            vertex: 0,
            pixel: [53.0, 54.0],
        }]);
        assert_abs_diff_eq!(
            landmark_loss(&mesh, std::slice::from_ref(&cam), &off)
                .unwrap()
                .0,
            25.0,
            epsilon = 1e-12
        );
        let two = LandmarkSet::new(vec![
            Landmark {
                view: 0,
                vertex: 0,
                pixel: [51.0, 50.0],
            },
            Landmark {
                view: 1,
                vertex: 0,
                pixel: [50.0, 52.0],
            },
        ]);
        assert_abs_diff_eq!(
            landmark_loss(&mesh, &[cam.clone(), cam.clone()], &two)
                .unwrap()
                .0,
            5.0,
            epsilon = 1e-12
        );
        let behind = one_vertex_mesh(Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(
            landmark_loss(&behind, std::slice::from_ref(&cam), &exact)
                .unwrap()
                .0,
            0.0
        );
        let bad = LandmarkSet::new(vec![Landmark {
            view: 0,
            vertex: 7,
            pixel: [0.0, 0.0],
        }]);
        assert!(landmark_loss(&mesh, &[cam], &bad).is_err());
    }

    #[test]
    fn landmark_gradient_matches_finite_differences() {
        let cam = Camera::look_at(
            Vec3::new(1.0, 2.0, 8.0),
            Vec3::zeros(),
            Vec3::y(),
            120.0,
            64,
            64,
        )
        .unwrap();
        let mesh = TriangleMesh::icosphere(1, 1.0);
        let set = LandmarkSet::new(
            (0..10)
                .map(|i| Landmark {
                    view: 0,
                    vertex: i * 3,
                    pixel: [30.0 + i as f64, 31.0 - i as f64],
                })
                .collect(),
        );
        let (_, g) = landmark_loss(&mesh, std::slice::from_ref(&cam), &set).unwrap();
        let eps = 1e-6;
        for vi in [0usize, 3, 9, 27] {
            for k in 0..3 {
                let mut a = mesh.clone();
                let mut b = mesh.clone();
                a.vertices_mut()[vi][k] += eps;
                b.vertices_mut()[vi][k] -= eps;
                let fd = (landmark_loss(&a, std::slice::from_ref(&cam), &set)
                    .unwrap()
                    .0
                    - landmark_loss(&b, std::slice::from_ref(&cam), &set)
                        .unwrap()
                        .0)
                    / (2.0 * eps);
                assert!((fd - g[vi][k]).abs() <= 1e-4 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn band_examples() {
        assert!(mask_contour_band(&[true; 16], 4, 4, 2).unwrap().is_empty());
        let mut m = vec![false; 25];
        m[12] = true;
        let band = mask_contour_band(&m, 5, 5, 1).unwrap();
        assert_eq!(band, vec![6, 7, 8, 11, 12, 13, 16, 17, 18]);
    }

    #[test]
    fn band_matches_brute_force_on_a_disc() {
        let (w, h, r) = (64usize, 64usize, 2usize);
        let mask: Vec<bool> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64 + 0.5 - 32.0, (i / w) as f64 + 0.5 - 32.0);
                x * x + y * y <= 400.0
            })
            .collect();
        let band = mask_contour_band(&mask, w, h, r).unwrap();
        let mut brute = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (mut fg, mut bg) = (false, false);
                for dy in -(r as i64)..=r as i64 {
                    for dx in -(r as i64)..=r as i64 {
                        let (xx, yy) = (x + dx, y + dy);
                        if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                            continue;
                        }
                        if mask[(yy * w as i64 + xx) as usize] {
                            fg = true;
                        } else {
                            bg = true;
                        }
                    }
                }
                if fg && bg {
                    brute.push((y * w as i64 + x) as usize);
                }
            }
        }
        assert_eq!(band.len(), brute.len());
        assert_eq!(band, brute);
    }

    #[test]
    fn mask_loss_examples() {
        assert_eq!(
            mask_loss(&[1.0, 0.0], &[false, false], &[1.0, 0.0])
                .unwrap()
                .0,
            0.0
        );
        assert_abs_diff_eq!(mask_loss(&[0.5], &[false], &[1.0]).unwrap().0, 0.25);
        let (l, g) = mask_loss(&[0.9], &[true], &[0.0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0]);
    }

    /// Dense Laplacian `L = I - D^-1 A` applied to vertex coordinates.
    fn dense_deltas(mesh: &TriangleMesh) -> Vec<Vec3> {
        let n = mesh.vertex_count();
        let mut l = DMatrix::<f64>::identity(n, n);
        for i in 0..n {
            let nb = mesh.neighbors(i);
            for &j in nb {
                l[(i, j)] -= 1.0 / nb.len() as f64;
            }
        }
        let x = DMatrix::from_fn(n, 3, |i, k| mesh.vertices()[i][k]);
        let d = l * x;
        (0..n)
            .map(|i| Vec3::new(d[(i, 0)], d[(i, 1)], d[(i, 2)]))
            .collect()
    }

    #[test]
    fn laplacian_loss_matches_dense_oracle() {
        let mut mesh = TriangleMesh::icosphere(1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for v in mesh.vertices_mut() {
            *v += Vec3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            );
        }
        let dense = dense_deltas(&mesh);
        let expect: f64 = dense.iter().map(|d| d.norm_squared()).sum();
        let (loss, grad) = laplacian_loss(&mesh);
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-9);
        let eps = 1e-6;
        for vi in [0usize, 5, 17, 41] {
            for k in 0..3 {
                let mut a = mesh.clone();
                let mut b = mesh.clone();
                a.vertices_mut()[vi][k] += eps;
                b.vertices_mut()[vi][k] -= eps;
                let fd = (laplacian_loss(&a).0 - laplacian_loss(&b).0) / (2.0 * eps);
                assert!((fd - grad[vi][k]).abs() <= 1e-4 * fd.abs().max(1e-6));
            }
        }
    }

    #[test]
    fn laplacian_loss_on_a_path() {
        // path 0 - 1 - 2 built from a strip of two triangles is not a path,
        // so check the (1,-1,0) delta through the dense oracle instead
        let v = vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.0, 2.0, 0.0),
            Vec3::new(-1.0, 1.0, 0.0),
        ];
        let mesh = TriangleMesh::new(v, vec![[0, 2, 1], [1, 2, 3]]).unwrap();
        let dense = dense_deltas(&mesh);
        let (loss, _) = laplacian_loss(&mesh);
        assert_abs_diff_eq!(dense[0], Vec3::new(1.0, -1.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(
            loss,
            dense.iter().map(|d| d.norm_squared()).sum::<f64>(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn laplacian_loss_is_translation_invariant_and_zero_at_centroids() {
        let mesh = TriangleMesh::icosphere(2, 3.0);
        let (a, _) = laplacian_loss(&mesh);
        let mut moved = mesh.clone();
        for v in moved.vertices_mut() {
            *v += Vec3::new(10.0, -4.0, 7.5);
        }
        assert!((laplacian_loss(&moved).0 - a).abs() < 1e-10);
        let flat = TriangleMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(-1.0, 0.0, 0.0),
                Vec3::new(0.0, -1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]],
        )
        .unwrap();
        assert_eq!(flat.laplacian_deltas()[0], Vec3::zeros());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let zero = LossComponents {
            color: Some(0.0),
            tv: Some(0.0),
            landmark: Some(0.0),
            mask: Some(0.0),
            laplacian: Some(0.0),
        };
        for st in Stage::ALL {
            assert_eq!(total_loss(st, &zero, &w, 0.01).unwrap().total, 0.0);
        }
        let c = LossComponents {
            color: Some(0.1),
            laplacian: Some(0.01),
            ..Default::default()
        };
        assert_abs_diff_eq!(
            total_loss(Stage::Joint, &c, &w, 0.0).unwrap().total,
            0.29,
            epsilon = 1e-12
        );
        assert!(matches!(
            total_loss(Stage::Appearance, &c, &w, 0.01),
            Err(Error::MissingLossComponent { .. })
        ));
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let t = w.tv_at(i, 50);
            assert!(t < prev);
            prev = t;
        }
        assert_abs_diff_eq!(w.tv_at(49, 50), w.tv_end, epsilon = 1e-15);
    }

    #[test]
    fn stage_labels_round_trip() {
        for st in Stage::ALL {
            assert_eq!(Stage::parse(st.label()), Some(st));
        }
        assert_eq!(Stage::parse("4"), None);
    }
}
