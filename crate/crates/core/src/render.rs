//! Differentiable volume rendering of the mesh distance field.
//!
//! A ray is restricted to the intervals where it passes near the mesh,
//! sampled there, and every sample gets the pseudo-signed distance to the
//! mesh. Consecutive distances give an opacity through the logistic CDF,
//! opacities are alpha-composited, and the colour of each sample comes from
//! the tri-plane decoder. [`RayTape`] keeps what the reverse pass needs.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::{DecoderCache, PlaneFootprint, PositionalEncoding};
use crate::error::{Error, Result};
use crate::geometry::{Ray, Vec3};
use crate::io::image::Image;
use crate::mesh::{closest_point_jacobians, ClosestPointResult};
use crate::params::{GradStore, GroupFlags, ParamStore};
use crate::spatial::Octree;

/// Pinhole camera in the computer-vision convention: `x_cam = R x + t`,
/// pixels `K x_cam / z`, `+z` looking forward and `+y` pointing down.
///
/// Pixel `(i, j)` covers `[i, i + 1) x [j, j + 1)`; its centre is at
/// `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    k: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vec3,
    width: usize,
    height: usize,
    k_inv: Matrix3<f64>,
}

const ROTATION_TOLERANCE: f64 = 1e-6;

impl Camera {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(
                "camera image size must be positive".into(),
            ));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0)
            || k[(1, 0)] != 0.0
            || k[(2, 0)] != 0.0
            || k[(2, 1)] != 0.0
            || k[(2, 2)] != 1.0
        {
            return Err(Error::InvalidArgument(format!(
                "intrinsics must be upper triangular with positive focal lengths and K[2][2] = 1, got {k}"
            )));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > ROTATION_TOLERANCE || (r.determinant() - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "camera rotation is not a proper rotation: {r}"
            )));
        }
        if !t.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument(
                "camera translation must be finite".into(),
            ));
        }
        let k_inv = k
            .try_inverse()
            .expect("upper triangular with positive diagonal");
        Ok(Self {
            k,
            r,
            t,
            width,
            height,
            k_inv,
        })
    }

    /// Camera at `eye` looking at `target`, square pixels with focal length
    /// `focal` and the principal point at the image centre.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidArgument(
                "up vector is parallel to the viewing direction".into(),
            ));
        }
        let right = right.normalize();
        let down = fwd.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let k = Matrix3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(k, r, -(r * eye), width, height)
    }

    pub fn k(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn r(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn t(&self) -> &Vec3 {
        &self.t
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn center(&self) -> Vec3 {
        -(self.r.transpose() * self.t)
    }

    /// Ray through the continuous pixel position `(u, v)`.
    pub fn generate_ray(&self, pixel: [f64; 2]) -> Ray {
        let d = self.r.transpose() * (self.k_inv * Vec3::new(pixel[0], pixel[1], 1.0));
        Ray::new(self.center(), d)
    }

    /// Depth of `p` along the optical axis.
    pub fn depth(&self, p: &Vec3) -> f64 {
        self.r.row(2).transpose().dot(p) + self.t[2]
    }

    pub fn project(&self, p: &Vec3) -> Result<[f64; 2]> {
        let x = self.r * p + self.t;
        if !(x[2] > 0.0) {
            return Err(Error::BehindCamera { depth: x[2] });
        }
        let q = self.k * x;
        Ok([q[0] / q[2], q[1] / q[2]])
    }

    /// Projection together with its derivative with respect to `p`, one
    /// row per pixel coordinate.
    pub fn project_with_jacobian(&self, p: &Vec3) -> Result<([f64; 2], [Vec3; 2])> {
        let x = self.r * p + self.t;
        if !(x[2] > 0.0) {
            return Err(Error::BehindCamera { depth: x[2] });
        }
        let q = self.k * x;
        let uv = [q[0] / q[2], q[1] / q[2]];
        let kr = self.k * self.r;
        let dz = self.r.row(2).transpose();
        let du = (kr.row(0).transpose() - dz * uv[0]) / q[2];
        let dv = (kr.row(1).transpose() - dz * uv[1]) / q[2];
        Ok((uv, [du, dv]))
    }
}

/// Mixes a base seed with a sequence of counters into a fresh seed
/// (splitmix64 finalisation after each word).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// One sample per `stride x stride` cell, at the cell centre plus uniform
/// jitter in `[-jitter, jitter]` on each axis. Cells cut by the image border
/// shrink to the part inside the image.
pub fn sample_grid_pixels(
    width: usize,
    height: usize,
    stride: usize,
    jitter: f64,
    seed: u64,
) -> Result<Vec<[f64; 2]>> {
    if stride == 0 {
        return Err(Error::InvalidArgument(
            "grid stride must be at least 1".into(),
        ));
    }
    if !(0.0..stride as f64 / 2.0).contains(&jitter) {
        return Err(Error::InvalidArgument(format!(
            "jitter {jitter} must lie in [0, stride / 2) for stride {stride}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(width.div_ceil(stride) * height.div_ceil(stride));
    let cell = |i: usize, n: usize| {
        let lo = (i * stride) as f64;
        let hi = ((i + 1) * stride).min(n) as f64;
        (0.5 * (lo + hi), 0.5 * (hi - lo))
    };
    for gy in 0..height.div_ceil(stride) {
        let (cy, hy) = cell(gy, height);
        for gx in 0..width.div_ceil(stride) {
            let (cx, hx) = cell(gx, width);
            let (mut u, mut v) = (cx, cy);
            if jitter > 0.0 {
                let ju = jitter.min(hx * (1.0 - 1e-9));
                let jv = jitter.min(hy * (1.0 - 1e-9));
                u += rng.random_range(-1.0..=1.0) * ju;
                v += rng.random_range(-1.0..=1.0) * jv;
            }
            out.push([u, v]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityMode {
    /// Pseudo-signed distances fed straight into the logistic CDF.
    #[default]
    PseudoSigned,
}

/// Distance-to-opacity mapping `alpha = max(1 - Phi(s d1) / Phi(s d0), 0)`
/// with the logistic CDF `Phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityMapping {
    pub scale: f64,
    #[serde(default)]
    pub mode: DensityMode,
}

/// Opacity of one interval and its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaGrad {
    pub alpha: f64,
    pub d_s0: f64,
    pub d_s1: f64,
    pub d_scale: f64,
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn log_phi(x: f64) -> f64 {
    -softplus(-x)
}

impl DensityMapping {
    pub fn new(scale: f64) -> Self {
        Self {
            scale,
            mode: DensityMode::PseudoSigned,
        }
    }

    #[inline]
    pub fn alpha(&self, s0: f64, s1: f64) -> f64 {
        let log_ratio = log_phi(self.scale * s1) - log_phi(self.scale * s0);
        if log_ratio >= 0.0 {
            0.0
        } else {
            (1.0 - log_ratio.exp()).clamp(0.0, 1.0)
        }
    }

    #[inline]
    pub fn alpha_grad(&self, s0: f64, s1: f64) -> AlphaGrad {
        let s = self.scale;
        let (x0, x1) = (s * s0, s * s1);
        let log_ratio = log_phi(x1) - log_phi(x0);
        if log_ratio >= 0.0 {
            return AlphaGrad {
                alpha: 0.0,
                d_s0: 0.0,
                d_s1: 0.0,
                d_scale: 0.0,
            };
        }
        let r = log_ratio.exp();
        // d log Phi(x) / dx = Phi(-x)
        let p0 = crate::appearance::sigmoid(-x0);
        let p1 = crate::appearance::sigmoid(-x1);
        AlphaGrad {
            alpha: (1.0 - r).clamp(0.0, 1.0),
            d_s0: r * p0 * s,
            d_s1: -r * p1 * s,
            d_scale: -r * (p1 * s1 - p0 * s0),
        }
    }
}

/// `alpha_k` from the distances of samples `k` and `k + 1`.
pub fn alpha_from_distances(s_k: f64, s_next: f64, mapping: &DensityMapping) -> f64 {
    mapping.alpha(s_k, s_next)
}

/// Front-to-back compositing. Returns the colour, the accumulated opacity
/// and the per-sample weights `w_k = prod_{j<k}(1 - alpha_j) alpha_k`.
pub fn composite(alphas: &[f64], colors: &[[f64; 3]]) -> Result<([f64; 3], f64, Vec<f64>)> {
    if alphas.len() != colors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} alphas but {} colours",
            alphas.len(),
            colors.len()
        )));
    }
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut opacity = 0.0;
    let mut weights = Vec::with_capacity(alphas.len());
    for (a, c) in alphas.iter().zip(colors) {
        let w = trans * a;
        for k in 0..3 {
            color[k] += w * c[k];
        }
        opacity += w;
        weights.push(w);
        trans *= 1.0 - a;
    }
    Ok((color, opacity, weights))
}

/// Splits `n` samples across intervals in proportion to their lengths,
/// rounding by largest remainder (ties to the earlier interval).
pub fn proportional_allocation(lengths: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = lengths.iter().sum();
    if lengths.is_empty() || !(total > 0.0) {
        return vec![0; lengths.len()];
    }
    let exact: Vec<f64> = lengths.iter().map(|l| l / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub n_samples: usize,
    /// The active band is `band_factor / s` scene units around the mesh.
    pub band_factor: f64,
    /// Jitter sample positions inside their strata.
    pub stratified: bool,
    /// Samples whose weight falls below this skip the colour decoder.
    pub weight_cutoff: f64,
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            n_samples: 32,
            band_factor: 8.0,
            stratified: false,
            weight_cutoff: 1e-5,
            background: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub t: f64,
    pub position: Vec3,
    pub signed_distance: f64,
    pub face_id: usize,
    pub normal: Vec3,
    pub front_facing: bool,
    pub closest: ClosestPointResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelRender {
    pub color: [f64; 3],
    pub opacity: f64,
    pub culled: bool,
    pub weights: Vec<f64>,
}

/// Forward record of one ray.
#[derive(Debug, Clone, Default)]
pub struct RayTape {
    pub direction: Vec3,
    pub samples: Vec<SamplePoint>,
    pub alphas: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    /// Index into `appearance` for samples whose colour was decoded.
    pub decoded: Vec<Option<usize>>,
    pub appearance: Vec<SampleAppearance>,
    pub encoded_view: Vec<f64>,
    pub color: [f64; 3],
    pub opacity: f64,
    pub culled: bool,
}

#[derive(Debug, Clone)]
pub struct SampleAppearance {
    pub footprint: PlaneFootprint,
    pub feature: Vec<f64>,
    pub cache: DecoderCache,
}

impl RayTape {
    pub fn pixel(&self) -> PixelRender {
        PixelRender {
            color: self.color,
            opacity: self.opacity,
            culled: self.culled,
            weights: self.weights.clone(),
        }
    }
}

/// Read-only view of the scene used by one rendering pass.
pub struct RenderContext<'a> {
    pub params: &'a ParamStore,
    pub octree: &'a Octree,
    pub settings: &'a RenderSettings,
    pe: PositionalEncoding,
}

impl<'a> RenderContext<'a> {
    pub fn new(
        params: &'a ParamStore,
        octree: &'a Octree,
        settings: &'a RenderSettings,
    ) -> Result<Self> {
        if octree.revision() != params.mesh.revision() {
            return Err(Error::StaleIndex {
                index: octree.revision(),
                mesh: params.mesh.revision(),
            });
        }
        if settings.n_samples < 2 {
            return Err(Error::InvalidArgument(
                "at least two samples per ray are required".into(),
            ));
        }
        if !(params.mapping.scale > 0.0) {
            return Err(Error::InvalidArgument(
                "density scale must be positive".into(),
            ));
        }
        let view_dim = params.decoder.view_dim();
        if !view_dim.is_multiple_of(3) || (view_dim / 3) % 2 != 1 {
            return Err(Error::ShapeMismatch(format!(
                "decoder view input {view_dim} is not a positional encoding size"
            )));
        }
        Ok(Self {
            params,
            octree,
            settings,
            pe: PositionalEncoding::new((view_dim / 3 - 1) / 2),
        })
    }

    pub fn band(&self) -> f64 {
        self.settings.band_factor / self.params.mapping.scale
    }

    /// Sample parameters along a ray: stratified over the active intervals,
    /// allocated in proportion to their lengths. Empty when the ray never
    /// comes within the band of the mesh.
    pub fn plan_ray(&self, ray: &Ray, seed: u64) -> Result<Vec<f64>> {
        let band = self.band();
        let raw = self
            .octree
            .ray_active_intervals(&self.params.mesh, ray, band, 0.0)?;
        let n = self.settings.n_samples;
        let total: f64 = raw.iter().map(|(a, b)| b - a).sum();
        if raw.is_empty() || !(total > 0.0) {
            return Ok(Vec::new());
        }
        let step = total / n as f64;
        let mut intervals: Vec<(f64, f64)> = Vec::with_capacity(raw.len());
        for (t0, t1) in raw {
            match intervals.last_mut() {
                Some(last) if t0 - last.1 < step => last.1 = last.1.max(t1),
                _ => intervals.push((t0, t1)),
            }
        }
        let lengths: Vec<f64> = intervals.iter().map(|(a, b)| b - a).collect();
        let counts = proportional_allocation(&lengths, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ts = Vec::with_capacity(n);
        for ((t0, _), (&len, &m)) in intervals.iter().zip(lengths.iter().zip(&counts)) {
            for i in 0..m {
                let u = if self.settings.stratified {
                    rng.random::<f64>()
                } else {
                    0.5
                };
                ts.push(t0 + (i as f64 + u) * len / m as f64);
            }
        }
        Ok(ts)
    }

    /// Distance, normal and facing of each planned sample.
    pub fn sample_along_ray(&self, ray: &Ray, ts: &[f64]) -> Result<Vec<SamplePoint>> {
        let mesh = &self.params.mesh;
        let mut samples = Vec::with_capacity(ts.len());
        let mut prev: Option<(f64, f64)> = None;
        for &t in ts {
            let p = ray.at(t);
            let bound = prev.map(|(pt, pd)| (pd + (t - pt).abs()) * (1.0 + 1e-9) + 1e-12);
            let r = match self.octree.nearest_triangle(mesh, &p, bound)? {
                Some(r) => r,
                None => self
                    .octree
                    .nearest_triangle(mesh, &p, None)?
                    .ok_or(Error::EmptyMesh)?,
            };
            let mut r = r;
            mesh.apply_sign(&p, &mut r);
            let normal = mesh.pseudo_normal(&r);
            prev = Some((t, r.distance));
            samples.push(SamplePoint {
                t,
                position: p,
                signed_distance: r.signed_distance,
                face_id: r.face_id,
                normal,
                front_facing: normal.dot(&ray.direction) < 0.0,
                closest: r,
            });
        }
        Ok(samples)
    }

    /// Forward pass along `ray` at the given sample parameters. Colours are
    /// only decoded when `with_color` is set.
    pub fn trace(&self, ray: &Ray, ts: &[f64], with_color: bool) -> Result<RayTape> {
        let samples = self.sample_along_ray(ray, ts)?;
        let mapping = &self.params.mapping;
        let bg = self.settings.background;
        let mut tape = RayTape {
            direction: ray.direction,
            color: bg,
            ..Default::default()
        };
        tape.culled = !samples.is_empty() && samples.iter().all(|s| !s.front_facing);
        let k_alpha = samples.len().saturating_sub(1);
        let mut trans = 1.0;
        for k in 0..k_alpha {
            let a = mapping.alpha(samples[k].signed_distance, samples[k + 1].signed_distance);
            tape.alphas.push(a);
            tape.transmittance.push(trans);
            tape.weights.push(trans * a);
            trans *= 1.0 - a;
        }
        tape.colors = vec![[0.0; 3]; k_alpha];
        tape.decoded = vec![None; k_alpha];
        if with_color && !tape.culled && k_alpha > 0 {
            let planes = &self.params.planes;
            let decoder = &self.params.decoder;
            tape.encoded_view = self.pe.encode(&ray.direction);
            let view_pre = decoder.view_preactivation(&tape.encoded_view);
            for k in 0..k_alpha {
                if tape.weights[k] <= self.settings.weight_cutoff {
                    continue;
                }
                let footprint = planes.footprint(&samples[k].position);
                let mut feature = vec![0.0; planes.feature_dim()];
                planes.gather(&footprint, &mut feature);
                let mut cache = DecoderCache::default();
                decoder.forward(&view_pre, &feature, &mut cache);
                tape.colors[k] = cache.output;
                tape.decoded[k] = Some(tape.appearance.len());
                tape.appearance.push(SampleAppearance {
                    footprint,
                    feature,
                    cache,
                });
            }
        }
        if !tape.culled {
            let opacity: f64 = tape.weights.iter().sum();
            let mut color = [0.0; 3];
            for (w, c) in tape.weights.iter().zip(&tape.colors) {
                for ch in 0..3 {
                    color[ch] += w * (c[ch] - bg[ch]);
                }
            }
            for ch in 0..3 {
                color[ch] += bg[ch];
            }
            tape.opacity = opacity;
            tape.color = color;
        }
        tape.samples = samples;
        Ok(tape)
    }

    /// Plans and traces a ray.
    pub fn render_ray(&self, ray: &Ray, seed: u64, with_color: bool) -> Result<RayTape> {
        let ts = self.plan_ray(ray, seed)?;
        self.trace(ray, &ts, with_color)
    }

    pub fn render_pixel(&self, camera: &Camera, pixel: [f64; 2], seed: u64) -> Result<PixelRender> {
        Ok(self
            .render_ray(&camera.generate_ray(pixel), seed, true)?
            .pixel())
    }

    /// Reverse pass of one ray. Adds `dL/dparams` for the groups in
    /// `flags` into `grads`, given `dL/dC` and `dL/dO`. Culled rays carry
    /// no gradient.
    pub fn backprop(
        &self,
        tape: &RayTape,
        d_color: [f64; 3],
        d_opacity: f64,
        flags: GroupFlags,
        grads: &mut GradStore,
    ) {
        let n = tape.alphas.len();
        if tape.culled || n == 0 {
            return;
        }
        let bg = self.settings.background;
        let g: Vec<f64> = (0..n)
            .map(|k| {
                d_opacity
                    + (0..3)
                        .map(|ch| d_color[ch] * (tape.colors[k][ch] - bg[ch]))
                        .sum::<f64>()
            })
            .collect();

        if flags.vertices || flags.scale {
            let mapping = &self.params.mapping;
            let mut d_dist = vec![0.0; n + 1];
            let mut suffix = 0.0;
            for k in (0..n).rev() {
                let d_alpha = tape.transmittance[k] * (g[k] - suffix);
                suffix = g[k] * tape.alphas[k] + (1.0 - tape.alphas[k]) * suffix;
                if d_alpha == 0.0 {
                    continue;
                }
                let ag = mapping.alpha_grad(
                    tape.samples[k].signed_distance,
                    tape.samples[k + 1].signed_distance,
                );
                d_dist[k] += d_alpha * ag.d_s0;
                d_dist[k + 1] += d_alpha * ag.d_s1;
                grads.scale += d_alpha * ag.d_scale;
            }
            if flags.vertices {
                let faces = self.params.mesh.faces();
                for (s, &dd) in tape.samples.iter().zip(&d_dist) {
                    if dd == 0.0 {
                        continue;
                    }
                    let jac = closest_point_jacobians(&s.position, &s.closest);
                    if jac.degenerate {
                        continue;
                    }
                    let sign = if s.signed_distance < 0.0 { -1.0 } else { 1.0 };
                    let face = faces[s.face_id];
                    for c in 0..3 {
                        grads.vertices[face[c]] += jac.d_vertices[c] * (sign * dd);
                    }
                }
            }
        }

        if flags.appearance() && !tape.appearance.is_empty() {
            let planes = &self.params.planes;
            let decoder = &self.params.decoder;
            let hidden = decoder.sizes()[1];
            let mut d_view_pre = vec![0.0; hidden];
            let mut d_feature = vec![0.0; decoder.feature_dim()];
            for k in 0..n {
                let Some(slot) = tape.decoded[k] else {
                    continue;
                };
                let w = tape.weights[k];
                let d_out = [w * d_color[0], w * d_color[1], w * d_color[2]];
                if d_out == [0.0; 3] {
                    continue;
                }
                let app = &tape.appearance[slot];
                decoder.backward(
                    &app.feature,
                    &app.cache,
                    &d_out,
                    &mut grads.decoder,
                    &mut d_feature,
                    &mut d_view_pre,
                );
                if flags.planes {
                    planes.scatter(&app.footprint, &d_feature, &mut grads.planes);
                }
            }
            decoder.backward_view(&tape.encoded_view, &d_view_pre, &mut grads.decoder);
        }
    }

    /// Renders every pixel centre of `camera` without jitter. Returns the
    /// colour image and the opacity image.
    pub fn render_image(&self, camera: &Camera) -> Result<(Image, Image)> {
        let (w, h) = (camera.width(), camera.height());
        let rows: Vec<Result<Vec<RayTape>>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let ray = camera.generate_ray([x as f64 + 0.5, y as f64 + 0.5]);
                        let seed = derive_seed(0, &[x as u64, y as u64]);
                        self.render_ray(&ray, seed, true)
                    })
                    .collect()
            })
            .collect();
        let mut color = Image::new(w, h, 3);
        let mut opacity = Image::new(w, h, 1);
        for (y, row) in rows.into_iter().enumerate() {
            for (x, tape) in row?.into_iter().enumerate() {
                color.set_pixel(x, y, &tape.color);
                opacity.set_pixel(x, y, &[tape.opacity]);
            }
        }
        Ok((color, opacity))
    }
}
