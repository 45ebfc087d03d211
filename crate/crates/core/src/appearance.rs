//! Tri-plane appearance field and its MLP colour decoder.
//!
//! A point is projected onto the axis-aligned `xy`, `xz` and `yz` feature
//! planes, each plane is sampled bilinearly and the three feature vectors
//! are concatenated. The decoder maps that feature together with the
//! positionally encoded view direction to an RGB colour in `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};

/// Axis pairs `(u, v)` projected by each plane, in concatenation order.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppearanceConfig {
    /// Plane resolution per side.
    pub resolution: usize,
    /// Feature channels of the xy, xz and yz planes.
    pub plane_dims: [usize; 3],
    pub hidden_width: usize,
    pub pe_bands: usize,
    /// Plane bounds margin as a fraction of the template extent.
    pub plane_margin: f64,
    pub init_amplitude: f64,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            plane_dims: [32, 16, 16],
            hidden_width: 64,
            pe_bands: 4,
            plane_margin: 0.25,
            init_amplitude: 1e-2,
        }
    }
}

/// Bilinear footprint of one point on the three planes: for each plane the
/// flat offsets of the four corner cells and their weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFootprint {
    pub offsets: [[usize; 4]; 3],
    pub weights: [[f64; 4]; 3],
    /// Fractional cell coordinates, kept for position derivatives.
    pub frac: [[f64; 2]; 3],
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriPlanes {
    resolution: usize,
    dims: [usize; 3],
    bounds: Aabb,
    offsets: [usize; 3],
    data: Vec<f64>,
}

fn round_to_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl TriPlanes {
    /// Zero-initialised planes over `bounds`. Bounds are rounded to `f32`
    /// so that they survive a checkpoint round trip unchanged.
    pub fn zeros(resolution: usize, dims: [usize; 3], bounds: Aabb) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidArgument(format!(
                "plane resolution must be at least 2, got {resolution}"
            )));
        }
        if bounds.is_empty() || (0..3).any(|i| !(bounds.max[i] > bounds.min[i])) {
            return Err(Error::InvalidArgument(
                "plane bounds must have positive extent".into(),
            ));
        }
        let bounds = Aabb::new(bounds.min.map(round_to_f32), bounds.max.map(round_to_f32));
        let cells = resolution * resolution;
        let offsets = [0, cells * dims[0], cells * (dims[0] + dims[1])];
        let len = cells * dims.iter().sum::<usize>();
        Ok(Self {
            resolution,
            dims,
            bounds,
            offsets,
            data: vec![0.0; len],
        })
    }

    /// Planes covering `mesh_bounds` plus a relative margin, features drawn
    /// uniformly from `[-amplitude, amplitude]`.
    pub fn init(config: &AppearanceConfig, mesh_bounds: &Aabb, seed: u64) -> Result<Self> {
        let margin = config.plane_margin * mesh_bounds.extent().amax();
        let mut planes = Self::zeros(
            config.resolution,
            config.plane_dims,
            mesh_bounds.expanded(margin),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = config.init_amplitude;
        if a > 0.0 {
            for x in &mut planes.data {
                *x = rng.random_range(-a..a);
            }
        }
        Ok(planes)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn feature_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Feature slice of plane `plane` at grid node (`u`, `v`).
    pub fn node(&self, plane: usize, u: usize, v: usize) -> &[f64] {
        let o = self.node_offset(plane, u, v);
        &self.data[o..o + self.dims[plane]]
    }

    pub fn node_mut(&mut self, plane: usize, u: usize, v: usize) -> &mut [f64] {
        let o = self.node_offset(plane, u, v);
        let d = self.dims[plane];
        &mut self.data[o..o + d]
    }

    #[inline]
    pub fn node_offset(&self, plane: usize, u: usize, v: usize) -> usize {
        self.offsets[plane] + (v * self.resolution + u) * self.dims[plane]
    }

    /// World coordinate of node index `i` along `axis`.
    pub fn node_position(&self, axis: usize, i: usize) -> f64 {
        let step = (self.bounds.max[axis] - self.bounds.min[axis]) / (self.resolution - 1) as f64;
        self.bounds.min[axis] + step * i as f64
    }

    #[inline]
    fn grid_coord(&self, x: f64, axis: usize) -> (usize, f64, bool) {
        let n = (self.resolution - 1) as f64;
        let g = (x - self.bounds.min[axis]) / (self.bounds.max[axis] - self.bounds.min[axis]) * n;
        let clamped = !(0.0..=n).contains(&g);
        let g = g.clamp(0.0, n);
        let i = (g.floor() as usize).min(self.resolution - 2);
        (i, g - i as f64, clamped)
    }

    pub fn footprint(&self, p: &Vec3) -> PlaneFootprint {
        let mut fp = PlaneFootprint {
            offsets: [[0; 4]; 3],
            weights: [[0.0; 4]; 3],
            frac: [[0.0; 2]; 3],
            clamped: false,
        };
        for (plane, &(au, av)) in PLANE_AXES.iter().enumerate() {
            let (iu, fu, cu) = self.grid_coord(p[au], au);
            let (iv, fv, cv) = self.grid_coord(p[av], av);
            fp.clamped |= cu || cv;
            fp.offsets[plane] = [
                self.node_offset(plane, iu, iv),
                self.node_offset(plane, iu + 1, iv),
                self.node_offset(plane, iu, iv + 1),
                self.node_offset(plane, iu + 1, iv + 1),
            ];
            fp.weights[plane] = [
                (1.0 - fu) * (1.0 - fv),
                fu * (1.0 - fv),
                (1.0 - fu) * fv,
                fu * fv,
            ];
            fp.frac[plane] = [fu, fv];
        }
        fp
    }

    /// Gathers the concatenated feature for a footprint into `out`.
    #[inline]
    pub fn gather(&self, fp: &PlaneFootprint, out: &mut [f64]) {
        let mut k = 0;
        for plane in 0..3 {
            let d = self.dims[plane];
            let [o0, o1, o2, o3] = fp.offsets[plane];
            let [w0, w1, w2, w3] = fp.weights[plane];
            let (c0, c1, c2, c3) = (
                &self.data[o0..o0 + d],
                &self.data[o1..o1 + d],
                &self.data[o2..o2 + d],
                &self.data[o3..o3 + d],
            );
            for ch in 0..d {
                out[k + ch] = w0 * c0[ch] + w1 * c1[ch] + w2 * c2[ch] + w3 * c3[ch];
            }
            k += d;
        }
    }

    /// Scatters a feature gradient back onto plane cells (adds into `grad`,
    /// which has the layout of [`TriPlanes::data`]).
    #[inline]
    pub fn scatter(&self, fp: &PlaneFootprint, d_feature: &[f64], grad: &mut [f64]) {
        let mut k = 0;
        for plane in 0..3 {
            let d = self.dims[plane];
            for corner in 0..4 {
                let w = fp.weights[plane][corner];
                if w == 0.0 {
                    continue;
                }
                let o = fp.offsets[plane][corner];
                for ch in 0..d {
                    grad[o + ch] += w * d_feature[k + ch];
                }
            }
            k += d;
        }
    }

    /// `t(p)`: bilinear samples of the three planes, concatenated xy, xz, yz.
    /// Points outside the bounds are clamped; the flag reports it.
    pub fn sample(&self, p: &Vec3) -> (Vec<f64>, bool) {
        let fp = self.footprint(p);
        let mut out = vec![0.0; self.feature_dim()];
        self.gather(&fp, &mut out);
        (out, fp.clamped)
    }

    /// Jacobian of the sampled feature with respect to the point, one row
    /// per feature channel. Zero along clamped axes.
    pub fn position_jacobian(&self, p: &Vec3) -> Vec<[f64; 3]> {
        let fp = self.footprint(p);
        let mut jac = vec![[0.0; 3]; self.feature_dim()];
        let mut k = 0;
        for (plane, &(au, av)) in PLANE_AXES.iter().enumerate() {
            let d = self.dims[plane];
            let n = (self.resolution - 1) as f64;
            let su = n / (self.bounds.max[au] - self.bounds.min[au]);
            let sv = n / (self.bounds.max[av] - self.bounds.min[av]);
            let [fu, fv] = fp.frac[plane];
            let gu_in = {
                let g = (p[au] - self.bounds.min[au]) * su;
                (0.0..=n).contains(&g)
            };
            let gv_in = {
                let g = (p[av] - self.bounds.min[av]) * sv;
                (0.0..=n).contains(&g)
            };
            let [o0, o1, o2, o3] = fp.offsets[plane];
            for ch in 0..d {
                let (c0, c1, c2, c3) = (
                    self.data[o0 + ch],
                    self.data[o1 + ch],
                    self.data[o2 + ch],
                    self.data[o3 + ch],
                );
                let du = ((1.0 - fv) * (c1 - c0) + fv * (c3 - c2)) * su;
                let dv = ((1.0 - fu) * (c2 - c0) + fu * (c3 - c1)) * sv;
                if gu_in {
                    jac[k + ch][au] += du;
                }
                if gv_in {
                    jac[k + ch][av] += dv;
                }
            }
            k += d;
        }
        jac
    }
}

/// Sinusoidal lifting of a unit view direction. Each component `x` becomes
/// `(x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub bands: usize,
}

impl PositionalEncoding {
    pub fn new(bands: usize) -> Self {
        Self { bands }
    }

    pub fn output_dim(&self) -> usize {
        3 * (2 * self.bands + 1)
    }

    pub fn encode(&self, direction: &Vec3) -> Vec<f64> {
        let norm = direction.norm();
        let v = if (norm - 1.0).abs() > 1e-6 {
            log::warn!("view direction has norm {norm}; normalising before encoding");
            direction / norm
        } else {
            *direction
        };
        let mut out = Vec::with_capacity(self.output_dim());
        for &x in v.iter() {
            out.push(x);
            for l in 0..self.bands {
                let arg = (1u64 << l) as f64 * std::f64::consts::PI * x;
                out.push(arg.sin());
                out.push(arg.cos());
            }
        }
        out
    }
}

/// Fully connected decoder: ReLU on hidden layers, logistic output.
///
/// Parameters are stored flat; layer `l` holds a row-major
/// `sizes[l+1] x sizes[l]` weight matrix followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDecoder {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    feature_dim: usize,
}

/// Forward activations of one decoder evaluation.
#[derive(Debug, Clone, Default)]
pub struct DecoderCache {
    /// Post-activation outputs of every hidden layer.
    pub hidden: Vec<Vec<f64>>,
    pub output: [f64; 3],
}

impl MlpDecoder {
    /// `sizes` lists layer widths from input to output; the input is the
    /// tri-plane feature followed by the encoded view direction.
    pub fn zeros(feature_dim: usize, sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || *sizes.last().unwrap() != 3 || sizes[0] <= feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "decoder sizes {sizes:?} must start above the feature dim {feature_dim} and end in 3"
            )));
        }
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut total = 0;
        for w in sizes.windows(2) {
            offsets.push(total);
            total += w[0] * w[1] + w[1];
        }
        offsets.push(total);
        Ok(Self {
            sizes,
            offsets,
            params: vec![0.0; total],
            feature_dim,
        })
    }

    /// Three-layer decoder with fan-in scaled uniform weights and zero biases.
    pub fn init(feature_dim: usize, view_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut d = Self::zeros(feature_dim, vec![feature_dim + view_dim, hidden, hidden, 3])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..d.layer_count() {
            let (n_in, n_out) = (d.sizes[l], d.sizes[l + 1]);
            let bound = 1.0 / (n_in as f64).sqrt();
            let o = d.offsets[l];
            for w in &mut d.params[o..o + n_in * n_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(d)
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn view_dim(&self) -> usize {
        self.sizes[0] - self.feature_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Flat ranges of layer `l`'s weight matrix and bias.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let o = self.offsets[l];
        let nw = self.sizes[l] * self.sizes[l + 1];
        (o..o + nw, o + nw..o + nw + self.sizes[l + 1])
    }

    /// `c = D(PE(v), t(p))`.
    pub fn decode(&self, encoded_view: &[f64], feature: &[f64]) -> Result<[f64; 3]> {
        if feature.len() != self.feature_dim || encoded_view.len() != self.view_dim() {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects feature {} + view {}, got {} + {}",
                self.feature_dim,
                self.view_dim(),
                feature.len(),
                encoded_view.len()
            )));
        }
        let pre = self.view_preactivation(encoded_view);
        let mut cache = DecoderCache::default();
        self.forward(&pre, feature, &mut cache);
        Ok(cache.output)
    }

    /// First-layer contribution of the view encoding plus bias. Constant
    /// along a ray, so it is computed once per ray.
    pub fn view_preactivation(&self, encoded_view: &[f64]) -> Vec<f64> {
        let (w, b) = self.layer_ranges(0);
        let (n_in, n_out) = (self.sizes[0], self.sizes[1]);
        let w = &self.params[w];
        let b = &self.params[b];
        (0..n_out)
            .map(|o| {
                let row = &w[o * n_in + self.feature_dim..(o + 1) * n_in];
                b[o] + dot(row, encoded_view)
            })
            .collect()
    }

    /// Forward pass given the per-ray view pre-activation.
    pub fn forward(&self, view_pre: &[f64], feature: &[f64], cache: &mut DecoderCache) {
        let layers = self.layer_count();
        cache.hidden.resize_with(layers - 1, Vec::new);
        for l in 0..layers {
            let (wr, br) = self.layer_ranges(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[wr];
            let b = &self.params[br];
            let mut z = vec![0.0; n_out];
            for o in 0..n_out {
                z[o] = if l == 0 {
                    view_pre[o] + dot(&w[o * n_in..o * n_in + self.feature_dim], feature)
                } else {
                    b[o] + dot(&w[o * n_in..(o + 1) * n_in], &cache.hidden[l - 1])
                };
            }
            if l + 1 < layers {
                for x in &mut z {
                    *x = x.max(0.0);
                }
                cache.hidden[l] = z;
            } else {
                for (k, x) in z.iter().enumerate() {
                    cache.output[k] = sigmoid(*x);
                }
            }
        }
    }

    /// Backward pass for one evaluation. Adds parameter gradients into
    /// `d_params` (except the view columns of layer 0), writes the feature
    /// gradient into `d_feature`, and adds the first-layer pre-activation
    /// gradient into `d_view_pre` for the per-ray view/bias update.
    pub fn backward(
        &self,
        feature: &[f64],
        cache: &DecoderCache,
        d_output: &[f64; 3],
        d_params: &mut [f64],
        d_feature: &mut [f64],
        d_view_pre: &mut [f64],
    ) {
        let layers = self.layer_count();
        let mut dz: Vec<f64> = (0..3)
            .map(|k| d_output[k] * cache.output[k] * (1.0 - cache.output[k]))
            .collect();
        for l in (0..layers).rev() {
            let (wr, br) = self.layer_ranges(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[wr.clone()];
            if l == 0 {
                let dw = &mut d_params[wr];
                d_feature[..self.feature_dim]
                    .iter_mut()
                    .for_each(|x| *x = 0.0);
                for o in 0..n_out {
                    let g = dz[o];
                    if g == 0.0 {
                        continue;
                    }
                    d_view_pre[o] += g;
                    let row = o * n_in;
                    axpy(g, feature, &mut dw[row..row + self.feature_dim]);
                    axpy(g, &w[row..row + self.feature_dim], d_feature);
                }
            } else {
                let input = &cache.hidden[l - 1];
                let mut d_in = vec![0.0; n_in];
                {
                    let (dw_all, db_all) = d_params.split_at_mut(br.start);
                    let dw = &mut dw_all[wr];
                    let db = &mut db_all[..n_out];
                    for o in 0..n_out {
                        let g = dz[o];
                        if g == 0.0 {
                            continue;
                        }
                        db[o] += g;
                        let row = o * n_in;
                        axpy(g, input, &mut dw[row..row + n_in]);
                        axpy(g, &w[row..row + n_in], &mut d_in);
                    }
                }
                for (d, &h) in d_in.iter_mut().zip(input) {
                    if h <= 0.0 {
                        *d = 0.0;
                    }
                }
                dz = d_in;
            }
        }
    }

    /// Folds the accumulated first-layer pre-activation gradient of one ray
    /// into the view columns and bias of layer 0.
    pub fn backward_view(&self, encoded_view: &[f64], d_view_pre: &[f64], d_params: &mut [f64]) {
        let (wr, br) = self.layer_ranges(0);
        let n_in = self.sizes[0];
        for (o, &g) in d_view_pre.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            d_params[br.start + o] += g;
            let row = wr.start + o * n_in + self.feature_dim;
            axpy(
                g,
                encoded_view,
                &mut d_params[row..row + encoded_view.len()],
            );
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn test_planes(seed: u64) -> TriPlanes {
        let cfg = AppearanceConfig {
            resolution: 6,
            plane_dims: [3, 2, 2],
            init_amplitude: 1.0,
            plane_margin: 0.0,
            ..Default::default()
        };
        TriPlanes::init(
            &cfg,
            &Aabb::new(Vec3::repeat(-1.0), Vec3::repeat(1.0)),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn sample_at_node_returns_node_feature() {
        let t = test_planes(1);
        let p = Vec3::new(
            t.node_position(0, 2),
            t.node_position(1, 3),
            t.node_position(2, 1),
        );
        let (f, clamped) = t.sample(&p);
        assert!(!clamped);
        let expect: Vec<f64> = [t.node(0, 2, 3), t.node(1, 2, 1), t.node(2, 3, 1)].concat();
        for (a, b) in f.iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn sample_at_cell_centre_is_corner_mean() {
        let t = test_planes(2);
        let mid =
            |axis: usize, i: usize| 0.5 * (t.node_position(axis, i) + t.node_position(axis, i + 1));
        let p = Vec3::new(mid(0, 1), mid(1, 1), mid(2, 1));
        let (f, _) = t.sample(&p);
        for ch in 0..3 {
            let m = (t.node(0, 1, 1)[ch]
                + t.node(0, 2, 1)[ch]
                + t.node(0, 1, 2)[ch]
                + t.node(0, 2, 2)[ch])
                / 4.0;
            assert_abs_diff_eq!(f[ch], m, epsilon = 1e-12);
        }
    }

    #[test]
    fn sample_matches_dense_bilinear_oracle() {
        let t = test_planes(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let res = t.resolution();
        for _ in 0..100 {
            let p = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let (f, _) = t.sample(&p);
            let mut k = 0;
            for (plane, &(au, av)) in PLANE_AXES.iter().enumerate() {
                // direct formula: sum over all nodes of hat(u) * hat(v) * feature
                let h = 2.0 / (res - 1) as f64;
                for ch in 0..t.dims()[plane] {
                    let mut acc = 0.0;
                    for v in 0..res {
                        for u in 0..res {
                            let wu = (1.0 - ((p[au] - (-1.0 + u as f64 * h)) / h).abs()).max(0.0);
                            let wv = (1.0 - ((p[av] - (-1.0 + v as f64 * h)) / h).abs()).max(0.0);
                            acc += wu * wv * t.node(plane, u, v)[ch];
                        }
                    }
                    assert_abs_diff_eq!(f[k + ch], acc, epsilon = 1e-9);
                }
                k += t.dims()[plane];
            }
        }
    }

    #[test]
    fn sample_is_bilinear_within_a_cell() {
        let t = test_planes(4);
        let h = 1e-3;
        let p = Vec3::new(0.1, 0.13, -0.07);
        for axis in 0..3 {
            let mut a = p;
            let mut c = p;
            a[axis] -= h;
            c[axis] += h;
            let (fa, _) = t.sample(&a);
            let (fb, _) = t.sample(&p);
            let (fc, _) = t.sample(&c);
            for i in 0..fa.len() {
                assert!((fa[i] - 2.0 * fb[i] + fc[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clamping_is_flagged() {
        let t = test_planes(5);
        let (f_in, c_in) = t.sample(&Vec3::new(1.0, 1.0, 1.0));
        let (f_out, c_out) = t.sample(&Vec3::new(3.0, 1.0, 1.0));
        assert!(!c_in);
        assert!(c_out);
        assert_eq!(f_in, f_out);
    }

    #[test]
    fn position_jacobian_matches_finite_differences() {
        let t = test_planes(6);
        let p = Vec3::new(0.23, -0.41, 0.66);
        let jac = t.position_jacobian(&p);
        let eps = 1e-6;
        for axis in 0..3 {
            let (mut a, mut b) = (p, p);
            a[axis] += eps;
            b[axis] -= eps;
            let (fa, _) = t.sample(&a);
            let (fb, _) = t.sample(&b);
            for i in 0..fa.len() {
                let fd = (fa[i] - fb[i]) / (2.0 * eps);
                let rel = (fd - jac[i][axis]).abs() / fd.abs().max(jac[i][axis].abs()).max(1e-6);
                assert!(rel < 1e-4);
            }
        }
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = PositionalEncoding::new(4);
        assert_eq!(pe.output_dim(), 27);
        let e = pe.encode(&Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(e.len(), 27);
        // y component is zero: raw 0, sin terms 0, cos terms 1
        let y = &e[9..18];
        assert_eq!(y[0], 0.0);
        for l in 0..4 {
            assert_eq!(y[1 + 2 * l], 0.0);
            assert_eq!(y[2 + 2 * l], 1.0);
        }
        let pe1 = PositionalEncoding::new(1);
        let e = pe1.encode(&Vec3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(e[0], 1.0);
        assert_abs_diff_eq!(e[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e[2], -1.0);
        // non-unit input is normalised
        let a = pe.encode(&Vec3::new(0.0, 2.0, 0.0));
        let b = pe.encode(&Vec3::new(0.0, 1.0, 0.0));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_decoder_outputs_half() {
        let d = MlpDecoder::zeros(4, vec![7, 5, 5, 3]).unwrap();
        let c = d.decode(&[0.3, -0.2, 0.9], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(c, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn decoder_rejects_bad_shapes() {
        let d = MlpDecoder::zeros(4, vec![7, 5, 5, 3]).unwrap();
        assert!(matches!(
            d.decode(&[0.0; 2], &[0.0; 4]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(MlpDecoder::zeros(4, vec![7, 5, 2]).is_err());
    }

    #[test]
    fn decoder_matches_dense_matrix_oracle() {
        let d = MlpDecoder::init(2, 1, 4, 17).unwrap();
        let feature = [0.4, -1.3];
        let view = [0.7];
        let input = [feature[0], feature[1], view[0]];
        // independent evaluation with explicit matrices
        let mut x: Vec<f64> = input.to_vec();
        for l in 0..3 {
            let (wr, br) = d.layer_ranges(l);
            let w = &d.params()[wr];
            let b = &d.params()[br];
            let n_in = x.len();
            let mut y: Vec<f64> = (0..b.len())
                .map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
                .collect();
            if l < 2 {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            } else {
                y.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
            }
            x = y;
        }
        let c = d.decode(&view, &feature).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(c[k], x[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn decoder_output_bounded_for_large_weights() {
        let mut d = MlpDecoder::init(3, 2, 8, 5).unwrap();
        d.params_mut().iter_mut().for_each(|w| *w *= 1e3);
        let c = d.decode(&[1.0, -1.0], &[5.0, -3.0, 2.0]).unwrap();
        assert!(c.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let d = MlpDecoder::init(5, 3, 6, 21).unwrap();
        let feature = [0.3, -0.8, 1.1, 0.05, -0.4];
        let view = [0.6, -0.2, 0.9];
        let upstream = [0.7, -1.3, 0.4];
        let loss = |d: &MlpDecoder, f: &[f64]| -> f64 {
            let c = d.decode(&view, f).unwrap();
            (0..3).map(|k| upstream[k] * c[k]).sum()
        };
        let pre = d.view_preactivation(&view);
        let mut cache = DecoderCache::default();
        d.forward(&pre, &feature, &mut cache);
        let mut d_params = vec![0.0; d.params().len()];
        let mut d_feature = vec![0.0; 5];
        let mut d_pre = vec![0.0; 6];
        d.backward(
            &feature,
            &cache,
            &upstream,
            &mut d_params,
            &mut d_feature,
            &mut d_pre,
        );
        d.backward_view(&view, &d_pre, &mut d_params);

        let eps = 1e-6;
        for i in 0..d.params().len() {
            let mut a = d.clone();
            let mut b = d.clone();
            a.params_mut()[i] += eps;
            b.params_mut()[i] -= eps;
            let fd = (loss(&a, &feature) - loss(&b, &feature)) / (2.0 * eps);
            let rel = (fd - d_params[i]).abs() / fd.abs().max(d_params[i].abs()).max(1e-7);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", d_params[i]);
        }
        for i in 0..5 {
            let mut fa = feature;
            let mut fb = feature;
            fa[i] += eps;
            fb[i] -= eps;
            let fd = (loss(&d, &fa) - loss(&d, &fb)) / (2.0 * eps);
            let rel = (fd - d_feature[i]).abs() / fd.abs().max(d_feature[i].abs()).max(1e-7);
            assert!(rel < 1e-4);
        }
    }

    #[test]
    fn identical_calls_are_bit_identical() {
        let d = MlpDecoder::init(4, 27, 16, 2).unwrap();
        let pe = PositionalEncoding::new(4);
        let v = pe.encode(&Vec3::new(0.6, 0.0, 0.8));
        let f = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(d.decode(&v, &f).unwrap(), d.decode(&v, &f).unwrap());
    }
}
