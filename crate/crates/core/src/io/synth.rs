//! Synthetic scenes with a known surface.
//!
//! Images are produced by ray casting the analytic reference surface with a
//! procedural texture; nothing here goes through the mesh renderer, so the
//! images can serve as an independent target. Each pixel is supersampled
//! on a regular grid; the mask marks pixels with at least half coverage.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Ray, Vec3};
use crate::io::image::Image;
use crate::io::reference::{Lobe, Reference, SurfaceSpec};
use crate::io::scene::{SceneBundle, View};
use crate::losses::{Landmark, LandmarkSet};
use crate::mesh::TriangleMesh;
use crate::render::Camera;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Texture {
    Constant {
        color: [f64; 3],
    },
    /// Each channel varies along one coordinate plane:
    /// red over (x, y), green over (x, z), blue over (y, z).
    Sinusoid {
        period: f64,
        amplitude: f64,
    },
}

impl Texture {
    pub fn color(&self, p: &Vec3) -> [f64; 3] {
        match self {
            Texture::Constant { color } => *color,
            Texture::Sinusoid { period, amplitude } => {
                let w = 2.0 * PI / period;
                let f = |a: f64, b: f64, pa: f64, pb: f64| {
                    0.5 + amplitude * (w * a + pa).sin() * (w * b + pb).cos()
                };
                [
                    f(p.x, p.y, 0.3, -0.7),
                    f(p.x, p.z, 1.1, 0.4),
                    f(p.y, p.z, -0.5, 0.9),
                ]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub surface: SurfaceSpec,
    pub texture: Texture,
    pub template_subdivisions: u32,
    pub template_radius: f64,
    /// Training views on a ring around the vertical axis, alternating
    /// between the two elevations.
    pub views: usize,
    pub holdout_views: usize,
    pub elevations_deg: [f64; 2],
    pub distance: f64,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub supersample: usize,
    /// The first `landmark_vertices` template vertices get landmarks.
    pub landmark_vertices: usize,
    pub background: [f64; 3],
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            surface: SurfaceSpec::Ellipsoid {
                center: [0.0; 3],
                radii: [12.0, 9.5, 8.0],
            },
            texture: Texture::Sinusoid {
                period: 20.0,
                amplitude: 0.3,
            },
            template_subdivisions: 3,
            template_radius: 10.0,
            views: 12,
            holdout_views: 1,
            elevations_deg: [15.0, -15.0],
            distance: 40.0,
            focal: 150.0,
            width: 128,
            height: 128,
            supersample: 4,
            landmark_vertices: 42,
            background: [0.0; 3],
        }
    }
}

impl FixtureConfig {
    /// A sphere template fitted to a two-lobed blob, harder than the
    /// ellipsoid because of the concave neck between the lobes.
    pub fn blob() -> Self {
        Self {
            surface: SurfaceSpec::Blob {
                center: [0.0; 3],
                radius: 9.0,
                lobes: vec![
                    Lobe {
                        direction: [1.0, 0.2, 0.0],
                        amplitude: 0.35,
                        sharpness: 2.5,
                    },
                    Lobe {
                        direction: [-1.0, 0.0, 0.3],
                        amplitude: 0.3,
                        sharpness: 2.5,
                    },
                ],
            },
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    fn surface_center(&self) -> Vec3 {
        match &self.surface {
            SurfaceSpec::Ellipsoid { center, .. } | SurfaceSpec::Blob { center, .. } => {
                Vec3::from(*center)
            }
            SurfaceSpec::Mesh { .. } => Vec3::zeros(),
        }
    }

    /// Training cameras followed by holdout cameras.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let c = self.surface_center();
        let ring = |azimuth: f64, elevation: f64| {
            let (el, az) = (elevation.to_radians(), azimuth);
            let eye =
                c + self.distance * Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
            Camera::look_at(eye, c, Vec3::y(), self.focal, self.width, self.height)
        };
        let n = self.views;
        let mut out = Vec::with_capacity(n + self.holdout_views);
        for i in 0..n {
            out.push(ring(
                2.0 * PI * i as f64 / n as f64,
                self.elevations_deg[i % 2],
            )?);
        }
        for j in 0..self.holdout_views {
            // between training views, at the mean elevation
            let az = 2.0 * PI * (j as f64 + 0.5) / self.holdout_views.max(1) as f64
                + PI / n.max(1) as f64;
            out.push(ring(
                az,
                0.5 * (self.elevations_deg[0] + self.elevations_deg[1]),
            )?);
        }
        Ok(out)
    }
}

/// Pixel ray from the raw camera matrices: `d ~ R^T K^-1 [u, v, 1]`.
fn pixel_ray(k_inv: &Matrix3<f64>, r: &Matrix3<f64>, center: &Vec3, u: f64, v: f64) -> Ray {
    let d = r.transpose() * (k_inv * Vec3::new(u, v, 1.0));
    Ray::new(*center, d)
}

/// Renders the reference surface from `camera`: RGB image and coverage.
pub fn render_reference(
    reference: &Reference,
    texture: &Texture,
    camera: &Camera,
    supersample: usize,
    background: [f64; 3],
) -> Result<(Image, Image)> {
    let (w, h) = (camera.width(), camera.height());
    let n = supersample.max(1);
    let k_inv = camera
        .k()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("singular intrinsics".into()))?;
    let r = *camera.r();
    let center = -(r.transpose() * camera.t());
    let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgb = Vec::with_capacity(3 * w);
            let mut cov = Vec::with_capacity(w);
            for x in 0..w {
                let mut acc = [0.0; 3];
                let mut hits = 0usize;
                for sy in 0..n {
                    for sx in 0..n {
                        let u = x as f64 + (sx as f64 + 0.5) / n as f64;
                        let v = y as f64 + (sy as f64 + 0.5) / n as f64;
                        let ray = pixel_ray(&k_inv, &r, &center, u, v);
                        let c = match reference.intersect(&ray)? {
                            Some(t) => {
                                hits += 1;
                                texture.color(&ray.at(t))
                            }
                            None => background,
                        };
                        for i in 0..3 {
                            acc[i] += c[i];
                        }
                    }
                }
                let m = (n * n) as f64;
                rgb.extend(acc.map(|a| a / m));
                cov.push(hits as f64 / m);
            }
            Ok((rgb, cov))
        })
        .collect();
    let mut rgb = Vec::with_capacity(3 * w * h);
    let mut cov = Vec::with_capacity(w * h);
    for row in rows {
        let (a, b) = row?;
        rgb.extend(a);
        cov.extend(b);
    }
    Ok((
        Image::from_data(w, h, 3, rgb)?,
        Image::from_data(w, h, 1, cov)?,
    ))
}

/// Whether `p` on the reference is seen by `camera`: it faces the camera
/// and the first hit along the camera ray is `p` itself.
fn visible(reference: &Reference, camera: &Camera, p: &Vec3) -> Result<bool> {
    let eye = -(camera.r().transpose() * camera.t());
    let to_eye = eye - p;
    if reference.normal(p)?.dot(&to_eye) <= 0.0 {
        return Ok(false);
    }
    let ray = Ray::new(eye, p - eye);
    Ok(match reference.intersect(&ray)? {
        Some(t) => (t - to_eye.norm()).abs() < 1e-3 * to_eye.norm(),
        None => false,
    })
}

/// Generates the fixture in memory.
pub fn synth_scene(config: &FixtureConfig) -> Result<SceneBundle> {
    if config.views < 2 {
        return Err(Error::InvalidArgument(
            "a fixture needs at least two training views".into(),
        ));
    }
    let reference = Reference::build(&config.surface, Path::new(""))?;
    let center = config.surface_center();
    let mut template =
        TriangleMesh::icosphere(config.template_subdivisions, config.template_radius);
    let moved: Vec<Vec3> = template.vertices().iter().map(|v| v + center).collect();
    template.set_vertices(moved)?;

    let cameras = config.cameras()?;
    let mut views = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let (image, coverage) = render_reference(
            &reference,
            &config.texture,
            cam,
            config.supersample,
            config.background,
        )?;
        let (w, h) = (cam.width(), cam.height());
        let touches = (0..w)
            .any(|x| coverage.pixel(x, 0)[0] > 0.0 || coverage.pixel(x, h - 1)[0] > 0.0)
            || (0..h).any(|y| coverage.pixel(0, y)[0] > 0.0 || coverage.pixel(w - 1, y)[0] > 0.0);
        if touches {
            return Err(Error::InvalidArgument(format!(
                "view {i}: the surface reaches the image border"
            )));
        }
        let mask = Image::from_mask(&coverage.to_mask(), w, h)?;
        let holdout = i >= config.views;
        views.push(View {
            name: if holdout {
                format!("holdout_{:03}", i - config.views)
            } else {
                format!("view_{i:03}")
            },
            camera: cam.clone(),
            image,
            mask: Some(mask),
            holdout,
        });
    }

    let mut entries = Vec::new();
    let n_land = config.landmark_vertices.min(template.vertex_count());
    for vi in 0..n_land {
        let p = reference.radial_point(&(template.vertices()[vi] - center))?;
        for (view, cam) in cameras.iter().enumerate().take(config.views) {
            if !visible(&reference, cam, &p)? {
                continue;
            }
            let pixel = cam.project(&p)?;
            let mask = views[view].mask.as_ref().expect("fixture views have masks");
            if mask.sample_nearest(pixel[0], pixel[1]) < 0.5 {
                continue;
            }
            entries.push(Landmark {
                view,
                vertex: vi,
                pixel,
            });
        }
    }

    let bundle = SceneBundle {
        scale_hint: Some(template.bounding_box().diagonal()),
        template,
        views,
        landmarks: LandmarkSet::new(entries),
        ground_truth: Some(config.surface.clone()),
        root: PathBuf::new(),
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Generates the fixture and writes it under `dir`; returns the manifest.
pub fn write_fixture(config: &FixtureConfig, dir: &Path) -> Result<(SceneBundle, PathBuf)> {
    let mut bundle = synth_scene(config)?;
    let manifest = bundle.save(dir)?;
    bundle.root = dir.to_path_buf();
    Ok((bundle, manifest))
}
