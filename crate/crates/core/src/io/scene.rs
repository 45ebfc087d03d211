//! Scene bundles: template mesh, calibrated views, masks and landmarks.
//!
//! A scene is described by a TOML manifest:
//!
//! ```toml
//! template = "template.obj"
//! landmarks = "landmarks.csv"      # optional: view_id,vertex_index,u,v
//! scale_hint = 1.0                 # optional
//!
//! [ground_truth]                   # optional, for evaluation
//! kind = "ellipsoid"
//! center = [0.0, 0.0, 0.0]
//! radii = [12.0, 9.5, 8.0]
//!
//! [[views]]
//! name = "view_000"
//! width = 128
//! height = 128
//! K = [150.0, 0.0, 64.0, 0.0, 150.0, 64.0, 0.0, 0.0, 1.0]   # row-major
//! R = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]         # row-major
//! t = [0.0, 0.0, 40.0]
//! image = "images/view_000.ppm"
//! mask = "masks/view_000.pgm"
//! holdout = false
//! ```
//!
//! Paths are relative to the manifest. Images are linear-light.

use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::io::image::Image;
use crate::io::obj::{read_obj, write_obj};
use crate::io::reference::SurfaceSpec;
use crate::losses::{Landmark, LandmarkSet};
use crate::mesh::TriangleMesh;
use crate::render::Camera;

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub image: Image,
    pub mask: Option<Image>,
    pub holdout: bool,
}

#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub template: TriangleMesh,
    pub views: Vec<View>,
    pub landmarks: LandmarkSet,
    pub scale_hint: Option<f64>,
    pub ground_truth: Option<SurfaceSpec>,
    /// Directory that relative reference paths resolve against.
    pub root: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    template: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    landmarks: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale_hint: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<SurfaceSpec>,
    views: Vec<ViewEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ViewEntry {
    #[serde(default)]
    name: Option<String>,
    width: usize,
    height: usize,
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<PathBuf>,
    #[serde(default)]
    holdout: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRecord {
    view_id: usize,
    vertex_index: usize,
    u: f64,
    v: f64,
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

impl SceneBundle {
    pub fn validate(&self) -> Result<()> {
        if self.views.len() < 2 {
            return Err(Error::InvalidScene(format!(
                "a scene needs at least two views, found {}",
                self.views.len()
            )));
        }
        for (i, v) in self.views.iter().enumerate() {
            let (w, h) = (v.camera.width(), v.camera.height());
            if v.image.width() != w || v.image.height() != h {
                return Err(Error::InvalidScene(format!(
                    "view {i} ({}): image is {}x{} but the camera is {w}x{h}",
                    v.name,
                    v.image.width(),
                    v.image.height()
                )));
            }
            if v.image.channels() != 3 {
                return Err(Error::InvalidScene(format!(
                    "view {i} ({}): image must be RGB",
                    v.name
                )));
            }
            if let Some(m) = &v.mask {
                if m.width() != w || m.height() != h {
                    return Err(Error::InvalidScene(format!(
                        "view {i} ({}): mask is {}x{} but the image is {w}x{h}",
                        v.name,
                        m.width(),
                        m.height()
                    )));
                }
            }
        }
        if self.training_views().is_empty() {
            return Err(Error::InvalidScene("every view is marked holdout".into()));
        }
        self.landmarks
            .validate(self.template.vertex_count(), self.views.len())
    }

    pub fn training_views(&self) -> Vec<usize> {
        (0..self.views.len())
            .filter(|&i| !self.views[i].holdout)
            .collect()
    }

    pub fn holdout_views(&self) -> Vec<usize> {
        (0..self.views.len())
            .filter(|&i| self.views[i].holdout)
            .collect()
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }

    /// Keeps only the listed views, in the given order; landmarks follow.
    pub fn select_views(&self, keep: &[usize]) -> Result<SceneBundle> {
        let mut remap = vec![None; self.views.len()];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.views.len() {
                return Err(Error::InvalidArgument(format!("view {old} does not exist")));
            }
            remap[old] = Some(new);
        }
        let landmarks = LandmarkSet::new(
            self.landmarks
                .entries
                .iter()
                .filter_map(|l| remap[l.view].map(|v| Landmark { view: v, ..*l }))
                .collect(),
        );
        let bundle = SceneBundle {
            template: self.template.clone(),
            views: keep.iter().map(|&i| self.views[i].clone()).collect(),
            landmarks,
            scale_hint: self.scale_hint,
            ground_truth: self.ground_truth.clone(),
            root: self.root.clone(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Reads and validates the scene described by `manifest`.
    pub fn load(manifest: &Path) -> Result<SceneBundle> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let m: Manifest =
            toml::from_str(&text).map_err(|e| Error::parse(manifest, e.to_string()))?;
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let template = read_obj(&root.join(&m.template))?;
        let mut views = Vec::with_capacity(m.views.len());
        for (i, v) in m.views.into_iter().enumerate() {
            let k = Matrix3::from_row_slice(&v.k);
            let r = Matrix3::from_row_slice(&v.r);
            let camera = Camera::new(k, r, Vec3::from(v.t), v.width, v.height)
                .map_err(|e| Error::InvalidScene(format!("view {i}: {e}")))?;
            let image = Image::read(&root.join(&v.image))?;
            let mask = v
                .mask
                .as_ref()
                .map(|p| Image::read(&root.join(p)))
                .transpose()?;
            views.push(View {
                name: v.name.unwrap_or_else(|| format!("view_{i:03}")),
                camera,
                image,
                mask,
                holdout: v.holdout,
            });
        }
        let landmarks = match &m.landmarks {
            Some(p) => read_landmarks(&root.join(p))?,
            None => LandmarkSet::default(),
        };
        let bundle = SceneBundle {
            template,
            views,
            landmarks,
            scale_hint: m.scale_hint,
            ground_truth: m.ground_truth,
            root,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Writes the bundle under `dir` with a `scene.toml` manifest, 16-bit
    /// images and 8-bit masks. Returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        for sub in ["images", "masks"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        write_obj(&self.template, &dir.join("template.obj"))?;
        let mut entries = Vec::with_capacity(self.views.len());
        for v in &self.views {
            let image = PathBuf::from("images").join(format!("{}.ppm", v.name));
            v.image.write_pnm(&dir.join(&image), 16)?;
            let mask = match &v.mask {
                Some(m) => {
                    let p = PathBuf::from("masks").join(format!("{}.pgm", v.name));
                    m.write_pnm(&dir.join(&p), 8)?;
                    Some(p)
                }
                None => None,
            };
            entries.push(ViewEntry {
                name: Some(v.name.clone()),
                width: v.camera.width(),
                height: v.camera.height(),
                k: row_major(v.camera.k()),
                r: row_major(v.camera.r()),
                t: [v.camera.t().x, v.camera.t().y, v.camera.t().z],
                image,
                mask,
                holdout: v.holdout,
            });
        }
        let landmarks = if self.landmarks.is_empty() {
            None
        } else {
            let p = PathBuf::from("landmarks.csv");
            write_landmarks(&self.landmarks, &dir.join(&p))?;
            Some(p)
        };
        let manifest = Manifest {
            template: PathBuf::from("template.obj"),
            landmarks,
            scale_hint: self.scale_hint,
            ground_truth: self.ground_truth.clone(),
            views: entries,
        };
        let text = toml::to_string(&manifest)
            .map_err(|e| Error::InvalidScene(format!("manifest encoding: {e}")))?;
        let path = dir.join("scene.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let mut entries = Vec::new();
    for rec in rdr.deserialize::<LandmarkRecord>() {
        let r = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        entries.push(Landmark {
            view: r.view_id,
            vertex: r.vertex_index,
            pixel: [r.u, r.v],
        });
    }
    Ok(LandmarkSet::new(entries))
}

pub fn write_landmarks(set: &LandmarkSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    for l in &set.entries {
        w.serialize(LandmarkRecord {
            view_id: l.view,
            vertex_index: l.vertex,
            u: l.pixel[0],
            v: l.pixel[1],
        })
        .map_err(|e| Error::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> SceneBundle {
        let template = TriangleMesh::new(
            vec![
                Vec3::zeros(),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let views = (0..2)
            .map(|i| {
                let cam = Camera::look_at(
                    Vec3::new(i as f64, 0.0, 5.0),
                    Vec3::zeros(),
                    Vec3::y(),
                    2.0,
                    2,
                    2,
                )
                .unwrap();
                let mut image = Image::new(2, 2, 3);
                image.set_pixel(1, 0, &[0.25, 0.5, 1.0]);
                View {
                    name: format!("v{i}"),
                    camera: cam,
                    image,
                    mask: Some(Image::from_mask(&[true, false, false, true], 2, 2).unwrap()),
                    holdout: false,
                }
            })
            .collect();
        SceneBundle {
            template,
            views,
            landmarks: LandmarkSet::new(vec![Landmark {
                view: 1,
                vertex: 2,
                pixel: [0.5, 1.25],
            }]),
            scale_hint: None,
            ground_truth: None,
            root: PathBuf::new(),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = minimal();
        let manifest = scene.save(dir.path()).unwrap();
        let back = SceneBundle::load(&manifest).unwrap();
        assert_eq!(back.views.len(), 2);
        assert_eq!(back.template.faces(), scene.template.faces());
        for (a, b) in back
            .template
            .vertices()
            .iter()
            .zip(scene.template.vertices())
        {
            assert!((a - b).norm() < 1e-6);
        }
        assert_eq!(back.landmarks, scene.landmarks);
        for (a, b) in back.views.iter().zip(&scene.views) {
            assert_eq!(a.camera, b.camera);
            assert_eq!(a.mask, b.mask);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn mismatched_mask_names_the_view() {
        let dir = tempfile::tempdir().unwrap();
        let mut scene = minimal();
        scene.views[1].mask = Some(Image::new(3, 2, 1));
        let err = scene.validate().unwrap_err().to_string();
        assert!(err.contains("view 1"), "{err}");
        scene.views[1].mask = None;
        let manifest = scene.save(dir.path()).unwrap();
        // corrupt the mask of view 0 on disk
        Image::new(3, 3, 1)
            .write_pnm(&dir.path().join("masks/v0.pgm"), 8)
            .unwrap();
        let err = SceneBundle::load(&manifest).unwrap_err().to_string();
        assert!(err.contains("view 0"), "{err}");
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = minimal().save(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("images/v1.ppm")).unwrap();
        let err = SceneBundle::load(&manifest).unwrap_err().to_string();
        assert!(err.contains("v1.ppm"), "{err}");
    }

    #[test]
    fn too_few_views_rejected() {
        let mut scene = minimal();
        scene.views.pop();
        assert!(scene.validate().is_err());
    }

    #[test]
    fn selecting_views_remaps_landmarks() {
        let scene = minimal();
        let sub = scene.select_views(&[1, 0]).unwrap();
        assert_eq!(sub.landmarks.entries[0].view, 0);
        assert!(scene.select_views(&[0]).is_err());
    }
}
