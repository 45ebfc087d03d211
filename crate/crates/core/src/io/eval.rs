//! Evaluation metrics: geometric error against a reference surface and
//! image quality (PSNR, SSIM) against a reference image.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::image::Image;
use crate::io::reference::Reference;
use crate::mesh::TriangleMesh;

/// Mean distance from the mesh vertices to the reference surface. This is
/// one-directional (mesh to reference). Vertices with `exclude[i]` set are
/// left out.
pub fn eval_geometry(
    mesh: &TriangleMesh,
    reference: &Reference,
    exclude: Option<&[bool]>,
) -> Result<f64> {
    if let Some(e) = exclude {
        if e.len() != mesh.vertex_count() {
            return Err(Error::ShapeMismatch(format!(
                "exclusion mask has {} entries for {} vertices",
                e.len(),
                mesh.vertex_count()
            )));
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, v) in mesh.vertices().iter().enumerate() {
        if exclude.is_some_and(|e| e[i]) {
            continue;
        }
        sum += reference.distance(v)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "no vertices left to evaluate".into(),
        ));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderMetrics {
    /// `f64::INFINITY` for identical images.
    pub psnr: f64,
    pub ssim: f64,
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// PSNR (peak 1) over masked pixels and mean SSIM over masked pixel
/// centres. The Gaussian window is truncated and renormalised at image
/// borders, so small images are handled without padding artefacts.
pub fn eval_render(
    rendered: &Image,
    reference: &Image,
    mask: Option<&[bool]>,
) -> Result<RenderMetrics> {
    let (w, h, c) = (reference.width(), reference.height(), reference.channels());
    if rendered.width() != w || rendered.height() != h || rendered.channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "rendered image is {}x{}x{}, reference is {w}x{h}x{c}",
            rendered.width(),
            rendered.height(),
            rendered.channels()
        )));
    }
    let all = vec![true; w * h];
    let mask = mask.unwrap_or(&all);
    if mask.len() != w * h {
        return Err(Error::ShapeMismatch(
            "mask size differs from the image".into(),
        ));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let mut se = 0.0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for k in 0..c {
            let d = rendered.data()[i * c + k] - reference.data()[i * c + k];
            se += d * d;
        }
    }
    let mse = se / (n * c) as f64;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    };

    let kernel: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let x = i as f64 - SSIM_RADIUS as f64;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let mut ssim_sum = 0.0;
    for k in 0..c {
        let x: Vec<f64> = (0..w * h).map(|i| rendered.data()[i * c + k]).collect();
        let y: Vec<f64> = (0..w * h).map(|i| reference.data()[i * c + k]).collect();
        let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
        let yy: Vec<f64> = y.iter().map(|a| a * a).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let [mx, my, sxx, syy, sxy] =
            [&x, &y, &xx, &yy, &xy].map(|f| gaussian_blur(f, w, h, &kernel));
        for i in (0..w * h).filter(|&i| mask[i]) {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cxy = sxy[i] - mx[i] * my[i];
            ssim_sum += ((2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(RenderMetrics {
        psnr,
        ssim: ssim_sum / (n * c) as f64,
    })
}

/// Separable blur with a kernel that is renormalised where it leaves the
/// image.
fn gaussian_blur(f: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                let lo = pos.saturating_sub(r);
                let hi = (pos + r).min(len - 1);
                let (mut acc, mut norm) = (0.0, 0.0);
                for q in lo..=hi {
                    let kw = kernel[q + r - pos];
                    let idx = if horizontal { y * w + q } else { q * w + x };
                    acc += kw * src[idx];
                    norm += kw;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(f, true), false)
}

/// Writes `header` and `rows` as CSV.
pub fn write_metrics_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::io::reference::SurfaceSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere(r: f64) -> Reference {
        Reference::build(
            &SurfaceSpec::Ellipsoid {
                center: [0.0; 3],
                radii: [r; 3],
            },
            Path::new(""),
        )
        .unwrap()
    }

    #[test]
    fn geometry_error_of_the_reference_itself_is_zero() {
        let mesh = TriangleMesh::icosphere(3, 1.0);
        assert!(eval_geometry(&mesh, &sphere(1.0), None).unwrap() < 1e-12);
    }

    #[test]
    fn geometry_error_between_concentric_spheres() {
        let mesh = TriangleMesh::icosphere(3, 1.0);
        let e = eval_geometry(&mesh, &sphere(1.1), None).unwrap();
        assert!((e - 0.1).abs() < 1e-3);
    }

    #[test]
    fn geometry_error_is_one_directional() {
        // a small cap of vertices sits on the sphere; the rest of the
        // sphere is not covered, which the metric does not see
        let mut mesh = TriangleMesh::icosphere(2, 1.0);
        let keep: Vec<bool> = mesh.vertices().iter().map(|v| v.z > 0.9).collect();
        let exclude: Vec<bool> = keep.iter().map(|k| !k).collect();
        assert!(eval_geometry(&mesh, &sphere(1.0), Some(&exclude)).unwrap() < 1e-12);
        mesh.vertices_mut()[0] = Vec3::new(0.0, 0.0, 5.0);
        assert!(eval_geometry(&mesh, &sphere(1.0), None).unwrap() > 0.0);
        assert!(
            eval_geometry(&mesh, &sphere(1.0), Some(&vec![true; mesh.vertex_count()])).is_err()
        );
    }

    fn noise(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(
            w,
            h,
            3,
            (0..w * h * 3).map(|_| rng.random_range(0.1..0.9)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_images() {
        let a = noise(16, 12, 1);
        let m = eval_render(&a, &a, None).unwrap();
        assert_eq!(m.psnr, f64::INFINITY);
        assert!((m.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_gives_twenty_db() {
        let a = noise(16, 12, 2);
        let mut b = a.clone();
        b.data_mut().iter_mut().for_each(|x| *x += 0.1);
        let m = eval_render(&b, &a, None).unwrap();
        assert!((m.psnr - 20.0).abs() < 1e-9);
    }

    #[test]
    fn negative_image_has_low_ssim() {
        let a = noise(32, 32, 3);
        let mut b = a.clone();
        b.data_mut().iter_mut().for_each(|x| *x = 1.0 - *x);
        assert!(eval_render(&b, &a, None).unwrap().ssim < 0.1);
    }

    #[test]
    fn psnr_respects_the_mask() {
        let a = noise(4, 4, 4);
        let mut b = a.clone();
        b.data_mut()[0] += 0.5;
        let mut mask = vec![true; 16];
        mask[0] = false;
        assert_eq!(
            eval_render(&b, &a, Some(&mask)).unwrap().psnr,
            f64::INFINITY
        );
        assert!(matches!(
            eval_render(&b, &a, Some(&[false; 16])),
            Err(Error::NoValidPixels)
        ));
        assert!(eval_render(&noise(4, 5, 1), &a, None).is_err());
    }
}
