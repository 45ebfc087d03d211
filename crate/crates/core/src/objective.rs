//! Image-space objectives evaluated over many rays.
//!
//! Work is split into a fixed number of contiguous blocks, each with its own
//! gradient buffer; the blocks run in parallel and are merged in block
//! order, so results depend on the block count but not on thread timing.

use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::Vec3;
use crate::params::{GradStore, GroupFlags, ParamGroup};
use crate::render::{Camera, RayTape, RenderContext};

/// One ray to render: the camera it belongs to, a pixel position, the seed
/// for its sample jitter and the target it is compared with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayJob {
    pub view: usize,
    pub pixel: [f64; 2],
    pub seed: u64,
    pub target: [f64; 3],
    /// Whether the observed pixel is foreground.
    pub foreground: bool,
}

/// Summed loss of a batch before normalisation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchSum {
    pub loss: f64,
    pub count: usize,
}

/// Per-pixel loss: given a job and its rendered tape, the loss value and
/// `dL/dC`, `dL/dO`, or `None` when the pixel is not part of the loss.
pub trait PixelLoss: Sync {
    fn needs_color(&self) -> bool;
    fn eval(&self, job: &RayJob, tape: &RayTape) -> Option<(f64, [f64; 3], f64)>;
}

/// L1 colour difference summed over channels. Culled pixels are excluded,
/// as are pixels that neither reach the mesh band nor show foreground.
pub struct ColorL1;

impl PixelLoss for ColorL1 {
    fn needs_color(&self) -> bool {
        true
    }

    fn eval(&self, job: &RayJob, tape: &RayTape) -> Option<(f64, [f64; 3], f64)> {
        if tape.culled || (tape.samples.is_empty() && !job.foreground) {
            return None;
        }
        let mut loss = 0.0;
        let mut d = [0.0; 3];
        for c in 0..3 {
            let r = tape.color[c] - job.target[c];
            loss += r.abs();
            d[c] = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
        Some((loss, d, 0.0))
    }
}

/// Squared opacity error against a binary target in `target[0]`. Culled
/// pixels count with zero opacity and carry no gradient.
pub struct MaskL2;

impl PixelLoss for MaskL2 {
    fn needs_color(&self) -> bool {
        false
    }

    fn eval(&self, job: &RayJob, tape: &RayTape) -> Option<(f64, [f64; 3], f64)> {
        let o = if tape.culled { 0.0 } else { tape.opacity };
        let r = job.target[0] - o;
        let d = if tape.culled { 0.0 } else { -2.0 * r };
        Some((r * r, [0.0; 3], d))
    }
}

/// Frozen sample positions per job, for finite-difference checks where the
/// sampling must not move with the parameters.
pub type RayPlans = Vec<Vec<f64>>;

/// Plans the samples of every job at the current parameters.
pub fn plan_jobs(ctx: &RenderContext, cameras: &[Camera], jobs: &[RayJob]) -> Result<RayPlans> {
    jobs.iter()
        .map(|j| ctx.plan_ray(&cameras[j.view].generate_ray(j.pixel), j.seed))
        .collect()
}

/// Renders every job, sums the per-pixel loss and, when `grads` is given,
/// accumulates `scale * dL/dparams` for the groups in `flags`.
///
/// The returned sum is unscaled; callers normalise by `count`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<L: PixelLoss>(
    ctx: &RenderContext,
    cameras: &[Camera],
    jobs: &[RayJob],
    plans: Option<&RayPlans>,
    loss: &L,
    workers: usize,
    flags: GroupFlags,
    scale: f64,
    grads: Option<&mut GradStore>,
) -> Result<BatchSum> {
    let workers = workers.max(1);
    let block = jobs.len().div_ceil(workers).max(1);
    let want_grad = grads.is_some();
    let blocks: Vec<Result<(BatchSum, Option<GradStore>)>> = jobs
        .par_chunks(block)
        .enumerate()
        .map(|(b, chunk)| {
            let mut local = want_grad.then(|| GradStore::zeros_like(ctx.params));
            let mut sum = BatchSum::default();
            for (i, job) in chunk.iter().enumerate() {
                let ray = cameras[job.view].generate_ray(job.pixel);
                let tape = match plans {
                    Some(p) => ctx.trace(&ray, &p[b * block + i], loss.needs_color())?,
                    None => ctx.render_ray(&ray, job.seed, loss.needs_color())?,
                };
                let Some((l, dc, dop)) = loss.eval(job, &tape) else {
                    continue;
                };
                sum.loss += l;
                sum.count += 1;
                if let Some(g) = local.as_mut() {
                    let dc = [dc[0] * scale, dc[1] * scale, dc[2] * scale];
                    ctx.backprop(&tape, dc, dop * scale, flags, g);
                }
            }
            Ok((sum, local))
        })
        .collect();
    let mut total = BatchSum::default();
    let mut grads = grads;
    for r in blocks {
        let (s, local) = r?;
        total.loss += s.loss;
        total.count += s.count;
        if let (Some(g), Some(l)) = (grads.as_deref_mut(), local) {
            g.add_assign(&l);
        }
    }
    Ok(total)
}

/// Scales the gradient accumulated with unit weight after the fact, once
/// the normaliser is known, and clears groups outside `flags`.
pub fn finish_gradient(grads: &mut GradStore, factor: f64, flags: GroupFlags) {
    grads.scale_by(factor);
    for g in ParamGroup::ALL {
        if !flags.get(g) {
            grads.zero_group(g);
        }
    }
}

/// Adds `weight * grad` into the vertex gradient.
pub fn add_vertex_grad(grads: &mut GradStore, grad: &[Vec3], weight: f64) {
    for (a, b) in grads.vertices.iter_mut().zip(grad) {
        *a += b * weight;
    }
}

/// Reference used by tests: the colour loss of a batch, parameters only.
pub fn color_loss(
    ctx: &RenderContext,
    cameras: &[Camera],
    jobs: &[RayJob],
    plans: Option<&RayPlans>,
) -> Result<f64> {
    let s = evaluate(
        ctx,
        cameras,
        jobs,
        plans,
        &ColorL1,
        1,
        GroupFlags::NONE,
        1.0,
        None,
    )?;
    if s.count == 0 {
        return Err(crate::error::Error::NoValidPixels);
    }
    Ok(s.loss / (3 * s.count) as f64)
}

/// Mean colour loss; adds `weight` times its gradient into `grads` for the
/// groups in `flags`. Returns the unweighted loss.
#[allow(clippy::too_many_arguments)]
pub fn color_loss_with_grad(
    ctx: &RenderContext,
    cameras: &[Camera],
    jobs: &[RayJob],
    plans: Option<&RayPlans>,
    workers: usize,
    flags: GroupFlags,
    weight: f64,
    grads: &mut GradStore,
) -> Result<f64> {
    let mut local = GradStore::zeros_like(ctx.params);
    let s = evaluate(
        ctx,
        cameras,
        jobs,
        plans,
        &ColorL1,
        workers,
        flags,
        1.0,
        Some(&mut local),
    )?;
    if s.count == 0 {
        return Err(crate::error::Error::NoValidPixels);
    }
    let norm = 1.0 / (3 * s.count) as f64;
    finish_gradient(&mut local, weight * norm, flags);
    grads.add_assign(&local);
    Ok(s.loss * norm)
}

/// Mean opacity error; adds `weight` times its gradient into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn mask_loss_with_grad(
    ctx: &RenderContext,
    cameras: &[Camera],
    jobs: &[RayJob],
    plans: Option<&RayPlans>,
    workers: usize,
    flags: GroupFlags,
    weight: f64,
    grads: &mut GradStore,
) -> Result<f64> {
    let mut local = GradStore::zeros_like(ctx.params);
    let s = evaluate(
        ctx,
        cameras,
        jobs,
        plans,
        &MaskL2,
        workers,
        flags,
        1.0,
        Some(&mut local),
    )?;
    if s.count == 0 {
        return Err(crate::error::Error::NoValidPixels);
    }
    let norm = 1.0 / s.count as f64;
    finish_gradient(&mut local, weight * norm, flags);
    grads.add_assign(&local);
    Ok(s.loss * norm)
}
