//! End-to-end gradient check on a small built-in scene.
//!
//! A level-2 icosphere is rendered from two cameras; colour, opacity and
//! Laplacian terms are summed and the analytic gradient of that total is
//! compared with central differences at randomly chosen entries of every
//! parameter group. Ray samples are planned once and then frozen, so the
//! finite differences see the same sample positions as the backward pass.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::appearance::{AppearanceConfig, MlpDecoder, PositionalEncoding, TriPlanes};
use crate::error::Result;
use crate::geometry::Vec3;
use crate::losses::laplacian_loss;
use crate::mesh::TriangleMesh;
use crate::objective::{
    add_vertex_grad, color_loss_with_grad, mask_loss_with_grad, plan_jobs, RayJob, RayPlans,
};
use crate::params::{fd_check, FdOptions, FdReport, GradStore, GroupFlags, ParamGroup, ParamStore};
use crate::render::{derive_seed, Camera, DensityMapping, RenderContext, RenderSettings};
use crate::spatial::{Octree, OctreeParams};

const MASK_WEIGHT: f64 = 0.5;
const LAPLACIAN_WEIGHT: f64 = 0.1;

/// Relative error limits per group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub appearance: f64,
    pub vertices: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            appearance: 1e-3,
            vertices: 5e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSummary {
    pub group: ParamGroup,
    pub sampled: usize,
    /// Entries on a kink (region or triangle switch) that were skipped.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GroupSummary {
    pub fn passed(&self) -> bool {
        // most sampled entries have to be usable, not just the survivors
        self.sampled > 0 && self.skipped * 2 < self.sampled && self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub groups: Vec<GroupSummary>,
    pub raw: FdReport,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupSummary::passed)
    }
}

/// Parameters, cameras and ray jobs of the micro-scene.
pub struct MicroScene {
    pub params: ParamStore,
    pub cameras: Vec<Camera>,
    pub jobs: Vec<RayJob>,
    pub settings: RenderSettings,
}

impl MicroScene {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x9c]));
        let mut mesh = TriangleMesh::icosphere(2, 1.0);
        // a little irregularity so no two vertices behave alike
        for v in mesh.vertices_mut() {
            *v *= 1.0 + rng.random_range(-0.05..0.05);
        }
        let cfg = AppearanceConfig {
            resolution: 6,
            plane_dims: [3, 2, 2],
            hidden_width: 8,
            init_amplitude: 0.5,
            plane_margin: 0.3,
            ..Default::default()
        };
        let planes = TriPlanes::init(&cfg, &mesh.bounding_box(), derive_seed(seed, &[1]))?;
        let view_dim = PositionalEncoding::new(cfg.pe_bands).output_dim();
        let decoder = MlpDecoder::init(
            planes.feature_dim(),
            view_dim,
            cfg.hidden_width,
            derive_seed(seed, &[2]),
        )?;
        let mut params = ParamStore::new(mesh, planes, decoder, DensityMapping::new(8.0))?;
        params.set_learnable(GroupFlags::ALL);

        let size = 12;
        let cameras = vec![
            Camera::look_at(
                Vec3::new(0.3, 0.2, 4.0),
                Vec3::zeros(),
                Vec3::y(),
                20.0,
                size,
                size,
            )?,
            Camera::look_at(
                Vec3::new(-3.5, 1.0, -1.5),
                Vec3::zeros(),
                Vec3::y(),
                20.0,
                size,
                size,
            )?,
        ];
        let mut jobs = Vec::new();
        for view in 0..cameras.len() {
            for k in 0..24 {
                let pixel = [
                    rng.random_range(1.0..size as f64 - 1.0),
                    rng.random_range(1.0..size as f64 - 1.0),
                ];
                let target = [
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                ];
                jobs.push(RayJob {
                    view,
                    pixel,
                    seed: derive_seed(seed, &[3, view as u64, k]),
                    target,
                    foreground: rng.random_bool(0.7),
                });
            }
        }
        let settings = RenderSettings {
            weight_cutoff: 0.0,
            ..Default::default()
        };
        Ok(Self {
            params,
            cameras,
            jobs,
            settings,
        })
    }

    fn mask_jobs(&self) -> Vec<RayJob> {
        self.jobs
            .iter()
            .map(|j| RayJob {
                target: [if j.foreground { 1.0 } else { 0.0 }, 0.0, 0.0],
                ..*j
            })
            .collect()
    }

    /// Total loss at `params` with frozen samples, and its gradient when
    /// asked for.
    fn loss(
        &self,
        params: &ParamStore,
        plans: &RayPlans,
        grads: Option<&mut GradStore>,
    ) -> Result<f64> {
        let tree = Octree::build(&params.mesh, OctreeParams::default())?;
        let ctx = RenderContext::new(params, &tree, &self.settings)?;
        let mut local = GradStore::zeros_like(params);
        let color = color_loss_with_grad(
            &ctx,
            &self.cameras,
            &self.jobs,
            Some(plans),
            1,
            GroupFlags::ALL,
            1.0,
            &mut local,
        )?;
        let mask = mask_loss_with_grad(
            &ctx,
            &self.cameras,
            &self.mask_jobs(),
            Some(plans),
            1,
            GroupFlags::ALL,
            MASK_WEIGHT,
            &mut local,
        )?;
        let (lap, g) = laplacian_loss(&params.mesh);
        add_vertex_grad(&mut local, &g, LAPLACIAN_WEIGHT);
        if let Some(out) = grads {
            *out = local;
        }
        Ok(color + MASK_WEIGHT * mask + LAPLACIAN_WEIGHT * lap)
    }
}

/// Runs the check with `per_group` random entries of each group (the
/// density scale has a single entry).
pub fn gradcheck(seed: u64, per_group: usize, tolerances: Tolerances) -> Result<GradCheckReport> {
    let scene = MicroScene::new(seed)?;
    let tree = Octree::build(&scene.params.mesh, OctreeParams::default())?;
    let plans = {
        let ctx = RenderContext::new(&scene.params, &tree, &scene.settings)?;
        plan_jobs(&ctx, &scene.cameras, &scene.jobs)?
    };
    let mut grads = GradStore::zeros_like(&scene.params);
    let loss = scene.loss(&scene.params, &plans, Some(&mut grads))?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4]));
    let mut entries = Vec::new();
    for group in ParamGroup::ALL {
        // entries the loss does not touch would compare zero with zero
        let live: Vec<usize> = (0..scene.params.group_len(group))
            .filter(|&i| grads.get(group, i) != 0.0)
            .collect();
        let n = per_group.min(live.len());
        entries.extend(
            sample(&mut rng, live.len(), n)
                .into_iter()
                .map(|k| (group, live[k])),
        );
    }
    let options = FdOptions {
        eps: 1e-6,
        floor: 1e-7,
        kink_tolerance: 0.05,
    };
    let raw = fd_check(&scene.params, &grads, &entries, options, |p| {
        scene.loss(p, &plans, None)
    })?;
    let groups = ParamGroup::ALL
        .iter()
        .map(|&group| {
            let sampled = raw.entries.iter().filter(|e| e.group == group).count();
            GroupSummary {
                group,
                sampled,
                skipped: sampled - raw.checked(group),
                max_rel_error: raw.max_rel_error(group).unwrap_or(f64::INFINITY),
                tolerance: if group == ParamGroup::Vertices {
                    tolerances.vertices
                } else {
                    tolerances.appearance
                },
            }
        })
        .collect();
    Ok(GradCheckReport { loss, groups, raw })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_scene_passes() {
        let rep = gradcheck(7, 20, Tolerances::default()).unwrap();
        for g in &rep.groups {
            assert!(g.passed(), "{g:?}");
        }
    }

    #[test]
    fn broken_gradient_is_caught() {
        let scene = MicroScene::new(1).unwrap();
        let tree = Octree::build(&scene.params.mesh, OctreeParams::default()).unwrap();
        let ctx = RenderContext::new(&scene.params, &tree, &scene.settings).unwrap();
        let plans = plan_jobs(&ctx, &scene.cameras, &scene.jobs).unwrap();
        let mut grads = GradStore::zeros_like(&scene.params);
        scene.loss(&scene.params, &plans, Some(&mut grads)).unwrap();
        grads.scale_by(1.01);
        let entries: Vec<_> = (0..scene.params.group_len(ParamGroup::Decoder))
            .filter(|&i| grads.get(ParamGroup::Decoder, i) != 0.0)
            .take(5)
            .map(|i| (ParamGroup::Decoder, i))
            .collect();
        let rep = fd_check(&scene.params, &grads, &entries, FdOptions::default(), |p| {
            scene.loss(p, &plans, None)
        })
        .unwrap();
        assert!(rep.max_rel_error(ParamGroup::Decoder).unwrap() > 5e-3);
    }
}
