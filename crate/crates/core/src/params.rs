//! Optimisable state, gradients, Adam and finite-difference checking.

use serde::{Deserialize, Serialize};

use crate::appearance::{MlpDecoder, TriPlanes};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::mesh::TriangleMesh;
use crate::render::DensityMapping;

/// Smallest density scale kept after an update.
pub const MIN_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Vertices,
    Planes,
    Decoder,
    Scale,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Vertices,
        ParamGroup::Planes,
        ParamGroup::Decoder,
        ParamGroup::Scale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Vertices => "vertices",
            ParamGroup::Planes => "planes",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Scale => "scale",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Which groups take part in the current stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupFlags {
    pub vertices: bool,
    pub planes: bool,
    pub decoder: bool,
    pub scale: bool,
}

impl GroupFlags {
    pub const NONE: GroupFlags = GroupFlags {
        vertices: false,
        planes: false,
        decoder: false,
        scale: false,
    };
    pub const ALL: GroupFlags = GroupFlags {
        vertices: true,
        planes: true,
        decoder: true,
        scale: true,
    };

    pub fn get(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Vertices => self.vertices,
            ParamGroup::Planes => self.planes,
            ParamGroup::Decoder => self.decoder,
            ParamGroup::Scale => self.scale,
        }
    }

    pub fn appearance(&self) -> bool {
        self.planes || self.decoder
    }
}

/// Every optimisable quantity: vertex positions, tri-plane features,
/// decoder weights and the density scale.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub mesh: TriangleMesh,
    pub planes: TriPlanes,
    pub decoder: MlpDecoder,
    pub mapping: DensityMapping,
    learnable: GroupFlags,
}

impl ParamStore {
    pub fn new(
        mesh: TriangleMesh,
        planes: TriPlanes,
        decoder: MlpDecoder,
        mapping: DensityMapping,
    ) -> Result<Self> {
        if planes.feature_dim() != decoder.feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "plane feature dim {} does not match decoder input {}",
                planes.feature_dim(),
                decoder.feature_dim()
            )));
        }
        if !(mapping.scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "density scale must be positive, got {}",
                mapping.scale
            )));
        }
        Ok(Self {
            mesh,
            planes,
            decoder,
            mapping,
            learnable: GroupFlags::NONE,
        })
    }

    pub fn learnable(&self) -> GroupFlags {
        self.learnable
    }

    pub fn set_learnable(&mut self, flags: GroupFlags) {
        self.learnable = flags;
    }

    pub fn group_len(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::Vertices => 3 * self.mesh.vertex_count(),
            ParamGroup::Planes => self.planes.data().len(),
            ParamGroup::Decoder => self.decoder.params().len(),
            ParamGroup::Scale => 1,
        }
    }

    pub fn get(&self, group: ParamGroup, i: usize) -> f64 {
        match group {
            ParamGroup::Vertices => self.mesh.vertices()[i / 3][i % 3],
            ParamGroup::Planes => self.planes.data()[i],
            ParamGroup::Decoder => self.decoder.params()[i],
            ParamGroup::Scale => self.mapping.scale,
        }
    }

    /// Sets one scalar. Vertex edits bump the mesh revision.
    pub fn set(&mut self, group: ParamGroup, i: usize, value: f64) {
        match group {
            ParamGroup::Vertices => self.mesh.vertices_mut()[i / 3][i % 3] = value,
            ParamGroup::Planes => self.planes.data_mut()[i] = value,
            ParamGroup::Decoder => self.decoder.params_mut()[i] = value,
            ParamGroup::Scale => self.mapping.scale = value,
        }
    }

    /// Rounds every parameter to the nearest `f32`, the precision stored in
    /// checkpoints, so a resumed run continues from exactly the saved state.
    pub fn quantize_f32(&mut self) {
        let q = |x: &mut f64| *x = *x as f32 as f64;
        for v in self.mesh.vertices_mut() {
            v.iter_mut().for_each(q);
        }
        self.planes.data_mut().iter_mut().for_each(q);
        self.decoder.params_mut().iter_mut().for_each(q);
        q(&mut self.mapping.scale);
    }
}

/// Gradients paired with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore {
    pub vertices: Vec<Vec3>,
    pub planes: Vec<f64>,
    pub decoder: Vec<f64>,
    pub scale: f64,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            vertices: vec![Vec3::zeros(); params.mesh.vertex_count()],
            planes: vec![0.0; params.planes.data().len()],
            decoder: vec![0.0; params.decoder.params().len()],
            scale: 0.0,
        }
    }

    pub fn clear(&mut self) {
        self.vertices.iter_mut().for_each(|v| *v = Vec3::zeros());
        self.planes.iter_mut().for_each(|x| *x = 0.0);
        self.decoder.iter_mut().for_each(|x| *x = 0.0);
        self.scale = 0.0;
    }

    pub fn get(&self, group: ParamGroup, i: usize) -> f64 {
        match group {
            ParamGroup::Vertices => self.vertices[i / 3][i % 3],
            ParamGroup::Planes => self.planes[i],
            ParamGroup::Decoder => self.decoder[i],
            ParamGroup::Scale => self.scale,
        }
    }

    pub fn add_assign(&mut self, other: &GradStore) {
        for (a, b) in self.vertices.iter_mut().zip(&other.vertices) {
            *a += b;
        }
        for (a, b) in self.planes.iter_mut().zip(&other.planes) {
            *a += b;
        }
        for (a, b) in self.decoder.iter_mut().zip(&other.decoder) {
            *a += b;
        }
        self.scale += other.scale;
    }

    pub fn scale_by(&mut self, factor: f64) {
        self.vertices.iter_mut().for_each(|v| *v *= factor);
        self.planes.iter_mut().for_each(|x| *x *= factor);
        self.decoder.iter_mut().for_each(|x| *x *= factor);
        self.scale *= factor;
    }

    pub fn zero_group(&mut self, group: ParamGroup) {
        match group {
            ParamGroup::Vertices => self.vertices.iter_mut().for_each(|v| *v = Vec3::zeros()),
            ParamGroup::Planes => self.planes.iter_mut().for_each(|x| *x = 0.0),
            ParamGroup::Decoder => self.decoder.iter_mut().for_each(|x| *x = 0.0),
            ParamGroup::Scale => self.scale = 0.0,
        }
    }

    pub fn group_is_finite(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Vertices => self
                .vertices
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite())),
            ParamGroup::Planes => self.planes.iter().all(|x| x.is_finite()),
            ParamGroup::Decoder => self.decoder.iter().all(|x| x.is_finite()),
            ParamGroup::Scale => self.scale.is_finite(),
        }
    }

    /// Visits the group as a flat sequence of scalars.
    fn for_each_in(&self, group: ParamGroup, mut f: impl FnMut(usize, f64)) {
        match group {
            ParamGroup::Vertices => {
                for (i, v) in self.vertices.iter().enumerate() {
                    for k in 0..3 {
                        f(3 * i + k, v[k]);
                    }
                }
            }
            ParamGroup::Planes => self.planes.iter().enumerate().for_each(|(i, &x)| f(i, x)),
            ParamGroup::Decoder => self.decoder.iter().enumerate().for_each(|(i, &x)| f(i, x)),
            ParamGroup::Scale => f(0, self.scale),
        }
    }

    pub fn group_norm(&self, group: ParamGroup) -> f64 {
        let mut acc = 0.0;
        self.for_each_in(group, |_, x| acc += x * x);
        acc.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub vertices: f64,
    pub planes: f64,
    pub decoder: f64,
    pub scale: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            vertices: 3e-2,
            planes: 2e-3,
            decoder: 5e-4,
            scale: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Vertices => self.vertices,
            ParamGroup::Planes => self.planes,
            ParamGroup::Decoder => self.decoder,
            ParamGroup::Scale => self.scale,
        }
    }
}

/// Adam moments and step counters, one set per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: [Vec<f64>; 4],
    pub v: [Vec<f64>; 4],
    pub steps: [u64; 4],
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |g: ParamGroup| vec![0.0; params.group_len(g)];
        let m = ParamGroup::ALL.map(zeros);
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            v: m.clone(),
            m,
            steps: [0; 4],
        }
    }

    pub fn steps(&self, group: ParamGroup) -> u64 {
        self.steps[group.slot()]
    }

    /// Forgets the moments of one group, e.g. when it becomes learnable in a
    /// new stage.
    pub fn reset_group(&mut self, group: ParamGroup) {
        let s = group.slot();
        self.m[s].iter_mut().for_each(|x| *x = 0.0);
        self.v[s].iter_mut().for_each(|x| *x = 0.0);
        self.steps[s] = 0;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub updated: Vec<ParamGroup>,
    /// Groups whose gradient held a non-finite value; left untouched.
    pub rejected: Vec<ParamGroup>,
}

/// One bias-corrected Adam update of every learnable group.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradStore,
    lr: &LearningRates,
    state: &mut AdamState,
) -> StepReport {
    let mut report = StepReport::default();
    for group in ParamGroup::ALL {
        if !params.learnable().get(group) {
            continue;
        }
        if !grads.group_is_finite(group) {
            log::warn!(
                "non-finite gradient in group {}; step rejected",
                group.name()
            );
            report.rejected.push(group);
            continue;
        }
        let s = group.slot();
        if state.m[s].len() != params.group_len(group) {
            state.m[s] = vec![0.0; params.group_len(group)];
            state.v[s] = vec![0.0; params.group_len(group)];
            state.steps[s] = 0;
        }
        state.steps[s] += 1;
        let t = state.steps[s] as i32;
        let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let rate = lr.get(group);
        let (m, v) = (&mut state.m[s], &mut state.v[s]);
        let mut delta = vec![0.0; m.len()];
        grads.for_each_in(group, |i, g| {
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            delta[i] = rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        });
        match group {
            ParamGroup::Vertices => {
                for (i, vert) in params.mesh.vertices_mut().iter_mut().enumerate() {
                    for k in 0..3 {
                        vert[k] -= delta[3 * i + k];
                    }
                }
            }
            ParamGroup::Planes => {
                for (x, d) in params.planes.data_mut().iter_mut().zip(&delta) {
                    *x -= d;
                }
            }
            ParamGroup::Decoder => {
                for (x, d) in params.decoder.params_mut().iter_mut().zip(&delta) {
                    *x -= d;
                }
            }
            ParamGroup::Scale => {
                params.mapping.scale = (params.mapping.scale - delta[0]).max(MIN_SCALE);
            }
        }
        report.updated.push(group);
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub eps: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Entries whose one-sided differences disagree by more than this
    /// (relative) sit on a kink and are skipped.
    pub kink_tolerance: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            floor: 1e-6,
            kink_tolerance: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdEntry {
    pub group: ParamGroup,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub kink: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    /// Largest relative error among checked (non-kink) entries of a group.
    pub fn max_rel_error(&self, group: ParamGroup) -> Option<f64> {
        self.entries
            .iter()
            .filter(|e| e.group == group && !e.kink)
            .map(|e| e.rel_error)
            .fold(None, |acc, x| Some(acc.map_or(x, |a: f64| a.max(x))))
    }

    pub fn checked(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group && !e.kink)
            .count()
    }
}

/// Compares `analytic` against central differences of `loss` at the listed
/// scalar entries.
pub fn fd_check<F>(
    params: &ParamStore,
    analytic: &GradStore,
    entries: &[(ParamGroup, usize)],
    options: FdOptions,
    mut loss: F,
) -> Result<FdReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(1e-6..=1e-3).contains(&options.eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {} outside [1e-6, 1e-3]",
            options.eps
        )));
    }
    let f0 = loss(params)?;
    let mut work = params.clone();
    let mut report = FdReport::default();
    for &(group, index) in entries {
        let x = params.get(group, index);
        let h = options.eps;
        work.set(group, index, x + h);
        let fp = loss(&work)?;
        work.set(group, index, x - h);
        let fm = loss(&work)?;
        work.set(group, index, x);
        let forward = (fp - f0) / h;
        let backward = (f0 - fm) / h;
        let numeric = 0.5 * (forward + backward);
        let a = analytic.get(group, index);
        let kink = (forward - backward).abs()
            > options.kink_tolerance * forward.abs().max(backward.abs()).max(options.floor);
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(options.floor);
        report.entries.push(FdEntry {
            group,
            index,
            analytic: a,
            numeric,
            rel_error,
            kink,
        });
    }
    Ok(report)
}
