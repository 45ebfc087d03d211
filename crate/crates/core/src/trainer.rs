//! Progressive optimisation.
//!
//! Stage 1 moves only the vertices: first towards the landmarks (1a), then
//! towards the silhouettes (1b), with the Laplacian term keeping the mesh
//! smooth. Stage 2 freezes the mesh and fits the tri-planes and decoder to
//! the images. Stage 3 optimises everything jointly, including the density
//! scale. Every iteration uses all training views.
//!
//! Runs are deterministic for a fixed seed and worker count. Whenever a
//! checkpoint is due, the in-memory state is rounded to the checkpoint
//! precision, so resuming from the file continues the same computation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{AppearanceConfig, MlpDecoder, PositionalEncoding, TriPlanes};
use crate::error::{Error, Result};
use crate::io::checkpoint::{quantize, Checkpoint, Progress};
use crate::io::obj::write_obj;
use crate::io::scene::SceneBundle;
use crate::losses::{
    landmark_loss, laplacian_loss, mask_contour_band, total_loss, tv_loss_with_grad,
    LossComponents, LossWeights,
};
use crate::mesh::TriangleMesh;
use crate::objective::{add_vertex_grad, color_loss_with_grad, mask_loss_with_grad, RayJob};
use crate::params::{
    adam_step, AdamState, GradStore, GroupFlags, LearningRates, ParamGroup, ParamStore,
};
use crate::render::{
    derive_seed, sample_grid_pixels, Camera, DensityMapping, RenderContext, RenderSettings,
};
use crate::spatial::{Octree, OctreeParams};

pub use crate::io::log::{LogRecord, TrainLog};
pub use crate::losses::Stage;

/// Density scale per stage, as `factor / d` with `d` the diagonal of the
/// template's bounding box. Stage 3 starts from its factor and, when
/// `learnable`, optimises it from there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleSchedule {
    pub silhouette: f64,
    pub appearance: f64,
    pub joint: f64,
    pub learnable: bool,
}

impl Default for ScaleSchedule {
    fn default() -> Self {
        Self {
            silhouette: 100.0,
            appearance: 300.0,
            joint: 600.0,
            learnable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub landmark_iterations: usize,
    pub silhouette_iterations: usize,
    pub appearance_epochs: usize,
    pub joint_epochs: usize,
    /// Colour epochs take one optimiser step per batch of this many
    /// training views, shuffled per epoch. 0 puts all views in one batch.
    pub views_per_batch: usize,
    pub lr: LearningRates,
    /// Vertex learning rate for stage 1 when it should differ from `lr`.
    pub stage1_vertex_lr: Option<f64>,
    pub weights: LossWeights,
    /// Pixel grid spacing and jitter amplitude (pixels) of the ray batches.
    pub stride: usize,
    pub jitter: f64,
    /// Contour band radius for the silhouette stage, in pixels.
    pub mask_band: usize,
    pub scale: ScaleSchedule,
    pub render: RenderSettings,
    pub appearance: AppearanceConfig,
    pub octree: OctreeParams,
    pub seed: u64,
    /// Number of gradient blocks; results are reproducible for a fixed value.
    pub workers: usize,
    /// Iterations between checkpoints; 0 only checkpoints at stage ends.
    pub checkpoint_every: usize,
    pub max_rollbacks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            landmark_iterations: 20,
            silhouette_iterations: 20,
            appearance_epochs: 300,
            joint_epochs: 300,
            views_per_batch: 4,
            // calibrated for mean-reduced losses, where one colour step
            // sees a single view
            lr: LearningRates {
                vertices: 1e-2,
                planes: 2e-2,
                decoder: 5e-3,
                scale: 1e-3,
            },
            stage1_vertex_lr: Some(0.1),
            weights: LossWeights {
                color: 1e4,
                mask: 1e4,
                ..LossWeights::default()
            },
            stride: 4,
            jitter: 1.0,
            mask_band: 8,
            scale: ScaleSchedule::default(),
            render: RenderSettings::default(),
            appearance: AppearanceConfig::default(),
            octree: OctreeParams::default(),
            seed: 0,
            workers: 4,
            checkpoint_every: 50,
            max_rollbacks: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if ParamGroup::ALL
            .iter()
            .any(|&g| !(self.lr.get(g) >= 0.0) || !self.lr.get(g).is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "learning rates must be finite and non-negative: {:?}",
                self.lr
            )));
        }
        if self.stride == 0 || !(0.0..self.stride as f64 / 2.0).contains(&self.jitter) {
            return Err(Error::InvalidArgument(format!(
                "need stride >= 1 and 0 <= jitter < stride / 2, got stride {} and jitter {}",
                self.stride, self.jitter
            )));
        }
        if self
            .stage1_vertex_lr
            .is_some_and(|v| !(v >= 0.0) || !v.is_finite())
        {
            return Err(Error::InvalidArgument(
                "stage-1 vertex learning rate must be finite and non-negative".into(),
            ));
        }
        if self.render.n_samples < 2 {
            return Err(Error::InvalidArgument(
                "at least two samples per ray are needed".into(),
            ));
        }
        if self.mask_band == 0 {
            return Err(Error::InvalidArgument(
                "mask band radius must be at least 1".into(),
            ));
        }
        let s = &self.scale;
        if [s.silhouette, s.appearance, s.joint]
            .iter()
            .any(|f| !(*f > 0.0) || !f.is_finite())
        {
            return Err(Error::InvalidArgument(
                "density scale factors must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn iterations(&self, stage: Stage) -> usize {
        match stage {
            Stage::Landmarks => self.landmark_iterations,
            Stage::Silhouette => self.silhouette_iterations,
            Stage::Appearance => self.appearance_epochs,
            Stage::Joint => self.joint_epochs,
        }
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|m| Error::parse(path, m))
    }
}

fn flags_for(stage: Stage, learn_scale: bool) -> GroupFlags {
    match stage {
        Stage::Landmarks | Stage::Silhouette => GroupFlags {
            vertices: true,
            ..GroupFlags::NONE
        },
        Stage::Appearance => GroupFlags {
            planes: true,
            decoder: true,
            ..GroupFlags::NONE
        },
        Stage::Joint => GroupFlags {
            scale: learn_scale,
            ..GroupFlags::ALL
        },
    }
}

fn stage_index(stage: Stage) -> usize {
    Stage::ALL.iter().position(|&s| s == stage).unwrap()
}

/// State to fall back to when an iteration diverges.
struct Snapshot {
    params: ParamStore,
    adam: AdamState,
    iteration: usize,
}

/// Output of a completed run.
#[derive(Debug, Clone)]
pub struct FitArtifacts {
    pub mesh: TriangleMesh,
    /// Mesh at the end of stage 1, if that stage ran in this process or was
    /// found in the output directory.
    pub stage1_mesh: Option<TriangleMesh>,
    pub log: TrainLog,
    pub checkpoint: Checkpoint,
}

pub struct Trainer<'a> {
    scene: &'a SceneBundle,
    config: TrainConfig,
    cameras: Vec<Camera>,
    params: ParamStore,
    adam: AdamState,
    progress: Progress,
    octree: Octree,
    log: TrainLog,
    out_dir: Option<PathBuf>,
    diagonal: f64,
    stage1_mesh: Option<TriangleMesh>,
    started: Instant,
    time_offset: f64,
}

impl<'a> Trainer<'a> {
    /// Fresh run: parameters initialised from the template and the seed.
    pub fn new(scene: &'a SceneBundle, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        let mesh = scene.template.clone();
        let bounds = mesh.bounding_box();
        let diagonal = bounds.diagonal();
        let planes = TriPlanes::init(
            &config.appearance,
            &bounds,
            derive_seed(config.seed, &[0x91a]),
        )?;
        let view_dim = PositionalEncoding::new(config.appearance.pe_bands).output_dim();
        let decoder = MlpDecoder::init(
            planes.feature_dim(),
            view_dim,
            config.appearance.hidden_width,
            derive_seed(config.seed, &[0xdec]),
        )?;
        let mapping = DensityMapping::new(config.scale.silhouette / diagonal);
        let params = ParamStore::new(mesh, planes, decoder, mapping)?;
        let progress = Progress {
            stage: Stage::Landmarks,
            iteration: 0,
            lr: config.lr,
            rollbacks: 0,
        };
        Self::assemble(scene, config, params, None, progress, diagonal)
    }

    /// Continues from a checkpoint. If `out_dir` holds the log of the run
    /// that wrote it, the records up to the checkpoint are kept.
    pub fn resume(
        scene: &'a SceneBundle,
        config: TrainConfig,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        if checkpoint.params.mesh.faces() != scene.template.faces() {
            return Err(Error::InvalidCheckpoint(
                "checkpoint faces differ from the scene template".into(),
            ));
        }
        let diagonal = scene.template.bounding_box().diagonal();
        Self::assemble(
            scene,
            config,
            checkpoint.params,
            Some(checkpoint.adam),
            checkpoint.progress,
            diagonal,
        )
    }

    fn assemble(
        scene: &'a SceneBundle,
        config: TrainConfig,
        mut params: ParamStore,
        adam: Option<AdamState>,
        progress: Progress,
        diagonal: f64,
    ) -> Result<Self> {
        params.set_learnable(flags_for(progress.stage, config.scale.learnable));
        let adam = adam.unwrap_or_else(|| AdamState::new(&params));
        let octree = Octree::build(&params.mesh, config.octree)?;
        let mut trainer = Self {
            cameras: scene.cameras(),
            scene,
            config,
            params,
            adam,
            progress,
            octree,
            log: TrainLog::default(),
            out_dir: None,
            diagonal,
            stage1_mesh: None,
            started: Instant::now(),
            time_offset: 0.0,
        };
        trainer.round_state()?;
        Ok(trainer)
    }

    /// Writes checkpoints, the log and meshes under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join("log.jsonl");
        if log_path.exists()
            && (self.progress.stage, self.progress.iteration) != (Stage::Landmarks, 0)
        {
            let old = TrainLog::read_jsonl(&log_path)?;
            let (stage, iter) = (self.progress.stage, self.progress.iteration);
            self.log.records = old
                .records
                .into_iter()
                .filter(|r| r.stage < stage || (r.stage == stage && r.iteration < iter))
                .collect();
            self.time_offset = self.log.records.last().map_or(0.0, |r| r.wall_time);
        }
        let stage1 = dir.join("stage1.obj");
        if self.progress.stage >= Stage::Appearance && stage1.exists() {
            self.stage1_mesh = Some(crate::io::obj::read_obj(&stage1)?);
        }
        let cfg = dir.join("config.toml");
        std::fs::write(&cfg, self.config.to_toml()).map_err(|e| Error::io(&cfg, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn stage1_mesh(&self) -> Option<&TriangleMesh> {
        self.stage1_mesh.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adam: self.adam.clone(),
            progress: self.progress,
        }
    }

    /// Runs whatever remains of the three stages.
    pub fn fit(&mut self) -> Result<FitArtifacts> {
        self.fit_through(Stage::Joint)
    }

    /// Runs the remaining stages up to and including `last` (1a and 1b
    /// always run together) and writes the final checkpoint and mesh.
    pub fn fit_through(&mut self, last: Stage) -> Result<FitArtifacts> {
        if self.progress.stage <= Stage::Silhouette {
            self.run_stage1()?;
        }
        if last >= Stage::Appearance && self.progress.stage == Stage::Appearance {
            self.run_stage2()?;
        }
        if last == Stage::Joint {
            self.run_stage3()?;
        }
        let checkpoint = self.checkpoint();
        if let Some(dir) = &self.out_dir {
            checkpoint.save(&dir.join("final.ckpt"))?;
            write_obj(&self.params.mesh, &dir.join("final.obj"))?;
            self.write_log()?;
        }
        Ok(FitArtifacts {
            mesh: self.params.mesh.clone(),
            stage1_mesh: self.stage1_mesh.clone(),
            log: self.log.clone(),
            checkpoint,
        })
    }

    /// Landmark (1a) then silhouette (1b) fitting of the vertices. Returns
    /// the resulting mesh.
    pub fn run_stage1(&mut self) -> Result<TriangleMesh> {
        if self.progress.stage == Stage::Landmarks {
            if self.scene.landmarks.is_empty() && self.config.landmark_iterations > 0 {
                log::warn!("scene has no landmarks; skipping stage 1a");
                self.advance(Stage::Silhouette)?;
            } else {
                self.run_stage(Stage::Landmarks)?;
            }
        }
        if self.progress.stage == Stage::Silhouette {
            let masked = self
                .scene
                .training_views()
                .iter()
                .all(|&v| self.scene.views[v].mask.is_some());
            if !masked && self.config.silhouette_iterations > 0 {
                log::warn!("not every training view has a mask; skipping stage 1b");
                self.advance(Stage::Appearance)?;
            } else {
                self.run_stage(Stage::Silhouette)?;
            }
        }
        Ok(self
            .stage1_mesh
            .clone()
            .unwrap_or_else(|| self.params.mesh.clone()))
    }

    /// Appearance-only fit with the mesh frozen.
    pub fn run_stage2(&mut self) -> Result<()> {
        self.expect_stage(Stage::Appearance)?;
        self.run_stage(Stage::Appearance)
    }

    /// Joint fit of vertices, appearance and (optionally) the density scale.
    pub fn run_stage3(&mut self) -> Result<()> {
        self.expect_stage(Stage::Joint)?;
        self.run_stage(Stage::Joint)
    }

    fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.progress.stage != stage {
            return Err(Error::InvalidArgument(format!(
                "cannot run stage {stage} while the run is at stage {}",
                self.progress.stage
            )));
        }
        Ok(())
    }

    fn stage_scale(&self, stage: Stage) -> f64 {
        let s = &self.config.scale;
        match stage {
            Stage::Landmarks | Stage::Silhouette => s.silhouette,
            Stage::Appearance => s.appearance,
            Stage::Joint => s.joint,
        }
    }

    /// Set-up when a stage starts from iteration 0.
    fn enter(&mut self, stage: Stage) -> Result<()> {
        self.params.mapping.scale = self.stage_scale(stage) / self.diagonal;
        self.round_state()?;
        let flags = flags_for(stage, self.config.scale.learnable);
        self.params.set_learnable(flags);
        for g in ParamGroup::ALL {
            if flags.get(g) {
                self.adam.reset_group(g);
            }
        }
        Ok(())
    }

    fn advance(&mut self, next: Stage) -> Result<()> {
        self.round_state()?;
        if next == Stage::Appearance {
            self.stage1_mesh = Some(self.params.mesh.clone());
            if let Some(dir) = &self.out_dir {
                write_obj(&self.params.mesh, &dir.join("stage1.obj"))?;
            }
        }
        self.progress.stage = next;
        self.progress.iteration = 0;
        self.params
            .set_learnable(flags_for(next, self.config.scale.learnable));
        Ok(())
    }

    fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let total = self.config.iterations(stage) * self.batches_per_epoch(stage);
        if self.progress.iteration == 0 {
            self.enter(stage)?;
        } else {
            self.params
                .set_learnable(flags_for(stage, self.config.scale.learnable));
        }
        self.octree = Octree::build(&self.params.mesh, self.config.octree)?;
        let bands = if stage == Stage::Silhouette {
            Some(self.contour_bands()?)
        } else {
            None
        };
        let mut snapshot = self.snapshot();
        while self.progress.iteration < total {
            let iter = self.progress.iteration;
            let (report, grads) = self.evaluate(stage, iter, total, bands.as_deref())?;
            if !report.0.is_finite() {
                self.rollback(stage, iter, &report.1, &snapshot)?;
                continue;
            }
            let mut lr = self.progress.lr;
            if let (Stage::Landmarks | Stage::Silhouette, Some(v)) =
                (stage, self.config.stage1_vertex_lr)
            {
                lr.vertices = v;
            }
            let step = adam_step(&mut self.params, &grads, &lr, &mut self.adam);
            for g in &step.rejected {
                log::warn!(
                    "stage {stage}, iteration {iter}: non-finite {} gradient skipped",
                    g.name()
                );
            }
            if self.params.learnable().vertices {
                self.octree = Octree::build(&self.params.mesh, self.config.octree)?;
            }
            self.record(stage, iter, report.0, report.1, false);
            self.progress.iteration += 1;
            let every = self.config.checkpoint_every;
            if every > 0
                && self.progress.iteration.is_multiple_of(every)
                && self.progress.iteration < total
            {
                self.save_checkpoint(&format!(
                    "{}_{:05}.ckpt",
                    stage.label(),
                    self.progress.iteration
                ))?;
                snapshot = self.snapshot();
            }
        }
        let next = match stage {
            Stage::Landmarks => Some(Stage::Silhouette),
            Stage::Silhouette => Some(Stage::Appearance),
            Stage::Appearance => Some(Stage::Joint),
            Stage::Joint => None,
        };
        if let Some(next) = next {
            self.advance(next)?;
        }
        self.save_checkpoint(&format!("{}_end.ckpt", stage.label()))?;
        Ok(())
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            params: self.params.clone(),
            adam: self.adam.clone(),
            iteration: self.progress.iteration,
        }
    }

    fn rollback(
        &mut self,
        stage: Stage,
        iter: usize,
        components: &LossComponents,
        snapshot: &Snapshot,
    ) -> Result<()> {
        self.progress.rollbacks += 1;
        if self.progress.rollbacks > self.config.max_rollbacks {
            return Err(Error::InvalidArgument(format!(
                "stage {stage}: loss still non-finite after {} rollbacks",
                self.config.max_rollbacks
            )));
        }
        log::warn!(
            "stage {stage}, iteration {iter}: non-finite loss; rolling back to iteration {} and halving the vertex learning rate",
            snapshot.iteration
        );
        self.record(stage, iter, f64::NAN, *components, true);
        self.params = snapshot.params.clone();
        self.adam = snapshot.adam.clone();
        self.progress.iteration = snapshot.iteration;
        self.progress.lr.vertices *= 0.5;
        self.octree = Octree::build(&self.params.mesh, self.config.octree)?;
        Ok(())
    }

    /// Rounds parameters, optimiser state and rates to checkpoint precision.
    /// Done at checkpoints and stage boundaries, so a resumed run sees
    /// exactly the state the original run continued from, and groups that
    /// are frozen for a stage are never touched by the rounding.
    fn round_state(&mut self) -> Result<()> {
        let vertices_before = self.params.mesh.vertices().to_vec();
        quantize(&mut self.params, &mut self.adam, &mut self.progress.lr);
        if self.params.mesh.vertices() != vertices_before.as_slice()
            || self.params.mesh.revision() != self.octree.revision()
        {
            self.octree = Octree::build(&self.params.mesh, self.config.octree)?;
        }
        Ok(())
    }

    /// Rounds the state to checkpoint precision and, with an output
    /// directory, writes it together with the log.
    fn save_checkpoint(&mut self, name: &str) -> Result<()> {
        self.round_state()?;
        if let Some(dir) = self.out_dir.clone() {
            self.checkpoint()
                .save(&dir.join("checkpoints").join(name))?;
            self.write_log()?;
        }
        Ok(())
    }

    fn write_log(&self) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            self.log.write_jsonl(&dir.join("log.jsonl"))?;
            self.log.write_csv(&dir.join("log.csv"))?;
        }
        Ok(())
    }

    fn record(
        &mut self,
        stage: Stage,
        iteration: usize,
        total: f64,
        c: LossComponents,
        rolled_back: bool,
    ) {
        let rec = LogRecord {
            stage,
            iteration,
            total,
            color: c.color,
            tv: c.tv,
            landmark: c.landmark,
            mask: c.mask,
            laplacian: c.laplacian,
            scale: self.params.mapping.scale,
            wall_time: self.time_offset + self.started.elapsed().as_secs_f64(),
            rolled_back,
        };
        log::debug!(
            "stage {} iter {} loss {:.6} s {:.4}",
            rec.stage,
            rec.iteration,
            rec.total,
            rec.scale
        );
        self.log.push(rec);
    }

    fn contour_bands(&self) -> Result<Vec<Vec<bool>>> {
        self.scene
            .views
            .iter()
            .map(|v| {
                let (w, h) = (v.camera.width(), v.camera.height());
                match &v.mask {
                    Some(m) => {
                        let mut band = vec![false; w * h];
                        for i in mask_contour_band(&m.to_mask(), w, h, self.config.mask_band)? {
                            band[i] = true;
                        }
                        Ok(band)
                    }
                    None => Ok(vec![false; w * h]),
                }
            })
            .collect()
    }

    /// Jittered grid rays over every training view. With `bands`, only rays
    /// landing in the contour band are kept and the target is the mask.
    fn jobs(&self, stage: Stage, iter: usize, bands: Option<&[Vec<bool>]>) -> Result<Vec<RayJob>> {
        let mut jobs = Vec::new();
        for view in self.batch_views(stage, iter) {
            let v = &self.scene.views[view];
            let (w, h) = (v.camera.width(), v.camera.height());
            let seed = derive_seed(
                self.config.seed,
                &[stage_index(stage) as u64, iter as u64, view as u64],
            );
            let pixels = sample_grid_pixels(w, h, self.config.stride, self.config.jitter, seed)?;
            for (k, p) in pixels.into_iter().enumerate() {
                let x = (p[0].floor().max(0.0) as usize).min(w - 1);
                let y = (p[1].floor().max(0.0) as usize).min(h - 1);
                let mask = v.mask.as_ref().map(|m| m.pixel(x, y)[0]);
                let job_seed = derive_seed(seed, &[k as u64]);
                match bands {
                    Some(b) => {
                        if !b[view][y * w + x] {
                            continue;
                        }
                        let m = if mask.unwrap_or(0.0) >= 0.5 { 1.0 } else { 0.0 };
                        jobs.push(RayJob {
                            view,
                            pixel: p,
                            seed: job_seed,
                            target: [m, 0.0, 0.0],
                            foreground: m > 0.5,
                        });
                    }
                    None => jobs.push(RayJob {
                        view,
                        pixel: p,
                        seed: job_seed,
                        target: v.image.sample_bilinear(p[0], p[1]),
                        foreground: mask.is_none_or(|m| m >= 0.5),
                    }),
                }
            }
        }
        Ok(jobs)
    }

    fn batches_per_epoch(&self, stage: Stage) -> usize {
        let n = self.scene.training_views().len();
        match (stage, self.config.views_per_batch) {
            (Stage::Appearance | Stage::Joint, k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        }
    }

    /// Training views used at `iter`. Colour stages walk through a seeded
    /// permutation of the views in equal slices.
    fn batch_views(&self, stage: Stage, iter: usize) -> Vec<usize> {
        let mut views = self.scene.training_views();
        let b = self.batches_per_epoch(stage);
        if b <= 1 {
            return views;
        }
        let (epoch, slot) = (iter / b, iter % b);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.seed,
            &[stage_index(stage) as u64, epoch as u64, 0xba7c],
        ));
        views.shuffle(&mut rng);
        let n = views.len();
        views[slot * n / b..(slot + 1) * n / b].to_vec()
    }

    /// Loss and gradient of one iteration.
    fn evaluate(
        &self,
        stage: Stage,
        iter: usize,
        total: usize,
        bands: Option<&[Vec<bool>]>,
    ) -> Result<((f64, LossComponents), GradStore)> {
        let w = &self.config.weights;
        let flags = self.params.learnable();
        let mut grads = GradStore::zeros_like(&self.params);
        let mut c = LossComponents::default();
        let tv_weight = w.tv_at(iter, total);
        if matches!(stage, Stage::Landmarks | Stage::Silhouette | Stage::Joint) {
            let (lap, g) = laplacian_loss(&self.params.mesh);
            add_vertex_grad(&mut grads, &g, w.laplacian);
            c.laplacian = Some(lap);
        }
        match stage {
            Stage::Landmarks => {
                let (l, g) =
                    landmark_loss(&self.params.mesh, &self.cameras, &self.scene.landmarks)?;
                add_vertex_grad(&mut grads, &g, w.landmark);
                c.landmark = Some(l);
            }
            Stage::Silhouette => {
                let jobs = self.jobs(stage, iter, bands)?;
                let ctx = RenderContext::new(&self.params, &self.octree, &self.config.render)?;
                c.mask = Some(mask_loss_with_grad(
                    &ctx,
                    &self.cameras,
                    &jobs,
                    None,
                    self.config.workers,
                    flags,
                    w.mask,
                    &mut grads,
                )?);
            }
            Stage::Appearance | Stage::Joint => {
                let jobs = self.jobs(stage, iter, None)?;
                let ctx = RenderContext::new(&self.params, &self.octree, &self.config.render)?;
                c.color = Some(color_loss_with_grad(
                    &ctx,
                    &self.cameras,
                    &jobs,
                    None,
                    self.config.workers,
                    flags,
                    w.color,
                    &mut grads,
                )?);
                if stage == Stage::Appearance {
                    c.tv = Some(tv_loss_with_grad(
                        &self.params.planes,
                        tv_weight,
                        &mut grads.planes,
                    ));
                }
            }
        }
        for g in ParamGroup::ALL {
            if !flags.get(g) {
                grads.zero_group(g);
            }
        }
        let report = total_loss(stage, &c, w, tv_weight)?;
        Ok(((report.total, c), grads))
    }
}
