//! Loss terms, schedules, the optimizer and the optimization loop.
//!
//! One [`Trainer::step`] samples poses, renders them, runs the augmentation
//! pipeline, scores the batch with the guidance providers and applies one
//! Adam update. All randomness is drawn from [`crate::rng`] streams keyed by
//! the iteration, so a trainer rebuilt from a snapshot continues exactly
//! where the original run would have gone.

mod adam;
mod config;
pub mod losses;
mod schedule;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::{GuidanceConfig, RunConfig, PRESETS};
pub use losses::KlMode;
pub use schedule::{ActiveTerms, LossWeights, ScaleStage, TrainSchedule, Window};

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_pipeline, stack_renders, AugmentError};
use crate::field::{BoundField, Checkpoint, ExplicitField, FieldError, GridSpec, ImplicitField, ModelKind, VoxelField};
use crate::guidance::{
    clip_loss_terms, open_provider, ClipTerms, GuidanceError, GuidanceProvider, GuidanceResponse, ImageBatch, TextEmbedding,
};
use crate::render::{render, sample_pose, Jitter, RenderError, RenderOptions};
use crate::rng::{self, Stream};
use crate::tensor::{Graph, Real, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("non-finite loss or gradient at iteration {iteration}{}", snapshot_note(.snapshot))]
    NonFinite { iteration: u64, snapshot: Option<PathBuf> },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn snapshot_note(p: &Option<PathBuf>) -> String {
    match p {
        Some(p) => format!(" (state saved to {})", p.display()),
        None => String::new(),
    }
}

/// One record of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub total: f64,
    pub clip: f64,
    pub clip2: f64,
    pub transmittance: f64,
    pub entropy: f64,
    /// `None` outside the TV window.
    pub tv: Option<f64>,
    /// `None` outside the KL window.
    pub kl: Option<f64>,
    pub mean_trans: f64,
    pub resolution: [usize; 3],
    pub active: ActiveFlags,
    /// Mean absolute gradient per parameter group.
    pub grad_mean_abs: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveFlags {
    pub tv: bool,
    pub kl: bool,
    pub ensemble: bool,
}

impl From<ActiveTerms> for ActiveFlags {
    fn from(a: ActiveTerms) -> Self {
        Self {
            tv: a.tv,
            kl: a.kl,
            ensemble: a.ensemble,
        }
    }
}

/// `density_mlp.0.weight` belongs to `density_mlp`; grid tensors are their own group.
pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

pub fn snapshot_name(iteration: u64) -> String {
    format!("ckpt_{iteration:06}.voxf")
}

/// Guidance providers with the prompt already embedded.
pub struct Scorers {
    primary: Box<dyn GuidanceProvider>,
    secondary: Option<Box<dyn GuidanceProvider>>,
    text: TextEmbedding,
    text2: Option<TextEmbedding>,
}

impl Scorers {
    pub fn new(
        prompt: &str,
        primary: Box<dyn GuidanceProvider>,
        secondary: Option<Box<dyn GuidanceProvider>>,
    ) -> Result<Self, GuidanceError> {
        let text = primary.text_embed(prompt)?;
        let text2 = match &secondary {
            Some(s) => Some(s.text_embed(prompt)?),
            None => None,
        };
        Ok(Self {
            primary,
            secondary,
            text,
            text2,
        })
    }

    /// Primary provider and, when present, the secondary one.
    pub fn from_config(config: &RunConfig) -> Result<Self, TrainError> {
        let (p, s) = open_providers(config)?;
        Ok(Self::new(&config.prompt, p, s)?)
    }

    pub fn primary_id(&self) -> &str {
        self.primary.model_id()
    }

    pub fn has_secondary(&self) -> bool {
        self.secondary.is_some()
    }

    /// Scores with the primary provider and, if `secondary` is set, with the
    /// secondary one as well.
    pub fn score(
        &self,
        images: &ImageBatch,
        secondary: bool,
    ) -> Result<(GuidanceResponse, Option<GuidanceResponse>), GuidanceError> {
        let p = score_chunked(self.primary.as_ref(), &self.text, images)?;
        let s = match (&self.secondary, &self.text2) {
            (Some(sp), Some(t)) if secondary => Some(score_chunked(sp.as_ref(), t, images)?),
            _ => None,
        };
        Ok((p, s))
    }
}

/// Splits the batch when it exceeds the provider's maximum.
fn score_chunked(
    provider: &dyn GuidanceProvider,
    text: &TextEmbedding,
    images: &ImageBatch,
) -> Result<GuidanceResponse, GuidanceError> {
    let chunk = provider.max_batch().unwrap_or(images.len()).max(1);
    if images.len() <= chunk {
        return provider.score_with_grad(images, text);
    }
    let [b, h, w, c] = images.shape;
    let per = h * w * c;
    let mut scores = Vec::with_capacity(b);
    let mut grads = Vec::with_capacity(images.data.len());
    for start in (0..b).step_by(chunk) {
        let n = chunk.min(b - start);
        let part = ImageBatch::new([n, h, w, c], images.data[start * per..(start + n) * per].to_vec())?;
        let r = provider.score_with_grad(&part, text)?;
        scores.extend(r.scores);
        grads.extend(r.grads);
    }
    Ok(GuidanceResponse {
        scores,
        grads,
        shape: images.shape,
    })
}

/// Nodes of one iteration's objective.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: Var,
    pub clip: ClipTerms,
    pub transmittance: Var,
    pub entropy: Var,
    pub tv: Option<Var>,
    pub kl: Option<Var>,
    pub mean_trans: Var,
    pub active: ActiveTerms,
}

/// Renders, augments and scores one iteration and assembles the weighted
/// objective. Terms outside their window are left out of the graph.
pub fn build_loss<F: Real>(
    g: &mut Graph<F>,
    bound: &BoundField,
    config: &RunConfig,
    iteration: u64,
    delta: f64,
    scorers: &Scorers,
) -> Result<LossGraph, TrainError> {
    let it = iteration;
    let w = config.weights;
    let active = config.schedule.active(it);
    let ppi = config.poses_per_iter;
    let mut renders = Vec::with_capacity(ppi);
    for p in 0..ppi {
        let pose = sample_pose(&mut rng::stream(config.seed, it, Stream::Pose, p as u64), &config.camera);
        let opts = RenderOptions {
            step: delta,
            jitter: Jitter::Seeded {
                seed: config.seed,
                iteration: it * ppi as u64 + p as u64,
            },
        };
        renders.push(render(g, bound, &pose, &opts)?);
    }
    let (rgb, alpha) = stack_renders(g, &renders)?;
    let images = augment_pipeline(g, rgb, alpha, &config.augment, config.seed, it)?;

    let shape: [usize; 4] = g
        .shape(images)
        .try_into()
        .map_err(|_| TrainError::Config("augmented batch is not 4-D".into()))?;
    let batch = ImageBatch::new(shape, g.value(images).to_f64())?;
    let ensemble = config.ensemble();
    let (primary, secondary) = scorers.score(&batch, ensemble.secondary_active(it))?;
    let clip = clip_loss_terms(&primary, secondary.as_ref(), &ensemble, it)?;
    let grad: Vec<F> = clip.grad.iter().map(|&x| F::of(x)).collect();
    let clip_node = g.external(images, F::of(clip.loss), grad)?;

    let mut parts: Vec<Var> = vec![clip_node];
    let mean_trans = mean_of(g, &renders.iter().map(|r| r.mean_trans).collect::<Vec<_>>())?;
    let tr = losses::transmittance_loss(g, mean_trans, w.tau)?;
    parts.push(g.mul_scalar(tr, w.lambda_tr)?);
    let mut ents = Vec::with_capacity(ppi);
    for r in &renders {
        ents.push(losses::entropy_loss(g, r.trans_final)?);
    }
    let entropy = mean_of(g, &ents)?;
    parts.push(g.mul_scalar(entropy, w.lambda_sigma)?);
    let tv = if active.tv {
        let v = losses::tv_loss(g, bound.density)?;
        parts.push(g.mul_scalar(v, w.lambda_tv)?);
        Some(v)
    } else {
        None
    };
    let kl = if active.kl {
        let v = losses::kl_sphere_loss(g, bound, delta, config.kl_mode)?;
        parts.push(g.mul_scalar(v, w.lambda_kl)?);
        Some(v)
    } else {
        None
    };
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    Ok(LossGraph {
        total,
        clip,
        transmittance: tr,
        entropy,
        tv,
        kl,
        mean_trans,
        active,
    })
}

pub struct Trainer {
    config: RunConfig,
    field: VoxelField<f32>,
    adam: BTreeMap<String, AdamState<f32>>,
    iteration: u64,
    scorers: Scorers,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("iteration", &self.iteration)
            .field("kind", &self.field.kind())
            .field("resolution", &self.field.spec().resolution)
            .field("primary", &self.scorers.primary_id())
            .finish_non_exhaustive()
    }
}

/// Opens the providers named in `config.guidance`.
pub fn open_providers(
    config: &RunConfig,
) -> Result<(Box<dyn GuidanceProvider>, Option<Box<dyn GuidanceProvider>>), TrainError> {
    let g = &config.guidance;
    let res = g.toy_resolution.unwrap_or(config.camera.height);
    let prompts = [config.prompt.as_str()];
    let primary = open_provider(&g.endpoint, &g.primary_model, &prompts, res)?;
    let secondary = match &g.secondary_model {
        Some(m) => Some(open_provider(&g.endpoint, m, &prompts, res)?),
        None => None,
    };
    Ok((primary, secondary))
}

impl Trainer {
    /// Fresh field at the first-stage resolution, providers from the config.
    pub fn new(config: RunConfig) -> Result<Self, TrainError> {
        let scorers = Scorers::from_config(&config)?;
        Self::with_scorers(config, scorers)
    }

    pub fn with_providers(
        config: RunConfig,
        primary: Box<dyn GuidanceProvider>,
        secondary: Option<Box<dyn GuidanceProvider>>,
    ) -> Result<Self, TrainError> {
        let scorers = Scorers::new(&config.prompt, primary, secondary)?;
        Self::with_scorers(config, scorers)
    }

    pub fn with_scorers(config: RunConfig, scorers: Scorers) -> Result<Self, TrainError> {
        config.validate()?;
        let field = initial_field(&config)?;
        Self::assemble(config, field, BTreeMap::new(), 0, scorers)
    }

    /// Continues from a snapshot. Optimizer moments stored in the checkpoint
    /// are restored; missing ones start from zero.
    pub fn resume(config: RunConfig, checkpoint: Checkpoint, scorers: Scorers) -> Result<Self, TrainError> {
        config.validate()?;
        let h = &checkpoint.header;
        if h.kind != config.model {
            return Err(TrainError::Config(format!(
                "checkpoint holds a {} field but the config asks for {}",
                h.kind, config.model
            )));
        }
        if h.spec.bounds != config.bounds {
            return Err(TrainError::Config("checkpoint bounds differ from the config".into()));
        }
        if !h.config_digest.is_empty() && h.config_digest != config.digest() {
            log::warn!("resuming with a config that differs from the one that wrote the checkpoint");
        }
        let mut adam = BTreeMap::new();
        for (name, t) in checkpoint.field.params() {
            let m = checkpoint.extras.get(&format!("adam.m.{name}"));
            let v = checkpoint.extras.get(&format!("adam.v.{name}"));
            let step = h.adam_steps.get(&name).copied();
            if let (Some(m), Some(v), Some(step)) = (m, v, step) {
                if m.shape() == t.shape() && v.shape() == t.shape() {
                    adam.insert(
                        name,
                        AdamState {
                            m: m.clone(),
                            v: v.clone(),
                            step,
                        },
                    );
                }
            }
        }
        let iteration = h.iteration;
        Self::assemble(config, checkpoint.field, adam, iteration, scorers)
    }

    fn assemble(
        config: RunConfig,
        field: VoxelField<f32>,
        mut adam: BTreeMap<String, AdamState<f32>>,
        iteration: u64,
        scorers: Scorers,
    ) -> Result<Self, TrainError> {
        if config.guidance.secondary_model.is_some() && !scorers.has_secondary() {
            return Err(TrainError::Config("config names a secondary model but no provider was given".into()));
        }
        for (name, t) in field.params() {
            adam.entry(name).or_insert_with(|| AdamState::new(t.shape()));
        }
        Ok(Self {
            config,
            field,
            adam,
            iteration,
            scorers,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn field(&self) -> &VoxelField<f32> {
        &self.field
    }

    /// Completed optimization steps.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.schedule.total_iters
    }

    /// March step for the current grid.
    pub fn step_size(&self) -> f64 {
        self.config.step_scale * self.field.spec().min_voxel_size()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.field.clone(), self.iteration, self.config.seed, &self.config.prompt);
        ck.header.config_digest = self.config.digest();
        for (name, st) in &self.adam {
            ck.extras.insert(format!("adam.m.{name}"), st.m.clone());
            ck.extras.insert(format!("adam.v.{name}"), st.v.clone());
            ck.header.adam_steps.insert(name.clone(), st.step);
        }
        ck
    }

    /// Grows the grid when the schedule calls for it at the current
    /// iteration. Resampled tensors get fresh optimizer moments.
    fn apply_scaling(&mut self) -> Result<(), TrainError> {
        let target = self.config.schedule.target_voxels(self.config.target_voxels, self.iteration);
        let spec = GridSpec::for_target(self.config.bounds, target)?;
        if spec.resolution == self.field.spec().resolution {
            return Ok(());
        }
        log::info!(
            "iteration {}: grid {:?} -> {:?}",
            self.iteration,
            self.field.spec().resolution,
            spec.resolution
        );
        let changed = self.field.progressive_scale(spec)?;
        let params = self.field.params();
        for name in changed {
            if let Some((_, t)) = params.iter().find(|(n, _)| *n == name) {
                self.adam.insert(name, AdamState::new(t.shape()));
            }
        }
        Ok(())
    }

    /// Runs one iteration. On a non-finite loss or gradient the field is left
    /// untouched and [`TrainError::NonFinite`] is returned.
    pub fn step(&mut self) -> Result<StepMetrics, TrainError> {
        self.apply_scaling()?;
        let it = self.iteration;
        let delta = self.step_size();

        let mut g: Graph<f32> = Graph::new();
        let bound = self.field.bind(&mut g)?;
        let loss = build_loss(&mut g, &bound, &self.config, it, delta, &self.scorers)?;
        let grads = g.gradients(loss.total, &bound.params)?;
        let total = g.item(loss.total) as f64;
        let finite = total.is_finite() && grads.iter().all(|t| t.is_finite());

        let names: Vec<String> = self.field.params().into_iter().map(|(n, _)| n).collect();
        let mut group_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (name, gt) in names.iter().zip(&grads) {
            let e = group_sums.entry(param_group(name).to_string()).or_insert((0.0, 0));
            e.0 += gt.data().iter().map(|x| x.abs() as f64).sum::<f64>();
            e.1 += gt.numel();
        }
        let metrics = StepMetrics {
            iteration: it,
            total,
            clip: loss.clip.clip,
            clip2: loss.clip.clip2,
            transmittance: g.item(loss.transmittance) as f64,
            entropy: g.item(loss.entropy) as f64,
            tv: loss.tv.map(|v| g.item(v) as f64),
            kl: loss.kl.map(|v| g.item(v) as f64),
            mean_trans: g.item(loss.mean_trans) as f64,
            resolution: self.field.spec().resolution,
            active: loss.active.into(),
            grad_mean_abs: group_sums
                .into_iter()
                .map(|(k, (s, n))| (k, if n == 0 { 0.0 } else { s / n as f64 }))
                .collect(),
        };
        if !finite {
            return Err(TrainError::NonFinite {
                iteration: it,
                snapshot: None,
            });
        }

        let opt = self.config.optimizer;
        let lr = match self.field.kind() {
            ModelKind::Explicit => opt.lr_grid,
            ModelKind::Implicit => opt.lr_mlp,
        };
        for ((name, param), grad) in self.field.params_mut().into_iter().zip(&grads) {
            let state = self.adam.get_mut(&name).expect("optimizer state for every parameter");
            adam_step(param, grad, state, lr, (opt.beta1, opt.beta2), opt.eps);
        }
        self.iteration += 1;
        Ok(metrics)
    }

    /// Runs to `schedule.total_iters`. With an output directory, appends one
    /// JSON line per iteration to `metrics.jsonl`, writes snapshots every
    /// `snapshot_every` iterations and `final.voxf` at the end. On failure the
    /// last consistent state is saved before the error is returned.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Vec<StepMetrics>, TrainError> {
        let mut log_file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(dir.join("metrics.jsonl"))?,
                )
            }
            None => None,
        };
        let mut history = Vec::new();
        while !self.is_done() {
            let m = match self.step() {
                Ok(m) => m,
                Err(e) => return Err(self.save_on_failure(e, out_dir)),
            };
            if let Some(f) = log_file.as_mut() {
                let line = serde_json::to_string(&m).map_err(|e| TrainError::Config(e.to_string()))?;
                writeln!(f, "{line}")?;
            }
            if m.iteration % 100 == 0 {
                log::info!(
                    "iteration {} total {:.5} clip {:.5} mean_trans {:.4}",
                    m.iteration,
                    m.total,
                    m.clip,
                    m.mean_trans
                );
            }
            history.push(m);
            let every = self.config.snapshot_every;
            if let Some(dir) = out_dir {
                if every > 0 && self.iteration % every == 0 && !self.is_done() {
                    self.checkpoint().save(dir.join(snapshot_name(self.iteration)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(dir.join("final.voxf"))?;
        }
        Ok(history)
    }

    fn save_on_failure(&self, err: TrainError, out_dir: Option<&Path>) -> TrainError {
        let Some(dir) = out_dir else { return err };
        let (path, err) = match err {
            TrainError::NonFinite { iteration, .. } => {
                let p = dir.join(format!("nonfinite_{iteration:06}.voxf"));
                (p.clone(), TrainError::NonFinite { iteration, snapshot: Some(p) })
            }
            other => (dir.join(snapshot_name(self.iteration)), other),
        };
        if let Err(e) = self.checkpoint().save(&path) {
            log::error!("could not save state to {}: {e}", path.display());
        } else {
            log::error!("state saved to {}", path.display());
        }
        err
    }
}

fn mean_of<F: Real>(g: &mut Graph<F>, vars: &[Var]) -> Result<Var, TensorError> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    if vars.len() == 1 {
        Ok(acc)
    } else {
        g.mul_scalar(acc, 1.0 / vars.len() as f64)
    }
}

/// Loads a checkpoint and the config it should continue under.
pub fn resume_from(config: RunConfig, path: &Path) -> Result<Trainer, TrainError> {
    let ck = Checkpoint::load(path)?;
    let scorers = Scorers::from_config(&config)?;
    Trainer::resume(config, ck, scorers)
}

/// The untrained field a run with `config` starts from.
pub fn initial_field(config: &RunConfig) -> Result<VoxelField<f32>, TrainError> {
    let target = config.schedule.target_voxels(config.target_voxels, 0);
    let spec = GridSpec::for_target(config.bounds, target)?;
    let delta = config.step_scale * spec.min_voxel_size();
    Ok(match config.model {
        ModelKind::Explicit => VoxelField::Explicit(ExplicitField::new(spec, config.alpha_init, delta)),
        ModelKind::Implicit => VoxelField::Implicit(ImplicitField::new(spec, config.alpha_init, delta, config.seed)),
    })
}
