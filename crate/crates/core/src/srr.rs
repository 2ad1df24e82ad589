//! Base conditional training and scheduled rollout recovery.
//!
//! Base training supervises a chunk from clean ground-truth history. Rollout
//! recovery instead conditions on the model's own cached rollouts up to a
//! sampled boundary `s`, blends towards ground truth over `2w` frames around
//! it, and supervises the chunk after `s`. The rollout depth `N` shrinks and
//! the blend radius `w` grows over training.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Controls, DenoiserParams};
use crate::diffusion::{flow_loss_on_tape, FlowExample, SamplerConfig};
use crate::error::{ensure, Error, Result};
use crate::rollout::{CacheSpec, RolloutCache, RolloutTrajectory};
use crate::tensor::{AdamW, AdamWConfig, RngState, Tape, Tensor};
use crate::worldsim::Clip;

/// Linear ramp from `start` to `end` over `horizon` steps, clamped after.
pub fn schedule_value(start: f64, end: f64, horizon: usize, step: usize) -> Result<f64> {
    ensure!(horizon > 0, "schedule horizon must be positive");
    let frac = (step as f64 / horizon as f64).min(1.0);
    Ok(start + (end - start) * frac)
}

/// Integer schedule: nearest integer, exact halves resolved towards `end`.
pub fn schedule_int(start: usize, end: usize, horizon: usize, step: usize) -> Result<usize> {
    let v = schedule_value(start as f64, end as f64, horizon, step)?;
    let lo = v.floor();
    let r = if v - lo == 0.5 {
        if end >= start {
            lo + 1.0
        } else {
            lo
        }
    } else {
        v.round()
    };
    Ok(r as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub history: usize,
    /// Chunk lengths sampled uniformly per window.
    pub chunks: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Final learning rate as a fraction of `lr`, reached by cosine decay.
    pub lr_floor: f32,
    pub weight_decay: f32,
    /// Probability of replacing layout and actions by zeros, for guidance.
    pub cond_dropout: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            history: 8,
            chunks: vec![4, 16],
            steps: 2000,
            batch: 4,
            lr: 2e-3,
            lr_floor: 0.05,
            weight_decay: 1e-4,
            cond_dropout: 0.1,
        }
    }
}

impl BaseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.chunks.is_empty() || self.chunks.contains(&0) || self.batch == 0 {
            return Err(Error::config("base training needs positive history, chunks and batch"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::config("cond_dropout must lie in [0, 1]"));
        }
        check_lr(self.lr, self.lr_floor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrrConfig {
    pub history: usize,
    pub chunk: usize,
    pub refresh_period: usize,
    pub depth_start: usize,
    pub depth_end: usize,
    pub radius_start: usize,
    pub radius_end: usize,
    pub horizon: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Final learning rate as a fraction of `lr`, reached by cosine decay.
    pub lr_floor: f32,
    pub weight_decay: f32,
    pub cond_dropout: f64,
    /// Sampler steps used when refreshing the rollout cache.
    pub cache_sampler_steps: usize,
    /// Supervise on the blended sequence (true) or on ground truth.
    pub blended_target: bool,
}

impl Default for SrrConfig {
    fn default() -> Self {
        Self {
            history: 8,
            chunk: 4,
            refresh_period: 200,
            depth_start: 6,
            depth_end: 3,
            radius_start: 0,
            radius_end: 3,
            horizon: 800,
            steps: 1000,
            batch: 4,
            lr: 1e-3,
            lr_floor: 0.05,
            weight_decay: 1e-4,
            cond_dropout: 0.1,
            cache_sampler_steps: 16,
            blended_target: true,
        }
    }
}

impl SrrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.chunk == 0 || self.batch == 0 || self.horizon == 0 || self.refresh_period == 0 {
            return Err(Error::config("SRR sizes, horizon and refresh period must be positive"));
        }
        if self.depth_start == 0 || self.depth_end == 0 {
            return Err(Error::config("rollout depth schedule endpoints must be positive"));
        }
        let w_max = self.radius_start.max(self.radius_end);
        if w_max > self.chunk || w_max > self.history {
            return Err(Error::config(format!("blend radius {w_max} exceeds chunk or history")));
        }
        if self.cache_sampler_steps == 0 {
            return Err(Error::config("cache sampler needs at least one step"));
        }
        check_lr(self.lr, self.lr_floor)
    }

    /// Rollout depth `N` at `step`.
    pub fn depth_at(&self, step: usize) -> usize {
        schedule_int(self.depth_start, self.depth_end, self.horizon, step).expect("validated horizon")
    }

    /// Blend radius `w` at `step`.
    pub fn radius_at(&self, step: usize) -> usize {
        schedule_int(self.radius_start, self.radius_end, self.horizon, step).expect("validated horizon")
    }

    pub fn max_depth(&self) -> usize {
        self.depth_start.max(self.depth_end)
    }

    pub fn cache_spec(&self) -> CacheSpec {
        CacheSpec {
            history: self.history,
            chunk: self.chunk,
            depth: self.max_depth(),
            period: self.refresh_period,
        }
    }
}

/// Boundary `s = T + m·K` with `m` uniform over `⌈N/2⌉..=N`.
pub fn sample_boundary(depth: usize, history: usize, chunk: usize, radius: usize, cache_depth: usize, rng: &mut RngState) -> Result<usize> {
    ensure!(depth >= 1, "rollout depth must be positive");
    let cache_end = history + cache_depth * chunk;
    ensure!(
        history + depth * chunk + radius <= cache_end,
        "cache of depth {cache_depth} cannot cover boundary {} plus radius {radius}",
        history + depth * chunk
    );
    let lo = depth.div_ceil(2);
    let m = lo + rng.below(depth - lo + 1);
    Ok(history + m * chunk)
}

/// Blend weights on the transition region around a boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendSpec {
    pub boundary: usize,
    pub radius: usize,
    /// `α_i` for `i = s - w + 1 ..= s + w`.
    pub alphas: Vec<f64>,
}

impl BlendSpec {
    pub fn new(boundary: usize, radius: usize) -> Self {
        let alphas = (1..=2 * radius)
            .map(|j| {
                let i = boundary + j - radius;
                (boundary + radius - i) as f64 / (2 * radius) as f64
            })
            .collect();
        Self {
            boundary,
            radius,
            alphas,
        }
    }

    /// Weight on the predicted frame at absolute index `i`.
    pub fn alpha(&self, i: usize) -> f64 {
        let (s, w) = (self.boundary, self.radius);
        if i + w <= s {
            1.0
        } else if i > s + w {
            0.0
        } else {
            self.alphas[i + w - s - 1]
        }
    }
}

/// Frames `s - T + 1 ..= s + K` (1-based) mixing `predicted` into `truth`.
/// Both inputs are full sequences indexed from frame 1.
pub fn build_blended_sequence(predicted: &Tensor, truth: &Tensor, boundary: usize, history: usize, chunk: usize, radius: usize) -> Result<Tensor> {
    let s = boundary;
    ensure!(s >= history, "boundary {s} precedes the history length {history}");
    ensure!(predicted.rows() >= s + radius, "predictions cover {} frames, need {}", predicted.rows(), s + radius);
    ensure!(truth.rows() >= s + chunk, "ground truth covers {} frames, need {}", truth.rows(), s + chunk);
    ensure!(predicted.cols() == truth.cols(), "latent widths differ");
    let spec = BlendSpec::new(s, radius);
    let rows: Vec<Vec<f32>> = (s - history + 1..=s + chunk)
        .map(|i| {
            let a = spec.alpha(i);
            if a == 1.0 {
                predicted.row(i - 1).to_vec()
            } else if a == 0.0 {
                truth.row(i - 1).to_vec()
            } else {
                predicted
                    .row(i - 1)
                    .iter()
                    .zip(truth.row(i - 1))
                    .map(|(&p, &g)| (a * p as f64 + (1.0 - a) * g as f64) as f32)
                    .collect()
            }
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// Ground-truth history followed by the cached generations.
pub fn rollout_sequence(clip: &Clip, traj: &RolloutTrajectory) -> Result<Tensor> {
    let head = clip.latents.slice_rows(0, traj.history)?;
    match traj.latents()? {
        Some(gen) => Tensor::concat_rows(&[&head, &gen]),
        None => Ok(head),
    }
}

/// One supervised window before noise is drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub condition: Tensor,
    pub target: Tensor,
    pub controls: Controls,
}

/// Clean ground-truth window starting at 0-based frame `start`.
pub fn base_window(clip: &Clip, start: usize, history: usize, chunk: usize) -> Result<Window> {
    ensure!(
        clip.frames() >= start + history + chunk,
        "clip of {} frames too short for window {start}+{history}+{chunk}",
        clip.frames()
    );
    Ok(Window {
        condition: clip.latents.slice_rows(start, history)?,
        target: clip.latents.slice_rows(start + history, chunk)?,
        controls: clip.controls()?.slice(start, history + chunk)?,
    })
}

/// Rollout-recovery window around boundary `s`.
pub fn srr_window(clip: &Clip, traj: &RolloutTrajectory, boundary: usize, radius: usize, blended_target: bool) -> Result<Window> {
    let (t, k) = (traj.history, traj.chunk);
    let seq = rollout_sequence(clip, traj)?;
    let blended = build_blended_sequence(&seq, &clip.latents, boundary, t, k, radius)?;
    let target = if blended_target {
        blended.slice_rows(t, k)?
    } else {
        clip.latents.slice_rows(boundary, k)?
    };
    Ok(Window {
        condition: blended.slice_rows(0, t)?,
        target,
        controls: clip.controls()?.slice(boundary - t, t + k)?,
    })
}

/// All gradients of a bound parameter set, zeros where nothing flowed.
pub fn collect_grads(tape: &Tape<f32>, vars: &[crate::tensor::Var], params: &DenoiserParams) -> Vec<Tensor> {
    vars.iter()
        .zip(&params.tensors)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect()
}

/// Draws noise (and condition dropout) for each window, averages the flow
/// losses and, when `update` is set, takes one optimizer step.
pub fn supervised_step(
    params: &mut DenoiserParams,
    optimizer: &mut AdamW,
    windows: &[Window],
    cond_dropout: f64,
    rng: &mut RngState,
    update: bool,
) -> Result<f64> {
    ensure!(!windows.is_empty(), "no windows to train on");
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, true);
    let mut losses = Vec::with_capacity(windows.len());
    for w in windows {
        let ex = FlowExample::draw(w.condition.clone(), w.target.clone(), rng)?;
        let controls = if cond_dropout > 0.0 && rng.bernoulli(cond_dropout) {
            w.controls.dropped()
        } else {
            w.controls.clone()
        };
        losses.push(flow_loss_on_tape(&mut tape, &bound, &ex, &controls)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    if losses.len() > 1 {
        total = tape.scale(total, 1.0 / losses.len() as f32)?;
    }
    let loss = tape.value(total).data()[0] as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    if update {
        tape.backward(total)?;
        let grads = collect_grads(&tape, &bound.vars, params);
        optimizer.step(&mut params.tensors, &grads)?;
    }
    Ok(loss)
}

fn check_lr(lr: f32, floor: f32) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) || !(0.0..=1.0).contains(&floor) {
        return Err(Error::config(format!("learning rate {lr} must be finite and non-negative, floor {floor} in [0, 1]")));
    }
    Ok(())
}

/// Cosine decay from `lr` at step 0 to `lr·floor` at the last step.
pub fn cosine_lr(lr: f32, floor: f32, step: usize, steps: usize) -> f32 {
    if steps <= 1 {
        return lr;
    }
    let p = (step.min(steps - 1) as f64 / (steps - 1) as f64 * std::f64::consts::PI).cos();
    (lr as f64 * (floor as f64 + (1.0 - floor as f64) * 0.5 * (1.0 + p))) as f32
}

pub fn optimizer_for(lr: f32, weight_decay: f32) -> AdamW {
    AdamW::new(AdamWConfig::new(lr, weight_decay))
}

/// Samples `cfg.batch` ground-truth windows.
pub fn sample_base_windows(clips: &[Clip], cfg: &BaseTrainConfig, rng: &mut RngState) -> Result<Vec<Window>> {
    ensure!(!clips.is_empty(), "no clips to train on");
    (0..cfg.batch)
        .map(|_| {
            let clip = &clips[rng.below(clips.len())];
            let k = cfg.chunks[rng.below(cfg.chunks.len())];
            ensure!(
                clip.frames() >= cfg.history + k,
                "clip of {} frames shorter than window {}",
                clip.frames(),
                cfg.history + k
            );
            let start = rng.below(clip.frames() - cfg.history - k + 1);
            base_window(clip, start, cfg.history, k)
        })
        .collect()
}

pub fn base_train_step(
    params: &mut DenoiserParams,
    clips: &[Clip],
    cfg: &BaseTrainConfig,
    optimizer: &mut AdamW,
    rng: &mut RngState,
    update: bool,
) -> Result<f64> {
    let windows = sample_base_windows(clips, cfg, rng)?;
    supervised_step(params, optimizer, &windows, cfg.cond_dropout, rng, update)
}

/// Runs base training for `cfg.steps` steps and returns per-step losses.
pub fn train_base(params: &mut DenoiserParams, clips: &[Clip], cfg: &BaseTrainConfig, rng: &mut RngState) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut opt = optimizer_for(cfg.lr, cfg.weight_decay);
    (0..cfg.steps)
        .map(|k| {
            opt.config.lr = cosine_lr(cfg.lr, cfg.lr_floor, k, cfg.steps);
            base_train_step(params, clips, cfg, &mut opt, rng, true)
        })
        .collect()
}

/// Rollout-recovery training state carried across steps.
pub struct SrrTrainer {
    pub config: SrrConfig,
    pub cache: RolloutCache,
    pub optimizer: AdamW,
    /// Seeds cache refreshes; independent of the step sampling stream.
    pub cache_rng: RngState,
}

impl SrrTrainer {
    pub fn new(config: SrrConfig, rng: &RngState) -> Result<Self> {
        config.validate()?;
        let optimizer = optimizer_for(config.lr, config.weight_decay);
        Ok(Self {
            config,
            cache: RolloutCache::default(),
            optimizer,
            cache_rng: rng.fork(0x5252),
        })
    }

    /// Samples one rollout-recovery window at the schedule for `step`.
    pub fn sample_window(&self, clips: &[Clip], step: usize, rng: &mut RngState) -> Result<Window> {
        let c = &self.config;
        let i = rng.below(clips.len());
        let traj = &self.cache.trajectories[i];
        let (depth, radius) = (c.depth_at(step), c.radius_at(step));
        let s = sample_boundary(depth, c.history, c.chunk, radius, traj.depth(), rng)?;
        srr_window(&clips[i], traj, s, radius, c.blended_target)
    }

    /// Refreshes the cache when due, then trains on a batch of windows.
    pub fn step(&mut self, params: &mut DenoiserParams, clips: &[Clip], step: usize, rng: &mut RngState) -> Result<f64> {
        ensure!(!clips.is_empty(), "no clips to train on");
        let sampler = SamplerConfig::new(self.config.cache_sampler_steps)?;
        self.cache.refresh(params, clips, &self.config.cache_spec(), step, &sampler, &self.cache_rng)?;
        ensure!(self.cache.trajectories.len() == clips.len(), "cache does not match the dataset");
        let windows: Vec<Window> = (0..self.config.batch)
            .map(|_| self.sample_window(clips, step, rng))
            .collect::<Result<_>>()?;
        self.optimizer.config.lr = cosine_lr(self.config.lr, self.config.lr_floor, step, self.config.steps);
        supervised_step(params, &mut self.optimizer, &windows, self.config.cond_dropout, rng, true)
    }
}

/// Runs rollout-recovery training starting from `params`.
pub fn train_srr(params: &mut DenoiserParams, clips: &[Clip], cfg: &SrrConfig, rng: &mut RngState) -> Result<Vec<f64>> {
    let mut trainer = SrrTrainer::new(cfg.clone(), rng)?;
    (0..cfg.steps).map(|k| trainer.step(params, clips, k, rng)).collect()
}
