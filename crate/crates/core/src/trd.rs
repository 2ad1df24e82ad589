//! Distillation of a multi-step, long-chunk teacher into a few-step,
//! short-chunk student along the student's own autoregressive rollouts.
//!
//! The student generates chunks with gradients attached. Every `D` chunks the
//! latest teacher-sized window is renoised once, scored by the frozen
//! teacher (conditional and unconditional) and by a critic fitted to student
//! outputs, and the distribution-matching direction is pushed back into the
//! student. History is then detached so gradients never cross spans.

use serde::{Deserialize, Serialize};

use crate::denoiser::{BoundParams, Controls, DenoiserParams, FrameNoiseLevels};
use crate::diffusion::{euler_sample_on_tape, renoise, x0_from_velocity, FlowExample, SamplerConfig, VelocityModel};
use crate::error::{ensure, Error, Result};
use crate::srr::{collect_grads, optimizer_for, supervised_step, Window};
use crate::tensor::{AdamW, RngState, Tape, Tensor, Var};
use crate::worldsim::Clip;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrdConfig {
    pub history: usize,
    pub teacher_chunk: usize,
    pub student_chunk: usize,
    pub student_steps: usize,
    pub teacher_steps: usize,
    /// Student chunks per rollout.
    pub depth: usize,
    /// Student chunks between distribution-matching updates; `None` uses
    /// `teacher_chunk / student_chunk`.
    pub dmd_interval: Option<usize>,
    pub cfg_scale: f64,
    /// Guidance threshold on the 0..1000 noise scale.
    pub cfg_plateau: f64,
    pub cfg_plateau_end: usize,
    pub cfg_zero_step: usize,
    pub student_lr: f32,
    pub critic_lr: f32,
    pub weight_decay: f32,
    pub steps: usize,
}

impl Default for TrdConfig {
    fn default() -> Self {
        Self {
            history: 8,
            teacher_chunk: 16,
            student_chunk: 4,
            student_steps: 4,
            teacher_steps: 16,
            depth: 10,
            dmd_interval: None,
            cfg_scale: 3.0,
            cfg_plateau: 1000.0,
            cfg_plateau_end: 100,
            cfg_zero_step: 400,
            student_lr: 2e-4,
            critic_lr: 1e-3,
            weight_decay: 0.0,
            steps: 150,
        }
    }
}

impl TrdConfig {
    pub fn interval(&self) -> usize {
        self.dmd_interval.unwrap_or(self.teacher_chunk / self.student_chunk.max(1))
    }

    /// Configuration errors are fatal; a teacher chunk that is not a multiple
    /// of the student chunk is only reported.
    pub fn validate(&self) -> Result<Vec<String>> {
        if [self.history, self.teacher_chunk, self.student_chunk, self.student_steps, self.teacher_steps, self.depth]
            .contains(&0)
        {
            return Err(Error::config("distillation sizes must all be positive"));
        }
        if self.interval() == 0 || self.interval() * self.student_chunk < self.teacher_chunk {
            return Err(Error::config(format!(
                "DMD interval {} of {}-frame chunks cannot fill a {}-frame window",
                self.interval(),
                self.student_chunk,
                self.teacher_chunk
            )));
        }
        if self.student_steps > self.teacher_steps {
            return Err(Error::config("student cannot use more sampler steps than the teacher"));
        }
        if !(self.cfg_scale >= 1.0) {
            return Err(Error::config("guidance scale must be at least 1"));
        }
        if self.cfg_zero_step < self.cfg_plateau_end || self.cfg_plateau < 0.0 {
            return Err(Error::config("guidance threshold must decay from a non-negative plateau"));
        }
        let mut warnings = Vec::new();
        if self.teacher_chunk % self.student_chunk != 0 {
            warnings.push(format!(
                "teacher chunk {} is not a multiple of student chunk {}",
                self.teacher_chunk, self.student_chunk
            ));
        }
        Ok(warnings)
    }

    pub fn threshold(&self) -> CfgThresholdSchedule {
        CfgThresholdSchedule {
            plateau: self.cfg_plateau,
            plateau_end: self.cfg_plateau_end,
            zero_step: self.cfg_zero_step,
        }
    }

    /// Noise levels a distribution-matching window may be renoised to: the
    /// student's grid without 0.
    pub fn tau_grid(&self) -> Vec<f32> {
        (1..=self.student_steps).map(|i| i as f32 / self.student_steps as f32).collect()
    }

    /// Windows that receive a distribution-matching update per rollout.
    pub fn firings_per_rollout(&self) -> usize {
        (self.depth / self.interval()).max(1)
    }
}

/// Plateau, then a linear decay to zero, then zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfgThresholdSchedule {
    pub plateau: f64,
    pub plateau_end: usize,
    pub zero_step: usize,
}

impl CfgThresholdSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step <= self.plateau_end {
            self.plateau
        } else if step >= self.zero_step {
            0.0
        } else {
            let frac = (step - self.plateau_end) as f64 / (self.zero_step - self.plateau_end) as f64;
            self.plateau * (1.0 - frac)
        }
    }
}

/// Guidance applies when the noise level, on the 0..1000 scale, is at most
/// the threshold.
pub fn cfg_active(tau: f32, threshold: f64) -> bool {
    1000.0 * tau as f64 <= threshold
}

/// Clean-window estimate from one forward pass on `history ++ z_tau`.
pub fn score_x0(
    model: &impl VelocityModel,
    z_tau: &Tensor,
    tau: f32,
    history: &Tensor,
    controls: &Controls,
    drop_conditions: bool,
) -> Result<Tensor> {
    let (t, k) = (history.rows(), z_tau.rows());
    ensure!(controls.frames() == t + k, "controls cover {} frames, window has {}", controls.frames(), t + k);
    let window = Tensor::concat_rows(&[history, z_tau])?;
    let c = if drop_conditions { controls.dropped() } else { controls.clone() };
    let v = model.velocity(&window, &FrameNoiseLevels::window(t, k, tau), &c)?;
    x0_from_velocity(z_tau, tau, &v.slice_rows(t, k)?)
}

/// `[(fake - real_c) - 1{cfg}(α - 1)(real_c - real_u)] / numel`.
pub fn dmd_direction(fake: &Tensor, real_cond: &Tensor, real_uncond: Option<&Tensor>, scale: f64) -> Result<Tensor> {
    let n = fake.numel() as f32;
    let base = fake.sub(real_cond)?;
    let g = match real_uncond {
        Some(u) => {
            let guide = real_cond.sub(u)?;
            let a = (scale - 1.0) as f32;
            base.zip_map(&guide, |b, gd| b - a * gd)?
        }
        None => base,
    };
    Ok(g.map(|v| v / n))
}

/// Result of one distribution-matching gradient evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrdGradient {
    pub grad: Tensor,
    pub cfg_applied: bool,
    /// Score evaluations spent (2 without guidance, 3 with).
    pub scores: usize,
}

/// The distribution-matching gradient at the student window `x`. A single
/// noise draw renoises the window for every score evaluation.
#[allow(clippy::too_many_arguments)]
pub fn trd_gradient(
    real: &impl VelocityModel,
    fake: &impl VelocityModel,
    x: &Tensor,
    history: &Tensor,
    controls: &Controls,
    tau: f32,
    threshold: f64,
    scale: f64,
    rng: &mut RngState,
) -> Result<TrdGradient> {
    let eps = rng.normal_tensor(x.shape().to_vec(), 1.0);
    let z = renoise(x, &eps, tau)?;
    let fake_x0 = score_x0(fake, &z, tau, history, controls, false)?;
    let real_c = score_x0(real, &z, tau, history, controls, false)?;
    let cfg_applied = cfg_active(tau, threshold);
    let real_u = if cfg_applied {
        Some(score_x0(real, &z, tau, history, controls, true)?)
    } else {
        None
    };
    Ok(TrdGradient {
        grad: dmd_direction(&fake_x0, &real_c, real_u.as_ref(), scale)?,
        cfg_applied,
        scores: 2 + cfg_applied as usize,
    })
}

/// Fits the critic to a detached student window as if it were clean data.
pub fn critic_step(
    critic: &mut DenoiserParams,
    optimizer: &mut AdamW,
    window: &Tensor,
    history: &Tensor,
    controls: &Controls,
    rng: &mut RngState,
) -> Result<f64> {
    let w = Window {
        condition: history.clone(),
        target: window.clone(),
        controls: controls.clone(),
    };
    supervised_step(critic, optimizer, &[w], 0.0, rng, true)
}

/// The student's rolling history on a tape. Rows are single-frame vars so
/// windows can be assembled across chunk boundaries.
pub struct StudentRollout {
    pub frames: Vec<Var>,
    pub history: usize,
}

impl StudentRollout {
    pub fn new(tape: &mut Tape<f32>, history: &Tensor) -> Result<Self> {
        let v = tape.constant(history);
        Self::from_var(tape, v)
    }

    pub fn from_var(tape: &mut Tape<f32>, history: Var) -> Result<Self> {
        let t = tape.shape(history)[0];
        let frames = (0..t).map(|i| tape.slice_rows(history, i, 1)).collect::<Result<_>>()?;
        Ok(Self { frames, history: t })
    }

    /// Absolute count of frames so far.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Replaces the retained history by gradient-free copies.
    pub fn detach(&mut self, tape: &mut Tape<f32>) {
        let start = self.frames.len().saturating_sub(self.history);
        for f in &mut self.frames[start..] {
            *f = tape.detach(*f);
        }
    }

    /// Rows `start..start + len` (0-based) as one var.
    pub fn span(&self, tape: &mut Tape<f32>, start: usize, len: usize) -> Result<Var> {
        ensure!(start + len <= self.frames.len(), "span beyond generated frames");
        tape.concat_rows(&self.frames[start..start + len])
    }

    /// Samples one chunk with gradients and appends it.
    pub fn generate(
        &mut self,
        tape: &mut Tape<f32>,
        student: &BoundParams,
        track: &Controls,
        chunk: usize,
        sampler: &SamplerConfig,
        rng: &mut RngState,
    ) -> Result<Var> {
        let n = self.frames.len();
        ensure!(track.frames() >= n + chunk, "controls end at frame {}, need {}", track.frames(), n + chunk);
        let hist = self.span(tape, n - self.history, self.history)?;
        let controls = track.slice(n - self.history, self.history + chunk)?;
        let noise = rng.normal_tensor(vec![chunk, tape.shape(hist)[1]], 1.0);
        let out = euler_sample_on_tape(tape, student, hist, &controls, &noise, sampler)?;
        for i in 0..chunk {
            let row = tape.slice_rows(out, i, 1)?;
            self.frames.push(row);
        }
        Ok(out)
    }
}

/// Bookkeeping for one distillation step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrdStepStats {
    pub dmd_firings: usize,
    pub cfg_firings: usize,
    pub critic_losses: Vec<f64>,
    /// Student evaluations per generated chunk.
    pub student_nfe_per_chunk: usize,
    pub student_nfe: usize,
    /// Teacher-equivalent cost of one supervision window: teacher sampler
    /// steps times score evaluations.
    pub teacher_nfe_per_window: usize,
    pub grad_norm: f64,
}

impl TrdStepStats {
    pub fn nfe_ratio(&self) -> f64 {
        self.teacher_nfe_per_window as f64 / self.student_nfe_per_chunk.max(1) as f64
    }
}

/// Student, frozen teacher and critic with their optimizers.
pub struct TrdTrainer {
    pub config: TrdConfig,
    pub student: DenoiserParams,
    pub teacher: DenoiserParams,
    pub critic: DenoiserParams,
    pub student_opt: AdamW,
    pub critic_opt: AdamW,
}

impl TrdTrainer {
    /// Student and critic both start as copies of the teacher.
    pub fn new(config: TrdConfig, teacher: DenoiserParams) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            student_opt: optimizer_for(config.student_lr, config.weight_decay),
            critic_opt: optimizer_for(config.critic_lr, config.weight_decay),
            student: teacher.clone(),
            critic: teacher.clone(),
            teacher,
            config,
        })
    }

    /// One rollout of the student on `clip` with distribution-matching
    /// updates, followed by a single student optimizer step.
    pub fn step(&mut self, clip: &Clip, step: usize, rng: &mut RngState) -> Result<TrdStepStats> {
        let c = self.config.clone();
        let track = clip.controls()?;
        ensure!(
            clip.frames() >= c.history + c.depth * c.student_chunk,
            "clip of {} frames too short for a {}-chunk rollout",
            clip.frames(),
            c.depth
        );
        let student_sampler = SamplerConfig::new(c.student_steps)?;
        let threshold = c.threshold().at(step);
        let grid = c.tau_grid();
        let interval = c.interval();

        let mut tape = Tape::<f32>::new();
        let bound = self.student.bind(&mut tape, true);
        let mut roll = StudentRollout::new(&mut tape, &clip.latents.slice_rows(0, c.history)?)?;
        let mut stats = TrdStepStats {
            student_nfe_per_chunk: c.student_steps,
            ..TrdStepStats::default()
        };
        let mut scores_per_window = 2;

        let mut since_update = 0;
        for n in 1..=c.depth {
            roll.generate(&mut tape, &bound, &track, c.student_chunk, &student_sampler, rng)?;
            stats.student_nfe += c.student_steps;
            since_update += 1;
            let last = n == c.depth;
            let window_len = if since_update == interval {
                Some(c.teacher_chunk)
            } else if last && stats.dmd_firings == 0 {
                // short rollouts still receive one update over what they made
                Some(since_update * c.student_chunk)
            } else {
                None
            };
            if let Some(len) = window_len {
                let scores = self.apply_dmd(&mut tape, &roll, &track, len, &grid, threshold, rng, &mut stats)?;
                scores_per_window = scores_per_window.max(scores);
                roll.detach(&mut tape);
                since_update = 0;
            }
        }
        stats.teacher_nfe_per_window = c.teacher_steps * scores_per_window;

        let grads = collect_grads(&tape, &bound.vars, &self.student);
        stats.grad_norm = grads.iter().map(|g| g.sum_sq() as f64).sum::<f64>().sqrt();
        self.student_opt.step(&mut self.student.tensors, &grads)?;
        Ok(stats)
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_dmd(
        &mut self,
        tape: &mut Tape<f32>,
        roll: &StudentRollout,
        track: &Controls,
        len: usize,
        grid: &[f32],
        threshold: f64,
        rng: &mut RngState,
        stats: &mut TrdStepStats,
    ) -> Result<usize> {
        let t = roll.history;
        let start = roll.len() - len;
        let x = roll.span(tape, start, len)?;
        let hist_var = roll.span(tape, start - t, t)?;
        let history = tape.value(hist_var);
        let controls = track.slice(start - t, t + len)?;
        let xv = tape.value(x);
        let tau = grid[rng.below(grid.len())];
        let g = trd_gradient(&self.teacher, &self.critic, &xv, &history, &controls, tau, threshold, self.config.cfg_scale, rng)?;
        let gv = tape.constant(&g.grad);
        let prod = tape.mul(x, gv)?;
        let surrogate = tape.sum(prod)?;
        tape.backward(surrogate)?;
        stats.dmd_firings += 1;
        stats.cfg_firings += g.cfg_applied as usize;
        let loss = critic_step(&mut self.critic, &mut self.critic_opt, &xv, &history, &controls, rng)?;
        stats.critic_losses.push(loss);
        Ok(g.scores)
    }
}

/// Runs `config.steps` distillation steps over randomly drawn clips.
pub fn distill(teacher: &DenoiserParams, clips: &[Clip], config: &TrdConfig, rng: &mut RngState) -> Result<(DenoiserParams, Vec<TrdStepStats>)> {
    ensure!(!clips.is_empty(), "no clips to distill on");
    let mut trainer = TrdTrainer::new(config.clone(), teacher.clone())?;
    let mut log = Vec::with_capacity(config.steps);
    for k in 0..config.steps {
        let clip = &clips[rng.below(clips.len())];
        log.push(trainer.step(clip, k, rng)?);
    }
    Ok((trainer.student, log))
}

/// Flow-matching example built from a detached student window; exposed for
/// inspection of critic inputs.
pub fn critic_example(window: &Tensor, history: &Tensor, rng: &mut RngState) -> Result<FlowExample> {
    FlowExample::draw(history.clone(), window.clone(), rng)
}
