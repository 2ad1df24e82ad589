//! Sliding-window autoregressive rollout.
//!
//! The history buffer always holds the latest `T` frames. Each step samples
//! `K` new frames conditioned on it, then evicts the oldest `K`. Frame
//! indices are counted from 1, so the first generated chunk starts right
//! after frame `T` and chunk `n` starts after boundary `T + (n - 1)·K`.

use std::collections::VecDeque;

use crate::denoiser::{Controls, DenoiserParams};
use crate::diffusion::{euler_sample, SamplerConfig, VelocityModel};
use crate::error::{ensure, Error, Result};
use crate::tensor::{RngState, Tensor};
use crate::worldsim::{drive_from, integrate_actions, layout_tokens, recover_pose, relative_action, Clip, EgoState, Scene, WorldConfig};

/// Boundary after which chunk `n` (1-based) is generated.
pub fn chunk_boundary(history: usize, chunk: usize, n: usize) -> usize {
    history + (n - 1) * chunk
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryBuffer {
    capacity: usize,
    frames: VecDeque<Vec<f32>>,
    newest: usize,
}

impl HistoryBuffer {
    /// A full buffer whose newest frame has absolute index `history.rows()`.
    pub fn from_history(history: &Tensor) -> Self {
        let frames = (0..history.rows()).map(|i| history.row(i).to_vec()).collect();
        Self {
            capacity: history.rows(),
            frames,
            newest: history.rows(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Absolute 1-based index of the newest frame.
    pub fn newest(&self) -> usize {
        self.newest
    }

    pub fn tensor(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f32>> = self.frames.iter().cloned().collect();
        Tensor::from_rows(&rows)
    }

    pub fn last(&self) -> Option<&[f32]> {
        self.frames.back().map(|v| v.as_slice())
    }

    /// Appends a chunk and drops as many of the oldest frames.
    pub fn push(&mut self, chunk: &Tensor) {
        for i in 0..chunk.rows() {
            self.frames.push_back(chunk.row(i).to_vec());
        }
        while self.frames.len() > self.capacity {
            self.frames.pop_front();
        }
        self.newest += chunk.rows();
    }
}

/// One autoregressive step. `track` holds controls for every absolute frame;
/// the window uses rows `newest - T .. newest + K`.
pub fn ar_step(
    model: &impl VelocityModel,
    buffer: &mut HistoryBuffer,
    track: &Controls,
    chunk: usize,
    sampler: &SamplerConfig,
    rng: &mut RngState,
) -> Result<Tensor> {
    ensure!(
        buffer.len() == buffer.capacity() && !buffer.is_empty(),
        "history buffer holds {} of {} frames",
        buffer.len(),
        buffer.capacity()
    );
    let start = buffer.newest() - buffer.capacity();
    ensure!(
        track.frames() >= buffer.newest() + chunk,
        "controls cover {} frames, step needs {}",
        track.frames(),
        buffer.newest() + chunk
    );
    let controls = track.slice(start, buffer.capacity() + chunk)?;
    let out = euler_sample(model, &buffer.tensor()?, &controls, chunk, sampler, rng)?;
    buffer.push(&out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrajectory {
    pub history: usize,
    pub chunk: usize,
    pub chunks: Vec<Tensor>,
    pub seed: u64,
    pub fingerprint: u64,
}

impl RolloutTrajectory {
    pub fn depth(&self) -> usize {
        self.chunks.len()
    }

    pub fn generated_frames(&self) -> usize {
        self.chunks.len() * self.chunk
    }

    /// `T + (n - 1)·K` for every chunk.
    pub fn boundaries(&self) -> Vec<usize> {
        (1..=self.depth()).map(|n| chunk_boundary(self.history, self.chunk, n)).collect()
    }

    /// All generated frames, `None` for an empty rollout.
    pub fn latents(&self) -> Result<Option<Tensor>> {
        if self.chunks.is_empty() {
            return Ok(None);
        }
        let parts: Vec<&Tensor> = self.chunks.iter().collect();
        Tensor::concat_rows(&parts).map(Some)
    }

    /// Generated frame with absolute 1-based index `i` (so `i > T`).
    pub fn frame(&self, i: usize) -> Option<&[f32]> {
        let j = i.checked_sub(self.history + 1)?;
        self.chunks.get(j / self.chunk).map(|c| c.row(j % self.chunk))
    }
}

/// `depth` chained steps from a ground-truth history under fixed controls.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    model: &impl VelocityModel,
    history: &Tensor,
    track: &Controls,
    depth: usize,
    chunk: usize,
    sampler: &SamplerConfig,
    rng: &mut RngState,
    fingerprint: u64,
) -> Result<RolloutTrajectory> {
    let t = history.rows();
    ensure!(
        track.frames() >= t + depth * chunk,
        "controls cover {} frames, rollout needs {}",
        track.frames(),
        t + depth * chunk
    );
    let seed = rng.seed();
    let mut buffer = HistoryBuffer::from_history(history);
    let mut chunks = Vec::with_capacity(depth);
    for _ in 0..depth {
        chunks.push(ar_step(model, &mut buffer, track, chunk, sampler, rng)?);
    }
    Ok(RolloutTrajectory {
        history: t,
        chunk,
        chunks,
        seed,
        fingerprint,
    })
}

/// Open-loop rollout of a clip from its first `history` frames.
pub fn rollout_clip(
    model: &impl VelocityModel,
    clip: &Clip,
    history: usize,
    depth: usize,
    chunk: usize,
    sampler: &SamplerConfig,
    rng: &mut RngState,
    fingerprint: u64,
) -> Result<RolloutTrajectory> {
    let h = clip.latents.slice_rows(0, history)?;
    rollout(model, &h, &clip.controls()?, depth, chunk, sampler, rng, fingerprint)
}

/// Maps the latest recovered pose to the next chunk's actions.
pub trait Controller {
    fn actions(&self, pose: &EgoState, scene: &Scene, step: usize, chunk: usize) -> Result<Vec<[f64; 3]>>;
}

/// Emits zero motion.
#[derive(Clone, Copy, Debug, Default)]
pub struct StandStill;

impl Controller for StandStill {
    fn actions(&self, _: &EgoState, _: &Scene, _: usize, chunk: usize) -> Result<Vec<[f64; 3]>> {
        Ok(vec![[0.0; 3]; chunk])
    }
}

/// Plans with the world's own pure-pursuit driver from the recovered pose.
#[derive(Clone, Debug)]
pub struct PurePursuit {
    pub world: WorldConfig,
}

impl Controller for PurePursuit {
    fn actions(&self, pose: &EgoState, scene: &Scene, step: usize, chunk: usize) -> Result<Vec<[f64; 3]>> {
        let poses = drive_from(&self.world, scene, *pose, step, chunk + 1)?;
        Ok(poses.windows(2).map(|w| relative_action(&w[0], &w[1])).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopRun {
    pub trajectory: RolloutTrajectory,
    /// Controller output per chunk, verbatim.
    pub actions: Vec<Vec<[f64; 3]>>,
    /// Pose recovered from the newest frame before each chunk.
    pub recovered: Vec<EgoState>,
}

/// Closed-loop generation: before each chunk the newest frame is decoded to
/// a pose, the controller plans `K` actions from it, and the planned poses
/// supply the layout tokens. Only the initial history comes from the clip.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop_rollout(
    model: &impl VelocityModel,
    world: &WorldConfig,
    scene: &Scene,
    initial: &Clip,
    history: usize,
    controller: &impl Controller,
    depth: usize,
    chunk: usize,
    sampler: &SamplerConfig,
    rng: &mut RngState,
    fingerprint: u64,
) -> Result<ClosedLoopRun> {
    let seed = rng.seed();
    let mut buffer = HistoryBuffer::from_history(&initial.latents.slice_rows(0, history)?);
    let mut ctrl_hist = initial.controls()?.slice(0, history)?;
    let mut chunks = Vec::with_capacity(depth);
    let mut actions = Vec::with_capacity(depth);
    let mut recovered = Vec::with_capacity(depth);
    for n in 0..depth {
        let last = buffer.last().expect("buffer is full");
        let pose = recover_pose(world, last, scene, &initial.anchor_ids)
            .map_err(|e| Error::Degenerate(format!("chunk {}: {e}", n + 1)))?;
        let step = buffer.newest() - 1;
        let planned = controller.actions(&pose, scene, step, chunk)?;
        ensure!(planned.len() == chunk, "controller returned {} actions for {chunk} frames", planned.len());
        let poses = integrate_actions(pose, &planned);
        let layout: Vec<Vec<f32>> = poses[1..].iter().map(|p| layout_tokens(world, p, scene)).collect();
        let acts: Vec<Vec<f32>> = planned.iter().map(|a| a.iter().map(|&v| v as f32).collect()).collect();
        let next = Controls::new(Tensor::from_rows(&layout)?, Tensor::from_rows(&acts)?)?;
        let window = Controls::concat(&[&ctrl_hist, &next])?;
        let out = euler_sample(model, &buffer.tensor()?, &window, chunk, sampler, rng)?;
        buffer.push(&out);
        ctrl_hist = window.slice(chunk, history)?;
        chunks.push(out);
        actions.push(planned);
        recovered.push(pose);
    }
    Ok(ClosedLoopRun {
        trajectory: RolloutTrajectory {
            history,
            chunk,
            chunks,
            seed,
            fingerprint,
        },
        actions,
        recovered,
    })
}

/// Per-clip rollouts of a model, regenerated every `period` steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutCache {
    pub trajectories: Vec<RolloutTrajectory>,
    pub last_refresh: Option<usize>,
    pub fingerprint: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheSpec {
    pub history: usize,
    pub chunk: usize,
    pub depth: usize,
    pub period: usize,
}

impl RolloutCache {
    /// True when the cache was produced by different parameters.
    pub fn is_stale(&self, params: &DenoiserParams) -> bool {
        self.fingerprint != Some(params.fingerprint())
    }

    pub fn due(&self, step: usize, period: usize) -> bool {
        match self.last_refresh {
            None => true,
            Some(last) => step.saturating_sub(last) >= period,
        }
    }

    /// Regenerates every trajectory when the refresh period has elapsed.
    /// Returns whether a refresh happened.
    pub fn refresh(
        &mut self,
        params: &DenoiserParams,
        clips: &[Clip],
        spec: &CacheSpec,
        step: usize,
        sampler: &SamplerConfig,
        rng: &RngState,
    ) -> Result<bool> {
        if !self.due(step, spec.period) {
            return Ok(false);
        }
        let fp = params.fingerprint();
        let base = rng.fork(step as u64);
        self.trajectories = clips
            .iter()
            .enumerate()
            .map(|(i, clip)| {
                let mut r = base.fork(i as u64);
                rollout_clip(params, clip, spec.history, spec.depth, spec.chunk, sampler, &mut r, fp)
            })
            .collect::<Result<_>>()?;
        self.last_refresh = Some(step);
        self.fingerprint = Some(fp);
        Ok(true)
    }
}
