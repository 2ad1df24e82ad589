//! Synthetic 2-D driving world.
//!
//! A scene is a set of landmarks around a smooth closed track. An ego car
//! follows the track with pure-pursuit steering. Each frame's latent is the
//! ego-frame position of a few fixed anchor landmarks plus speed and local
//! track curvature, so poses can be read back from latents in closed form.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{RngState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub landmarks: usize,
    pub anchors: usize,
    /// Non-anchor landmarks whose ego-frame positions form the layout tokens.
    pub layout_landmarks: usize,
    /// Landmarks are drawn in `[-half_extent, half_extent]²`.
    pub half_extent: f64,
    pub track_points: usize,
    pub track_radius: [f64; 2],
    /// Relative amplitude bound of each track harmonic.
    pub track_wobble: f64,
    pub cruise_speed: [f64; 2],
    /// Relative amplitude of the periodic target-speed variation.
    pub speed_variation: f64,
    pub speed_period: f64,
    pub max_accel: f64,
    pub max_turn: f64,
    pub lookahead: f64,
    /// Distances in latents and layout tokens are divided by this.
    pub length_unit: f64,
    pub speed_unit: f64,
    pub curvature_gain: f64,
    /// Width of the kernel that smooths waypoint curvature at the ego position.
    pub curvature_bandwidth: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            landmarks: 16,
            anchors: 3,
            layout_landmarks: 2,
            half_extent: 5.0,
            track_points: 64,
            track_radius: [2.5, 3.5],
            track_wobble: 0.08,
            cruise_speed: [0.08, 0.12],
            speed_variation: 0.15,
            speed_period: 40.0,
            max_accel: 0.004,
            max_turn: 0.08,
            lookahead: 0.6,
            length_unit: 2.5,
            speed_unit: 0.1,
            curvature_gain: 3.0,
            curvature_bandwidth: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors < 2 {
            return Err(Error::config("registration needs at least 2 anchors"));
        }
        if self.landmarks < self.anchors + self.layout_landmarks {
            return Err(Error::config(format!(
                "{} landmarks cannot supply {} anchors and {} layout landmarks",
                self.landmarks, self.anchors, self.layout_landmarks
            )));
        }
        if self.track_points < 8 {
            return Err(Error::config("track needs at least 8 waypoints"));
        }
        let positive = [
            self.half_extent,
            self.track_radius[0],
            self.cruise_speed[0],
            self.speed_period,
            self.max_accel,
            self.max_turn,
            self.lookahead,
            self.length_unit,
            self.speed_unit,
            self.curvature_bandwidth,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config("world scales must be positive and finite"));
        }
        if self.track_radius[1] < self.track_radius[0] || self.cruise_speed[1] < self.cruise_speed[0] {
            return Err(Error::config("range bounds out of order"));
        }
        Ok(())
    }

    /// `2k + 2`: anchor coordinates, speed and curvature.
    pub fn latent_dim(&self) -> usize {
        2 * self.anchors + 2
    }

    pub fn layout_dim(&self) -> usize {
        2 * self.layout_landmarks
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    // maps into (-π, π]
    if r <= -PI {
        r += TAU;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub speed: f64,
}

impl EgoState {
    pub fn new(x: f64, y: f64, yaw: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
            speed,
        }
    }

    /// World point expressed in this pose's frame.
    pub fn to_ego(&self, p: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        let (s, c) = self.yaw.sin_cos();
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// The nearest pose whose fields are all exactly representable in `f32`,
    /// with yaw kept inside (-π, π].
    pub fn at_f32_precision(&self) -> Self {
        let round = |v: f64| v as f32 as f64;
        let mut yaw = round(wrap_angle(self.yaw));
        if yaw > PI {
            yaw = round(yaw - TAU);
        }
        if yaw <= -PI {
            yaw = f32::from_bits((-PI as f32).to_bits() - 1) as f64;
        }
        Self {
            x: round(self.x),
            y: round(self.y),
            yaw,
            speed: round(self.speed),
        }
    }

    pub fn distance(&self, other: &EgoState) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub landmarks: Vec<[f64; 2]>,
    pub track: Vec<[f64; 2]>,
    pub anchors: Vec<usize>,
    pub layout_ids: Vec<usize>,
    /// Discrete curvature at each waypoint.
    pub curvature: Vec<f64>,
    pub cruise_speed: f64,
    pub speed_phase: f64,
    pub seed: u64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Signed turning angle per unit length at every waypoint of a closed loop.
fn loop_curvature(track: &[[f64; 2]]) -> Vec<f64> {
    let n = track.len();
    (0..n)
        .map(|i| {
            let (p, c, q) = (track[(i + n - 1) % n], track[i], track[(i + 1) % n]);
            let h1 = (c[1] - p[1]).atan2(c[0] - p[0]);
            let h2 = (q[1] - c[1]).atan2(q[0] - c[0]);
            let ds = 0.5 * (dist(p, c) + dist(c, q));
            wrap_angle(h2 - h1) / ds
        })
        .collect()
}

/// Indices of the `count` landmarks nearest `p`, skipping `exclude`.
fn nearest(landmarks: &[[f64; 2]], p: [f64; 2], count: usize, exclude: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..landmarks.len()).filter(|i| !exclude.contains(i)).collect();
    idx.sort_by(|&a, &b| dist(landmarks[a], p).total_cmp(&dist(landmarks[b], p)).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

impl Scene {
    /// Builds a scene from explicit geometry, choosing anchors nearest the
    /// track start and layout landmarks nearest after those.
    pub fn from_parts(
        cfg: &WorldConfig,
        landmarks: Vec<[f64; 2]>,
        track: Vec<[f64; 2]>,
        cruise_speed: f64,
        seed: u64,
    ) -> Result<Self> {
        ensure!(landmarks.len() >= cfg.anchors + cfg.layout_landmarks, "too few landmarks");
        ensure!(track.len() >= 3, "track needs at least 3 waypoints");
        let start = track[0];
        let anchors = nearest(&landmarks, start, cfg.anchors, &[]);
        for (i, &a) in anchors.iter().enumerate() {
            for &b in &anchors[..i] {
                if dist(landmarks[a], landmarks[b]) < 1e-6 {
                    return Err(Error::Degenerate(format!("anchors {a} and {b} coincide")));
                }
            }
        }
        let layout_ids = nearest(&landmarks, start, cfg.layout_landmarks, &anchors);
        let curvature = loop_curvature(&track);
        Ok(Self {
            landmarks,
            track,
            anchors,
            layout_ids,
            curvature,
            cruise_speed,
            speed_phase: 0.0,
            seed,
        })
    }

    pub fn anchor_positions(&self) -> Vec<[f64; 2]> {
        self.anchors.iter().map(|&i| self.landmarks[i]).collect()
    }

    /// Target speed at frame `step`.
    pub fn target_speed(&self, cfg: &WorldConfig, step: usize) -> f64 {
        let phase = TAU * step as f64 / cfg.speed_period + self.speed_phase;
        self.cruise_speed * (1.0 + cfg.speed_variation * phase.sin())
    }

    /// Pose at the first waypoint, heading along the track.
    pub fn start_pose(&self, cfg: &WorldConfig) -> EgoState {
        let (a, b) = (self.track[0], self.track[1]);
        EgoState::new(a[0], a[1], (b[1] - a[1]).atan2(b[0] - a[0]), self.target_speed(cfg, 0))
    }

    /// Kernel-weighted waypoint curvature near `(x, y)`; continuous in position.
    pub fn curvature_at(&self, cfg: &WorldConfig, x: f64, y: f64) -> f64 {
        let d2: Vec<f64> = self.track.iter().map(|p| (p[0] - x).powi(2) + (p[1] - y).powi(2)).collect();
        let min = d2.iter().cloned().fold(f64::INFINITY, f64::min);
        let bw2 = 2.0 * cfg.curvature_bandwidth.powi(2);
        let (mut num, mut den) = (0.0, 0.0);
        for (k, d) in self.curvature.iter().zip(&d2) {
            let w = (-(d - min) / bw2).exp();
            num += w * k;
            den += w;
        }
        num / den
    }

    /// Waypoint index closest to `(x, y)`, lowest index on ties.
    pub fn nearest_waypoint(&self, x: f64, y: f64) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, p) in self.track.iter().enumerate() {
            let d = (p[0] - x).powi(2) + (p[1] - y).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

/// A smooth random closed loop with a random start phase.
pub fn generate_scene(cfg: &WorldConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = RngState::new(seed);
    let landmarks: Vec<[f64; 2]> = (0..cfg.landmarks)
        .map(|_| {
            [
                rng.uniform_range(-cfg.half_extent, cfg.half_extent),
                rng.uniform_range(-cfg.half_extent, cfg.half_extent),
            ]
        })
        .collect();
    let radius = rng.uniform_range(cfg.track_radius[0], cfg.track_radius[1]);
    let harmonics: Vec<(f64, f64)> = (2..=3)
        .map(|_| (rng.uniform_range(-cfg.track_wobble, cfg.track_wobble), rng.uniform_range(0.0, TAU)))
        .collect();
    let start = rng.uniform_range(0.0, TAU);
    let center = [rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.5, 0.5)];
    let n = cfg.track_points;
    let track = (0..n)
        .map(|i| {
            let th = start + TAU * i as f64 / n as f64;
            let r = radius * (1.0 + harmonics.iter().enumerate().map(|(j, (a, ph))| a * ((j + 2) as f64 * th + ph).cos()).sum::<f64>());
            [center[0] + r * th.cos(), center[1] + r * th.sin()]
        })
        .collect();
    let cruise = rng.uniform_range(cfg.cruise_speed[0], cfg.cruise_speed[1]);
    let phase = rng.uniform_range(0.0, TAU);
    let mut scene = Scene::from_parts(cfg, landmarks, track, cruise, seed)?;
    scene.speed_phase = phase;
    Ok(scene)
}

/// Pure-pursuit command `(turn, accel)` for one frame, both capped.
pub fn pure_pursuit(cfg: &WorldConfig, scene: &Scene, pose: &EgoState, step: usize) -> (f64, f64) {
    let n = scene.track.len();
    let mut i = scene.nearest_waypoint(pose.x, pose.y);
    let pos = [pose.x, pose.y];
    for _ in 0..n {
        let next = (i + 1) % n;
        if dist(scene.track[i], pos) >= cfg.lookahead {
            break;
        }
        i = next;
    }
    let target = pose.to_ego(scene.track[i]);
    let ld = target[0].hypot(target[1]).max(1e-9);
    let alpha = target[1].atan2(target[0]);
    let kappa = 2.0 * alpha.sin() / ld;
    let turn = (pose.speed * kappa).clamp(-cfg.max_turn, cfg.max_turn);
    let accel = (scene.target_speed(cfg, step + 1) - pose.speed).clamp(-cfg.max_accel, cfg.max_accel);
    (turn, accel)
}

/// Advances a pose by one frame: move at the current speed along the
/// midpoint heading, then turn and accelerate.
pub fn step_pose(pose: &EgoState, turn: f64, accel: f64) -> EgoState {
    let mid = pose.yaw + 0.5 * turn;
    EgoState::new(
        pose.x + pose.speed * mid.cos(),
        pose.y + pose.speed * mid.sin(),
        pose.yaw + turn,
        pose.speed + accel,
    )
}

/// `frames` poses from the track start under pure-pursuit control.
pub fn drive(cfg: &WorldConfig, scene: &Scene, frames: usize) -> Result<Vec<EgoState>> {
    drive_from(cfg, scene, scene.start_pose(cfg), 0, frames)
}

pub fn drive_from(cfg: &WorldConfig, scene: &Scene, start: EgoState, first_step: usize, frames: usize) -> Result<Vec<EgoState>> {
    ensure!(frames >= 2, "drive needs at least 2 frames, got {frames}");
    let mut poses = Vec::with_capacity(frames);
    poses.push(start);
    for step in first_step..first_step + frames - 1 {
        let p = *poses.last().unwrap();
        let (turn, accel) = pure_pursuit(cfg, scene, &p, step);
        poses.push(step_pose(&p, turn, accel));
    }
    Ok(poses)
}

/// Anchor coordinates in the ego frame, speed, and local curvature.
pub fn encode_latent(cfg: &WorldConfig, pose: &EgoState, scene: &Scene) -> Result<Vec<f32>> {
    ensure!(scene.anchors.len() >= 2, "scene has {} anchors", scene.anchors.len());
    let mut z = Vec::with_capacity(2 * scene.anchors.len() + 2);
    for a in scene.anchor_positions() {
        let q = pose.to_ego(a);
        z.push((q[0] / cfg.length_unit) as f32);
        z.push((q[1] / cfg.length_unit) as f32);
    }
    z.push((pose.speed / cfg.speed_unit) as f32);
    z.push((cfg.curvature_gain * scene.curvature_at(cfg, pose.x, pose.y)) as f32);
    Ok(z)
}

/// Ego-frame coordinates of the layout landmarks.
pub fn layout_tokens(cfg: &WorldConfig, pose: &EgoState, scene: &Scene) -> Vec<f32> {
    scene
        .layout_ids
        .iter()
        .flat_map(|&i| {
            let q = pose.to_ego(scene.landmarks[i]);
            [(q[0] / cfg.length_unit) as f32, (q[1] / cfg.length_unit) as f32]
        })
        .collect()
}

/// Rigid registration of the latent's anchor coordinates onto the world
/// anchors. Errors when the anchors or the observation carry no rotation.
pub fn recover_pose(cfg: &WorldConfig, latent: &[f32], scene: &Scene, anchor_ids: &[usize]) -> Result<EgoState> {
    let k = anchor_ids.len();
    ensure!(k >= 2, "registration needs at least 2 anchors, got {k}");
    ensure!(latent.len() >= 2 * k + 1, "latent of width {} too short for {k} anchors", latent.len());
    let world: Vec<[f64; 2]> = anchor_ids.iter().map(|&i| scene.landmarks[i]).collect();
    let ego: Vec<[f64; 2]> = (0..k)
        .map(|i| [latent[2 * i] as f64 * cfg.length_unit, latent[2 * i + 1] as f64 * cfg.length_unit])
        .collect();
    let centroid = |pts: &[[f64; 2]]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [sx / k as f64, sy / k as f64]
    };
    let (pw, qe) = (centroid(&world), centroid(&ego));
    let spread: f64 = world.iter().map(|p| dist(*p, pw).powi(2)).sum();
    if spread < 1e-12 {
        return Err(Error::Degenerate("anchors coincide".into()));
    }
    let (mut dot, mut cross) = (0.0, 0.0);
    for (p, q) in world.iter().zip(&ego) {
        let (a, b) = ([q[0] - qe[0], q[1] - qe[1]], [p[0] - pw[0], p[1] - pw[1]]);
        dot += a[0] * b[0] + a[1] * b[1];
        cross += a[0] * b[1] - a[1] * b[0];
    }
    if dot.hypot(cross) < 1e-9 * spread {
        return Err(Error::Degenerate("observed anchors carry no orientation".into()));
    }
    let yaw = cross.atan2(dot);
    let (s, c) = yaw.sin_cos();
    let x = pw[0] - (c * qe[0] - s * qe[1]);
    let y = pw[1] - (s * qe[0] + c * qe[1]);
    Ok(EgoState::new(x, y, yaw, latent[2 * k] as f64 * cfg.speed_unit))
}

/// Relative motion from pose `i` to pose `i + 1`, in the frame of pose `i`.
pub fn relative_action(from: &EgoState, to: &EgoState) -> [f64; 3] {
    let d = from.to_ego([to.x, to.y]);
    [d[0], d[1], wrap_angle(to.yaw - from.yaw)]
}

/// One action per consecutive pose pair.
pub fn actions_from_poses(poses: &[EgoState]) -> Result<Vec<[f64; 3]>> {
    ensure!(poses.len() >= 2, "need at least 2 poses, got {}", poses.len());
    Ok(poses.windows(2).map(|w| relative_action(&w[0], &w[1])).collect())
}

/// Inverse of [`actions_from_poses`]; speeds are not recoverable and copy `start`.
pub fn integrate_actions(start: EgoState, actions: &[[f64; 3]]) -> Vec<EgoState> {
    let mut out = vec![start];
    for a in actions {
        let p = *out.last().unwrap();
        let (s, c) = p.yaw.sin_cos();
        out.push(EgoState::new(p.x + c * a[0] - s * a[1], p.y + s * a[0] + c * a[1], p.yaw + a[2], p.speed));
    }
    out
}

/// A ground-truth sequence and everything needed to condition on it.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    /// `[F, latent_dim]`.
    pub latents: Tensor,
    /// `[F - 1, 3]`; row `i` moves frame `i` to frame `i + 1`.
    pub actions: Tensor,
    /// `[F, layout_dim]`.
    pub layout: Tensor,
    pub poses: Vec<EgoState>,
    pub anchor_ids: Vec<usize>,
    pub seed: u64,
}

impl Clip {
    pub fn frames(&self) -> usize {
        self.latents.rows()
    }

    /// Frame-aligned actions `[F, 3]`: frame `i` carries the motion into it,
    /// and the first frame carries zero.
    pub fn action_track(&self) -> Tensor {
        let w = 3;
        let mut data = vec![0.0f32; w];
        data.extend_from_slice(self.actions.data());
        Tensor::new(vec![self.frames(), w], data).expect("action rows are finite")
    }

    pub fn controls(&self) -> Result<crate::denoiser::Controls> {
        crate::denoiser::Controls::new(self.layout.clone(), self.action_track())
    }
}

/// Derives every per-frame record from a pose sequence. Poses are first
/// rounded to `f32` so a stored clip re-derives exactly.
pub fn clip_from_poses(cfg: &WorldConfig, scene: &Scene, poses: Vec<EgoState>) -> Result<Clip> {
    let poses: Vec<EgoState> = poses.iter().map(EgoState::at_f32_precision).collect();
    let latents: Vec<Vec<f32>> = poses.iter().map(|p| encode_latent(cfg, p, scene)).collect::<Result<_>>()?;
    let layout: Vec<Vec<f32>> = poses.iter().map(|p| layout_tokens(cfg, p, scene)).collect();
    let actions: Vec<Vec<f32>> = actions_from_poses(&poses)?
        .iter()
        .map(|a| a.iter().map(|&v| v as f32).collect())
        .collect();
    Ok(Clip {
        latents: Tensor::from_rows(&latents)?,
        actions: Tensor::from_rows(&actions)?,
        layout: Tensor::from_rows(&layout)?,
        poses,
        anchor_ids: scene.anchors.clone(),
        seed: scene.seed,
    })
}

pub fn make_clip(cfg: &WorldConfig, seed: u64, frames: usize) -> Result<(Scene, Clip)> {
    let scene = generate_scene(cfg, seed)?;
    let poses = drive(cfg, &scene, frames)?;
    let clip = clip_from_poses(cfg, &scene, poses)?;
    Ok((scene, clip))
}

/// `count` clips whose scene seeds are derived from `seed`.
pub fn make_clips(cfg: &WorldConfig, seed: u64, count: usize, frames: usize) -> Result<Vec<Clip>> {
    let mut rng = RngState::new(seed);
    (0..count)
        .map(|_| {
            let s = rng.next_u64();
            make_clip(cfg, s, frames).map(|(_, c)| c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cfg() -> WorldConfig {
        WorldConfig {
            length_unit: 1.0,
            ..WorldConfig::default()
        }
    }

    fn manual_scene(cfg: &WorldConfig, anchors: Vec<[f64; 2]>) -> Scene {
        let mut landmarks = anchors;
        while landmarks.len() < cfg.anchors + cfg.layout_landmarks {
            let i = landmarks.len() as f64;
            landmarks.push([40.0 + i, 40.0]);
        }
        let track: Vec<[f64; 2]> = (0..20).map(|i| [i as f64 * 0.5, 0.0]).collect();
        Scene::from_parts(cfg, landmarks, track, 0.1, 0).unwrap()
    }

    #[test]
    fn wrap_stays_in_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        for i in -100..100 {
            let w = wrap_angle(i as f64 * 0.37);
            assert!(w > -PI && w <= PI);
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = WorldConfig::default();
        assert_eq!(generate_scene(&cfg, 4).unwrap(), generate_scene(&cfg, 4).unwrap());
        assert_ne!(generate_scene(&cfg, 4).unwrap(), generate_scene(&cfg, 5).unwrap());
    }

    #[test]
    fn scene_counts_and_distinct_anchors() {
        let cfg = WorldConfig::default();
        for seed in 0..50 {
            let s = generate_scene(&cfg, seed).unwrap();
            assert_eq!(s.landmarks.len(), cfg.landmarks);
            assert_eq!(s.anchors.len(), cfg.anchors);
            for (i, a) in s.anchors.iter().enumerate() {
                assert!(!s.anchors[..i].contains(a));
                assert!(!s.layout_ids.contains(a));
            }
        }
    }

    #[test]
    fn straight_track_keeps_heading() {
        let cfg = WorldConfig {
            speed_variation: 0.0,
            ..WorldConfig::default()
        };
        let scene = manual_scene(&cfg, vec![[0.0, 1.0], [1.0, 1.0], [2.0, -1.0]]);
        let poses = drive(&cfg, &scene, 30).unwrap();
        for w in poses.windows(2) {
            assert_eq!(w[1].yaw, w[0].yaw);
            assert!((w[1].x - w[0].x - w[0].speed).abs() < 1e-12);
        }
        assert!(drive(&cfg, &scene, 1).is_err());
    }

    #[test]
    fn turn_and_accel_stay_capped() {
        let cfg = WorldConfig::default();
        for seed in 0..1000 {
            let scene = generate_scene(&cfg, seed).unwrap();
            let poses = drive(&cfg, &scene, 48).unwrap();
            for w in poses.windows(2) {
                assert!(wrap_angle(w[1].yaw - w[0].yaw).abs() <= cfg.max_turn + 1e-12);
                assert!((w[1].speed - w[0].speed).abs() <= cfg.max_accel + 1e-12);
            }
        }
    }

    #[test]
    fn drive_is_deterministic() {
        let cfg = WorldConfig::default();
        let s = generate_scene(&cfg, 17).unwrap();
        assert_eq!(drive(&cfg, &s, 40).unwrap(), drive(&cfg, &s, 40).unwrap());
    }

    #[test]
    fn car_stays_on_the_loop() {
        let cfg = WorldConfig::default();
        for seed in 0..100 {
            let s = generate_scene(&cfg, seed).unwrap();
            for p in drive(&cfg, &s, 400).unwrap() {
                let i = s.nearest_waypoint(p.x, p.y);
                assert!(dist(s.track[i], [p.x, p.y]) < 0.5, "seed {seed} left the track");
            }
        }
    }

    #[test]
    fn latent_identity_frame() {
        let cfg = unit_cfg();
        let scene = manual_scene(&cfg, vec![[1.0, 0.0], [0.0, 1.0], [-3.0, -3.0]]);
        assert_eq!(scene.anchors, vec![0, 1, 2]);
        let z = encode_latent(&cfg, &EgoState::new(0.0, 0.0, 0.0, 0.1), &scene).unwrap();
        assert_eq!(&z[..4], &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn latent_rotation_by_quarter_turn() {
        let p = EgoState::new(2.0, 0.0, PI / 2.0, 0.1);
        let q = p.to_ego([3.0, 0.0]);
        assert!(q[0].abs() < 1e-15 && (q[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn latent_is_lipschitz_in_pose() {
        let cfg = WorldConfig::default();
        let scene = generate_scene(&cfg, 3).unwrap();
        let mut rng = RngState::new(0);
        let mut worst: f64 = 0.0;
        for _ in 0..500 {
            let p = EgoState::new(rng.uniform_range(-3.0, 3.0), rng.uniform_range(-3.0, 3.0), rng.uniform_range(-PI, PI), 0.1);
            let h = 1e-3;
            let q = EgoState::new(p.x + rng.uniform_range(-h, h), p.y + rng.uniform_range(-h, h), p.yaw + rng.uniform_range(-h, h), 0.1);
            let (a, b) = (encode_latent(&cfg, &p, &scene).unwrap(), encode_latent(&cfg, &q, &scene).unwrap());
            let dz: f64 = a.iter().zip(&b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
            let dp = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + wrap_angle(p.yaw - q.yaw).powi(2)).sqrt();
            worst = worst.max(dz / dp);
        }
        // recorded bound for this scene: rotation lever arms of at most ~8 units
        assert!(worst < 10.0, "Lipschitz ratio {worst}");
    }

    #[test]
    fn pose_round_trip_is_tight() {
        let cfg = WorldConfig::default();
        let mut rng = RngState::new(1);
        for i in 0..1000 {
            let scene = generate_scene(&cfg, i / 10).unwrap();
            let p = EgoState::new(rng.uniform_range(-4.0, 4.0), rng.uniform_range(-4.0, 4.0), rng.uniform_range(-PI, PI), rng.uniform_range(0.05, 0.15));
            let z = encode_latent(&cfg, &p, &scene).unwrap();
            let r = recover_pose(&cfg, &z, &scene, &scene.anchors).unwrap();
            assert!(p.distance(&r) <= 1e-5, "position error {}", p.distance(&r));
            assert!(wrap_angle(p.yaw - r.yaw).abs() <= 1e-6, "yaw error {}", wrap_angle(p.yaw - r.yaw));
            assert!((p.speed - r.speed).abs() <= 1e-6);
        }
    }

    #[test]
    fn identity_pose_round_trips() {
        let cfg = unit_cfg();
        let scene = manual_scene(&cfg, vec![[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]);
        let p = EgoState::new(0.0, 0.0, 0.0, 0.0);
        let r = recover_pose(&cfg, &encode_latent(&cfg, &p, &scene).unwrap(), &scene, &scene.anchors).unwrap();
        assert_eq!((r.x, r.y, r.yaw, r.speed), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn coincident_anchors_are_degenerate() {
        let cfg = unit_cfg();
        let mut scene = manual_scene(&cfg, vec![[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]);
        scene.landmarks = vec![[1.0, 1.0]; scene.landmarks.len()];
        let err = recover_pose(&cfg, &[0.0; 8], &scene, &scene.anchors);
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn recovery_error_scales_with_latent_noise() {
        let cfg = WorldConfig::default();
        let scene = generate_scene(&cfg, 9).unwrap();
        let poses = drive(&cfg, &scene, 48).unwrap();
        let mut rng = RngState::new(2);
        let delta = 1e-3;
        for p in &poses {
            let z: Vec<f32> = encode_latent(&cfg, p, &scene)
                .unwrap()
                .iter()
                .map(|v| v + (delta * rng.normal()) as f32)
                .collect();
            let r = recover_pose(&cfg, &z, &scene, &scene.anchors).unwrap();
            assert!(p.distance(&r) <= 10.0 * delta * cfg.length_unit);
        }
    }

    #[test]
    fn unit_translation_and_pure_rotation_actions() {
        let o = EgoState::new(0.0, 0.0, 0.0, 0.0);
        assert_eq!(actions_from_poses(&[o, EgoState::new(1.0, 0.0, 0.0, 0.0)]).unwrap(), vec![[1.0, 0.0, 0.0]]);
        let a = actions_from_poses(&[o, EgoState::new(0.0, 0.0, 0.3, 0.0)]).unwrap();
        assert_eq!(a, vec![[0.0, 0.0, 0.3]]);
        assert!(actions_from_poses(&[o]).is_err());
    }

    #[test]
    fn actions_reintegrate_to_the_trajectory() {
        let mut rng = RngState::new(3);
        for _ in 0..50 {
            let mut poses = vec![EgoState::new(rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0), rng.uniform_range(-PI, PI), 0.0)];
            for _ in 0..30 {
                let p = poses.last().unwrap();
                poses.push(EgoState::new(p.x + rng.uniform_range(-0.3, 0.3), p.y + rng.uniform_range(-0.3, 0.3), p.yaw + rng.uniform_range(-1.0, 1.0), 0.0));
            }
            let back = integrate_actions(poses[0], &actions_from_poses(&poses).unwrap());
            for (a, b) in poses.iter().zip(&back) {
                assert!(a.distance(b) <= 1e-5);
                assert!(wrap_angle(a.yaw - b.yaw).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn clips_are_self_consistent() {
        let cfg = WorldConfig::default();
        let (scene, clip) = make_clip(&cfg, 21, 48).unwrap();
        assert_eq!(clip.frames(), 48);
        assert_eq!(clip.actions.rows(), 47);
        let again = clip_from_poses(&cfg, &scene, clip.poses.clone()).unwrap();
        assert_eq!(again, clip);
        let track = clip.action_track();
        assert_eq!(track.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(track.row(5), clip.actions.row(4));
    }

    #[test]
    fn distinct_seeds_distinct_first_latents() {
        let cfg = WorldConfig::default();
        let clips = make_clips(&cfg, 7, 40, 4).unwrap();
        for i in 0..clips.len() {
            for j in 0..i {
                assert_ne!(clips[i].latents.row(0), clips[j].latents.row(0));
            }
        }
    }

    #[test]
    fn f32_precision_is_idempotent() {
        let mut rng = RngState::new(31);
        for _ in 0..1000 {
            let p = EgoState::new(rng.uniform_range(-9.0, 9.0), rng.uniform_range(-9.0, 9.0), rng.uniform_range(-4.0, 4.0), rng.uniform());
            let q = p.at_f32_precision();
            assert_eq!(q, q.at_f32_precision());
            assert!(q.yaw > -PI && q.yaw <= PI);
            assert!(p.distance(&q) < 1e-5);
        }
        for yaw in [PI, -PI, PI - 1e-12] {
            let q = EgoState::new(0.0, 0.0, yaw, 0.0).at_f32_precision();
            assert!(q.yaw > -PI && q.yaw <= PI);
            assert_eq!(q, q.at_f32_precision());
        }
    }

    proptest::proptest! {
        #[test]
        fn wrap_angle_lands_in_half_open_interval(a in -100.0f64..100.0) {
            let w = wrap_angle(a);
            proptest::prop_assert!(w > -PI && w <= PI);
            proptest::prop_assert!(((a - w) / TAU - ((a - w) / TAU).round()).abs() < 1e-9);
        }

        #[test]
        fn any_pose_round_trips(seed in 0u64..50, x in -4.0f64..4.0, y in -4.0f64..4.0, yaw in -PI..PI, speed in 0.0f64..0.2) {
            let cfg = WorldConfig::default();
            let scene = generate_scene(&cfg, seed).unwrap();
            let p = EgoState::new(x, y, yaw, speed);
            let r = recover_pose(&cfg, &encode_latent(&cfg, &p, &scene).unwrap(), &scene, &scene.anchors).unwrap();
            proptest::prop_assert!(p.distance(&r) <= 1e-5);
            proptest::prop_assert!(wrap_angle(p.yaw - r.yaw).abs() <= 1e-6);
        }
    }
}
