//! Linear flow-matching schedule, v-prediction loss and Euler sampling.
//!
//! Time runs from data at `t = 0` to pure noise at `t = 1`, with
//! `z_t = (1 - t)·z0 + t·ε`. The velocity target is `z0 - ε`, constant along
//! each straight path, so a single Euler step with the exact field lands on
//! the data point.

use std::cell::Cell;

use crate::denoiser::{BoundParams, Controls, DenoiserParams, FrameNoiseLevels};
use crate::error::{ensure, Result};
use crate::tensor::{RngState, Scalar, Tape, Tensor, Var};

/// Training noise levels are drawn from `{1/GRID, 2/GRID, ..., 1}`.
pub const TRAIN_T_GRID: usize = 32;

/// The linear schedule `σ(t) = 1 - t`, the weight on clean data.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseSchedule;

impl NoiseSchedule {
    pub fn sigma(self, t: f64) -> f64 {
        1.0 - t
    }
}

fn check_t(t: f32) -> Result<()> {
    ensure!((0.0..=1.0).contains(&t), "noise level {t} outside [0, 1]");
    Ok(())
}

/// `σ(t)·z0 + (1 - σ(t))·ε`.
pub fn renoise(z0: &Tensor, eps: &Tensor, t: f32) -> Result<Tensor> {
    check_t(t)?;
    let s = 1.0 - t;
    z0.zip_map(eps, |a, e| s * a + t * e)
}

/// Clean-sample estimate `z_t + (1 - σ(t))·v`.
pub fn x0_from_velocity(z_t: &Tensor, t: f32, v: &Tensor) -> Result<Tensor> {
    check_t(t)?;
    z_t.zip_map(v, |z, v| z + t * v)
}

pub fn sample_training_t(rng: &mut RngState) -> f32 {
    (rng.below(TRAIN_T_GRID) + 1) as f32 / TRAIN_T_GRID as f32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl SamplerConfig {
    pub fn new(steps: usize) -> Result<Self> {
        ensure!(steps >= 1, "sampler needs at least one step");
        Ok(Self { steps })
    }

    /// `t_M = 1 > ... > t_0 = 0`, listed from 1 down to 0.
    pub fn grid(&self) -> Vec<f32> {
        (0..=self.steps).rev().map(|i| i as f32 / self.steps as f32).collect()
    }
}

/// Anything that predicts a velocity for every frame of a window.
pub trait VelocityModel {
    fn velocity(&self, z: &Tensor, t: &FrameNoiseLevels, controls: &Controls) -> Result<Tensor>;
}

impl VelocityModel for DenoiserParams {
    fn velocity(&self, z: &Tensor, t: &FrameNoiseLevels, controls: &Controls) -> Result<Tensor> {
        self.predict(z, t, controls)
    }
}

impl<M: VelocityModel + ?Sized> VelocityModel for &M {
    fn velocity(&self, z: &Tensor, t: &FrameNoiseLevels, controls: &Controls) -> Result<Tensor> {
        (**self).velocity(z, t, controls)
    }
}

/// Counts evaluations and the window sizes a model is asked to process.
pub struct Instrumented<M> {
    pub inner: M,
    calls: Cell<usize>,
    min_frames: Cell<usize>,
    max_frames: Cell<usize>,
}

impl<M> Instrumented<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
            min_frames: Cell::new(usize::MAX),
            max_frames: Cell::new(0),
        }
    }

    /// Number of function evaluations so far.
    pub fn nfe(&self) -> usize {
        self.calls.get()
    }

    /// Smallest and largest window seen, `None` before the first call.
    pub fn window_range(&self) -> Option<(usize, usize)> {
        (self.calls.get() > 0).then(|| (self.min_frames.get(), self.max_frames.get()))
    }
}

impl<M: VelocityModel> VelocityModel for Instrumented<M> {
    fn velocity(&self, z: &Tensor, t: &FrameNoiseLevels, controls: &Controls) -> Result<Tensor> {
        let f = z.rows();
        self.calls.set(self.calls.get() + 1);
        self.min_frames.set(self.min_frames.get().min(f));
        self.max_frames.set(self.max_frames.get().max(f));
        self.inner.velocity(z, t, controls)
    }
}

/// Optimal field for i.i.d. Gaussian data `N(mean, std²)` in every element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianOracle {
    pub mean: f64,
    pub std: f64,
}

impl GaussianOracle {
    pub fn field(&self, z: f64, t: f64) -> f64 {
        let s2 = self.std * self.std;
        let a = 1.0 - t;
        let gain = (a * s2 - t) / (a * a * s2 + t * t);
        self.mean + gain * (z - a * self.mean)
    }
}

impl VelocityModel for GaussianOracle {
    fn velocity(&self, z: &Tensor, t: &FrameNoiseLevels, _controls: &Controls) -> Result<Tensor> {
        let w = z.cols();
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let t = t.0[i / w] as f64;
                if t == 0.0 {
                    0.0
                } else {
                    self.field(v as f64, t) as f32
                }
            })
            .collect();
        Tensor::new(z.shape().to_vec(), data)
    }
}

/// Exact mean and variance of `steps`-step Euler samples under the oracle
/// field. The update is affine in the starting noise, so pushing `ε = 0` and
/// `ε = 1` through it gives the offset and the gain.
pub fn oracle_sample_moments(oracle: &GaussianOracle, steps: usize) -> Result<(f64, f64)> {
    let history = Tensor::zeros(vec![1, 1]);
    let controls = Controls::new(Tensor::zeros(vec![3, 1]), Tensor::zeros(vec![3, 3]))?;
    let noise = Tensor::new(vec![2, 1], vec![0.0f32, 1.0])?;
    let out = euler_sample_from_noise(oracle, &history, &controls, noise, &SamplerConfig::new(steps)?)?;
    let (offset, unit) = (out.data()[0] as f64, out.data()[1] as f64);
    Ok((offset, (unit - offset).powi(2)))
}

/// Returns `z0 - ε` on the trailing chunk rows regardless of input.
#[derive(Clone, Debug)]
pub struct ExactField {
    pub target: Tensor,
}

impl VelocityModel for ExactField {
    fn velocity(&self, z: &Tensor, _t: &FrameNoiseLevels, _controls: &Controls) -> Result<Tensor> {
        let cond = z.rows() - self.target.rows();
        let head = Tensor::zeros(vec![cond.max(1), z.cols()]);
        if cond == 0 {
            return Ok(self.target.clone());
        }
        Tensor::concat_rows(&[&head, &self.target])
    }
}

/// Draws chunk noise and integrates from `t = 1` to `t = 0`.
pub fn euler_sample(
    model: &impl VelocityModel,
    history: &Tensor,
    controls: &Controls,
    chunk: usize,
    sampler: &SamplerConfig,
    rng: &mut RngState,
) -> Result<Tensor> {
    ensure!(sampler.steps >= 1, "sampler needs at least one step");
    let noise = rng.normal_tensor(vec![chunk, history.cols()], 1.0);
    euler_sample_from_noise(model, history, controls, noise, sampler)
}

/// Euler integration of the chunk starting at `noise`. History frames are
/// fed clean at `t = 0` on every step and never modified.
pub fn euler_sample_from_noise(
    model: &impl VelocityModel,
    history: &Tensor,
    controls: &Controls,
    noise: Tensor,
    sampler: &SamplerConfig,
) -> Result<Tensor> {
    ensure!(sampler.steps >= 1, "sampler needs at least one step");
    let (cond, chunk) = (history.rows(), noise.rows());
    ensure!(
        controls.frames() == cond + chunk,
        "controls cover {} frames, window has {}",
        controls.frames(),
        cond + chunk
    );
    ensure!(history.cols() == noise.cols(), "history and chunk widths differ");
    let grid = sampler.grid();
    let mut z = noise;
    for pair in grid.windows(2) {
        let (t_cur, t_next) = (pair[0], pair[1]);
        let window = Tensor::concat_rows(&[history, &z])?;
        let v = model.velocity(&window, &FrameNoiseLevels::window(cond, chunk, t_cur), controls)?;
        let v = v.slice_rows(cond, chunk)?;
        let dt = t_cur - t_next;
        z = z.zip_map(&v, |z, v| z + dt * v)?;
    }
    Ok(z)
}

/// Differentiable Euler integration on a tape; gradients reach the params
/// and any trainable history rows.
pub fn euler_sample_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    params: &BoundParams,
    history: Var,
    controls: &Controls,
    noise: &Tensor<F>,
    sampler: &SamplerConfig,
) -> Result<Var> {
    ensure!(sampler.steps >= 1, "sampler needs at least one step");
    let cond = tape.shape(history)[0];
    let chunk = noise.rows();
    let grid = sampler.grid();
    let mut z = tape.constant(noise);
    for pair in grid.windows(2) {
        let (t_cur, t_next) = (pair[0], pair[1]);
        let window = tape.concat_rows(&[history, z])?;
        let v = params.forward(tape, window, &FrameNoiseLevels::window(cond, chunk, t_cur), controls)?;
        let v = tape.slice_rows(v, cond, chunk)?;
        let step = tape.scale(v, F::from_f64_lossy((t_cur - t_next) as f64))?;
        z = tape.add(z, step)?;
    }
    Ok(z)
}

/// One supervised window: clean condition frames, the clean chunk target,
/// its noise level and noise draw.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowExample {
    pub condition: Tensor,
    pub target: Tensor,
    pub t: f32,
    pub eps: Tensor,
}

impl FlowExample {
    pub fn new(condition: Tensor, target: Tensor, t: f32, eps: Tensor) -> Result<Self> {
        check_t(t)?;
        ensure!(target.shape() == eps.shape(), "noise shape {:?} != chunk {:?}", eps.shape(), target.shape());
        ensure!(condition.cols() == target.cols(), "condition and chunk widths differ");
        Ok(Self {
            condition,
            target,
            t,
            eps,
        })
    }

    /// Samples `t` from the training grid and fresh noise.
    pub fn draw(condition: Tensor, target: Tensor, rng: &mut RngState) -> Result<Self> {
        let t = sample_training_t(rng);
        let eps = rng.normal_tensor(target.shape().to_vec(), 1.0);
        Self::new(condition, target, t, eps)
    }

    /// Splits a clean window into `cond` condition frames and the rest.
    pub fn from_window(window: &Tensor, cond: usize, rng: &mut RngState) -> Result<Self> {
        ensure!(cond < window.rows(), "chunk span is empty");
        let condition = window.slice_rows(0, cond)?;
        let target = window.slice_rows(cond, window.rows() - cond)?;
        Self::draw(condition, target, rng)
    }

    pub fn chunk_len(&self) -> usize {
        self.target.rows()
    }

    pub fn levels(&self) -> FrameNoiseLevels {
        FrameNoiseLevels::window(self.condition.rows(), self.chunk_len(), self.t)
    }

    pub fn noisy_window(&self) -> Result<Tensor> {
        let noisy = renoise(&self.target, &self.eps, self.t)?;
        Tensor::concat_rows(&[&self.condition, &noisy])
    }

    /// `z0 - ε` on the chunk.
    pub fn velocity_target(&self) -> Result<Tensor> {
        self.target.sub(&self.eps)
    }
}

/// Chunk-only v-prediction MSE for any velocity model, without gradients.
pub fn flow_loss(model: &impl VelocityModel, example: &FlowExample, controls: &Controls) -> Result<f64> {
    let v = model.velocity(&example.noisy_window()?, &example.levels(), controls)?;
    let v = v.slice_rows(example.condition.rows(), example.chunk_len())?;
    let target = example.velocity_target()?;
    let se: f64 = v
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    Ok(se / target.numel() as f64)
}

/// The same loss recorded on a tape.
pub fn flow_loss_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    params: &BoundParams,
    example: &FlowExample,
    controls: &Controls,
) -> Result<Var> {
    let window = tape.constant(&example.noisy_window()?.cast::<F>());
    let v = params.forward(tape, window, &example.levels(), controls)?;
    let v = tape.slice_rows(v, example.condition.rows(), example.chunk_len())?;
    let target = tape.constant(&example.velocity_target()?.cast::<F>());
    let diff = tape.sub(v, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    fn controls(frames: usize, layout_dim: usize) -> Controls {
        Controls::new(Tensor::zeros(vec![frames, layout_dim]), Tensor::zeros(vec![frames, 3])).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_monotone() {
        let s = NoiseSchedule;
        assert_eq!(s.sigma(0.0), 1.0);
        assert_eq!(s.sigma(1.0), 0.0);
        let mut prev = s.sigma(0.0);
        for i in 1..=1000 {
            let v = s.sigma(i as f64 / 1000.0);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn renoise_endpoints() {
        let mut rng = RngState::new(1);
        let z0 = rng.normal_tensor(vec![3, 4], 1.0);
        let eps = rng.normal_tensor(vec![3, 4], 1.0);
        assert_eq!(renoise(&z0, &eps, 0.0).unwrap(), z0);
        assert_eq!(renoise(&z0, &eps, 1.0).unwrap(), eps);
        let mid = renoise(&z0, &eps, 0.5).unwrap();
        for ((m, a), e) in mid.data().iter().zip(z0.data()).zip(eps.data()) {
            assert_eq!(*m, 0.5 * a + 0.5 * e);
        }
        assert!(renoise(&z0, &eps, 1.5).is_err());
        assert!(renoise(&z0, &eps, -0.1).is_err());
    }

    #[test]
    fn x0_identity_holds_on_grid() {
        let mut rng = RngState::new(2);
        let z0 = Tensor::<f64>::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let eps = Tensor::<f64>::new(vec![4], vec![1.0, 0.5, -0.7, 2.2]).unwrap();
        for _ in 0..100 {
            let t = rng.uniform();
            let zt = z0.zip_map(&eps, |a, e| (1.0 - t) * a + t * e).unwrap();
            let v = z0.sub(&eps).unwrap();
            let back = zt.zip_map(&v, |z, v| z + t * v).unwrap();
            for (b, a) in back.data().iter().zip(z0.data()) {
                assert!((b - a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_levels_lie_on_grid_excluding_zero() {
        let mut rng = RngState::new(3);
        for _ in 0..1000 {
            let t = sample_training_t(&mut rng);
            assert!(t > 0.0 && t <= 1.0);
            assert_eq!((t * 32.0).fract(), 0.0);
        }
    }

    #[test]
    fn grid_is_strictly_decreasing() {
        let g = SamplerConfig::new(16).unwrap().grid();
        assert_eq!(g.len(), 17);
        assert_eq!((g[0], g[16]), (1.0, 0.0));
        assert!(g.windows(2).all(|w| w[0] > w[1]));
        assert!(SamplerConfig::new(0).is_err());
    }

    #[test]
    fn exact_predictor_has_zero_loss() {
        let mut rng = RngState::new(4);
        let window = rng.normal_tensor(vec![6, 8], 1.0);
        let ex = FlowExample::from_window(&window, 4, &mut rng).unwrap();
        let model = ExactField {
            target: ex.velocity_target().unwrap(),
        };
        assert_eq!(flow_loss(&model, &ex, &controls(6, 4)).unwrap(), 0.0);
    }

    struct Zero;
    impl VelocityModel for Zero {
        fn velocity(&self, z: &Tensor, _: &FrameNoiseLevels, _: &Controls) -> Result<Tensor> {
            Ok(Tensor::zeros(z.shape().to_vec()))
        }
    }

    #[test]
    fn zero_predictor_loss_is_target_energy() {
        let mut rng = RngState::new(5);
        let window = rng.normal_tensor(vec![6, 8], 1.0);
        let ex = FlowExample::from_window(&window, 2, &mut rng).unwrap();
        let target = ex.velocity_target().unwrap();
        let expect: f64 = target.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / target.numel() as f64;
        let got = flow_loss(&Zero, &ex, &controls(6, 4)).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_chunk_rejected() {
        let mut rng = RngState::new(6);
        let window = rng.normal_tensor(vec![4, 8], 1.0);
        assert!(FlowExample::from_window(&window, 4, &mut rng).is_err());
    }

    #[test]
    fn replayed_example_gives_same_loss() {
        let cfg = DenoiserConfig {
            d_model: 16,
            heads: 2,
            ..DenoiserConfig::default()
        };
        let mut rng = RngState::new(7);
        let p = DenoiserParams::init(&cfg, &mut rng).unwrap();
        let window = rng.normal_tensor(vec![6, 8], 1.0);
        let ex = FlowExample::from_window(&window, 3, &mut RngState::new(99)).unwrap();
        let ex2 = FlowExample::from_window(&window, 3, &mut RngState::new(99)).unwrap();
        let c = controls(6, cfg.layout_dim);
        assert_eq!(flow_loss(&p, &ex, &c).unwrap(), flow_loss(&p, &ex2, &c).unwrap());

        let mut tape = Tape::<f32>::new();
        let bound = p.bind(&mut tape, true);
        let l = flow_loss_on_tape(&mut tape, &bound, &ex, &c).unwrap();
        let on_tape = tape.value(l).data()[0] as f64;
        assert!((on_tape - flow_loss(&p, &ex, &c).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn one_step_with_exact_field_recovers_data() {
        let mut rng = RngState::new(8);
        let history = rng.normal_tensor(vec![3, 8], 1.0);
        let z0 = rng.normal_tensor(vec![2, 8], 1.0);
        let eps = rng.normal_tensor(vec![2, 8], 1.0);
        let model = ExactField {
            target: z0.sub(&eps).unwrap(),
        };
        let out = euler_sample_from_noise(&model, &history, &controls(5, 4), eps, &SamplerConfig::new(1).unwrap()).unwrap();
        // exact up to the rounding of eps + (z0 - eps) in 32-bit
        for (a, b) in out.data().iter().zip(z0.data()) {
            assert!((a - b).abs() <= 2.0 * f32::EPSILON * b.abs().max(1.0));
        }
    }

    /// Records every window it sees.
    struct Spy(std::cell::RefCell<Vec<Tensor>>);
    impl VelocityModel for Spy {
        fn velocity(&self, z: &Tensor, t: &FrameNoiseLevels, _: &Controls) -> Result<Tensor> {
            assert!(t.0[..3].iter().all(|&v| v == 0.0));
            self.0.borrow_mut().push(z.clone());
            Ok(z.map(|v| 0.3 * v + 0.1))
        }
    }

    #[test]
    fn history_frames_fed_clean_and_untouched() {
        let mut rng = RngState::new(9);
        let history = rng.normal_tensor(vec![3, 8], 1.0);
        let before = history.to_vec();
        let spy = Spy(Default::default());
        euler_sample(&spy, &history, &controls(5, 4), 2, &SamplerConfig::new(4).unwrap(), &mut rng).unwrap();
        assert_eq!(history.to_vec(), before);
        let seen = spy.0.borrow();
        assert_eq!(seen.len(), 4);
        for w in seen.iter() {
            assert_eq!(w.slice_rows(0, 3).unwrap().data(), &before[..]);
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let oracle = GaussianOracle { mean: 0.5, std: 0.7 };
        let history = Tensor::zeros(vec![2, 8]);
        let s = SamplerConfig::new(8).unwrap();
        let a = euler_sample(&oracle, &history, &controls(5, 4), 3, &s, &mut RngState::new(10)).unwrap();
        let b = euler_sample(&oracle, &history, &controls(5, 4), 3, &s, &mut RngState::new(10)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn instrumented_counts_calls_and_windows() {
        let oracle = Instrumented::new(GaussianOracle { mean: 0.0, std: 1.0 });
        let history = Tensor::zeros(vec![2, 8]);
        euler_sample(&oracle, &history, &controls(5, 4), 3, &SamplerConfig::new(4).unwrap(), &mut RngState::new(1)).unwrap();
        assert_eq!(oracle.nfe(), 4);
        assert_eq!(oracle.window_range(), Some((5, 5)));
    }

    #[test]
    fn tape_sampler_matches_plain_sampler() {
        let cfg = DenoiserConfig {
            d_model: 16,
            heads: 2,
            ..DenoiserConfig::default()
        };
        let mut rng = RngState::new(11);
        let mut p = DenoiserParams::init(&cfg, &mut rng).unwrap();
        for t in p.tensors.iter_mut() {
            *t = rng.normal_tensor(t.shape().to_vec(), 0.2);
        }
        let history = rng.normal_tensor(vec![3, 8], 1.0);
        let noise = rng.normal_tensor(vec![2, 8], 1.0);
        let c = Controls::new(rng.normal_tensor(vec![5, 4], 1.0), rng.normal_tensor(vec![5, 3], 0.1)).unwrap();
        let s = SamplerConfig::new(3).unwrap();
        let plain = euler_sample_from_noise(&p, &history, &c, noise.clone(), &s).unwrap();
        let mut tape = Tape::<f32>::new();
        let bound = p.bind(&mut tape, true);
        let h = tape.constant(&history);
        let out = euler_sample_on_tape(&mut tape, &bound, h, &c, &noise, &s).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    fn sample_moments(oracle: &GaussianOracle, steps: usize, draws: usize, seed: u64) -> (f64, f64) {
        let out = euler_sample(oracle, &Tensor::zeros(vec![1, 1]), &controls(1 + draws, 4), draws, &SamplerConfig::new(steps).unwrap(), &mut RngState::new(seed)).unwrap();
        let xs: Vec<f64> = out.data().iter().map(|&v| v as f64).collect();
        let m = xs.iter().sum::<f64>() / draws as f64;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
        (m, var)
    }

    #[test]
    fn thirty_two_steps_match_gaussian_moments() {
        let oracle = GaussianOracle { mean: 2.0, std: 1.0 };
        let (m, var) = sample_moments(&oracle, 32, 10_000, 12);
        assert!((m - 2.0).abs() <= 0.05, "mean {m}");
        assert!((var - 1.0).abs() <= 0.10, "variance {var}");
    }

    #[test]
    fn exact_moments_within_ten_percent_at_32_steps() {
        for (mean, std) in [(1.5, 0.5), (2.0, 1.0), (-0.7, 2.0)] {
            let o = GaussianOracle { mean, std };
            let (m, var) = oracle_sample_moments(&o, 32).unwrap();
            assert!((m - mean).abs() < 1e-5, "mean {m} for {mean}");
            let rel = (var / (std * std) - 1.0).abs();
            assert!(rel <= 0.10, "std {std}: variance off by {rel}");
            // a single step collapses every draw onto the mean
            let (m1, v1) = oracle_sample_moments(&o, 1).unwrap();
            assert!((m1 - mean).abs() < 1e-6 && v1 < 1e-12, "one step: {m1} {v1}");
        }
    }

    #[test]
    fn refining_steps_never_worsens_distribution() {
        let oracle = GaussianOracle { mean: 0.5, std: 0.8 };
        for seed in 0..3 {
            let mut last = f64::INFINITY;
            for steps in [1, 2, 4, 8, 16, 32] {
                let (m, var) = sample_moments(&oracle, steps, 4000, 20 + seed);
                let err = (m - 0.5).abs() + (var / 0.64 - 1.0).abs();
                assert!(err <= last, "seed {seed}: error {err} at {steps} steps after {last}");
                last = err;
            }
        }
    }
}
