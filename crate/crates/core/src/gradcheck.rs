//! Finite-difference oracles for the tape.
//!
//! Each case builds a scalar loss `Σ w ⊙ op(inputs)` with a fixed random
//! weight `w`, takes the analytic gradient from a tape in the precision
//! under test, and compares it with central differences evaluated in 64-bit
//! replay. The error reported is `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
//! over every checked coordinate of every input.

use crate::denoiser::{bind_tensors, Controls, DenoiserConfig, DenoiserParams, FrameNoiseLevels};
use crate::error::Result;
use crate::tensor::{RngState, Scalar, Tape, Tensor, Var};

/// Precision of the analytic side of a check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Central-difference step used against this precision.
    pub fn step(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-5,
        }
    }

    /// Pass threshold on the relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Matmul,
    MatmulNt,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Offset,
    Silu,
    LayerNorm,
    Softmax,
    Mean,
    Sum,
    SumSq,
    SliceRows,
    SliceCols,
    ConcatRows,
    ConcatCols,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Matmul,
        OpKind::MatmulNt,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::Offset,
        OpKind::Silu,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::SumSq,
        OpKind::SliceRows,
        OpKind::SliceCols,
        OpKind::ConcatRows,
        OpKind::ConcatCols,
    ];

    /// Random input shapes for one case, plus op-specific integers.
    fn draw(self, rng: &mut RngState) -> (Vec<[usize; 2]>, [usize; 2]) {
        let mut d = || 1 + rng.below(4);
        let (m, k, n) = (d(), d(), d());
        match self {
            OpKind::Matmul => (vec![[m, k], [k, n]], [0, 0]),
            OpKind::MatmulNt => (vec![[m, k], [n, k]], [0, 0]),
            OpKind::Add | OpKind::Sub | OpKind::Mul => (vec![[m, n]; 2], [0, 0]),
            OpKind::AddRow => (vec![[m, n], [1, n]], [0, 0]),
            OpKind::Softmax => (vec![[m, n + 1]], [0, 0]),
            // two columns normalize to ±1 with a near-zero gradient
            OpKind::LayerNorm => (vec![[m, n + 2]], [0, 0]),
            OpKind::SliceRows => {
                let rows = m + 1;
                let start = rng.below(rows);
                let len = 1 + rng.below(rows - start);
                (vec![[rows, n]], [start, len])
            }
            OpKind::SliceCols => {
                let cols = n + 1;
                let start = rng.below(cols);
                let len = 1 + rng.below(cols - start);
                (vec![[m, cols]], [start, len])
            }
            OpKind::ConcatRows => (vec![[m, n], [k, n], [1, n]], [0, 0]),
            OpKind::ConcatCols => (vec![[m, n], [m, k], [m, 1]], [0, 0]),
            _ => (vec![[m, n]], [0, 0]),
        }
    }

    fn apply<F: Scalar>(self, tape: &mut Tape<F>, x: &[Var], ints: [usize; 2], constant: F) -> Result<Var> {
        match self {
            OpKind::Matmul => tape.matmul(x[0], x[1]),
            OpKind::MatmulNt => tape.matmul_nt(x[0], x[1]),
            OpKind::Add => tape.add(x[0], x[1]),
            OpKind::Sub => tape.sub(x[0], x[1]),
            OpKind::Mul => tape.mul(x[0], x[1]),
            OpKind::AddRow => tape.add_row(x[0], x[1]),
            OpKind::Scale => tape.scale(x[0], constant),
            OpKind::Offset => tape.offset(x[0], constant),
            OpKind::Silu => tape.silu(x[0]),
            OpKind::LayerNorm => tape.layer_norm(x[0]),
            OpKind::Softmax => tape.softmax(x[0]),
            OpKind::Mean => tape.mean(x[0]),
            OpKind::Sum => tape.sum(x[0]),
            OpKind::SumSq => tape.sum_sq(x[0]),
            OpKind::SliceRows => tape.slice_rows(x[0], ints[0], ints[1]),
            OpKind::SliceCols => tape.slice_cols(x[0], ints[0], ints[1]),
            OpKind::ConcatRows => tape.concat_rows(x),
            OpKind::ConcatCols => tape.concat_cols(x),
        }
    }
}

/// Outcome of one oracle case.
#[derive(Clone, Copy, Debug)]
pub struct CheckResult {
    pub rel_error: f64,
    pub coordinates: usize,
}

fn weighted_sum<F: Scalar>(tape: &mut Tape<F>, y: Var, weight: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(&weight.cast::<F>().reshape(tape.shape(y).to_vec())?);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn tensor_f64(shape: [usize; 2], rng: &mut RngState) -> Tensor<f64> {
    rng.normal_tensor(shape.to_vec(), 1.0).cast::<f64>()
}

fn analytic_op<F: Scalar>(op: OpKind, inputs: &[Tensor<f64>], ints: [usize; 2], c: f64, weight: &Tensor<f64>) -> Result<Vec<f64>> {
    let mut tape = Tape::<F>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(&t.cast::<F>())).collect();
    let y = op.apply(&mut tape, &vars, ints, F::from_f64_lossy(c))?;
    let loss = weighted_sum(&mut tape, y, weight)?;
    tape.backward(loss)?;
    let mut out = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match tape.grad(*v) {
            Some(g) => out.extend(g.data().iter().map(|x| x.to_f64_lossy())),
            None => out.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    Ok(out)
}

fn loss_f64(op: OpKind, inputs: &[Tensor<f64>], ints: [usize; 2], c: f64, weight: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let y = op.apply(&mut tape, &vars, ints, c)?;
    let loss = weighted_sum(&mut tape, y, weight)?;
    Ok(tape.value(loss).data()[0])
}

fn perturbed(t: &Tensor<f64>, i: usize, delta: f64) -> Tensor<f64> {
    let mut data = t.to_vec();
    data[i] += delta;
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// One random case of `op`, seeded.
pub fn check_op(op: OpKind, precision: Precision, seed: u64) -> Result<CheckResult> {
    let mut rng = RngState::new(seed);
    let (shapes, ints) = op.draw(&mut rng);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|&s| tensor_f64(s, &mut rng)).collect();
    let c = rng.uniform_range(-2.0, 2.0);
    let mut probe = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t)).collect();
    let y = op.apply(&mut probe, &vars, ints, c)?;
    let weight = tensor_f64([1, probe.value(y).numel()], &mut rng);

    let analytic = match precision {
        Precision::F32 => analytic_op::<f32>(op, &inputs, ints, c, &weight)?,
        Precision::F64 => analytic_op::<f64>(op, &inputs, ints, c, &weight)?,
    };
    let h = precision.step();
    let mut numeric = Vec::with_capacity(analytic.len());
    for (j, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[j] = perturbed(t, i, h);
            let mut minus = inputs.clone();
            minus[j] = perturbed(t, i, -h);
            numeric.push((loss_f64(op, &plus, ints, c, &weight)? - loss_f64(op, &minus, ints, c, &weight)?) / (2.0 * h));
        }
    }
    Ok(CheckResult {
        rel_error: relative_error(&analytic, &numeric),
        coordinates: numeric.len(),
    })
}

/// A small denoiser with every tensor randomized so no path is gated off.
pub fn oracle_denoiser(rng: &mut RngState) -> Result<DenoiserParams> {
    let config = DenoiserConfig {
        latent_dim: 3,
        d_model: 8,
        layers: 2,
        heads: 2,
        max_frames: 8,
        layout_dim: 2,
        action_embed_dim: 4,
        time_embed_dim: 4,
        ffn_mult: 2,
        ..DenoiserConfig::default()
    };
    let mut params = DenoiserParams::init(&config, rng)?;
    for t in params.tensors.iter_mut() {
        *t = rng.normal_tensor(t.shape().to_vec(), 0.3);
    }
    Ok(params)
}

struct DenoiserCase {
    params: DenoiserParams,
    z: Tensor<f64>,
    levels: FrameNoiseLevels,
    controls: Controls,
    weight: Tensor<f64>,
}

impl DenoiserCase {
    fn draw(seed: u64) -> Result<Self> {
        let mut rng = RngState::new(seed);
        let params = oracle_denoiser(&mut rng)?;
        let cfg = &params.config;
        let frames = 2 + rng.below(4);
        let history = rng.below(frames);
        let z = tensor_f64([frames, cfg.latent_dim], &mut rng);
        let levels = FrameNoiseLevels::window(history, frames - history, rng.uniform_range(0.05, 0.95) as f32);
        let controls = Controls::new(rng.normal_tensor(vec![frames, cfg.layout_dim], 1.0), rng.normal_tensor(vec![frames, 3], 0.1))?;
        let weight = tensor_f64([frames, cfg.latent_dim], &mut rng);
        Ok(Self {
            params,
            z,
            levels,
            controls,
            weight,
        })
    }

    /// Parameter tensors followed by the latent input, all in 64-bit.
    fn leaves(&self) -> Vec<Tensor<f64>> {
        let mut out: Vec<Tensor<f64>> = self.params.tensors.iter().map(|t| t.cast::<f64>()).collect();
        out.push(self.z.clone());
        out
    }

    fn loss<F: Scalar>(&self, leaves: &[Tensor<f64>], trainable: bool) -> Result<(Tape<F>, Vec<Var>, Var)> {
        let mut tape = Tape::<F>::new();
        let n = leaves.len() - 1;
        let cast: Vec<Tensor<F>> = leaves[..n].iter().map(|t| t.cast::<F>()).collect();
        let bound = bind_tensors(&self.params.config, &cast, &mut tape, trainable);
        let z = tape.leaf(&leaves[n].cast::<F>(), trainable);
        let v = bound.forward(&mut tape, z, &self.levels, &self.controls)?;
        let loss = weighted_sum(&mut tape, v, &self.weight)?;
        let mut vars = bound.vars;
        vars.push(z);
        Ok((tape, vars, loss))
    }
}

/// One random case of the full denoiser. Checks `coords` randomly chosen
/// coordinates spread over every parameter tensor and the latent input.
pub fn check_denoiser(precision: Precision, seed: u64, coords_per_tensor: usize) -> Result<CheckResult> {
    let case = DenoiserCase::draw(seed)?;
    let leaves = case.leaves();
    let grads: Vec<Vec<f64>> = match precision {
        Precision::F32 => leaf_grads::<f32>(&case, &leaves)?,
        Precision::F64 => leaf_grads::<f64>(&case, &leaves)?,
    };
    let mut pick = RngState::new(seed ^ 0x9e37_79b9);
    let h = precision.step();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (j, t) in leaves.iter().enumerate() {
        let n = t.numel();
        let chosen: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            (0..coords_per_tensor).map(|_| pick.below(n)).collect()
        };
        for i in chosen {
            let eval = |delta: f64| -> Result<f64> {
                let mut l = leaves.clone();
                l[j] = perturbed(t, i, delta);
                let (tape, _, loss) = case.loss::<f64>(&l, false)?;
                Ok(tape.value(loss).data()[0])
            };
            numeric.push((eval(h)? - eval(-h)?) / (2.0 * h));
            analytic.push(grads[j][i]);
        }
    }
    Ok(CheckResult {
        rel_error: relative_error(&analytic, &numeric),
        coordinates: numeric.len(),
    })
}

fn leaf_grads<F: Scalar>(case: &DenoiserCase, leaves: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
    let (mut tape, vars, loss) = case.loss::<F>(leaves, true)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(leaves)
        .map(|(v, t)| match tape.grad(*v) {
            Some(g) => g.data().iter().map(|x| x.to_f64_lossy()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect())
}

/// A random three-layer perceptron; every parameter is checked.
pub fn check_mlp(precision: Precision, seed: u64) -> Result<CheckResult> {
    let mut rng = RngState::new(seed);
    let widths = [4, 6, 5, 3];
    let batch = 3;
    let mut leaves = vec![tensor_f64([batch, widths[0]], &mut rng)];
    for w in widths.windows(2) {
        leaves.push(tensor_f64([w[0], w[1]], &mut rng).scale(0.5));
        leaves.push(tensor_f64([1, w[1]], &mut rng).scale(0.1));
    }
    let weight = tensor_f64([batch, widths[3]], &mut rng);
    fn forward<F: Scalar>(tape: &mut Tape<F>, x: &[Var]) -> Result<Var> {
        let mut h = x[0];
        for l in 0..3 {
            let m = tape.matmul(h, x[1 + 2 * l])?;
            let b = tape.slice_rows(x[2 + 2 * l], 0, 1)?;
            h = tape.add_row(m, b)?;
            if l < 2 {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }
    fn run<F: Scalar>(leaves: &[Tensor<f64>], weight: &Tensor<f64>, grads: bool) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::<F>::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(&t.cast::<F>(), grads)).collect();
        let y = forward(&mut tape, &vars)?;
        let loss = weighted_sum(&mut tape, y, weight)?;
        let value = tape.value(loss).data()[0].to_f64_lossy();
        if !grads {
            return Ok((value, vec![]));
        }
        tape.backward(loss)?;
        let g = vars[1..]
            .iter()
            .zip(&leaves[1..])
            .flat_map(|(v, t)| match tape.grad(*v) {
                Some(g) => g.data().iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>(),
                None => vec![0.0; t.numel()],
            })
            .collect();
        Ok((value, g))
    }
    let analytic = match precision {
        Precision::F32 => run::<f32>(&leaves, &weight, true)?.1,
        Precision::F64 => run::<f64>(&leaves, &weight, true)?.1,
    };
    let h = precision.step();
    let mut numeric = Vec::new();
    for j in 1..leaves.len() {
        for i in 0..leaves[j].numel() {
            let mut plus = leaves.clone();
            plus[j] = perturbed(&leaves[j], i, h);
            let mut minus = leaves.clone();
            minus[j] = perturbed(&leaves[j], i, -h);
            numeric.push((run::<f64>(&plus, &weight, false)?.0 - run::<f64>(&minus, &weight, false)?.0) / (2.0 * h));
        }
    }
    Ok(CheckResult {
        rel_error: relative_error(&analytic, &numeric),
        coordinates: numeric.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_in_both_precisions() {
        for op in OpKind::ALL {
            for p in [Precision::F32, Precision::F64] {
                for seed in 0..20 {
                    let r = check_op(op, p, seed).unwrap();
                    assert!(r.coordinates > 0);
                    assert!(r.rel_error <= p.tolerance(), "{op:?} {p:?} seed {seed}: {}", r.rel_error);
                }
            }
        }
    }

    #[test]
    fn mlp_every_parameter() {
        for seed in 0..20 {
            for p in [Precision::F32, Precision::F64] {
                let r = check_mlp(p, seed).unwrap();
                assert_eq!(r.coordinates, 4 * 6 + 6 + 6 * 5 + 5 + 5 * 3 + 3);
                assert!(r.rel_error <= p.tolerance(), "{p:?} seed {seed}: {}", r.rel_error);
            }
        }
    }

    #[test]
    fn denoiser_sampled_coordinates() {
        for seed in 0..4 {
            for p in [Precision::F32, Precision::F64] {
                let r = check_denoiser(p, seed, 3).unwrap();
                assert!(r.rel_error <= p.tolerance(), "{p:?} seed {seed}: {}", r.rel_error);
            }
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        assert!(relative_error(&[1.0, 2.0], &[1.0, 2.1]) > 1e-3);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
