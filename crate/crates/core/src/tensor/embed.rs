use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal frequency embedding, `[x.len(), dim]`.
///
/// Channel pairs are interleaved `(sin ω_j x, cos ω_j x)` with geometric
/// frequencies `ω_j = max_period^(-j / (dim/2))`, so `ω_0 = 1`.
pub fn sinusoidal_embedding_with_period(x: &[f32], dim: usize, max_period: f64) -> Result<Tensor> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::contract(format!("embedding dim must be even and >= 2, got {dim}")));
    }
    if x.is_empty() {
        return Err(Error::contract("embedding of an empty input"));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| (-(max_period.ln()) * j as f64 / half as f64).exp())
        .collect();
    let mut out = Vec::with_capacity(x.len() * dim);
    for &v in x {
        for &w in &freqs {
            let a = w * v as f64;
            out.push(a.sin() as f32);
            out.push(a.cos() as f32);
        }
    }
    Tensor::new(vec![x.len(), dim], out)
}

pub fn sinusoidal_embedding(x: &[f32], dim: usize) -> Result<Tensor> {
    sinusoidal_embedding_with_period(x, dim, DEFAULT_MAX_PERIOD)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_unit_cosines() {
        let e = sinusoidal_embedding(&[0.0], 8).unwrap();
        for pair in e.data().chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn odd_or_tiny_dim_is_rejected() {
        assert!(sinusoidal_embedding(&[1.0], 7).is_err());
        assert!(sinusoidal_embedding(&[1.0], 0).is_err());
    }

    #[test]
    fn negation_flips_sines_keeps_cosines() {
        let xs = [0.3f32, 1.7, -4.2, 12.0];
        let neg: Vec<f32> = xs.iter().map(|v| -v).collect();
        let a = sinusoidal_embedding(&xs, 16).unwrap();
        let b = sinusoidal_embedding(&neg, 16).unwrap();
        for (pa, pb) in a.data().chunks(2).zip(b.data().chunks(2)) {
            assert_eq!(pa[0], -pb[0]);
            assert_eq!(pa[1], pb[1]);
        }
    }

    #[test]
    fn injective_on_a_bounded_grid() {
        let grid: Vec<f32> = (0..1000).map(|i| -10.0 + 20.0 * i as f32 / 1000.0).collect();
        let e = sinusoidal_embedding(&grid, 16).unwrap();
        let mut min_gap = f32::INFINITY;
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                let d: f32 = e.row(i).iter().zip(e.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                min_gap = min_gap.min(d);
            }
        }
        assert!(min_gap > 0.0, "two grid points share an embedding");
    }
}
