//! Drift metrics: dynamic time warping, mean yaw error, and a Fréchet
//! distance between Gaussian fits of latent frames.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;
use crate::worldsim::{recover_pose, wrap_angle, Clip, EgoState, Scene, WorldConfig};

/// Optimal cumulative Euclidean cost over monotone alignments of `a` and `b`.
pub fn dtw(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    ensure!(!a.is_empty() && !b.is_empty(), "dtw of an empty sequence");
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for p in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let q = b[j - 1];
            let cost = (p[0] - q[0]).hypot(p[1] - q[1]);
            cur[j] = cost + prev[j - 1].min(prev[j]).min(cur[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Mean absolute wrapped yaw difference, in degrees.
pub fn are(yaw_pred: &[f64], yaw_gt: &[f64]) -> Result<f64> {
    ensure!(
        yaw_pred.len() == yaw_gt.len(),
        "yaw sequences of length {} and {}",
        yaw_pred.len(),
        yaw_gt.len()
    );
    ensure!(!yaw_pred.is_empty(), "are of empty sequences");
    let total: f64 = yaw_pred.iter().zip(yaw_gt).map(|(p, g)| wrap_angle(p - g).abs()).sum();
    Ok((total / yaw_pred.len() as f64).to_degrees())
}

/// Mean and covariance of a set of latent frames.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

const PSD_TOL: f64 = 1e-8;

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        ensure!(cov.nrows() == d && cov.ncols() == d, "covariance is not {d}x{d}");
        ensure!((&cov - cov.transpose()).amax() <= PSD_TOL, "covariance is not symmetric");
        Ok(Self { mean, cov })
    }

    /// Fits rows of `frames` with 64-bit accumulation and the unbiased estimator.
    pub fn fit(frames: &[&[f32]]) -> Result<Self> {
        ensure!(frames.len() >= 2, "need at least 2 frames to fit a covariance, got {}", frames.len());
        let d = frames[0].len();
        ensure!(frames.iter().all(|f| f.len() == d), "frames of unequal width");
        let n = frames.len() as f64;
        let mut mean = DVector::<f64>::zeros(d);
        for f in frames {
            for (j, &v) in f.iter().enumerate() {
                mean[j] += v as f64;
            }
        }
        mean /= n;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for f in frames {
            let c: Vec<f64> = f.iter().enumerate().map(|(j, &v)| v as f64 - mean[j]).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        cov /= n - 1.0;
        Ok(Self { mean, cov })
    }

    pub fn fit_tensor(frames: &Tensor) -> Result<Self> {
        let rows: Vec<&[f32]> = (0..frames.rows()).map(|i| frames.row(i)).collect();
        Self::fit(&rows)
    }
}

/// Eigen-decomposition of a symmetric PSD matrix, rejecting clearly
/// negative spectra and clipping round-off negatives to zero.
fn psd_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure!(min >= -PSD_TOL * scale, "matrix is not positive semi-definite (eigenvalue {min})");
    eig.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m)?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

/// `‖μ1 - μ2‖² + tr(Σ1 + Σ2 - 2 (Σ1^½ Σ2 Σ1^½)^½)`.
pub fn latent_frechet(g1: &GaussianSummary, g2: &GaussianSummary) -> Result<f64> {
    ensure!(g1.mean.len() == g2.mean.len(), "summaries of different dimension");
    if g1 == g2 {
        return Ok(0.0);
    }
    let s1 = psd_sqrt(&g1.cov)?;
    psd_eigen(&g2.cov)?;
    let inner = &s1 * &g2.cov * &s1;
    let cross: f64 = psd_eigen(&inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let mean_term = (&g1.mean - &g2.mean).norm_squared();
    let d = mean_term + g1.cov.trace() + g2.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Which frames enter the per-chunk Gaussian fits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FrechetWindow {
    /// All frames up to and including chunk `n`.
    #[default]
    Cumulative,
    /// Only the frames of chunk `n`.
    ChunkOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftRow {
    pub chunk: usize,
    pub lfd: f64,
    pub are_deg: f64,
    pub dtw: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DriftReport {
    pub rows: Vec<DriftRow>,
    /// Generated frames whose pose could not be recovered.
    pub skipped_frames: usize,
}

impl DriftReport {
    pub fn final_lfd(&self) -> Option<f64> {
        self.rows.last().map(|r| r.lfd)
    }

    /// Least-squares slope of latent Fréchet distance per chunk.
    pub fn lfd_slope(&self) -> f64 {
        let n = self.rows.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mx = self.rows.iter().map(|r| r.chunk as f64).sum::<f64>() / n;
        let my = self.rows.iter().map(|r| r.lfd).sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for r in &self.rows {
            let dx = r.chunk as f64 - mx;
            sxy += dx * (r.lfd - my);
            sxx += dx * dx;
        }
        sxy / sxx
    }
}

/// A generated continuation of a clip, paired with its ground truth.
#[derive(Clone, Copy, Debug)]
pub struct EvalPair<'a> {
    /// Generated frames `T + 1 ..= T + N·K`.
    pub generated: &'a Tensor,
    pub clip: &'a Clip,
    pub scene: &'a Scene,
}

/// Per-chunk drift of one generated continuation.
pub fn drift_report(world: &WorldConfig, pair: EvalPair<'_>, history: usize, chunk: usize, window: FrechetWindow) -> Result<DriftReport> {
    pooled_drift_report(world, &[pair], history, chunk, window)
}

/// Per-chunk drift pooled over several clips: Gaussians are fitted to the
/// union of frames, ARE and DTW are averaged over clips.
pub fn pooled_drift_report(world: &WorldConfig, pairs: &[EvalPair<'_>], history: usize, chunk: usize, window: FrechetWindow) -> Result<DriftReport> {
    ensure!(!pairs.is_empty(), "no trajectories to evaluate");
    ensure!(chunk > 0, "chunk must be positive");
    let frames = pairs[0].generated.rows();
    ensure!(frames % chunk == 0 && frames > 0, "{frames} generated frames do not split into chunks of {chunk}");
    for p in pairs {
        ensure!(p.generated.rows() == frames, "generated trajectories differ in length");
        ensure!(
            p.clip.frames() >= history + frames,
            "clip of {} frames cannot cover {} generated frames",
            p.clip.frames(),
            frames
        );
    }

    // decode every generated frame once; the reference poses are decoded from
    // the ground-truth latents through the same registration
    let mut skipped = 0;
    let reference: Vec<Vec<Option<EgoState>>> = pairs
        .iter()
        .map(|p| {
            (0..frames)
                .map(|i| recover_pose(world, p.clip.latents.row(history + i), p.scene, &p.clip.anchor_ids).ok())
                .collect()
        })
        .collect();
    let decoded: Vec<Vec<Option<EgoState>>> = pairs
        .iter()
        .map(|p| {
            (0..frames)
                .map(|i| recover_pose(world, p.generated.row(i), p.scene, &p.clip.anchor_ids).ok())
                .collect()
        })
        .collect();
    for d in &decoded {
        skipped += d.iter().filter(|p| p.is_none()).count();
    }

    let mut rows = Vec::new();
    for n in 1..=frames / chunk {
        let (lo, hi) = match window {
            FrechetWindow::Cumulative => (0, n * chunk),
            FrechetWindow::ChunkOnly => ((n - 1) * chunk, n * chunk),
        };
        let mut gen_rows: Vec<&[f32]> = Vec::new();
        let mut gt_rows: Vec<&[f32]> = Vec::new();
        for p in pairs {
            for i in lo..hi {
                gen_rows.push(p.generated.row(i));
                gt_rows.push(p.clip.latents.row(history + i));
            }
        }
        let lfd = latent_frechet(&GaussianSummary::fit(&gen_rows)?, &GaussianSummary::fit(&gt_rows)?)?;

        let (mut are_sum, mut dtw_sum, mut counted) = (0.0, 0.0, 0);
        for (dec, refs) in decoded.iter().zip(&reference) {
            let mut pred_xy = Vec::new();
            let mut gt_xy = Vec::new();
            let mut pred_yaw = Vec::new();
            let mut gt_yaw = Vec::new();
            for (est, truth) in dec.iter().zip(refs).take(n * chunk) {
                if let (Some(e), Some(g)) = (est, truth) {
                    pred_xy.push([e.x, e.y]);
                    gt_xy.push([g.x, g.y]);
                    pred_yaw.push(e.yaw);
                    gt_yaw.push(g.yaw);
                }
            }
            if !pred_xy.is_empty() {
                are_sum += are(&pred_yaw, &gt_yaw)?;
                dtw_sum += dtw(&pred_xy, &gt_xy)?;
                counted += 1;
            }
        }
        let denom = counted.max(1) as f64;
        rows.push(DriftRow {
            chunk: n,
            lfd,
            are_deg: are_sum / denom,
            dtw: dtw_sum / denom,
        });
    }
    Ok(DriftReport {
        rows,
        skipped_frames: skipped,
    })
}
