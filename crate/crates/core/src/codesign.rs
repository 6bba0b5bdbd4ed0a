//! Iterative co-design of the precoder and the goal-oriented quantizer.
//!
//! Quantization is modeled as additive Gaussian noise on the latent,
//! `q(theta) = theta + eta`. Each outer iteration retrains the precoder on
//! noisy reconstructions `B^T (B l + eta)`, retrains the codebook, and
//! refreshes the noise statistics.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::error::{check_len, Error, Result};
use crate::exec;
use crate::goal::GoalData;
use crate::precoding::{
    average, descend, fit_linear_precoder, sample_gradient,
    Precoder, PrecoderMeta, PrecoderObjective,
};
use crate::quantization::{fit_goq, goal_loss_with, quantize, Codebook, CodebookFile};
use crate::scheduler::{Norm, TaskSpec};

/// Empirical mean and covariance of latent quantization errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    #[serde(rename = "mu")]
    pub mean: Vec<f64>,
    #[serde(rename = "sigma")]
    pub cov: Vec<Vec<f64>>,
}

impl NoiseModel {
    pub fn zero(k: usize) -> Self {
        NoiseModel {
            mean: vec![0.0; k],
            cov: vec![vec![0.0; k]; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_zero(&self) -> bool {
        self.mean.iter().all(|v| *v == 0.0) && self.cov.iter().flatten().all(|v| *v == 0.0)
    }

    /// Symmetric square root of the covariance. Rank-deficient matrices get
    /// `1e-10 * trace / K` added to the diagonal first.
    fn factor(&self) -> Vec<Vec<f64>> {
        let k = self.dim();
        let trace: f64 = (0..k).map(|a| self.cov[a][a]).sum();
        if trace <= 0.0 {
            return vec![vec![0.0; k]; k];
        }
        let mut m = DMatrix::from_fn(k, k, |a, c| self.cov[a][c]);
        let eig = SymmetricEigen::new(m.clone());
        let scale = eig.eigenvalues.amax();
        if eig.eigenvalues.iter().any(|&l| l <= 1e-12 * scale) {
            let jitter = 1e-10 * trace / k as f64;
            for a in 0..k {
                m[(a, a)] += jitter;
            }
        }
        let eig = SymmetricEigen::new(m);
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let v = &eig.eigenvectors;
        (0..k)
            .map(|a| {
                (0..k)
                    .map(|c| (0..k).map(|d| v[(a, d)] * roots[d] * v[(c, d)]).sum())
                    .collect()
            })
            .collect()
    }

    fn draw(&self, factor: &[Vec<f64>], rng: &mut impl Rng) -> Vec<f64> {
        let k = self.dim();
        let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        (0..k)
            .map(|a| self.mean[a] + factor[a].iter().zip(&z).map(|(f, z)| f * z).sum::<f64>())
            .collect()
    }
}

/// Latent quantization noise `eta_i = q(B l_i) - B l_i` over a dataset,
/// with `1/T` normalization. The covariance is symmetrized and its negative
/// eigenvalues clipped to zero.
pub fn estimate_noise(
    cb: &Codebook,
    precoder: &Precoder,
    data: &Dataset,
    spec: &TaskSpec,
) -> Result<NoiseModel> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    data.check_dim(precoder.n())?;
    let errors = exec::map_range(data.len(), |i| -> Result<Vec<f64>> {
        let l = data.row(i);
        let (_, rep) = quantize(cb, l, precoder, spec)?;
        let theta = precoder.encode_unchecked(l);
        Ok(rep.iter().zip(&theta).map(|(r, t)| r - t).collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(noise_from_errors(&errors, precoder.k()))
}

pub(crate) fn noise_from_errors(errors: &[Vec<f64>], k: usize) -> NoiseModel {
    let t = errors.len() as f64;
    let mut mean = vec![0.0; k];
    for e in errors {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t);

    let mut cov = vec![vec![0.0; k]; k];
    for e in errors {
        for a in 0..k {
            for c in a..k {
                cov[a][c] += (e[a] - mean[a]) * (e[c] - mean[c]);
            }
        }
    }
    for a in 0..k {
        for c in a..k {
            let v = cov[a][c] / t;
            cov[a][c] = v;
            cov[c][a] = v;
        }
    }

    let m = DMatrix::from_fn(k, k, |a, c| cov[a][c]);
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.iter().any(|&l| l < 0.0) {
        let clipped = eig.eigenvalues.map(|l| l.max(0.0));
        let v = &eig.eigenvectors;
        for a in 0..k {
            for c in 0..k {
                cov[a][c] = (0..k).map(|d| v[(a, d)] * clipped[d] * v[(c, d)]).sum();
            }
        }
        for a in 0..k {
            for c in a + 1..k {
                let s = 0.5 * (cov[a][c] + cov[c][a]);
                cov[a][c] = s;
                cov[c][a] = s;
            }
        }
    }
    NoiseModel { mean, cov }
}

/// `kappa` draws of `B^T B l + B^T eta` with `eta ~ N(mu, Sigma)`.
pub fn sample_noisy_reconstructions(
    precoder: &Precoder,
    noise: &NoiseModel,
    l: &[f64],
    kappa: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    check_len(precoder.n(), l.len())?;
    check_len(precoder.k(), noise.dim())?;
    if kappa == 0 {
        return Err(Error::InvalidParameter("kappa must be >= 1".into()));
    }
    let factor = noise.factor();
    let theta = precoder.encode_unchecked(l);
    Ok((0..kappa)
        .map(|_| {
            let eta = noise.draw(&factor, rng);
            let z: Vec<f64> = theta.iter().zip(&eta).map(|(t, e)| t + e).collect();
            precoder.decode_unchecked(&z)
        })
        .collect())
}

/// Optimality loss averaged over fixed latent noise draws: sample `i`'s
/// scheduler sees `B^T (B l_i + eta_ik)` for `k = 1..kappa`.
pub struct NoisyObjective<'g, 'a> {
    goal: &'g GoalData<'a>,
    noise: Vec<Vec<Vec<f64>>>,
}

impl<'g, 'a> NoisyObjective<'g, 'a> {
    /// Draws `kappa` noise vectors per sample; sample `i` uses stream
    /// `(stream << 32) | i` of the seeded generator.
    pub fn sample(goal: &'g GoalData<'a>, noise: &NoiseModel, kappa: usize, seed: u64, stream: u64) -> Self {
        let factor = noise.factor();
        let draws = exec::map_range(goal.len(), |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((stream << 32) | i as u64);
            (0..kappa).map(|_| noise.draw(&factor, &mut rng)).collect()
        });
        NoisyObjective { goal, noise: draws }
    }

    fn latent(precoder: &Precoder, l: &[f64], eta: &[f64]) -> Vec<f64> {
        precoder
            .encode_unchecked(l)
            .iter()
            .zip(eta)
            .map(|(t, e)| t + e)
            .collect()
    }
}

impl PrecoderObjective for NoisyObjective<'_, '_> {
    fn loss(&self, precoder: &Precoder) -> f64 {
        let g = self.goal;
        exec::sum_range(g.len(), |i| {
            let l = g.data().row(i);
            let draws = &self.noise[i];
            draws
                .iter()
                .map(|eta| {
                    let recon = precoder.decode_unchecked(&Self::latent(precoder, l, eta));
                    g.loss_from_reconstruction(i, &recon)
                })
                .sum::<f64>()
                / draws.len() as f64
        }) / g.len() as f64
    }

    fn gradient(&self, precoder: &Precoder) -> Vec<f64> {
        let g = self.goal;
        let size = precoder.k() * precoder.n();
        let parts = exec::map_range(g.len(), |i| {
            let l = g.data().row(i);
            let per_draw = self.noise[i]
                .iter()
                .map(|eta| sample_gradient(precoder, g, i, &Self::latent(precoder, l, eta)))
                .collect();
            average(per_draw, size, self.noise[i].len())
        });
        average(parts, size, g.len())
    }
}

/// Output of [`fit_iterative`]. `precoder`/`codebook` are the minimum-loss
/// iterate; iteration 0 is the single-pass design.
#[derive(Debug, Clone, PartialEq)]
pub struct CodesignState {
    pub precoder: Precoder,
    pub codebook: Codebook,
    /// Noise statistics of the returned pair.
    pub noise: NoiseModel,
    /// Goal loss of the quantizer at each outer iteration.
    pub loss_trace: Vec<f64>,
    pub best_iteration: usize,
}

impl CodesignState {
    pub fn best_loss(&self) -> f64 {
        self.loss_trace[self.best_iteration]
    }

    pub fn single_pass_loss(&self) -> f64 {
        self.loss_trace[0]
    }

    pub fn to_bundle(&self) -> CodesignBundle {
        CodesignBundle {
            precoder: self.precoder.clone(),
            codebook: self.codebook.to_file(),
            noise: self.noise.clone(),
            loss_trace: self.loss_trace.clone(),
            best_iteration: self.best_iteration,
        }
    }
}

/// JSON form of a [`CodesignState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodesignBundle {
    pub precoder: Precoder,
    pub codebook: CodebookFile,
    #[serde(flatten)]
    pub noise: NoiseModel,
    pub loss_trace: Vec<f64>,
    pub best_iteration: usize,
}

/// Alternates noise-aware precoder training and quantizer training, keeping
/// the best (precoder, codebook) pair seen.
///
/// Iteration 0 is the single-pass design. Each later precoder fit starts
/// from the previous iterate. Exactly zero measured noise makes the noisy
/// objective equal to the clean one, so the loop records a fixed point and
/// stops.
pub fn fit_iterative(
    data: &Dataset,
    spec: &TaskSpec,
    k: usize,
    bits: u32,
    cfg: &TrainConfig,
) -> Result<CodesignState> {
    if spec.p == Norm::Finite(1) {
        return Err(Error::DegenerateGradient);
    }
    if cfg.kappa == 0 {
        return Err(Error::InvalidParameter("kappa must be >= 1".into()));
    }
    let goal = GoalData::new(data, spec)?;
    let meta = PrecoderMeta {
        p: Some(spec.p),
        energy: Some(spec.energy),
        trained: true,
    };

    let precoder = fit_linear_precoder(data, spec, k, cfg)?.precoder;
    let codebook = fit_goq(data, &precoder, spec, bits, cfg)?.codebook;
    let mut noise = estimate_noise(&codebook, &precoder, data, spec)?;
    let mut loss = goal_loss_with(&codebook, &goal, &precoder);
    let mut trace = vec![loss];
    let mut best = (precoder, codebook, noise.clone());
    let mut best_iteration = 0;

    let mut current = best.0.clone();
    for j in 1..=cfg.outer_j_max {
        if noise.is_zero() {
            // the noisy objective is the clean one the current precoder
            // was trained on, so the next iterate would be identical
            trace.push(loss);
            break;
        }
        let objective = NoisyObjective::sample(&goal, &noise, cfg.kappa, cfg.seed, j as u64);
        let fit = descend(&objective, current.clone(), cfg);
        let mut precoder = fit.precoder;
        precoder.meta = meta.clone();
        let codebook = fit_goq(data, &precoder, spec, bits, cfg)?.codebook;
        current = precoder.clone();
        noise = estimate_noise(&codebook, &precoder, data, spec)?;
        let next = goal_loss_with(&codebook, &goal, &precoder);
        trace.push(next);
        if next < trace[best_iteration] {
            best_iteration = j;
            best = (precoder, codebook, noise.clone());
        }
        let improved = next < loss * (1.0 - cfg.rel_tol);
        loss = next;
        if !improved {
            break;
        }
    }

    let (precoder, codebook, noise) = best;
    Ok(CodesignState {
        precoder,
        codebook,
        noise,
        loss_trace: trace,
        best_iteration,
    })
}
