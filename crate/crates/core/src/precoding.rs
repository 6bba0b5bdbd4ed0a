//! Linear precoding: KLT baseline, empirical optimality loss, its analytic
//! gradient and the gradient-descent trainer.
//!
//! A precoder is a `K x N` matrix `B`; the encoder is `theta = B l` and the
//! decoder is `l_hat = B^T theta`.

use std::cmp::Ordering;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::error::{check_len, Error, Result};
use crate::exec;
use crate::goal::GoalData;
use crate::scheduler::{apply_jacobian, waterfill, Norm, TaskSpec};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecoderMeta {
    pub p: Option<Norm>,
    #[serde(rename = "E")]
    pub energy: Option<f64>,
    pub trained: bool,
}

/// `K x N` linear precoder stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Precoder {
    k: usize,
    n: usize,
    b: Vec<f64>,
    pub meta: PrecoderMeta,
}

impl Precoder {
    pub fn new(k: usize, n: usize, b: Vec<f64>) -> Result<Self> {
        if k == 0 || n == 0 {
            return Err(Error::InvalidParameter("precoder needs k, n >= 1".into()));
        }
        if k > n {
            return Err(Error::InvalidParameter(format!(
                "latent dimension {k} exceeds profile length {n}"
            )));
        }
        check_len(k * n, b.len())?;
        if let Some(j) = b.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(j));
        }
        Ok(Precoder {
            k,
            n,
            b,
            meta: PrecoderMeta::default(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut b = vec![0.0; n * n];
        for i in 0..n {
            b[i * n + i] = 1.0;
        }
        Precoder::new(n, n, b).expect("identity precoder")
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &[f64] {
        &self.b
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.b[a * self.n..(a + 1) * self.n]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.b.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn encode(&self, l: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, l.len())?;
        Ok(self.encode_unchecked(l))
    }

    pub fn decode(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.k, theta.len())?;
        Ok(self.decode_unchecked(theta))
    }

    /// `B^T B l`.
    pub fn reconstruct(&self, l: &[f64]) -> Result<Vec<f64>> {
        self.encode(l).map(|t| self.decode_unchecked(&t))
    }

    pub(crate) fn encode_unchecked(&self, l: &[f64]) -> Vec<f64> {
        self.b
            .chunks_exact(self.n)
            .map(|row| row.iter().zip(l).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub(crate) fn decode_unchecked(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (row, t) in self.b.chunks_exact(self.n).zip(theta) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += r * t;
            }
        }
        out
    }

    /// `B - step * G` with `G` row-major `K x N`.
    pub(crate) fn stepped(&self, grad: &[f64], step: f64) -> Precoder {
        Precoder {
            k: self.k,
            n: self.n,
            b: self.b.iter().zip(grad).map(|(b, g)| b - step * g).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Max deviation of `B B^T` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.k {
            for c in 0..self.k {
                let dot: f64 = self.row(a).iter().zip(self.row(c)).map(|(x, y)| x * y).sum();
                let target = if a == c { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// SHA-256 over the shape and matrix bits, used to tie codebooks to
    /// the precoder they were trained with.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k as u64).to_le_bytes());
        h.update((self.n as u64).to_le_bytes());
        for v in &self.b {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Precoder = serde_json::from_str(s)?;
        let meta = raw.meta.clone();
        let mut p = Precoder::new(raw.k, raw.n, raw.b)?;
        p.meta = meta;
        Ok(p)
    }
}

/// KLT basis: the `k` leading eigenvectors of the uncentered second-moment
/// matrix `(1/T) sum l l^T`, one per row, each with its first nonzero entry
/// positive.
pub fn klt_basis(data: &Dataset, k: usize) -> Result<Precoder> {
    klt_basis_with(data, k, false)
}

/// [`klt_basis`], optionally on the centered covariance instead.
pub fn klt_basis_with(data: &Dataset, k: usize, centered: bool) -> Result<Precoder> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let n = data.dim();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "latent dimension must be in 1..={n}, got {k}"
        )));
    }
    let t = data.len() as f64;
    let mean: Vec<f64> = if centered {
        (0..n)
            .map(|j| data.rows().map(|r| r[j]).sum::<f64>() / t)
            .collect()
    } else {
        vec![0.0; n]
    };
    let mut moment = DMatrix::<f64>::zeros(n, n);
    for row in data.rows() {
        for a in 0..n {
            let va = row[a] - mean[a];
            for c in a..n {
                moment[(a, c)] += va * (row[c] - mean[c]);
            }
        }
    }
    for a in 0..n {
        for c in a..n {
            let v = moment[(a, c)] / t;
            moment[(a, c)] = v;
            moment[(c, a)] = v;
        }
    }

    let eig = SymmetricEigen::new(moment);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(Ordering::Equal)
    });

    let mut b = Vec::with_capacity(k * n);
    for &col in &order[..k] {
        let v = eig.eigenvectors.column(col);
        let scale = v.amax();
        let sign = v
            .iter()
            .find(|x| x.abs() > 1e-12 * scale)
            .map_or(1.0, |x| x.signum());
        b.extend(v.iter().map(|x| sign * x));
    }
    Precoder::new(k, n, b)
}

/// Empirical optimality loss
/// `(1/T) sum_i |u(x*(l_i); l_i) - u(x*(B^T B l_i); l_i)|^2`.
pub fn empirical_loss(precoder: &Precoder, data: &Dataset, spec: &TaskSpec) -> Result<f64> {
    data.check_dim(precoder.n())?;
    let goal = GoalData::new(data, spec)?;
    Ok(CleanObjective::new(&goal).loss(precoder))
}

/// Gradient of the empirical loss with each sample's Jacobian and offset
/// frozen at the reconstruction `B^T B l_i`. Row-major `K x N`; stepping
/// along `-G` decreases the loss.
pub fn gradient(precoder: &Precoder, data: &Dataset, spec: &TaskSpec) -> Result<Vec<f64>> {
    data.check_dim(precoder.n())?;
    if spec.p == Norm::Finite(1) {
        return Err(Error::DegenerateGradient);
    }
    let goal = GoalData::new(data, spec)?;
    Ok(CleanObjective::new(&goal).gradient(precoder))
}

/// Loss and descent direction over precoders.
pub trait PrecoderObjective: Sync {
    fn loss(&self, precoder: &Precoder) -> f64;
    fn gradient(&self, precoder: &Precoder) -> Vec<f64>;
}

/// The noiseless optimality loss of a dataset.
pub struct CleanObjective<'g, 'a> {
    goal: &'g GoalData<'a>,
}

impl<'g, 'a> CleanObjective<'g, 'a> {
    pub fn new(goal: &'g GoalData<'a>) -> Self {
        CleanObjective { goal }
    }
}

impl PrecoderObjective for CleanObjective<'_, '_> {
    fn loss(&self, precoder: &Precoder) -> f64 {
        let g = self.goal;
        exec::sum_range(g.len(), |i| {
            let l = g.data().row(i);
            let recon = precoder.decode_unchecked(&precoder.encode_unchecked(l));
            g.loss_from_reconstruction(i, &recon)
        }) / g.len() as f64
    }

    fn gradient(&self, precoder: &Precoder) -> Vec<f64> {
        let g = self.goal;
        let parts = exec::map_range(g.len(), |i| {
            let theta = precoder.encode_unchecked(g.data().row(i));
            sample_gradient(precoder, g, i, &theta)
        });
        average(parts, precoder.k() * precoder.n(), g.len())
    }
}

pub(crate) fn average(parts: Vec<Vec<f64>>, size: usize, count: usize) -> Vec<f64> {
    let mut total = vec![0.0; size];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    let inv = 1.0 / count as f64;
    total.iter_mut().for_each(|t| *t *= inv);
    total
}

/// Gradient of `|u*_i - u(x*(B^T z); l_i)|^2` with respect to `B`, where the
/// decoder input is `z = B l_i + eta` and `eta` does not depend on `B`.
/// `latent` is `z`.
///
/// With `y = x_hat + l`, `c = 2 (u* - u_hat)` and `w = H g`, where `g` is
/// the gradient of `||y||_p` in `y`, the result is
/// `c (z w^T + (B w) l^T)`. For `p = inf`, `g` selects the first peak slot.
pub(crate) fn sample_gradient(
    precoder: &Precoder,
    goal: &GoalData<'_>,
    i: usize,
    latent: &[f64],
) -> Vec<f64> {
    let (k, n) = (precoder.k(), precoder.n());
    let l = goal.data().row(i);
    let recon = precoder.decode_unchecked(latent);
    let decision = waterfill(&recon, goal.spec().energy);
    let y: Vec<f64> = decision.x.iter().zip(l).map(|(x, v)| x + v).collect();
    let c = 2.0 * (goal.perfect(i) - goal.achieved(i, &decision.x));

    let mut out = vec![0.0; k * n];
    if c == 0.0 {
        return out;
    }
    let g = norm_gradient(&y, goal.spec().p);
    let w = apply_jacobian(&decision.active, decision.active_count, &g);
    let bw = precoder.encode_unchecked(&w);
    for a in 0..k {
        let row = &mut out[a * n..(a + 1) * n];
        for j in 0..n {
            row[j] = c * (latent[a] * w[j] + bw[a] * l[j]);
        }
    }
    out
}

/// Gradient of `||y||_p` in `y`: `sign(y) (|y| / ||y||)^(p-1)`, or the
/// indicator of the first maximal entry for `p = inf`.
fn norm_gradient(y: &[f64], p: Norm) -> Vec<f64> {
    let mut g = vec![0.0; y.len()];
    match p {
        Norm::Infinity => {
            let mut best = 0;
            for (j, v) in y.iter().enumerate() {
                if *v > y[best] {
                    best = j;
                }
            }
            g[best] = 1.0;
        }
        Norm::Finite(p) => {
            let norm = p_norm(y, p);
            if norm > 0.0 {
                for (gj, v) in g.iter_mut().zip(y) {
                    *gj = v.signum() * (v.abs() / norm).powi(p as i32 - 1);
                }
            }
        }
    }
    g
}

fn p_norm(y: &[f64], p: u32) -> f64 {
    Norm::Finite(p).norm(y)
}

/// Why a descent loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Converged,
    ZeroLoss,
    ZeroGradient,
    /// No step along `-G` decreased the loss; the best iterate is returned.
    LineSearchExhausted,
}

/// Outcome of [`fit_linear_precoder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub precoder: Precoder,
    /// Accepted losses; `trace[0]` is the starting (KLT) loss.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
}

/// Gradient descent with backtracking line search, started from the KLT
/// basis. Only strict decreases are accepted, so the trace is
/// non-increasing.
pub fn fit_linear_precoder(
    data: &Dataset,
    spec: &TaskSpec,
    k: usize,
    cfg: &TrainConfig,
) -> Result<LinearFit> {
    if spec.p == Norm::Finite(1) {
        return Err(Error::DegenerateGradient);
    }
    let goal = GoalData::new(data, spec)?;
    let start = klt_basis_with(data, k, cfg.centered_klt)?;
    let mut fit = descend(&CleanObjective::new(&goal), start, cfg);
    fit.precoder.meta = PrecoderMeta {
        p: Some(spec.p),
        energy: Some(spec.energy),
        trained: true,
    };
    Ok(fit)
}

/// Runs the descent loop on any objective from `start`.
pub fn descend<O: PrecoderObjective + ?Sized>(
    objective: &O,
    start: Precoder,
    cfg: &TrainConfig,
) -> LinearFit {
    let mut current = start;
    let mut loss = objective.loss(&current);
    let mut trace = vec![loss];
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;

    while iterations < cfg.it_max {
        if loss == 0.0 {
            stop = StopReason::ZeroLoss;
            break;
        }
        let grad = objective.gradient(&current);
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm == 0.0 || !gnorm.is_finite() {
            stop = StopReason::ZeroGradient;
            break;
        }
        let mut step = cfg.initial_step.unwrap_or(1.0 / (gnorm + f64::EPSILON));
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let candidate = current.stepped(&grad, step);
            let cand_loss = objective.loss(&candidate);
            if cand_loss < loss {
                accepted = Some((candidate, cand_loss));
                break;
            }
            step *= cfg.backtrack_factor;
        }
        let Some((candidate, cand_loss)) = accepted else {
            stop = StopReason::LineSearchExhausted;
            break;
        };
        let improvement = (loss - cand_loss) / loss;
        current = candidate;
        loss = cand_loss;
        trace.push(loss);
        iterations += 1;
        if improvement < cfg.rel_tol {
            stop = StopReason::Converged;
            break;
        }
    }

    LinearFit {
        precoder: current,
        trace,
        iterations,
        stop,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec(p: Norm) -> TaskSpec {
        TaskSpec::new(p, 2.0).unwrap()
    }

    #[test]
    fn klt_of_identical_vectors() {
        let v = [3.0, 0.0, 4.0];
        let data = Dataset::from_rows(&[v, v, v]).unwrap();
        let p = klt_basis(&data, 1).unwrap();
        assert_abs_diff_eq!(p.row(0)[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(p.row(0)[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.row(0)[2], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn klt_axis_aligned() {
        let data = Dataset::from_rows(&[[2.0, 0.0], [0.0, 1.0], [2.0, 0.0], [0.0, 1.0]]).unwrap();
        let p = klt_basis(&data, 1).unwrap();
        assert_abs_diff_eq!(p.row(0)[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.row(0)[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn klt_errors() {
        let data = Dataset::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(klt_basis(&data, 3).is_err());
        assert!(klt_basis(&data, 0).is_err());
    }

    #[test]
    fn encode_decode_identity_and_projection() {
        let l = [1.0, -2.0, 0.5];
        let id = Precoder::identity(3);
        assert_eq!(id.reconstruct(&l).unwrap(), l.to_vec());

        let u = [0.6, 0.0, 0.8];
        let p = Precoder::new(1, 3, u.to_vec()).unwrap();
        let dot = 0.6 * 1.0 + 0.8 * 0.5;
        let r = p.reconstruct(&l).unwrap();
        for (a, b) in r.iter().zip(u) {
            assert_abs_diff_eq!(*a, dot * b, epsilon = 1e-15);
        }
        assert!(p.encode(&[1.0]).is_err());
        assert!(p.decode(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_zero_for_identity_and_row_space() {
        let data = Dataset::from_rows(&[[1.0, 2.0, 4.0], [0.5, 3.0, 1.0]]).unwrap();
        let s = spec(Norm::Infinity);
        assert_eq!(empirical_loss(&Precoder::identity(3), &data, &s).unwrap(), 0.0);

        let inv = 1.0 / 3f64.sqrt();
        let p = Precoder::new(1, 3, vec![inv, inv, inv]).unwrap();
        let flat = Dataset::from_rows(&[[2.0, 2.0, 2.0], [0.5, 0.5, 0.5]]).unwrap();
        assert_abs_diff_eq!(empirical_loss(&p, &flat, &s).unwrap(), 0.0, epsilon = 1e-24);
    }

    #[test]
    fn loss_matches_hand_composition() {
        use crate::scheduler::{solve_waterfill, utility};
        let rows = [[1.0, 2.0, 4.0], [3.0, 0.5, 1.0]];
        let data = Dataset::from_rows(&rows).unwrap();
        let p = Precoder::new(1, 3, vec![0.6, 0.0, 0.8]).unwrap();
        for norm in [Norm::Finite(2), Norm::Finite(3), Norm::Infinity] {
            let s = spec(norm);
            let mut expected = 0.0;
            for l in &rows {
                let u_star = utility(&solve_waterfill(l, &s).unwrap().x, l, &s).unwrap();
                let recon = p.reconstruct(l).unwrap();
                let u_hat = utility(&solve_waterfill(&recon, &s).unwrap().x, l, &s).unwrap();
                expected += (u_star - u_hat).powi(2);
            }
            expected /= 2.0;
            assert!(expected > 0.0);
            assert_abs_diff_eq!(empirical_loss(&p, &data, &s).unwrap(), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_zero_at_perfect_reconstruction() {
        let data = Dataset::from_rows(&[[1.0, 2.0, 4.0], [0.5, 3.0, 1.0]]).unwrap();
        for norm in [Norm::Finite(2), Norm::Infinity] {
            let g = gradient(&Precoder::identity(3), &data, &spec(norm)).unwrap();
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn gradient_rejects_p1() {
        let data = Dataset::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(
            gradient(&Precoder::identity(2), &data, &spec(Norm::Finite(1))),
            Err(Error::DegenerateGradient)
        ));
    }

    #[test]
    fn fit_on_subspace_data_keeps_klt() {
        let data = Dataset::from_rows(&[[1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [0.3, 0.3, 0.3]]).unwrap();
        let s = spec(Norm::Infinity);
        let fit = fit_linear_precoder(&data, &s, 1, &TrainConfig::default()).unwrap();
        assert_eq!(fit.iterations, 0);
        assert!(fit.trace[0] < 1e-20);
        assert_eq!(fit.precoder.matrix(), klt_basis(&data, 1).unwrap().matrix());
    }

    #[test]
    fn precoder_json_schema() {
        let mut p = Precoder::new(1, 2, vec![0.6, 0.8]).unwrap();
        p.meta = PrecoderMeta {
            p: Some(Norm::Infinity),
            energy: Some(50.0),
            trained: true,
        };
        let v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(v["k"], 1);
        assert_eq!(v["n"], 2);
        assert_eq!(v["b"][1], 0.8);
        assert_eq!(v["meta"]["p"], "inf");
        assert_eq!(v["meta"]["E"], 50.0);
        assert_eq!(v["meta"]["trained"], true);
        assert_eq!(Precoder::from_json(&p.to_json().unwrap()).unwrap(), p);
        assert!(Precoder::from_json(r#"{"k":2,"n":2,"b":[1.0],"meta":{"p":null,"E":null,"trained":false}}"#).is_err());
    }
}
