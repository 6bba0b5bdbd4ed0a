//! Vector quantizers on the precoder's latent space.
//!
//! The goal-oriented quantizer assigns a profile `l` to the representative
//! `r_m` minimizing `E(r_m; l) = |u(x*(l); l) - u(x*(h(r_m)); l)|^2` and
//! moves each representative to the best point of a candidate set for its
//! cell. LBG (Lloyd) and a product of uniform scalar quantizers are the
//! distortion-oriented baselines.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{GoqInit, TrainConfig};
use crate::dataset::Dataset;
use crate::error::{check_len, Error, Result};
use crate::exec;
use crate::goal::GoalData;
use crate::precoding::{Precoder, StopReason};
use crate::scheduler::{utility_unchecked, waterfill, TaskSpec};

/// Largest bit budget accepted for explicit codebooks.
pub const MAX_BITS: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerMode {
    GoalOriented,
    Lbg,
    UniformScalar,
}

/// One coordinate of a uniform scalar quantizer: `2^bits` midrise cells
/// over `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisGrid {
    pub min: f64,
    pub max: f64,
    pub bits: u32,
}

impl AxisGrid {
    pub fn levels(&self) -> usize {
        1usize << self.bits
    }

    /// Cell index of `v`; out-of-range inputs clamp to the edge cells.
    pub fn index(&self, v: f64) -> usize {
        let levels = self.levels();
        let width = self.max - self.min;
        if self.bits == 0 || width <= 0.0 {
            return 0;
        }
        let pos = ((v - self.min) / width * levels as f64).floor();
        if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(levels - 1)
        }
    }

    pub fn center(&self, idx: usize) -> f64 {
        if self.bits == 0 {
            return 0.5 * (self.min + self.max);
        }
        let step = (self.max - self.min) / self.levels() as f64;
        self.min + (idx as f64 + 0.5) * step
    }
}

/// Serialized form of a [`Codebook`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookFile {
    pub mode: QuantizerMode,
    pub bits: u32,
    pub k: usize,
    pub reps: Vec<Vec<f64>>,
    pub precoder_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<AxisGrid>>,
}

/// Trained representatives plus per-representative caches: the decoded
/// profile `h(r_m)` and the decision `x*(h(r_m))`, neither of which depends
/// on the query.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    mode: QuantizerMode,
    bits: u32,
    k: usize,
    reps: Vec<Vec<f64>>,
    grid: Option<Vec<AxisGrid>>,
    precoder_ref: String,
    energy: f64,
    decoded: Vec<Vec<f64>>,
    decisions: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(
        mode: QuantizerMode,
        bits: u32,
        reps: Vec<Vec<f64>>,
        precoder: &Precoder,
        spec: &TaskSpec,
    ) -> Result<Self> {
        Self::build(mode, bits, reps, None, precoder, spec.energy)
    }

    fn build(
        mode: QuantizerMode,
        bits: u32,
        reps: Vec<Vec<f64>>,
        grid: Option<Vec<AxisGrid>>,
        precoder: &Precoder,
        energy: f64,
    ) -> Result<Self> {
        if reps.is_empty() {
            return Err(Error::Empty("codebook"));
        }
        if bits < usize::BITS && reps.len() > (1usize << bits) {
            return Err(Error::InvalidParameter(format!(
                "{} representatives exceed the {bits}-bit budget",
                reps.len()
            )));
        }
        for r in &reps {
            check_len(precoder.k(), r.len())?;
        }
        let decoded: Vec<Vec<f64>> = reps.iter().map(|r| precoder.decode_unchecked(r)).collect();
        let decisions = exec::map_slice(&decoded, |d| waterfill(d, energy).x);
        Ok(Codebook {
            mode,
            bits,
            k: precoder.k(),
            reps,
            grid,
            precoder_ref: precoder.fingerprint(),
            energy,
            decoded,
            decisions,
        })
    }

    pub fn mode(&self) -> QuantizerMode {
        self.mode
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    pub fn reps(&self) -> &[Vec<f64>] {
        &self.reps
    }

    pub fn decoded_reps(&self) -> &[Vec<f64>] {
        &self.decoded
    }

    pub fn grid(&self) -> Option<&[AxisGrid]> {
        self.grid.as_deref()
    }

    pub fn precoder_ref(&self) -> &str {
        &self.precoder_ref
    }

    pub fn to_file(&self) -> CodebookFile {
        CodebookFile {
            mode: self.mode,
            bits: self.bits,
            k: self.k,
            reps: self.reps.clone(),
            precoder_ref: self.precoder_ref.clone(),
            grid: self.grid.clone(),
        }
    }

    /// Rebuilds a codebook from its file form; the precoder must be the one
    /// it was trained with.
    pub fn from_file(file: CodebookFile, precoder: &Precoder, spec: &TaskSpec) -> Result<Self> {
        if file.precoder_ref != precoder.fingerprint() {
            return Err(Error::ModelMismatch(
                "codebook was trained with a different precoder".into(),
            ));
        }
        check_len(precoder.k(), file.k)?;
        Self::build(file.mode, file.bits, file.reps, file.grid, precoder, spec.energy)
    }

    fn check_compatible(&self, precoder: &Precoder, spec: &TaskSpec) -> Result<()> {
        check_len(self.k, precoder.k())?;
        if self.energy != spec.energy {
            return Err(Error::ModelMismatch(format!(
                "codebook cached decisions for E = {}, task uses E = {}",
                self.energy, spec.energy
            )));
        }
        Ok(())
    }

    /// Goal losses of sample `i` against every representative.
    fn goal_losses<'s, 'd>(&'s self, goal: &GoalData<'d>, i: usize) -> impl Iterator<Item = f64> + 's
    where
        'd: 's,
    {
        let l = goal.data().row(i);
        let perfect = goal.perfect(i);
        let p = goal.spec().p;
        self.decisions.iter().map(move |x| {
            let gap = perfect - utility_unchecked(x, l, p);
            gap * gap
        })
    }

    fn nearest(&self, theta: &[f64]) -> (usize, f64) {
        argmin(self.reps.iter().map(|r| sq_dist(r, theta)))
    }

    /// Cell of a latent vector under the latent-distance rule.
    fn latent_index(&self, theta: &[f64]) -> usize {
        match (&self.grid, self.mode) {
            (Some(grid), QuantizerMode::UniformScalar) => grid
                .iter()
                .zip(theta)
                .fold(0, |acc, (axis, v)| acc * axis.levels() + axis.index(*v)),
            _ => self.nearest(theta).0,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// First index of the minimum.
fn argmin(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (m, v) in values.enumerate() {
        if v < best.1 {
            best = (m, v);
        }
    }
    best
}

/// Cell index of every sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellAssignment {
    pub cell_of: Vec<usize>,
}

impl CellAssignment {
    pub fn members(&self, m: usize) -> impl Iterator<Item = usize> + '_ {
        self.cell_of
            .iter()
            .enumerate()
            .filter(move |(_, c)| **c == m)
            .map(|(i, _)| i)
    }
}

/// Partitions the dataset: goal loss for the goal-oriented mode, latent
/// distance otherwise. Ties go to the smallest index.
pub fn assign_cells(
    cb: &Codebook,
    data: &Dataset,
    precoder: &Precoder,
    spec: &TaskSpec,
) -> Result<CellAssignment> {
    data.check_dim(precoder.n())?;
    cb.check_compatible(precoder, spec)?;
    let (cell_of, _) = match cb.mode {
        QuantizerMode::GoalOriented => assign_goal(cb, &GoalData::new(data, spec)?),
        _ => assign_latent(cb, &encode_all(precoder, data)),
    };
    Ok(CellAssignment { cell_of })
}

fn encode_all(precoder: &Precoder, data: &Dataset) -> Vec<Vec<f64>> {
    exec::map_range(data.len(), |i| precoder.encode_unchecked(data.row(i)))
}

fn assign_goal(cb: &Codebook, goal: &GoalData<'_>) -> (Vec<usize>, Vec<f64>) {
    exec::map_range(goal.len(), |i| argmin(cb.goal_losses(goal, i)))
        .into_iter()
        .unzip()
}

fn assign_latent(cb: &Codebook, latents: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    exec::map_slice(latents, |t| cb.nearest(t)).into_iter().unzip()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn centroid<'a>(points: impl Iterator<Item = &'a Vec<f64>>, k: usize) -> Vec<f64> {
    let mut sum = vec![0.0; k];
    let mut count = 0usize;
    for p in points {
        for (s, v) in sum.iter_mut().zip(p) {
            *s += v;
        }
        count += 1;
    }
    sum.iter().map(|s| s / count.max(1) as f64).collect()
}

fn bit_key(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Training-time view of a dataset under a fixed precoder.
struct Training<'g, 'a> {
    goal: &'g GoalData<'a>,
    precoder: &'g Precoder,
    latents: Vec<Vec<f64>>,
    /// `x*(B^T B l_i)`: the decision if sample `i`'s own latent were the
    /// representative.
    own_decisions: Vec<Vec<f64>>,
}

impl<'g, 'a> Training<'g, 'a> {
    fn new(goal: &'g GoalData<'a>, precoder: &'g Precoder) -> Self {
        let latents = encode_all(precoder, goal.data());
        let energy = goal.spec().energy;
        let own_decisions =
            exec::map_slice(&latents, |t| waterfill(&precoder.decode_unchecked(t), energy).x);
        Training {
            goal,
            precoder,
            latents,
            own_decisions,
        }
    }

    fn energy(&self) -> f64 {
        self.goal.spec().energy
    }

    fn cell_cost(&self, members: &[usize], decision: &[f64]) -> f64 {
        members.iter().map(|&i| self.goal.loss(i, decision)).sum()
    }

    fn decision_for(&self, rep: &[f64]) -> Vec<f64> {
        waterfill(&self.precoder.decode_unchecked(rep), self.energy()).x
    }

    /// Latent order of samples by decreasing current loss, skipping latents
    /// already in `taken`.
    fn worst_fresh(&self, losses: &[f64], taken: &HashSet<Vec<u64>>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..losses.len()).collect();
        order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
        let mut seen = HashSet::new();
        order
            .into_iter()
            .filter(|&i| {
                let key = bit_key(&self.latents[i]);
                !taken.contains(&key) && seen.insert(key)
            })
            .collect()
    }

    fn distinct_latents(&self) -> usize {
        self.latents
            .iter()
            .map(|t| bit_key(t))
            .collect::<HashSet<_>>()
            .len()
    }
}

/// Best representative of one goal-oriented cell: the current point unless
/// a member latent or the centroid does strictly better.
fn best_goal_rep(
    tr: &Training<'_, '_>,
    members: &[usize],
    current: &[f64],
    current_decision: &[f64],
    refine: bool,
) -> Vec<f64> {
    let mut best_cost = tr.cell_cost(members, current_decision);
    let mut best: Option<Vec<f64>> = None;
    let better = |cost: f64, best: f64| cost < best * (1.0 - 1e-12);

    let costs = exec::map_slice(members, |&c| tr.cell_cost(members, &tr.own_decisions[c]));
    for (&c, cost) in members.iter().zip(costs) {
        if better(cost, best_cost) {
            best_cost = cost;
            best = Some(tr.latents[c].clone());
        }
    }
    let center = centroid(members.iter().map(|&i| &tr.latents[i]), current.len());
    let cost = tr.cell_cost(members, &tr.decision_for(&center));
    if better(cost, best_cost) {
        best_cost = cost;
        best = Some(center);
    }

    let mut rep = best.unwrap_or_else(|| current.to_vec());
    if refine {
        rep = pattern_search(tr, members, rep, best_cost);
    }
    rep
}

/// Compass search around `start`, accepting strict improvements only.
fn pattern_search(tr: &Training<'_, '_>, members: &[usize], start: Vec<f64>, cost: f64) -> Vec<f64> {
    let spread = members
        .iter()
        .map(|&i| sq_dist(&tr.latents[i], &start).sqrt())
        .fold(0.0f64, f64::max);
    let mut step = 0.25 * spread;
    let mut rep = start;
    let mut cost = cost;
    for _ in 0..12 {
        if step <= 0.0 {
            break;
        }
        let mut moved = false;
        for d in 0..rep.len() {
            for dir in [1.0, -1.0] {
                let mut cand = rep.clone();
                cand[d] += dir * step;
                let c = tr.cell_cost(members, &tr.decision_for(&cand));
                if c < cost * (1.0 - 1e-12) {
                    rep = cand;
                    cost = c;
                    moved = true;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    rep
}

/// Moves each representative to the best point of its cell and re-seeds
/// empty or duplicated cells from the worst-served samples.
pub fn update_representatives(
    cb: &Codebook,
    assign: &CellAssignment,
    data: &Dataset,
    precoder: &Precoder,
    spec: &TaskSpec,
) -> Result<Codebook> {
    data.check_dim(precoder.n())?;
    check_len(data.len(), assign.cell_of.len())?;
    cb.check_compatible(precoder, spec)?;
    if let Some(&bad) = assign.cell_of.iter().find(|&&c| c >= cb.len()) {
        return Err(Error::InvalidParameter(format!("cell index {bad} out of range")));
    }
    let goal = GoalData::new(data, spec)?;
    let tr = Training::new(&goal, precoder);
    let losses = sample_losses(cb, &tr, assign);
    let reps = updated_reps(cb, &tr, &assign.cell_of, &losses, false);
    Codebook::build(cb.mode, cb.bits, reps, cb.grid.clone(), precoder, spec.energy)
}

fn sample_losses(cb: &Codebook, tr: &Training<'_, '_>, assign: &CellAssignment) -> Vec<f64> {
    exec::map_range(assign.cell_of.len(), |i| {
        let m = assign.cell_of[i];
        match cb.mode {
            QuantizerMode::GoalOriented => tr.goal.loss(i, &cb.decisions[m]),
            _ => sq_dist(&tr.latents[i], &cb.reps[m]),
        }
    })
}

fn updated_reps(
    cb: &Codebook,
    tr: &Training<'_, '_>,
    cell_of: &[usize],
    losses: &[f64],
    refine: bool,
) -> Vec<Vec<f64>> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cb.len()];
    for (i, &m) in cell_of.iter().enumerate() {
        members[m].push(i);
    }
    let mut reps: Vec<Option<Vec<f64>>> = exec::map_range(cb.len(), |m| {
        let cell = &members[m];
        if cell.is_empty() {
            return None;
        }
        Some(match cb.mode {
            QuantizerMode::GoalOriented => {
                best_goal_rep(tr, cell, &cb.reps[m], &cb.decisions[m], refine)
            }
            _ => centroid(cell.iter().map(|&i| &tr.latents[i]), cb.k),
        })
    });

    // duplicates collapse cells; treat later copies as empty
    let mut taken = HashSet::new();
    for rep in reps.iter_mut() {
        if let Some(r) = rep {
            if !taken.insert(bit_key(r)) {
                *rep = None;
            }
        }
    }
    let mut fresh = tr.worst_fresh(losses, &taken).into_iter();
    reps.into_iter()
        .enumerate()
        .map(|(m, rep)| {
            rep.unwrap_or_else(|| match fresh.next() {
                Some(i) => tr.latents[i].clone(),
                // every distinct latent is already a representative
                None => cb.reps[m].clone(),
            })
        })
        .collect()
}

/// Result of a codebook design loop.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerFit {
    pub codebook: Codebook,
    /// Mean loss per iteration, `trace[0]` for the initial codebook. Goal
    /// loss for the goal-oriented quantizer, latent MSE for LBG.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
}

impl QuantizerFit {
    pub fn final_loss(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

fn codebook_size(bits: u32, distinct: usize) -> Result<usize> {
    if bits == 0 {
        return Err(Error::InvalidParameter("bits must be >= 1".into()));
    }
    if bits > MAX_BITS {
        return Err(Error::InvalidParameter(format!(
            "bits must be <= {MAX_BITS}, got {bits}"
        )));
    }
    Ok((1usize << bits).min(distinct))
}

/// `m` distinct training latents in seeded random order.
fn random_distinct(latents: &[Vec<f64>], m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut order: Vec<usize> = (0..latents.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut seen = HashSet::new();
    order
        .into_iter()
        .filter(|&i| seen.insert(bit_key(&latents[i])))
        .take(m)
        .map(|i| latents[i].clone())
        .collect()
}

/// Goal-oriented quantizer design: alternate goal-loss assignment and
/// representative updates until the mean loss stops improving.
pub fn fit_goq(
    data: &Dataset,
    precoder: &Precoder,
    spec: &TaskSpec,
    bits: u32,
    cfg: &TrainConfig,
) -> Result<QuantizerFit> {
    match cfg.goq_init {
        GoqInit::Random => {
            data.check_dim(precoder.n())?;
            let goal = GoalData::new(data, spec)?;
            let tr = Training::new(&goal, precoder);
            let m = codebook_size(bits, tr.distinct_latents())?;
            let reps = random_distinct(&tr.latents, m, cfg.seed);
            let cb = Codebook::build(QuantizerMode::GoalOriented, bits, reps, None, precoder, spec.energy)?;
            Ok(goq_loop(&tr, cb, cfg))
        }
        GoqInit::Nested => {
            let mut levels = fit_goq_nested(data, precoder, spec, bits, cfg)?;
            Ok(levels.pop().expect("at least one level"))
        }
    }
}

/// Goal-oriented quantizers for every budget `1..=max_bits`, each level
/// started from the previous level's representatives plus one split per
/// cell. The starting point of level `b` contains level `b - 1`, so final
/// losses are non-increasing in the budget.
pub fn fit_goq_nested(
    data: &Dataset,
    precoder: &Precoder,
    spec: &TaskSpec,
    max_bits: u32,
    cfg: &TrainConfig,
) -> Result<Vec<QuantizerFit>> {
    data.check_dim(precoder.n())?;
    let goal = GoalData::new(data, spec)?;
    let tr = Training::new(&goal, precoder);
    let distinct = tr.distinct_latents();
    codebook_size(max_bits, distinct)?;

    let start = vec![centroid(tr.latents.iter(), precoder.k())];
    let cb = Codebook::build(QuantizerMode::GoalOriented, 0, start, None, precoder, spec.energy)?;
    let mut prev = goq_loop(&tr, cb, cfg);
    let mut levels = Vec::with_capacity(max_bits as usize);
    for bits in 1..=max_bits {
        let target = codebook_size(bits, distinct)?;
        let reps = split_reps(&tr, &prev.codebook, target);
        let cb = Codebook::build(QuantizerMode::GoalOriented, bits, reps, None, precoder, spec.energy)?;
        let fit = goq_loop(&tr, cb, cfg);
        levels.push(fit.clone());
        prev = fit;
    }
    Ok(levels)
}

/// Keeps every representative and adds, per cell, the latent of its
/// worst-served member (falling back to the worst-served sample overall).
fn split_reps(tr: &Training<'_, '_>, cb: &Codebook, target: usize) -> Vec<Vec<f64>> {
    let (cell_of, losses) = assign_goal(cb, tr.goal);
    let mut taken: HashSet<Vec<u64>> = cb.reps.iter().map(|r| bit_key(r)).collect();
    let mut reps = cb.reps.clone();
    for m in 0..cb.len() {
        if reps.len() >= target {
            break;
        }
        let pick = (0..cell_of.len())
            .filter(|&i| cell_of[i] == m && !taken.contains(&bit_key(&tr.latents[i])))
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if losses[b] >= losses[i] => Some(b),
                _ => Some(i),
            });
        if let Some(i) = pick {
            taken.insert(bit_key(&tr.latents[i]));
            reps.push(tr.latents[i].clone());
        }
    }
    for i in tr.worst_fresh(&losses, &taken) {
        if reps.len() >= target {
            break;
        }
        reps.push(tr.latents[i].clone());
    }
    reps
}

fn goq_loop(tr: &Training<'_, '_>, mut cb: Codebook, cfg: &TrainConfig) -> QuantizerFit {
    let (mut cell_of, mut losses) = assign_goal(&cb, tr.goal);
    let mut loss = mean(&losses);
    let mut trace = vec![loss];
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;

    while iterations < cfg.j_max {
        if loss == 0.0 {
            stop = StopReason::ZeroLoss;
            break;
        }
        let reps = updated_reps(&cb, tr, &cell_of, &losses, cfg.goq_refine);
        cb = Codebook::build(cb.mode, cb.bits, reps, None, tr.precoder, tr.energy())
            .expect("representatives keep their shape");
        (cell_of, losses) = assign_goal(&cb, tr.goal);
        let next = mean(&losses);
        trace.push(next);
        iterations += 1;
        let improvement = (loss - next) / loss;
        loss = next;
        if improvement < cfg.rel_tol {
            stop = StopReason::Converged;
            break;
        }
    }
    QuantizerFit {
        codebook: cb,
        trace,
        iterations,
        stop,
    }
}

/// Linde-Buzo-Gray (Lloyd) codebook on the latents, started from distinct
/// random latents. Runs until the partition is stable or `j_max`.
pub fn fit_lbg(
    data: &Dataset,
    precoder: &Precoder,
    bits: u32,
    cfg: &TrainConfig,
) -> Result<QuantizerFit> {
    data.check_dim(precoder.n())?;
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let latents = encode_all(precoder, data);
    let distinct = latents.iter().map(|t| bit_key(t)).collect::<HashSet<_>>().len();
    let m = codebook_size(bits, distinct)?;
    let reps = random_distinct(&latents, m, cfg.seed);
    // decision caches are irrelevant for the latent rule; any positive
    // energy will do until the codebook is rebuilt for a task
    let build = |reps| Codebook::build(QuantizerMode::Lbg, bits, reps, None, precoder, 1.0);
    let mut cb = build(reps)?;

    let (mut cell_of, mut dists) = assign_latent(&cb, &latents);
    let mut trace = vec![mean(&dists)];
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;
    while iterations < cfg.j_max {
        let reps = lloyd_update(&cb, &latents, &cell_of, &dists);
        cb = build(reps)?;
        let (next_cells, next_dists) = assign_latent(&cb, &latents);
        iterations += 1;
        trace.push(mean(&next_dists));
        let stable = next_cells == cell_of;
        cell_of = next_cells;
        dists = next_dists;
        if stable {
            stop = StopReason::Converged;
            break;
        }
    }
    Ok(QuantizerFit {
        codebook: cb,
        trace,
        iterations,
        stop,
    })
}

fn lloyd_update(cb: &Codebook, latents: &[Vec<f64>], cell_of: &[usize], dists: &[f64]) -> Vec<Vec<f64>> {
    let mut reps: Vec<Option<Vec<f64>>> = (0..cb.len())
        .map(|m| {
            let mut members = cell_of.iter().zip(latents).filter(|(c, _)| **c == m).map(|(_, t)| t).peekable();
            members.peek()?;
            Some(centroid(members, cb.k))
        })
        .collect();
    let mut taken = HashSet::new();
    for rep in reps.iter_mut() {
        if let Some(r) = rep {
            if !taken.insert(bit_key(r)) {
                *rep = None;
            }
        }
    }
    let mut order: Vec<usize> = (0..dists.len()).collect();
    order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
    let mut fresh = order.into_iter().filter(|&i| taken.insert(bit_key(&latents[i])));
    reps.into_iter()
        .enumerate()
        .map(|(m, rep)| rep.unwrap_or_else(|| fresh.next().map_or_else(|| cb.reps[m].clone(), |i| latents[i].clone())))
        .collect()
}

/// Splits `bits` over `k` coordinates: `bits / k` each, remainder to the
/// leading coordinates.
pub fn allocate_bits(bits: u32, k: usize) -> Vec<u32> {
    let base = bits / k as u32;
    let extra = (bits % k as u32) as usize;
    (0..k).map(|d| base + u32::from(d < extra)).collect()
}

/// Product of per-coordinate midrise uniform quantizers spanning the
/// training latent range.
pub fn uniform_scalar_quantizer(
    data: &Dataset,
    precoder: &Precoder,
    spec: &TaskSpec,
    bits: u32,
) -> Result<Codebook> {
    data.check_dim(precoder.n())?;
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if bits > MAX_BITS {
        return Err(Error::InvalidParameter(format!(
            "bits must be <= {MAX_BITS}, got {bits}"
        )));
    }
    let latents = encode_all(precoder, data);
    let grid: Vec<AxisGrid> = allocate_bits(bits, precoder.k())
        .into_iter()
        .enumerate()
        .map(|(d, b)| {
            let (min, max) = latents
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t[d]), hi.max(t[d])));
            AxisGrid { min, max, bits: b }
        })
        .collect();

    // enumerate the product grid with coordinate 0 most significant
    let mut reps = vec![Vec::new()];
    for axis in &grid {
        reps = reps
            .into_iter()
            .flat_map(|prefix| {
                (0..axis.levels()).map(move |idx| {
                    let mut r = prefix.clone();
                    r.push(axis.center(idx));
                    r
                })
            })
            .collect();
    }
    Codebook::build(
        QuantizerMode::UniformScalar,
        bits,
        reps,
        Some(grid),
        precoder,
        spec.energy,
    )
}

/// Encodes a profile. The goal-oriented mode picks the representative with
/// the smallest goal loss for the full profile; the other modes pick by
/// latent distance.
pub fn quantize(
    cb: &Codebook,
    l: &[f64],
    precoder: &Precoder,
    spec: &TaskSpec,
) -> Result<(usize, Vec<f64>)> {
    check_len(precoder.n(), l.len())?;
    cb.check_compatible(precoder, spec)?;
    let m = match cb.mode {
        QuantizerMode::GoalOriented => {
            let perfect = utility_unchecked(&waterfill(l, spec.energy).x, l, spec.p);
            argmin(cb.decisions.iter().map(|x| {
                let gap = perfect - utility_unchecked(x, l, spec.p);
                gap * gap
            }))
            .0
        }
        _ => cb.latent_index(&precoder.encode_unchecked(l)),
    };
    Ok((m, cb.reps[m].clone()))
}

/// Encodes a latent vector by latent distance, whatever the mode.
pub fn quantize_latent(cb: &Codebook, theta: &[f64]) -> Result<(usize, Vec<f64>)> {
    check_len(cb.k, theta.len())?;
    let m = cb.latent_index(theta);
    Ok((m, cb.reps[m].clone()))
}

/// Mean goal loss `(1/T) sum_i min_m E(r_m; l_i)` of a goal-oriented
/// codebook, or the loss under each mode's own encoding rule otherwise.
pub fn codebook_goal_loss(
    cb: &Codebook,
    data: &Dataset,
    precoder: &Precoder,
    spec: &TaskSpec,
) -> Result<f64> {
    data.check_dim(precoder.n())?;
    cb.check_compatible(precoder, spec)?;
    let goal = GoalData::new(data, spec)?;
    Ok(goal_loss_with(cb, &goal, precoder))
}

pub(crate) fn goal_loss_with(cb: &Codebook, goal: &GoalData<'_>, precoder: &Precoder) -> f64 {
    let losses = match cb.mode {
        QuantizerMode::GoalOriented => assign_goal(cb, goal).1,
        _ => exec::map_range(goal.len(), |i| {
            let m = cb.latent_index(&precoder.encode_unchecked(goal.data().row(i)));
            goal.loss(i, &cb.decisions[m])
        }),
    };
    mean(&losses)
}

/// Rebuilds the per-representative caches for another energy budget.
pub fn rebind(cb: &Codebook, precoder: &Precoder, spec: &TaskSpec) -> Result<Codebook> {
    check_len(cb.k, precoder.k())?;
    Codebook::build(cb.mode, cb.bits, cb.reps.clone(), cb.grid.clone(), precoder, spec.energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::Norm;
    use approx::assert_abs_diff_eq;

    fn scalar_data(values: &[f64]) -> (Dataset, Precoder) {
        let rows: Vec<[f64; 1]> = values.iter().map(|v| [*v]).collect();
        (Dataset::from_rows(&rows).unwrap(), Precoder::identity(1))
    }

    fn spec() -> TaskSpec {
        TaskSpec::new(Norm::Infinity, 2.0).unwrap()
    }

    fn profiles() -> Dataset {
        Dataset::from_rows(&[
            [1.0, 2.0, 4.0],
            [3.0, 1.0, 0.5],
            [2.0, 2.0, 2.5],
            [0.2, 3.5, 1.0],
        ])
        .unwrap()
    }

    #[test]
    fn single_cell_takes_everything() {
        let data = profiles();
        let p = Precoder::new(1, 3, vec![0.6, 0.0, 0.8]).unwrap();
        for mode in [QuantizerMode::GoalOriented, QuantizerMode::Lbg] {
            let cb = Codebook::new(mode, 1, vec![vec![1.0]], &p, &spec()).unwrap();
            let a = assign_cells(&cb, &data, &p, &spec()).unwrap();
            assert!(a.cell_of.iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn goal_assignment_finds_exact_match() {
        let data = profiles();
        let p = Precoder::identity(3);
        let reps: Vec<Vec<f64>> = data.rows().map(|r| r.to_vec()).collect();
        let cb = Codebook::new(QuantizerMode::GoalOriented, 2, reps, &p, &spec()).unwrap();
        let a = assign_cells(&cb, &data, &p, &spec()).unwrap();
        let goal = GoalData::new(&data, &spec()).unwrap();
        for (i, &m) in a.cell_of.iter().enumerate() {
            assert_eq!(goal.loss(i, &cb.decisions[m]), 0.0);
        }
    }

    #[test]
    fn goal_assignment_matches_brute_force() {
        use crate::scheduler::{solve_waterfill, utility};
        let data = profiles();
        let s = spec();
        let p = Precoder::new(1, 3, vec![0.6, 0.0, 0.8]).unwrap();
        let reps = vec![vec![1.5], vec![3.5]];
        let cb = Codebook::new(QuantizerMode::GoalOriented, 1, reps.clone(), &p, &s).unwrap();
        let a = assign_cells(&cb, &data, &p, &s).unwrap();
        for (i, l) in data.rows().enumerate() {
            let u_star = utility(&solve_waterfill(l, &s).unwrap().x, l, &s).unwrap();
            let errs: Vec<f64> = reps
                .iter()
                .map(|r| {
                    let recon = p.decode(r).unwrap();
                    let x = solve_waterfill(&recon, &s).unwrap().x;
                    (u_star - utility(&x, l, &s).unwrap()).powi(2)
                })
                .collect();
            let best = if errs[1] < errs[0] { 1 } else { 0 };
            assert_eq!(a.cell_of[i], best, "sample {i}: {errs:?}");
        }
    }

    #[test]
    fn singleton_cell_moves_to_its_latent() {
        let data = Dataset::from_rows(&[[1.0, 2.0, 4.0]]).unwrap();
        let p = Precoder::new(1, 3, vec![0.6, 0.0, 0.8]).unwrap();
        let cb = Codebook::new(QuantizerMode::GoalOriented, 1, vec![vec![-3.0]], &p, &spec()).unwrap();
        let a = CellAssignment { cell_of: vec![0] };
        let next = update_representatives(&cb, &a, &data, &p, &spec()).unwrap();
        assert_abs_diff_eq!(next.reps()[0][0], 0.6 + 3.2, epsilon = 1e-12);
    }

    #[test]
    fn lbg_update_is_centroid() {
        let (data, p) = scalar_data(&[1.0, 3.0]);
        let cb = Codebook::new(QuantizerMode::Lbg, 1, vec![vec![0.0], vec![10.0]], &p, &spec()).unwrap();
        let a = CellAssignment { cell_of: vec![0, 0] };
        let next = update_representatives(&cb, &a, &data, &p, &spec()).unwrap();
        assert_eq!(next.reps()[0], vec![2.0]);
        // the empty cell is re-seeded with a latent not already in use
        assert!(next.reps()[1] == vec![1.0] || next.reps()[1] == vec![3.0]);
    }

    #[test]
    fn goq_update_matches_candidate_brute_force() {
        let data = Dataset::from_rows(&[[1.0, 2.0, 4.0], [3.0, 1.0, 0.5], [2.0, 2.0, 2.5]]).unwrap();
        let s = spec();
        let p = Precoder::new(1, 3, vec![0.6, 0.0, 0.8]).unwrap();
        let current = vec![0.1];
        let cb = Codebook::new(QuantizerMode::GoalOriented, 1, vec![current.clone()], &p, &s).unwrap();
        let a = CellAssignment { cell_of: vec![0, 0, 0] };
        let next = update_representatives(&cb, &a, &data, &p, &s).unwrap();

        let goal = GoalData::new(&data, &s).unwrap();
        let cost = |r: &[f64]| -> f64 {
            let x = waterfill(&p.decode(r).unwrap(), s.energy).x;
            (0..3).map(|i| goal.loss(i, &x)).sum()
        };
        let mut candidates: Vec<Vec<f64>> = data.rows().map(|l| p.encode(l).unwrap()).collect();
        let mean = candidates.iter().map(|c| c[0]).sum::<f64>() / 3.0;
        candidates.push(vec![mean]);
        candidates.push(current);
        let best = candidates
            .iter()
            .map(|c| cost(c))
            .fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(cost(&next.reps()[0]), best, epsilon = 1e-12);
    }

    #[test]
    fn goq_exact_when_codebook_covers_data() {
        let data = profiles();
        let p = Precoder::identity(3);
        let cfg = TrainConfig::default();
        let fit = fit_goq(&data, &p, &spec(), 3, &cfg).unwrap();
        assert_eq!(fit.codebook.len(), 4);
        assert_eq!(fit.final_loss(), 0.0);
    }

    #[test]
    fn goq_rejects_zero_bits() {
        let data = profiles();
        let p = Precoder::identity(3);
        assert!(fit_goq(&data, &p, &spec(), 0, &TrainConfig::default()).is_err());
        assert!(fit_lbg(&data, &p, 0, &TrainConfig::default()).is_err());
    }

    #[test]
    fn lbg_constant_and_two_clusters() {
        let cfg = TrainConfig::default();
        let (data, p) = scalar_data(&[2.5; 5]);
        let fit = fit_lbg(&data, &p, 2, &cfg).unwrap();
        assert_eq!(fit.codebook.reps(), &[vec![2.5]]);
        assert_eq!(fit.final_loss(), 0.0);

        let (data, p) = scalar_data(&[0.0, 0.0, 10.0, 10.0]);
        let fit = fit_lbg(&data, &p, 1, &cfg).unwrap();
        let mut reps: Vec<f64> = fit.codebook.reps().iter().map(|r| r[0]).collect();
        reps.sort_by(f64::total_cmp);
        assert_eq!(reps, vec![0.0, 10.0]);
    }

    #[test]
    fn uniform_quantizer_examples() {
        let (data, p) = scalar_data(&[0.0, 1.0, 0.4]);
        let cb = uniform_scalar_quantizer(&data, &p, &spec(), 1).unwrap();
        assert_eq!(quantize(&cb, &[0.3], &p, &spec()).unwrap().1, vec![0.25]);
        assert_eq!(quantize(&cb, &[1.0], &p, &spec()).unwrap().1, vec![0.75]);
        assert_eq!(quantize(&cb, &[7.0], &p, &spec()).unwrap().1, vec![0.75]);
        assert_eq!(allocate_bits(3, 2), vec![2, 1]);
        assert_eq!(allocate_bits(2, 3), vec![1, 1, 0]);

        let zero = uniform_scalar_quantizer(&data, &p, &spec(), 0).unwrap();
        assert_eq!(zero.reps(), &[vec![0.5]]);
    }

    #[test]
    fn uniform_product_grid_agrees_with_nearest() {
        let data = Dataset::from_rows(&[[0.0, 0.0], [1.0, 2.0], [0.3, 1.1]]).unwrap();
        let p = Precoder::identity(2);
        let cb = uniform_scalar_quantizer(&data, &p, &spec(), 3).unwrap();
        assert_eq!(cb.len(), 8);
        for theta in [[0.1, 0.2], [0.9, 1.9], [0.55, 0.4], [-1.0, 3.0]] {
            let (m, r) = quantize_latent(&cb, &theta).unwrap();
            assert_eq!(r, cb.reps()[m]);
            assert_eq!(m, cb.nearest(&theta).0);
        }
    }

    #[test]
    fn lbg_quantize_picks_nearest() {
        let (_, p) = scalar_data(&[0.0]);
        let cb = Codebook::new(QuantizerMode::Lbg, 1, vec![vec![0.0], vec![10.0]], &p, &spec()).unwrap();
        assert_eq!(quantize(&cb, &[4.0], &p, &spec()).unwrap(), (0, vec![0.0]));
    }

    #[test]
    fn goal_rule_never_worse_than_nearest() {
        let s = spec();
        let p = Precoder::new(1, 3, vec![0.6, 0.0, 0.8]).unwrap();
        let reps = vec![vec![2.0], vec![3.0], vec![4.5]];
        let cb = Codebook::new(QuantizerMode::GoalOriented, 2, reps, &p, &s).unwrap();
        let data = profiles();
        let goal = GoalData::new(&data, &s).unwrap();
        let mut disagreements = 0;
        for (i, l) in data.rows().enumerate() {
            let (goal_m, _) = quantize(&cb, l, &p, &s).unwrap();
            let (near_m, _) = quantize_latent(&cb, &p.encode(l).unwrap()).unwrap();
            let e_goal = goal.loss(i, &cb.decisions[goal_m]);
            let e_near = goal.loss(i, &cb.decisions[near_m]);
            assert!(e_goal <= e_near);
            disagreements += usize::from(goal_m != near_m);
        }
        assert!(disagreements > 0, "fixture should exercise a disagreement");
    }

    #[test]
    fn codebook_file_roundtrip_and_mismatch() {
        let data = profiles();
        let s = spec();
        let p = Precoder::new(1, 3, vec![0.6, 0.0, 0.8]).unwrap();
        let fit = fit_goq(&data, &p, &s, 1, &TrainConfig::default()).unwrap();
        let json = serde_json::to_string(&fit.codebook.to_file()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["mode", "bits", "k", "reps", "precoder_ref"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let file: CodebookFile = serde_json::from_str(&json).unwrap();
        assert_eq!(Codebook::from_file(file.clone(), &p, &s).unwrap(), fit.codebook);
        let other = Precoder::new(1, 3, vec![0.8, 0.0, 0.6]).unwrap();
        assert!(Codebook::from_file(file, &other, &s).is_err());
    }
}
