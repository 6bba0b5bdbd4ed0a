//! Utility evaluation and the exact water-filling scheduler.
//!
//! The scheduling task is `maximize -||x + l||_p` subject to `sum(x) >= E`
//! and `x >= 0`. Its solution fills the lowest slots of `l` up to a common
//! water level, and within a fixed active set it is an affine function of
//! `l` (see [`linearize`]).

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{check_len, Error, Result};

/// Exponent of the L_p norm in the utility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Norm {
    Finite(u32),
    Infinity,
}

impl Norm {
    pub fn is_infinite(self) -> bool {
        matches!(self, Norm::Infinity)
    }

    /// `||v||_p`. For `p = inf` this is `max_j v_j` (the peak), not the
    /// max of absolute values.
    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            Norm::Infinity => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Norm::Finite(1) => v.iter().map(|a| a.abs()).sum(),
            Norm::Finite(2) => v.iter().map(|a| a * a).sum::<f64>().sqrt(),
            Norm::Finite(p) => {
                let scale = v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
                if scale == 0.0 {
                    return 0.0;
                }
                let p = p as i32;
                let s: f64 = v.iter().map(|a| (a.abs() / scale).powi(p)).sum();
                scale * s.powf(1.0 / p as f64)
            }
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Norm::Finite(p) => write!(f, "{p}"),
            Norm::Infinity => f.write_str("inf"),
        }
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(Norm::Infinity);
        }
        match s.parse::<u32>() {
            Ok(p) if p >= 1 => Ok(Norm::Finite(p)),
            _ => Err(Error::InvalidParameter(format!(
                "p must be an integer >= 1 or \"inf\", got {s:?}"
            ))),
        }
    }
}

impl Serialize for Norm {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Norm::Finite(p) => serializer.serialize_u32(*p),
            Norm::Infinity => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Norm {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct NormVisitor;

        impl Visitor<'_> for NormVisitor {
            type Value = Norm;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an integer >= 1 or the string \"inf\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Norm, E> {
                match u32::try_from(v) {
                    Ok(p) if p >= 1 => Ok(Norm::Finite(p)),
                    _ => Err(E::custom(format!("invalid norm exponent {v}"))),
                }
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Norm, E> {
                if v < 1 {
                    return Err(E::custom(format!("invalid norm exponent {v}")));
                }
                self.visit_u64(v as u64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Norm, E> {
                v.parse().map_err(E::custom)
            }
        }

        deserializer.deserialize_any(NormVisitor)
    }
}

/// The goal: norm exponent and energy budget (kWh).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub p: Norm,
    #[serde(rename = "E")]
    pub energy: f64,
}

impl TaskSpec {
    pub fn new(p: Norm, energy: f64) -> Result<Self> {
        let spec = TaskSpec { p, energy };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if let Norm::Finite(0) = self.p {
            return Err(Error::InvalidParameter("p must be >= 1".into()));
        }
        if !(self.energy.is_finite() && self.energy > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "energy budget must be positive, got {}",
                self.energy
            )));
        }
        Ok(())
    }

    pub fn with_p(self, p: Norm) -> Self {
        TaskSpec { p, ..self }
    }
}

/// Optimal allocation returned by [`solve_waterfill`].
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub x: Vec<f64>,
    pub water_level: f64,
    pub active_count: usize,
    /// `active[j]` is true for slots filled up to the water level.
    pub active: Vec<bool>,
}

/// Region-wise exact affine form `x*(l) = H l + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedDecision {
    pub n: usize,
    /// Row-major `n x n` Jacobian.
    pub h: Vec<f64>,
    pub b: Vec<f64>,
    pub active: Vec<bool>,
    pub active_count: usize,
}

impl LinearizedDecision {
    pub fn apply(&self, l: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, l.len())?;
        Ok(self
            .h
            .chunks_exact(self.n)
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(l).map(|(h, v)| h * v).sum::<f64>() + b)
            .collect())
    }
}

/// `u(x; l) = -||x + l||_p`.
pub fn utility(x: &[f64], l: &[f64], spec: &TaskSpec) -> Result<f64> {
    check_len(l.len(), x.len())?;
    Ok(utility_unchecked(x, l, spec.p))
}

pub(crate) fn utility_unchecked(x: &[f64], l: &[f64], p: Norm) -> f64 {
    match p {
        Norm::Infinity => -x
            .iter()
            .zip(l)
            .map(|(a, b)| a + b)
            .fold(f64::NEG_INFINITY, f64::max),
        _ => {
            let y: Vec<f64> = x.iter().zip(l).map(|(a, b)| a + b).collect();
            -p.norm(&y)
        }
    }
}

/// Utility reached when the decision is taken with perfect knowledge of `l`.
pub fn perfect_utility(l: &[f64], spec: &TaskSpec) -> Result<f64> {
    let d = solve_waterfill(l, spec)?;
    Ok(utility_unchecked(&d.x, l, spec.p))
}

/// Exact solution of the scheduling problem by water-filling.
///
/// The result does not depend on `p`: once the budget binds, every `p >= 1`
/// leads to the same water level. Negative entries (decoder outputs) are
/// accepted as-is.
pub fn solve_waterfill(l: &[f64], spec: &TaskSpec) -> Result<Decision> {
    if l.is_empty() {
        return Err(Error::Empty("load profile"));
    }
    if let Some(j) = l.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(j));
    }
    spec.validate()?;
    Ok(waterfill(l, spec.energy))
}

/// Unvalidated water-filling; `l` nonempty and finite, `energy > 0`.
pub(crate) fn waterfill(l: &[f64], energy: f64) -> Decision {
    let n = l.len();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: ties keep original index order
    order.sort_by(|&a, &b| l[a].partial_cmp(&l[b]).unwrap_or(Ordering::Equal));

    // largest n with (n-1) l_(n) - sum_{j<n} l_(j) <= E; the left side is
    // nondecreasing in n on sorted input so the ascending scan can stop early
    let mut prefix = 0.0;
    let mut active_count = 1;
    let mut active_sum = l[order[0]];
    for (pos, &idx) in order.iter().enumerate() {
        let v = l[idx];
        if pos as f64 * v - prefix <= energy {
            active_count = pos + 1;
            active_sum = prefix + v;
        } else {
            break;
        }
        prefix += v;
    }

    let level = (energy + active_sum) / active_count as f64;
    let mut x = vec![0.0; n];
    let mut active = vec![false; n];
    for &idx in &order[..active_count] {
        x[idx] = (level - l[idx]).max(0.0);
        active[idx] = true;
    }
    Decision {
        x,
        water_level: level,
        active_count,
        active,
    }
}

/// Jacobian and offset of the optimal decision around `l`, in the original
/// (unsorted) slot order.
pub fn linearize(l: &[f64], spec: &TaskSpec) -> Result<LinearizedDecision> {
    let d = solve_waterfill(l, spec)?;
    let n = l.len();
    let inv = 1.0 / d.active_count as f64;
    let mut h = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for i in (0..n).filter(|&i| d.active[i]) {
        b[i] = spec.energy * inv;
        for j in (0..n).filter(|&j| d.active[j]) {
            h[i * n + j] = if i == j { -1.0 + inv } else { inv };
        }
    }
    Ok(LinearizedDecision {
        n,
        h,
        b,
        active: d.active,
        active_count: d.active_count,
    })
}

/// `H v` for the Jacobian of a decision's active set, without forming `H`.
/// `H` is symmetric, so this is also `H^T v`.
pub(crate) fn apply_jacobian(active: &[bool], active_count: usize, v: &[f64]) -> Vec<f64> {
    let mean = active
        .iter()
        .zip(v)
        .filter(|(a, _)| **a)
        .map(|(_, x)| x)
        .sum::<f64>()
        / active_count as f64;
    active
        .iter()
        .zip(v)
        .map(|(&a, &x)| if a { mean - x } else { 0.0 })
        .collect()
}
