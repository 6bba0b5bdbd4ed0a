use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::scheduler::{utility_unchecked, waterfill, TaskSpec};

/// A dataset paired with the task, with the perfect-information utility
/// `u(x*(l); l)` of every sample cached.
#[derive(Debug, Clone)]
pub struct GoalData<'a> {
    data: &'a Dataset,
    spec: TaskSpec,
    perfect: Vec<f64>,
}

impl<'a> GoalData<'a> {
    pub fn new(data: &'a Dataset, spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let perfect = exec::map_range(data.len(), |i| {
            let l = data.row(i);
            utility_unchecked(&waterfill(l, spec.energy).x, l, spec.p)
        });
        Ok(GoalData {
            data,
            spec: *spec,
            perfect,
        })
    }

    pub fn data(&self) -> &'a Dataset {
        self.data
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn perfect(&self, i: usize) -> f64 {
        self.perfect[i]
    }

    pub fn perfect_utilities(&self) -> &[f64] {
        &self.perfect
    }

    /// Utility of sample `i` under the allocation `x`.
    pub fn achieved(&self, i: usize, x: &[f64]) -> f64 {
        utility_unchecked(x, self.data.row(i), self.spec.p)
    }

    /// Squared optimality loss of sample `i` under the allocation `x`.
    pub fn loss(&self, i: usize, x: &[f64]) -> f64 {
        let gap = self.perfect[i] - self.achieved(i, x);
        gap * gap
    }

    /// Squared optimality loss of sample `i` when the scheduler sees `recon`.
    pub fn loss_from_reconstruction(&self, i: usize, recon: &[f64]) -> f64 {
        self.loss(i, &waterfill(recon, self.spec.energy).x)
    }
}
