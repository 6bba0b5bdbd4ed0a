use serde::{Deserialize, Serialize};

/// How the goal-oriented quantizer picks its starting representatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoqInit {
    /// `M` distinct latents drawn at random from the training set.
    #[default]
    Random,
    /// Start from one representative and double the codebook level by
    /// level, refining after each split. Every level contains the previous
    /// level's representatives at its start.
    Nested,
}

/// Knobs shared by the precoder, quantizer and co-design trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Gradient-descent iterations for the linear precoder.
    pub it_max: usize,
    /// First step tried by the line search; `None` means `1 / (||G||_F + eps)`.
    pub initial_step: Option<f64>,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Stop once a loop improves its loss by less than this fraction.
    pub rel_tol: f64,
    /// Diagonalize the centered covariance instead of the second moment.
    pub centered_klt: bool,
    /// Quantizer design iterations.
    pub j_max: usize,
    pub goq_init: GoqInit,
    /// Derivative-free local search around each representative after the
    /// candidate update.
    pub goq_refine: bool,
    /// Outer iterations of the precoder/quantizer co-design loop.
    pub outer_j_max: usize,
    /// Noisy reconstructions per sample in the co-design loop.
    pub kappa: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            it_max: 500,
            initial_step: None,
            backtrack_factor: 0.5,
            max_backtracks: 40,
            rel_tol: 1e-4,
            centered_klt: false,
            j_max: 100,
            goq_init: GoqInit::Random,
            goq_refine: false,
            outer_j_max: 10,
            kappa: 10,
            seed: 0,
        }
    }
}
