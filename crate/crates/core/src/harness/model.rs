use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codesign::CodesignState;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::harness::metrics::rsol;
use crate::precoding::Precoder;
use crate::quantization::{quantize, quantize_latent, rebind, Codebook, CodebookFile};
use crate::scheduler::{utility_unchecked, waterfill, TaskSpec};

/// How a goal-oriented codebook picks the cell of a profile at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeRule {
    /// Smallest goal loss for the full profile.
    #[default]
    GoalAware,
    /// Nearest representative in the latent space.
    LatentOnly,
}

/// A trained compression pipeline `l -> l_hat`.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(Precoder),
    Quantized {
        precoder: Precoder,
        codebook: Codebook,
        rule: EncodeRule,
    },
}

/// On-disk form of a quantized pipeline. Co-design bundles carry extra
/// keys, which are ignored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModelFile {
    pub precoder: Precoder,
    pub codebook: CodebookFile,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_trace: Vec<f64>,
}

impl Model {
    pub fn from_codesign(state: &CodesignState) -> Self {
        Model::Quantized {
            precoder: state.precoder.clone(),
            codebook: state.codebook.clone(),
            rule: EncodeRule::GoalAware,
        }
    }

    pub fn precoder(&self) -> &Precoder {
        match self {
            Model::Linear(p) => p,
            Model::Quantized { precoder, .. } => precoder,
        }
    }

    /// Rebuilds codebook caches if the task's energy budget changed.
    pub fn for_task(self, spec: &TaskSpec) -> Result<Self> {
        match self {
            Model::Quantized {
                precoder,
                codebook,
                rule,
            } => {
                let codebook = rebind(&codebook, &precoder, spec)?;
                Ok(Model::Quantized {
                    precoder,
                    codebook,
                    rule,
                })
            }
            linear => Ok(linear),
        }
    }

    pub fn reconstruct(&self, l: &[f64], spec: &TaskSpec) -> Result<Vec<f64>> {
        match self {
            Model::Linear(p) => p.reconstruct(l),
            Model::Quantized {
                precoder,
                codebook,
                rule,
            } => {
                let (_, rep) = match rule {
                    EncodeRule::GoalAware => quantize(codebook, l, precoder, spec)?,
                    EncodeRule::LatentOnly => quantize_latent(codebook, &precoder.encode(l)?)?,
                };
                precoder.decode(&rep)
            }
        }
    }

    /// Per-sample `(U_perfect, U_C)` where `U_C` is the true utility of the
    /// schedule computed from the reconstruction.
    pub fn utilities(&self, data: &Dataset, spec: &TaskSpec) -> Result<Vec<(f64, f64)>> {
        spec.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        exec::map_range(data.len(), |i| {
            let l = data.row(i);
            let perfect = utility_unchecked(&waterfill(l, spec.energy).x, l, spec.p);
            let recon = self.reconstruct(l, spec)?;
            let achieved = utility_unchecked(&waterfill(&recon, spec.energy).x, l, spec.p);
            Ok((perfect, achieved))
        })
        .into_iter()
        .collect()
    }

    pub fn rsol(&self, data: &Dataset, spec: &TaskSpec) -> Result<f64> {
        rsol(self.utilities(data, spec)?)
    }

    pub fn to_json(&self, loss_trace: &[f64]) -> Result<String> {
        match self {
            Model::Linear(p) => p.to_json(),
            Model::Quantized {
                precoder, codebook, ..
            } => Ok(serde_json::to_string_pretty(&QuantizedModelFile {
                precoder: precoder.clone(),
                codebook: codebook.to_file(),
                loss_trace: loss_trace.to_vec(),
            })?),
        }
    }

    /// Parses a precoder file or a quantized bundle. Codebook caches are
    /// built for `spec`.
    pub fn from_json(text: &str, spec: &TaskSpec) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if value.get("codebook").is_none() {
            return Ok(Model::Linear(Precoder::from_json(text)?));
        }
        let file: QuantizedModelFile = serde_json::from_value(value)?;
        let precoder = Precoder::from_json(&serde_json::to_string(&file.precoder)?)?;
        let codebook = Codebook::from_file(file.codebook, &precoder, spec)?;
        Ok(Model::Quantized {
            precoder,
            codebook,
            rule: EncodeRule::GoalAware,
        })
    }

    pub fn load(path: impl AsRef<Path>, spec: &TaskSpec) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_json(&text, spec)
    }
}

/// The precoder stored in a model file, without building codebook caches.
pub fn read_model_precoder(text: &str) -> Result<Precoder> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("precoder") {
        Some(p) => Precoder::from_json(&serde_json::to_string(p)?),
        None => Precoder::from_json(text),
    }
}
