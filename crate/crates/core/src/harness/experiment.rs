use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codesign::fit_iterative;
use crate::config::{GoqInit, TrainConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::harness::data::{gen_synthetic, load_profiles_csv, split_dataset, SyntheticParams};
use crate::harness::model::{EncodeRule, Model};
use crate::precoding::{fit_linear_precoder, klt_basis_with, LinearFit, Precoder};
use crate::quantization::{
    fit_goq, fit_goq_nested, fit_lbg, rebind, uniform_scalar_quantizer, Codebook, QuantizerFit,
};
use crate::scheduler::{Norm, TaskSpec};

/// Compression pipelines the harness can train and score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "KLT")]
    Klt,
    #[serde(rename = "LT")]
    Lt,
    #[serde(rename = "LT+GOQ")]
    LtGoq,
    #[serde(rename = "LT+LBG")]
    LtLbg,
    #[serde(rename = "LT+UNIFORM")]
    LtUniform,
    #[serde(rename = "ITERATIVE")]
    Iterative,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Klt,
        Method::Lt,
        Method::LtGoq,
        Method::LtLbg,
        Method::LtUniform,
        Method::Iterative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Klt => "KLT",
            Method::Lt => "LT",
            Method::LtGoq => "LT+GOQ",
            Method::LtLbg => "LT+LBG",
            Method::LtUniform => "LT+UNIFORM",
            Method::Iterative => "ITERATIVE",
        }
    }

    pub fn is_quantized(self) -> bool {
        !matches!(self, Method::Klt | Method::Lt)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == upper)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method {s:?}")))
    }
}

/// Where the profiles come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic {
        t: usize,
        n: usize,
        seed: u64,
        #[serde(default)]
        params: SyntheticParams,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Csv(path) => load_profiles_csv(path),
            DataSource::Synthetic { t, n, seed, params } => gen_synthetic(*t, *n, *seed, params),
        }
    }
}

/// Optional one-dimensional sweeps around the base point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sweeps {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Norm>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub spec: TaskSpec,
    pub k: usize,
    /// Total codebook budget for the quantized methods.
    pub bits: u32,
    #[serde(default)]
    pub sweeps: Sweeps,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: f64,
    pub data: DataSource,
    /// Separate test set; when given, `data` is used whole for training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_data: Option<DataSource>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub encode_rule: EncodeRule,
}

fn default_split() -> f64 {
    0.8
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "split must be in (0, 1), got {}",
                self.split
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidParameter("no methods requested".into()));
        }
        let empty = |name: &str| Error::InvalidParameter(format!("{name} sweep is empty"));
        if self.sweeps.p.as_ref().is_some_and(Vec::is_empty) {
            return Err(empty("p"));
        }
        if self.sweeps.k.as_ref().is_some_and(Vec::is_empty) {
            return Err(empty("k"));
        }
        if self.sweeps.bits.as_ref().is_some_and(Vec::is_empty) {
            return Err(empty("bits"));
        }
        Ok(())
    }

    /// Named sweeps, each a list of `(label, point)`. Without any sweep the
    /// base point forms a sweep called `base`.
    pub fn sweep_points(&self) -> Vec<(String, Vec<(String, Point)>)> {
        let base = Point {
            spec: self.spec,
            k: self.k,
            bits: self.bits,
        };
        let mut out = Vec::new();
        if let Some(ps) = &self.sweeps.p {
            let pts = ps
                .iter()
                .map(|&p| (p.to_string(), Point { spec: self.spec.with_p(p), ..base }))
                .collect();
            out.push(("p".to_string(), pts));
        }
        if let Some(ks) = &self.sweeps.k {
            let pts = ks.iter().map(|&k| (k.to_string(), Point { k, ..base })).collect();
            out.push(("k".to_string(), pts));
        }
        if let Some(bs) = &self.sweeps.bits {
            let pts = bs
                .iter()
                .map(|&bits| (bits.to_string(), Point { bits, ..base }))
                .collect();
            out.push(("bits".to_string(), pts));
        }
        if out.is_empty() {
            out.push(("base".to_string(), vec![("base".to_string(), base)]));
        }
        out
    }
}

/// One configuration the methods are trained and scored at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub spec: TaskSpec,
    pub k: usize,
    pub bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub sweep: String,
    pub sweep_value: String,
    pub method: Method,
    pub p: Norm,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<u32>,
    pub rsol_train: Option<f64>,
    pub rsol_test: Option<f64>,
    pub loss_trace: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Wall-clock milliseconds, excluded from the determinism hash.
    pub runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub entries: Vec<Entry>,
    /// SHA-256 of the report with runtimes zeroed and this field empty.
    pub determinism_hash: String,
}

impl Report {
    pub fn compute_hash(&self) -> String {
        let mut canon = self.clone();
        canon.determinism_hash.clear();
        for e in &mut canon.entries {
            e.runtime_ms = 0.0;
        }
        let bytes = serde_json::to_vec(&canon).expect("report serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn entry(&self, sweep: &str, value: &str, method: Method) -> Option<&Entry> {
        self.entries
            .iter()
            .find(|e| e.sweep == sweep && e.sweep_value == value && e.method == method)
    }
}

/// Trained artifacts shared between sweep points.
struct Cache<'d> {
    train: &'d Dataset,
    cfg: TrainConfig,
    klt: HashMap<usize, Precoder>,
    lt: HashMap<(String, usize), std::result::Result<LinearFit, String>>,
    nested: HashMap<(String, usize), Vec<QuantizerFit>>,
}

struct Outcome {
    model: Model,
    trace: Vec<f64>,
}

impl<'d> Cache<'d> {
    fn klt(&mut self, k: usize) -> Result<Precoder> {
        if let Some(p) = self.klt.get(&k) {
            return Ok(p.clone());
        }
        let p = klt_basis_with(self.train, k, self.cfg.centered_klt)?;
        self.klt.insert(k, p.clone());
        Ok(p)
    }

    fn lt(&mut self, pt: &Point) -> Result<LinearFit> {
        let key = (pt.spec.p.to_string(), pt.k);
        if !self.lt.contains_key(&key) {
            let fit = fit_linear_precoder(self.train, &pt.spec, pt.k, &self.cfg).map_err(|e| e.to_string());
            self.lt.insert(key.clone(), fit);
        }
        self.lt[&key].clone().map_err(Error::InvalidParameter)
    }

    fn goq(&mut self, pt: &Point, precoder: &Precoder) -> Result<QuantizerFit> {
        match self.cfg.goq_init {
            GoqInit::Random => fit_goq(self.train, precoder, &pt.spec, pt.bits, &self.cfg),
            GoqInit::Nested => {
                let key = (pt.spec.p.to_string(), pt.k);
                let have = self.nested.get(&key).map_or(0, Vec::len);
                if have < pt.bits as usize {
                    let chain = fit_goq_nested(self.train, precoder, &pt.spec, pt.bits, &self.cfg)?;
                    self.nested.insert(key.clone(), chain);
                }
                if pt.bits == 0 {
                    return fit_goq(self.train, precoder, &pt.spec, 0, &self.cfg);
                }
                Ok(self.nested[&key][pt.bits as usize - 1].clone())
            }
        }
    }

    fn run(&mut self, method: Method, pt: &Point, rule: EncodeRule) -> Result<Outcome> {
        let quantized = |precoder: Precoder, codebook: Codebook, trace| Outcome {
            model: Model::Quantized {
                precoder,
                codebook,
                rule,
            },
            trace,
        };
        Ok(match method {
            Method::Klt => Outcome {
                model: Model::Linear(self.klt(pt.k)?),
                trace: Vec::new(),
            },
            Method::Lt => {
                let fit = self.lt(pt)?;
                Outcome {
                    model: Model::Linear(fit.precoder),
                    trace: fit.trace,
                }
            }
            Method::LtGoq => {
                let precoder = self.lt(pt)?.precoder;
                let fit = self.goq(pt, &precoder)?;
                quantized(precoder, fit.codebook, fit.trace)
            }
            Method::LtLbg => {
                let precoder = self.lt(pt)?.precoder;
                let fit = fit_lbg(self.train, &precoder, pt.bits, &self.cfg)?;
                let codebook = rebind(&fit.codebook, &precoder, &pt.spec)?;
                quantized(precoder, codebook, fit.trace)
            }
            Method::LtUniform => {
                let precoder = self.lt(pt)?.precoder;
                let codebook = uniform_scalar_quantizer(self.train, &precoder, &pt.spec, pt.bits)?;
                quantized(precoder, codebook, Vec::new())
            }
            Method::Iterative => {
                let state = fit_iterative(self.train, &pt.spec, pt.k, pt.bits, &self.cfg)?;
                quantized(state.precoder, state.codebook, state.loss_trace)
            }
        })
    }
}

/// Loads the data, splits it, and trains and scores every method at every
/// sweep point. A failing method is recorded in its entry and the run goes
/// on.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let data = cfg.data.load()?;
    let (train, test) = match &cfg.test_data {
        Some(src) => (data, src.load()?),
        None => split_dataset(&data, cfg.split, cfg.seed)?,
    };
    if test.dim() != train.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            actual: test.dim(),
        });
    }
    run_on_split(cfg, &train, &test)
}

/// Same as [`run_experiment`] with the split supplied by the caller.
pub fn run_on_split(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<Report> {
    cfg.validate()?;
    let mut cache = Cache {
        train,
        cfg: TrainConfig {
            seed: cfg.seed,
            ..cfg.train.clone()
        },
        klt: HashMap::new(),
        lt: HashMap::new(),
        nested: HashMap::new(),
    };

    let mut entries = Vec::new();
    for (sweep, points) in cfg.sweep_points() {
        for (label, pt) in points {
            for &method in &cfg.methods {
                let start = Instant::now();
                let outcome = cache.run(method, &pt, cfg.encode_rule);
                let mut entry = Entry {
                    sweep: sweep.clone(),
                    sweep_value: label.clone(),
                    method,
                    p: pt.spec.p,
                    k: pt.k,
                    bits: method.is_quantized().then_some(pt.bits),
                    rsol_train: None,
                    rsol_test: None,
                    loss_trace: Vec::new(),
                    error: None,
                    runtime_ms: 0.0,
                };
                match outcome {
                    Ok(out) => {
                        entry.loss_trace = out.trace;
                        match out.model.rsol(train, &pt.spec) {
                            Ok(v) => entry.rsol_train = Some(v),
                            Err(e) => entry.error = Some(format!("train: {e}")),
                        }
                        if !test.is_empty() {
                            match out.model.rsol(test, &pt.spec) {
                                Ok(v) => entry.rsol_test = Some(v),
                                Err(e) => entry.error = Some(format!("test: {e}")),
                            }
                        }
                    }
                    Err(e) => entry.error = Some(e.to_string()),
                }
                entry.runtime_ms = start.elapsed().as_secs_f64() * 1e3;
                entries.push(entry);
            }
        }
    }

    let mut report = Report {
        config: cfg.clone(),
        seed: cfg.seed,
        train_size: train.len(),
        test_size: test.len(),
        entries,
        determinism_hash: String::new(),
    };
    report.determinism_hash = report.compute_hash();
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes `report.json` and one `sweep_<name>.csv` per sweep. Returns the
/// paths written.
pub fn emit_report(report: &Report, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let json_path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report)?;
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);

    let mut sweeps: Vec<String> = Vec::new();
    for (name, _) in report.config.sweep_points() {
        sweeps.push(name);
    }
    for name in sweeps {
        let path = dir.join(format!("sweep_{name}.csv"));
        let mut out = String::from("sweep_value,method,rsol_train,rsol_test\n");
        for e in report.entries.iter().filter(|e| e.sweep == name) {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.sweep_value,
                e.method,
                fmt_opt(e.rsol_train),
                fmt_opt(e.rsol_test)
            ));
        }
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
