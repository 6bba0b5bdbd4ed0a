use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Reads one daily profile per row. A first row with no numeric cell is
/// taken as a header. Row numbers in errors are 1-based file lines.
pub fn load_profiles_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_profiles(file)
}

pub fn read_profiles(reader: impl std::io::Read) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(idx + 1, |p| p.line() as usize);
        if idx == 0 && record.iter().all(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::Row {
                row: line,
                message: format!("expected {expected} columns, got {}", record.len()),
            });
        }
        let mut row = Vec::with_capacity(expected);
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Row {
                row: line,
                message: format!("column {}: not a number: {cell:?}", col + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Row {
                    row: line,
                    message: format!("column {}: non-finite value", col + 1),
                });
            }
            if v < 0.0 {
                return Err(Error::Row {
                    row: line,
                    message: format!("column {}: negative load {v}", col + 1),
                });
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Empty("profile file"));
    }
    Dataset::from_rows(&rows)
}

/// Writes profiles as headerless CSV with shortest round-trip formatting.
pub fn write_profiles_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in data.rows() {
        let line = row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Synthetic household profiles: a flat base load plus a morning and an
/// evening Gaussian bump, each with its own random center and amplitude,
/// plus white noise, clamped at zero. Times are in hours over one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub base: (f64, f64),
    pub morning_center: (f64, f64),
    pub morning_amplitude: (f64, f64),
    pub morning_width: f64,
    pub evening_center: (f64, f64),
    pub evening_amplitude: (f64, f64),
    pub evening_width: f64,
    pub noise_std: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            base: (0.15, 0.5),
            morning_center: (6.5, 9.0),
            morning_amplitude: (0.2, 1.2),
            morning_width: 1.2,
            evening_center: (17.0, 20.5),
            evening_amplitude: (0.5, 2.5),
            evening_width: 1.8,
            noise_std: 0.05,
        }
    }
}

impl SyntheticParams {
    fn validate(&self) -> Result<()> {
        let ranges = [
            ("base", self.base),
            ("morning_center", self.morning_center),
            ("morning_amplitude", self.morning_amplitude),
            ("evening_center", self.evening_center),
            ("evening_amplitude", self.evening_amplitude),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidParameter(format!("{name}: bad range ({lo}, {hi})")));
            }
        }
        if self.base.0 < 0.0 || self.morning_amplitude.0 < 0.0 || self.evening_amplitude.0 < 0.0 {
            return Err(Error::InvalidParameter("loads and amplitudes must be >= 0".into()));
        }
        for (name, v) in [
            ("morning_width", self.morning_width),
            ("evening_width", self.evening_width),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0")));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidParameter("noise_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Bounds that every generated profile's mean falls in with
    /// overwhelming probability for length `n`. The bump term uses the
    /// Riemann-sum bound `sum f(t_j) dt <= integral + dt * max f`, and
    /// the noise term allows six standard errors plus the clamping bias.
    pub fn mean_envelope(&self, n: usize) -> (f64, f64) {
        let dt = 24.0 / n as f64;
        let root_2pi = (2.0 * std::f64::consts::PI).sqrt();
        let bump = |amp: f64, width: f64| amp * (width * root_2pi + dt) / 24.0;
        let noise = 6.0 * self.noise_std / (n as f64).sqrt();
        let clamp_bias = self.noise_std / root_2pi;
        let lo = self.base.0 - noise;
        let hi = self.base.1
            + bump(self.morning_amplitude.1, self.morning_width)
            + bump(self.evening_amplitude.1, self.evening_width)
            + noise
            + clamp_bias;
        (lo, hi)
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// `t` profiles of length `n`, slot `j` sampled at hour `(j + 0.5) * 24 / n`.
pub fn gen_synthetic(t: usize, n: usize, seed: u64, params: &SyntheticParams) -> Result<Dataset> {
    if t == 0 || n == 0 {
        return Err(Error::InvalidParameter("T and N must be >= 1".into()));
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(t * n);
    for _ in 0..t {
        let base = uniform(&mut rng, params.base);
        let mc = uniform(&mut rng, params.morning_center);
        let ma = uniform(&mut rng, params.morning_amplitude);
        let ec = uniform(&mut rng, params.evening_center);
        let ea = uniform(&mut rng, params.evening_amplitude);
        for j in 0..n {
            let hour = (j as f64 + 0.5) * 24.0 / n as f64;
            let bump = |center: f64, width: f64| {
                let z = (hour - center) / width;
                (-0.5 * z * z).exp()
            };
            let noise: f64 = if params.noise_std > 0.0 {
                params.noise_std * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let v = base
                + ma * bump(mc, params.morning_width)
                + ea * bump(ec, params.evening_width)
                + noise;
            values.push(v.max(0.0));
        }
    }
    Dataset::from_flat(n, values)
}

/// Seeded shuffle; the first `ceil(fraction * T)` rows train, the rest test.
pub fn split_dataset(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((fraction * data.len() as f64).ceil() as usize).min(data.len());
    Ok((data.subset(&order[..cut]), data.subset(&order[cut..])))
}
