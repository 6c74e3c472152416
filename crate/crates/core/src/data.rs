//! Spike-count tensor data model, portable CSV/JSON file formats, and the
//! synthetic-data generator.
//!
//! On disk a dataset is a pair of CSV files. The counts file is dense long
//! format with header `condition,trial,neuron,bin,count` (all indices
//! zero-based; every cell of every trial present). The conditions file has
//! header `condition,coord_0,…,coord_{C-1}` with one row per condition; float
//! coordinates are written in shortest round-trip decimal notation, exact to
//! re-parse. Synthetic datasets carry a ground-truth JSON sidecar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal, Poisson, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{factorize, se_gram, unit_grid, SeKernelParams};
use crate::linalg;

/// Count likelihood family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    #[default]
    NegBinomial,
    Binomial,
}

/// Observed spike counts over conditions, repeated trials, neurons, and time
/// bins, plus the coordinates of each condition in the experiment's parameter
/// space. Trials may differ in number across conditions but every trial
/// shares the neuron count and bin count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeTensor {
    /// Per condition: (trials, neurons, bins).
    counts: Vec<Array3<u32>>,
    /// Bin width in seconds (metadata only).
    pub bin_width: f64,
    /// M×C condition coordinates.
    pub condition_coords: Array2<f64>,
    /// Optional per-(condition, trial, neuron) observation mask; `true` means
    /// observed. `None` means fully observed. Not persisted to CSV.
    #[serde(skip)]
    mask: Option<Vec<Array2<bool>>>,
}

impl SpikeTensor {
    pub fn new(
        counts: Vec<Array3<u32>>,
        bin_width: f64,
        condition_coords: Array2<f64>,
    ) -> Result<Self> {
        let tensor = SpikeTensor {
            counts,
            bin_width,
            condition_coords,
            mask: None,
        };
        tensor.validate()?;
        Ok(tensor)
    }

    fn validate(&self) -> Result<()> {
        if self.counts.is_empty() {
            return Err(Error::invalid("no observations"));
        }
        if self.condition_coords.nrows() != self.counts.len() {
            return Err(Error::invalid(format!(
                "{} conditions in counts but {} coordinate rows",
                self.counts.len(),
                self.condition_coords.nrows()
            )));
        }
        let (_, n, t) = self.counts[0].dim();
        for (m, block) in self.counts.iter().enumerate() {
            let (r_m, n_m, t_m) = block.dim();
            if r_m == 0 {
                return Err(Error::invalid(format!("condition {m} has no trials")));
            }
            if n_m != n || t_m != t {
                return Err(Error::invalid(format!(
                    "condition {m} has shape ({n_m},{t_m}), expected ({n},{t})"
                )));
            }
        }
        if self.condition_coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("condition coordinates must be finite"));
        }
        if let Some(mask) = &self.mask {
            if mask.len() != self.counts.len() {
                return Err(Error::invalid("mask length does not match conditions"));
            }
            for (m, mk) in mask.iter().enumerate() {
                if mk.dim() != (self.counts[m].dim().0, n) {
                    return Err(Error::invalid(format!(
                        "mask shape mismatch at condition {m}"
                    )));
                }
            }
        }
        if self.has_duplicate_conditions() {
            log::warn!("condition coordinate matrix contains duplicate rows");
        }
        Ok(())
    }

    pub fn n_conditions(&self) -> usize {
        self.counts.len()
    }

    pub fn n_neurons(&self) -> usize {
        self.counts[0].dim().1
    }

    pub fn n_bins(&self) -> usize {
        self.counts[0].dim().2
    }

    pub fn n_trials(&self, condition: usize) -> usize {
        self.counts[condition].dim().0
    }

    pub fn total_trials(&self) -> usize {
        self.counts.iter().map(|c| c.dim().0).sum()
    }

    pub fn condition_dim(&self) -> usize {
        self.condition_coords.ncols()
    }

    pub fn counts(&self, condition: usize) -> &Array3<u32> {
        &self.counts[condition]
    }

    /// Whether (condition, trial, neuron) carries observed data.
    pub fn observed(&self, condition: usize, trial: usize, neuron: usize) -> bool {
        match &self.mask {
            Some(mask) => mask[condition][[trial, neuron]],
            None => true,
        }
    }

    pub fn set_mask(&mut self, mask: Option<Vec<Array2<bool>>>) -> Result<()> {
        self.mask = mask;
        self.validate()
    }

    /// Duplicate condition rows are permitted (repeated measurements of one
    /// condition) but worth surfacing.
    pub fn has_duplicate_conditions(&self) -> bool {
        let m = self.condition_coords.nrows();
        for i in 0..m {
            for j in (i + 1)..m {
                if self
                    .condition_coords
                    .row(i)
                    .iter()
                    .zip(self.condition_coords.row(j).iter())
                    .all(|(a, b)| a == b)
                {
                    return true;
                }
            }
        }
        false
    }

    /// New tensor containing only the listed conditions (in the given order).
    pub fn subset_conditions(&self, keep: &[usize]) -> Result<SpikeTensor> {
        let mut counts = Vec::with_capacity(keep.len());
        let mut coords = Array2::zeros((keep.len(), self.condition_dim()));
        for (row, &m) in keep.iter().enumerate() {
            if m >= self.n_conditions() {
                return Err(Error::invalid(format!("condition index {m} out of range")));
            }
            counts.push(self.counts[m].clone());
            coords.row_mut(row).assign(&self.condition_coords.row(m));
        }
        SpikeTensor::new(counts, self.bin_width, coords)
    }

    /// New tensor keeping, per condition, only the listed trials.
    pub fn select_trials(&self, keep: &[Vec<usize>]) -> Result<SpikeTensor> {
        if keep.len() != self.n_conditions() {
            return Err(Error::invalid("trial selection must cover every condition"));
        }
        let (n, t) = (self.n_neurons(), self.n_bins());
        let mut counts = Vec::with_capacity(keep.len());
        for (m, trials) in keep.iter().enumerate() {
            if trials.is_empty() {
                return Err(Error::invalid(format!(
                    "trial selection leaves condition {m} empty"
                )));
            }
            let mut block = Array3::zeros((trials.len(), n, t));
            for (row, &trial) in trials.iter().enumerate() {
                if trial >= self.n_trials(m) {
                    return Err(Error::invalid(format!(
                        "trial index {trial} out of range for condition {m}"
                    )));
                }
                block
                    .index_axis_mut(ndarray::Axis(0), row)
                    .assign(&self.counts[m].index_axis(ndarray::Axis(0), trial));
            }
            counts.push(block);
        }
        SpikeTensor::new(counts, self.bin_width, self.condition_coords.clone())
    }
}

/// Write a dataset as the counts/conditions CSV pair. `load_dataset` reads the
/// files back bit-identically.
pub fn write_dataset(
    data: &SpikeTensor,
    counts_path: impl AsRef<Path>,
    conditions_path: impl AsRef<Path>,
) -> Result<()> {
    let counts_path = counts_path.as_ref();
    let conditions_path = conditions_path.as_ref();

    let file = File::create(conditions_path).map_err(|e| Error::io(conditions_path, e))?;
    let mut w = BufWriter::new(file);
    let c = data.condition_dim();
    let mut header = String::from("condition");
    for k in 0..c {
        header.push_str(&format!(",coord_{k}"));
    }
    writeln!(w, "{header}").map_err(|e| Error::io(conditions_path, e))?;
    for m in 0..data.n_conditions() {
        let mut line = m.to_string();
        for k in 0..c {
            line.push_str(&format!(",{}", data.condition_coords[[m, k]]));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(conditions_path, e))?;
    }
    w.flush().map_err(|e| Error::io(conditions_path, e))?;

    let file = File::create(counts_path).map_err(|e| Error::io(counts_path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "condition,trial,neuron,bin,count").map_err(|e| Error::io(counts_path, e))?;
    for m in 0..data.n_conditions() {
        let block = data.counts(m);
        for trial in 0..data.n_trials(m) {
            for n in 0..data.n_neurons() {
                for t in 0..data.n_bins() {
                    writeln!(w, "{m},{trial},{n},{t},{}", block[[trial, n, t]])
                        .map_err(|e| Error::io(counts_path, e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(counts_path, e))?;
    Ok(())
}

/// Load a dataset from the counts/conditions CSV pair. Counts must be dense:
/// every (condition, trial) block carries all neuron×bin cells exactly once.
pub fn load_dataset(
    counts_path: impl AsRef<Path>,
    conditions_path: impl AsRef<Path>,
) -> Result<SpikeTensor> {
    let counts_path = counts_path.as_ref();
    let conditions_path = conditions_path.as_ref();

    let coords = read_conditions(conditions_path)?;
    let m_count = coords.nrows();

    let file = File::open(counts_path).map_err(|e| Error::io(counts_path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::format(counts_path, e.to_string()))?;
        let expected = ["condition", "trial", "neuron", "bin", "count"];
        if headers.len() != 5 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::format(
                counts_path,
                format!(
                    "expected header `condition,trial,neuron,bin,count`, got `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            ));
        }
    }

    let mut rows: Vec<[usize; 4]> = Vec::new();
    let mut values: Vec<u32> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // 1-based, after header
        let record = record.map_err(|e| Error::format(counts_path, e.to_string()))?;
        if record.len() != 5 {
            return Err(Error::format(
                counts_path,
                format!("line {line}: expected 5 fields, got {}", record.len()),
            ));
        }
        let parse = |field: usize, name: &str| -> Result<usize> {
            record[field].trim().parse::<usize>().map_err(|_| {
                Error::format(
                    counts_path,
                    format!(
                        "line {line}: {name} `{}` is not a non-negative integer",
                        &record[field]
                    ),
                )
            })
        };
        let m = parse(0, "condition")?;
        let trial = parse(1, "trial")?;
        let n = parse(2, "neuron")?;
        let t = parse(3, "bin")?;
        let y = record[4].trim().parse::<u32>().map_err(|_| {
            Error::format(
                counts_path,
                format!(
                    "line {line}: count `{}` is not a non-negative integer",
                    &record[4]
                ),
            )
        })?;
        if m >= m_count {
            return Err(Error::format(
                counts_path,
                format!("line {line}: condition {m} is absent from the conditions file"),
            ));
        }
        rows.push([m, trial, n, t]);
        values.push(y);
    }
    if rows.is_empty() {
        return Err(Error::format(counts_path, "no observations"));
    }

    let n_count = rows.iter().map(|r| r[2]).max().unwrap() + 1;
    let t_count = rows.iter().map(|r| r[3]).max().unwrap() + 1;
    let mut trials = vec![0usize; m_count];
    for r in &rows {
        trials[r[0]] = trials[r[0]].max(r[1] + 1);
    }
    for (m, &r_m) in trials.iter().enumerate() {
        if r_m == 0 {
            return Err(Error::format(
                counts_path,
                format!("condition {m} has no trials in the counts file"),
            ));
        }
    }

    let mut counts: Vec<Array3<u32>> = trials
        .iter()
        .map(|&r_m| Array3::zeros((r_m, n_count, t_count)))
        .collect();
    let mut seen: Vec<Array3<bool>> = trials
        .iter()
        .map(|&r_m| Array3::from_elem((r_m, n_count, t_count), false))
        .collect();
    for (r, &y) in rows.iter().zip(values.iter()) {
        let [m, trial, n, t] = *r;
        if seen[m][[trial, n, t]] {
            return Err(Error::format(
                counts_path,
                format!("duplicate cell (condition={m}, trial={trial}, neuron={n}, bin={t})"),
            ));
        }
        seen[m][[trial, n, t]] = true;
        counts[m][[trial, n, t]] = y;
    }
    for (m, block) in seen.iter().enumerate() {
        if let Some(((trial, n, t), _)) = block.indexed_iter().find(|(_, &s)| !s) {
            return Err(Error::format(
                counts_path,
                format!(
                    "incomplete trial: (condition={m}, trial={trial}) is missing cell \
                     (neuron={n}, bin={t}); all trials must share the same neuron and bin grid"
                ),
            ));
        }
    }

    SpikeTensor::new(counts, 1.0, coords)
}

fn read_conditions(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let c = {
        let headers = reader
            .headers()
            .map_err(|e| Error::format(path, e.to_string()))?;
        if headers.len() < 2 || &headers[0] != "condition" {
            return Err(Error::format(path, "expected header `condition,coord_0,...`"));
        }
        headers.len() - 1
    };
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        if record.len() != c + 1 {
            return Err(Error::format(
                path,
                format!("line {line}: expected {} fields, got {}", c + 1, record.len()),
            ));
        }
        let m = record[0].trim().parse::<usize>().map_err(|_| {
            Error::format(path, format!("line {line}: bad condition id `{}`", &record[0]))
        })?;
        let mut coords = Vec::with_capacity(c);
        for k in 0..c {
            let v = record[k + 1].trim().parse::<f64>().map_err(|_| {
                Error::format(
                    path,
                    format!("line {line}: bad coordinate `{}`", &record[k + 1]),
                )
            })?;
            coords.push(v);
        }
        rows.push((m, coords));
    }
    if rows.is_empty() {
        return Err(Error::format(path, "no conditions"));
    }
    let m_count = rows.iter().map(|(m, _)| *m).max().unwrap() + 1;
    if rows.len() != m_count {
        return Err(Error::format(path, "condition ids must be dense and zero-based"));
    }
    let mut coords = Array2::from_elem((m_count, c), f64::NAN);
    for (m, row) in rows {
        for (k, v) in row.into_iter().enumerate() {
            coords[[m, k]] = v;
        }
    }
    if coords.iter().any(|v| v.is_nan()) {
        return Err(Error::format(path, "duplicate or missing condition rows"));
    }
    Ok(coords)
}

/// Configuration of the synthetic generator.
///
/// Conditions are laid out on an even grid over [0,1]^C; latent processes are
/// zero-mean GPs over T even time bins on [0,1]; per neuron the M×D weight
/// matrix has squared-exponential row covariance over conditions and
/// independent columns; biases are Gaussian; dispersions are uniform on
/// `dispersion_range`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerativeSpec {
    pub conditions: usize,
    pub neurons: usize,
    pub time_bins: usize,
    pub latent_dims: usize,
    #[serde(default = "default_condition_dim")]
    pub condition_dim: usize,
    /// One per latent dimension (length `latent_dims`).
    pub time_lengthscales: Vec<f64>,
    /// One per condition-space axis (length `condition_dim`).
    pub condition_lengthscales: Vec<f64>,
    /// Dispersions drawn uniformly from (lo, hi].
    pub dispersion_range: (f64, f64),
    pub trials_per_condition: usize,
    /// β_n ~ Normal(bias_mean, bias_scale²).
    #[serde(default)]
    pub bias_mean: f64,
    #[serde(default = "default_unit")]
    pub bias_scale: f64,
    /// Scale multiplying the unit-column-covariance weight draws.
    #[serde(default = "default_unit")]
    pub weight_scale: f64,
    #[serde(default = "default_unit")]
    pub bin_width: f64,
    pub seed: u64,
    #[serde(default)]
    pub likelihood: Likelihood,
    /// Bernoulli trial count per neuron for the binomial likelihood.
    #[serde(default = "default_binomial_trials")]
    pub binomial_trials: u32,
}

fn default_condition_dim() -> usize {
    1
}
fn default_unit() -> f64 {
    1.0
}
fn default_binomial_trials() -> u32 {
    8
}

impl GenerativeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dims < 1 {
            return Err(Error::invalid("latent_dims must be at least 1"));
        }
        if self.conditions == 0 || self.neurons == 0 || self.time_bins == 0 {
            return Err(Error::invalid(
                "conditions, neurons, time_bins must be positive",
            ));
        }
        if self.trials_per_condition == 0 {
            return Err(Error::invalid("trials_per_condition must be positive"));
        }
        if self.time_lengthscales.len() != self.latent_dims {
            return Err(Error::invalid(format!(
                "need {} time lengthscales, got {}",
                self.latent_dims,
                self.time_lengthscales.len()
            )));
        }
        if self.condition_lengthscales.len() != self.condition_dim {
            return Err(Error::invalid(format!(
                "need {} condition lengthscales, got {}",
                self.condition_dim,
                self.condition_lengthscales.len()
            )));
        }
        for &l in self
            .time_lengthscales
            .iter()
            .chain(self.condition_lengthscales.iter())
        {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::invalid("lengthscales must be positive"));
            }
        }
        let (lo, hi) = self.dispersion_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi > lo) {
            return Err(Error::invalid("dispersion_range must satisfy 0 ≤ lo < hi"));
        }
        if self.likelihood == Likelihood::Binomial && self.binomial_trials == 0 {
            return Err(Error::invalid("binomial_trials must be positive"));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let spec: GenerativeSpec = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::format(path, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// True parameters behind a synthetic dataset. `dispersions` holds r_n for
/// the negative-binomial likelihood and the Bernoulli trial count k_n for the
/// binomial one; `rates` is the per-bin expected count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    /// D×T latent processes.
    #[serde(rename = "X")]
    pub latents: Array2<f64>,
    /// M×N×D loading weights.
    #[serde(rename = "W")]
    pub weights: Array3<f64>,
    /// Per-neuron biases.
    #[serde(rename = "beta")]
    pub biases: Array1<f64>,
    #[serde(rename = "r")]
    pub dispersions: Array1<f64>,
    /// M×N×T expected counts.
    pub rates: Array3<f64>,
    #[serde(default)]
    pub likelihood: Likelihood,
}

impl GroundTruth {
    /// Linear predictor F = β_n + Σ_d W_{m,n,d} X_{d,t}.
    pub fn linear_predictor(&self) -> Array3<f64> {
        let (m_count, n_count, d_count) = self.weights.dim();
        let t_count = self.latents.ncols();
        let mut f = Array3::zeros((m_count, n_count, t_count));
        for m in 0..m_count {
            for n in 0..n_count {
                for t in 0..t_count {
                    let mut v = self.biases[n];
                    for d in 0..d_count {
                        v += self.weights[[m, n, d]] * self.latents[[d, t]];
                    }
                    f[[m, n, t]] = v;
                }
            }
        }
        f
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Even grid over [0,1]^C with M points. For C > 1, M must be a perfect C-th
/// power so the grid is a full Cartesian product.
pub fn condition_grid(m: usize, c: usize) -> Result<Array2<f64>> {
    if c == 1 {
        return Ok(unit_grid(m));
    }
    let per_axis = (m as f64).powf(1.0 / c as f64).round() as usize;
    if per_axis.pow(c as u32) != m {
        return Err(Error::invalid(format!(
            "{m} conditions cannot form an even grid over {c} dimensions"
        )));
    }
    let axis = unit_grid(per_axis);
    let mut coords = Array2::zeros((m, c));
    for i in 0..m {
        let mut rem = i;
        for k in (0..c).rev() {
            coords[[i, k]] = axis[[rem % per_axis, 0]];
            rem /= per_axis;
        }
    }
    Ok(coords)
}

/// Draw a synthetic dataset. Deterministic in the spec (including seed): the
/// same spec yields byte-identical files.
pub fn generate_synthetic(spec: &GenerativeSpec) -> Result<(SpikeTensor, GroundTruth)> {
    spec.validate()?;
    let (m_count, n_count, t_count, d_count) = (
        spec.conditions,
        spec.neurons,
        spec.time_bins,
        spec.latent_dims,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let coords = condition_grid(m_count, spec.condition_dim)?;
    let time_pts = unit_grid(t_count);

    // latent processes: X_d ~ N(0, K_d)
    let mut latents = Array2::zeros((d_count, t_count));
    for d in 0..d_count {
        let params = SeKernelParams::isotropic(spec.time_lengthscales[d])?;
        let grams = factorize(se_gram(time_pts.view(), time_pts.view(), &params), 1e-8)?;
        let z = Array1::from_shape_fn(t_count, |_| std_normal.sample(&mut rng));
        latents.row_mut(d).assign(&grams.chol.dot(&z));
    }

    // weights: per neuron, rows correlated over conditions, columns independent
    let cond_params = SeKernelParams::new(spec.condition_lengthscales.clone())?;
    let cond_grams = factorize(se_gram(coords.view(), coords.view(), &cond_params), 1e-8)?;
    let mut weights = Array3::zeros((m_count, n_count, d_count));
    for n in 0..n_count {
        for d in 0..d_count {
            let z = Array1::from_shape_fn(m_count, |_| std_normal.sample(&mut rng));
            let w = cond_grams.chol.dot(&z) * spec.weight_scale;
            for m in 0..m_count {
                weights[[m, n, d]] = w[m];
            }
        }
    }

    let biases = Array1::from_shape_fn(n_count, |_| {
        spec.bias_mean + spec.bias_scale * std_normal.sample(&mut rng)
    });

    // dispersions uniform on (lo, hi]: flip the half-open side of the sampler
    let (lo, hi) = spec.dispersion_range;
    let unif = Uniform::new(0.0f64, 1.0).expect("unit range");
    let dispersions = Array1::from_shape_fn(n_count, |_| hi - (hi - lo) * unif.sample(&mut rng));

    let truth_partial = GroundTruth {
        latents,
        weights,
        biases,
        dispersions: dispersions.clone(),
        rates: Array3::zeros((m_count, n_count, t_count)),
        likelihood: spec.likelihood,
    };
    let f = truth_partial.linear_predictor();

    let mut rates = Array3::zeros((m_count, n_count, t_count));
    let mut counts: Vec<Array3<u32>> = Vec::with_capacity(m_count);
    let k_n = spec.binomial_trials;
    for m in 0..m_count {
        let mut block = Array3::zeros((spec.trials_per_condition, n_count, t_count));
        for trial in 0..spec.trials_per_condition {
            for n in 0..n_count {
                for t in 0..t_count {
                    let fv = f[[m, n, t]];
                    let y = match spec.likelihood {
                        Likelihood::NegBinomial => {
                            // Gamma–Poisson mixture: Gamma(r, scale e^F) rate
                            // into a Poisson; exact NB with success prob σ(F)
                            let r = dispersions[n];
                            let gamma = Gamma::new(r, fv.exp())
                                .map_err(|e| Error::numerical(format!("gamma sampler: {e}")))?;
                            let lambda: f64 = gamma.sample(&mut rng);
                            if lambda > 0.0 {
                                let pois = Poisson::new(lambda).map_err(|e| {
                                    Error::numerical(format!("poisson sampler: {e}"))
                                })?;
                                pois.sample(&mut rng) as u64
                            } else {
                                0
                            }
                        }
                        Likelihood::Binomial => {
                            let p = crate::special::sigmoid(fv);
                            Binomial::new(k_n as u64, p)
                                .map_err(|e| Error::numerical(format!("binomial sampler: {e}")))?
                                .sample(&mut rng)
                        }
                    };
                    block[[trial, n, t]] = u32::try_from(y).map_err(|_| {
                        Error::numerical("sampled count exceeds u32 range".to_string())
                    })?;
                    if trial == 0 {
                        rates[[m, n, t]] = match spec.likelihood {
                            Likelihood::NegBinomial => dispersions[n] * fv.exp(),
                            Likelihood::Binomial => k_n as f64 * crate::special::sigmoid(fv),
                        };
                    }
                }
            }
        }
        counts.push(block);
    }

    let truth = GroundTruth {
        rates,
        dispersions: match spec.likelihood {
            Likelihood::NegBinomial => dispersions,
            Likelihood::Binomial => Array1::from_elem(n_count, k_n as f64),
        },
        ..truth_partial
    };
    let tensor = SpikeTensor::new(counts, spec.bin_width, coords)?;
    Ok((tensor, truth))
}

/// Multivariate normal draw: mean + L·z with L the lower Cholesky factor of
/// the covariance. Shared by initialization and by sampling-based test
/// oracles.
pub fn gaussian_draw(
    mean: ndarray::ArrayView1<f64>,
    cov: ndarray::ArrayView2<f64>,
    rng: &mut impl rand::Rng,
) -> Result<Array1<f64>> {
    let l = linalg::cholesky(cov)
        .or_else(|| {
            let mut shifted = cov.to_owned();
            for i in 0..shifted.nrows() {
                shifted[[i, i]] += 1e-10;
            }
            linalg::cholesky(shifted.view())
        })
        .ok_or_else(|| Error::numerical("covariance not PSD for sampling"))?;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let z = Array1::from_shape_fn(mean.len(), |_| std_normal.sample(rng));
    Ok(&mean + &l.dot(&z))
}
