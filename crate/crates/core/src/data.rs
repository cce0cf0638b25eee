//! SFRC beam dataset handling.
//!
//! Schema, CSV ingestion with header aliases, per-column diagnostics,
//! domain partition schemes, seeded train/validation/test splitting and a
//! synthetic benchmark whose response is an exact sum of mechanism terms.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const B_WIDTH: usize = 0;
pub const D_EFF: usize = 1;
pub const FC: usize = 2;
pub const A_OVER_D: usize = 3;
pub const RHO: usize = 4;
pub const DF_AGG: usize = 5;
pub const VF: usize = 6;
pub const LF_OVER_DF: usize = 7;
pub const FF: usize = 8;

/// Canonical feature column names, in column order.
pub const FEATURES: [&str; 9] = [
    "b_width",
    "d_eff",
    "fc",
    "a_over_d",
    "rho",
    "df_agg",
    "Vf",
    "lf_over_df",
    "ff",
];
pub const TARGET: &str = "Vu";

/// Accepted header spellings per canonical column (case-sensitive).
const ALIASES: [(&str, &[&str]); 10] = [
    ("b_width", &["b_width", "b", "a", "width"]),
    ("d_eff", &["d_eff", "d"]),
    ("fc", &["fc", "fc'", "f_c", "f'c"]),
    ("a_over_d", &["a_over_d", "a/d"]),
    ("rho", &["rho", "ρ"]),
    ("df_agg", &["df_agg", "d_f", "df", "dagg"]),
    ("Vf", &["Vf", "V_f", "vf"]),
    ("lf_over_df", &["lf_over_df", "lf/df", "l_f/d_f"]),
    ("ff", &["ff", "f_f"]),
    ("Vu", &["Vu", "V_u", "vu"]),
];

/// Observed min/max per feature column of the reference dataset, used to
/// bound synthetic draws.
pub const FEATURE_RANGES: [(f64, f64); 9] = [
    (120.0, 3637.87),
    (80.0, 1548.03),
    (20.6, 111.5),
    (0.47, 5.0),
    (1.0, 10.5),
    (0.5, 1.0),
    (0.22, 2.0),
    (25.0, 133.33),
    (2.17, 7.11),
];

pub fn feature_names() -> Vec<String> {
    FEATURES.iter().map(|s| s.to_string()).collect()
}

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURES.iter().position(|f| *f == name)
}

/// Column-major dataset over the fixed feature schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `columns[j][i]` is feature `FEATURES[j]` of sample `i`.
    columns: Vec<Vec<f64>>,
    target: Vec<f64>,
}

impl Dataset {
    /// Validates shape, finiteness and strict positivity.
    pub fn new(columns: Vec<Vec<f64>>, target: Vec<f64>) -> Result<Self> {
        if columns.len() != FEATURES.len() {
            return Err(Error::Input(format!(
                "expected {} feature columns, got {}",
                FEATURES.len(),
                columns.len()
            )));
        }
        let n = target.len();
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::Input(format!("column {} has {} rows, target has {n}", FEATURES[j], col.len())));
            }
        }
        let ds = Dataset { columns, target };
        if let Some((row, col, v)) = ds.first_implausible() {
            return Err(Error::Input(format!("row {row}, column {col}: physically implausible value {v}")));
        }
        Ok(ds)
    }

    fn first_implausible(&self) -> Option<(usize, &'static str, f64)> {
        for i in 0..self.n() {
            for (j, col) in self.columns.iter().enumerate() {
                if !(col[i].is_finite() && col[i] > 0.0) {
                    return Some((i, FEATURES[j], col[i]));
                }
            }
            if !(self.target[i].is_finite() && self.target[i] > 0.0) {
                return Some((i, TARGET, self.target[i]));
            }
        }
        None
    }

    pub fn n(&self) -> usize {
        self.target.len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n()).map(|i| self.row(i)).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            columns: self
                .columns
                .iter()
                .map(|c| idx.iter().map(|&i| c[i]).collect())
                .collect(),
            target: idx.iter().map(|&i| self.target[i]).collect(),
        }
    }

    /// Per-feature medians (the operating point for sensitivity analysis).
    pub fn feature_medians(&self) -> Vec<f64> {
        self.columns.iter().map(|c| quantile_type7(c, 0.5)).collect()
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = FEATURES.to_vec();
        header.push(TARGET);
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.columns.iter().map(|c| c[i].to_string()).collect();
            rec.push(self.target[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Read a dataset CSV. Headers may use canonical names or known aliases;
/// extra columns are ignored.
pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    let path = path.as_ref();
    let ingest = |message: String| Error::Ingest {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingest(e.to_string()))?;
    let headers = reader.headers().map_err(|e| ingest(e.to_string()))?.clone();

    let mut positions = Vec::with_capacity(ALIASES.len());
    for (canonical, aliases) in ALIASES {
        let pos = headers
            .iter()
            .position(|h| h == canonical)
            .or_else(|| headers.iter().position(|h| aliases.contains(&h)))
            .ok_or_else(|| ingest(format!("missing column {canonical:?}")))?;
        positions.push((canonical, pos));
    }

    let mut columns = vec![Vec::new(); FEATURES.len()];
    let mut target = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ingest(e.to_string()))?;
        let row = line + 1;
        for (slot, (name, pos)) in positions.iter().enumerate() {
            let cell = record.get(*pos).unwrap_or("");
            let value: f64 = cell
                .parse()
                .map_err(|_| ingest(format!("row {row}, column {name}: non-numeric value {cell:?}")))?;
            if !(value.is_finite() && value > 0.0) {
                return Err(ingest(format!(
                    "row {row}, column {name}: physically implausible entry {value} (must be finite and positive)"
                )));
            }
            if slot < FEATURES.len() {
                columns[slot].push(value);
            } else {
                target.push(value);
            }
        }
    }
    Dataset::new(columns, target).map_err(|e| ingest(e.to_string()))
}

/// Sample quantile by linear interpolation between order statistics
/// (`h = (n − 1) p`). Empty input yields NaN.
pub fn quantile_type7(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, p)
}

pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Descriptive statistics of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub min: f64,
    pub max: f64,
    pub range: f64,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub sd: f64,
    pub median: f64,
    /// Adjusted Fisher–Pearson skewness; 0 for constant data.
    pub skewness: f64,
    /// Percentage of values outside Tukey's 1.5×IQR fences.
    pub pct_tukey_outliers: f64,
}

pub fn column_stats(values: &[f64]) -> ColumnStats {
    let n = values.len();
    let nf = n as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let min = sorted[0];
    let max = sorted[n - 1];
    let mean = values.iter().sum::<f64>() / nf;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / nf;
    let sd = if n > 1 { (m2 * nf / (nf - 1.0)).sqrt() } else { 0.0 };
    let skewness = if m2 > 0.0 && n > 2 {
        let g1 = m3 / m2.powf(1.5);
        g1 * (nf * (nf - 1.0)).sqrt() / (nf - 2.0)
    } else {
        0.0
    };
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let outliers = values.iter().filter(|v| **v < lo || **v > hi).count();
    ColumnStats {
        min,
        max,
        range: max - min,
        mean,
        sd,
        median: quantile_sorted(&sorted, 0.5),
        skewness,
        pct_tukey_outliers: 100.0 * outliers as f64 / nf,
    }
}

/// Statistics for every feature column and the target, keyed by name.
pub fn diagnostics(ds: &Dataset) -> Result<Vec<(String, ColumnStats)>> {
    if ds.n() < 4 {
        return Err(Error::Input(format!("diagnostics need at least 4 rows, got {}", ds.n())));
    }
    let mut out: Vec<(String, ColumnStats)> = FEATURES
        .iter()
        .zip(ds.columns())
        .map(|(name, col)| (name.to_string(), column_stats(col)))
        .collect();
    out.push((TARGET.to_string(), column_stats(ds.target())));
    Ok(out)
}

/// Named groups of feature columns, one population per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionScheme {
    pub name: String,
    /// Group name → canonical column names. Groups may overlap.
    pub groups: BTreeMap<String, Vec<String>>,
}

pub const FIBER_GROUP: &str = "fiber_geometry";
pub const CONCRETE_GROUP: &str = "concrete_geometry";
pub const STEEL_GROUP: &str = "steel_geometry";

impl PartitionScheme {
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Config(format!("partition scheme {:?} has no groups", self.name)));
        }
        for (group, cols) in &self.groups {
            if cols.is_empty() {
                return Err(Error::Config(format!("partition group {group:?} is empty")));
            }
            for c in cols {
                if feature_index(c).is_none() {
                    return Err(Error::Config(format!("partition group {group:?} references unknown column {c:?}")));
                }
            }
        }
        Ok(())
    }

    /// Groups with their raw column indices, in name order.
    pub fn group_indices(&self) -> Vec<(String, Vec<usize>)> {
        self.groups
            .iter()
            .map(|(g, cols)| {
                (
                    g.clone(),
                    cols.iter().map(|c| feature_index(c).expect("validated column")).collect(),
                )
            })
            .collect()
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "full" | "default" => Ok(default_partitions()),
            "minimal" => Ok(minimal_partitions()),
            "all" | "single" => Ok(single_partition()),
            other => Err(Error::Config(format!("unknown partition scheme {other:?}"))),
        }
    }
}

fn scheme(name: &str, groups: &[(&str, &[&str])]) -> PartitionScheme {
    PartitionScheme {
        name: name.to_string(),
        groups: groups
            .iter()
            .map(|(g, cols)| (g.to_string(), cols.iter().map(|c| c.to_string()).collect()))
            .collect(),
    }
}

/// Fiber, concrete and steel mechanisms, each with the geometry columns.
pub fn default_partitions() -> PartitionScheme {
    scheme(
        "full",
        &[
            (FIBER_GROUP, &["Vf", "lf_over_df", "a_over_d", "b_width", "d_eff"]),
            (CONCRETE_GROUP, &["fc", "df_agg", "a_over_d", "d_eff"]),
            (STEEL_GROUP, &["rho", "b_width", "d_eff", "a_over_d"]),
        ],
    )
}

/// One driver variable per mechanism plus the shear-span ratio.
pub fn minimal_partitions() -> PartitionScheme {
    scheme(
        "minimal",
        &[
            (CONCRETE_GROUP, &["fc", "a_over_d"]),
            (STEEL_GROUP, &["rho", "a_over_d"]),
            (FIBER_GROUP, &["Vf", "a_over_d"]),
        ],
    )
}

/// Undivided feature set (single-population baseline).
pub fn single_partition() -> PartitionScheme {
    PartitionScheme {
        name: "all".to_string(),
        groups: BTreeMap::from([("all".to_string(), feature_names())]),
    }
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let s = SplitSpec { train, val, test, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn with_seed(seed: u64) -> Self {
        SplitSpec {
            train: 0.65,
            val: 0.10,
            test: 0.25,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "split fractions must be in [0,1] and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// Floor allocation for validation and test; remainder goes to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = (self.val * n as f64).floor() as usize;
        let test = (self.test * n as f64).floor() as usize;
        (n - val - test, val, test)
    }
}

/// Row indices of a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    if n < 10 {
        return Err(Error::Input(format!("splitting needs at least 10 rows, got {n}")));
    }
    let (n_train, n_val, _) = spec.sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, val, test })
}

/// Seeded (train, validation, test) datasets.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let idx = split_indices(ds.n(), spec)?;
    Ok((ds.subset(&idx.train), ds.subset(&idx.val), ds.subset(&idx.test)))
}

/// Concrete contribution of the synthetic benchmark:
/// `0.5·fc / ((4 + 0.05·fc)·(1 + 0.05·a/d))`.
/// The only term that depends on the shear-span ratio.
pub fn synth_concrete_term(row: &[f64]) -> f64 {
    0.5 * row[FC] / ((4.0 + 0.05 * row[FC]) * (1.0 + 0.05 * row[A_OVER_D]))
}

/// Steel contribution: `2·ρ / (2 + ρ)`.
pub fn synth_steel_term(row: &[f64]) -> f64 {
    2.0 * row[RHO] / (2.0 + row[RHO])
}

/// Fiber contribution: `Vf·(lf/df) / (20 + 0.1·Vf·(lf/df))`.
pub fn synth_fiber_term(row: &[f64]) -> f64 {
    let index = row[VF] * row[LF_OVER_DF];
    index / (20.0 + 0.1 * index)
}

/// Noise-free synthetic response.
pub fn synth_ground_truth(row: &[f64]) -> f64 {
    synth_concrete_term(row) + synth_steel_term(row) + synth_fiber_term(row)
}

/// Responses are floored here so the synthetic data stays within the
/// strictly-positive schema even under large noise.
pub const SYNTH_MIN_RESPONSE: f64 = 0.05;

/// Default noise SD of the synthetic benchmark (kN).
pub const SYNTH_DEFAULT_NOISE_SD: f64 = 0.3;

/// Synthetic superposition benchmark: features uniform over the reference
/// ranges; `Vu` = concrete + steel + fiber terms + Gaussian noise.
/// `b_width`, `d_eff`, `df_agg` and `ff` are drawn but do not influence the
/// response.
pub fn synth_superposition(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::Config(format!("noise_sd must be finite and >= 0, got {noise_sd}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd).expect("validated sd");
    let mut columns = vec![Vec::with_capacity(n); FEATURES.len()];
    let mut target = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = FEATURE_RANGES
            .iter()
            .map(|&(lo, hi)| rng.random_range(lo..=hi))
            .collect();
        let y = synth_ground_truth(&row) + noise.sample(&mut rng);
        for (c, v) in columns.iter_mut().zip(&row) {
            c.push(*v);
        }
        target.push(y.max(SYNTH_MIN_RESPONSE));
    }
    Dataset::new(columns, target)
}
