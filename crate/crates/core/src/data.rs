//! Adult census ingestion, feature encoding and device partitioning.
//!
//! Rows are shuffled with the partition seed, the first `n · m_total` are
//! dealt out to devices in contiguous blocks, and each device splits its
//! block into train / test / validation. Encoding statistics (z-score moments
//! and category vocabularies) come from the pooled training splits only and
//! are then applied to every split.

use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::Example;
use crate::streams;

/// Column names of the Adult file, in order.
pub const ADULT_COLUMNS: [&str; 15] = [
    "age",
    "workclass",
    "fnlwgt",
    "education",
    "education-num",
    "marital-status",
    "occupation",
    "relationship",
    "race",
    "sex",
    "capital-gain",
    "capital-loss",
    "hours-per-week",
    "native-country",
    "income",
];

const NUMERIC: [usize; 6] = [0, 2, 4, 10, 11, 12];
const CATEGORICAL: [usize; 8] = [1, 3, 5, 6, 7, 8, 9, 13];

/// Category used for `?` and empty categorical fields.
pub const MISSING: &str = "missing";

/// One parsed Adult record.
#[derive(Debug, Clone, PartialEq)]
pub struct AdultRow {
    pub numeric: [f64; 6],
    pub categorical: [String; 8],
    /// 1 iff income is `>50K`.
    pub label: usize,
}

pub fn numeric_columns() -> impl Iterator<Item = &'static str> {
    NUMERIC.iter().map(|&c| ADULT_COLUMNS[c])
}

pub fn categorical_columns() -> impl Iterator<Item = &'static str> {
    CATEGORICAL.iter().map(|&c| ADULT_COLUMNS[c])
}

/// Reads an Adult CSV file (optional header, `?` for missing values).
pub fn load_adult(path: impl AsRef<Path>) -> Result<Vec<AdultRow>> {
    let file = std::fs::File::open(path.as_ref())?;
    parse_adult(file)
}

/// [`load_adult`] over any reader.
pub fn parse_adult<R: Read>(reader: R) -> Result<Vec<AdultRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    while rdr.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if first {
            first = false;
            if record.get(0).is_some_and(|f| f.eq_ignore_ascii_case("age")) {
                if record.len() != ADULT_COLUMNS.len() {
                    return Err(Error::Schema(format!(
                        "header has {} columns, expected {}",
                        record.len(),
                        ADULT_COLUMNS.len()
                    )));
                }
                continue;
            }
        }
        rows.push(parse_row(&record, line)?);
    }
    Ok(rows)
}

fn parse_row(record: &csv::StringRecord, line: u64) -> Result<AdultRow> {
    if record.len() != ADULT_COLUMNS.len() {
        return Err(Error::Schema(format!(
            "line {line}: {} fields, expected {}",
            record.len(),
            ADULT_COLUMNS.len()
        )));
    }
    let mut numeric = [0.0; 6];
    for (slot, &col) in numeric.iter_mut().zip(&NUMERIC) {
        let raw = &record[col];
        *slot = raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
            line,
            message: format!("{} is not a number: {raw:?}", ADULT_COLUMNS[col]),
        })?;
    }
    let categorical = CATEGORICAL.map(|col| match &record[col] {
        "" | "?" => MISSING.to_string(),
        v => v.to_string(),
    });
    let income = record[14].trim_end_matches('.');
    let label = match income {
        ">50K" => 1,
        "<=50K" => 0,
        other => {
            return Err(Error::Parse { line, message: format!("unrecognised income label {other:?}") });
        }
    };
    Ok(AdultRow { numeric, categorical, label })
}

/// Z-score statistics and one-hot vocabularies fitted on a set of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Sorted category list per categorical column.
    pub vocabularies: Vec<Vec<String>>,
}

impl Encoder {
    pub fn fit<R: std::borrow::Borrow<AdultRow>>(rows: &[R]) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("cannot fit an encoder on zero rows"));
        }
        let n = rows.len() as f64;
        let mut means = vec![0.0; NUMERIC.len()];
        for r in rows {
            for (m, v) in means.iter_mut().zip(r.borrow().numeric) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut stds = vec![0.0; NUMERIC.len()];
        for r in rows {
            for ((s, v), m) in stds.iter_mut().zip(r.borrow().numeric).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        for (k, s) in stds.iter_mut().enumerate() {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                log::warn!("column {} has zero variance; encoding it as 0", ADULT_COLUMNS[NUMERIC[k]]);
            }
        }
        let vocabularies = (0..CATEGORICAL.len())
            .map(|k| {
                let mut v: Vec<String> = rows.iter().map(|r| r.borrow().categorical[k].clone()).collect();
                v.sort();
                v.dedup();
                v
            })
            .collect();
        Ok(Encoder { means, stds, vocabularies })
    }

    pub fn feature_dim(&self) -> usize {
        self.means.len() + self.vocabularies.iter().map(Vec::len).sum::<usize>()
    }

    /// Numeric columns first, then one block of one-hot indicators per
    /// categorical column. Categories unseen at fit time encode as all zeros.
    pub fn transform(&self, row: &AdultRow) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.feature_dim());
        for ((v, m), s) in row.numeric.iter().zip(&self.means).zip(&self.stds) {
            out.push(if *s > 0.0 { (v - m) / s } else { 0.0 });
        }
        for (vocab, value) in self.vocabularies.iter().zip(&row.categorical) {
            let hit = vocab.binary_search(value).ok();
            out.extend((0..vocab.len()).map(|k| if Some(k) == hit { 1.0 } else { 0.0 }));
        }
        out
    }

    pub fn example(&self, row: &AdultRow) -> Example {
        Example::new(self.transform(row), row.label)
    }
}

/// Fits an encoder on `rows` and encodes them.
pub fn encode<R: std::borrow::Borrow<AdultRow>>(rows: &[R]) -> Result<(Encoder, Vec<Vec<f64>>)> {
    let enc = Encoder::fit(rows)?;
    let features = rows.iter().map(|r| enc.transform(r.borrow())).collect();
    log::info!("encoded {} rows into {} features", rows.len(), enc.feature_dim());
    Ok((enc, features))
}

/// Train / test / validation fractions of each device's block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub test: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, test: 0.1, val: 0.1 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.test, self.val];
        if all.iter().any(|f| !(0.0..=1.0).contains(f)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("split fractions must be in [0, 1] and sum to 1, got {all:?}")));
        }
        if self.train == 0.0 {
            return Err(invalid("train fraction must be positive"));
        }
        Ok(())
    }

    /// `(train, test, val)` sizes: floor for train and test, the rest to val.
    pub fn sizes(&self, m_total: usize) -> (usize, usize, usize) {
        let train = (self.train * m_total as f64).floor() as usize;
        let test = ((self.test * m_total as f64).floor() as usize).min(m_total - train);
        (train, test, m_total - train - test)
    }
}

/// The three splits held by one device.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeviceData {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub val: Vec<Example>,
}

/// Encoded per-device splits sharing one feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub devices: Vec<DeviceData>,
    pub feature_dim: usize,
    pub classes: usize,
    /// Present for Adult data, `None` for synthetic sets.
    pub encoding: Option<Encoder>,
}

impl EncodedDataset {
    pub fn train_union(&self) -> Vec<&Example> {
        self.devices.iter().flat_map(|d| &d.train).collect()
    }

    pub fn test_union(&self) -> Vec<&Example> {
        self.devices.iter().flat_map(|d| &d.test).collect()
    }

    pub fn val_union(&self) -> Vec<&Example> {
        self.devices.iter().flat_map(|d| &d.val).collect()
    }
}

impl fmt::Display for EncodedDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "devices      {}", self.devices.len())?;
        writeln!(f, "feature_dim  {}", self.feature_dim)?;
        writeln!(f, "classes      {}", self.classes)?;
        if let Some(enc) = &self.encoding {
            writeln!(f, "numeric      {}", numeric_columns().collect::<Vec<_>>().join(", "))?;
            for (name, vocab) in categorical_columns().zip(&enc.vocabularies) {
                writeln!(f, "categorical  {name} ({} categories)", vocab.len())?;
            }
        }
        writeln!(f, "device  train  test  val  positive_rate")?;
        for (i, d) in self.devices.iter().enumerate() {
            let pos = d.train.iter().filter(|e| e.label == 1).count() as f64 / d.train.len().max(1) as f64;
            writeln!(f, "{i:>6}  {:>5}  {:>4}  {:>3}  {pos:.4}", d.train.len(), d.test.len(), d.val.len())?;
        }
        Ok(())
    }
}

/// Shuffles, deals `n · m_total` rows to `n` devices and encodes them.
pub fn partition(rows: &[AdultRow], n: usize, m_total: usize, seed: u64) -> Result<EncodedDataset> {
    partition_with(rows, n, m_total, SplitFractions::default(), seed)
}

pub fn partition_with(
    rows: &[AdultRow],
    n: usize,
    m_total: usize,
    splits: SplitFractions,
    seed: u64,
) -> Result<EncodedDataset> {
    if n == 0 || m_total == 0 {
        return Err(invalid("device count and per-device size must be positive"));
    }
    splits.validate()?;
    let needed = n * m_total;
    if needed > rows.len() {
        return Err(Error::InsufficientRows { needed, available: rows.len() });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut streams::stream(seed, streams::PARTITION, &[]));
    if rows.len() > needed {
        log::info!("dropping {} surplus rows after shuffling", rows.len() - needed);
    }
    let (n_train, n_test, _) = splits.sizes(m_total);

    let blocks: Vec<&[usize]> = order[..needed].chunks(m_total).collect();
    let pooled_train: Vec<&AdultRow> =
        blocks.iter().flat_map(|b| b[..n_train].iter().map(|&k| &rows[k])).collect();
    let encoder = Encoder::fit(&pooled_train)?;
    log::info!("feature_dim = {}", encoder.feature_dim());

    let devices = blocks
        .iter()
        .map(|b| {
            let enc = |idx: &[usize]| idx.iter().map(|&k| encoder.example(&rows[k])).collect();
            DeviceData {
                train: enc(&b[..n_train]),
                test: enc(&b[n_train..n_train + n_test]),
                val: enc(&b[n_train + n_test..]),
            }
        })
        .collect();
    Ok(EncodedDataset { devices, feature_dim: encoder.feature_dim(), classes: 2, encoding: Some(encoder) })
}

/// Two Gaussian classes `N(±(s/2)·u, I)` along the unit diagonal `u`,
/// balanced in expectation.
pub fn synthetic(n_devices: usize, m: usize, feature_dim: usize, separability: f64, seed: u64) -> Result<EncodedDataset> {
    if n_devices == 0 || m == 0 || feature_dim == 0 {
        return Err(invalid("synthetic dataset dimensions must be positive"));
    }
    if !(separability.is_finite() && separability >= 0.0) {
        return Err(invalid(format!("separability must be nonnegative, got {separability}")));
    }
    let splits = SplitFractions::default();
    let (n_train, n_test, _) = splits.sizes(m);
    let shift = separability / 2.0 / (feature_dim as f64).sqrt();
    let devices = (0..n_devices)
        .map(|i| {
            let mut rng = streams::stream(seed, streams::SYNTHETIC, &[i as u64]);
            let mut all: Vec<Example> = (0..m)
                .map(|_| {
                    let label = usize::from(rng.random::<bool>());
                    let sign = if label == 1 { 1.0 } else { -1.0 };
                    let x = (0..feature_dim)
                        .map(|_| rng.sample::<f64, _>(StandardNormal) + sign * shift)
                        .collect();
                    Example::new(x, label)
                })
                .collect();
            let val = all.split_off(n_train + n_test);
            let test = all.split_off(n_train);
            DeviceData { train: all, test, val }
        })
        .collect();
    Ok(EncodedDataset { devices, feature_dim, classes: 2, encoding: None })
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Adult { path: PathBuf },
    Synthetic { features: usize, separability: f64 },
}

/// Everything needed to materialise an [`EncodedDataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default = "DatasetSpec::default_devices")]
    pub devices: usize,
    #[serde(default = "DatasetSpec::default_per_device")]
    pub per_device: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    pub const DEFAULT_DEVICES: usize = 16;
    pub const DEFAULT_PER_DEVICE: usize = 3052;

    fn default_devices() -> usize {
        Self::DEFAULT_DEVICES
    }

    fn default_per_device() -> usize {
        Self::DEFAULT_PER_DEVICE
    }

    pub fn adult(path: impl Into<PathBuf>) -> Self {
        DatasetSpec {
            source: DataSource::Adult { path: path.into() },
            devices: Self::DEFAULT_DEVICES,
            per_device: Self::DEFAULT_PER_DEVICE,
            seed: 0,
        }
    }

    pub fn load(&self) -> Result<EncodedDataset> {
        match &self.source {
            DataSource::Adult { path } => {
                let rows = load_adult(path)?;
                partition(&rows, self.devices, self.per_device, self.seed)
            }
            DataSource::Synthetic { features, separability } => {
                synthetic(self.devices, self.per_device, *features, *separability, self.seed)
            }
        }
    }
}
