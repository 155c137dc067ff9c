//! Loading, encoding, splitting and normalizing schema-described CSV data.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NeuralModel;
use crate::schema::{ColumnKind, DatasetKind, FeatureSchema};

/// Tokens treated as missing values. Missing data is rejected at load.
const MISSING_TOKENS: &[&str] = &["", "?", "NA", "NaN", "nan", "null"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedColumn {
    pub name: String,
    pub kind: ColumnKind,
    /// Encoded indices; one per category for categorical columns.
    pub indices: Vec<usize>,
    /// Category labels aligned with `indices` (categorical), or the two
    /// labels mapped to 0 and 1 (binary). Empty for numeric columns.
    pub labels: Vec<String>,
}

/// Raw column to encoded column mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingMap {
    pub columns: Vec<EncodedColumn>,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RawValue {
    Number(f64),
    Label(String),
}

impl EncodingMap {
    pub fn from_schema(schema: &FeatureSchema) -> Self {
        let mut width = 0;
        let mut columns = Vec::new();
        for spec in schema.feature_columns() {
            let (labels, n) = match spec.kind {
                ColumnKind::Numeric => (Vec::new(), 1),
                ColumnKind::Binary => (spec.binary_labels().to_vec(), 1),
                ColumnKind::Categorical => {
                    let cats = spec.categories.clone().unwrap_or_default();
                    let n = cats.len();
                    (cats, n)
                }
            };
            columns.push(EncodedColumn {
                name: spec.name.clone(),
                kind: spec.kind,
                indices: (width..width + n).collect(),
                labels,
            });
            width += n;
        }
        Self { columns, width }
    }

    pub fn column(&self, name: &str) -> Option<&EncodedColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Index sets of the one-hot groups (categorical columns).
    pub fn ohe_groups(&self) -> impl Iterator<Item = &[usize]> {
        self.columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Categorical)
            .map(|c| c.indices.as_slice())
    }

    pub fn binary_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Binary)
            .map(|c| c.indices[0])
    }

    pub fn numeric_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Numeric)
            .map(|c| c.indices[0])
    }

    /// Kind of the raw column that owns each encoded index.
    pub fn index_kinds(&self) -> Vec<ColumnKind> {
        let mut kinds = vec![ColumnKind::Numeric; self.width];
        for col in &self.columns {
            for &i in &col.indices {
                kinds[i] = col.kind;
            }
        }
        kinds
    }

    pub fn encode_row(&self, raw: &[RawValue]) -> Result<Vec<f64>> {
        if raw.len() != self.columns.len() {
            return Err(Error::WidthMismatch {
                expected: self.columns.len(),
                actual: raw.len(),
            });
        }
        let mut out = vec![0.0; self.width];
        for (col, value) in self.columns.iter().zip(raw) {
            match (col.kind, value) {
                (ColumnKind::Numeric, RawValue::Number(v)) => out[col.indices[0]] = *v,
                (ColumnKind::Binary, RawValue::Label(l)) => {
                    out[col.indices[0]] = binary_code(&col.labels, l).ok_or_else(|| {
                        Error::Dataset(format!("unknown value `{l}` for binary column `{}`", col.name))
                    })?
                }
                (ColumnKind::Categorical, RawValue::Label(l)) => {
                    let pos = col.labels.iter().position(|c| c == l).ok_or_else(|| {
                        Error::Dataset(format!("unknown category `{l}` for column `{}`", col.name))
                    })?;
                    out[col.indices[pos]] = 1.0;
                }
                _ => {
                    return Err(Error::Dataset(format!(
                        "value kind does not match column `{}`",
                        col.name
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Decodes an encoded (unnormalized) row. Dummy entries must be exactly
    /// 0/1 with a single active entry per group.
    pub fn decode_row(&self, encoded: &[f64]) -> Result<Vec<RawValue>> {
        if encoded.len() != self.width {
            return Err(Error::WidthMismatch {
                expected: self.width,
                actual: encoded.len(),
            });
        }
        self.columns
            .iter()
            .map(|col| match col.kind {
                ColumnKind::Numeric => Ok(RawValue::Number(encoded[col.indices[0]])),
                ColumnKind::Binary => match encoded[col.indices[0]] {
                    v if v == 0.0 => Ok(RawValue::Label(col.labels[0].clone())),
                    v if v == 1.0 => Ok(RawValue::Label(col.labels[1].clone())),
                    v => Err(Error::Dataset(format!(
                        "binary column `{}` holds {v}",
                        col.name
                    ))),
                },
                ColumnKind::Categorical => {
                    let values: Vec<f64> = col.indices.iter().map(|&i| encoded[i]).collect();
                    let ones: Vec<usize> = values
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| **v == 1.0)
                        .map(|(i, _)| i)
                        .collect();
                    let zeros = values.iter().filter(|v| **v == 0.0).count();
                    if ones.len() == 1 && zeros == values.len() - 1 {
                        Ok(RawValue::Label(col.labels[ones[0]].clone()))
                    } else {
                        Err(Error::Dataset(format!(
                            "one-hot group `{}` is not a single activation: {values:?}",
                            col.name
                        )))
                    }
                }
            })
            .collect()
    }
}

fn binary_code(labels: &[String], token: &str) -> Option<f64> {
    if token == labels[0] {
        return Some(0.0);
    }
    if token == labels[1] {
        return Some(1.0);
    }
    // "1.0" for a column labelled ["0", "1"], and similar numeric spellings
    let parsed: f64 = token.parse().ok()?;
    labels
        .iter()
        .position(|l| l.parse::<f64>().ok() == Some(parsed))
        .map(|p| p as f64)
}

/// Encoded rows with their raw target labels, before any split.
#[derive(Clone, Debug)]
pub struct EncodedTable {
    pub schema: FeatureSchema,
    pub encoding: EncodingMap,
    pub x: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

pub fn load_and_encode(path: &Path, schema: &FeatureSchema) -> Result<EncodedTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    encode_csv(file, schema)
}

/// Parses comma-separated UTF-8 data with a header row (unless the schema
/// says otherwise) and one-hot encodes it.
pub fn encode_csv<R: Read>(reader: R, schema: &FeatureSchema) -> Result<EncodedTable> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let positions: BTreeMap<String, usize> = if schema.has_header {
        let header = rdr.headers()?.clone();
        let mut map = BTreeMap::new();
        for col in &schema.columns {
            let pos = header
                .iter()
                .position(|h| h == col.name)
                .ok_or_else(|| Error::MissingColumn(col.name.clone()))?;
            map.insert(col.name.clone(), pos);
        }
        map
    } else {
        schema
            .columns
            .iter()
            .enumerate()
            .map(|(i, c)| (c.name.clone(), i))
            .collect()
    };

    let encoding = EncodingMap::from_schema(schema);
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |name: &str| -> Result<&str> {
            let pos = positions[name];
            let token = record.get(pos).ok_or_else(|| Error::Data {
                row: row_idx,
                column: name.to_string(),
                message: "row is too short".into(),
            })?;
            if MISSING_TOKENS.contains(&token) {
                return Err(Error::Data {
                    row: row_idx,
                    column: name.to_string(),
                    message: "missing value".into(),
                });
            }
            Ok(token)
        };

        let mut raw = Vec::with_capacity(encoding.columns.len());
        for col in &encoding.columns {
            let token = field(&col.name)?;
            let value = match col.kind {
                ColumnKind::Numeric => {
                    let v: f64 = token.parse().map_err(|_| Error::Data {
                        row: row_idx,
                        column: col.name.clone(),
                        message: format!("non-numeric token `{token}`"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Data {
                            row: row_idx,
                            column: col.name.clone(),
                            message: format!("non-finite value `{token}`"),
                        });
                    }
                    RawValue::Number(v)
                }
                _ => RawValue::Label(token.to_string()),
            };
            raw.push(value);
        }
        let encoded = encoding.encode_row(&raw).map_err(|e| Error::Data {
            row: row_idx,
            column: String::new(),
            message: e.to_string(),
        })?;
        let target = field(&schema.target)?;
        let target_spec = schema.columns.iter().find(|c| c.name == schema.target).unwrap();
        if let Some(cats) = &target_spec.categories {
            if !cats.iter().any(|c| c == target) {
                return Err(Error::Data {
                    row: row_idx,
                    column: schema.target.clone(),
                    message: format!("unknown class label `{target}`"),
                });
            }
        }
        x.push(encoded);
        labels.push(target.to_string());
    }
    if x.is_empty() {
        return Err(Error::Dataset(format!("dataset `{}` has no rows", schema.name)));
    }
    Ok(EncodedTable {
        schema: schema.clone(),
        encoding,
        x,
        labels,
    })
}

/// Maps the majority class to 1 and every other class to 0. Count ties go
/// to the lexicographically smallest label. Returns the labels and the
/// majority label.
pub fn binarize_target<S: AsRef<str>>(labels: &[S]) -> Result<(Vec<u8>, String)> {
    if labels.is_empty() {
        return Err(Error::Dataset("cannot binarize an empty label list".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_ref()).or_default() += 1;
    }
    // BTreeMap iterates in ascending label order; keep the first maximum
    let mut majority = "";
    let mut best = 0;
    for (label, &n) in &counts {
        if n > best {
            best = n;
            majority = label;
        }
    }
    let y = labels
        .iter()
        .map(|l| u8::from(l.as_ref() == majority))
        .collect();
    Ok((y, majority.to_string()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

const SPLIT_SHARES: [f64; 3] = [0.6, 0.2, 0.2];

/// Splits `n` items into 60/20/20 with largest-remainder rounding. Equal
/// remainders go to train, then valid, then test.
fn split_sizes(n: usize) -> [usize; 3] {
    let quotas: Vec<f64> = SPLIT_SHARES.iter().map(|s| s * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, q) in sizes.iter_mut().zip(&quotas) {
        // quotas like 0.2 * 10 land a hair under the integer
        *s = (q + 1e-9).floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - sizes[a] as f64;
        let rb = quotas[b] - sizes[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Stratified 60/20/20 split. Deterministic for a given seed; each index
/// list is sorted ascending.
pub fn split_dataset(y: &[u8], seed: u64) -> Result<Split> {
    if y.len() < 5 {
        return Err(Error::Dataset(format!(
            "need at least 5 rows to split, got {}",
            y.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let sizes = split_sizes(members.len());
        if sizes.contains(&0) {
            return Err(Error::Dataset(format!(
                "class {class} has only {} rows; it would be absent from a split",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let [a, b, _] = sizes;
        split.train.extend_from_slice(&members[..a]);
        split.valid.extend_from_slice(&members[a..a + b]);
        split.test.extend_from_slice(&members[a + b..]);
    }
    split.train.sort_unstable();
    split.valid.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeMode {
    /// `(a - mean) / variance`
    #[default]
    Variance,
    /// `(a - mean) / std`
    Std,
}

/// Per-encoded-index affine transform; dummy columns pass through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mode: NormalizeMode,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub active: Vec<bool>,
}

impl Normalizer {
    pub fn identity(width: usize) -> Self {
        Self {
            mode: NormalizeMode::Variance,
            center: vec![0.0; width],
            scale: vec![1.0; width],
            active: vec![false; width],
        }
    }

    /// Fits on the given rows (normally the train split). Zero-variance
    /// numeric columns are left untouched.
    pub fn fit(encoding: &EncodingMap, rows: &[&[f64]], mode: NormalizeMode) -> Self {
        let mut norm = Self::identity(encoding.width);
        norm.mode = mode;
        for col in &encoding.columns {
            if col.kind != ColumnKind::Numeric {
                continue;
            }
            let i = col.indices[0];
            let values: Vec<f64> = rows.iter().map(|r| r[i]).collect();
            let mean = mean(&values);
            let var = population_variance(&values, mean);
            if !(var > 0.0) {
                warn!("column `{}` has zero variance; left unnormalized", col.name);
                continue;
            }
            norm.center[i] = mean;
            norm.scale[i] = match mode {
                NormalizeMode::Variance => var,
                NormalizeMode::Std => var.sqrt(),
            };
            norm.active[i] = true;
        }
        norm
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(i, &v)| if self.active[i] { (v - self.center[i]) / self.scale[i] } else { v })
            .collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(i, &v)| if self.active[i] { v * self.scale[i] + self.center[i] } else { v })
            .collect()
    }

    pub fn apply_value(&self, index: usize, v: f64) -> f64 {
        if self.active[index] {
            (v - self.center[index]) / self.scale[index]
        } else {
            v
        }
    }
}

/// Train-split statistics in the model's (normalized, encoded) space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Median absolute deviation from the median.
    pub mad: Vec<f64>,
    /// Inverse covariance, row-major `width x width`.
    pub cov_inv: Vec<f64>,
}

impl FeatureStats {
    pub fn compute(rows: &[&[f64]], width: usize) -> Self {
        let mut mean_v = vec![0.0; width];
        let mut var_v = vec![0.0; width];
        let mut mad_v = vec![0.0; width];
        for j in 0..width {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            mean_v[j] = mean(&col);
            var_v[j] = population_variance(&col, mean_v[j]);
            mad_v[j] = median_absolute_deviation(&col);
        }
        let cov_inv = inverse_covariance(rows, &mean_v);
        Self {
            mean: mean_v,
            variance: var_v,
            mad: mad_v,
            cov_inv,
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn population_variance(values: &[f64], mean: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn median_absolute_deviation(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&dev)
}

/// Sample covariance inverse. A singular matrix gets a ridge of
/// `1e-6 * trace / m` before inversion.
fn inverse_covariance(rows: &[&[f64]], mean: &[f64]) -> Vec<f64> {
    let m = mean.len();
    let n = rows.len();
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = DMatrix::<f64>::zeros(m, m);
    for r in rows {
        for a in 0..m {
            let da = r[a] - mean[a];
            for b in a..m {
                cov[(a, b)] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..m {
        for b in a..m {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let inverse = match cov.clone().cholesky() {
        Some(ch) if ch.l().diagonal().iter().all(|d| *d > 1e-12) => ch.inverse(),
        _ => {
            let trace = cov.trace();
            if trace > 0.0 {
                let lambda = 1e-6 * trace / m as f64;
                info!("covariance is singular; inverting with ridge {lambda:e}");
                let ridged = &cov + DMatrix::<f64>::identity(m, m) * lambda;
                ridged
                    .clone()
                    .cholesky()
                    .map(|c| c.inverse())
                    .or_else(|| ridged.try_inverse())
                    .unwrap_or_else(|| DMatrix::identity(m, m))
            } else {
                warn!("covariance is zero; using identity for Mahalanobis distance");
                DMatrix::identity(m, m)
            }
        }
    };
    let mut out = Vec::with_capacity(m * m);
    for a in 0..m {
        for b in 0..m {
            out.push(inverse[(a, b)]);
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub normalize: NormalizeMode,
    pub split_seed: u64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            normalize: NormalizeMode::Variance,
            split_seed: 0,
        }
    }
}

/// An encoded, binarized, split and normalized dataset. Immutable once
/// built.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreparedDataset {
    pub name: String,
    pub schema: FeatureSchema,
    pub encoding: EncodingMap,
    pub normalizer: Normalizer,
    /// Normalized encoded rows.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<u8>,
    pub majority_label: String,
    pub split: Split,
    pub stats: FeatureStats,
    /// Realistic lower/upper bound per encoded index, normalized units.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Realistic range per encoded index in raw units. Dummies get [0, 1].
    pub raw_lower: Vec<f64>,
    pub raw_upper: Vec<f64>,
    /// Train mean for numeric indices, train mode (as a full one-hot
    /// pattern) for binary and categorical columns.
    pub replacement: Vec<f64>,
}

impl PreparedDataset {
    pub fn build(table: EncodedTable, options: &PrepareOptions) -> Result<Self> {
        let (y, majority_label) = binarize_target(&table.labels)?;
        let split = split_dataset(&y, options.split_seed)?;
        Self::from_parts(table, y, majority_label, split, options.normalize)
    }

    pub fn from_parts(
        table: EncodedTable,
        y: Vec<u8>,
        majority_label: String,
        split: Split,
        mode: NormalizeMode,
    ) -> Result<Self> {
        let EncodedTable {
            schema,
            encoding,
            x: raw,
            ..
        } = table;
        check_split(&split, raw.len())?;
        let width = encoding.width;

        let train_raw: Vec<&[f64]> = split.train.iter().map(|&i| raw[i].as_slice()).collect();
        let normalizer = Normalizer::fit(&encoding, &train_raw, mode);
        let x: Vec<Vec<f64>> = raw.iter().map(|r| normalizer.apply(r)).collect();
        let train: Vec<&[f64]> = split.train.iter().map(|&i| x[i].as_slice()).collect();
        let stats = FeatureStats::compute(&train, width);

        let mut raw_lower = vec![0.0; width];
        let mut raw_upper = vec![1.0; width];
        for col in &encoding.columns {
            if col.kind != ColumnKind::Numeric {
                continue;
            }
            let i = col.indices[0];
            let spec = schema.columns.iter().find(|c| c.name == col.name).unwrap();
            let (lo, hi) = match spec.range {
                Some([lo, hi]) => (lo, hi),
                None => raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    (lo.min(r[i]), hi.max(r[i]))
                }),
            };
            raw_lower[i] = lo;
            raw_upper[i] = hi;
        }
        let lower: Vec<f64> = (0..width).map(|i| normalizer.apply_value(i, raw_lower[i])).collect();
        let upper: Vec<f64> = (0..width).map(|i| normalizer.apply_value(i, raw_upper[i])).collect();

        let mut replacement = stats.mean.clone();
        for col in &encoding.columns {
            match col.kind {
                ColumnKind::Numeric => {}
                ColumnKind::Binary => {
                    let i = col.indices[0];
                    let ones = train.iter().filter(|r| r[i] == 1.0).count();
                    // ties go to 0
                    replacement[i] = if 2 * ones > train.len() { 1.0 } else { 0.0 };
                }
                ColumnKind::Categorical => {
                    let counts: Vec<usize> = col
                        .indices
                        .iter()
                        .map(|&i| train.iter().filter(|r| r[i] == 1.0).count())
                        .collect();
                    let best = argmax_first(&counts);
                    for (k, &i) in col.indices.iter().enumerate() {
                        replacement[i] = if k == best { 1.0 } else { 0.0 };
                    }
                }
            }
        }

        Ok(Self {
            name: schema.name.clone(),
            schema,
            encoding,
            normalizer,
            x,
            y,
            majority_label,
            split,
            stats,
            lower,
            upper,
            raw_lower,
            raw_upper,
            replacement,
        })
    }

    /// Loads a CSV with its schema and runs the whole preparation.
    pub fn load(csv: &Path, schema: &FeatureSchema, options: &PrepareOptions) -> Result<Self> {
        let table = load_and_encode(csv, schema)?;
        Self::build(table, options)
    }

    pub fn width(&self) -> usize {
        self.encoding.width
    }

    pub fn rows(&self, indices: &[usize]) -> Vec<&[f64]> {
        indices.iter().map(|&i| self.x[i].as_slice()).collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.y[i]).collect()
    }

    /// Encoded row back in raw units.
    pub fn denormalize(&self, row: &[f64]) -> Vec<f64> {
        self.normalizer.invert(row)
    }

    pub fn kind(&self) -> DatasetKind {
        self.schema.dataset_kind()
    }

    /// Share of all rows carrying binary class `class`.
    pub fn class_share(&self, class: u8) -> f64 {
        self.y.iter().filter(|&&c| c == class).count() as f64 / self.y.len() as f64
    }
}

fn argmax_first(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

fn check_split(split: &Split, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in split.train.iter().chain(&split.valid).chain(&split.test) {
        if i >= n || seen[i] {
            return Err(Error::Dataset(format!("split index {i} out of range or repeated")));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Dataset("split does not cover every row".into()));
    }
    Ok(())
}

/// A test-split row chosen for explanation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactualCase {
    pub dataset: String,
    /// Row index into the prepared dataset (always a test-split row).
    pub row: usize,
    pub x: Vec<f64>,
    /// Binary class from the data.
    pub original_class: u8,
    /// Class predicted by the model; generators aim for the other class.
    pub predicted_class: u8,
    /// Model score for `original_class`.
    pub score_original: f64,
    /// Model score for `predicted_class`.
    pub score_predicted: f64,
    pub misclassified: bool,
}

/// Draws up to `per_class` test rows of each binary class, uniformly
/// without replacement. Cases come back class 0 first, each class in
/// ascending row order.
pub fn select_factuals(
    data: &PreparedDataset,
    model: &NeuralModel,
    per_class: usize,
    seed: u64,
) -> Result<Vec<FactualCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for class in [0u8, 1u8] {
        let pool: Vec<usize> = data
            .split
            .test
            .iter()
            .copied()
            .filter(|&i| data.y[i] == class)
            .collect();
        if pool.is_empty() {
            return Err(Error::Dataset(format!(
                "test split of `{}` has no rows of class {class}",
                data.name
            )));
        }
        let take = per_class.min(pool.len());
        let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), take)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        chosen.sort_unstable();
        for row in chosen {
            let x = data.x[row].clone();
            let scores = model.predict(&x)?;
            let predicted = crate::model::argmax2(scores);
            out.push(FactualCase {
                dataset: data.name.clone(),
                row,
                original_class: class,
                predicted_class: predicted as u8,
                score_original: scores[class as usize],
                score_predicted: scores[predicted],
                misclassified: predicted as u8 != class,
                x,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ColumnSpec;
    use proptest::prelude::*;

    fn abc_schema() -> FeatureSchema {
        FeatureSchema::new(
            "abc",
            "y",
            vec![
                ColumnSpec::numeric("n"),
                ColumnSpec::categorical("c", &["A", "B", "C"]),
                ColumnSpec::binary("b", ["no", "yes"]),
                ColumnSpec::categorical("y", &["p", "q"]),
            ],
        )
    }

    #[test]
    fn one_hot_and_identity_encoding() {
        let csv = "n,c,b,y\n5.0,B,yes,p\n-1.5,A,no,q\n";
        let t = encode_csv(csv.as_bytes(), &abc_schema()).unwrap();
        assert_eq!(t.encoding.width, 5);
        assert_eq!(t.x[0], vec![5.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(t.x[1], vec![-1.5, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.labels, vec!["p", "q"]);
        assert_eq!(t.encoding.column("c").unwrap().indices, vec![1, 2, 3]);
    }

    #[test]
    fn iris_width_is_four() {
        let schema = FeatureSchema::from_path(
            &Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/iris.schema.toml"),
        )
        .unwrap();
        assert_eq!(EncodingMap::from_schema(&schema).width, 4);
    }

    #[test]
    fn load_errors() {
        let s = abc_schema();
        let unknown = encode_csv("n,c,b,y\n1,D,no,p\n".as_bytes(), &s);
        assert!(matches!(unknown, Err(Error::Data { .. })));
        let bad_num = encode_csv("n,c,b,y\nabc,A,no,p\n".as_bytes(), &s);
        assert!(matches!(bad_num, Err(Error::Data { ref column, .. }) if column == "n"));
        let missing_col = encode_csv("n,c,y\n1,A,p\n".as_bytes(), &s);
        assert!(matches!(missing_col, Err(Error::MissingColumn(ref c)) if c == "b"));
        let missing_val = encode_csv("n,c,b,y\n?,A,no,p\n".as_bytes(), &s);
        assert!(matches!(missing_val, Err(Error::Data { .. })));
    }

    #[test]
    fn binarize_examples() {
        let (y, maj) = binarize_target(&["a", "a", "a", "b", "c"]).unwrap();
        assert_eq!(y, vec![1, 1, 1, 0, 0]);
        assert_eq!(maj, "a");
        let (y, _) = binarize_target(&["a", "b", "a"]).unwrap();
        assert_eq!(y, vec![1, 0, 1]);
        let (y, maj) = binarize_target(&["z", "b", "z", "b"]).unwrap();
        assert_eq!(maj, "b");
        assert_eq!(y, vec![0, 1, 0, 1]);
        assert!(binarize_target::<&str>(&[]).is_err());
    }

    #[test]
    fn split_sizes_examples() {
        let y: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let s = split_dataset(&y, 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (60, 20, 20));
        let y10: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
        let s10 = split_dataset(&y10, 3).unwrap();
        assert_eq!((s10.train.len(), s10.valid.len(), s10.test.len()), (6, 2, 2));
        assert_eq!(split_dataset(&y, 3).unwrap(), s);
        assert!(split_dataset(&[0, 0, 0, 0, 1, 1], 0).is_err());
        assert!(split_dataset(&[0, 1, 0, 1], 0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let schema = FeatureSchema::new(
            "n",
            "y",
            vec![
                ColumnSpec::numeric("a"),
                ColumnSpec::binary("b", ["0", "1"]),
                ColumnSpec::numeric("y"),
            ],
        );
        let enc = EncodingMap::from_schema(&schema);
        let rows = [vec![2.0, 0.0], vec![4.0, 1.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let norm = Normalizer::fit(&enc, &refs, NormalizeMode::Variance);
        assert_eq!(norm.apply(&rows[0]), vec![-1.0, 0.0]);
        assert_eq!(norm.apply(&rows[1]), vec![1.0, 1.0]);

        let mut manual = Normalizer::identity(2);
        manual.active[0] = true;
        manual.scale[0] = 2.0;
        assert_eq!(manual.apply(&[4.0, 0.0])[0], 2.0);

        let flat = [vec![3.0, 0.0], vec![3.0, 1.0]];
        let refs: Vec<&[f64]> = flat.iter().map(|r| r.as_slice()).collect();
        let norm = Normalizer::fit(&enc, &refs, NormalizeMode::Variance);
        assert!(!norm.active[0]);
        assert_eq!(norm.apply(&flat[0]), flat[0]);
    }

    #[test]
    fn std_mode_divides_by_sd() {
        let schema = FeatureSchema::new(
            "n",
            "y",
            vec![ColumnSpec::numeric("a"), ColumnSpec::numeric("y")],
        );
        let enc = EncodingMap::from_schema(&schema);
        let rows = [vec![0.0], vec![4.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let norm = Normalizer::fit(&enc, &refs, NormalizeMode::Std);
        assert_eq!(norm.apply(&[4.0]), vec![1.0]);
    }

    #[test]
    fn mad_matches_brute_force() {
        let v = [1.0, 1.0, 2.0, 2.0, 4.0, 6.0, 9.0];
        // median 2; deviations 1,1,0,0,2,4,7 -> median 1
        assert_eq!(median_absolute_deviation(&v), 1.0);
        assert_eq!(median(&[1.0, 3.0]), 2.0);
    }

    #[test]
    fn ridge_handles_singular_covariance() {
        // two dummies always summing to one
        let rows = [vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let stats = FeatureStats::compute(&refs, 2);
        assert!(stats.cov_inv.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn factual_selection_caps_and_is_deterministic() {
        let schema = FeatureSchema::new(
            "s",
            "y",
            vec![ColumnSpec::numeric("a"), ColumnSpec::categorical("y", &["p", "q"])],
        );
        let mut csv = String::from("a,y\n");
        for i in 0..1000 {
            csv.push_str(&format!("{},{}\n", i as f64, if i % 5 == 0 { "q" } else { "p" }));
        }
        let t = encode_csv(csv.as_bytes(), &schema).unwrap();
        let data = PreparedDataset::build(t, &PrepareOptions::default()).unwrap();
        let model = NeuralModel::zeros(1, 2);
        let f = select_factuals(&data, &model, 100, 9).unwrap();
        let class1 = f.iter().filter(|c| c.original_class == 1).count();
        let class0 = f.iter().filter(|c| c.original_class == 0).count();
        // 800 majority rows -> 160 in test, capped to 100; 200 minority -> 40
        assert_eq!(class1, 100);
        assert_eq!(class0, 40);
        assert!(f.iter().all(|c| data.split.test.contains(&c.row)));
        assert_eq!(f, select_factuals(&data, &model, 100, 9).unwrap());
    }

    proptest! {
        #[test]
        fn split_is_partition_with_stratum_proportions(
            labels in proptest::collection::vec(0u8..2, 5..300),
            seed in any::<u64>(),
        ) {
            let n0 = labels.iter().filter(|&&c| c == 0).count();
            let n1 = labels.len() - n0;
            prop_assume!((n0 == 0 || n0 >= 4) && (n1 == 0 || n1 >= 4));
            let s = split_dataset(&labels, seed).unwrap();
            check_split(&s, labels.len()).unwrap();
            for class in [0u8, 1] {
                let n = labels.iter().filter(|&&c| c == class).count() as f64;
                let count = |idx: &[usize]| idx.iter().filter(|&&i| labels[i] == class).count() as f64;
                prop_assert!((count(&s.train) - 0.6 * n).abs() <= 1.0);
                prop_assert!((count(&s.valid) - 0.2 * n).abs() <= 1.0);
                prop_assert!((count(&s.test) - 0.2 * n).abs() <= 1.0);
            }
        }

        #[test]
        fn normalize_round_trip(values in proptest::collection::vec(-1e3f64..1e3, 3..40)) {
            let schema = FeatureSchema::new("n", "y", vec![ColumnSpec::numeric("a"), ColumnSpec::numeric("y")]);
            let enc = EncodingMap::from_schema(&schema);
            let rows: Vec<Vec<f64>> = values.iter().map(|v| vec![*v]).collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            for mode in [NormalizeMode::Variance, NormalizeMode::Std] {
                let norm = Normalizer::fit(&enc, &refs, mode);
                for r in &rows {
                    let back = norm.invert(&norm.apply(r));
                    prop_assert!((back[0] - r[0]).abs() <= 1e-9 * r[0].abs().max(1.0));
                }
            }
        }

        #[test]
        fn encode_decode_round_trip(
            rows in proptest::collection::vec((-1e6f64..1e6, 0usize..3, any::<bool>()), 1..30)
        ) {
            let schema = abc_schema();
            let enc = EncodingMap::from_schema(&schema);
            let cats = ["A", "B", "C"];
            for (n, c, b) in rows {
                let raw = vec![
                    RawValue::Number(n),
                    RawValue::Label(cats[c].to_string()),
                    RawValue::Label(if b { "yes" } else { "no" }.to_string()),
                ];
                let e = enc.encode_row(&raw).unwrap();
                for g in enc.ohe_groups() {
                    prop_assert_eq!(g.iter().map(|&i| e[i]).sum::<f64>(), 1.0);
                }
                prop_assert_eq!(enc.decode_row(&e).unwrap(), raw);
            }
        }

        #[test]
        fn mad_equals_pairwise_definition(values in proptest::collection::vec(-100f64..100.0, 1..60)) {
            // brute force: the MAD is the smallest d such that at least half of
            // the points lie within d of the median (for odd n it is attained)
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let med = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
            let mut devs: Vec<f64> = sorted.iter().map(|v| (v - med).abs()).collect();
            devs.sort_by(f64::total_cmp);
            let expected = if n % 2 == 1 { devs[n / 2] } else { (devs[n / 2 - 1] + devs[n / 2]) / 2.0 };
            prop_assert_eq!(median_absolute_deviation(&values), expected);
        }
    }
}
