use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetConfig, RunConfig};
use crate::constraints::ConstraintSet;
use crate::dataset::{select_factuals, FactualCase, PrepareOptions, PreparedDataset};
use crate::error::{Error, Result};
use crate::fetch::{fetch_dataset, resolve_data_dir, sha256_hex};
use crate::generators::{
    generate, CFRecord, ConstraintHooks, Family, FeatureContext, Generator, GeneratorRequest, Registry,
};
use crate::metrics::{MetricVector, Scorer};
use crate::model::{grid_search, EvalScores, TrainConfig};
use crate::recommender::FactualProfile;
use crate::ranking::ScoredRecord;
use crate::schema::{ColumnKind, DatasetKind, FeatureSchema};

pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub name: String,
    pub kind: String,
    pub family: Family,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config_sha256: String,
    pub version: String,
    pub seed_offset: u64,
    pub generators: Vec<GeneratorInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactualSummary {
    pub row: usize,
    pub original_class: u8,
    pub predicted_class: u8,
    pub misclassified: bool,
    pub score_predicted: f64,
    pub profile: [f64; 8],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub kind: DatasetKind,
    pub rows_train: usize,
    pub columns_numerical: usize,
    pub columns_categorical: usize,
    pub encoded_width: usize,
    pub selected: TrainConfig,
    pub eval: EvalScores,
    pub model_sha256: String,
    pub factual_sha256: String,
    pub factuals: Vec<FactualSummary>,
}

impl DatasetSummary {
    pub fn feature_columns(&self) -> usize {
        self.columns_numerical + self.columns_categorical
    }
}

/// One generation attempt with its scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub dataset: String,
    pub dataset_kind: DatasetKind,
    pub factual_index: usize,
    pub family: Family,
    /// 0 or 1: the two stability runs.
    pub run: u8,
    pub record: CFRecord,
    pub metrics: MetricVector,
}

impl RecordLine {
    pub fn scored(&self) -> ScoredRecord {
        ScoredRecord {
            dataset: self.dataset.clone(),
            dataset_kind: self.dataset_kind,
            factual_row: self.record.factual_row,
            generator: self.record.generator.clone(),
            run: self.run,
            metrics: self.metrics.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum RunLine {
    Header(RunHeader),
    Dataset(DatasetSummary),
    Record(RecordLine),
}

/// A run file read back into memory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub header: RunHeader,
    pub datasets: Vec<DatasetSummary>,
    pub records: Vec<RecordLine>,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = None;
        let mut datasets = Vec::new();
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RunLine = serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
            match parsed {
                RunLine::Header(h) if header.is_none() => header = Some(h),
                RunLine::Header(_) => {
                    return Err(Error::Config(format!("{}: repeated header line", path.display())))
                }
                RunLine::Dataset(d) => datasets.push(d),
                RunLine::Record(r) => records.push(r),
            }
        }
        let header = header.ok_or_else(|| Error::Config(format!("{}: no header line", path.display())))?;
        Ok(Self {
            header,
            datasets,
            records,
        })
    }

    pub fn scored(&self) -> Vec<ScoredRecord> {
        self.records.iter().map(RecordLine::scored).collect()
    }

    pub fn profiles(&self) -> Vec<FactualProfile> {
        self.datasets
            .iter()
            .flat_map(|d| {
                d.factuals.iter().map(|f| FactualProfile {
                    dataset: d.name.clone(),
                    factual_row: f.row,
                    features: f.profile,
                })
            })
            .collect()
    }

    pub fn families(&self) -> BTreeMap<String, Family> {
        self.header.generators.iter().map(|g| (g.name.clone(), g.family)).collect()
    }
}

/// Overrides applied on top of a [`RunConfig`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub seed_offset: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub records_path: PathBuf,
    pub records_written: usize,
}

/// A run that stopped early. Lines written before the failure are kept.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub records_path: Option<PathBuf>,
    pub records_written: usize,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({} records written)", self.error, self.records_written)
    }
}

struct Writer {
    out: BufWriter<File>,
    path: PathBuf,
    records: usize,
}

impl Writer {
    fn line(&mut self, line: &RunLine) -> Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        if matches!(line, RunLine::Record(_)) {
            self.records += 1;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::stage(name, e))
}

/// Runs the full pipeline: for every dataset, prepare, select a model,
/// draw factuals, run every generator twice per factual (seeds `s` and
/// `s + 1`), score, and append to `records.jsonl` in the output directory.
pub fn run_benchmark(
    cfg: &RunConfig,
    registry: &Registry,
    options: &RunOptions,
) -> std::result::Result<RunOutcome, RunFailure> {
    let out_dir = options.out_dir.clone().unwrap_or_else(|| cfg.resolve(&cfg.output_dir));
    let fail = |error: Error, w: Option<&mut Writer>| {
        let (records_path, records_written) = match w {
            Some(w) => {
                let _ = w.flush();
                (Some(w.path.clone()), w.records)
            }
            None => (None, 0),
        };
        RunFailure {
            error,
            records_path,
            records_written,
        }
    };
    let problems = cfg.problems(registry);
    if !problems.is_empty() {
        return Err(fail(Error::Config(problems.join("; ")), None));
    }
    let jobs = options.jobs.or(cfg.jobs).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| fail(Error::Config(format!("thread pool: {e}")), None))?;

    let mut generators: Vec<(Box<dyn Generator>, &super::config::GeneratorConfig)> = Vec::new();
    for g in &cfg.generators {
        match registry.build(g.kind(), &g.name, &g.params_json()) {
            Ok(built) => generators.push((built, g)),
            Err(e) => return Err(fail(Error::stage("generators", e), None)),
        }
    }

    if let Err(e) = std::fs::create_dir_all(out_dir.join("models")) {
        return Err(fail(Error::io(&out_dir, e), None));
    }
    let records_path = out_dir.join(RECORDS_FILE);
    let file = File::create(&records_path).map_err(|e| fail(Error::io(&records_path, e), None))?;
    let mut w = Writer {
        out: BufWriter::new(file),
        path: records_path.clone(),
        records: 0,
    };
    let header = RunHeader {
        config_sha256: cfg.hash.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed_offset: options.seed_offset,
        generators: generators
            .iter()
            .map(|(g, c)| GeneratorInfo {
                name: g.name().to_string(),
                kind: c.kind().to_string(),
                family: g.family(),
            })
            .collect(),
    };
    if let Err(e) = w.line(&RunLine::Header(header)) {
        return Err(fail(e, Some(&mut w)));
    }

    let seeds = cfg.seeds.offset(options.seed_offset);
    for d in &cfg.datasets {
        let result = pool.install(|| run_dataset(cfg, d, &generators, seeds, options, &out_dir, &mut w));
        if let Err(e) = result.and_then(|_| w.flush()) {
            return Err(fail(e, Some(&mut w)));
        }
    }
    if let Err(e) = w.flush() {
        return Err(fail(e, Some(&mut w)));
    }
    Ok(RunOutcome {
        out_dir,
        records_path,
        records_written: w.records,
    })
}

fn load_dataset(cfg: &RunConfig, d: &DatasetConfig, seeds: super::config::Seeds, options: &RunOptions) -> Result<PreparedDataset> {
    let schema = stage("load", FeatureSchema::from_path(&cfg.resolve(&d.schema)))?;
    let csv = match (&d.data, &d.url, &d.sha256) {
        (Some(p), _, _) => cfg.resolve(p),
        (None, Some(url), Some(sha)) => {
            let dir = resolve_data_dir(options.data_dir.as_deref());
            stage("fetch", fetch_dataset(url, sha, &dir, None))?
        }
        _ => return Err(Error::stage("load", Error::Config("dataset has no data source".into()))),
    };
    let opts = PrepareOptions {
        normalize: d.normalize,
        split_seed: seeds.split,
    };
    let mut data = stage("load", PreparedDataset::load(&csv, &schema, &opts))?;
    if let Some(n) = &d.name {
        data.name = n.clone();
    }
    Ok(data)
}

fn frozen_mask(data: &PreparedDataset, columns: &[String]) -> Vec<bool> {
    let mut mask = vec![false; data.width()];
    let mut any = false;
    for name in columns {
        if let Some(col) = data.encoding.column(name) {
            for &i in &col.indices {
                mask[i] = true;
                any = true;
            }
        }
    }
    if any {
        mask
    } else {
        Vec::new()
    }
}

fn run_dataset(
    cfg: &RunConfig,
    d: &DatasetConfig,
    generators: &[(Box<dyn Generator>, &super::config::GeneratorConfig)],
    seeds: super::config::Seeds,
    options: &RunOptions,
    out_dir: &Path,
    w: &mut Writer,
) -> Result<()> {
    let data = load_dataset(cfg, d, seeds, options)?;
    info!("{}: {} rows, width {}", data.name, data.x.len(), data.width());

    let search = stage("train", grid_search(&data, &cfg.grid(), seeds.model))?;
    let model = search.model;
    let model_json = stage("train", model.to_json())?;
    let model_sha = sha256_hex(model_json.as_bytes());
    let model_path = out_dir.join("models").join(format!("{}.model.json", data.name));
    std::fs::write(&model_path, &model_json).map_err(|e| Error::stage("persist", Error::io(&model_path, e)))?;

    let factuals: Vec<FactualCase> =
        stage("factuals", select_factuals(&data, &model, cfg.factuals_per_class, seeds.factuals))?;
    let factual_sha = sha256_hex(&stage("factuals", serde_json::to_vec(&factuals).map_err(Error::from))?);
    let kind = data.kind();
    let summary = DatasetSummary {
        name: data.name.clone(),
        kind,
        rows_train: data.split.train.len(),
        columns_numerical: data.schema.count_kind(ColumnKind::Numeric),
        columns_categorical: data.schema.count_kind(ColumnKind::Categorical) + data.schema.count_kind(ColumnKind::Binary),
        encoded_width: data.width(),
        selected: model.config.clone().expect("grid-searched model carries its config"),
        eval: model.eval.clone().unwrap_or_default(),
        model_sha256: model_sha,
        factual_sha256: factual_sha,
        factuals: factuals
            .iter()
            .map(|f| FactualSummary {
                row: f.row,
                original_class: f.original_class,
                predicted_class: f.predicted_class,
                misclassified: f.misclassified,
                score_predicted: f.score_predicted,
                profile: FactualProfile::new(&model, &data, f).features,
            })
            .collect(),
    };
    w.line(&RunLine::Dataset(summary))?;

    let constraints = stage("constraints", ConstraintSet::for_dataset(&data))?;
    let context = FeatureContext::from_dataset(&data);
    let hooks: Vec<ConstraintHooks> = generators
        .iter()
        .map(|(_, c)| ConstraintHooks {
            frozen: frozen_mask(&data, &c.frozen),
            ..c.base_hooks()
        })
        .collect();
    let denorm = |v: &[f64]| data.denormalize(v);
    let scorer = Scorer {
        model: &model,
        encoding: &data.encoding,
        stats: &data.stats,
        constraints: &constraints,
        denormalize: &denorm,
        options: cfg.metrics,
    };

    let lines: Vec<Vec<RecordLine>> = factuals
        .par_iter()
        .enumerate()
        .map(|(fi, f)| {
            let base = seeds.generators.wrapping_add(2 * fi as u64);
            let mut out = Vec::with_capacity(generators.len() * 2);
            for ((g, gc), h) in generators.iter().zip(&hooks) {
                let runs = [0u64, 1].map(|r| {
                    let req = GeneratorRequest {
                        model: &model,
                        x: &f.x,
                        y: f.predicted_class as usize,
                        context: &context,
                        hooks: h,
                        budget: gc.budget,
                        seed: base.wrapping_add(r),
                        factual_row: f.row,
                    };
                    generate(g.as_ref(), &req)
                });
                for r in 0..2 {
                    let metrics = scorer.score(&f.x, &runs[r], &runs[1 - r]);
                    out.push(RecordLine {
                        dataset: data.name.clone(),
                        dataset_kind: kind,
                        factual_index: fi,
                        family: g.family(),
                        run: r as u8,
                        record: runs[r].clone(),
                        metrics,
                    });
                }
            }
            out
        })
        .collect();
    for line in lines.into_iter().flatten() {
        w.line(&RunLine::Record(line))?;
    }
    Ok(())
}

/// Replaces timing fields with 0 so two runs can be compared byte for byte.
pub fn mask_ct(line: &str) -> Result<String> {
    let mut v: serde_json::Value = serde_json::from_str(line)?;
    if let Some(r) = v.get_mut("record").and_then(|r| r.get_mut("wall_clock_seconds")) {
        *r = serde_json::json!(0.0);
    }
    if let Some(m) = v.get_mut("metrics").and_then(|m| m.get_mut("ct")) {
        *m = serde_json::json!(0.0);
    }
    Ok(serde_json::to_string(&v)?)
}
