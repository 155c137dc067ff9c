//! One-hidden-layer rectifier network with a two-way softmax output.
//!
//! The network is the model under explanation: every generator queries the
//! same trained instance. Training is mini-batch RMSprop on categorical
//! cross-entropy; [`NeuralModel::input_gradient`] backpropagates the loss to
//! the input for gradient-based generators.

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PreparedDataset;
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

pub const LEARNING_RATE_GRID: [f64; 3] = [0.01, 0.001, 0.0001];
pub const EPOCH_GRID: [usize; 3] = [50, 100, 500];

fn default_decay() -> f64 {
    0.9
}

fn default_epsilon() -> f64 {
    1e-7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Defaults to `min(32, train size)`.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_decay")]
    pub rms_decay: f64,
    #[serde(default = "default_epsilon")]
    pub rms_epsilon: f64,
}

impl TrainConfig {
    pub fn new(n_hidden: usize, learning_rate: f64, epochs: usize) -> Self {
        Self {
            n_hidden,
            learning_rate,
            epochs,
            batch_size: None,
            rms_decay: default_decay(),
            rms_epsilon: default_epsilon(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub auc_train: f64,
    pub auc_valid: f64,
    pub auc_test: f64,
    pub acc_train: f64,
    pub acc_valid: f64,
    pub acc_test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralModel {
    pub input_width: usize,
    pub n_hidden: usize,
    /// Row-major `input_width x n_hidden`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `n_hidden x 2`.
    pub w2: Vec<f64>,
    pub b2: [f64; 2],
    #[serde(default)]
    pub config: Option<TrainConfig>,
    #[serde(default)]
    pub eval: Option<EvalScores>,
}

/// Class with the larger score; ties go to class 0.
pub fn argmax2(scores: [f64; 2]) -> usize {
    usize::from(scores[1] > scores[0])
}

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// `-log softmax(z)[target]`, computed stably.
fn cross_entropy(z: [f64; 2], target: usize) -> f64 {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    lse - z[target]
}

struct Forward {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: [f64; 2],
}

impl NeuralModel {
    /// All-zero weights; predicts (0.5, 0.5) everywhere.
    pub fn zeros(input_width: usize, n_hidden: usize) -> Self {
        Self {
            input_width,
            n_hidden,
            w1: vec![0.0; input_width * n_hidden],
            b1: vec![0.0; n_hidden],
            w2: vec![0.0; n_hidden * 2],
            b2: [0.0; 2],
            config: None,
            eval: None,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(input_width: usize, n_hidden: usize, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(input_width, n_hidden);
        let l1 = (6.0 / (input_width + n_hidden) as f64).sqrt();
        let l2 = (6.0 / (n_hidden + 2) as f64).sqrt();
        for w in &mut m.w1 {
            *w = rng.random_range(-l1..l1);
        }
        for w in &mut m.w2 {
            *w = rng.random_range(-l2..l2);
        }
        m
    }

    fn check_shapes(&self) -> Result<()> {
        let ok = self.input_width > 0
            && self.n_hidden > 0
            && self.w1.len() == self.input_width * self.n_hidden
            && self.b1.len() == self.n_hidden
            && self.w2.len() == self.n_hidden * 2;
        if ok {
            Ok(())
        } else {
            Err(Error::CorruptModel("weight shapes do not match the declared sizes".into()))
        }
    }

    fn check_width(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width {
            return Err(Error::WidthMismatch {
                expected: self.input_width,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let h = self.n_hidden;
        let mut pre = self.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w1[i * h..(i + 1) * h];
            for (p, w) in pre.iter_mut().zip(row) {
                *p += xi * w;
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
        let mut logits = self.b2;
        for (j, &hj) in hidden.iter().enumerate() {
            logits[0] += hj * self.w2[2 * j];
            logits[1] += hj * self.w2[2 * j + 1];
        }
        Forward { pre, hidden, logits }
    }

    /// Softmax class scores.
    pub fn predict(&self, x: &[f64]) -> Result<[f64; 2]> {
        self.check_width(x)?;
        Ok(softmax2(self.forward(x).logits))
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        self.predict(x).map(argmax2)
    }

    /// Gradient of the cross-entropy toward `target` with respect to `x`.
    /// Rectifier kinks use subgradient 0.
    pub fn input_gradient(&self, x: &[f64], target: usize) -> Result<Vec<f64>> {
        self.check_width(x)?;
        let f = self.forward(x);
        let p = softmax2(f.logits);
        let dz = [p[0] - f64::from(target == 0), p[1] - f64::from(target == 1)];
        let h = self.n_hidden;
        let da: Vec<f64> = (0..h)
            .map(|j| {
                if f.pre[j] > 0.0 {
                    self.w2[2 * j] * dz[0] + self.w2[2 * j + 1] * dz[1]
                } else {
                    0.0
                }
            })
            .collect();
        Ok((0..self.input_width)
            .map(|i| {
                let row = &self.w1[i * h..(i + 1) * h];
                row.iter().zip(&da).map(|(w, d)| w * d).sum()
            })
            .collect())
    }

    /// Cross-entropy toward `target` at `x`.
    pub fn loss(&self, x: &[f64], target: usize) -> Result<f64> {
        self.check_width(x)?;
        Ok(cross_entropy(self.forward(x).logits, target))
    }

    pub fn mean_loss(&self, x: &[&[f64]], y: &[u8]) -> f64 {
        let total: f64 = x
            .iter()
            .zip(y)
            .map(|(xi, &yi)| cross_entropy(self.forward(xi).logits, yi as usize))
            .sum();
        total / x.len().max(1) as f64
    }

    /// Class-1 scores for a batch of rows.
    pub fn positive_scores(&self, x: &[&[f64]]) -> Vec<f64> {
        x.iter().map(|xi| softmax2(self.forward(xi).logits)[1]).collect()
    }

    pub fn accuracy(&self, x: &[&[f64]], y: &[u8]) -> f64 {
        let hits = x
            .iter()
            .zip(y)
            .filter(|(xi, &yi)| argmax2(softmax2(self.forward(xi).logits)) == yi as usize)
            .count();
        hits as f64 / x.len().max(1) as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> Result<String> {
        let envelope = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&envelope)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::CorruptModel(e.to_string()))?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::CorruptModel("missing format_version".into()))?;
        if version > MODEL_FORMAT_VERSION as u64 {
            return Err(Error::ModelVersion {
                found: version as u32,
                supported: MODEL_FORMAT_VERSION,
            });
        }
        let file: ModelFile =
            serde_json::from_value(value).map_err(|e| Error::CorruptModel(e.to_string()))?;
        file.model.check_shapes()?;
        Ok(file.model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    model: NeuralModel,
}

/// Hidden-layer sizes tried by the grid search: fifths of `2 * width + 1`,
/// rounded half up, at least 1, deduplicated ascending.
pub fn neuron_grid(input_width: usize) -> Vec<usize> {
    let max = 2 * input_width + 1;
    let mut grid: Vec<usize> = (1..=5).map(|k| ((2 * k * max + 5) / 10).max(1)).collect();
    grid.dedup();
    grid
}

pub struct TrainOutcome {
    pub model: NeuralModel,
    /// Mean training loss before the first epoch, then after each epoch.
    pub losses: Vec<f64>,
}

/// Trains on explicit rows. Deterministic for a given seed.
pub fn train_rows(x: &[&[f64]], y: &[u8], config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    if x.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if config.n_hidden == 0 {
        return Err(Error::Training("hidden layer needs at least one neuron".into()));
    }
    let width = x[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = NeuralModel::init(width, config.n_hidden, &mut rng);
    model.config = Some(config.clone());
    let h = config.n_hidden;

    let batch = config.batch_size.unwrap_or(32).min(x.len()).max(1);
    let mut cache = RmsCache::new(&model);
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut losses = vec![model.mean_loss(x, y)];

    let mut g_w1 = vec![0.0; width * h];
    let mut g_b1 = vec![0.0; h];
    let mut g_w2 = vec![0.0; h * 2];
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            g_w1.iter_mut().for_each(|g| *g = 0.0);
            g_b1.iter_mut().for_each(|g| *g = 0.0);
            g_w2.iter_mut().for_each(|g| *g = 0.0);
            let mut g_b2 = [0.0f64; 2];
            for &r in chunk {
                let xi = x[r];
                let f = model.forward(xi);
                let p = softmax2(f.logits);
                let t = y[r] as usize;
                let dz = [p[0] - f64::from(t == 0), p[1] - f64::from(t == 1)];
                g_b2[0] += dz[0];
                g_b2[1] += dz[1];
                for j in 0..h {
                    g_w2[2 * j] += f.hidden[j] * dz[0];
                    g_w2[2 * j + 1] += f.hidden[j] * dz[1];
                    let da = if f.pre[j] > 0.0 {
                        model.w2[2 * j] * dz[0] + model.w2[2 * j + 1] * dz[1]
                    } else {
                        0.0
                    };
                    g_b1[j] += da;
                    if da != 0.0 {
                        for (i, &xv) in xi.iter().enumerate() {
                            g_w1[i * h + j] += xv * da;
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            cache.step(&mut model.w1, &g_w1, scale, config, Slot::W1);
            cache.step(&mut model.b1, &g_b1, scale, config, Slot::B1);
            cache.step(&mut model.w2, &g_w2, scale, config, Slot::W2);
            cache.step(&mut model.b2, &g_b2, scale, config, Slot::B2);
        }
        let loss = model.mean_loss(x, y);
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at epoch {} (learning rate {})",
                epoch + 1,
                config.learning_rate
            )));
        }
        losses.push(loss);
    }
    Ok(TrainOutcome { model, losses })
}

#[derive(Clone, Copy)]
enum Slot {
    W1,
    B1,
    W2,
    B2,
}

struct RmsCache {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl RmsCache {
    fn new(m: &NeuralModel) -> Self {
        Self {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; 2],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], scale: f64, cfg: &TrainConfig, slot: Slot) {
        let acc = match slot {
            Slot::W1 => &mut self.w1,
            Slot::B1 => &mut self.b1,
            Slot::W2 => &mut self.w2,
            Slot::B2 => &mut self.b2,
        };
        let rho = cfg.rms_decay;
        for ((p, &g), a) in params.iter_mut().zip(grads).zip(acc.iter_mut()) {
            let g = g * scale;
            *a = rho * *a + (1.0 - rho) * g * g;
            *p -= cfg.learning_rate * g / (a.sqrt() + cfg.rms_epsilon);
        }
    }
}

/// Trains on the dataset's train split and attaches evaluation scores.
pub fn train(data: &PreparedDataset, config: &TrainConfig, seed: u64) -> Result<NeuralModel> {
    let x = data.rows(&data.split.train);
    let y = data.labels(&data.split.train);
    let mut model = train_rows(&x, &y, config, seed)?.model;
    model.eval = Some(evaluate(&model, data)?);
    Ok(model)
}

pub fn evaluate(model: &NeuralModel, data: &PreparedDataset) -> Result<EvalScores> {
    let part = |idx: &[usize]| -> Result<(f64, f64)> {
        let x = data.rows(idx);
        let y = data.labels(idx);
        Ok((auc(&model.positive_scores(&x), &y)?, model.accuracy(&x, &y)))
    };
    let (auc_train, acc_train) = part(&data.split.train)?;
    let (auc_valid, acc_valid) = part(&data.split.valid)?;
    let (auc_test, acc_test) = part(&data.split.test)?;
    Ok(EvalScores {
        auc_train,
        auc_valid,
        auc_test,
        acc_train,
        acc_valid,
        acc_test,
    })
}

/// Area under the ROC curve as the Mann-Whitney statistic with midranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::WidthMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Stats("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, r)| r)
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Candidate axes for the grid search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Hidden sizes; `None` uses [`neuron_grid`] of the input width.
    #[serde(default)]
    pub neurons: Option<Vec<usize>>,
    #[serde(default = "default_learning_rates")]
    pub learning_rates: Vec<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: Vec<usize>,
}

fn default_learning_rates() -> Vec<f64> {
    LEARNING_RATE_GRID.to_vec()
}

fn default_epochs() -> Vec<usize> {
    EPOCH_GRID.to_vec()
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            neurons: None,
            learning_rates: default_learning_rates(),
            epochs: default_epochs(),
        }
    }
}

impl GridSpec {
    pub fn candidates(&self, input_width: usize) -> Vec<TrainConfig> {
        let neurons = self.neurons.clone().unwrap_or_else(|| neuron_grid(input_width));
        let mut out = Vec::new();
        for &n in &neurons {
            for &lr in &self.learning_rates {
                for &ep in &self.epochs {
                    out.push(TrainConfig::new(n, lr, ep));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: TrainConfig,
    pub valid_auc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub candidates: Vec<Candidate>,
    pub selected: usize,
    pub model: NeuralModel,
}

/// Index of the best candidate: highest validation AUC, then fewest
/// neurons, smallest learning rate, fewest epochs.
pub fn select_candidate(candidates: &[Candidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        let Some(auc) = c.valid_auc else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let bc = &candidates[b];
                let bauc = bc.valid_auc.unwrap();
                auc > bauc
                    || (auc == bauc
                        && (c.config.n_hidden, c.config.learning_rate, c.config.epochs)
                            .partial_cmp(&(bc.config.n_hidden, bc.config.learning_rate, bc.config.epochs))
                            == Some(std::cmp::Ordering::Less))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Trains every candidate (concurrently, candidate `i` seeded with
/// `seed + i`) and keeps the one with the best validation AUC.
pub fn grid_search(data: &PreparedDataset, spec: &GridSpec, seed: u64) -> Result<GridSearchResult> {
    let configs = spec.candidates(data.width());
    if configs.is_empty() {
        return Err(Error::Config("model grid is empty".into()));
    }
    let valid_x = data.rows(&data.split.valid);
    let valid_y = data.labels(&data.split.valid);
    let trained: Vec<(Candidate, Option<NeuralModel>)> = configs
        .into_par_iter()
        .enumerate()
        .map(|(i, config)| {
            let outcome = train(data, &config, seed.wrapping_add(i as u64))
                .and_then(|m| auc(&m.positive_scores(&valid_x), &valid_y).map(|a| (m, a)));
            match outcome {
                Ok((m, a)) => (
                    Candidate {
                        config,
                        valid_auc: Some(a),
                        error: None,
                    },
                    Some(m),
                ),
                Err(e) => {
                    warn!("grid candidate {config:?} skipped: {e}");
                    (
                        Candidate {
                            config,
                            valid_auc: None,
                            error: Some(e.to_string()),
                        },
                        None,
                    )
                }
            }
        })
        .collect();
    let candidates: Vec<Candidate> = trained.iter().map(|(c, _)| c.clone()).collect();
    let selected = select_candidate(&candidates)
        .ok_or_else(|| Error::Training("every grid candidate failed".into()))?;
    let model = trained[selected].1.clone().unwrap();
    Ok(GridSearchResult {
        candidates,
        selected,
        model,
    })
}
