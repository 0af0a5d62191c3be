use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, Split};
use crate::model::{prepare_all, softmax, AbmilDims, AbmilState, ModelDims, ModelState, PreparedGraph};
use crate::objective::LossWeights;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::train::{fit, predict_all, MilModel, TrainConfig, TrainLog};

use super::attention::{attention_stats, AttentionStats, ATTENTION_BINS, HIGH_ATTENTION};
use super::knn::knn_probe;
use super::metrics::{metrics_report, BinaryMetrics, MetricsReport};

/// Model-ready train/validation/test splits.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: Vec<PreparedGraph>,
    pub val: Vec<PreparedGraph>,
    pub test: Vec<PreparedGraph>,
}

impl SplitData {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        Ok(Self {
            train: prepare_all(data.split(Split::Train))?,
            val: prepare_all(data.split(Split::Val))?,
            test: prepare_all(data.split(Split::Test))?,
        })
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.train.first().map(PreparedGraph::dim)
    }
}

/// Bag-level metrics of `model` on `graphs`.
pub fn evaluate<M: MilModel>(model: &M, graphs: &[PreparedGraph]) -> Result<MetricsReport> {
    let preds = predict_all(model, graphs)?;
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| softmax(&p.logits)).collect();
    let labels: Vec<usize> = graphs.iter().map(|g| g.label).collect();
    metrics_report(&probs, &labels)
}

/// Trains SRMIL from `cfg.seed` and scores the best checkpoint on the test split.
pub fn train_and_test(data: &SplitData, dims: ModelDims, cfg: &TrainConfig) -> Result<(ModelState, TrainLog, MetricsReport)> {
    let init = ModelState::init(dims, cfg.seed)?;
    let (model, log) = fit(init, &data.train, &data.val, cfg)?;
    let report = evaluate(&model, &data.test)?;
    Ok((model, log, report))
}

/// Attention-MIL counterpart of [`train_and_test`].
pub fn train_and_test_abmil(
    data: &SplitData,
    dims: AbmilDims,
    cfg: &TrainConfig,
) -> Result<(AbmilState, TrainLog, MetricsReport)> {
    let init = AbmilState::init(dims, cfg.seed)?;
    let (model, log) = fit(init, &data.train, &data.val, cfg)?;
    let report = evaluate(&model, &data.test)?;
    Ok((model, log, report))
}

/// Which loss terms are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossCombo {
    pub comp: bool,
    pub recon: bool,
    pub corr: bool,
}

impl LossCombo {
    pub const fn new(comp: bool, recon: bool, corr: bool) -> Self {
        Self { comp, recon, corr }
    }

    /// The five trainable combinations, in reporting order.
    pub const GRID: [LossCombo; 5] = [
        LossCombo::new(true, false, false),
        LossCombo::new(true, false, true),
        LossCombo::new(true, true, false),
        LossCombo::new(false, true, true),
        LossCombo::new(true, true, true),
    ];

    pub const FULL: LossCombo = LossCombo::new(true, true, true);
    pub const COMP_ONLY: LossCombo = LossCombo::new(true, false, false);
    pub const NO_RECON: LossCombo = LossCombo::new(true, false, true);

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.comp, "comp"), (self.recon, "recon"), (self.corr, "corr")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, name)| *name)
            .collect();
        parts.join("+")
    }

    /// `base` with switched-off terms zeroed.
    pub fn weights(&self, base: &LossWeights) -> Result<LossWeights> {
        if !(self.comp || self.recon || self.corr) {
            return Err(Error::Argument("a loss combination needs at least one term".into()));
        }
        Ok(LossWeights {
            recon: if self.recon { base.recon } else { 0.0 },
            comp: if self.comp { base.comp } else { 0.0 },
            corr: if self.corr { base.corr } else { 0.0 },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub best_epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Results of one configuration across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub name: String,
    pub runs: Vec<RunSummary>,
    pub accuracy: Spread,
    /// Absent if any run's AUC was undefined.
    pub auc: Option<Spread>,
}

impl GridRow {
    fn new(name: String, runs: Vec<RunSummary>) -> Result<Self> {
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let auc: Option<Vec<f64>> = runs.iter().map(|r| r.auc).collect();
        Ok(Self {
            name,
            accuracy: Spread::of(&acc).ok_or_else(|| Error::Argument("no seeds given".into()))?,
            auc: auc.and_then(|a| Spread::of(&a)),
            runs,
        })
    }
}

/// Rows of per-configuration results with a CSV rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub rows: Vec<GridRow>,
}

impl GridTable {
    pub fn row(&self, name: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,seeds,acc_mean,acc_min,acc_max,auc_mean,auc_min,auc_max\n");
        for r in &self.rows {
            let (am, an, ax) = r.auc.map_or((String::new(), String::new(), String::new()), |a| {
                (a.mean.to_string(), a.min.to_string(), a.max.to_string())
            });
            out.push_str(&format!(
                "{},{},{},{},{},{am},{an},{ax}\n",
                r.name,
                r.runs.len(),
                r.accuracy.mean,
                r.accuracy.min,
                r.accuracy.max
            ));
        }
        out
    }
}

/// Trains every `(config, seed)` pair; jobs run in parallel and results are
/// assembled in input order.
fn run_grid(data: &SplitData, dims: ModelDims, configs: Vec<(String, TrainConfig)>, seeds: &[u64]) -> Result<GridTable> {
    if seeds.is_empty() {
        return Err(Error::Argument("at least one seed is required".into()));
    }
    let jobs: Vec<(usize, TrainConfig)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, (_, cfg))| seeds.iter().map(move |&seed| (i, TrainConfig { seed, ..cfg.clone() })))
        .collect();
    let results: Vec<RunSummary> = jobs
        .par_iter()
        .map(|(_, cfg)| {
            let (_, log, report) = train_and_test(data, dims, cfg)?;
            Ok(RunSummary {
                seed: cfg.seed,
                accuracy: report.accuracy,
                auc: report.auc,
                best_epoch: log.best_epoch,
            })
        })
        .collect::<Result<_>>()?;
    let mut chunks = results.chunks(seeds.len());
    let rows = configs
        .into_iter()
        .map(|(name, _)| GridRow::new(name, chunks.next().expect("one chunk per config").to_vec()))
        .collect::<Result<_>>()?;
    Ok(GridTable { rows })
}

/// One row per loss combination, each trained over `seeds`.
pub fn run_ablation(
    data: &SplitData,
    dims: ModelDims,
    base: &TrainConfig,
    combos: &[LossCombo],
    seeds: &[u64],
) -> Result<GridTable> {
    let configs = combos
        .iter()
        .map(|c| {
            let cfg = TrainConfig {
                loss_weights: c.weights(&base.loss_weights)?,
                ..base.clone()
            };
            Ok((c.label(), cfg))
        })
        .collect::<Result<_>>()?;
    run_grid(data, dims, configs, seeds)
}

/// Largest mask ratio a sweep accepts.
pub const MAX_SWEEP_RATIO: f64 = 0.95;

/// One row per mask ratio with the base loss weights.
pub fn run_mask_sweep(data: &SplitData, dims: ModelDims, base: &TrainConfig, ratios: &[f64], seeds: &[u64]) -> Result<GridTable> {
    for &r in ratios {
        if !(0.0..=MAX_SWEEP_RATIO).contains(&r) {
            return Err(Error::Argument(format!(
                "mask ratio {r} is outside [0, {MAX_SWEEP_RATIO}]; masking every node leaves nothing to learn from"
            )));
        }
    }
    let configs = ratios
        .iter()
        .map(|&r| {
            (
                format!("ratio={r}"),
                TrainConfig {
                    mask_ratio: r,
                    ..base.clone()
                },
            )
        })
        .collect();
    run_grid(data, dims, configs, seeds)
}

/// Attention-maximum distributions of both models on the same bags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewReport {
    pub abmil: AttentionStats,
    pub srmil: AttentionStats,
}

pub fn attention_skew(graphs: &[PreparedGraph], srmil: &ModelState, abmil: &AbmilState) -> Result<SkewReport> {
    let labels: Option<Vec<Vec<bool>>> = graphs.iter().map(|g| g.instance_labels.clone()).collect();
    let stats = |vectors: Vec<Vec<f64>>| attention_stats(&vectors, HIGH_ATTENTION, ATTENTION_BINS, labels.as_deref());
    let a = predict_all(abmil, graphs)?.into_iter().map(|p| p.attention).collect();
    let s = predict_all(srmil, graphs)?.into_iter().map(|p| p.attention).collect();
    Ok(SkewReport {
        abmil: stats(a)?,
        srmil: stats(s)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub k: usize,
    /// Instances drawn from the training bags.
    pub max_train: usize,
    /// Instances drawn from the test bags.
    pub max_test: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k: super::knn::PROBE_K,
            max_train: 4000,
            max_test: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub source: String,
    pub metrics: BinaryMetrics,
    pub n_train: usize,
    pub n_test: usize,
}

/// `(bag, instance)` pairs sampled without replacement, in pool order.
fn sample_instances(graphs: &[PreparedGraph], max: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let pool: Vec<(usize, usize)> = graphs
        .iter()
        .enumerate()
        .flat_map(|(b, g)| (0..g.num_patches()).map(move |i| (b, i)))
        .collect();
    if graphs.iter().any(|g| g.instance_labels.is_none()) {
        return Err(Error::Data("instance labels are required for the probe".into()));
    }
    if pool.len() <= max {
        return Ok(pool);
    }
    let mut rng = stream(seed, Stream::Split);
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), max).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|k| pool[k]).collect())
}

fn gather(embeddings: &[Tensor], picks: &[(usize, usize)]) -> Result<Tensor> {
    let d = embeddings.first().map_or(0, Tensor::cols);
    let mut data = Vec::with_capacity(picks.len() * d);
    for &(b, i) in picks {
        data.extend_from_slice(embeddings[b].row(i));
    }
    Tensor::matrix(picks.len(), d, data)
}

fn labels_of(graphs: &[PreparedGraph], picks: &[(usize, usize)]) -> Vec<bool> {
    picks
        .iter()
        .map(|&(b, i)| graphs[b].instance_labels.as_ref().expect("checked")[i])
        .collect()
}

type Embed<'a> = dyn Fn(&[PreparedGraph]) -> Result<Vec<Tensor>> + Sync + 'a;

/// Instance-level KNN probe on raw features, attention-MIL instance
/// embeddings and SRMIL encoder embeddings, with one shared sample of
/// training and test instances.
pub fn run_probe(
    data: &SplitData,
    srmil: &ModelState,
    abmil: &AbmilState,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    let train_picks = sample_instances(&data.train, cfg.max_train, seed)?;
    let test_picks = sample_instances(&data.test, cfg.max_test, seed.wrapping_add(1))?;
    let train_y = labels_of(&data.train, &train_picks);
    let test_y = labels_of(&data.test, &test_picks);
    let raw = |gs: &[PreparedGraph]| -> Result<Vec<Tensor>> { Ok(gs.iter().map(|g| g.features.clone()).collect()) };
    let ab = |gs: &[PreparedGraph]| -> Result<Vec<Tensor>> {
        gs.par_iter().map(|g| abmil.forward_bag(&g.features).map(|o| o.2)).collect()
    };
    let sr = |gs: &[PreparedGraph]| -> Result<Vec<Tensor>> {
        gs.par_iter().map(|g| srmil.forward_bag(g).map(|o| o.embeddings)).collect()
    };
    let sources: [(&str, &Embed); 3] =
        [("raw", &raw), ("abmil", &ab), ("srmil", &sr)];
    sources
        .iter()
        .map(|(name, embed)| {
            let train = gather(&embed(&data.train)?, &train_picks)?;
            let test = gather(&embed(&data.test)?, &test_picks)?;
            Ok(ProbeRow {
                source: name.to_string(),
                metrics: knn_probe(&train, &train_y, &test, &test_y, cfg.k)?,
                n_train: train_picks.len(),
                n_test: test_picks.len(),
            })
        })
        .collect()
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("source,accuracy,precision,recall,f1,n_train,n_test\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.source, m.accuracy, m.precision, m.recall, m.f1, r.n_train, r.n_test
        ));
    }
    out
}
