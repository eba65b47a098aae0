//! Experiment plumbing: per-week graphs from a feature panel, horizon
//! targets, chronological splits, connectivity subsets, ensemble
//! forecasts, calibration and entropy summaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::calibration::{
    entropy_by_group, fit_isotonic, node_entropy, CalibratedPredictor, EntropyReport,
};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::geo::{
    build_semisupervised_graph, build_supervised_graph, connectivity_partition,
    ConnectivityPartition, GeoPoint, KnnParams, SpatialGraph, WeekObservation,
};
use crate::metrics::{logistic_baseline, LogisticBatch};
use crate::model::{neighbor_weights, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{
    ensemble_mean, predict_sample, train, Regime, TrainConfig, TrainOutcome, WeekSample,
};

/// Which nodes a model is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrainSubset {
    All,
    /// Drops the least-connected quintile.
    Upper80,
    /// Drops the most-connected quintile.
    Lower80,
}

impl TrainSubset {
    pub fn name(self) -> &'static str {
        match self {
            TrainSubset::All => "all",
            TrainSubset::Upper80 => "upper-80",
            TrainSubset::Lower80 => "lower-80",
        }
    }

    /// Trap ids held out of training.
    pub fn excluded(self, p: &ConnectivityPartition) -> Option<&BTreeSet<String>> {
        match self {
            TrainSubset::All => None,
            TrainSubset::Upper80 => Some(&p.lower),
            TrainSubset::Lower80 => Some(&p.upper),
        }
    }
}

impl fmt::Display for TrainSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [TrainSubset::All, TrainSubset::Upper80, TrainSubset::Lower80]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown training subset {s:?}")))
    }
}

/// Which nodes a report row is computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EvalSubset {
    All,
    Upper20,
    Lower20,
}

impl EvalSubset {
    pub fn name(self) -> &'static str {
        match self {
            EvalSubset::All => "all",
            EvalSubset::Upper20 => "upper-20",
            EvalSubset::Lower20 => "lower-20",
        }
    }

    pub fn contains(self, p: &ConnectivityPartition, trap: &str) -> bool {
        match self {
            EvalSubset::All => true,
            EvalSubset::Upper20 => p.upper.contains(trap),
            EvalSubset::Lower20 => p.lower.contains(trap),
        }
    }
}

impl fmt::Display for EvalSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [EvalSubset::All, EvalSubset::Upper20, EvalSubset::Lower20]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown evaluation subset {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitConfig {
    /// Weeks before this are training weeks, the rest are test weeks.
    pub train_end_week: u32,
    /// Leading share of test weeks used to fit calibration.
    pub calibration_fraction: f64,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.calibration_fraction) {
            return Err(Error::Param(format!(
                "calibration_fraction {} not in [0, 1)",
                self.calibration_fraction
            )));
        }
        Ok(())
    }

    pub fn is_training_week(&self, week: u32) -> bool {
        week < self.train_end_week
    }
}

/// Everything needed to train and forecast, minus file locations.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub knn: KnnParams,
    pub regime: Regime,
    pub split: SplitConfig,
    /// `input_dim` is taken from the panel.
    pub model: ModelConfig,
    /// `horizon` and `seed` are set per run.
    pub train: TrainConfig,
    pub horizons: Vec<u32>,
    pub seeds: Vec<u64>,
}

/// One week's graph and the feature row of each node.
#[derive(Clone, Debug)]
pub struct WeekGraph {
    pub graph: SpatialGraph,
    pub rows: Vec<usize>,
}

/// Feature rows indexed by week and trap.
#[derive(Clone, Debug)]
pub struct Panel {
    pub features: FeatureMatrix,
    by_week: BTreeMap<u32, Vec<usize>>,
    labels: HashMap<(String, u32), Option<bool>>,
    traps: BTreeMap<String, GeoPoint>,
}

impl Panel {
    pub fn new(features: FeatureMatrix) -> Result<Self> {
        let mut by_week: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut labels = HashMap::new();
        let mut traps = BTreeMap::new();
        for (i, k) in features.keys.iter().enumerate() {
            by_week.entry(k.week).or_default().push(i);
            if labels
                .insert((k.trap_id.clone(), k.week), k.label)
                .is_some()
            {
                return Err(Error::Data(format!(
                    "trap {} appears twice in week {}",
                    k.trap_id, k.week
                )));
            }
            if let Some(p) = traps.insert(k.trap_id.clone(), k.position) {
                if p != k.position {
                    return Err(Error::Data(format!("trap {} changes position", k.trap_id)));
                }
            }
        }
        Ok(Self {
            features,
            by_week,
            labels,
            traps,
        })
    }

    pub fn weeks(&self) -> Vec<u32> {
        self.by_week.keys().copied().collect()
    }

    pub fn width(&self) -> usize {
        self.features.width()
    }

    pub fn label(&self, trap: &str, week: u32) -> Option<bool> {
        self.labels
            .get(&(trap.to_string(), week))
            .copied()
            .flatten()
    }

    pub fn traps(&self) -> &BTreeMap<String, GeoPoint> {
        &self.traps
    }

    /// Connectivity scores over one node per trap.
    pub fn connectivity(&self, knn: KnnParams) -> Result<ConnectivityPartition> {
        let obs: Vec<WeekObservation> = self
            .traps
            .iter()
            .map(|(id, &position)| WeekObservation {
                trap_id: id.clone(),
                position,
                label: Some(false),
            })
            .collect();
        connectivity_partition(&build_semisupervised_graph(0, &obs, knn)?)
    }

    /// Graph for `week` under `regime`, skipping `exclude`d traps. `None`
    /// when no node remains.
    pub fn week_graph(
        &self,
        week: u32,
        regime: Regime,
        knn: KnnParams,
        exclude: Option<&BTreeSet<String>>,
    ) -> Result<Option<WeekGraph>> {
        let Some(all_rows) = self.by_week.get(&week) else {
            return Ok(None);
        };
        let rows: Vec<usize> = all_rows
            .iter()
            .copied()
            .filter(|&i| {
                let k = &self.features.keys[i];
                exclude.is_none_or(|e| !e.contains(&k.trap_id))
                    && (regime == Regime::SemiSupervised || k.label.is_some())
            })
            .collect();
        if rows.is_empty() {
            return Ok(None);
        }
        let obs: Vec<WeekObservation> = rows
            .iter()
            .map(|&i| {
                let k = &self.features.keys[i];
                WeekObservation {
                    trap_id: k.trap_id.clone(),
                    position: k.position,
                    label: k.label,
                }
            })
            .collect();
        let graph = match regime {
            Regime::Supervised => build_supervised_graph(week, &obs, knn)?,
            Regime::SemiSupervised => build_semisupervised_graph(week, &obs, knn)?,
        };
        Ok(Some(WeekGraph { graph, rows }))
    }

    pub fn feature_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let d = self.width();
        let mut v = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            v.extend_from_slice(&self.features.rows[i]);
        }
        Tensor::matrix(rows.len(), d, v)
    }

    /// Sample with targets `label(trap, week + horizon)`.
    pub fn sample(&self, wg: &WeekGraph, horizon: u32, model: &ModelConfig) -> Result<WeekSample> {
        let targets = wg
            .graph
            .node_ids()
            .iter()
            .map(|id| self.label(id, wg.graph.week() + horizon))
            .collect();
        Ok(WeekSample {
            week: wg.graph.week(),
            weights: neighbor_weights(&wg.graph, model.aggregator)?,
            features: self.feature_rows(&wg.rows)?,
            targets,
        })
    }

    /// `(calibration weeks, evaluation weeks)` among the test weeks.
    pub fn test_weeks(&self, split: &SplitConfig) -> (Vec<u32>, Vec<u32>) {
        let test: Vec<u32> = self
            .weeks()
            .into_iter()
            .filter(|&w| !split.is_training_week(w))
            .collect();
        let n_cal = ((test.len() as f64) * split.calibration_fraction).ceil() as usize;
        let (cal, eval) = test.split_at(n_cal.min(test.len()));
        (cal.to_vec(), eval.to_vec())
    }
}

impl Experiment {
    pub fn model_for(&self, panel: &Panel) -> ModelConfig {
        ModelConfig {
            input_dim: panel.width(),
            ..self.model
        }
    }

    /// Training weeks whose horizon target also falls in the training period.
    pub fn training_samples(
        &self,
        panel: &Panel,
        horizon: u32,
        exclude: Option<&BTreeSet<String>>,
    ) -> Result<Vec<WeekSample>> {
        let model = self.model_for(panel);
        let mut out = Vec::new();
        for week in panel.weeks() {
            if !self.split.is_training_week(week + horizon) {
                continue;
            }
            if let Some(wg) = panel.week_graph(week, self.regime, self.knn, exclude)? {
                out.push(panel.sample(&wg, horizon, &model)?);
            }
        }
        if out.is_empty() {
            return Err(Error::Data(format!(
                "no training weeks for horizon {horizon}"
            )));
        }
        Ok(out)
    }

    pub fn train_member(
        &self,
        panel: &Panel,
        horizon: u32,
        seed: u64,
        exclude: Option<&BTreeSet<String>>,
    ) -> Result<TrainOutcome> {
        let samples = self.training_samples(panel, horizon, exclude)?;
        let cfg = TrainConfig {
            horizon,
            seed,
            regime: self.regime,
            ..self.train
        };
        train(&self.model_for(panel), &samples, &cfg)
    }
}

/// One forecast: trap, issue week, horizon, ensemble probability and the
/// outcome at `week + horizon` if observed.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRecord {
    pub trap_id: String,
    pub week: u32,
    pub horizon: u32,
    pub probability: f64,
    pub label: Option<bool>,
    /// Feature row used as input.
    pub row: usize,
}

/// Ensemble forecasts for one horizon, with each member's probabilities
/// aligned to `records`.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonForecast {
    pub horizon: u32,
    pub records: Vec<ForecastRecord>,
    pub members: Vec<Vec<f64>>,
}

impl HorizonForecast {
    /// Labeled records passing `keep`, as (member probabilities, ensemble
    /// probabilities, labels).
    pub fn labeled<F: Fn(&ForecastRecord) -> bool>(
        &self,
        keep: F,
    ) -> (Vec<Vec<f64>>, Vec<f64>, Vec<bool>) {
        let idx: Vec<usize> = (0..self.records.len())
            .filter(|&i| self.records[i].label.is_some() && keep(&self.records[i]))
            .collect();
        let members = self
            .members
            .iter()
            .map(|m| idx.iter().map(|&i| m[i]).collect())
            .collect();
        let mean = idx.iter().map(|&i| self.records[i].probability).collect();
        let labels = idx
            .iter()
            .map(|&i| self.records[i].label.expect("filtered"))
            .collect();
        (members, mean, labels)
    }
}

/// Runs every checkpoint (all for one horizon) on each week in `weeks`.
pub fn forecast(
    panel: &Panel,
    regime: Regime,
    knn: KnnParams,
    checkpoints: &[Checkpoint],
    weeks: &[u32],
) -> Result<HorizonForecast> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Param("forecast needs at least one checkpoint".into()))?;
    let horizon = first.horizon;
    for c in checkpoints {
        if c.horizon != horizon {
            return Err(Error::Param("checkpoints mix horizons".into()));
        }
        if c.columns != panel.features.column_names {
            return Err(Error::Data(format!(
                "checkpoint seed {} was trained on a different feature schema",
                c.seed
            )));
        }
    }
    let mut records = Vec::new();
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); checkpoints.len()];
    for &week in weeks {
        let Some(wg) = panel.week_graph(week, regime, knn, None)? else {
            continue;
        };
        let sample = panel.sample(&wg, horizon, &first.config)?;
        let probs = checkpoints
            .iter()
            .map(|c| predict_sample(&c.params, &c.config, &sample))
            .collect::<Result<Vec<_>>>()?;
        let mean = ensemble_mean(&probs)?;
        for (v, id) in wg.graph.node_ids().iter().enumerate() {
            records.push(ForecastRecord {
                trap_id: id.clone(),
                week,
                horizon,
                probability: mean[v],
                label: sample.targets[v],
                row: wg.rows[v],
            });
        }
        for (m, p) in members.iter_mut().zip(probs) {
            m.extend(p);
        }
    }
    Ok(HorizonForecast {
        horizon,
        records,
        members,
    })
}

/// Logistic-regression probabilities on the rows of `records`, trained on
/// the same training weeks, nodes and targets as the graph model.
pub fn baseline_probabilities(
    exp: &Experiment,
    panel: &Panel,
    horizon: u32,
    seed: u64,
    exclude: Option<&BTreeSet<String>>,
    records: &[ForecastRecord],
) -> Result<Vec<f64>> {
    let samples = exp.training_samples(panel, horizon, exclude)?;
    let batches: Vec<LogisticBatch> = samples
        .into_iter()
        .map(|s| LogisticBatch {
            features: s.features,
            labels: s.targets,
        })
        .collect();
    let rows: Vec<usize> = records.iter().map(|r| r.row).collect();
    let test = panel.feature_rows(&rows)?;
    let cfg = TrainConfig {
        horizon,
        seed,
        ..exp.train
    };
    logistic_baseline(&batches, &test, None, &cfg)
}

/// Isotonic calibrator fitted on labeled calibration-week records.
pub fn fit_calibrator(records: &[ForecastRecord], lambda: f64) -> Result<CalibratedPredictor> {
    let (scores, labels): (Vec<f64>, Vec<bool>) = records
        .iter()
        .filter_map(|r| r.label.map(|y| (r.probability, y)))
        .unzip();
    CalibratedPredictor::new(lambda, fit_isotonic(&scores, &labels)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedRecord {
    pub subset: String,
    pub trap_id: String,
    pub week: u32,
    pub horizon: u32,
    pub raw: f64,
    pub calibrated: f64,
    pub label: Option<bool>,
}

pub const CALIBRATED_HEADER: &str = "subset,trap_id,week,horizon,raw,calibrated,label";

pub fn calibrated_csv(records: &[CalibratedRecord]) -> String {
    let mut s = format!("{CALIBRATED_HEADER}\n");
    for r in records {
        let label = match r.label {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        s.push_str(&format!(
            "{},{},{},{},{:?},{:?},{}\n",
            r.subset, r.trap_id, r.week, r.horizon, r.raw, r.calibrated, label
        ));
    }
    s
}

pub fn parse_calibrated_csv(text: &str) -> Result<Vec<CalibratedRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CALIBRATED_HEADER) {
        return Err(Error::Parse(format!(
            "calibrated file must start with {CALIBRATED_HEADER:?}"
        )));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Parse(format!("calibrated line {}: {l:?}", i + 2));
            if f.len() != 7 {
                return Err(bad());
            }
            Ok(CalibratedRecord {
                subset: f[0].to_string(),
                trap_id: f[1].to_string(),
                week: f[2].parse().map_err(|_| bad())?,
                horizon: f[3].parse().map_err(|_| bad())?,
                raw: f[4].parse().map_err(|_| bad())?,
                calibrated: f[5].parse().map_err(|_| bad())?,
                label: crate::features::parse_label(f[6]).map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Per subset: average over (node, week) of the horizon-mean entropy,
/// then group means over covariate indicator columns. A trap belongs to a
/// group when the indicator is set in any of its rows.
pub fn entropy_report(panel: &Panel, records: &[CalibratedRecord]) -> Result<EntropyReport> {
    let mut subsets: Vec<String> = Vec::new();
    // subset -> trap -> week -> probabilities over horizons
    let mut grouped: BTreeMap<&str, BTreeMap<&str, BTreeMap<u32, Vec<f64>>>> = BTreeMap::new();
    for r in records {
        if !subsets.contains(&r.subset) {
            subsets.push(r.subset.clone());
        }
        grouped
            .entry(&r.subset)
            .or_default()
            .entry(&r.trap_id)
            .or_default()
            .entry(r.week)
            .or_default()
            .push(r.calibrated);
    }
    let mut per_subset = Vec::new();
    for s in &subsets {
        let mut node = BTreeMap::new();
        for (trap, weeks) in &grouped[s.as_str()] {
            let vals = weeks
                .values()
                .map(|p| node_entropy(p))
                .collect::<Result<Vec<_>>>()?;
            node.insert(
                trap.to_string(),
                vals.iter().sum::<f64>() / vals.len() as f64,
            );
        }
        per_subset.push((s.clone(), node));
    }
    let indicators = panel.features.indicator_columns();
    let groups: Vec<String> = indicators.iter().map(|(_, n)| n.to_string()).collect();
    let mut memberships: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (k, row) in panel.features.keys.iter().zip(&panel.features.rows) {
        let m = memberships.entry(k.trap_id.clone()).or_default();
        for (j, name) in &indicators {
            if row[*j] > 0.5 {
                m.insert(name.to_string());
            }
        }
    }
    Ok(entropy_by_group(&per_subset, &memberships, &groups))
}
