//! Run configuration: one TOML file, optional `section.key=value`
//! overrides, validated in full before any command does work.

use std::path::{Path, PathBuf};

use magegraph_core::geo::KnnParams;
use magegraph_core::model::{Aggregator, ModelConfig, Variant};
use magegraph_core::pipeline::{EvalSubset, Experiment, SplitConfig, TrainSubset};
use magegraph_core::synth::SynthConfig;
use magegraph_core::training::{Regime, TrainConfig};
use magegraph_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// File name of the resolved config copied into the output directory.
pub const RESOLVED_NAME: &str = "config.toml";

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory for every artifact, relative to the config file.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub calibrate: CalibrateSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Raw trap CSV; defaults to the synthetic dataset in the output dir.
    pub input: Option<PathBuf>,
    /// Sidecar of true probabilities, evaluated as an extra model.
    pub truth: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub seed: u64,
    pub n_traps: usize,
    pub n_weeks: u32,
    pub missing_rate: f64,
    pub n_bumps: usize,
    pub habitat_noise: f64,
    pub intercept: f64,
    pub season_effect: f64,
    pub field_effect: f64,
    pub canopy_effect: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            seed: d.seed,
            n_traps: d.n_traps,
            n_weeks: d.n_weeks,
            missing_rate: d.missing_rate,
            n_bumps: d.n_bumps,
            habitat_noise: d.habitat_noise,
            intercept: d.intercept,
            season_effect: d.season_effect,
            field_effect: d.field_effect,
            canopy_effect: d.canopy_effect,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    pub k: usize,
    pub radius_km: f64,
    pub regime: String,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self {
            k: 10,
            radius_km: 50.0,
            regime: Regime::Supervised.to_string(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train_end_week: u32,
    pub calibration_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            train_end_week: 120,
            calibration_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: String,
    pub num_layers: usize,
    pub width: usize,
    pub dropout: f64,
    pub aggregator: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::graphmage(0);
        Self {
            variant: d.variant.to_string(),
            num_layers: d.num_layers,
            width: d.width,
            dropout: d.dropout_p,
            aggregator: d.aggregator.to_string(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub agc_lambda: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub horizons: Vec<u32>,
    pub seeds: Vec<u64>,
    pub subsets: Vec<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            base_lr: d.base_lr,
            min_lr: d.min_lr,
            weight_decay: d.weight_decay,
            agc_lambda: d.agc_lambda,
            patience: d.patience,
            validation_fraction: d.validation_fraction,
            horizons: (0..8).collect(),
            seeds: vec![1, 2, 3],
            subsets: vec![TrainSubset::All.to_string()],
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub threshold: f64,
    pub subsets: Vec<String>,
    pub baseline: bool,
    pub plots: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            threshold: magegraph_core::metrics::DEFAULT_THRESHOLD,
            subsets: [EvalSubset::All, EvalSubset::Upper20, EvalSubset::Lower20]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            baseline: true,
            plots: true,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateSection {
    pub lambda: f64,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        Self {
            lambda: magegraph_core::calibration::DEFAULT_LAMBDA,
        }
    }
}

/// A validated config with paths resolved against the config file.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub raw: RunConfig,
    pub output_dir: PathBuf,
    pub input: PathBuf,
    pub truth: Option<PathBuf>,
    pub synth: SynthConfig,
    pub experiment: Experiment,
    pub train_subsets: Vec<TrainSubset>,
    pub eval_subsets: Vec<EvalSubset>,
}

/// Reads `path`, applies `overrides`, validates.
pub fn load(path: &Path, overrides: &[String]) -> Result<Resolved> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let raw: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Param(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve(raw, base)
}

/// `section.key=value` or `key=value`; the value is read as TOML and falls
/// back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Param(format!("override {spec:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for s in sections {
        cur = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Param(format!("override {spec:?}: {s} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_list<T: std::str::FromStr<Err = Error>>(items: &[String], what: &str) -> Result<Vec<T>> {
    if items.is_empty() {
        return Err(Error::Param(format!("{what} must not be empty")));
    }
    items.iter().map(|s| s.parse()).collect()
}

pub fn resolve(raw: RunConfig, base: &Path) -> Result<Resolved> {
    let output_dir = base.join(&raw.output_dir);
    let input = raw
        .data
        .input
        .as_ref()
        .map_or_else(|| output_dir.join("dataset.csv"), |p| base.join(p));
    let truth = raw.data.truth.as_ref().map(|p| base.join(p));

    let s = &raw.synth;
    let synth = SynthConfig {
        seed: s.seed,
        n_traps: s.n_traps,
        n_weeks: s.n_weeks,
        missing_rate: s.missing_rate,
        n_bumps: s.n_bumps,
        habitat_noise: s.habitat_noise,
        intercept: s.intercept,
        season_effect: s.season_effect,
        field_effect: s.field_effect,
        canopy_effect: s.canopy_effect,
        ..SynthConfig::default()
    };
    synth.validate()?;

    let regime: Regime = raw.graph.regime.parse()?;
    let model = ModelConfig {
        variant: raw.model.variant.parse::<Variant>()?,
        num_layers: raw.model.num_layers,
        width: raw.model.width,
        dropout_p: raw.model.dropout,
        aggregator: raw.model.aggregator.parse::<Aggregator>()?,
        input_dim: 1,
    };
    model.validate()?;
    let t = &raw.train;
    let train = TrainConfig {
        epochs: t.epochs,
        base_lr: t.base_lr,
        min_lr: t.min_lr,
        weight_decay: t.weight_decay,
        agc_lambda: t.agc_lambda,
        patience: t.patience,
        validation_fraction: t.validation_fraction,
        regime,
        ..TrainConfig::default()
    };
    if t.horizons.is_empty() || t.seeds.is_empty() {
        return Err(Error::Param(
            "train.horizons and train.seeds must not be empty".into(),
        ));
    }
    for &h in &t.horizons {
        TrainConfig {
            horizon: h,
            ..train
        }
        .validate()?;
    }
    let split = SplitConfig {
        train_end_week: raw.split.train_end_week,
        calibration_fraction: raw.split.calibration_fraction,
    };
    split.validate()?;
    if !(0.0..=1.0).contains(&raw.evaluate.threshold) {
        return Err(Error::Param(format!(
            "threshold {} not in [0, 1]",
            raw.evaluate.threshold
        )));
    }
    if !(0.0..=1.0).contains(&raw.calibrate.lambda) {
        return Err(Error::Param(format!(
            "lambda {} not in [0, 1]",
            raw.calibrate.lambda
        )));
    }
    let experiment = Experiment {
        knn: KnnParams::new(raw.graph.k, raw.graph.radius_km)?,
        regime,
        split,
        model,
        train,
        horizons: dedup(&t.horizons),
        seeds: dedup(&t.seeds),
    };
    Ok(Resolved {
        train_subsets: dedup(&parse_list(&t.subsets, "train.subsets")?),
        eval_subsets: dedup(&parse_list(&raw.evaluate.subsets, "evaluate.subsets")?),
        raw,
        output_dir,
        input,
        truth,
        synth,
        experiment,
    })
}

fn dedup<T: Ord + Clone>(v: &[T]) -> Vec<T> {
    let mut v = v.to_vec();
    v.sort();
    v.dedup();
    v
}

impl Resolved {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.raw).map_err(|e| Error::Param(format!("config serialization: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, overrides: &[&str]) -> Result<Resolved> {
        let mut table: toml::Table = toml::from_str(text).unwrap();
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let raw: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Param(e.to_string()))?;
        resolve(raw, Path::new("/cfg"))
    }

    #[test]
    fn empty_config_takes_defaults() {
        let r = parse("", &[]).unwrap();
        assert_eq!(r.output_dir, Path::new("/cfg/run"));
        assert_eq!(r.input, Path::new("/cfg/run/dataset.csv"));
        assert_eq!(r.experiment.horizons, (0..8).collect::<Vec<_>>());
        assert_eq!(r.experiment.model.width, 128);
        assert_eq!(r.eval_subsets.len(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("[model]\nwidht = 3\n", &[]).is_err());
        assert!(parse("[modle]\n", &[]).is_err());
        assert!(parse("", &["train.epoch=3"]).is_err());
    }

    #[test]
    fn overrides_replace_values() {
        let r = parse(
            "[train]\nepochs = 5\n",
            &[
                "train.epochs=7",
                "graph.regime=semi-supervised",
                "train.seeds=[4, 2]",
            ],
        )
        .unwrap();
        assert_eq!(r.experiment.train.epochs, 7);
        assert_eq!(r.experiment.regime, Regime::SemiSupervised);
        assert_eq!(r.experiment.seeds, vec![2, 4]);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(parse("[train]\nhorizons = [8]\n", &[]).is_err());
        assert!(parse("[model]\nvariant = \"gat\"\n", &[]).is_err());
        assert!(parse("[synth]\nmissing_rate = 1.0\n", &[]).is_err());
        assert!(parse("[train]\nsubsets = [\"upper-20\"]\n", &[]).is_err());
        assert!(parse("[calibrate]\nlambda = 2.0\n", &[]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let r = parse("output_dir = \"out\"\n[train]\nepochs = 9\n", &[]).unwrap();
        let again: RunConfig = toml::from_str(&r.to_toml().unwrap()).unwrap();
        assert_eq!(again.train.epochs, 9);
        assert_eq!(again.output_dir, Path::new("out"));
    }
}
