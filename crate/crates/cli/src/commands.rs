use std::collections::HashMap;
use std::path::{Path, PathBuf};

use magegraph_core::checkpoint::{write_atomic, Checkpoint};
use magegraph_core::features::{assemble_features, FeatureMatrix, RawTable};
use magegraph_core::geo::{edge_list, SpatialGraph};
use magegraph_core::metrics::{evaluate_horizon, HorizonMetrics, Metric, MetricsReport};
use magegraph_core::pipeline::{
    baseline_probabilities, calibrated_csv, entropy_report, fit_calibrator, forecast,
    parse_calibrated_csv, CalibratedRecord, ForecastRecord, HorizonForecast, Panel, TrainSubset,
};
use magegraph_core::synth::{generate, parse_truth_csv, truth_csv};
use magegraph_core::{Error, Result};
use rayon::prelude::*;

use crate::config::{Resolved, RESOLVED_NAME};

const DATASET: &str = "dataset.csv";
const TRUTH: &str = "truth.csv";
const FEATURES: &str = "features.csv";
const SCALER: &str = "scaler.txt";
const EDGES: &str = "edges.csv";
const CONNECTIVITY: &str = "connectivity.csv";
const PREDICTIONS: &str = "predictions.csv";
const METRICS: &str = "metrics.csv";
const CALIBRATED: &str = "calibrated.csv";
const CALIBRATION_SUMMARY: &str = "calibration.csv";
const ENTROPY: &str = "entropy.csv";

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Copies the resolved config into the output directory.
pub fn record_config(r: &Resolved) -> Result<()> {
    write(&r.output_dir.join(RESOLVED_NAME), &r.to_toml()?)
}

pub fn synth(r: &Resolved) -> Result<()> {
    let world = generate(&r.synth)?;
    let mut buf = Vec::new();
    world.table.write_csv(&mut buf)?;
    write_atomic(&r.output_dir.join(DATASET), &buf)?;
    write(&r.output_dir.join(TRUTH), &truth_csv(&world.truth))
}

pub fn preprocess(r: &Resolved) -> Result<()> {
    let table = RawTable::read_csv(&r.input)?;
    let split = r.experiment.split;
    let (fm, scaler) = assemble_features(&table, |w| split.is_training_week(w))?;
    let mut buf = Vec::new();
    fm.write_csv(&mut buf)?;
    write_atomic(&r.output_dir.join(FEATURES), &buf)?;
    write(&r.output_dir.join(SCALER), &scaler.to_text())
}

fn load_panel(r: &Resolved) -> Result<Panel> {
    Panel::new(FeatureMatrix::read_csv(&r.output_dir.join(FEATURES))?)
}

pub fn build_graph(r: &Resolved) -> Result<()> {
    let panel = load_panel(r)?;
    let e = &r.experiment;
    let graphs: Vec<SpatialGraph> = panel
        .weeks()
        .into_iter()
        .map(|w| Ok(panel.week_graph(w, e.regime, e.knn, None)?.map(|g| g.graph)))
        .filter_map(Result::transpose)
        .collect::<Result<_>>()?;
    write(&r.output_dir.join(EDGES), &edge_list(&graphs))?;
    let part = panel.connectivity(e.knn)?;
    let mut s = String::from("trap_id,score,quintile\n");
    for ((id, _), score) in panel.traps().iter().zip(&part.scores) {
        let q = if part.upper.contains(id) {
            "upper"
        } else if part.lower.contains(id) {
            "lower"
        } else {
            "middle"
        };
        s.push_str(&format!("{id},{score:?},{q}\n"));
    }
    write(&r.output_dir.join(CONNECTIVITY), &s)
}

fn checkpoint_path(r: &Resolved, subset: TrainSubset, horizon: u32, seed: u64) -> PathBuf {
    r.output_dir
        .join("checkpoints")
        .join(subset.name())
        .join(Checkpoint::file_name(horizon, seed))
}

pub fn train(r: &Resolved) -> Result<()> {
    let panel = load_panel(r)?;
    let e = &r.experiment;
    let part = panel.connectivity(e.knn)?;
    let mut jobs = Vec::new();
    for &subset in &r.train_subsets {
        for &h in &e.horizons {
            for &seed in &e.seeds {
                jobs.push((subset, h, seed));
            }
        }
    }
    jobs.par_iter()
        .map(|&(subset, h, seed)| {
            let out = e.train_member(&panel, h, seed, subset.excluded(&part))?;
            let log = r
                .output_dir
                .join("logs")
                .join(subset.name())
                .join(format!("train_h{h}_s{seed}.csv"));
            write(&log, &out.run.log_csv())?;
            Checkpoint {
                config: e.model_for(&panel),
                horizon: h,
                seed,
                scaler: SCALER.to_string(),
                columns: panel.features.column_names.clone(),
                params: out.params,
            }
            .save(&checkpoint_path(r, subset, h, seed))
        })
        .collect::<Vec<Result<()>>>()
        .into_iter()
        .collect()
}

fn load_checkpoints(r: &Resolved, subset: TrainSubset, horizon: u32) -> Result<Vec<Checkpoint>> {
    r.experiment
        .seeds
        .iter()
        .map(|&seed| {
            let path = checkpoint_path(r, subset, horizon, seed);
            if !path.exists() {
                return Err(Error::Data(format!(
                    "missing checkpoint {}",
                    path.display()
                )));
            }
            Checkpoint::load(&path)
        })
        .collect()
}

fn model_name(base: &str, subset: TrainSubset) -> String {
    match subset {
        TrainSubset::All => base.to_string(),
        s => format!("{base}:{s}"),
    }
}

fn truth_path(r: &Resolved) -> Option<PathBuf> {
    match (&r.truth, &r.raw.data.input) {
        (Some(p), _) => Some(p.clone()),
        (None, None) => Some(r.output_dir.join(TRUTH)).filter(|p| p.exists()),
        (None, Some(_)) => None,
    }
}

fn labeled_metrics(
    horizon: u32,
    members: &[Vec<f64>],
    labels: &[bool],
    threshold: f64,
) -> Result<Option<HorizonMetrics>> {
    if labels.is_empty() {
        return Ok(None);
    }
    let per_seed = members
        .iter()
        .map(|p| evaluate_horizon(horizon, p, labels, threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(HorizonMetrics::average(&per_seed)?))
}

pub fn evaluate(r: &Resolved) -> Result<()> {
    let panel = load_panel(r)?;
    let e = &r.experiment;
    let part = panel.connectivity(e.knn)?;
    let (_, eval_weeks) = panel.test_weeks(&e.split);
    let truth: Option<HashMap<(String, u32), f64>> = truth_path(r)
        .map(|p| {
            Ok::<_, Error>(
                parse_truth_csv(&read(&p)?)?
                    .into_iter()
                    .map(|t| ((t.trap_id, t.week), t.probability))
                    .collect(),
            )
        })
        .transpose()?;
    let threshold = r.raw.evaluate.threshold;
    let variant = e.model.variant.to_string();
    let mut report = MetricsReport::default();
    let mut predictions = String::from("model,trap_id,week,horizon,probability,label\n");
    for (i, &subset) in r.train_subsets.iter().enumerate() {
        let name = model_name(&variant, subset);
        for &h in &e.horizons {
            let fc = forecast(
                &panel,
                e.regime,
                e.knn,
                &load_checkpoints(r, subset, h)?,
                &eval_weeks,
            )?;
            for rec in &fc.records {
                predictions.push_str(&format!(
                    "{name},{},{},{},{:?},{}\n",
                    rec.trap_id,
                    rec.week,
                    h,
                    rec.probability,
                    label_field(rec.label)
                ));
            }
            let baseline: Option<Vec<Vec<f64>>> = if r.raw.evaluate.baseline {
                Some(
                    e.seeds
                        .iter()
                        .map(|&s| {
                            baseline_probabilities(
                                e,
                                &panel,
                                h,
                                s,
                                subset.excluded(&part),
                                &fc.records,
                            )
                        })
                        .collect::<Result<_>>()?,
                )
            } else {
                None
            };
            let oracle: Option<Vec<f64>> = match (&truth, i) {
                (Some(t), 0) => Some(
                    fc.records
                        .iter()
                        .map(|rec| {
                            t.get(&(rec.trap_id.clone(), rec.week))
                                .copied()
                                .ok_or_else(|| {
                                    Error::Data(format!(
                                        "truth file lacks trap {} week {}",
                                        rec.trap_id, rec.week
                                    ))
                                })
                        })
                        .collect::<Result<_>>()?,
                ),
                _ => None,
            };
            for &es in &r.eval_subsets {
                let keep = |rec: &ForecastRecord| es.contains(&part, &rec.trap_id);
                let (members, _, labels) = fc.labeled(keep);
                if let Some(m) = labeled_metrics(h, &members, &labels, threshold)? {
                    report.push(&name, es.name(), &m);
                }
                if let Some(b) = &baseline {
                    let b = HorizonForecast {
                        members: b.clone(),
                        ..fc.clone()
                    };
                    let (members, _, labels) = b.labeled(keep);
                    if let Some(m) = labeled_metrics(h, &members, &labels, threshold)? {
                        report.push(&model_name("logistic", subset), es.name(), &m);
                    }
                }
                if let Some(o) = &oracle {
                    let o = HorizonForecast {
                        members: vec![o.clone()],
                        ..fc.clone()
                    };
                    let (members, _, labels) = o.labeled(keep);
                    if let Some(m) = labeled_metrics(h, &members, &labels, threshold)? {
                        report.push("oracle", es.name(), &m);
                    }
                }
            }
        }
    }
    write(&r.output_dir.join(PREDICTIONS), &predictions)?;
    write(&r.output_dir.join(METRICS), &report.to_csv())?;
    if r.raw.evaluate.plots {
        for metric in Metric::ALL {
            for es in &r.eval_subsets {
                let path =
                    r.output_dir
                        .join("plots")
                        .join(format!("{}_{}.svg", metric.name(), es.name()));
                write(&path, &report.line_chart_svg(metric, es.name()))?;
            }
        }
    }
    Ok(())
}

fn label_field(label: Option<bool>) -> &'static str {
    match label {
        Some(true) => "1",
        Some(false) => "0",
        None => "",
    }
}

pub fn calibrate(r: &Resolved) -> Result<()> {
    let panel = load_panel(r)?;
    let e = &r.experiment;
    let (cal_weeks, eval_weeks) = panel.test_weeks(&e.split);
    let lambda = r.raw.calibrate.lambda;
    let mut out = Vec::new();
    let mut summary = String::from("subset,horizon,records,brier_raw,brier_calibrated\n");
    for &subset in &r.train_subsets {
        for &h in &e.horizons {
            let cks = load_checkpoints(r, subset, h)?;
            let cal = forecast(&panel, e.regime, e.knn, &cks, &cal_weeks)?;
            let predictor = fit_calibrator(&cal.records, lambda)?;
            let (_, raw, labels) = cal.labeled(|_| true);
            let fitted: Vec<f64> = raw.iter().map(|&p| predictor.calibrate(p)).collect();
            summary.push_str(&format!(
                "{subset},{h},{},{:?},{:?}\n",
                labels.len(),
                magegraph_core::metrics::brier(&raw, &labels)?,
                magegraph_core::metrics::brier(&fitted, &labels)?
            ));
            let fc = forecast(&panel, e.regime, e.knn, &cks, &eval_weeks)?;
            out.extend(fc.records.iter().map(|rec| CalibratedRecord {
                subset: subset.to_string(),
                trap_id: rec.trap_id.clone(),
                week: rec.week,
                horizon: h,
                raw: rec.probability,
                calibrated: predictor.calibrate(rec.probability),
                label: rec.label,
            }));
        }
    }
    write(&r.output_dir.join(CALIBRATION_SUMMARY), &summary)?;
    write(&r.output_dir.join(CALIBRATED), &calibrated_csv(&out))
}

pub fn entropy(r: &Resolved) -> Result<()> {
    let panel = load_panel(r)?;
    let records = parse_calibrated_csv(&read(&r.output_dir.join(CALIBRATED))?)?;
    write(
        &r.output_dir.join(ENTROPY),
        &entropy_report(&panel, &records)?.to_csv(),
    )
}
