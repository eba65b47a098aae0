use std::collections::HashMap;

use magegraph_core::calibration::calibrate;
use magegraph_core::checkpoint::Checkpoint;
use magegraph_core::features::assemble_features;
use magegraph_core::geo::KnnParams;
use magegraph_core::metrics::{auc, brier};
use magegraph_core::model::ModelConfig;
use magegraph_core::pipeline::{
    entropy_report, fit_calibrator, forecast, CalibratedRecord, Experiment, Panel, SplitConfig,
    TrainSubset,
};
use magegraph_core::synth::{generate, SynthConfig, SyntheticWorld};
use magegraph_core::training::{Regime, TrainConfig};

fn world(seed: u64) -> SyntheticWorld {
    generate(&SynthConfig {
        seed,
        n_traps: 40,
        n_weeks: 30,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn experiment(regime: Regime) -> Experiment {
    Experiment {
        knn: KnnParams::new(10, 50.0).unwrap(),
        regime,
        split: SplitConfig {
            train_end_week: 20,
            calibration_fraction: 0.2,
        },
        model: ModelConfig {
            num_layers: 2,
            width: 16,
            ..ModelConfig::graphmage(0)
        },
        train: TrainConfig {
            epochs: 15,
            patience: 5,
            base_lr: 5e-3,
            ..TrainConfig::default()
        },
        horizons: vec![0, 1],
        seeds: vec![1],
    }
}

fn panel(w: &SyntheticWorld, exp: &Experiment) -> Panel {
    let (fm, _) = assemble_features(&w.table, |wk| exp.split.is_training_week(wk)).unwrap();
    Panel::new(fm).unwrap()
}

fn checkpoint(exp: &Experiment, p: &Panel, h: u32, seed: u64) -> Checkpoint {
    let out = exp.train_member(p, h, seed, None).unwrap();
    Checkpoint {
        config: exp.model_for(p),
        horizon: h,
        seed,
        scaler: String::new(),
        columns: p.features.column_names.clone(),
        params: out.params,
    }
}

#[test]
fn synthetic_missing_rate_concentrates() {
    let w = generate(&SynthConfig {
        seed: 11,
        n_traps: 50,
        n_weeks: 20,
        missing_rate: 0.3,
        ..SynthConfig::default()
    })
    .unwrap();
    assert_eq!(w.table.rows.len(), 1000);
    let labeled = w.table.rows.iter().filter(|r| r.label.is_some()).count() as f64 / 1000.0;
    assert!((0.65..=0.75).contains(&labeled), "{labeled}");
}

#[test]
fn lower_80_training_graphs_exclude_upper_quintile() {
    let w = world(3);
    let exp = experiment(Regime::SemiSupervised);
    let p = panel(&w, &exp);
    let part = p.connectivity(exp.knn).unwrap();
    assert!(!part.upper.is_empty() && !part.lower.is_empty());
    for (subset, held_out, kept) in [
        (TrainSubset::Lower80, &part.upper, &part.lower),
        (TrainSubset::Upper80, &part.lower, &part.upper),
    ] {
        let ex = subset.excluded(&part);
        for week in 0..20 {
            let g = p
                .week_graph(week, exp.regime, exp.knn, ex)
                .unwrap()
                .unwrap();
            let ids = g.graph.node_ids();
            assert!(ids.iter().all(|id| !held_out.contains(id)));
            assert!(kept.iter().all(|id| ids.contains(id)));
        }
    }
    assert!(TrainSubset::All.excluded(&part).is_none());
}

#[test]
fn supervised_graphs_hold_only_checked_traps() {
    let w = world(4);
    let exp = experiment(Regime::Supervised);
    let p = panel(&w, &exp);
    for week in p.weeks() {
        let checked = w
            .table
            .rows
            .iter()
            .filter(|r| r.week == week && r.label.is_some())
            .count();
        let n = p
            .week_graph(week, exp.regime, exp.knn, None)
            .unwrap()
            .map_or(0, |g| g.graph.node_ids().len());
        assert_eq!(n, checked);
    }
}

#[test]
fn horizon_targets_come_from_later_weeks() {
    let w = world(5);
    let exp = experiment(Regime::SemiSupervised);
    let p = panel(&w, &exp);
    let samples = exp.training_samples(&p, 3, None).unwrap();
    assert_eq!(samples.last().unwrap().week, 16);
    let labels: HashMap<(String, u32), Option<bool>> = w
        .table
        .rows
        .iter()
        .map(|r| ((r.trap_id.clone(), r.week), r.label))
        .collect();
    let s = &samples[2];
    let g = p
        .week_graph(s.week, exp.regime, exp.knn, None)
        .unwrap()
        .unwrap();
    for (id, t) in g.graph.node_ids().iter().zip(&s.targets) {
        assert_eq!(*t, labels[&(id.clone(), s.week + 3)]);
    }
}

#[test]
fn test_weeks_split_chronologically() {
    let w = world(6);
    let exp = experiment(Regime::Supervised);
    let p = panel(&w, &exp);
    let (cal, eval) = p.test_weeks(&exp.split);
    assert_eq!(cal, vec![20, 21]);
    assert_eq!(eval, (22..30).collect::<Vec<_>>());
}

#[test]
fn oracle_probabilities_rank_at_least_as_well_as_the_model() {
    let w = world(7);
    let exp = experiment(Regime::Supervised);
    let p = panel(&w, &exp);
    let ck = checkpoint(&exp, &p, 0, 1);
    let weeks: Vec<u32> = (20..30).collect();
    let fc = forecast(&p, exp.regime, exp.knn, &[ck], &weeks).unwrap();
    let truth: HashMap<(String, u32), f64> = w
        .truth
        .iter()
        .map(|r| ((r.trap_id.clone(), r.week), r.probability))
        .collect();
    let (_, probs, y) = fc.labeled(|_| true);
    let oracle: Vec<f64> = fc
        .records
        .iter()
        .filter(|r| r.label.is_some())
        .map(|r| truth[&(r.trap_id.clone(), r.week)])
        .collect();
    let (model, best) = (auc(&probs, &y).unwrap(), auc(&oracle, &y).unwrap());
    assert!(best >= model, "oracle {best} model {model}");
}

#[test]
fn ensemble_mean_matches_members_and_calibration_contract_holds() {
    let w = world(8);
    let exp = experiment(Regime::Supervised);
    let p = panel(&w, &exp);
    let cks: Vec<Checkpoint> = [1, 2].iter().map(|&s| checkpoint(&exp, &p, 0, s)).collect();
    let (cal, _) = p.test_weeks(&SplitConfig {
        calibration_fraction: 0.5,
        ..exp.split
    });
    let fc = forecast(&p, exp.regime, exp.knn, &cks, &cal).unwrap();
    for (i, r) in fc.records.iter().enumerate() {
        assert!((r.probability - (fc.members[0][i] + fc.members[1][i]) / 2.0).abs() < 1e-15);
    }
    let (_, raw, y) = fc.labeled(|_| true);
    let iso = fit_calibrator(&fc.records, 0.0).unwrap();
    let after: Vec<f64> = raw.iter().map(|&v| calibrate(v, &iso)).collect();
    assert!(brier(&after, &y).unwrap() <= brier(&raw, &y).unwrap());
    let ident = fit_calibrator(&fc.records, 1.0).unwrap();
    assert!(raw.iter().all(|&v| calibrate(v, &ident) == v));
}

#[test]
fn certain_predictions_give_zero_group_entropy() {
    let w = world(9);
    let exp = experiment(Regime::Supervised);
    let p = panel(&w, &exp);
    let records: Vec<CalibratedRecord> = w
        .table
        .rows
        .iter()
        .map(|r| CalibratedRecord {
            subset: "all".into(),
            trap_id: r.trap_id.clone(),
            week: r.week,
            horizon: 0,
            raw: 1.0,
            calibrated: if r.week % 2 == 0 { 1.0 } else { 0.0 },
            label: r.label,
        })
        .collect();
    let report = entropy_report(&p, &records).unwrap();
    assert!(!report.rows.is_empty());
    assert!(report.rows.iter().all(|r| r.mean_entropy == 0.0));
    assert!(report.rows.iter().any(|r| r.group.starts_with("lc_")));
}
