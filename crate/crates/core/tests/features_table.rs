use magegraph_core::features::{
    assemble_features, bin_canopy, bin_imperviousness, is_continuous_column, temperature_quantiles,
    FeatureMatrix, RawTable, Scaler,
};
use magegraph_core::Error;
use proptest::prelude::*;

const HEADER: &str = "trap_id,lat,lon,week,label,canopy_pct,impervious_pct,lc_forest,lc_wetland,\
road_primary,road_secondary,road_tertiary,road_nonroad,tmean_1,tmean_2,tmean_3,precip_1,precip_2,x_elev";

fn table(rows: &[&str]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

fn sample_rows() -> Vec<String> {
    let mut rows = Vec::new();
    for week in 0..6u32 {
        for (t, (lat, lon)) in [(41.0, -88.0), (41.1, -88.1), (41.2, -87.9)]
            .iter()
            .enumerate()
        {
            let label = if (week + t as u32).is_multiple_of(4) {
                ""
            } else if week % 2 == 0 {
                "1"
            } else {
                "0"
            };
            rows.push(format!(
                "T{t},{lat},{lon},{week},{label},{},{},0.4,0.2,0.12,0.0,0.05,0.3,{},{},{},1.5,0.0,{}",
                10.0 + 30.0 * t as f64,
                20.0 * t as f64 + 5.0,
                60.0 + week as f64,
                66.0 + t as f64,
                64.0 + week as f64 * 0.5,
                100.0 + t as f64 * 7.0 + week as f64
            ));
        }
    }
    rows
}

fn sample_table() -> RawTable {
    let rows = sample_rows();
    let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
    RawTable::from_reader(table(&refs).as_bytes()).unwrap()
}

#[test]
fn empty_table_gives_header_only_matrix() {
    let raw = RawTable::from_reader(table(&[]).as_bytes()).unwrap();
    let (fm, _) = assemble_features(&raw, |_| true).unwrap();
    assert!(fm.is_empty());
    assert_eq!(fm.width(), 3 + 3 + 2 + 4 + 5 + 2 + 1 + 1);
    let mut out = Vec::new();
    fm.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("trap_id,lat,lon,week,label,canopy_low,canopy_medium,canopy_high,"));
}

#[test]
fn single_row_has_documented_width_and_order() {
    let raw = RawTable::from_reader(
        table(&["A,41,-88,0,1,10,50,0.40,0.10,0.12,0,0,0.1,70,70,60,1,2,5"]).as_bytes(),
    )
    .unwrap();
    let (fm, _) = assemble_features(&raw, |_| false).unwrap();
    assert_eq!(
        fm.column_names,
        [
            "canopy_low",
            "canopy_medium",
            "canopy_high",
            "impervious_low",
            "impervious_medium",
            "impervious_high",
            "lc_forest",
            "lc_wetland",
            "road_primary",
            "road_secondary",
            "road_tertiary",
            "road_nonroad",
            "temp_q10",
            "temp_q25",
            "temp_q50",
            "temp_q75",
            "temp_q90",
            "heating_degree_days",
            "cooling_degree_days",
            "precip_total_mm",
            "x_elev"
        ]
    );
    let r = &fm.rows[0];
    // No training rows: continuous columns pass through unscaled.
    assert_eq!(&r[..12], &[1., 0., 0., 0., 1., 0., 1., 0., 1., 0., 0., 0.]);
    assert_eq!(&r[17..], &[2.0, 1.0, 3.0, 5.0]);
}

#[test]
fn training_split_standardization_is_centered() {
    let raw = sample_table();
    let is_train = |w: u32| w < 4;
    let (fm, scaler) = assemble_features(&raw, is_train).unwrap();
    for (j, name) in fm.column_names.iter().enumerate() {
        if !is_continuous_column(name) {
            continue;
        }
        let vals: Vec<f64> = fm
            .keys
            .iter()
            .zip(&fm.rows)
            .filter(|(k, _)| is_train(k.week))
            .map(|(_, r)| r[j])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-10, "{name}: {mean}");
    }
    assert_eq!(scaler.columns.len(), 9);
}

#[test]
fn test_rows_never_leak_into_scaler() {
    let rows = sample_rows();
    let mut perturbed = rows.clone();
    for r in perturbed.iter_mut() {
        let week: u32 = r.split(',').nth(3).unwrap().parse().unwrap();
        if week >= 4 {
            // Replace the trailing x_elev value with something extreme.
            let cut = r.rfind(',').unwrap();
            r.truncate(cut);
            r.push_str(",99999");
        }
    }
    let parse = |rows: &[String]| {
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        RawTable::from_reader(table(&refs).as_bytes()).unwrap()
    };
    let (_, a) = assemble_features(&parse(&rows), |w| w < 4).unwrap();
    let (_, b) = assemble_features(&parse(&perturbed), |w| w < 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn assembly_is_byte_identical_across_runs() {
    let raw = sample_table();
    let render = || {
        let (fm, sc) = assemble_features(&raw, |w| w < 4).unwrap();
        let mut out = Vec::new();
        fm.write_csv(&mut out).unwrap();
        (out, sc.to_text())
    };
    assert_eq!(render(), render());
}

#[test]
fn feature_csv_round_trips() {
    let (fm, sc) = assemble_features(&sample_table(), |w| w < 4).unwrap();
    let mut out = Vec::new();
    fm.write_csv(&mut out).unwrap();
    assert_eq!(FeatureMatrix::from_reader(out.as_slice()).unwrap(), fm);
    assert_eq!(Scaler::from_text(sc.to_text().as_bytes()).unwrap(), sc);
}

#[test]
fn validation_lists_every_bad_row() {
    let text = table(&[
        "A,95,-88,0,1,10,50,0.4,0.1,0.12,0,0,0.1,70,70,60,1,2,5",
        "B,41,-88,0,1,10,50,0.4,0.1,0.12,0,0,0.1,70,70,60,1,2,5",
        "C,41.5,-88,0,2,10,50,0.4,0.1,0.12,0,0,0.1,70,70,60,1,2,5",
        "D,41.6,-88,0,1,10,50,0.4,,0.12,0,0,0.1,70,70,60,1,2,5",
        "E,41,-88,0,1,10,50,0.4,0.1,0.12,0,0,0.1,70,70,60,1,2,5",
    ]);
    let Err(Error::Validation(problems)) = RawTable::from_reader(text.as_bytes()) else {
        panic!("expected validation failure");
    };
    let joined = problems.join("\n");
    assert!(
        joined.contains("row 1") && joined.contains("latitude"),
        "{joined}"
    );
    assert!(
        joined.contains("row 3") && joined.contains("label"),
        "{joined}"
    );
    assert!(
        joined.contains("row 4") && joined.contains("missing value"),
        "{joined}"
    );
    assert!(joined.contains("duplicates the coordinates"), "{joined}");
}

#[test]
fn unknown_and_missing_columns_are_rejected() {
    let bad = "trap_id,lat,lon,week,label,canopy_pct,mystery\n";
    let Err(Error::Validation(p)) = RawTable::from_reader(bad.as_bytes()) else {
        panic!()
    };
    let j = p.join("\n");
    assert!(j.contains("unknown column \"mystery\""));
    assert!(j.contains("impervious_pct"));
    assert!(j.contains("tmean_"));
}

#[test]
fn raw_table_round_trips_through_csv() {
    let raw = sample_table();
    let mut out = Vec::new();
    raw.write_csv(&mut out).unwrap();
    assert_eq!(RawTable::from_reader(out.as_slice()).unwrap(), raw);
}

proptest! {
    #[test]
    fn exactly_one_bin_is_hot(p in 0.0f64..=100.0) {
        for level in [bin_canopy(p).unwrap(), bin_imperviousness(p).unwrap()] {
            let h = level.one_hot();
            prop_assert_eq!(h.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn quantiles_are_nondecreasing(v in prop::collection::vec(-40.0f64..110.0, 1..60)) {
        let q = temperature_quantiles(&v).unwrap();
        prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
    }
}
