//! Seeded synthetic surveillance data with a known risk field.
//!
//! Traps are scattered uniformly in a lat/lon box. A smooth spatial field
//! `S` (a sum of Gaussian bumps, standardized over traps) sets each trap's
//! baseline risk, and a seasonal cycle modulates it:
//!
//! ```text
//! season(t) = sin(2π (t − 16) / 52)
//! active(t) = (1 + season(t)) / 2
//! z = intercept + season_effect·season(t) + field_effect·S·active(t)
//!     + canopy_effect·(canopy − 35)/15
//! p = logistic(z)
//! ```
//!
//! Covariates are noisy views of the field (`x_habitat = S + noise`,
//! canopy up and imperviousness down with `S`), so no single trap sees
//! its own risk clearly while its neighbors jointly do.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal};

use crate::error::{Error, Result};
use crate::features::{RawCovariates, RawTable};
use crate::geo::{geo_distance, GeoPoint};
use crate::tensor::sigmoid;

pub const LANDCOVER_CLASSES: [&str; 10] = [
    "open_water",
    "developed_open",
    "developed_low",
    "developed_medium",
    "developed_high",
    "deciduous_forest",
    "grassland",
    "pasture_hay",
    "cultivated_crops",
    "woody_wetlands",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_traps: usize,
    pub n_weeks: u32,
    pub missing_rate: f64,
    /// `(lat_min, lat_max, lon_min, lon_max)`.
    pub bbox: (f64, f64, f64, f64),
    pub n_bumps: usize,
    pub bump_sigma_km: (f64, f64),
    pub habitat_noise: f64,
    pub intercept: f64,
    pub season_effect: f64,
    pub field_effect: f64,
    pub canopy_effect: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_traps: 200,
            n_weeks: 150,
            missing_rate: 0.2,
            bbox: (41.4, 42.2, -88.3, -87.5),
            n_bumps: 6,
            bump_sigma_km: (12.0, 15.0),
            habitat_noise: 2.0,
            intercept: -1.5,
            season_effect: 1.5,
            field_effect: 4.0,
            canopy_effect: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_traps < 2 {
            bad.push(format!("n_traps {} must be at least 2", self.n_traps));
        }
        if self.n_weeks < 1 {
            bad.push("n_weeks must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            bad.push(format!("missing_rate {} not in [0, 1)", self.missing_rate));
        }
        let (a, b, c, d) = self.bbox;
        if !(a < b && c < d && GeoPoint::new(a, c).is_ok() && GeoPoint::new(b, d).is_ok()) {
            bad.push(format!("invalid bounding box {:?}", self.bbox));
        }
        if !(self.bump_sigma_km.0 > 0.0 && self.bump_sigma_km.0 <= self.bump_sigma_km.1) {
            bad.push(format!("invalid bump sigma range {:?}", self.bump_sigma_km));
        }
        if !self.habitat_noise.is_finite() || self.habitat_noise < 0.0 {
            bad.push("habitat_noise must be nonnegative".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Param(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthRow {
    pub trap_id: String,
    pub week: u32,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub table: RawTable,
    pub truth: Vec<TruthRow>,
    /// Standardized field value per trap, in trap order.
    pub field: Vec<f64>,
}

pub fn season(week: u32) -> f64 {
    (2.0 * std::f64::consts::PI * (week as f64 - 16.0) / 52.0).sin()
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite sd")
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lat0, lat1, lon0, lon1) = cfg.bbox;

    let positions: Vec<GeoPoint> = (0..cfg.n_traps)
        .map(|_| GeoPoint::new(rng.random_range(lat0..lat1), rng.random_range(lon0..lon1)))
        .collect::<Result<_>>()?;

    let bumps: Vec<(GeoPoint, f64, f64)> = (0..cfg.n_bumps)
        .map(|i| {
            let c = GeoPoint::new(rng.random_range(lat0..lat1), rng.random_range(lon0..lon1))?;
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let amp = sign * rng.random_range(0.5..1.5);
            let sigma = rng.random_range(cfg.bump_sigma_km.0..=cfg.bump_sigma_km.1);
            Ok((c, amp, sigma))
        })
        .collect::<Result<_>>()?;
    let raw_field: Vec<f64> = positions
        .iter()
        .map(|&p| {
            bumps
                .iter()
                .map(|&(c, a, s)| a * (-(geo_distance(p, c) / s).powi(2) / 2.0).exp())
                .sum()
        })
        .collect();
    let mean = raw_field.iter().sum::<f64>() / raw_field.len() as f64;
    let sd = (raw_field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / raw_field.len() as f64)
        .sqrt()
        .max(1e-12);
    let field: Vec<f64> = raw_field.iter().map(|v| (v - mean) / sd).collect();

    struct Static {
        habitat: f64,
        canopy: f64,
        impervious: f64,
        landcover: Vec<f64>,
        roads: [f64; 4],
        heat_offset: f64,
    }
    let gamma = Gamma::new(0.6, 1.0).expect("valid gamma");
    let statics: Vec<Static> = field
        .iter()
        .map(|&s| {
            let canopy = (35.0 + 15.0 * s + normal(10.0).sample(&mut rng)).clamp(0.0, 100.0);
            let impervious = (40.0 - 15.0 * s + normal(15.0).sample(&mut rng)).clamp(0.0, 100.0);
            let urban = impervious / 100.0;
            let mut lc: Vec<f64> = LANDCOVER_CLASSES
                .iter()
                .map(|name| {
                    let tilt = if name.starts_with("developed") {
                        0.5 + urban
                    } else {
                        1.5 - urban
                    };
                    tilt * gamma.sample(&mut rng)
                })
                .collect();
            let total: f64 = lc.iter().sum::<f64>().max(1e-12);
            lc.iter_mut().for_each(|v| *v = round6(*v / total));
            let mut roads = [0.0; 4];
            for r in roads.iter_mut() {
                *r = gamma.sample(&mut rng);
            }
            let rt: f64 = roads.iter().sum::<f64>().max(1e-12);
            roads.iter_mut().for_each(|v| *v = round6(*v / rt));
            let noise = if cfg.habitat_noise > 0.0 {
                normal(cfg.habitat_noise).sample(&mut rng)
            } else {
                0.0
            };
            Static {
                habitat: round6(s + noise),
                canopy: round6(canopy),
                impervious: round6(impervious),
                landcover: lc,
                roads,
                heat_offset: 2.0 * urban,
            }
        })
        .collect();

    let precip = Exp::new(1.0 / 3.0).expect("positive rate");
    let mut rows = Vec::with_capacity(cfg.n_traps * cfg.n_weeks as usize);
    let mut truth = Vec::with_capacity(rows.capacity());
    for week in 0..cfg.n_weeks {
        let s_t = season(week);
        let active = (1.0 + s_t) / 2.0;
        let weekly_temp = 55.0 + 25.0 * s_t + normal(3.0).sample(&mut rng);
        for (i, st) in statics.iter().enumerate() {
            let z = cfg.intercept
                + cfg.season_effect * s_t
                + cfg.field_effect * field[i] * active
                + cfg.canopy_effect * (st.canopy - 35.0) / 15.0;
            let p = sigmoid(z);
            let y = rng.random_bool(p);
            let checked = !rng.random_bool(cfg.missing_rate);
            let temps: Vec<f64> = (0..7)
                .map(|_| round6(weekly_temp + st.heat_offset + normal(4.0).sample(&mut rng)))
                .collect();
            let rain: Vec<f64> = (0..7).map(|_| round6(precip.sample(&mut rng))).collect();
            let trap_id = format!("T{i:04}");
            truth.push(TruthRow {
                trap_id: trap_id.clone(),
                week,
                probability: p,
            });
            rows.push(RawCovariates {
                trap_id,
                position: positions[i],
                week,
                label: checked.then_some(y),
                canopy_pct: st.canopy,
                impervious_pct: st.impervious,
                landcover: st.landcover.clone(),
                roads: st.roads,
                daily_temp_f: temps,
                daily_precip_mm: rain,
                extra: vec![st.habitat],
            });
        }
    }
    Ok(SyntheticWorld {
        table: RawTable {
            landcover_classes: LANDCOVER_CLASSES.iter().map(|s| s.to_string()).collect(),
            extra_names: vec!["habitat".into()],
            temp_days: 7,
            precip_days: 7,
            rows,
        },
        truth,
        field,
    })
}

/// Keeps CSV output compact; six decimals is far below covariate noise.
fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

pub const TRUTH_HEADER: &str = "trap_id,week,probability";

pub fn truth_csv(rows: &[TruthRow]) -> String {
    let mut s = format!("{TRUTH_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{:?}\n", r.trap_id, r.week, r.probability));
    }
    s
}

pub fn parse_truth_csv(text: &str) -> Result<Vec<TruthRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRUTH_HEADER) {
        return Err(Error::Parse(format!(
            "truth file must start with {TRUTH_HEADER:?}"
        )));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Parse(format!("truth line {}: {l:?}", i + 2));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(TruthRow {
                trap_id: f[0].to_string(),
                week: f[1].parse().map_err(|_| bad())?,
                probability: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
