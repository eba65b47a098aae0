//! Isotonic calibration blended with raw ensemble probabilities, and
//! entropy summaries for trap-placement guidance.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Monotone step fit evaluated with linear interpolation between
/// breakpoints and clamped outside them.
#[derive(Clone, Debug, PartialEq)]
pub struct IsotonicModel {
    breakpoints: Vec<f64>,
    fitted_values: Vec<f64>,
}

impl IsotonicModel {
    pub fn new(breakpoints: Vec<f64>, fitted_values: Vec<f64>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != fitted_values.len() {
            return Err(Error::Param(format!(
                "isotonic model needs matching nonempty breakpoints and values ({} vs {})",
                breakpoints.len(),
                fitted_values.len()
            )));
        }
        if breakpoints
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
        {
            return Err(Error::Param(
                "isotonic breakpoints must strictly increase".into(),
            ));
        }
        if fitted_values.windows(2).any(|w| w[0] > w[1])
            || fitted_values.iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Param(
                "isotonic values must be nondecreasing in [0, 1]".into(),
            ));
        }
        Ok(Self {
            breakpoints,
            fitted_values,
        })
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn fitted_values(&self) -> &[f64] {
        &self.fitted_values
    }

    pub fn eval(&self, x: f64) -> f64 {
        let b = &self.breakpoints;
        let f = &self.fitted_values;
        if x <= b[0] {
            return f[0];
        }
        if x >= b[b.len() - 1] {
            return f[f.len() - 1];
        }
        let i = b.partition_point(|&v| v <= x);
        let (x0, x1) = (b[i - 1], b[i]);
        let (y0, y1) = (f[i - 1], f[i]);
        if x == x0 {
            return y0;
        }
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

/// Pool-adjacent-violators least-squares monotone fit of labels on scores.
/// Tied scores are pooled first, so each distinct score gets one value.
pub fn fit_isotonic(scores: &[f64], labels: &[bool]) -> Result<IsotonicModel> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.len() < 2 {
        return Err(Error::Data("isotonic fit needs at least 2 records".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("isotonic fit needs finite scores".into()));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Data("calibration data has a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // (score, label sum, count) per distinct score.
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    for i in order {
        let y = if labels[i] { 1.0 } else { 0.0 };
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += y;
                g.2 += 1.0;
            }
            _ => groups.push((scores[i], y, 1.0)),
        }
    }
    // Blocks of consecutive groups: (label sum, count, groups covered).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(groups.len());
    for &(_, s, c) in &groups {
        blocks.push((s, c, 1));
        while blocks.len() > 1 {
            let (s1, c1, n1) = blocks[blocks.len() - 1];
            let (s0, c0, n0) = blocks[blocks.len() - 2];
            if s0 / c0 <= s1 / c1 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().expect("len > 1") = (s0 + s1, c0 + c1, n0 + n1);
        }
    }
    let mut fitted = Vec::with_capacity(groups.len());
    for (s, c, n) in blocks {
        fitted.extend(std::iter::repeat_n(s / c, n));
    }
    IsotonicModel::new(groups.iter().map(|g| g.0).collect(), fitted)
}

/// `λ·raw + (1 − λ)·f(raw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedPredictor {
    pub lambda: f64,
    pub isotonic: IsotonicModel,
}

impl CalibratedPredictor {
    pub fn new(lambda: f64, isotonic: IsotonicModel) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Param(format!("lambda {lambda} not in [0, 1]")));
        }
        Ok(Self { lambda, isotonic })
    }

    pub fn calibrate(&self, raw: f64) -> f64 {
        calibrate(raw, self)
    }
}

pub fn calibrate(raw: f64, predictor: &CalibratedPredictor) -> f64 {
    let l = predictor.lambda;
    (l * raw + (1.0 - l) * predictor.isotonic.eval(raw)).clamp(0.0, 1.0)
}

/// `−[p ln p + (1 − p) ln(1 − p)]` with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { q * q.ln() };
    -(term(p) + term(1.0 - p))
}

/// Mean binary entropy over a node's horizon probabilities.
pub fn node_entropy(probabilities: &[f64]) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(Error::Data("entropy needs at least one horizon".into()));
    }
    if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Data(format!("probability {p} outside [0, 1]")));
    }
    Ok(probabilities
        .iter()
        .map(|&p| binary_entropy(p))
        .sum::<f64>()
        / probabilities.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyRow {
    pub group: String,
    pub subset: String,
    pub mean_entropy: f64,
    pub node_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntropyReport {
    /// Per subset, per node: average entropy.
    pub per_node: BTreeMap<String, BTreeMap<String, f64>>,
    pub rows: Vec<EntropyRow>,
}

impl EntropyReport {
    pub const HEADER: &'static str = "group,subset,mean_entropy,node_count";

    pub fn get(&self, group: &str, subset: &str) -> Option<&EntropyRow> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.subset == subset)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:?},{}\n",
                r.group, r.subset, r.mean_entropy, r.node_count
            ));
        }
        s
    }
}

/// Mean node entropy per covariate group, for each subset's entropies.
///
/// `subsets` holds `(name, node → entropy)`; `memberships` maps each node
/// to the groups whose indicator it carries. Rows follow `groups` order,
/// then subset order; groups with no member nodes are omitted.
pub fn entropy_by_group(
    subsets: &[(String, BTreeMap<String, f64>)],
    memberships: &BTreeMap<String, BTreeSet<String>>,
    groups: &[String],
) -> EntropyReport {
    let mut rows = Vec::new();
    for group in groups {
        for (subset, entropies) in subsets {
            let vals: Vec<f64> = entropies
                .iter()
                .filter(|(node, _)| memberships.get(*node).is_some_and(|g| g.contains(group)))
                .map(|(_, &e)| e)
                .collect();
            if vals.is_empty() {
                continue;
            }
            rows.push(EntropyRow {
                group: group.clone(),
                subset: subset.clone(),
                mean_entropy: vals.iter().sum::<f64>() / vals.len() as f64,
                node_count: vals.len(),
            });
        }
    }
    EntropyReport {
        per_node: subsets.iter().cloned().collect(),
        rows,
    }
}
