//! Classification metrics per forecast horizon and the logistic baseline.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, ClassWeights, Tape, Tensor};
use crate::training::{
    adamw_step, adaptive_gradient_clip, class_weights, cosine_lr, OptimizerState, TrainConfig,
};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_inputs(probabilities: &[f64], labels: &[bool]) -> Result<()> {
    if probabilities.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if probabilities.is_empty() {
        return Err(Error::Data("no records to evaluate".into()));
    }
    if let Some((i, p)) = probabilities
        .iter()
        .enumerate()
        .find(|(_, p)| !(0.0..=1.0).contains(*p))
    {
        return Err(Error::Data(format!(
            "probability {p} at record {i} is outside [0, 1]"
        )));
    }
    Ok(())
}

/// Predicts positive iff `p ≥ threshold`.
pub fn confusion(
    probabilities: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<ConfusionCounts> {
    check_inputs(probabilities, labels)?;
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probabilities.iter().zip(labels) {
        match (p >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// A metric value with a flag for zero denominators (value 0 then).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub defined: bool,
}

impl Score {
    fn ratio(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Self {
                value: 0.0,
                defined: false,
            }
        } else {
            Self {
                value: num / den,
                defined: true,
            }
        }
    }
}

pub fn f1(c: &ConfusionCounts) -> Score {
    Score::ratio(c.tp as f64, c.tp as f64 + 0.5 * (c.fp + c.fn_) as f64)
}

pub fn sensitivity(c: &ConfusionCounts) -> Score {
    Score::ratio(c.tp as f64, (c.tp + c.fn_) as f64)
}

pub fn specificity(c: &ConfusionCounts) -> Score {
    Score::ratio(c.tn as f64, (c.tn + c.fp) as f64)
}

pub fn accuracy(c: &ConfusionCounts) -> Score {
    Score::ratio((c.tp + c.tn) as f64, c.total() as f64)
}

/// Mann–Whitney AUC from average ranks; ties count one half.
pub fn auc(probabilities: &[f64], labels: &[bool]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if probabilities.iter().any(|p| !p.is_finite()) {
        return Err(Error::Data("AUC needs finite scores".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|&a, &b| probabilities[a].total_cmp(&probabilities[b]));
    // Twice the positive rank sum, kept integral: a tie block over 1-based
    // positions i..=j has average rank (i + j) / 2.
    let mut rank_sum2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && probabilities[order[end + 1]] == probabilities[order[start]]
        {
            end += 1;
        }
        let doubled = (start + 1 + end + 1) as u128;
        let positives = order[start..=end].iter().filter(|&&i| labels[i]).count() as u128;
        rank_sum2 += doubled * positives;
        start = end + 1;
    }
    let u2 = rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Mean squared error of probabilities against 0/1 outcomes.
pub fn brier(probabilities: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(probabilities, labels)?;
    let total: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - if y { 1.0 } else { 0.0 }).powi(2))
        .sum();
    Ok(total / probabilities.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Auc,
    F1,
    Sensitivity,
    Specificity,
    Accuracy,
    Brier,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Auc,
        Metric::F1,
        Metric::Sensitivity,
        Metric::Specificity,
        Metric::Accuracy,
        Metric::Brier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::F1 => "f1",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
            Metric::Accuracy => "accuracy",
            Metric::Brier => "brier",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown metric {s:?}")))
    }
}

/// All metrics for one horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonMetrics {
    pub horizon: u32,
    pub counts: ConfusionCounts,
    pub scores: [Score; 6],
    pub support: usize,
}

impl HorizonMetrics {
    pub fn get(&self, m: Metric) -> Score {
        self.scores[m as usize]
    }

    /// Seed average: the mean over members where the metric is defined,
    /// flagged undefined when no member defines it.
    pub fn average(members: &[HorizonMetrics]) -> Result<HorizonMetrics> {
        let first = members
            .first()
            .ok_or_else(|| Error::Param("nothing to average".into()))?;
        let mut scores = [Score {
            value: 0.0,
            defined: false,
        }; 6];
        for m in Metric::ALL {
            let vals: Vec<f64> = members
                .iter()
                .map(|h| h.get(m))
                .filter(|s| s.defined)
                .map(|s| s.value)
                .collect();
            if !vals.is_empty() {
                scores[m as usize] = Score {
                    value: vals.iter().sum::<f64>() / vals.len() as f64,
                    defined: true,
                };
            }
        }
        Ok(HorizonMetrics {
            horizon: first.horizon,
            counts: first.counts,
            scores,
            support: first.support,
        })
    }
}

/// Every metric for one horizon. AUC is flagged undefined when only one
/// class is present.
pub fn evaluate_horizon(
    horizon: u32,
    probabilities: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<HorizonMetrics> {
    let counts = confusion(probabilities, labels, threshold)?;
    let auc_score = match auc(probabilities, labels) {
        Ok(v) => Score {
            value: v,
            defined: true,
        },
        Err(Error::Data(_)) => Score {
            value: 0.0,
            defined: false,
        },
        Err(e) => return Err(e),
    };
    let mut scores = [Score {
        value: 0.0,
        defined: true,
    }; 6];
    scores[Metric::Auc as usize] = auc_score;
    scores[Metric::F1 as usize] = f1(&counts);
    scores[Metric::Sensitivity as usize] = sensitivity(&counts);
    scores[Metric::Specificity as usize] = specificity(&counts);
    scores[Metric::Accuracy as usize] = accuracy(&counts);
    scores[Metric::Brier as usize] = Score {
        value: brier(probabilities, labels)?,
        defined: true,
    };
    Ok(HorizonMetrics {
        horizon,
        counts,
        scores,
        support: labels.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub subset: String,
    pub horizon: u32,
    pub metric: Metric,
    pub value: f64,
    pub defined: bool,
    pub support: usize,
}

/// One row per (model, subset, horizon, metric).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub const HEADER: &'static str = "model,subset,horizon,metric,value,defined,support";

    pub fn push(&mut self, model: &str, subset: &str, h: &HorizonMetrics) {
        for m in Metric::ALL {
            let s = h.get(m);
            self.rows.push(ReportRow {
                model: model.to_string(),
                subset: subset.to_string(),
                horizon: h.horizon,
                metric: m,
                value: s.value,
                defined: s.defined,
                support: h.support,
            });
        }
    }

    pub fn lookup(
        &self,
        model: &str,
        subset: &str,
        horizon: u32,
        metric: Metric,
    ) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.model == model && r.subset == subset && r.horizon == horizon && r.metric == metric
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:?},{},{}\n",
                r.model, r.subset, r.horizon, r.metric, r.value, r.defined, r.support
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::Parse(format!(
                "metrics report must start with {:?}",
                Self::HEADER
            )));
        }
        let rows = lines
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || Error::Parse(format!("metrics report line {}: {line:?}", i + 2));
                if f.len() != 7 {
                    return Err(bad());
                }
                Ok(ReportRow {
                    model: f[0].to_string(),
                    subset: f[1].to_string(),
                    horizon: f[2].parse().map_err(|_| bad())?,
                    metric: f[3].parse()?,
                    value: f[4].parse().map_err(|_| bad())?,
                    defined: f[5].parse().map_err(|_| bad())?,
                    support: f[6].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    /// Line chart of `metric` against horizon for one subset, one series
    /// per model.
    pub fn line_chart_svg(&self, metric: Metric, subset: &str) -> String {
        let mut models: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
        }
        let rows: Vec<&ReportRow> = self
            .rows
            .iter()
            .filter(|r| r.metric == metric && r.subset == subset && r.defined)
            .collect();
        let max_h = rows.iter().map(|r| r.horizon).max().unwrap_or(0).max(1) as f64;
        let (w, h, pad) = (480.0, 300.0, 40.0);
        let x = |hz: u32| pad + (w - 2.0 * pad) * hz as f64 / max_h;
        let y = |v: f64| h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
        let colors = [
            "#1b6ca8", "#d1495b", "#2e8b57", "#edae49", "#6a4c93", "#444444",
        ];
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
        );
        s.push_str(&format!(
            "<text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">{metric} ({subset})</text>\n"
        ));
        s.push_str(&format!(
            "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            h - pad,
            w - pad,
            h - pad
        ));
        s.push_str(&format!(
            "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
            h - pad
        ));
        for (k, model) in models.iter().enumerate() {
            let mut pts: Vec<&&ReportRow> = rows.iter().filter(|r| r.model == *model).collect();
            pts.sort_by_key(|r| r.horizon);
            if pts.is_empty() {
                continue;
            }
            let color = colors[k % colors.len()];
            let path: Vec<String> = pts
                .iter()
                .map(|r| format!("{:.1},{:.1}", x(r.horizon), y(r.value)))
                .collect();
            s.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                path.join(" ")
            ));
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{model}</text>\n",
                w - pad - 90.0,
                pad + 14.0 * k as f64
            ));
        }
        s.push_str("</svg>\n");
        s
    }
}

/// One chronological batch for the logistic baseline.
#[derive(Clone, Debug)]
pub struct LogisticBatch {
    pub features: Tensor,
    pub labels: Vec<Option<bool>>,
}

/// Affine map plus sigmoid, per-node features only, trained with the same
/// weighted BCE, AGC, AdamW and cosine schedule as the graph model (one
/// step per batch per epoch, no early stopping). Class weights default to
/// the training label balance.
pub fn logistic_baseline(
    train: &[LogisticBatch],
    test: &Tensor,
    weights: Option<ClassWeights>,
    settings: &TrainConfig,
) -> Result<Vec<f64>> {
    settings.validate()?;
    let d = test.cols();
    if let Some(b) = train
        .iter()
        .find(|b| b.features.cols() != d || b.features.rows() != b.labels.len())
    {
        return Err(Error::Shape(format!(
            "baseline batch {:?} with {} labels, test has {d} columns",
            b.features.shape(),
            b.labels.len()
        )));
    }
    let all: Vec<bool> = train
        .iter()
        .flat_map(|b| b.labels.iter().flatten().copied())
        .collect();
    let w = match weights {
        Some(w) => w,
        None => class_weights(&all)?,
    };
    if all.is_empty() {
        return Err(Error::Data("baseline has no labeled training rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let bound = (6.0 / (d + 1) as f64).sqrt();
    let mut weight = Tensor::matrix(
        d,
        1,
        (0..d).map(|_| rng.random_range(-bound..bound)).collect(),
    )?;
    let mut bias = Tensor::zeros(vec![1, 1]);
    let names = ["baseline.weight".to_string(), "baseline.bias".to_string()];
    let mut state = OptimizerState::new(&[&weight, &bias]);
    for epoch in 0..settings.epochs {
        let lr = cosine_lr(epoch, settings.epochs, settings.base_lr, settings.min_lr);
        for b in train
            .iter()
            .filter(|b| b.labels.iter().any(Option::is_some))
        {
            let mut tape = Tape::new();
            let wv = tape.param(weight.clone())?;
            let bv = tape.param(bias.clone())?;
            let x = tape.constant(b.features.clone())?;
            let z = tape.matmul(x, wv)?;
            let z = tape.add_bias(z, bv)?;
            let loss = tape.masked_bce_with_logits(z, &b.labels, w)?;
            tape.backward(loss)?;
            let gw = adaptive_gradient_clip(
                &weight,
                tape.grad(wv).expect("reached"),
                settings.agc_lambda,
            )?;
            let gb = adaptive_gradient_clip(
                &bias,
                tape.grad(bv).expect("reached"),
                settings.agc_lambda,
            )?;
            adamw_step(
                &mut [&mut weight, &mut bias],
                &[gw, gb],
                &names,
                &mut state,
                lr,
                settings.weight_decay,
            )?;
        }
    }
    Ok((0..test.rows())
        .map(|r| {
            let z: f64 = test
                .row(r)
                .iter()
                .zip(weight.values())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + bias.values()[0];
            sigmoid(z)
        })
        .collect())
}
