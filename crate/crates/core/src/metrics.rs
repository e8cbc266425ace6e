//! Localization and counting metrics.
//!
//! A prediction within distance `r` (inclusive) of a ground-truth point is a
//! true positive. Two matching disciplines are offered: many-to-one, where
//! several predictions may claim the same plant, and greedy one-to-one.
//! Precision and recall are micro-averaged over a dataset; F1 is the usual
//! harmonic mean `2PR / (P + R)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geom::{euclidean_distance, LabeledSample, PointSet};
use crate::par::{self, Exec};
use crate::whd::average_hausdorff;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    #[default]
    ManyToOne,
    OneToOne,
}

impl std::str::FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "many-to-one" => Ok(MatchMode::ManyToOne),
            "one-to-one" => Ok(MatchMode::OneToOne),
            other => domain(format!("unknown match mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub r: f64,
    pub mode: MatchMode,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            r: 5.0,
            mode: MatchMode::ManyToOne,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::Add for MatchResult {
    type Output = MatchResult;

    fn add(self, o: MatchResult) -> MatchResult {
        MatchResult {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

pub fn match_points(pred: &PointSet, gt: &PointSet, params: &MatchParams) -> MatchResult {
    let r = params.r;
    match params.mode {
        MatchMode::ManyToOne => {
            let tp = pred
                .iter()
                .filter(|p| gt.iter().any(|g| euclidean_distance(**p, *g) <= r))
                .count();
            let fn_ = gt
                .iter()
                .filter(|g| !pred.iter().any(|p| euclidean_distance(*p, **g) <= r))
                .count();
            MatchResult {
                tp,
                fp: pred.len() - tp,
                fn_,
            }
        }
        MatchMode::OneToOne => {
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for (i, p) in pred.iter().enumerate() {
                for (j, g) in gt.iter().enumerate() {
                    let d = euclidean_distance(*p, *g);
                    if d <= r {
                        pairs.push((d, i, j));
                    }
                }
            }
            pairs.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            let mut used_p = vec![false; pred.len()];
            let mut used_g = vec![false; gt.len()];
            let mut tp = 0;
            for (_, i, j) in pairs {
                if !used_p[i] && !used_g[j] {
                    used_p[i] = true;
                    used_g[j] = true;
                    tp += 1;
                }
            }
            MatchResult {
                tp,
                fp: pred.len() - tp,
                fn_: gt.len() - tp,
            }
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// `(precision, recall, f1)`; any `0/0` is reported as 0.
pub fn precision_recall_f1(m: &MatchResult) -> (f64, f64, f64) {
    let p = ratio(m.tp, m.tp + m.fp);
    let r = ratio(m.tp, m.tp + m.fn_);
    (p, r, f1_score(p, r))
}

/// Average Hausdorff distance with the empty-set conventions used for
/// MAHD: exactly one empty side costs `d_max`, both empty cost nothing.
pub fn image_ahd(pred: &PointSet, gt: &PointSet, d_max: f64) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 0.0;
    }
    average_hausdorff(pred, gt).unwrap_or(d_max)
}

/// Mean over images of [`image_ahd`].
pub fn mahd(pairs: &[(PointSet, PointSet)], d_max: f64) -> Result<f64> {
    if pairs.is_empty() {
        return domain("mahd over an empty list");
    }
    let total: f64 = pairs.iter().map(|(p, g)| image_ahd(p, g, d_max)).sum();
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountErrors {
    /// Percent; `None` when every true count is zero.
    pub mape: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
}

/// MAE and RMSE over all images; MAPE over images with a nonzero true count.
pub fn count_errors(truths: &[f64], estimates: &[f64]) -> Result<CountErrors> {
    if truths.len() != estimates.len() {
        return Err(Error::Shape(format!(
            "{} true counts vs {} estimates",
            truths.len(),
            estimates.len()
        )));
    }
    if truths.is_empty() {
        return domain("count errors over an empty list");
    }
    let n = truths.len() as f64;
    let (mut abs, mut sq, mut pct, mut included) = (0.0, 0.0, 0.0, 0usize);
    for (&c, &est) in truths.iter().zip(estimates) {
        let e = est - c;
        abs += e.abs();
        sq += e * e;
        if c != 0.0 {
            pct += e.abs() / c;
            included += 1;
        }
    }
    Ok(CountErrors {
        mape: (included > 0).then(|| 100.0 * pct / included as f64),
        mae: abs / n,
        rmse: (sq / n).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mahd: f64,
    pub mape: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
    pub n_images: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for MetricsReport {
    /// Two-column table, rows in the order Precision, Recall, F1 Score,
    /// MAHD, MAPE, MAE, RMSE.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: f64| format!("{:.1}%", 100.0 * v);
        let rows = [
            ("Precision", pct(self.precision)),
            ("Recall", pct(self.recall)),
            ("F1 Score", pct(self.f1)),
            ("MAHD", format!("{:.1}", self.mahd)),
            ("MAPE", self.mape.map_or_else(|| "n/a".to_string(), |m| format!("{m:.1}%"))),
            ("MAE", format!("{:.1}", self.mae)),
            ("RMSE", format!("{:.1}", self.rmse)),
        ];
        writeln!(f, "{:<10} {:>10}", "Metric", "Value")?;
        for (name, value) in rows {
            writeln!(f, "{name:<10} {value:>10}")?;
        }
        write!(f, "({} images)", self.n_images)
    }
}

/// Aggregate metrics for aligned `(centers, count estimate)` predictions.
///
/// TP/FP/FN are pooled over all images before computing precision and
/// recall. MAHD uses the image diagonal as `d_max` for empty sets.
pub fn evaluate(dataset: &[LabeledSample], predictions: &[(PointSet, f64)], params: &MatchParams) -> Result<MetricsReport> {
    evaluate_with(dataset, predictions, params, Exec::default())
}

pub fn evaluate_with(
    dataset: &[LabeledSample],
    predictions: &[(PointSet, f64)],
    params: &MatchParams,
    exec: Exec,
) -> Result<MetricsReport> {
    if dataset.len() != predictions.len() {
        return domain(format!(
            "{} samples but {} predictions",
            dataset.len(),
            predictions.len()
        ));
    }
    if dataset.is_empty() {
        return domain("evaluate over an empty dataset");
    }
    if !(params.r > 0.0) {
        return domain(format!("match radius must be positive, got {}", params.r));
    }
    let per_image = par::map_range(exec, dataset.len(), |i| {
        let s = &dataset[i];
        let (pred, _) = &predictions[i];
        let d_max = s.image.domain().diagonal();
        let ahd = image_ahd(pred, &s.centers, d_max);
        (match_points(pred, &s.centers, params), ahd)
    });
    let mut pooled = MatchResult::default();
    let mut ahd_sum = 0.0;
    for (m, a) in &per_image {
        pooled = pooled + *m;
        ahd_sum += a;
    }
    let (precision, recall, f1) = precision_recall_f1(&pooled);
    let truths: Vec<f64> = dataset.iter().map(|s| s.count as f64).collect();
    let estimates: Vec<f64> = predictions.iter().map(|(_, c)| *c).collect();
    let counts = count_errors(&truths, &estimates)?;
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        mahd: ahd_sum / dataset.len() as f64,
        mape: counts.mape,
        mae: counts.mae,
        rmse: counts.rmse,
        n_images: dataset.len(),
    })
}
