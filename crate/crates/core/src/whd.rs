//! Weighted Hausdorff distance between an activation map and a point set.
//!
//! ```text
//! whd(p, Y) = 1/(S+ε) Σ_x p_x min_y d(x,y)
//!           + 1/|Y| Σ_y M_α[ p_x d(x,y) + (1-p_x) d_max ]
//! ```
//!
//! with `S = Σ_x p_x` and `M_α` the generalized (power) mean over all pixels.
//! Inside `M_α` each term is floored at `value_floor` so that `f^α` stays
//! finite when `α < 0`; where the floor binds the gradient is stopped.
//!
//! With an empty `Y` the second term is zero and `min_y d(x,y)` is taken to
//! be `d_max`, so activation on a plant-free image is penalized at full
//! distance.
//!
//! Per-target work may fan out over threads, but every reduction runs in a
//! fixed order so results are bit-identical in either [`Exec`] mode.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geom::{euclidean_distance, GridDomain, PointSet, ProbMap};
use crate::par::{self, Exec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WhdParams {
    pub epsilon: f64,
    pub alpha: f64,
    /// `None` means the diagonal of the map's domain.
    pub d_max: Option<f64>,
    pub value_floor: f64,
}

impl Default for WhdParams {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            alpha: -1.0,
            d_max: None,
            value_floor: 1e-6,
        }
    }
}

impl WhdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return domain(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.alpha == 0.0 || !self.alpha.is_finite() {
            return domain(format!("alpha must be finite and nonzero, got {}", self.alpha));
        }
        if let Some(d) = self.d_max {
            if !(d > 0.0) {
                return domain(format!("d_max must be positive, got {d}"));
            }
        }
        if !(self.value_floor > 0.0) {
            return domain(format!("value_floor must be positive, got {}", self.value_floor));
        }
        Ok(())
    }

    pub fn d_max_for(&self, dom: GridDomain) -> f64 {
        self.d_max.unwrap_or_else(|| dom.diagonal())
    }
}

/// `∂whd/∂p_x` laid out like the input map.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap {
    pub domain: GridDomain,
    pub values: Vec<f64>,
}

/// The two summands of the loss, reported separately for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WhdTerms {
    pub term1: f64,
    pub term2: f64,
}

impl WhdTerms {
    pub fn total(&self) -> f64 {
        self.term1 + self.term2
    }
}

#[inline]
fn pow_alpha(v: f64, alpha: f64) -> f64 {
    if alpha == -1.0 {
        1.0 / v
    } else {
        v.powf(alpha)
    }
}

/// Power mean `((1/n) Σ max(v, floor)^α)^(1/α)`.
pub fn generalized_mean(values: &[f64], alpha: f64, value_floor: f64) -> Result<f64> {
    if values.is_empty() {
        return domain("generalized mean of an empty list");
    }
    if alpha == 0.0 {
        return domain("alpha = 0 (geometric mean) is not supported");
    }
    let n = values.len() as f64;
    let acc: f64 = values
        .iter()
        .map(|&v| pow_alpha(v.max(value_floor), alpha))
        .sum();
    Ok((acc / n).powf(1.0 / alpha))
}

fn check_targets(dom: GridDomain, gt: &PointSet) -> Result<()> {
    match gt.iter().find(|p| !dom.contains(p)) {
        Some(p) => domain(format!(
            "ground-truth point ({}, {}) outside {}x{} map",
            p.x, p.y, dom.width, dom.height
        )),
        None => Ok(()),
    }
}

/// Loss terms and, when requested, the gradient with respect to every `p_x`.
fn evaluate(
    map: &ProbMap,
    gt: &PointSet,
    params: &WhdParams,
    want_grad: bool,
    exec: Exec,
) -> Result<(WhdTerms, Option<Vec<f64>>)> {
    params.validate()?;
    let dom = map.domain();
    check_targets(dom, gt)?;
    let p = map.values();
    let n_pix = p.len();
    let d_max = params.d_max_for(dom);
    let eps = params.epsilon;
    let alpha = params.alpha;
    let floor = params.value_floor;

    // Term 1: activation-weighted distance to the nearest target.
    let nearest: Vec<f64> = if gt.is_empty() {
        vec![d_max; n_pix]
    } else {
        (0..n_pix)
            .map(|i| {
                let x = dom.pixel_point(i);
                gt.iter()
                    .map(|y| euclidean_distance(x, *y))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let s: f64 = p.iter().sum();
    let numer: f64 = p.iter().zip(&nearest).map(|(pi, mi)| pi * mi).sum();
    let denom = s + eps;
    let term1 = numer / denom;

    let mut grad = want_grad.then(|| {
        nearest
            .iter()
            .map(|m| m / denom - numer / (denom * denom))
            .collect::<Vec<f64>>()
    });

    // Term 2: soft minimum over pixels of the blended distance, per target.
    let term2 = if gt.is_empty() {
        0.0
    } else {
        let n_gt = gt.len() as f64;
        let per_target = par::map(exec, gt.points(), |y| {
            let mut acc = 0.0;
            let mut dists = Vec::with_capacity(if want_grad { n_pix } else { 0 });
            for (i, &pi) in p.iter().enumerate() {
                let d = euclidean_distance(dom.pixel_point(i), *y);
                let f = pi * d + (1.0 - pi) * d_max;
                acc += pow_alpha(f.max(floor), alpha);
                if want_grad {
                    dists.push(d);
                }
            }
            let mean = acc / n_pix as f64;
            let m = mean.powf(1.0 / alpha);
            let contrib = want_grad.then(|| {
                // dM/dg_x = mean^(1/α - 1) g_x^(α-1) / |Ω|; dg/dp_x = d - d_max.
                let scale = mean.powf(1.0 / alpha - 1.0) / (n_pix as f64 * n_gt);
                p.iter()
                    .zip(&dists)
                    .map(|(&pi, &d)| {
                        let f = pi * d + (1.0 - pi) * d_max;
                        if f < floor {
                            0.0
                        } else {
                            scale * pow_alpha(f, alpha - 1.0) * (d - d_max)
                        }
                    })
                    .collect::<Vec<f64>>()
            });
            (m, contrib)
        });
        let mut total = 0.0;
        for (m, contrib) in per_target {
            total += m;
            if let (Some(g), Some(c)) = (grad.as_mut(), contrib) {
                for (gi, ci) in g.iter_mut().zip(c) {
                    *gi += ci;
                }
            }
        }
        total / n_gt
    };

    let terms = WhdTerms { term1, term2 };
    if !terms.total().is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {terms:?}")));
    }
    Ok((terms, grad))
}

pub fn whd_terms(map: &ProbMap, gt: &PointSet, params: &WhdParams) -> Result<WhdTerms> {
    evaluate(map, gt, params, false, Exec::Sequential).map(|(t, _)| t)
}

pub fn whd(map: &ProbMap, gt: &PointSet, params: &WhdParams) -> Result<f64> {
    whd_terms(map, gt, params).map(|t| t.total())
}

pub fn whd_gradient(map: &ProbMap, gt: &PointSet, params: &WhdParams) -> Result<(f64, GradMap)> {
    whd_gradient_with(map, gt, params, Exec::Sequential)
}

/// [`whd_gradient`] with an explicit execution mode for the per-target loop.
pub fn whd_gradient_with(
    map: &ProbMap,
    gt: &PointSet,
    params: &WhdParams,
    exec: Exec,
) -> Result<(f64, GradMap)> {
    let (terms, grad) = evaluate(map, gt, params, true, exec)?;
    let values = grad.expect("gradient requested");
    if values.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok((
        terms.total(),
        GradMap {
            domain: map.domain(),
            values,
        },
    ))
}

/// Symmetric average Hausdorff distance between two nonempty point sets.
pub fn average_hausdorff(a: &PointSet, b: &PointSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedDistance);
    }
    let directed = |from: &PointSet, to: &PointSet| {
        from.iter()
            .map(|x| {
                to.iter()
                    .map(|y| euclidean_distance(*x, *y))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(directed(a, b) + directed(b, a))
}
