//! Probability map → plant centers.
//!
//! Otsu threshold on a 256-bin histogram, binarize, then fit a
//! Gaussian mixture by EM to the foreground pixels (weighted by their
//! activation). The mixture means are the centers. The number of components
//! comes from the count estimate when there is one, otherwise from the
//! number of 8-connected foreground components.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{domain, Result};
use crate::geom::{GridDomain, Point, PointSet, ProbMap};

pub const HISTOGRAM_BINS: usize = 256;
/// Smallest covariance eigenvalue, px².
pub const VARIANCE_FLOOR: f64 = 0.25;
/// Initial isotropic covariance, px².
pub const INITIAL_VARIANCE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    pub value: f64,
    /// Set when the map occupies fewer than two histogram bins, so no cut
    /// separates two classes. `value` is then the map maximum.
    pub degenerate: bool,
}

#[inline]
pub fn bin_of(v: f64) -> usize {
    ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

pub fn histogram(map: &ProbMap) -> [u64; HISTOGRAM_BINS] {
    let mut h = [0u64; HISTOGRAM_BINS];
    for &v in map.values() {
        h[bin_of(v)] += 1;
    }
    h
}

/// Cut `k` in `1..256` maximizing between-class variance when bins `< k`
/// form one class and bins `>= k` the other; the first maximum wins ties.
/// `None` when fewer than two bins are occupied.
pub fn otsu_cut(hist: &[u64; HISTOGRAM_BINS]) -> Option<usize> {
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, f64)> = None;
    for k in 1..HISTOGRAM_BINS {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // n0 n1 (μ0 - μ1)² up to the constant 1/N², from exact integer sums.
        let d = s0 as i128 * n1 as i128 - (s - s0) as i128 * n0 as i128;
        let var = (d as f64) * (d as f64) / (n0 as f64 * n1 as f64);
        if best.map_or(true, |(_, b)| var > b) {
            best = Some((k, var));
        }
    }
    best.map(|(k, _)| k)
}

pub fn otsu_threshold(map: &ProbMap) -> Threshold {
    match otsu_cut(&histogram(map)) {
        Some(k) => Threshold {
            value: k as f64 / HISTOGRAM_BINS as f64,
            degenerate: false,
        },
        None => Threshold {
            value: map.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            degenerate: true,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub domain: GridDomain,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Foreground where the activation is strictly above `t`.
pub fn binarize(map: &ProbMap, t: f64) -> BinaryMask {
    BinaryMask {
        domain: map.domain(),
        bits: map.values().iter().map(|&v| v > t).collect(),
    }
}

/// 8-connected foreground components as `(x, y)` pixel lists, in raster
/// order of their first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let (w, h) = (mask.domain.width, mask.domain.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            comp.push((x, y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bits[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedPoint {
    pub x: f64,
    pub y: f64,
    pub w: f64,
}

/// Symmetric 2×2 matrix `[[xx, xy], [xy, yy]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cov2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Cov2 {
    pub fn isotropic(v: f64) -> Self {
        Self { xx: v, xy: 0.0, yy: v }
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn eigenvalues(&self) -> (f64, f64) {
        let mid = 0.5 * (self.xx + self.yy);
        let r = (0.5 * (self.xx - self.yy)).hypot(self.xy);
        (mid - r, mid + r)
    }

    /// Raises every eigenvalue below `floor` to `floor`, keeping eigenvectors.
    pub fn floored(&self, floor: f64) -> Self {
        let (lo, hi) = self.eigenvalues();
        if lo >= floor {
            return *self;
        }
        let (l1, l2) = (lo.max(floor), hi.max(floor));
        // Unit eigenvector of the larger eigenvalue.
        let (vx, vy) = if self.xy.abs() > 1e-300 {
            let (vx, vy) = (hi - self.yy, self.xy);
            let n = vx.hypot(vy);
            (vx / n, vy / n)
        } else if self.xx >= self.yy {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        // Σ = l2 v vᵀ + l1 u uᵀ with u ⟂ v.
        Self {
            xx: l2 * vx * vx + l1 * vy * vy,
            xy: (l2 - l1) * vx * vy,
            yy: l2 * vy * vy + l1 * vx * vx,
        }
    }

    fn log_pdf(&self, mean: &Point, x: f64, y: f64) -> f64 {
        let det = self.det();
        let (dx, dy) = (x - mean.x, y - mean.y);
        let q = (self.yy * dx * dx - 2.0 * self.xy * dx * dy + self.xx * dy * dy) / det;
        -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * q
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmState {
    pub means: Vec<Point>,
    pub covariances: Vec<Cov2>,
    pub weights: Vec<f64>,
    /// Weighted log-likelihood `Σ_i w_i log Σ_k π_k N(x_i | μ_k, Σ_k)`.
    pub log_likelihood: f64,
    /// Log-likelihood at the initial parameters and after every iteration.
    pub trace: Vec<f64>,
}

impl GmmState {
    pub fn k(&self) -> usize {
        self.means.len()
    }
}

/// 8-connected groups of points after rounding to the pixel grid.
fn point_components(points: &[WeightedPoint]) -> Vec<Vec<usize>> {
    let xs = points.iter().map(|p| p.x.round() as i64);
    let ys = points.iter().map(|p| p.y.round() as i64);
    let (x0, x1) = (xs.clone().min().unwrap_or(0), xs.max().unwrap_or(0));
    let (y0, y1) = (ys.clone().min().unwrap_or(0), ys.max().unwrap_or(0));
    let (w, h) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); w * h];
    for (i, p) in points.iter().enumerate() {
        let cx = (p.x.round() as i64 - x0) as usize;
        let cy = (p.y.round() as i64 - y0) as usize;
        cells[cy * w + cx].push(i);
    }
    let mask = BinaryMask {
        domain: GridDomain { width: w, height: h },
        bits: cells.iter().map(|c| !c.is_empty()).collect(),
    };
    connected_components(&mask)
        .into_iter()
        .map(|comp| comp.into_iter().flat_map(|(x, y)| cells[y * w + x].iter().copied()).collect())
        .collect()
}

fn weighted_centroid(points: &[WeightedPoint], idx: impl Iterator<Item = usize>) -> Point {
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for i in idx {
        let p = &points[i];
        sx += p.w * p.x;
        sy += p.w * p.y;
        sw += p.w;
    }
    Point::new(sx / sw, sy / sw)
}

/// Component centroids of the `k` largest components when there are enough,
/// otherwise k-means++ seeding.
fn initial_means(points: &[WeightedPoint], k: usize, seed: u64) -> Vec<Point> {
    let mut comps = point_components(points);
    if k <= comps.len() {
        // Stable sort keeps raster order among equal sizes.
        comps.sort_by(|a, b| b.len().cmp(&a.len()));
        return comps[..k]
            .iter()
            .map(|c| weighted_centroid(points, c.iter().copied()))
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, scores: &[f64]| -> usize {
        let total: f64 = scores.iter().sum();
        if !(total > 0.0) {
            return rng.gen_range(0..scores.len());
        }
        let mut u = rng.gen_range(0.0..total);
        for (i, s) in scores.iter().enumerate() {
            if u < *s {
                return i;
            }
            u -= s;
        }
        scores.len() - 1
    };
    let weights: Vec<f64> = points.iter().map(|p| p.w).collect();
    let first = pick(&mut rng, &weights);
    let mut means = vec![Point::new(points[first].x, points[first].y)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| (p.x - means[0].x).powi(2) + (p.y - means[0].y).powi(2))
        .collect();
    while means.len() < k {
        let scores: Vec<f64> = points.iter().zip(&d2).map(|(p, d)| p.w * d).collect();
        let i = pick(&mut rng, &scores);
        let m = Point::new(points[i].x, points[i].y);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min((p.x - m.x).powi(2) + (p.y - m.y).powi(2));
        }
        means.push(m);
    }
    means
}

/// E-step: fills `resp` (row per point) and returns the weighted log-likelihood.
fn e_step(points: &[WeightedPoint], means: &[Point], covs: &[Cov2], pis: &[f64], resp: &mut [f64]) -> f64 {
    let k = means.len();
    let log_pi: Vec<f64> = pis.iter().map(|p| p.ln()).collect();
    let mut ll = 0.0;
    for (i, p) in points.iter().enumerate() {
        let row = &mut resp[i * k..(i + 1) * k];
        let mut mx = f64::NEG_INFINITY;
        for j in 0..k {
            row[j] = log_pi[j] + covs[j].log_pdf(&means[j], p.x, p.y);
            mx = mx.max(row[j]);
        }
        let mut sum = 0.0;
        for r in row.iter_mut() {
            *r = (*r - mx).exp();
            sum += *r;
        }
        for r in row.iter_mut() {
            *r /= sum;
        }
        ll += p.w * (mx + sum.ln());
    }
    ll
}

/// Weighted EM for a `k`-component 2-D Gaussian mixture. Stops when the
/// log-likelihood gain drops below `tol` or after `max_iters` iterations.
pub fn em_gmm(points: &[WeightedPoint], k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<GmmState> {
    if k == 0 {
        return domain("em_gmm needs k >= 1");
    }
    if k > points.len() {
        return domain(format!("k = {k} exceeds {} points", points.len()));
    }
    if points.iter().any(|p| !(p.w >= 0.0) || !p.x.is_finite() || !p.y.is_finite()) {
        return domain("points need finite coordinates and nonnegative weights");
    }
    let total_w: f64 = points.iter().map(|p| p.w).sum();
    if !(total_w > 0.0) {
        return domain("total point weight is zero");
    }

    let mut means = initial_means(points, k, seed);
    let mut covs = vec![Cov2::isotropic(INITIAL_VARIANCE); k];
    let mut pis = vec![1.0 / k as f64; k];
    let mut resp = vec![0.0; points.len() * k];
    let mut ll = e_step(points, &means, &covs, &pis, &mut resp);
    let mut trace = vec![ll];

    for _ in 0..max_iters {
        for j in 0..k {
            let (mut nk, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for (i, p) in points.iter().enumerate() {
                let r = p.w * resp[i * k + j];
                nk += r;
                sx += r * p.x;
                sy += r * p.y;
            }
            pis[j] = nk / total_w;
            if nk <= 1e-12 * total_w {
                // Dead component: any mean is optimal at zero weight.
                continue;
            }
            let m = Point::new(sx / nk, sy / nk);
            let (mut cxx, mut cxy, mut cyy) = (0.0, 0.0, 0.0);
            for (i, p) in points.iter().enumerate() {
                let r = p.w * resp[i * k + j];
                let (dx, dy) = (p.x - m.x, p.y - m.y);
                cxx += r * dx * dx;
                cxy += r * dx * dy;
                cyy += r * dy * dy;
            }
            means[j] = m;
            covs[j] = Cov2 {
                xx: cxx / nk,
                xy: cxy / nk,
                yy: cyy / nk,
            }
            .floored(VARIANCE_FLOOR);
        }
        // Dead components would give ln(0); keep them out of the mixture.
        let live: Vec<f64> = pis.iter().map(|&p| p.max(f64::MIN_POSITIVE)).collect();
        let next = e_step(points, &means, &covs, &live, &mut resp);
        trace.push(next);
        let gain = next - ll;
        ll = next;
        if gain < tol {
            break;
        }
    }

    Ok(GmmState {
        means,
        covariances: covs,
        weights: pis,
        log_likelihood: ll,
        trace,
    })
}

pub const EM_SEED: u64 = 0;
pub const EM_MAX_ITERS: usize = 100;
pub const EM_TOL: f64 = 1e-6;

/// Full pipeline. `count_estimate` is rounded and clamped to
/// `[0, |foreground|]`; when absent the component count is used.
pub fn extract_centers(map: &ProbMap, count_estimate: Option<f64>) -> PointSet {
    let t = otsu_threshold(map);
    let mask = binarize(map, t.value);
    let fg: Vec<WeightedPoint> = mask
        .bits
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| {
            let p = map.domain().pixel_point(i);
            WeightedPoint {
                x: p.x,
                y: p.y,
                w: map.values()[i],
            }
        })
        .collect();
    if fg.is_empty() {
        return PointSet::empty();
    }
    let k = match count_estimate {
        Some(c) if c.is_finite() => c.round().clamp(0.0, fg.len() as f64) as usize,
        Some(_) => 0,
        None => connected_components(&mask).len(),
    };
    if k == 0 {
        return PointSet::empty();
    }
    match em_gmm(&fg, k, EM_SEED, EM_MAX_ITERS, EM_TOL) {
        Ok(state) => state.means.into_iter().collect(),
        Err(_) => PointSet::empty(),
    }
}
