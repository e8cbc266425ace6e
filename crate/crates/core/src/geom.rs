//! Points, grids and images shared by every stage of the pipeline.
//!
//! Coordinates follow raster convention: `x` is the column, `y` the row,
//! origin at the top-left. Pixel `(row i, col j)` sits at `x = j, y = i`.
//! Sub-pixel positions are allowed everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point) -> f64 {
        euclidean_distance(*self, *other)
    }
}

pub fn euclidean_distance(a: Point, b: Point) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Ordered list of points, all with finite coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointSet(Vec<Point>);

impl PointSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return domain(format!("non-finite point ({}, {})", p.x, p.y));
        }
        Ok(Self(points))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.0.iter()
    }

    pub fn into_inner(self) -> Vec<Point> {
        self.0
    }

    /// Same set shifted by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self(self.0.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect())
    }
}

impl FromIterator<Point> for PointSet {
    fn from_iter<I: IntoIterator<Item = Point>>(iter: I) -> Self {
        let v: Vec<Point> = iter.into_iter().collect();
        debug_assert!(v.iter().all(Point::is_finite));
        Self(v)
    }
}

impl<'a> IntoIterator for &'a PointSet {
    type Item = &'a Point;
    type IntoIter = std::slice::Iter<'a, Point>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDomain {
    pub width: usize,
    pub height: usize,
}

impl GridDomain {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return domain(format!("empty grid {width}x{height}"));
        }
        Ok(Self { width, height })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    /// Number of pixels, `|Ω|`.
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Length of the grid diagonal, the largest distance realizable in the domain.
    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    /// Half-open containment: `0 <= x < width` and `0 <= y < height`.
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }

    /// Position of the pixel with row-major index `idx`.
    #[inline]
    pub fn pixel_point(&self, idx: usize) -> Point {
        Point::new((idx % self.width) as f64, (idx / self.width) as f64)
    }
}

/// Axis-aligned, half-open pixel rectangle `[x, x+width) × [y, y+height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x as f64
            && p.y >= self.y as f64
            && p.x < (self.x + self.width) as f64
            && p.y < (self.y + self.height) as f64
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.width <= self.x + self.width
            && other.y + other.height <= self.y + self.height
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.x + other.width
            && other.x < self.x + self.width
            && self.y < other.y + other.height
            && other.y < self.y + self.height
    }
}

/// Per-pixel activations in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    domain: GridDomain,
    values: Vec<f64>,
}

impl ProbMap {
    pub fn new(domain: GridDomain, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::Shape(format!(
                "map has {} values for a {}x{} domain",
                values.len(),
                domain.width,
                domain.height
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return crate::error::domain(format!("activation {v} outside [0, 1]"));
        }
        Ok(Self { domain, values })
    }

    pub fn filled(domain: GridDomain, value: f64) -> Result<Self> {
        Self::new(domain, vec![value; domain.len()])
    }

    /// Builds a map from `f(x, y)`; the result must stay in `[0, 1]`.
    pub fn from_fn(domain: GridDomain, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let values = (0..domain.len())
            .map(|i| f(i % domain.width, i / domain.width))
            .collect();
        Self::new(domain, values)
    }

    pub fn domain(&self) -> GridDomain {
        self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.domain.width + x]
    }

    /// Evaluation without the range check; used by finite-difference tests
    /// that step slightly outside `[0, 1]`.
    #[cfg(test)]
    pub(crate) fn from_raw(domain: GridDomain, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), domain.len());
        Self { domain, values }
    }
}

/// Planar RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    domain: GridDomain,
    channels: [Vec<f64>; 3],
}

impl RgbImage {
    pub fn new(domain: GridDomain, channels: [Vec<f64>; 3]) -> Result<Self> {
        for c in &channels {
            if c.len() != domain.len() {
                return Err(Error::Shape(format!(
                    "channel has {} values for a {}x{} domain",
                    c.len(),
                    domain.width,
                    domain.height
                )));
            }
        }
        Ok(Self { domain, channels })
    }

    pub fn filled(domain: GridDomain, rgb: [f64; 3]) -> Self {
        Self {
            domain,
            channels: rgb.map(|v| vec![v; domain.len()]),
        }
    }

    pub fn domain(&self) -> GridDomain {
        self.domain
    }

    pub fn width(&self) -> usize {
        self.domain.width
    }

    pub fn height(&self) -> usize {
        self.domain.height
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>; 3] {
        &self.channels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = y * self.domain.width + x;
        [self.channels[0][i], self.channels[1][i], self.channels[2][i]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = y * self.domain.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.channels[c][i] = v;
        }
    }

    /// Bilinear resample to `out_w × out_h`. Output pixel `j` samples the
    /// source at `j * src_w / out_w`, so a source point `p` maps to
    /// `p * out_w / src_w`.
    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Result<RgbImage> {
        let out = GridDomain::new(out_w, out_h)?;
        let (sw, sh) = (self.domain.width, self.domain.height);
        let sx = sw as f64 / out_w as f64;
        let sy = sh as f64 / out_h as f64;
        let taps = |pos: f64, n: usize| {
            let pos = pos.clamp(0.0, (n - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, pos - i0 as f64)
        };
        let xs: Vec<_> = (0..out_w).map(|j| taps(j as f64 * sx, sw)).collect();
        let mut channels: [Vec<f64>; 3] = Default::default();
        for (c, dst) in channels.iter_mut().enumerate() {
            let src = &self.channels[c];
            dst.reserve(out.len());
            for i in 0..out_h {
                let (y0, y1, fy) = taps(i as f64 * sy, sh);
                for &(x0, x1, fx) in &xs {
                    let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
                    let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
                    dst.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        RgbImage::new(out, channels)
    }
}

/// An image crop with its ground-truth centers.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: RgbImage,
    pub centers: PointSet,
    pub count: usize,
}

impl LabeledSample {
    pub fn new(image: RgbImage, centers: PointSet) -> Result<Self> {
        let dom = image.domain();
        if let Some(p) = centers.iter().find(|p| !dom.contains(p)) {
            return domain(format!(
                "center ({}, {}) outside {}x{} image",
                p.x, p.y, dom.width, dom.height
            ));
        }
        let count = centers.len();
        Ok(Self {
            image,
            centers,
            count,
        })
    }
}

/// Pixel-exact crop of `rect` from `image`. Points inside the half-open
/// rectangle are kept and shifted into crop coordinates; the rest are dropped.
pub fn extract_crop(image: &RgbImage, points: &PointSet, rect: Rect) -> Result<(RgbImage, PointSet)> {
    let full = Rect::new(0, 0, image.width(), image.height());
    if rect.width == 0 || rect.height == 0 || !full.contains_rect(&rect) {
        return domain(format!(
            "crop {rect:?} outside {}x{} image",
            image.width(),
            image.height()
        ));
    }
    let dom = GridDomain::new(rect.width, rect.height)?;
    let mut channels: [Vec<f64>; 3] = Default::default();
    for (c, dst) in channels.iter_mut().enumerate() {
        let src = image.channel(c);
        dst.reserve(dom.len());
        for row in rect.y..rect.y + rect.height {
            let start = row * image.width() + rect.x;
            dst.extend_from_slice(&src[start..start + rect.width]);
        }
    }
    let kept = points
        .iter()
        .filter(|p| rect.contains(p))
        .map(|p| Point::new(p.x - rect.x as f64, p.y - rect.y as f64))
        .collect();
    Ok((RgbImage::new(dom, channels)?, kept))
}
