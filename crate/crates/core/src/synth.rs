//! Procedural crop fields and random labeled crops.
//!
//! A field is a soil background (base color, smooth value noise, optional
//! vertical flightline bands) with plants placed on a row grid. Rows run
//! along `x`. Each plant is a lobed radial blob, and its placement center
//! is the ground-truth point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geom::{extract_crop, GridDomain, LabeledSample, Point, PointSet, Rect, RgbImage};
use crate::par::{self, Exec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldDomainConfig {
    pub field_width: usize,
    pub field_height: usize,
    pub soil_base_color: [f64; 3],
    pub soil_noise_amplitude: f64,
    /// Grid spacing of the smooth noise, px.
    pub soil_noise_scale: f64,
    pub row_spacing: f64,
    pub in_row_spacing: f64,
    /// Standard deviation of the placement jitter, px.
    pub spacing_jitter: f64,
    pub plant_radius_range: [f64; 2],
    pub plant_color: [f64; 3],
    pub lobe_count_range: [u32; 2],
    pub emergence_rate: f64,
    pub flightline_banding: bool,
    pub band_width: usize,
    pub band_delta: f64,
}

const DARK_SOIL: &str = include_str!("../presets/dark-soil.json");
const LIGHT_SOIL: &str = include_str!("../presets/light-soil.json");

pub const PRESETS: [&str; 2] = ["dark-soil", "light-soil"];

impl FieldDomainConfig {
    /// `dark-soil` is the pretraining source domain (dark background, larger
    /// plants); `light-soil` is the target (light background, smaller plants).
    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "dark-soil" => DARK_SOIL,
            "light-soil" => LIGHT_SOIL,
            other => return domain(format!("unknown preset `{other}`")),
        };
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        GridDomain::new(self.field_width, self.field_height)?;
        if !(self.row_spacing > 0.0 && self.in_row_spacing > 0.0) {
            return domain("plant spacings must be positive");
        }
        let [r0, r1] = self.plant_radius_range;
        if !(r0 > 0.0 && r1 >= r0) {
            return domain(format!("bad plant radius range [{r0}, {r1}]"));
        }
        let [l0, l1] = self.lobe_count_range;
        if l0 == 0 || l1 < l0 {
            return domain(format!("bad lobe count range [{l0}, {l1}]"));
        }
        if !(0.0..=1.0).contains(&self.emergence_rate) {
            return domain(format!("emergence_rate {} outside [0, 1]", self.emergence_rate));
        }
        if !(self.spacing_jitter >= 0.0 && self.soil_noise_amplitude >= 0.0 && self.soil_noise_scale > 0.0) {
            return domain("jitter and noise amplitude must be nonnegative, noise scale positive");
        }
        if self.flightline_banding && self.band_width == 0 {
            return domain("band_width must be positive when banding is on");
        }
        Ok(())
    }

    /// Nominal plant grid before jitter and emergence: `(row ys, column xs)`.
    pub fn grid(&self) -> (Vec<f64>, Vec<f64>) {
        let axis = |spacing: f64, extent: usize| {
            (0..)
                .map(|i| spacing * (0.5 + i as f64))
                .take_while(|&v| v < extent as f64)
                .collect::<Vec<f64>>()
        };
        (
            axis(self.row_spacing, self.field_height),
            axis(self.in_row_spacing, self.field_width),
        )
    }
}

/// Bilinear value noise in `[-1, 1]` on a grid of spacing `scale`.
fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, scale: f64) -> Vec<f64> {
    let gw = (w as f64 / scale).ceil() as usize + 2;
    let gh = (h as f64 / scale).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = y as f64 / scale;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / scale;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn render_plant(img: &mut RgbImage, rng: &mut ChaCha8Rng, center: Point, cfg: &FieldDomainConfig) {
    let [r0, r1] = cfg.plant_radius_range;
    let radius = if r1 > r0 { rng.gen_range(r0..r1) } else { r0 };
    let [l0, l1] = cfg.lobe_count_range;
    let lobes = rng.gen_range(l0..=l1) as f64;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let shade = rng.gen_range(0.85..1.15);
    let (w, h) = (img.width() as i64, img.height() as i64);
    let reach = radius.ceil() as i64 + 1;
    let (cx, cy) = (center.x.round() as i64, center.y.round() as i64);
    for y in (cy - reach).max(0)..(cy + reach + 1).min(h) {
        for x in (cx - reach).max(0)..(cx + reach + 1).min(w) {
            let (dx, dy) = (x as f64 - center.x, y as f64 - center.y);
            let dist = dx.hypot(dy);
            let theta = dy.atan2(dx);
            let edge = radius * (0.55 + 0.45 * (0.5 * lobes * theta + phase).cos().abs());
            let edge = edge.max(0.35 * radius);
            let cover = (edge - dist + 0.5).clamp(0.0, 1.0);
            if cover <= 0.0 {
                continue;
            }
            let bright = shade * (1.15 - 0.35 * (dist / radius).min(1.0));
            let (ux, uy) = (x as usize, y as usize);
            let old = img.pixel(ux, uy);
            let mut px = [0.0; 3];
            for c in 0..3 {
                let leaf = (cfg.plant_color[c] * bright).clamp(0.0, 1.0);
                px[c] = old[c] * (1.0 - cover) + leaf * cover;
            }
            img.set_pixel(ux, uy, px);
        }
    }
}

/// Renders a field and returns it with every rendered plant's center.
pub fn generate_field(cfg: &FieldDomainConfig, seed: u64) -> Result<(RgbImage, PointSet)> {
    cfg.validate()?;
    let (rows, cols) = cfg.grid();
    if rows.is_empty() || cols.is_empty() {
        return domain("plant grid has no positions inside the field");
    }
    let (w, h) = (cfg.field_width, cfg.field_height);
    let dom = GridDomain::new(w, h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let noise = value_noise(&mut rng, w, h, cfg.soil_noise_scale);
    let mut img = RgbImage::filled(dom, cfg.soil_base_color);
    for c in 0..3 {
        let tint = 1.0 + 0.15 * (c as f64 - 1.0);
        let base = cfg.soil_base_color[c];
        for (i, v) in img.channel_mut(c).iter_mut().enumerate() {
            let x = i % w;
            let band = if cfg.flightline_banding && (x / cfg.band_width) % 2 == 1 {
                cfg.band_delta
            } else {
                0.0
            };
            let grain = rng.gen_range(-0.3..0.3) * cfg.soil_noise_amplitude;
            *v = (base + tint * cfg.soil_noise_amplitude * noise[i] + grain + band).clamp(0.0, 1.0);
        }
    }

    let jitter = Normal::new(0.0, cfg.spacing_jitter.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut centers = Vec::new();
    for &ry in &rows {
        for &cx in &cols {
            let (jx, jy) = if cfg.spacing_jitter > 0.0 {
                (jitter.sample(&mut rng), jitter.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            let emerged = rng.gen::<f64>() < cfg.emergence_rate;
            if !emerged {
                continue;
            }
            let p = Point::new(
                (cx + jx).clamp(0.0, (w - 1) as f64),
                (ry + jy).clamp(0.0, (h - 1) as f64),
            );
            render_plant(&mut img, &mut rng, p, cfg);
            centers.push(p);
        }
    }
    Ok((img, PointSet::new(centers)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSplit {
    pub train: Rect,
    pub val: Rect,
    pub test: Rect,
}

impl RegionSplit {
    pub fn get(&self, band: Band) -> Rect {
        match band {
            Band::Train => self.train,
            Band::Val => self.val,
            Band::Test => self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Train,
    Val,
    Test,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Train, Band::Val, Band::Test];

    pub fn name(self) -> &'static str {
        match self {
            Band::Train => "train",
            Band::Val => "val",
            Band::Test => "test",
        }
    }
}

/// Splits the field into three full-height vertical bands, left to right,
/// with widths proportional to `fractions`. Every band must be at least
/// `min_width` px wide so a crop of that side fits.
pub fn split_regions(field_width: usize, field_height: usize, fractions: [f64; 3], min_width: usize) -> Result<RegionSplit> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return domain(format!("fractions {fractions:?} must be nonnegative and sum to 1"));
    }
    let w0 = (fractions[0] * field_width as f64).round() as usize;
    let w1 = (fractions[1] * field_width as f64).round() as usize;
    let w2 = field_width.checked_sub(w0 + w1).ok_or_else(|| Error::Domain("bands exceed field".into()))?;
    for (name, w) in [("train", w0), ("val", w1), ("test", w2)] {
        if w < min_width.max(1) {
            return domain(format!("{name} band is {w} px wide, narrower than {} px", min_width.max(1)));
        }
    }
    Ok(RegionSplit {
        train: Rect::new(0, 0, w0, field_height),
        val: Rect::new(w0, 0, w1, field_height),
        test: Rect::new(w0 + w1, 0, w2, field_height),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Inclusive range of crop width and height, px.
    pub side_range: [usize; 2],
    /// Side of the square resampled output.
    pub out_size: usize,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            side_range: [48, 160],
            out_size: 64,
        }
    }
}

/// Placement of one crop in field coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropPlacement {
    pub rect: Rect,
}

/// Crop rectangle for crop `index`; width and height are drawn
/// independently and uniformly from `side_range`, the origin uniformly
/// inside `region`.
pub fn crop_placement(region: Rect, side_range: [usize; 2], seed: u64, index: u64) -> CropPlacement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let w = rng.gen_range(side_range[0]..=side_range[1]);
    let h = rng.gen_range(side_range[0]..=side_range[1]);
    let x = region.x + rng.gen_range(0..=region.width - w);
    let y = region.y + rng.gen_range(0..=region.height - h);
    CropPlacement {
        rect: Rect::new(x, y, w, h),
    }
}

fn check_crop_spec(region: Rect, spec: &CropSpec) -> Result<()> {
    let [lo, hi] = spec.side_range;
    if lo == 0 || hi < lo {
        return domain(format!("bad side range [{lo}, {hi}]"));
    }
    if hi > region.width || hi > region.height {
        return domain(format!(
            "crop side up to {hi} px does not fit region {}x{}",
            region.width, region.height
        ));
    }
    if spec.out_size == 0 {
        return domain("out_size must be positive");
    }
    Ok(())
}

/// Cuts one crop and resamples it to `out_size`, scaling its points by the
/// same transform.
pub fn make_sample(image: &RgbImage, points: &PointSet, rect: Rect, out_size: usize) -> Result<LabeledSample> {
    let (crop, pts) = extract_crop(image, points, rect)?;
    let img = crop.resize_bilinear(out_size, out_size)?;
    let sx = out_size as f64 / rect.width as f64;
    let sy = out_size as f64 / rect.height as f64;
    let top = out_size as f64 - 1e-9;
    let scaled = pts
        .iter()
        .map(|p| Point::new((p.x * sx).min(top), (p.y * sy).min(top)))
        .collect();
    LabeledSample::new(img, scaled)
}

/// `n` random crops from `region`, each with its own derived random stream,
/// so the result does not depend on the execution mode.
pub fn random_crops(
    field: &(RgbImage, PointSet),
    region: Rect,
    n: usize,
    spec: &CropSpec,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    random_crops_with(field, region, n, spec, seed, Exec::default())
}

pub fn random_crops_with(
    field: &(RgbImage, PointSet),
    region: Rect,
    n: usize,
    spec: &CropSpec,
    seed: u64,
    exec: Exec,
) -> Result<Vec<LabeledSample>> {
    if n == 0 {
        return domain("need at least one crop");
    }
    check_crop_spec(region, spec)?;
    let full = Rect::new(0, 0, field.0.width(), field.0.height());
    if !full.contains_rect(&region) {
        return domain(format!("region {region:?} outside the field"));
    }
    par::map_range(exec, n, |i| {
        let place = crop_placement(region, spec.side_range, seed, i as u64);
        make_sample(&field.0, &field.1, place.rect, spec.out_size)
    })
    .into_iter()
    .collect()
}
