//! Dataset directories.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/0000.ppm   crop image, 8-bit binary PPM
//! <dir>/0000.csv   centers in crop pixels, header `x,y`
//! ...
//! ```

use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geom::{LabeledSample, Rect};
use crate::io;
use crate::par::Exec;
use crate::synth::{self, Band, CropSpec, FieldDomainConfig};

pub const DATASET_FORMAT: &str = "hausloc-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub domain: String,
    pub band: Band,
    pub field: FieldDomainConfig,
    pub field_seed: u64,
    pub crop_seed: u64,
    pub region: Rect,
    pub crops: CropSpec,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_samples(&self, samples: Vec<LabeledSample>) -> Self {
        let mut manifest = self.manifest.clone();
        manifest.len = samples.len();
        Self { manifest, samples }
    }
}

fn stem(i: usize) -> String {
    format!("{i:04}")
}

pub fn write_dataset(data: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, s) in data.samples.iter().enumerate() {
        io::save_ppm(&s.image, dir.join(format!("{}.ppm", stem(i))))?;
        io::save_points_csv(&s.centers, dir.join(format!("{}.csv", stem(i))))?;
    }
    let mut manifest = data.manifest.clone();
    manifest.len = data.samples.len();
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Format(format!("{}: cannot read manifest.json: {e}", dir.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unexpected dataset format `{}`", manifest.format)));
    }
    if manifest.version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", manifest.version)));
    }
    let samples = (0..manifest.len)
        .map(|i| {
            let image = io::load_ppm(dir.join(format!("{}.ppm", stem(i))))?;
            let centers = io::load_points_csv(dir.join(format!("{}.csv", stem(i))))?;
            LabeledSample::new(image, centers)
        })
        .collect::<Result<Vec<_>>>()?;
    let side = manifest.crops.out_size;
    if let Some(s) = samples.iter().find(|s| s.image.width() != side || s.image.height() != side) {
        return Err(Error::Shape(format!(
            "sample is {}x{}, manifest says {side}x{side}",
            s.image.width(),
            s.image.height()
        )));
    }
    Ok(Dataset { manifest, samples })
}

/// Everything needed to synthesize train/val/test sets for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthPlan {
    pub domain: String,
    pub field: Option<FieldDomainConfig>,
    pub fractions: [f64; 3],
    pub crops: CropSpec,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SynthPlan {
    fn default() -> Self {
        Self {
            domain: "dark-soil".into(),
            field: None,
            fractions: [0.8, 0.1, 0.1],
            crops: CropSpec::default(),
            train: 2000,
            val: 200,
            test: 200,
        }
    }
}

impl SynthPlan {
    pub fn field_config(&self) -> Result<FieldDomainConfig> {
        match &self.field {
            Some(f) => {
                f.validate()?;
                Ok(f.clone())
            }
            None => FieldDomainConfig::preset(&self.domain),
        }
    }

    fn size(&self, band: Band) -> usize {
        match band {
            Band::Train => self.train,
            Band::Val => self.val,
            Band::Test => self.test,
        }
    }
}

/// Renders one field with `seed` and cuts the three splits from disjoint
/// vertical bands. Each band's crops use their own seed derived from `seed`.
pub fn synthesize(plan: &SynthPlan, seed: u64, exec: Exec) -> Result<[Dataset; 3]> {
    let cfg = plan.field_config()?;
    let split = synth::split_regions(cfg.field_width, cfg.field_height, plan.fractions, plan.crops.side_range[1])?;
    let field = synth::generate_field(&cfg, seed)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3);
    for band in Band::ALL {
        let crop_seed = seeds.next_u64();
        let n = plan.size(band);
        if n == 0 {
            return domain(format!("{} split must have at least one crop", band.name()));
        }
        let region = split.get(band);
        let samples = synth::random_crops_with(&field, region, n, &plan.crops, crop_seed, exec)?;
        out.push(Dataset {
            manifest: DatasetManifest {
                format: DATASET_FORMAT.into(),
                version: DATASET_VERSION,
                domain: plan.domain.clone(),
                band,
                field: cfg.clone(),
                field_seed: seed,
                crop_seed,
                region,
                crops: plan.crops,
                len: n,
            },
            samples,
        });
    }
    let [a, b, c]: [Dataset; 3] = out.try_into().expect("three bands");
    Ok([a, b, c])
}
