//! Subcommands of the `hausloc` binary.
//!
//! Every command writes its primary outputs plus a `RunManifest` JSON naming
//! them with their SHA-256 digests. Timestamps live only in the manifest, so
//! primary outputs are byte-identical across runs with the same inputs.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 data or shape
//! incompatibility, 4 numerical failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use hausloc::dataset::{self, Dataset, SynthPlan};
use hausloc::geom::{LabeledSample, PointSet, RgbImage};
use hausloc::io;
use hausloc::metrics::{self, MatchMode, MatchParams, MetricsReport};
use hausloc::net::{self, init_params, ModelParams, NetConfig};
use hausloc::synth::PRESETS;
use hausloc::train::{self, predict, TrainConfig, TrainHistory, FINE_TUNE_LEARNING_RATE, TRAIN_LEARNING_RATE};
use hausloc::Exec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Training-set sizes of the `full` sweep preset.
pub const FULL_SWEEP_SIZES: [usize; 6] = [500, 1000, 2000, 3000, 4000, 5000];

pub const WEIGHTS_FILE: &str = "weights.hloc";
pub const HISTORY_FILE: &str = "history.csv";
pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl From<hausloc::Error> for Failure {
    fn from(e: hausloc::Error) -> Self {
        use hausloc::Error as E;
        let code = match &e {
            E::Domain(_) | E::Io(_) | E::Json(_) => EXIT_INPUT,
            E::Shape(_) | E::Format(_) | E::Csv(_) | E::Image(_) => EXIT_DATA,
            E::Numerical(_) | E::UndefinedDistance => EXIT_NUMERICAL,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::input(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::input(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

fn with_path<T>(r: hausloc::Result<T>, path: &Path) -> CliResult<T> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    pub artifacts: Vec<Artifact>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Collects run metadata and writes the manifest once all artifacts exist.
pub struct Run {
    command: String,
    started_at: String,
    artifacts: Vec<PathBuf>,
}

impl Run {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            started_at: now(),
            artifacts: Vec::new(),
        }
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    /// Writes the manifest through a temporary file and a rename.
    pub fn finish(self, config: serde_json::Value, seeds: serde_json::Value, manifest_path: &Path) -> CliResult<RunManifest> {
        let artifacts = self
            .artifacts
            .iter()
            .map(|p| Ok(Artifact { path: p.clone(), sha256: sha256_file(p)? }))
            .collect::<CliResult<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command,
            config,
            seeds,
            artifacts,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_at: self.started_at,
            finished_at: now(),
        };
        write_atomic(manifest_path, &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Failure::input(format!("bad output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Caps the rayon pool at `HAUSLOC_THREADS` workers when the variable is set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("HAUSLOC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::input(format!("HAUSLOC_THREADS must be a positive integer, got `{v}`")))?;
    #[cfg(feature = "parallel")]
    {
        // A pool built earlier in the process keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

// ---------------------------------------------------------------- synth

/// Reads a synthesis plan. `source` is either a JSON file or a preset name.
pub fn load_plan(source: &str) -> CliResult<SynthPlan> {
    if PRESETS.contains(&source) {
        return Ok(SynthPlan {
            domain: source.into(),
            ..SynthPlan::default()
        });
    }
    let path = Path::new(source);
    let plan: SynthPlan = serde_json::from_str(&read_text(path)?)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    with_path(plan.field_config(), path)?;
    Ok(plan)
}

/// Writes `out/{train,val,test}` and the run manifest.
pub fn cmd_synth(plan: &SynthPlan, seed: u64, out: &Path) -> CliResult<[PathBuf; 3]> {
    let mut run = Run::start("synth");
    let sets = dataset::synthesize(plan, seed, Exec::default())?;
    let mut dirs = Vec::new();
    for set in &sets {
        let dir = out.join(set.manifest.band.name());
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        dataset::write_dataset(set, &dir)?;
        run.artifact(dir.join("manifest.json"));
        dirs.push(dir);
    }
    run.finish(
        serde_json::to_value(plan)?,
        serde_json::json!({ "field": seed, "crops": sets.iter().map(|s| s.manifest.crop_seed).collect::<Vec<_>>() }),
        &out.join(MANIFEST_FILE),
    )?;
    Ok(dirs.try_into().expect("three splits"))
}

// ---------------------------------------------------------------- train

pub fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(Failure::input(format!("{}: no dataset manifest", dir.display())));
    }
    with_path(dataset::load_dataset(dir), dir)
}

pub fn load_train_config(path: Option<&Path>, default_lr: f64) -> CliResult<TrainConfig> {
    match path {
        None => Ok(TrainConfig { learning_rate: default_lr, ..TrainConfig::default() }),
        Some(p) => with_path(TrainConfig::from_json(&read_text(p)?, default_lr), p),
    }
}

pub fn load_net_config(path: Option<&Path>) -> CliResult<NetConfig> {
    let cfg = match path {
        None => NetConfig::default(),
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_weights(path: &Path, input_size: usize) -> CliResult<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let params = with_path(net::read_weights(&bytes[..]), path)?;
    with_path(params.with_input_size(input_size), path)
}

pub fn save_weights(params: &ModelParams, path: &Path) -> CliResult<()> {
    let mut buf = Vec::new();
    net::write_weights(params, &mut buf)?;
    write_atomic(path, &buf)
}

fn check_sizes(data: &Dataset, input_size: usize, dir: &Path) -> CliResult<()> {
    let side = data.manifest.crops.out_size;
    if side != input_size {
        return Err(Failure::data(format!(
            "{}: crops are {side}x{side} but the model takes {input_size}x{input_size}",
            dir.display()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub train_dir: PathBuf,
    pub val_dir: PathBuf,
    pub config: TrainConfig,
    pub net: NetConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub weights: PathBuf,
    pub history_csv: PathBuf,
}

fn write_training(run: &mut Run, out: &Path, params: &ModelParams, history: &TrainHistory) -> CliResult<(PathBuf, PathBuf)> {
    let weights = out.join(WEIGHTS_FILE);
    save_weights(params, &weights)?;
    let csv_path = out.join(HISTORY_FILE);
    let mut buf = Vec::new();
    history.write_csv(&mut buf)?;
    write_atomic(&csv_path, &buf)?;
    run.artifact(&weights);
    run.artifact(&csv_path);
    Ok((weights, csv_path))
}

/// Trains from scratch; the initial weights are drawn with `config.seed`.
pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainOutcome> {
    let mut run = Run::start("train");
    let tr = load_dataset(&args.train_dir)?;
    let va = load_dataset(&args.val_dir)?;
    check_sizes(&tr, args.net.input_size, &args.train_dir)?;
    check_sizes(&va, args.net.input_size, &args.val_dir)?;
    let init = init_params(args.net, args.config.seed)?;
    let (params, history) = train::train(&init, &tr.samples, &va.samples, &args.config)?;
    let (weights, history_csv) = write_training(&mut run, &args.out, &params, &history)?;
    run.finish(
        serde_json::json!({ "train": args.config, "net": args.net, "train_dir": args.train_dir, "val_dir": args.val_dir }),
        serde_json::json!({ "init": args.config.seed, "shuffle": args.config.seed }),
        &args.out.join(MANIFEST_FILE),
    )?;
    Ok(TrainOutcome { params, history, weights, history_csv })
}

/// Loads `weights_in`, copies its encoder into a fresh model initialized
/// with `config.seed`, then trains every partition.
pub fn cmd_finetune(args: &TrainArgs, weights_in: &Path) -> CliResult<TrainOutcome> {
    let mut run = Run::start("finetune");
    let tr = load_dataset(&args.train_dir)?;
    let va = load_dataset(&args.val_dir)?;
    check_sizes(&tr, args.net.input_size, &args.train_dir)?;
    check_sizes(&va, args.net.input_size, &args.val_dir)?;
    let pretrained = load_weights(weights_in, args.net.input_size)?;
    let fresh = init_params(args.net, args.config.seed)?;
    let start = net::transfer_encoder(&pretrained, &fresh)
        .map_err(|e| Failure::data(format!("{}: {e}", weights_in.display())))?;
    let (params, history) = train::train(&start, &tr.samples, &va.samples, &args.config)?;
    let (weights, history_csv) = write_training(&mut run, &args.out, &params, &history)?;
    run.finish(
        serde_json::json!({
            "train": args.config, "net": args.net, "train_dir": args.train_dir,
            "val_dir": args.val_dir, "weights_in": weights_in,
        }),
        serde_json::json!({ "init": args.config.seed, "shuffle": args.config.seed }),
        &args.out.join(MANIFEST_FILE),
    )?;
    Ok(TrainOutcome { params, history, weights, history_csv })
}

// ---------------------------------------------------------------- eval

/// Predicted centers and count for each sample. The count estimate is the
/// number of extracted centers.
pub fn predict_all(params: &ModelParams, samples: &[LabeledSample]) -> CliResult<Vec<(PointSet, f64)>> {
    hausloc::par::map(Exec::default(), samples, |s| {
        predict(params, &s.image).map(|p| {
            let n = p.centers.len() as f64;
            (p.centers, n)
        })
    })
    .into_iter()
    .map(|r| r.map_err(Failure::from))
    .collect()
}

/// Ground truth used as the prediction.
pub fn gt_predictions(samples: &[LabeledSample]) -> Vec<(PointSet, f64)> {
    samples.iter().map(|s| (s.centers.clone(), s.count as f64)).collect()
}

pub fn cmd_eval(
    data_dir: &Path,
    weights: Option<&Path>,
    input_size: usize,
    params: &MatchParams,
    out: Option<&Path>,
) -> CliResult<MetricsReport> {
    let mut run = Run::start("eval");
    let data = load_dataset(data_dir)?;
    let preds = match weights {
        Some(w) => {
            check_sizes(&data, input_size, data_dir)?;
            predict_all(&load_weights(w, input_size)?, &data.samples)?
        }
        None => gt_predictions(&data.samples),
    };
    let report = metrics::evaluate(&data.samples, &preds, params)?;
    if let Some(out) = out {
        let path = out.join("metrics.json");
        write_atomic(&path, report.to_json()?.as_bytes())?;
        run.artifact(&path);
        run.finish(
            serde_json::json!({ "data": data_dir, "weights": weights, "r": params.r, "mode": params.mode, "input_size": input_size }),
            serde_json::json!({}),
            &out.join(MANIFEST_FILE),
        )?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- sweep

pub fn parse_sizes(text: &str) -> CliResult<Vec<usize>> {
    if text == "full" {
        return Ok(FULL_SWEEP_SIZES.to_vec());
    }
    let sizes = text
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Failure::input(format!("bad size `{s}`"))))
        .collect::<CliResult<Vec<_>>>()?;
    validate_sizes(&sizes)?;
    Ok(sizes)
}

pub fn validate_sizes(sizes: &[usize]) -> CliResult<()> {
    if sizes.is_empty() {
        return Err(Failure::input("no sizes given"));
    }
    for (i, s) in sizes.iter().enumerate() {
        if *s == 0 {
            return Err(Failure::input("sizes must be positive"));
        }
        if sizes[..i].contains(s) {
            return Err(Failure::input(format!("duplicate size {s}")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub size: usize,
    pub f1: f64,
    pub mahd: f64,
    pub mae: f64,
}

/// First `size` entries of a permutation drawn from `(seed, size)`.
pub fn subsample(samples: &[LabeledSample], size: usize, seed: u64) -> CliResult<Vec<LabeledSample>> {
    if size > samples.len() {
        return Err(Failure::input(format!("size {size} exceeds the {} available training crops", samples.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(size as u64);
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut rng);
    Ok(idx[..size].iter().map(|&i| samples[i].clone()).collect())
}

#[derive(Clone, Debug)]
pub struct SweepArgs {
    pub train_dir: PathBuf,
    pub val_dir: PathBuf,
    pub test_dir: PathBuf,
    pub config: TrainConfig,
    pub net: NetConfig,
    pub sizes: Vec<usize>,
    pub match_params: MatchParams,
    pub out: PathBuf,
}

/// One model per training-set size, each from the same initial weights and
/// seed; rows `size,f1,mahd,mae` on the test split.
pub fn cmd_sweep(args: &SweepArgs) -> CliResult<Vec<SweepRow>> {
    validate_sizes(&args.sizes)?;
    let mut run = Run::start("sweep");
    let tr = load_dataset(&args.train_dir)?;
    let va = load_dataset(&args.val_dir)?;
    let te = load_dataset(&args.test_dir)?;
    for (d, dir) in [(&tr, &args.train_dir), (&va, &args.val_dir), (&te, &args.test_dir)] {
        check_sizes(d, args.net.input_size, dir)?;
    }
    let init = init_params(args.net, args.config.seed)?;
    let mut rows = Vec::new();
    for &size in &args.sizes {
        let subset = subsample(&tr.samples, size, args.config.seed)?;
        let (params, _) = train::train(&init, &subset, &va.samples, &args.config)?;
        let preds = predict_all(&params, &te.samples)?;
        let rep = metrics::evaluate(&te.samples, &preds, &args.match_params)?;
        rows.push(SweepRow { size, f1: rep.f1, mahd: rep.mahd, mae: rep.mae });
    }
    let mut text = String::from("size,f1,mahd,mae\n");
    for r in &rows {
        text.push_str(&format!("{},{},{},{}\n", r.size, r.f1, r.mahd, r.mae));
    }
    write_atomic(&args.out, text.as_bytes())?;
    run.artifact(&args.out);
    run.finish(
        serde_json::json!({
            "train": args.config, "net": args.net, "sizes": args.sizes,
            "r": args.match_params.r, "mode": args.match_params.mode,
        }),
        serde_json::json!({ "init": args.config.seed, "subsample": args.config.seed }),
        &sibling(&args.out, ".manifest.json"),
    )?;
    Ok(rows)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

// ---------------------------------------------------------------- infer

pub const MARKER_ARM: i64 = 2;
pub const MARKER_COLOR: [f64; 3] = [1.0, 0.0, 0.0];

/// Draws a 5-px red cross centered on each point's pixel.
pub fn annotate(image: &RgbImage, centers: &PointSet) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = (image.width() as i64, image.height() as i64);
    for p in centers {
        let (cx, cy) = (p.x.floor() as i64, p.y.floor() as i64);
        for d in -MARKER_ARM..=MARKER_ARM {
            for (x, y) in [(cx + d, cy), (cx, cy + d)] {
                if (0..w).contains(&x) && (0..h).contains(&y) {
                    out.set_pixel(x as usize, y as usize, MARKER_COLOR);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct InferOutputs {
    pub map: PathBuf,
    pub centers: PathBuf,
    pub annotated: PathBuf,
    pub count: usize,
}

pub fn cmd_infer(image_path: &Path, weights: &Path, input_size: usize, out_prefix: &Path) -> CliResult<InferOutputs> {
    let mut run = Run::start("infer");
    let image = with_path(io::load_ppm(image_path), image_path)?;
    if image.width() != input_size || image.height() != input_size {
        return Err(Failure::data(format!(
            "{}: image is {}x{} but the model takes {input_size}x{input_size}",
            image_path.display(),
            image.width(),
            image.height()
        )));
    }
    let params = load_weights(weights, input_size)?;
    let pred = predict(&params, &image)?;
    let outs = InferOutputs {
        map: sibling(out_prefix, "_map.pgm"),
        centers: sibling(out_prefix, "_centers.csv"),
        annotated: sibling(out_prefix, "_annotated.ppm"),
        count: pred.centers.len(),
    };
    if let Some(dir) = outs.map.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    io::save_pgm(&pred.prob_map, &outs.map)?;
    io::save_points_csv(&pred.centers, &outs.centers)?;
    io::save_ppm(&annotate(&image, &pred.centers), &outs.annotated)?;
    for p in [&outs.map, &outs.centers, &outs.annotated] {
        run.artifact(p);
    }
    run.finish(
        serde_json::json!({ "image": image_path, "weights": weights, "input_size": input_size }),
        serde_json::json!({}),
        &sibling(out_prefix, "_manifest.json"),
    )?;
    Ok(outs)
}

pub fn default_lr(finetune: bool) -> f64 {
    if finetune {
        FINE_TUNE_LEARNING_RATE
    } else {
        TRAIN_LEARNING_RATE
    }
}

pub fn parse_mode(s: &str) -> CliResult<MatchMode> {
    s.parse().map_err(|_| Failure::input(format!("unknown match mode `{s}`")))
}
