use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hausloc::metrics::{MatchMode, MatchParams};
use hausloc_cli::*;

#[derive(Parser)]
#[command(name = "hausloc", version, about = "Plant-center localization with the weighted Hausdorff distance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a field and write train/val/test crop datasets.
    Synth {
        /// Plan JSON file, or a preset name (`dark-soil`, `light-soil`).
        #[arg(long)]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from scratch.
    Train {
        #[command(flatten)]
        common: TrainFlags,
    },
    /// Copy the encoder of a pretrained model and fine-tune.
    Finetune {
        #[arg(long)]
        weights_in: PathBuf,
        #[command(flatten)]
        common: TrainFlags,
    },
    /// Score a model (or the ground truth itself) on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "gt_bypass")]
        weights: Option<PathBuf>,
        /// Use the ground-truth centers as predictions.
        #[arg(long)]
        gt_bypass: bool,
        #[arg(long, default_value_t = 5.0)]
        r: f64,
        #[arg(long, default_value = "many-to-one")]
        mode: String,
        #[arg(long, default_value_t = 64)]
        input_size: usize,
        /// Directory for `metrics.json` and the run manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per training-set size and tabulate test metrics.
    Sweep {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        net: Option<PathBuf>,
        /// Comma-separated sizes, or `full` for 500,1000,2000,3000,4000,5000.
        #[arg(long)]
        sizes: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 5.0)]
        r: f64,
        #[arg(long, default_value = "many-to-one")]
        mode: String,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one image through the model.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 64)]
        input_size: usize,
        /// Output prefix; writes `_map.pgm`, `_centers.csv`, `_annotated.ppm`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainFlags {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Training config JSON; fields mirror the training options.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Network architecture JSON.
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for weights, history and manifest.
    #[arg(long)]
    out: PathBuf,
}

impl TrainFlags {
    fn resolve(&self, finetune: bool) -> CliResult<TrainArgs> {
        let mut config = load_train_config(self.config.as_deref(), default_lr(finetune))?;
        if let Some(s) = self.seed {
            config.seed = s;
        }
        Ok(TrainArgs {
            train_dir: self.train.clone(),
            val_dir: self.val.clone(),
            config,
            net: load_net_config(self.net.as_deref())?,
            out: self.out.clone(),
        })
    }
}

fn match_params(r: f64, mode: &str) -> CliResult<MatchParams> {
    let mode: MatchMode = parse_mode(mode)?;
    if !(r > 0.0) {
        return Err(Failure::input(format!("--r must be positive, got {r}")));
    }
    Ok(MatchParams { r, mode })
}

fn report_training(o: &TrainOutcome) {
    let best = o.history.best_epoch().unwrap_or(0);
    if let Some(r) = o.history.records.iter().find(|r| r.epoch == best) {
        println!("best epoch {best}: train loss {:.4}, val MAHD {:.3}", r.train_loss, r.val_mahd);
    }
    println!("weights: {}", o.weights.display());
    println!("history: {}", o.history_csv.display());
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth { config, seed, out } => {
            let plan = load_plan(&config)?;
            let dirs = cmd_synth(&plan, seed, &out)?;
            for d in dirs {
                println!("{}", d.display());
            }
        }
        Command::Train { common } => report_training(&cmd_train(&common.resolve(false)?)?),
        Command::Finetune { weights_in, common } => report_training(&cmd_finetune(&common.resolve(true)?, &weights_in)?),
        Command::Eval { data, weights, gt_bypass, r, mode, input_size, out } => {
            let params = match_params(r, &mode)?;
            let weights = if gt_bypass { None } else { weights };
            let report = cmd_eval(&data, weights.as_deref(), input_size, &params, out.as_deref())?;
            println!("{report}");
        }
        Command::Sweep { train, val, test, config, net, sizes, seed, r, mode, out } => {
            let mut cfg = load_train_config(config.as_deref(), default_lr(false))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let args = SweepArgs {
                train_dir: train,
                val_dir: val,
                test_dir: test,
                config: cfg,
                net: load_net_config(net.as_deref())?,
                sizes: parse_sizes(&sizes)?,
                match_params: match_params(r, &mode)?,
                out,
            };
            let rows = cmd_sweep(&args)?;
            println!("size,f1,mahd,mae");
            for row in rows {
                println!("{},{:.4},{:.3},{:.3}", row.size, row.f1, row.mahd, row.mae);
            }
        }
        Command::Infer { image, weights, input_size, out } => {
            let o = cmd_infer(&image, &weights, input_size, &out)?;
            println!("{} centers", o.count);
            for p in [o.map, o.centers, o.annotated] {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
