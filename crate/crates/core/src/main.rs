use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use partreid::config::RunConfig;
use partreid::data::{generate_synthetic, load_manifest, SplitMode, SynthOptions};
use partreid::eval::{descriptors_from_tensor, evaluate, evaluate_descriptors};
use partreid::model::Model;
use partreid::pooling::check::{sketch_error_table, table_passes, SketchCheckOptions};
use partreid::pooling::PoolingMode;
use partreid::train::{train, write_outputs, WEIGHTS_DIR};
use partreid::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "partreid", version, about = "Part-aligned bilinear re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a model and write losses, weights and the resolved config.
    Train(TrainArgs),
    /// Evaluate weights or precomputed descriptors on a manifest.
    Eval(EvalArgs),
    /// Measure compact pooling error against exact pooling.
    CheckSketch(CheckSketchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 20)]
    actions: usize,
    #[arg(long, default_value_t = 10)]
    ids_per_action: usize,
    #[arg(long, default_value_t = 6)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `eval` assigns query/gallery roles, `train` marks every view as training data.
    #[arg(long, default_value = "eval")]
    split: SplitMode,
    /// Gallery-only identities added to each action (eval split).
    #[arg(long, default_value_t = 0)]
    distractors: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file; unspecified keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Evaluate the trained model on this manifest afterwards.
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set steps=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Weights directory written by `train`.
    #[arg(long, conflicts_with = "descriptors", required_unless_present = "descriptors")]
    weights: Option<PathBuf>,
    /// N×D TSR1 tensor of descriptors in manifest record order.
    #[arg(long)]
    descriptors: Option<PathBuf>,
    /// Overrides the pooling mode stored with the weights.
    #[arg(long)]
    pooling: Option<PoolingMode>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckSketchArgs {
    /// Appearance and part channel counts, `C_a,C_p`.
    #[arg(long, value_delimiter = ',', default_values_t = [16, 8])]
    dims: Vec<usize>,
    /// Sketch dimensions to test, ascending.
    #[arg(long, value_delimiter = ',', default_values_t = [128, 256, 512, 1024])]
    dim_list: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 32)]
    locations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use collision-free tables at `d = C_a·C_p`.
    #[arg(long)]
    collision_free: bool,
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let opts = SynthOptions {
        num_actions: args.actions,
        ids_per_action: args.ids_per_action,
        views_per_id: args.views,
        height: args.height,
        width: args.width,
        seed: args.seed,
        split: args.split,
        distractors_per_action: args.distractors,
    };
    let manifest = generate_synthetic(&opts, &args.out)?;
    println!("wrote {} samples to {}", manifest.records.len(), args.out.display());
    Ok(())
}

fn resolve_train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        config.set(k.trim(), v)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(m) = &args.manifest {
        config.manifest = Some(m.clone());
    }
    if let Some(m) = &args.eval_manifest {
        config.eval_manifest = Some(m.clone());
    }
    if let Some(o) = &args.out {
        config.out_dir = Some(o.clone());
    }
    config.validate()?;
    Ok(config)
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Usage(format!("{what} not given (flag or config key)")))
}

fn print_metrics(map: f64, rank1: f64) {
    println!("mAP={map} rank1={rank1}");
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let config = resolve_train_config(&args)?;
    let manifest = load_manifest(require(&config.manifest, "manifest")?)?;
    let out_dir = require(&config.out_dir, "output directory")?.to_path_buf();
    let eval_manifest = config.eval_manifest.as_deref().map(load_manifest).transpose()?;
    let outcome = train(&manifest, &config)?;
    write_outputs(&outcome, &config, &out_dir)?;
    println!(
        "trained {} steps: loss {} -> {}; weights in {}",
        outcome.losses.len(),
        outcome.initial_loss(),
        outcome.final_loss(),
        out_dir.join(WEIGHTS_DIR).display()
    );
    if let Some(m) = eval_manifest {
        let report = evaluate(&m, &outcome.model)?;
        report.write_files(&out_dir)?;
        print_metrics(report.map, report.rank(1));
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let report = match (&args.weights, &args.descriptors) {
        (Some(dir), _) => {
            let mut model = Model::load(dir)?;
            if let Some(mode) = args.pooling {
                model.set_pooling(mode)?;
            }
            evaluate(&manifest, &model)?
        }
        (None, Some(path)) => {
            let table = Tensor::load_tsr1(path)?;
            let descriptors = descriptors_from_tensor(&manifest, &table)?;
            let hash = hex::encode(Sha256::digest(table.to_tsr1_bytes()));
            evaluate_descriptors(&manifest, &descriptors, &hash)?
        }
        (None, None) => return Err(Error::Usage("either --weights or --descriptors is required".into())),
    };
    if let Some(out) = &args.out {
        report.write_files(out)?;
    }
    print_metrics(report.map, report.rank(1));
    Ok(())
}

fn check_sketch_cmd(args: CheckSketchArgs) -> Result<bool> {
    let &[c_a, c_p] = args.dims.as_slice() else {
        return Err(Error::Usage("--dims expects two values, C_a,C_p".into()));
    };
    let opts = SketchCheckOptions {
        appearance_channels: c_a,
        part_channels: c_p,
        sketch_dims: args.dim_list,
        trials: args.trials,
        locations: args.locations,
        seed: args.seed,
        collision_free: args.collision_free,
    };
    let rows = sketch_error_table(&opts)?;
    println!("{:>8}  {:>16}", "d", "median_rel_error");
    for r in &rows {
        println!("{:>8}  {:>16.6e}", r.dim, r.median_rel_error);
    }
    let threshold = if opts.collision_free { 1e-9 } else { 0.1 };
    let ok = table_passes(&rows, threshold);
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::CheckSketch(a) => check_sketch_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
