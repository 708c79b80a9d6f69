use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tokenlearner::ablation::{run_ablation, AblationPlan};
use tokenlearner::data::{generate_dataset, Dataset, SyntheticTaskSpec, TaskKind};
use tokenlearner::maps::export_attention_maps;
use tokenlearner::model::build_model;
use tokenlearner::train::{evaluate, load_checkpoint, load_weights, train_from, TrainConfig, TrainState};
use tokenlearner::{checkpoint, count_flops, placement_sweep, Error, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "tlx", version, about = "Adaptive-tokenization ViT experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in TLDS1 format.
    GenData(GenData),
    /// Train a model and write a checkpoint and metrics CSV.
    Train(Train),
    /// Evaluate a checkpoint on a dataset.
    Eval(Eval),
    /// Print per-layer FLOPs and parameters.
    Flops(Flops),
    /// Write the first TokenLearner's attention maps as PGM images.
    ExportMaps(ExportMaps),
    /// Run an ablation plan.
    Ablate(Ablate),
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    LocatePatch,
    CountBlobs,
    MovingBlobDirection,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::LocatePatch => TaskKind::LocatePatch,
            Task::CountBlobs => TaskKind::CountBlobs,
            Task::MovingBlobDirection => TaskKind::MovingBlobDirection,
        }
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Defaults to 4 (5 for count-blobs).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Defaults to 8 for moving-blob-direction, 1 otherwise.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Dim clutter squares per frame.
    #[arg(long, default_value_t = 0)]
    distractors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    n: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    /// Model configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Training configuration (JSON); flags below override its fields.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    no_cosine: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct Flops {
    #[arg(long)]
    config: PathBuf,
    /// Sweep TokenLearner placement over these fractions of depth.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_missing_value = "0,0.25,0.5,0.75,1")]
    sweep: Option<Vec<f64>>,
    /// CSV output (layer,tokens,flops,params); with --sweep, a fraction column is prepended.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ExportMaps {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    plan: PathBuf,
}

fn gen_data(a: GenData) -> Result<()> {
    let kind = TaskKind::from(a.task);
    let spec = SyntheticTaskSpec {
        kind,
        size: a.size,
        channels: a.channels,
        frames: a.frames.unwrap_or(if kind == TaskKind::MovingBlobDirection { 8 } else { 1 }),
        classes: a.classes.unwrap_or(if kind == TaskKind::CountBlobs { 5 } else { 4 }),
        noise: a.noise,
        distractors: a.distractors,
        seed: a.seed,
    };
    let ds = generate_dataset(&spec, a.n, &a.out)?;
    println!("wrote {} samples of {:?} to {}", ds.len(), ds.dims, a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let model_cfg = ModelConfig::load(&a.config)?;
    for w in model_cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let mut tc: TrainConfig = match &a.train_config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => TrainConfig::new(0.03, 2000, 32, 0),
    };
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.steps {
        tc.steps = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(v) = a.clip_norm {
        tc.clip_norm = v;
    }
    if a.no_cosine {
        tc.cosine = false;
    }
    if a.checkpoint.is_some() {
        tc.checkpoint = a.checkpoint.clone();
    }
    tc.validate()?;
    let data = Dataset::load(&a.data)?;
    let mut model = build_model(&model_cfg, tc.seed)?;
    let state = match &a.resume {
        Some(p) => load_checkpoint(p, &mut model)?,
        None => TrainState::fresh(&model),
    };
    println!(
        "training {} parameters for steps {}..{}",
        model.num_params(),
        state.step,
        tc.steps
    );
    let (out, _) = train_from(&mut model, state, &tc, &data)?;
    if let Some(p) = &a.metrics {
        out.save_csv(p)?;
    }
    println!(
        "final loss {:.6} accuracy {:.4}",
        out.final_metrics.loss, out.final_metrics.accuracy
    );
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let cfg = ModelConfig::load(&a.config)?;
    let mut model = build_model(&cfg, 0)?;
    load_weights(&mut model, &checkpoint::load(&a.checkpoint)?)?;
    let m = evaluate(&model, &Dataset::load(&a.data)?)?;
    println!("loss {:.6} accuracy {:.4}", m.loss, m.accuracy);
    Ok(())
}

fn flops(a: Flops) -> Result<()> {
    let cfg = ModelConfig::load(&a.config)?;
    match a.sweep {
        None => {
            let r = count_flops(&cfg)?;
            print!("{}", r.table());
            if let Some(p) = &a.csv {
                r.save_csv(p)?;
            }
        }
        Some(fractions) => {
            let reports = placement_sweep(&cfg, &fractions)?;
            println!("{:>9} {:>14} {:>12}", "fraction", "gflops", "params");
            for (f, r) in fractions.iter().zip(&reports) {
                println!("{:>9.3} {:>14.4} {:>12}", f, r.gflops(), r.total_params());
            }
            if let Some(p) = &a.csv {
                let mut w = csv::Writer::from_path(p)?;
                w.write_record(["fraction", "layer", "tokens", "flops", "params"])?;
                for (f, r) in fractions.iter().zip(&reports) {
                    for e in &r.entries {
                        w.write_record([
                            f.to_string(),
                            e.layer.clone(),
                            e.tokens.to_string(),
                            e.flops.to_string(),
                            e.params.to_string(),
                        ])?;
                    }
                }
                w.flush()?;
            }
        }
    }
    Ok(())
}

fn export_maps(a: ExportMaps) -> Result<()> {
    let cfg = ModelConfig::load(&a.config)?;
    let mut model = build_model(&cfg, 0)?;
    if let Some(p) = &a.checkpoint {
        load_weights(&mut model, &checkpoint::load(p)?)?;
    }
    let data = Dataset::load(&a.data)?;
    if a.index >= data.len() {
        return Err(Error::Dataset(format!(
            "index {} out of range for {} samples",
            a.index,
            data.len()
        )));
    }
    let paths = export_attention_maps(&model, &data.sample(a.index), &a.out)?;
    println!("wrote {} maps to {}", paths.len(), a.out.display());
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let plan = AblationPlan::load(&a.plan)?;
    let report = run_ablation(&plan)?;
    print!("{}", report.to_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Flops(a) => flops(a),
        Command::ExportMaps(a) => export_maps(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else if e.is_numeric() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
