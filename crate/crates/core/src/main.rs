use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scdm_core::config::{LocLossSpace, ModulatePosition, NormScope};
use scdm_core::harness::checkpoint::Checkpoint;
use scdm_core::harness::dataset::Dataset;
use scdm_core::harness::export::write_attention;
use scdm_core::harness::gradcheck::{check_full_model, GradCheckSetup};
use scdm_core::harness::synth::{gen_synthetic, SynthConfig};
use scdm_core::harness::train::{evaluate, resume, train, write_predictions, TrainEvent};
use scdm_core::tensor::{OptimizerKind, OptimizerState};
use scdm_core::{ConditioningMode, Error, InferConfig, Model, Result, TrainConfig};

#[derive(Parser)]
#[command(name = "scdm", version, about = "Temporal sentence grounding with sentence-conditioned modulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

// Parsed once per process, so the variant size does not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/val/test splits.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Report R@n,IoU@m of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Dump ranked segments for every query.
    Predict(PredictArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    GradCheck(GradCheckArgs),
    /// Dump word-attention weights (scdm mode only).
    ExportAttention(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    compositional: bool,
    #[arg(long)]
    num_prototypes: Option<usize>,
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    input_length: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    min_width: Option<f64>,
    #[arg(long)]
    max_width: Option<f64>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    max_fillers: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long, default_value_t = 0.55)]
    nms_threshold: f64,
    #[arg(long, default_value_t = 10)]
    max_keep: usize,
}

impl InferArgs {
    fn config(&self) -> InferConfig {
        InferConfig { nms_threshold: self.nms_threshold, max_keep: self.max_keep }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write step and evaluation logs as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ConditioningMode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["adam", "sgd"])]
    optimizer: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_parser = ["offset", "absolute"])]
    loc_loss_space: Option<String>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    d_s: Option<usize>,
    #[arg(long)]
    d_f: Option<usize>,
    #[arg(long)]
    d_a: Option<usize>,
    #[arg(long)]
    d_embed: Option<usize>,
    #[arg(long)]
    share_scdm_params: bool,
    #[arg(long)]
    modulate_before_activation: bool,
    /// Statistics used to normalize modulated maps
    #[arg(long, value_parser = ["batch", "instance"])]
    norm_scope: Option<String>,
    #[arg(long)]
    norm_eps: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_limit: Option<usize>,
    #[command(flatten)]
    infer: InferArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    infer: InferArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    infer: InferArgs,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 16)]
    input_length: usize,
    #[arg(long, default_value_t = 3)]
    num_layers: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    words: usize,
    #[arg(long, default_value = "scdm")]
    mode: ConditioningMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let base = if a.compositional { SynthConfig::compositional() } else { SynthConfig::default() };
    let cfg = SynthConfig {
        seed: a.seed,
        num_prototypes: a.num_prototypes.unwrap_or(base.num_prototypes),
        d_v: a.d_v.unwrap_or(base.d_v),
        input_length: a.input_length.unwrap_or(base.input_length),
        noise_sigma: a.noise_sigma.unwrap_or(base.noise_sigma),
        train_size: a.train_size.unwrap_or(base.train_size),
        val_size: a.val_size.unwrap_or(base.val_size),
        test_size: a.test_size.unwrap_or(base.test_size),
        min_width: a.min_width.unwrap_or(base.min_width),
        max_width: a.max_width.unwrap_or(base.max_width),
        distractors: a.distractors.unwrap_or(base.distractors),
        max_fillers: a.max_fillers.unwrap_or(base.max_fillers),
        ..base
    };
    let splits = gen_synthetic(&cfg)?;
    fs::create_dir_all(&a.out_dir)?;
    for (name, d) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        d.save(&a.out_dir.join(format!("{name}.jsonl")))?;
    }
    fs::write(a.out_dir.join("synth.json"), serde_json::to_string_pretty(&cfg)?)?;
    println!(
        "wrote {} / {} / {} examples to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs, data: &Dataset) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => {
            let mut c = TrainConfig::default();
            c.model.vocab_size = data.vocabulary.size();
            c.model.d_v = data.d_v;
            c.model.input_length = data.input_length;
            c
        }
    };
    let m = &mut c.model;
    if let Some(v) = a.mode {
        m.mode = v;
    }
    macro_rules! set {
        ($($field:expr => $arg:expr),*) => { $(if let Some(v) = $arg { $field = v; })* };
    }
    set!(m.num_layers => a.num_layers, m.d_h => a.d_h, m.d_s => a.d_s, m.d_f => a.d_f, m.d_a => a.d_a,
         m.d_embed => a.d_embed);
    m.share_scdm_params |= a.share_scdm_params;
    if a.modulate_before_activation {
        m.modulate_position = ModulatePosition::BeforeActivation;
    }
    if let Some(s) = &a.norm_scope {
        m.norm_scope = if s == "instance" { NormScope::Instance } else { NormScope::Batch };
    }
    set!(m.norm_eps => a.norm_eps);
    set!(c.steps => a.steps, c.batch_size => a.batch_size, c.lr => a.lr, c.seed => a.seed,
         c.loss.lambda => a.lambda, c.loss.eta => a.eta, c.eval_every => a.eval_every, c.eval_limit => a.eval_limit);
    if let Some(o) = &a.optimizer {
        c.optimizer = if o == "sgd" { OptimizerKind::Sgd } else { OptimizerKind::Adam };
    }
    if let Some(s) = &a.loc_loss_space {
        c.loss.loc_loss_space = if s == "absolute" { LocLossSpace::Absolute } else { LocLossSpace::Offset };
    }
    c.infer = a.infer.config();
    c.validate()?;
    Ok(c)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.train, None)?;
    let val = a.val.as_deref().map(|p| Dataset::load(p, None)).transpose()?;
    let cfg = train_config(&a, &data)?;
    let mut log = a.log.as_deref().map(File::create).transpose()?.map(BufWriter::new);
    let mut io_error = None;
    let mut on_event = |e: TrainEvent| {
        match e {
            TrainEvent::Step(s) if s.step % 50 == 0 || s.step == 1 => {
                eprintln!("step {:>5}  L_over {:.5}  L_loc {:.5}  L_all {:.4}", s.step, s.l_over, s.l_loc, s.l_all)
            }
            TrainEvent::Eval(ev) => eprint!("validation at step {}\n{}", ev.step, ev.report),
            _ => {}
        }
        if let Some(w) = log.as_mut() {
            let line = match e {
                TrainEvent::Step(s) => serde_json::json!({ "step": s }),
                TrainEvent::Eval(ev) => serde_json::json!({ "eval": ev }),
            };
            if let Err(err) = writeln!(w, "{line}") {
                io_error.get_or_insert(err);
            }
        }
    };
    let (model, opt, report) = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let mut model = Model::new(cfg.model.clone(), 0)?;
            ckpt.restore_into(&mut model)?;
            let opt = ckpt
                .to_optimizer(&model)?
                .unwrap_or_else(|| OptimizerState::new(cfg.optimizer, cfg.lr, &model.params));
            resume(&cfg, model, opt, ckpt.step as usize, &data, val.as_ref(), &mut on_event)?
        }
        None => train(&cfg, &data, val.as_ref(), &mut on_event)?,
    };
    if let Some(err) = io_error {
        return Err(err.into());
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    Checkpoint::capture(&model, &cfg, cfg.steps as u64, Some(&opt)).save(&a.out)?;
    let last = report.steps.last().map_or(0.0, |s| s.l_all);
    println!("trained {} steps (final L_all {last:.4}); checkpoint at {}", cfg.steps, a.out.display());
    Ok(())
}

fn load(checkpoint: &Path, data: &Path) -> Result<(Model, Dataset)> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let data = Dataset::load(data, Some(model.config.input_length))?;
    Ok((model, data))
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => {
            let (model, data) = load(&a.checkpoint, &a.data)?;
            let report = evaluate(&model, &data, &a.infer.config(), 0)?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{report}");
            }
            Ok(())
        }
        Command::Predict(a) => {
            let (model, data) = load(&a.checkpoint, &a.data)?;
            write_predictions(&model, &data, &a.infer.config(), BufWriter::new(File::create(&a.out)?))
        }
        Command::GradCheck(a) => {
            let setup = GradCheckSetup {
                input_length: a.input_length,
                num_layers: a.num_layers,
                dim: a.dim,
                words: a.words,
                mode: a.mode,
                seed: a.seed,
                epsilon: a.epsilon,
            };
            let report = check_full_model(&setup)?;
            for e in &report.entries {
                println!("{:<28} {:>6}  max rel {:.3e}  max abs {:.3e}", e.name, e.numel, e.max_rel_error, e.max_abs_error);
            }
            let worst = report.max_rel_error();
            if report.passes(a.tolerance) {
                println!("PASS: max relative error {worst:.3e} < {}", a.tolerance);
                Ok(())
            } else {
                Err(Error::Numeric(format!("max relative error {worst:.3e} exceeds {}", a.tolerance)))
            }
        }
        Command::ExportAttention(a) => {
            let (model, data) = load(&a.checkpoint, &a.data)?;
            write_attention(&model, &data, BufWriter::new(File::create(&a.out)?))
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
