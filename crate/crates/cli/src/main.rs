use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use stmotion_core::config::{FfnKind, ModelConfig, MoeSettings, Path as AttnPath, DEFAULT_HORIZON};
use stmotion_core::data::{
    generate_synthetic, load_split, read_motion, resolve_manifest, windows_for, write_motion, PoseSequence, Split,
    SyntheticSpec, MANIFEST_FILE,
};
use stmotion_core::error::{Error, ErrorKind, Result};
use stmotion_core::inference::{bench_inference, predict, BenchSpec};
use stmotion_core::metrics::MAE_HORIZONS;
use stmotion_core::training::{evaluate, train, Checkpoint, OptimizerKind, TrainConfig, CHECKPOINT_FILE};
use stmotion_core::{DType, StTransformer, Tensor};

const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "stmotion", version, about = "Spatio-temporal transformer motion prediction")]
struct Cli {
    /// Print the fully resolved configuration as JSON and exit.
    #[arg(long, global = true, env = "STMOTION_DUMP_CONFIG")]
    dump_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and its split manifest.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Report MAE on one split of a dataset.
    Eval(EvalArgs),
    /// Predict frames following the last window of a motion file.
    Predict(PredictArgs),
    /// Time autoregressive inference across dense and MoE sizes.
    Bench(BenchArgs),
    /// Write attention and routing weights of one forward pass as CSV.
    ExportAttn(ExportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, env = "STMOTION_OUT", default_value = "data")]
    out: PathBuf,
    #[arg(long, env = "STMOTION_SEQUENCES", default_value_t = 250)]
    sequences: usize,
    #[arg(long, env = "STMOTION_LENGTH", default_value_t = 240)]
    length: usize,
    #[arg(long, env = "STMOTION_JOINTS", default_value_t = 24)]
    joints: usize,
    #[arg(long, env = "STMOTION_JOINT_DIM", default_value_t = 3)]
    joint_dim: usize,
    /// Model window the data must support (length >= window + 24).
    #[arg(long, env = "STMOTION_WINDOW", default_value_t = 120)]
    window: usize,
    #[arg(long, env = "STMOTION_AMPLITUDE", default_value_t = std::f64::consts::FRAC_PI_2)]
    amplitude: f64,
    #[arg(long, env = "STMOTION_NOISE", default_value_t = 0.01)]
    noise: f64,
    #[arg(long, env = "STMOTION_DTYPE", default_value = "f32")]
    dtype: DType,
    #[arg(long, env = "STMOTION_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FfnChoice {
    Dense,
    Moe,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long, env = "STMOTION_DATA")]
    data: PathBuf,
    #[arg(long, env = "STMOTION_FFN", value_enum, default_value = "dense")]
    ffn: FfnChoice,
    /// Number of experts for `--ffn moe` (4 when omitted).
    #[arg(long, env = "STMOTION_EXPERTS")]
    experts: Option<usize>,
    #[arg(long, env = "STMOTION_SLOTS", default_value_t = 1)]
    slots: usize,
    #[arg(long, env = "STMOTION_EXPERT_HIDDEN", default_value_t = 64)]
    expert_hidden: usize,
    #[arg(long, env = "STMOTION_HIDDEN", default_value_t = 512)]
    hidden: usize,
    #[arg(long, env = "STMOTION_EMBED", default_value_t = 128)]
    embed: usize,
    #[arg(long, env = "STMOTION_LAYERS", default_value_t = 2)]
    layers: usize,
    /// Attention heads on both paths.
    #[arg(long, env = "STMOTION_HEADS", default_value_t = 1)]
    heads: usize,
    #[arg(long, env = "STMOTION_WINDOW", default_value_t = 120)]
    window: usize,
    #[arg(long, env = "STMOTION_DROPOUT", default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, env = "STMOTION_BATCH", default_value_t = 32)]
    batch: usize,
    #[arg(long, env = "STMOTION_OPT", default_value = "noamopt")]
    opt: OptimizerKind,
    /// Learning rate for sgd and adam.
    #[arg(long, env = "STMOTION_LR", default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, env = "STMOTION_WARMUP", default_value_t = 4000)]
    warmup: u64,
    #[arg(long, env = "STMOTION_EPOCHS", default_value_t = 20)]
    epochs: usize,
    #[arg(long, env = "STMOTION_TOTAL_EFFECTIVE_EPOCHS")]
    total_effective_epochs: Option<usize>,
    #[arg(long, env = "STMOTION_TF_EPSILON", default_value_t = 1e-3)]
    tf_epsilon: f64,
    #[arg(long, env = "STMOTION_STRIDE", default_value_t = 1)]
    stride: usize,
    #[arg(long, env = "STMOTION_NO_CLIP")]
    no_clip: bool,
    #[arg(long, env = "STMOTION_DTYPE", default_value = "f32")]
    dtype: DType,
    #[arg(long, env = "STMOTION_CKPT_DIR", default_value = "checkpoints")]
    ckpt_dir: PathBuf,
    #[arg(long, env = "STMOTION_SAVE_EVERY", default_value_t = 1)]
    save_every: usize,
    /// Continue from the checkpoint in `--ckpt-dir` if there is one.
    #[arg(long, env = "STMOTION_RESUME")]
    resume: bool,
    #[arg(long, env = "STMOTION_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file or the directory holding it.
    #[arg(long, env = "STMOTION_CKPT")]
    ckpt: PathBuf,
    #[arg(long, env = "STMOTION_DATA")]
    data: PathBuf,
    #[arg(long, env = "STMOTION_SPLIT", default_value = "test")]
    split: Split,
    #[arg(long, env = "STMOTION_DEGREES")]
    degrees: bool,
    /// Write the per-frame error curve here as CSV.
    #[arg(long, env = "STMOTION_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long, env = "STMOTION_CKPT")]
    ckpt: PathBuf,
    /// Motion file whose last window seeds the prediction.
    #[arg(long = "in", env = "STMOTION_IN")]
    input: PathBuf,
    #[arg(long, env = "STMOTION_OUT")]
    out: PathBuf,
    #[arg(long, env = "STMOTION_HORIZON", default_value_t = DEFAULT_HORIZON)]
    horizon: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, env = "STMOTION_SWEEP_DENSE", value_delimiter = ',', default_values_t = [64, 128, 256, 512, 1024, 2048])]
    sweep_dense: Vec<usize>,
    #[arg(long, env = "STMOTION_SWEEP_EXPERTS", value_delimiter = ',', default_values_t = [2, 4, 6, 8, 16, 32])]
    sweep_experts: Vec<usize>,
    #[arg(long, env = "STMOTION_REPS", default_value_t = 5)]
    reps: usize,
    #[arg(long, env = "STMOTION_WARMUP", default_value_t = 2)]
    warmup: usize,
    #[arg(long, env = "STMOTION_WINDOWS", default_value_t = 8)]
    windows: usize,
    #[arg(long, env = "STMOTION_HORIZON", default_value_t = DEFAULT_HORIZON)]
    horizon: usize,
    #[arg(long, env = "STMOTION_WINDOW", default_value_t = 16)]
    window: usize,
    #[arg(long, env = "STMOTION_JOINTS", default_value_t = 8)]
    joints: usize,
    #[arg(long, env = "STMOTION_EMBED", default_value_t = 8)]
    embed: usize,
    #[arg(long, env = "STMOTION_LAYERS", default_value_t = 1)]
    layers: usize,
    #[arg(long, env = "STMOTION_EXPERT_HIDDEN", default_value_t = 16)]
    expert_hidden: usize,
    #[arg(long, env = "STMOTION_DTYPE", default_value = "f32")]
    dtype: DType,
    /// Worker threads for the timed passes; 1 pins timing to one thread.
    #[arg(long, env = "STMOTION_THREADS", default_value_t = 1)]
    threads: usize,
    #[arg(long, env = "STMOTION_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "STMOTION_OUT_DIR", default_value = "bench")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long, env = "STMOTION_CKPT")]
    ckpt: PathBuf,
    #[arg(long = "in", env = "STMOTION_IN")]
    input: PathBuf,
    #[arg(long, env = "STMOTION_OUT_DIR")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::Other => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let dump = cli.dump_config;
    match cli.command {
        Command::GenData(a) => gen_data(a, dump),
        Command::Train(a) => train_cmd(a, dump),
        Command::Eval(a) => eval_cmd(a, dump),
        Command::Predict(a) => predict_cmd(a, dump),
        Command::Bench(a) => bench_cmd(a, dump),
        Command::ExportAttn(a) => export_cmd(a, dump),
    }
}

/// Prints `config` and returns true under `--dump-config`; otherwise writes it
/// to `manifest` so every run leaves its resolved configuration behind.
fn record_config(command: &str, config: &impl Serialize, manifest: &Path, dump: bool) -> Result<bool> {
    let doc = serde_json::json!({ "command": command, "config": config });
    let text = serde_json::to_string_pretty(&doc)?;
    if dump {
        println!("{text}");
        return Ok(true);
    }
    if let Some(dir) = manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
    }
    fs::write(manifest, text + "\n").map_err(|e| Error::from(e).in_file(manifest))?;
    Ok(false)
}

fn gen_data(a: GenDataArgs, dump: bool) -> Result<()> {
    let spec = SyntheticSpec {
        num_sequences: a.sequences,
        length: a.length,
        joints: a.joints,
        joint_dim: a.joint_dim,
        seed: a.seed,
        window: a.window,
        max_amplitude: a.amplitude,
        noise: a.noise,
        dtype: a.dtype,
        ..SyntheticSpec::default()
    };
    spec.validate()?;
    if record_config("gen-data", &spec, &a.out.join(RUN_MANIFEST), dump)? {
        return Ok(());
    }
    let manifest = generate_synthetic(&spec, &a.out)?;
    println!("{}", a.out.join(MANIFEST_FILE).display());
    log::info!(
        "{} train, {} validation, {} test sequences",
        manifest.train.len(),
        manifest.validation.len(),
        manifest.test.len()
    );
    Ok(())
}

/// Joint layout of the first training sequence.
fn dataset_layout(data: &Path) -> Result<(usize, usize)> {
    let seqs = load_split(data, Split::Train)?;
    let first = seqs
        .first()
        .ok_or_else(|| Error::Data("training split is empty".into()))?;
    Ok((first.joints(), first.joint_dim()))
}

fn train_cmd(a: TrainArgs, dump: bool) -> Result<()> {
    let (joints, joint_dim) = dataset_layout(&a.data)?;
    let ffn = match a.ffn {
        FfnChoice::Dense => FfnKind::Dense,
        FfnChoice::Moe => {
            let experts = a.experts.unwrap_or_else(|| {
                eprintln!("notice: --experts not given, using 4");
                4
            });
            FfnKind::SoftMoe(MoeSettings {
                num_experts: experts,
                slots_per_expert: a.slots,
                expert_hidden: a.expert_hidden,
            })
        }
    };
    let model = ModelConfig {
        window: a.window,
        joints,
        joint_dim,
        embed_dim: a.embed,
        num_layers: a.layers,
        num_heads_temporal: a.heads,
        num_heads_spatial: a.heads,
        hidden_dim: a.hidden,
        dropout: a.dropout,
        ffn,
        dtype: a.dtype,
    };
    let config = TrainConfig {
        batch_size: a.batch,
        optimizer: a.opt,
        base_lr: a.lr,
        warmup_steps: a.warmup,
        epochs: a.epochs,
        total_effective_epochs: a.total_effective_epochs,
        tf_epsilon: a.tf_epsilon,
        seed: a.seed,
        checkpoint_dir: Some(a.ckpt_dir.clone()),
        save_every_n_epochs: a.save_every,
        clip_grad_norm: if a.no_clip { None } else { Some(1.0) },
        train_stride: a.stride,
        ..TrainConfig::default()
    };
    // Report every invalid setting at once before doing any work.
    let mut errs = Vec::new();
    for r in [model.validate(), config.validate()] {
        if let Err(Error::Config(e)) = r {
            errs.extend(e);
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let resolved = serde_json::json!({
        "data": a.data,
        "resume": a.resume,
        "model": model,
        "train": config,
    });
    if record_config("train", &resolved, &a.ckpt_dir.join(RUN_MANIFEST), dump)? {
        return Ok(());
    }
    if a.resume && !a.ckpt_dir.join(CHECKPOINT_FILE).exists() {
        eprintln!("notice: no checkpoint in {}, starting fresh", a.ckpt_dir.display());
    }
    let outcome = train(&a.data, model, config, a.resume)?;
    if let Some(epoch) = outcome.resumed_from {
        log::info!("resumed after epoch {epoch}");
    }
    if let Some(last) = outcome.trainer.log().last() {
        println!(
            "epoch {} train_loss {:.6} val_loss {}",
            last.epoch,
            last.train_loss,
            last.val_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
        );
    }
    println!("{}", a.ckpt_dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_model(ckpt: &Path) -> Result<StTransformer> {
    let ck = Checkpoint::load(checkpoint_path(ckpt))?;
    StTransformer::with_params(ck.model_config, ck.params)
}

fn eval_cmd(a: EvalArgs, dump: bool) -> Result<()> {
    let ckpt = checkpoint_path(&a.ckpt);
    let manifest = match &a.out {
        Some(out) => out.with_extension("manifest.json"),
        None => ckpt.with_file_name("eval.manifest.json"),
    };
    let resolved = serde_json::json!({
        "ckpt": ckpt,
        "data": resolve_manifest(&a.data),
        "split": format!("{:?}", a.split).to_lowercase(),
        "degrees": a.degrees,
        "out": a.out,
    });
    if record_config("eval", &resolved, &manifest, dump)? {
        return Ok(());
    }
    let ck = Checkpoint::load(&ckpt)?;
    let horizon = ck.train_config.horizon;
    let threshold = ck.train_config.std_threshold;
    let model = StTransformer::with_params(ck.model_config, ck.params)?;
    let seqs = load_split(&a.data, a.split)?;
    let t = model.config().window;
    let windows = windows_for(&seqs, t, horizon, t)?;
    if windows.is_empty() {
        return Err(Error::Data("no evaluation windows in this split".into()));
    }
    let ev = evaluate(&model, &windows, threshold)?;
    let scale = if a.degrees { 180.0 / std::f64::consts::PI } else { 1.0 };
    println!("windows {} mse {:.6}", ev.windows, ev.loss);
    for n in MAE_HORIZONS {
        if let Some(v) = ev.mae.mae(n) {
            println!("MAE@{n} {:.6}", v * scale);
        }
    }
    if let Some(out) = &a.out {
        fs::write(out, ev.mae.to_csv(a.degrees)).map_err(|e| Error::from(e).in_file(out))?;
    }
    Ok(())
}

/// The last `t` frames of `seq`.
fn last_window(seq: &PoseSequence, t: usize) -> Result<Tensor> {
    let n = seq.len();
    if n < t {
        return Err(Error::Data(format!("input has {n} frames, the model needs {t}")));
    }
    seq.frames.slice_leading(n - t, n)
}

fn predict_cmd(a: PredictArgs, dump: bool) -> Result<()> {
    if record_config("predict", &serde_json::json!({
        "ckpt": checkpoint_path(&a.ckpt),
        "in": a.input,
        "out": a.out,
        "horizon": a.horizon,
    }), &a.out.with_extension("manifest.json"), dump)?
    {
        return Ok(());
    }
    let model = load_model(&a.ckpt)?;
    let seq = read_motion(&a.input)?;
    let seed = last_window(&seq, model.config().window)?.to_dtype(model.config().dtype);
    let frames = predict(&model, &seed, a.horizon)?;
    write_motion(&a.out, &PoseSequence::new(frames)?, DType::F32)?;
    println!("{}", a.out.display());
    Ok(())
}

fn bench_cmd(a: BenchArgs, dump: bool) -> Result<()> {
    let spec = BenchSpec {
        base: ModelConfig {
            window: a.window,
            joints: a.joints,
            embed_dim: a.embed,
            num_layers: a.layers,
            dropout: 0.0,
            dtype: a.dtype,
            ..ModelConfig::default()
        },
        dense_hidden: a.sweep_dense,
        moe_experts: a.sweep_experts,
        expert_hidden: a.expert_hidden,
        test_windows: a.windows,
        horizon: a.horizon,
        reps: a.reps,
        warmup: a.warmup,
        threads: a.threads,
        seed: a.seed,
    };
    spec.base.validate()?;
    if record_config("bench", &spec, &a.out_dir.join(RUN_MANIFEST), dump)? {
        return Ok(());
    }
    let report = bench_inference(&spec)?;
    let csv = a.out_dir.join("bench.csv");
    let json = a.out_dir.join("bench.json");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::from(e).in_file(&csv))?;
    fs::write(&json, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::from(e).in_file(&json))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn export_cmd(a: ExportArgs, dump: bool) -> Result<()> {
    if record_config("export-attn", &serde_json::json!({
        "ckpt": checkpoint_path(&a.ckpt),
        "in": a.input,
        "out_dir": a.out_dir,
    }), &a.out_dir.join(RUN_MANIFEST), dump)?
    {
        return Ok(());
    }
    let model = load_model(&a.ckpt)?;
    let seq = read_motion(&a.input)?;
    let window = last_window(&seq, model.config().window)?.to_dtype(model.config().dtype);
    let (_, attention, routing) = model.forward_with_records(&window)?;
    let write = |name: String, body: String| -> Result<()> {
        let p = a.out_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::from(e).in_file(&p))
    };
    for rec in &attention {
        for path in [AttnPath::Temporal, AttnPath::Spatial] {
            write(format!("attn_layer{}_{}.csv", rec.layer_index, path.name()), rec.to_csv(path))?;
        }
    }
    for rec in &routing {
        write(format!("routing_layer{}_{}.csv", rec.layer_index, rec.path.name()), rec.to_csv())?;
    }
    println!("{}", a.out_dir.display());
    Ok(())
}
