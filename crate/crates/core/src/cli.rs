//! The `convllava` command line.
//!
//! Exit codes: 0 success, 1 runtime failure or violated property, 2 usage
//! error (clap handles unknown flags and bad values itself).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::analysis::{emit_curves, EncoderKind};
use crate::checkpoint::{self, Checkpoint, StoredTensor};
use crate::config::{load_encoder_config, TrainConfig};
use crate::encoder::{build_encoder, encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::pipeline::{Model, ENCODER_PREFIX};
use crate::preprocess::{self, load_ppm, PreprocessConfig, ResizeMode};
use crate::trainer::{pretrain_lm, run_stage, synth_data, DataSource, LOG_HEADER};
use crate::verify::{equivariance_check, gradcheck_pipeline, GradcheckConfig};

pub const GRADCHECK_TOL: f64 = 1e-5;
pub const EQUIVARIANCE_TOL: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "convllava", version, about = "Hierarchical ConvNeXt encoder for LMMs at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Token counts and FLOPs per encoder kind and resolution, as CSV.
    Analyze(AnalyzeArgs),
    /// Preprocess an image and run the encoder; writes the visual tokens.
    Encode(EncodeArgs),
    /// Preprocess an image into a normalized [1,3,H,W] tensor file.
    Preprocess(PreprocessArgs),
    /// Finite-difference check of the full pipeline gradient in f64.
    Gradcheck(GradcheckArgs),
    /// Shifted-crop translation equivariance of the encoder.
    Equivariance(EquivarianceArgs),
    /// Staged training on synthetic captioning data.
    Train(TrainArgs),
    /// List the contents of a checkpoint or tensor file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, value_delimiter = ',', default_value = "vit,convnext4,convnext5")]
    pub kinds: Vec<EncoderKind>,
    #[arg(long, value_delimiter = ',', default_value = "336,672,768,1024,1536")]
    pub resolutions: Vec<usize>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Preset name (toy4, toy5, convnext4, convnext5) or a key=value file.
    #[arg(long, default_value = "toy5")]
    pub config: String,
    /// Encoder weights; bare names or `encoder.`-prefixed. Random init if absent.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Binary PPM (P6) image.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "square")]
    pub mode: ResizeMode,
    #[arg(long)]
    pub res: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for random initialization when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "square")]
    pub mode: ResizeMode,
    #[arg(long)]
    pub res: usize,
    /// Downsampling factor the output size must respect.
    #[arg(long, default_value_t = 64)]
    pub factor: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GradcheckPreset {
    Tiny,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = GradcheckPreset::Tiny)]
    pub config: GradcheckPreset,
}

#[derive(Debug, Args)]
pub struct EquivarianceArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Horizontal shift in pixels; a multiple of the downsampling factor.
    #[arg(long, default_value_t = 64)]
    pub shift: usize,
    #[arg(long, default_value = "toy5")]
    pub config: String,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// Crop width; defaults to the border margin on both sides plus four cells.
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DataKind {
    Synth,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value plan file; desk defaults for stages 1-3 if absent.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DataKind::Synth)]
    pub data: DataKind,
    /// Single-threaded kernels.
    #[arg(long)]
    pub det: bool,
    /// Final checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step metrics log path.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub file: PathBuf,
}

/// Usage-type errors exit 2; everything else exits 1.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NotMultiple { .. } | Error::Config(_) | Error::InvalidArgument(_) | Error::InputTooSmall { .. } => 2,
        _ => 1,
    }
}

/// Whether the checked property held.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<Outcome> {
    match cli.command {
        Command::Analyze(a) => analyze(a, out),
        Command::Encode(a) => encode_cmd(a, out),
        Command::Preprocess(a) => preprocess_cmd(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Equivariance(a) => equivariance(a, out),
        Command::Train(a) => train(a, out),
        Command::Inspect(a) => inspect(a, out),
    }
}

fn emit(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Preset name, or a key=value file.
pub fn resolve_encoder(spec: &str) -> Result<EncoderConfig> {
    match EncoderConfig::preset(spec) {
        Ok(c) => Ok(c),
        Err(_) if Path::new(spec).exists() => load_encoder_config(spec),
        Err(e) => Err(e),
    }
}

fn analyze(a: AnalyzeArgs, out: &mut dyn Write) -> Result<Outcome> {
    let csv = emit_curves(&a.kinds, &a.resolutions)?;
    match a.out {
        Some(p) => write_file(&p, csv.as_bytes())?,
        None => out.write_all(csv.as_bytes()).map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(Outcome::Pass)
}

fn encode_cmd(a: EncodeArgs, out: &mut dyn Write) -> Result<Outcome> {
    let cfg = resolve_encoder(&a.config)?;
    let img = load_ppm(&a.image)?;
    let pre = PreprocessConfig::new(a.mode, a.res, cfg.downsampling_factor());
    let x = preprocess::preprocess(&img, &pre)?;
    let mut state = build_encoder::<f32>(&cfg, a.seed)?;
    if let Some(p) = &a.ckpt {
        let ck = checkpoint::load(p)?;
        let prefixed = ck.keys().any(|k| k.starts_with(ENCODER_PREFIX));
        let weights = ck
            .iter()
            .filter_map(|(k, v)| {
                let name = if prefixed { k.strip_prefix(ENCODER_PREFIX)? } else { k };
                Some((name.to_string(), v.to::<f32>()))
            })
            .collect();
        state.params.assign_all(&weights)?;
    }
    let tokens = encode(&state, &x)?;
    if let Some(p) = &a.out {
        preprocess::write_tensor_file(&tokens.tokens, p)?;
    }
    emit(out, format!("tokens={} grid={}x{}", tokens.count(), tokens.grid_h, tokens.grid_w))?;
    Ok(Outcome::Pass)
}

fn preprocess_cmd(a: PreprocessArgs, out: &mut dyn Write) -> Result<Outcome> {
    let img = load_ppm(&a.image)?;
    let x = preprocess::preprocess(&img, &PreprocessConfig::new(a.mode, a.res, a.factor))?;
    preprocess::write_tensor_file(&x, &a.out)?;
    let dims: Vec<String> = x.shape().iter().map(|d| d.to_string()).collect();
    emit(out, format!("shape={}", dims.join("x")))?;
    Ok(Outcome::Pass)
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<Outcome> {
    let cfg = match a.config {
        GradcheckPreset::Tiny => GradcheckConfig::tiny(),
    };
    let r = gradcheck_pipeline(&cfg, a.seed)?;
    emit(
        out,
        format!(
            "seed={} checked={} max_rel_err={:.3e} worst={} analytic={:.6e} numeric={:.6e}",
            r.seed, r.checked, r.max_rel_err, r.worst, r.analytic, r.numeric
        ),
    )?;
    let pass = r.max_rel_err < GRADCHECK_TOL;
    emit(out, format!("max_rel_err<{GRADCHECK_TOL:e} {}", verdict(pass)))?;
    Ok(outcome(pass))
}

fn equivariance(a: EquivarianceArgs, out: &mut dyn Write) -> Result<Outcome> {
    let cfg = resolve_encoder(&a.config)?;
    let d = cfg.downsampling_factor();
    let width = a
        .width
        .unwrap_or_else(|| d * (2 * cfg.border_margin() + a.shift / d + 4));
    let r = equivariance_check(&cfg, a.seed, a.shift, a.height, width)?;
    emit(
        out,
        format!(
            "grid={}x{} margin={} shift_cells={} compared={} max_abs_diff={:.3e} worst_cell={:?}",
            r.grid.0, r.grid.1, r.margin, r.shift_cells, r.compared_cells, r.max_abs_diff, r.worst_cell
        ),
    )?;
    let pass = r.max_abs_diff < EQUIVARIANCE_TOL;
    emit(out, format!("interior max|diff|<{EQUIVARIANCE_TOL:e} {}", verdict(pass)))?;
    Ok(outcome(pass))
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn outcome(pass: bool) -> Outcome {
    if pass {
        Outcome::Pass
    } else {
        Outcome::Fail
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<Outcome> {
    let DataKind::Synth = a.data;
    if a.det {
        // Errors only if a pool already exists, which then keeps its own setting.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let cfg = match &a.plan {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(&[1, 2, 3])?,
    };
    let mut model = Model::<f32>::build(&cfg.model, cfg.seed)?;
    let grid = cfg.model.encoder.grid(cfg.image_size, cfg.image_size);
    let mut log = String::new();
    if let Some(pre) = &cfg.pretrain {
        let recs = pretrain_lm(&mut model.lm, pre, cfg.image_size, grid, cfg.caption_len)?;
        let last = recs.last().map_or(f64::NAN, |r| r.loss);
        emit(out, format!("# stage=0 lm_pretrain steps={} peak_lr={:e} final_loss={last:.4}", pre.steps, pre.peak_lr))?;
    }
    let data = synth_data(cfg.seed, cfg.samples, cfg.image_size, cfg.caption_len, cfg.model.lm.vocab_size)?;
    let data = if cfg.control { data.shuffled_control(cfg.seed) } else { data };
    log.push_str(LOG_HEADER);
    log.push('\n');
    for plan in &cfg.plans {
        let stage_log = run_stage(&mut model, plan, &data as &dyn DataSource)?;
        emit(out, plan.summary())?;
        emit(
            out,
            format!(
                "stage={} steps={} initial_loss={:.4} smoothed_final_loss={:.4}",
                plan.stage,
                stage_log.total_steps,
                stage_log.initial_loss(),
                stage_log.smoothed_final(20)
            ),
        )?;
        log.push_str(&stage_log.to_lines());
    }
    if let Some(p) = &a.log {
        write_file(p, log.as_bytes())?;
    }
    let bytes = checkpoint::encode(&checkpoint::to_checkpoint(&model.state_dict()))?;
    if let Some(p) = &a.out {
        write_file(p, &bytes)?;
    }
    emit(out, format!("checkpoint_sha256={}", sha256_hex(&bytes)))?;
    Ok(Outcome::Pass)
}

fn inspect(a: InspectArgs, out: &mut dyn Write) -> Result<Outcome> {
    let bytes = std::fs::read(&a.file).map_err(|e| Error::io(&a.file, e))?;
    if bytes.starts_with(checkpoint::MAGIC) {
        let ck: Checkpoint = checkpoint::decode(&bytes)?;
        let total: usize = ck.values().map(StoredTensor::numel).sum();
        emit(out, format!("checkpoint entries={} scalars={total}", ck.len()))?;
        for (name, t) in &ck {
            emit(out, format!("{name} {:?} {:?}", t.dtype(), t.shape()))?;
        }
    } else {
        let t = preprocess::decode_tensor_file(&bytes)?;
        emit(out, format!("tensor f32 {:?}", t.shape()))?;
    }
    Ok(Outcome::Pass)
}
