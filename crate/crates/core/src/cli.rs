//! The `vitvs` command-line tool.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 configuration or usage
//! error, 3 I/O or file-format error, 4 shape or dimension mismatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{self, check_disjoint, load_split_manifest, Dataset, Split, SynthConfig};
use crate::error::{shape_err, Error, Result};
use crate::io::{image_to_gray, read_wav, write_mask_png, write_png, write_wav, WavFormat};
use crate::kv::{KvConfig, KvFile};
use crate::metrics::{
    ablation_csv, ablation_table, evaluate_dataset, results_csv, results_table, ConstantPredictor,
    MaskPredictor, OraclePredictor, ReportRow,
};
use crate::model::{ModelConfig, ViTVS};
use crate::pipeline::{denoise, spectrogram_image};
use crate::training::{ablate, train, EpochRecord, TrainConfig, TrainOptions, TrainState};

#[derive(Debug, Parser)]
#[command(name = "vitvs", version, about = "Bird sound denoising by spectrogram segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with ground-truth masks.
    Synth(SynthArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Denoise one WAV file with a trained model.
    Denoise(DenoiseArgs),
    /// Score a model on corpus splits.
    Eval(EvalArgs),
    /// Train and score one model per block depth.
    Ablate(AblateArgs),
    /// Render the log-magnitude spectrogram of a WAV file as PNG.
    Spectrogram(SpectrogramArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Key-value synthesis settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainingFlags {
    /// Key-value model settings.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Key-value training settings.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory holding train.manifest and val.manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub flags: TrainingFlags,
    /// Receives best.ckpt, last.ckpt and report.tsv.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a training checkpoint, or start from a model checkpoint.
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the predicted mask on the spectrogram grid.
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutFormat::Float32)]
    pub format: OutFormat,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OutFormat {
    Float32,
    Pcm16,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PredictorKind {
    /// The checkpoint's model.
    Model,
    /// The ground-truth masks.
    Oracle,
    /// Remove everything.
    Zeros,
    /// Keep everything.
    Ones,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Required for the model predictor.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PredictorKind::Model)]
    pub predictor: PredictorKind,
    /// Also report SDR against ground-truth-mask filtering.
    #[arg(long)]
    pub sdr: bool,
    /// Comma-separated splits.
    #[arg(long, default_value = "val,test", value_delimiter = ',')]
    pub splits: Vec<String>,
    /// Model settings for oracle and constant predictors (default: desk-size input).
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Blocks per encoder and decoder, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub depths: Vec<usize>,
    #[command(flatten)]
    pub flags: TrainingFlags,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpectrogramArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Denoise(a) => denoise_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Spectrogram(a) => spectrogram(a),
    }
}

fn load_config<C: KvConfig + Default>(path: Option<&Path>) -> Result<C> {
    let mut config = C::default();
    if let Some(p) = path {
        config.apply(&KvFile::load(p)?)?;
    }
    Ok(config)
}

fn synth(a: SynthArgs) -> Result<()> {
    let config: SynthConfig = load_config(a.config.as_deref())?;
    let stats = data::synthesize(&config, a.seed, &a.out)?;
    for s in &stats {
        println!("{}", a.out.join(s.split.manifest_name()).display());
    }
    for s in &stats {
        println!("{s}");
    }
    Ok(())
}

impl TrainingFlags {
    fn configs(&self) -> Result<(Option<ModelConfig>, TrainConfig)> {
        let model = match &self.model_config {
            Some(p) => Some(load_config::<ModelConfig>(Some(p))?),
            None => None,
        };
        let mut train: TrainConfig = load_config(self.train_config.as_deref())?;
        if let Some(v) = self.seed {
            train.seed = v;
        }
        if let Some(v) = self.epochs {
            train.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            train.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = self.weight_decay {
            train.weight_decay = v;
        }
        if let Some(m) = &model {
            m.validate()?;
        }
        train.validate()?;
        Ok((model, train))
    }
}

fn load_splits(dir: &Path, splits: &[Split], model: &ModelConfig) -> Result<Vec<Dataset>> {
    let manifests = splits
        .iter()
        .map(|&s| load_split_manifest(dir, s))
        .collect::<Result<Vec<_>>>()?;
    check_disjoint(&manifests)?;
    let sets = manifests
        .iter()
        .map(|m| Dataset::load(m, model))
        .collect::<Result<Vec<_>>>()?;
    let odd: usize = sets.iter().map(Dataset::nonbinary_mask_pixels).sum();
    if odd > 0 {
        eprintln!("warning: {odd} mask pixels were neither 0 nor 255 and were thresholded at 128");
    }
    Ok(sets)
}

fn print_epoch(r: &EpochRecord) {
    let val = r
        .val
        .map(|v| format!("  val IoU {:.2} Dice {:.2} F1 {:.2}", v.iou, v.dice, v.f1))
        .unwrap_or_default();
    let secs = r.seconds.map(|s| format!("  ({s:.1} s)")).unwrap_or_default();
    println!("epoch {:>3}  loss {:.6}{val}{secs}", r.epoch, r.loss);
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (model_config, train_config) = a.flags.configs()?;
    let mut state = match &a.init_checkpoint {
        Some(path) => {
            let state = match TrainState::<f32>::load(path) {
                Ok(s) => s,
                Err(Error::Format { .. }) => TrainState::new(ViTVS::<f32>::load(path)?),
                Err(e) => return Err(e),
            };
            if let Some(mc) = &model_config {
                if mc != state.model.config() {
                    return Err(shape_err!(
                        "{} holds a model whose configuration differs from --model-config",
                        path.display()
                    ));
                }
            }
            state
        }
        None => {
            let mc = model_config.unwrap_or_default();
            TrainState::new(ViTVS::<f32>::new(mc, train_config.seed)?)
        }
    };
    let model_config = state.model.config().clone();
    let sets = load_splits(&a.data, &[Split::Train, Split::Val], &model_config)?;
    println!(
        "training {} parameters on {} samples ({} validation)",
        state.model.param_count(),
        sets[0].len(),
        sets[1].len()
    );
    let mut cb = print_epoch;
    let options = TrainOptions {
        out_dir: Some(&a.out),
        on_epoch: Some(&mut cb),
    };
    let report = train(&mut state, &sets[0], Some(&sets[1]), &train_config, options)?;
    if let Some(p) = &report.best_checkpoint {
        println!("best checkpoint: {}", p.display());
    }
    if let Some(p) = &report.last_checkpoint {
        println!("last checkpoint: {}", p.display());
    }
    Ok(())
}

fn denoise_cmd(a: DenoiseArgs) -> Result<()> {
    let model = ViTVS::<f32>::load(&a.checkpoint)?;
    let audio = read_wav(&a.input)?;
    let out = denoise(&model, &audio).map_err(|e| match e {
        Error::InvalidInput(m) => Error::format(&a.input, m),
        other => other,
    })?;
    let format = match a.format {
        OutFormat::Float32 => WavFormat::Float32,
        OutFormat::Pcm16 => WavFormat::Pcm16,
    };
    write_wav(&a.out, &out.audio, format)?;
    if let Some(p) = &a.mask_out {
        write_mask_png(p, &out.mask)?;
    }
    println!(
        "{}: {} samples, kept {} of {} bins",
        a.out.display(),
        out.audio.len(),
        out.mask.count_ones(),
        out.mask.labels().len()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let splits = a
        .splits
        .iter()
        .map(|s| s.trim().parse())
        .collect::<Result<Vec<Split>>>()?;
    let model = match (&a.checkpoint, a.predictor) {
        (Some(p), PredictorKind::Model) => Some(ViTVS::<f32>::load(p)?),
        (None, PredictorKind::Model) => {
            return Err(crate::error::config_err!("--checkpoint is required for the model predictor"))
        }
        _ => None,
    };
    let model_config = match (&model, &a.model_config) {
        (Some(m), _) => m.config().clone(),
        (None, Some(p)) => load_config(Some(p))?,
        (None, None) => ModelConfig::desk(),
    };
    let predictor: Box<dyn MaskPredictor> = match a.predictor {
        PredictorKind::Model => Box::new(model.expect("loaded above")),
        PredictorKind::Oracle => Box::new(OraclePredictor),
        PredictorKind::Zeros => Box::new(ConstantPredictor(false)),
        PredictorKind::Ones => Box::new(ConstantPredictor(true)),
    };
    let sets = load_splits(&a.data, &splits, &model_config)?;
    let mut rows = Vec::new();
    for set in &sets {
        let (summary, _) = evaluate_dataset(predictor.as_ref(), set, a.sdr)?;
        rows.push(ReportRow {
            method: predictor.name(),
            split: set.split.to_string(),
            summary,
        });
    }
    let csv = results_csv(&rows);
    print!("{}\n{csv}", results_table(&rows));
    if let Some(p) = &a.csv {
        std::fs::write(p, &csv).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let (model_config, train_config) = a.flags.configs()?;
    let base = model_config.unwrap_or_default();
    let sets = load_splits(&a.data, &Split::ALL, &base)?;
    let rows = ablate(&base, &a.depths, &train_config, &sets[0], &sets[1], &sets[2], |r| {
        eprintln!("{}: val IoU {:.2}, test IoU {:.2}", r.variant, r.val.iou, r.test.iou)
    })?;
    let csv = ablation_csv(&rows);
    print!("{}\n{csv}", ablation_table(&rows));
    if let Some(p) = &a.csv {
        std::fs::write(p, &csv).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn spectrogram(a: SpectrogramArgs) -> Result<()> {
    let audio = read_wav(&a.input)?;
    let image = spectrogram_image(&audio).map_err(|e| match e {
        Error::InvalidInput(m) => Error::format(&a.input, m),
        other => other,
    })?;
    write_png(&a.out, &image_to_gray(&image))?;
    println!("{}: {}x{}", a.out.display(), image.height(), image.width());
    Ok(())
}
