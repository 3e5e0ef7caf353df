//! Pixel-wise negative log-likelihood, AdamW and the epoch loop.
//!
//! Each epoch shuffles the training set with a generator seeded by
//! `seed + epoch_index`, walks it in batches (the last may be short), takes
//! one optimizer step per batch and then scores the validation split. The
//! learning rate is constant. Checkpoints hold the model, the optimizer
//! moments and the history so far, so an interrupted run resumes exactly.

mod adamw;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adamw::{AdamW, AdamWParams};

use crate::data::{Dataset, Sample};
use crate::dsp::Mask;
use crate::error::{config_err, shape_err, Error, Result};
use crate::kv::{parse_value, KvConfig, KvFile};
use crate::metrics::{evaluate_dataset, AblationRow};
use crate::model::{image_tensor, ModelConfig, ViTVS};
use crate::tensor::{Checkpoint, NormMode, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 5e-4,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWParams {
        AdamWParams {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            _ => return Err(config_err!("unknown training setting {key:?}")),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err!("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(config_err!("epochs must be at least 1"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(config_err!("betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(config_err!("adam_eps must be positive"));
        }
        Ok(())
    }
}

/// Mean over all pixels of `-log softmax(logits)[label]`. `logits` is
/// `[H, W, C]` or `[B, H, W, C]`; `targets` holds one mask per image.
pub fn nll_loss<'t, T: Real>(logits: Var<'t, T>, targets: &[Mask]) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape.len() < 3 {
        return Err(shape_err!("logits must be [.., H, W, C], got {shape:?}"));
    }
    let (h, w) = (shape[shape.len() - 3], shape[shape.len() - 2]);
    let images: usize = shape[..shape.len() - 3].iter().product();
    if targets.len() != images || targets.iter().any(|m| m.height() != h || m.width() != w) {
        return Err(shape_err!("{} target masks do not match logits {shape:?}", targets.len()));
    }
    let labels: Vec<usize> = targets
        .iter()
        .flat_map(|m| m.labels().iter().map(|&l| usize::from(l)))
        .collect();
    logits.log_softmax(shape.len() - 1)?.nll(&labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValScores {
    pub iou: f64,
    pub dice: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub val: Option<ValScores>,
    /// Wall time; absent for epochs restored from a checkpoint.
    pub seconds: Option<f64>,
}

impl EpochRecord {
    fn tsv_fields(&self) -> String {
        let v = |f: fn(&ValScores) -> f64| self.val.map(|s| format!("{:.4}", f(&s))).unwrap_or_else(|| "-".into());
        format!(
            "{}\t{:.8}\t{}\t{}\t{}",
            self.epoch,
            self.loss,
            v(|s| s.iou),
            v(|s| s.dice),
            v(|s| s.f1)
        )
    }
}

pub const REPORT_HEADER: &str = "epoch\tloss\tval_iou\tval_dice\tval_f1\tseconds";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Loss of every optimizer step since the start of training.
    pub step_losses: Vec<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// One line per epoch: epoch, loss, val IoU, Dice, F1, seconds.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.records {
            let secs = r.seconds.map(|s| format!("{s:.3}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!("{}\t{secs}\n", r.tsv_fields()));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real = f32> {
    pub model: ViTVS<T>,
    pub optimizer: AdamW<T>,
    pub epochs_done: usize,
    pub records: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    /// Best validation IoU so far and its 1-based epoch.
    pub best: Option<(f64, usize)>,
    /// In-memory copy of the best model of this process, if any.
    pub best_model: Option<ViTVS<T>>,
}

pub const TRAIN_FORMAT: &str = "vitvs-train";

impl<T: Real> TrainState<T> {
    pub fn new(model: ViTVS<T>) -> Self {
        let optimizer = AdamW::new(model.params());
        Self {
            model,
            optimizer,
            epochs_done: 0,
            records: Vec::new(),
            step_losses: Vec::new(),
            best: None,
            best_model: None,
        }
    }

    /// A model checkpoint extended with optimizer state and history. It
    /// loads as a plain model too.
    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        let mut meta = format!(
            "train.format = {TRAIN_FORMAT}\ntrain.epochs_done = {}\ntrain.adam_t = {}\n",
            self.epochs_done, self.optimizer.t
        );
        if let Some((iou, epoch)) = self.best {
            meta.push_str(&format!("train.best_iou = {iou}\ntrain.best_epoch = {epoch}\n"));
        }
        meta.push_str(&config.to_kv_with_prefix("train.config."));
        for (i, r) in self.records.iter().enumerate() {
            let val = r.val.map(|v| format!("{} {} {}", v.iou, v.dice, v.f1)).unwrap_or_else(|| "-".into());
            meta.push_str(&format!("train.record.{i} = {} {} {val}\n", r.epoch, r.loss));
        }
        ck.metadata.push_str(&meta);
        self.optimizer.write_checkpoint(self.model.params(), &mut ck);
        let losses = Tensor::new(&[self.step_losses.len()], self.step_losses.clone()).expect("1-d");
        ck.push("train.step_losses", &losses);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ViTVS::from_checkpoint(ck)?;
        let meta = KvFile::parse(&ck.metadata)?;
        if meta.get("train.format") != Some(TRAIN_FORMAT) {
            return Err(config_err!("checkpoint has no training state"));
        }
        let get = |k: &str| meta.get(k).ok_or_else(|| config_err!("checkpoint lacks {k}"));
        let epochs_done: usize = parse_value("train.epochs_done", get("train.epochs_done")?)?;
        let t: u64 = parse_value("train.adam_t", get("train.adam_t")?)?;
        let best = match meta.get("train.best_iou") {
            Some(v) => Some((parse_value("train.best_iou", v)?, parse_value("train.best_epoch", get("train.best_epoch")?)?)),
            None => None,
        };
        let mut records = Vec::with_capacity(epochs_done);
        for i in 0..epochs_done {
            let key = format!("train.record.{i}");
            let line = get(&key)?;
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| parse_value::<f64>(&key, s);
            let val = match f.as_slice() {
                [_, _, "-"] => None,
                [_, _, a, b, c] => Some(ValScores { iou: num(a)?, dice: num(b)?, f1: num(c)? }),
                _ => return Err(config_err!("malformed {key}")),
            };
            records.push(EpochRecord { epoch: parse_value(&key, f[0])?, loss: num(f[1])?, val, seconds: None });
        }
        let optimizer = AdamW::read_checkpoint(model.params(), ck, t)?;
        let step_losses = ck.tensor::<f64>("train.step_losses")?.into_data();
        Ok(Self { model, optimizer, epochs_done, records, step_losses, best, best_model: None })
    }

    pub fn save(&self, config: &TrainConfig, path: &Path) -> Result<()> {
        self.to_checkpoint(config).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Self::from_checkpoint(&ck).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            other => other,
        })
    }

    /// The best model seen in this process, else the current one.
    pub fn selected_model(&self) -> &ViTVS<T> {
        self.best_model.as_ref().unwrap_or(&self.model)
    }
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const REPORT_FILE: &str = "report.tsv";

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives `best.ckpt`, `last.ckpt` and `report.tsv` when set.
    pub out_dir: Option<&'a Path>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

fn check_dims(model: &ModelConfig, data: &Dataset) -> Result<()> {
    let s = model.image_size;
    for sample in &data.samples {
        if sample.image.height() != s || sample.image.width() != s || sample.mask.height() != s || sample.mask.width() != s {
            return Err(config_err!(
                "sample {} is {}x{} but the model expects {s}x{s}",
                sample.id,
                sample.image.height(),
                sample.image.width()
            ));
        }
    }
    Ok(())
}

fn batch_tensor<T: Real>(samples: &[&Sample], channels: usize) -> Result<Tensor<T>> {
    let (h, w) = (samples[0].image.height(), samples[0].image.width());
    let mut data = Vec::with_capacity(samples.len() * h * w * channels);
    for s in samples {
        data.extend_from_slice(image_tensor::<T>(&s.image, channels).data());
    }
    Tensor::new(&[samples.len(), h, w, channels], data)
}

/// One forward/backward/update on `batch`; returns the loss.
pub fn train_step<T: Real>(state: &mut TrainState<T>, batch: &[&Sample], hp: &AdamWParams) -> Result<f64> {
    let model = &state.model;
    let images = batch_tensor::<T>(batch, model.config().in_channels)?;
    let masks: Vec<Mask> = batch.iter().map(|s| s.mask.clone()).collect();
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let mut stats = model.bn_stats().clone();
    let logits = model.forward(&bound, tape.constant(images), &mut stats, NormMode::Train)?;
    let loss = nll_loss(logits, &masks)?;
    let value = loss.value().item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let mut grads = tape.backward(loss)?;
    let grads = bound.gradients(&mut grads);
    *state.model.bn_stats_mut() = stats;
    state.optimizer.step(state.model.params_mut(), &grads, hp)?;
    Ok(value)
}

/// Runs epochs `state.epochs_done + 1 ..= config.epochs`.
pub fn train<T: Real>(
    state: &mut TrainState<T>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
    mut options: TrainOptions<'_>,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    check_dims(state.model.config(), train_set)?;
    if let Some(v) = val_set {
        check_dims(state.model.config(), v)?;
    }
    if let Some(dir) = options.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let hp = config.optimizer();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    while state.epochs_done < config.epochs {
        let started = Instant::now();
        let epoch = state.epochs_done;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64)));
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set.samples[i]).collect();
            let loss = train_step(state, &batch, &hp)?;
            state.step_losses.push(loss);
            total += loss;
            steps += 1;
        }
        let val = match val_set {
            Some(v) if !v.is_empty() => {
                let (s, _) = evaluate_dataset(&state.model, v, false)?;
                Some(ValScores { iou: s.iou, dice: s.dice, f1: s.f1 })
            }
            _ => None,
        };
        state.epochs_done += 1;
        let record = EpochRecord {
            epoch: state.epochs_done,
            loss: total / steps as f64,
            val,
            seconds: Some(started.elapsed().as_secs_f64()),
        };
        let improved = match (val, state.best) {
            (Some(v), Some((best, _))) => v.iou > best,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            state.best = Some((val.unwrap().iou, state.epochs_done));
            state.best_model = Some(state.model.clone());
        }
        state.records.push(record.clone());
        if let Some(dir) = options.out_dir {
            if improved {
                state.save(config, &dir.join(BEST_CHECKPOINT))?;
            }
            state.save(config, &dir.join(LAST_CHECKPOINT))?;
        }
        if let Some(cb) = options.on_epoch.as_mut() {
            cb(&record);
        }
    }
    let report = TrainReport {
        records: state.records.clone(),
        step_losses: state.step_losses.clone(),
        best_checkpoint: options
            .out_dir
            .map(|d| d.join(BEST_CHECKPOINT))
            .filter(|p| p.exists()),
        last_checkpoint: options.out_dir.map(|d| d.join(LAST_CHECKPOINT)),
    };
    if let Some(dir) = options.out_dir {
        let path = dir.join(REPORT_FILE);
        std::fs::write(&path, report.to_tsv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

/// Fresh model, full run, no files.
pub fn fit(
    model_config: &ModelConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(TrainState<f32>, TrainReport)> {
    let mut state = TrainState::new(ViTVS::<f32>::new(model_config.clone(), config.seed)?);
    let report = train(&mut state, train_set, val_set, config, TrainOptions::default())?;
    Ok((state, report))
}

/// Trains one model per depth (encoder and decoder both get `depth`
/// blocks) with the same seed and data, then scores the selected model on
/// validation and test.
pub fn ablate(
    base: &ModelConfig,
    depths: &[usize],
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
    mut on_variant: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if depths.is_empty() || depths.contains(&0) {
        return Err(config_err!("depths must be a non-empty list of positive integers"));
    }
    let mut rows = Vec::with_capacity(depths.len());
    for &depth in depths {
        let (state, _) = fit(&base.clone().with_depth(depth), train_set, Some(val_set), config)?;
        let model = state.selected_model();
        let row = AblationRow {
            variant: format!("ViTVS {depth}-block"),
            val: evaluate_dataset(model, val_set, false)?.0,
            test: evaluate_dataset(model, test_set, false)?.0,
        };
        on_variant(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
