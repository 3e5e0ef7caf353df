//! Pixel-level segmentation scores and report tables.
//!
//! Class 1 is positive. Scores are reported multiplied by 100. A sample whose
//! prediction and truth are both empty scores 100 on every metric. Dataset
//! summaries are arithmetic means of per-sample scores.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{Dataset, Sample};
use crate::dsp::{resize_mask, sdr, Mask};
use crate::error::{config_err, invalid, Result};
use crate::model::{image_tensor, ViTVS};
use crate::pipeline::mask_denoise;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion(pred: &Mask, truth: &Mask) -> Result<ConfusionCounts> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(invalid!(
            "prediction is {}x{} but truth is {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

fn empty_union(c: &ConfusionCounts) -> bool {
    c.tp + c.fp + c.fn_ == 0
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    if empty_union(c) {
        return 100.0;
    }
    100.0 * c.tp as f64 / (c.tp + c.fp + c.fn_) as f64
}

pub fn dice(c: &ConfusionCounts) -> f64 {
    if empty_union(c) {
        return 100.0;
    }
    100.0 * (2 * c.tp) as f64 / (2 * c.tp + c.fp + c.fn_) as f64
}

/// Harmonic mean of precision and recall. With no true positives it is 0
/// (unless the union is empty).
pub fn f1(c: &ConfusionCounts) -> f64 {
    if empty_union(c) {
        return 100.0;
    }
    if c.tp == 0 {
        return 0.0;
    }
    let precision = c.tp as f64 / (c.tp + c.fp) as f64;
    let recall = c.tp as f64 / (c.tp + c.fn_) as f64;
    100.0 * 2.0 * precision * recall / (precision + recall)
}

/// A mask prediction at model resolution and on the spectrogram grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mask: Mask,
    pub spec_mask: Mask,
}

pub trait MaskPredictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, samples: &[Sample]) -> Result<Vec<Prediction>>;
}

fn to_spec_grid(mask: Mask, sample: &Sample) -> Result<Prediction> {
    let spec_mask = resize_mask(&mask, sample.spec_mask.height(), sample.spec_mask.width())?;
    Ok(Prediction { mask, spec_mask })
}

impl<T: Real> MaskPredictor for ViTVS<T> {
    fn name(&self) -> String {
        "ViTVS".into()
    }

    fn predict(&self, samples: &[Sample]) -> Result<Vec<Prediction>> {
        let Some(first) = samples.first() else {
            return Ok(Vec::new());
        };
        let c = self.config().in_channels;
        let (h, w) = (first.image.height(), first.image.width());
        let mut data = Vec::with_capacity(samples.len() * h * w * c);
        for s in samples {
            data.extend_from_slice(image_tensor::<T>(&s.image, c).data());
        }
        let batch = Tensor::new(&[samples.len(), h, w, c], data)?;
        self.predict_masks(&batch)?
            .into_iter()
            .zip(samples)
            .map(|(m, s)| to_spec_grid(m, s))
            .collect()
    }
}

/// Returns the ground truth.
#[derive(Clone, Copy, Debug, Default)]
pub struct OraclePredictor;

impl MaskPredictor for OraclePredictor {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, samples: &[Sample]) -> Result<Vec<Prediction>> {
        Ok(samples
            .iter()
            .map(|s| Prediction { mask: s.mask.clone(), spec_mask: s.spec_mask.clone() })
            .collect())
    }
}

/// Labels every pixel the same.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPredictor(pub bool);

impl MaskPredictor for ConstantPredictor {
    fn name(&self) -> String {
        format!("all-{}", u8::from(self.0))
    }

    fn predict(&self, samples: &[Sample]) -> Result<Vec<Prediction>> {
        Ok(samples
            .iter()
            .map(|s| Prediction {
                mask: Mask::filled(s.mask.height(), s.mask.width(), self.0),
                spec_mask: Mask::filled(s.spec_mask.height(), s.spec_mask.width(), self.0),
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub id: String,
    pub counts: ConfusionCounts,
    pub f1: f64,
    pub iou: f64,
    pub dice: f64,
    /// `None` when SDR was not requested or the reference is silent.
    pub sdr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub samples: usize,
    pub f1: f64,
    pub iou: f64,
    pub dice: f64,
    pub sdr: Option<f64>,
    /// Samples that contributed to the SDR mean.
    pub sdr_samples: usize,
}

impl MetricSummary {
    pub fn from_scores(scores: &[SampleScores]) -> Self {
        let n = scores.len();
        let mean = |f: fn(&SampleScores) -> f64| {
            if n == 0 {
                0.0
            } else {
                scores.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let sdrs: Vec<f64> = scores.iter().filter_map(|s| s.sdr).collect();
        Self {
            samples: n,
            f1: mean(|s| s.f1),
            iou: mean(|s| s.iou),
            dice: mean(|s| s.dice),
            sdr: (!sdrs.is_empty()).then(|| sdrs.iter().sum::<f64>() / sdrs.len() as f64),
            sdr_samples: sdrs.len(),
        }
    }
}

pub const EVAL_BATCH: usize = 8;

/// Scores at model resolution. With `with_sdr`, each sample's noisy audio is
/// denoised with the predicted mask on the spectrogram grid and compared to
/// the same audio denoised with the ground-truth mask.
pub fn evaluate_dataset(
    predictor: &dyn MaskPredictor,
    dataset: &Dataset,
    with_sdr: bool,
) -> Result<(MetricSummary, Vec<SampleScores>)> {
    if with_sdr && dataset.samples.iter().any(|s| s.audio.is_empty()) {
        return Err(config_err!("SDR requested but some samples have no audio"));
    }
    let chunks: Vec<Vec<SampleScores>> = dataset
        .samples
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let preds = predictor.predict(chunk)?;
            chunk
                .iter()
                .zip(preds)
                .map(|(s, p)| score_sample(s, &p, with_sdr))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let scores: Vec<SampleScores> = chunks.into_iter().flatten().collect();
    Ok((MetricSummary::from_scores(&scores), scores))
}

fn score_sample(s: &Sample, p: &Prediction, with_sdr: bool) -> Result<SampleScores> {
    let counts = confusion(&p.mask, &s.mask)?;
    let sdr_db = if with_sdr {
        let reference = mask_denoise(&s.audio, &s.spec_mask)?;
        if reference.energy() == 0.0 {
            None
        } else {
            Some(sdr(&reference, &mask_denoise(&s.audio, &p.spec_mask)?)?)
        }
    } else {
        None
    };
    Ok(SampleScores {
        id: s.id.clone(),
        counts,
        f1: f1(&counts),
        iou: iou(&counts),
        dice: dice(&counts),
        sdr: sdr_db,
    })
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub split: String,
    pub summary: MetricSummary,
}

fn fmt_sdr(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

/// Aligned text table: method, split, F1, IoU, Dice, SDR.
pub fn results_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<width$}  {:<5}  {:>6}  {:>6}  {:>6}  {:>6}\n",
        "Method", "Split", "F1", "IoU", "Dice", "SDR"
    );
    for r in rows {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{:<width$}  {:<5}  {:>6.1}  {:>6.1}  {:>6.1}  {:>6}",
            r.method,
            r.split,
            s.f1,
            s.iou,
            s.dice,
            fmt_sdr(s.sdr)
        );
    }
    out
}

pub const CSV_HEADER: &str = "method,split,F1,IoU,Dice,SDR";

/// Comma-separated results; SDR is empty when not computed.
pub fn results_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let s = &r.summary;
        let sdr = s.sdr.map(|x| format!("{x:.4}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{:.4},{:.4},{:.4},{}", r.method, r.split, s.f1, s.iou, s.dice, sdr);
    }
    out
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub val: MetricSummary,
    pub test: MetricSummary,
}

pub const ABLATION_CSV_HEADER: &str = "variant,val_IoU,val_Dice,val_F1,test_IoU,test_Dice,test_F1";

/// Validation and test IoU, Dice and F1 per variant.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(13);
    let mut out = format!(
        "{:<width$}  {:^22}  {:^22}\n{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n",
        "", "Validation", "Test", "Model Variant", "IoU", "Dice", "F1", "IoU", "Dice", "F1"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.1}  {:>6.1}  {:>6.1}  {:>6.1}  {:>6.1}  {:>6.1}",
            r.variant, r.val.iou, r.val.dice, r.val.f1, r.test.iou, r.test.dice, r.test.f1
        );
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.variant, r.val.iou, r.val.dice, r.val.f1, r.test.iou, r.test.dice, r.test.f1
        );
    }
    out
}
