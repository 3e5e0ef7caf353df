//! Corpora on disk and model-ready samples.
//!
//! A corpus directory holds one manifest per split (`train.manifest`,
//! `val.manifest`, `test.manifest`). Each manifest line is
//! `id<TAB>audio_path<TAB>mask_path`, with paths relative to the manifest's
//! directory; `#` lines are comments, and `# split=...` / `# seed=...` record
//! provenance. Audio is WAV and masks are 8-bit grayscale PNG at
//! spectrogram resolution (frequency bins by frames, bin 0 in row 0).

mod synth;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

pub use synth::{
    add_chirp, ground_truth_mask, noise, synthesize_sample, synthesize_split, NoiseKind,
    SynthConfig, SynthSample, PEAK,
};

use crate::dsp::{
    magnitude_image, resize_image, resize_mask, stft, AudioImage, AudioSignal, ImageScale, Mask,
    StftParams,
};
use crate::error::{config_err, Error, Result};
use crate::io::{read_mask_png, read_wav, write_mask_png, write_wav, WavFormat};
use crate::kv::KvConfig;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn manifest_name(self) -> String {
        format!("{}.manifest", self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(config_err!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub audio: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: Option<u64>,
    /// Paths as written in the file, relative to `root` unless absolute.
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.root.join(path)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# split={}\n", self.split);
        if let Some(seed) = self.seed {
            out.push_str(&format!("# seed={seed}\n"));
        }
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.id, e.audio.display(), e.mask.display()));
        }
        out
    }

    pub fn parse(text: &str, root: &Path, default_split: Split, path: &Path) -> Result<Self> {
        let mut split = default_split;
        let mut seed = None;
        let mut entries = Vec::new();
        let mut ids = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(v) = comment.strip_prefix("split=") {
                    split = v.trim().parse()?;
                } else if let Some(v) = comment.strip_prefix("seed=") {
                    seed = Some(v.trim().parse().map_err(|_| {
                        Error::format(path, format!("line {}: bad seed", lineno + 1))
                    })?);
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::format(
                    path,
                    format!("line {}: expected id, audio and mask separated by tabs", lineno + 1),
                ));
            }
            if !ids.insert(fields[0].to_string()) {
                return Err(Error::format(path, format!("duplicate id {:?}", fields[0])));
            }
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                audio: PathBuf::from(fields[1]),
                mask: PathBuf::from(fields[2]),
            });
        }
        Ok(Self {
            split,
            seed,
            entries,
            root: root.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let default = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok())
            .unwrap_or(Split::Train);
        Self::parse(&text, root, default, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path)
}

/// Manifest of `split` inside corpus directory `dir`.
pub fn load_split_manifest(dir: &Path, split: Split) -> Result<DatasetManifest> {
    DatasetManifest::load(&dir.join(split.manifest_name()))
}

/// Fails if any id appears in more than one manifest.
pub fn check_disjoint(manifests: &[DatasetManifest]) -> Result<()> {
    let mut seen: HashSet<&str> = HashSet::new();
    for m in manifests {
        for e in &m.entries {
            if !seen.insert(&e.id) {
                return Err(config_err!("id {:?} appears in more than one split", e.id));
            }
        }
    }
    Ok(())
}

/// Per-split counts and averages of a synthesized corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub split: Split,
    pub samples: usize,
    pub seconds: f64,
    pub mean_snr_db: f64,
    pub mask_coverage: f64,
    pub noise_counts: Vec<(NoiseKind, usize)>,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kinds: Vec<String> = self
            .noise_counts
            .iter()
            .map(|(k, n)| format!("{k}={n}"))
            .collect();
        write!(
            f,
            "{}: {} samples, {:.1} s audio, mean SNR {:.2} dB, mask coverage {:.1}%, noise {}",
            self.split,
            self.samples,
            self.seconds,
            self.mean_snr_db,
            100.0 * self.mask_coverage,
            kinds.join(" ")
        )
    }
}

fn stats(split: Split, samples: &[SynthSample]) -> CorpusStats {
    let n = samples.len().max(1) as f64;
    let finite: Vec<f64> = samples.iter().map(|s| s.snr_db).filter(|v| v.is_finite()).collect();
    CorpusStats {
        split,
        samples: samples.len(),
        seconds: samples.iter().map(|s| s.noisy.duration_secs()).sum(),
        mean_snr_db: if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        },
        mask_coverage: samples
            .iter()
            .map(|s| s.mask.count_ones() as f64 / s.mask.labels().len().max(1) as f64)
            .sum::<f64>()
            / n,
        noise_counts: NoiseKind::ALL
            .iter()
            .map(|&k| (k, samples.iter().filter(|s| s.noise == k).count()))
            .filter(|&(_, c)| c > 0)
            .collect(),
    }
}

/// Synthesizes every split into `out`: audio and mask files under
/// `out/<split>/`, the manifests, and the configuration used (`synth.conf`).
pub fn synthesize(config: &SynthConfig, seed: u64, out: &Path) -> Result<Vec<CorpusStats>> {
    config.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let conf = out.join("synth.conf");
    std::fs::write(&conf, format!("# seed={seed}\n{}", config.to_kv_string()))
        .map_err(|e| Error::io(&conf, e))?;
    let mut all = Vec::new();
    for split in Split::ALL {
        let samples = synthesize_split(config, seed, split)?;
        let dir = out.join(split.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let entries = samples
            .par_iter()
            .map(|s| {
                let audio = PathBuf::from(split.name()).join(format!("{}.wav", s.id));
                let mask = PathBuf::from(split.name()).join(format!("{}_mask.png", s.id));
                write_wav(&out.join(&audio), &s.noisy, WavFormat::Float32)?;
                write_mask_png(&out.join(&mask), &s.mask)?;
                Ok(ManifestEntry {
                    id: s.id.clone(),
                    audio,
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DatasetManifest {
            split,
            seed: Some(seed),
            entries,
            root: out.to_path_buf(),
        }
        .save(&out.join(split.manifest_name()))?;
        all.push(stats(split, &samples));
    }
    Ok(all)
}

/// A model-ready example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub audio: AudioSignal,
    /// `image_size` square, min-max normalized log-magnitude.
    pub image: AudioImage,
    /// Ground truth at `image_size` resolution.
    pub mask: Mask,
    /// Ground truth at spectrogram resolution.
    pub spec_mask: Mask,
    /// Mask pixels that were neither 0 nor 255 before thresholding.
    pub nonbinary_mask_pixels: usize,
}

/// Normalized log-magnitude image of `audio` resized to `size x size`.
pub fn audio_image(audio: &AudioSignal, size: usize) -> Result<(AudioImage, usize, usize)> {
    let spec = stft(audio, StftParams::default())?;
    let img = magnitude_image(&spec, ImageScale::Log1p);
    let (bins, frames) = (spec.n_bins(), spec.n_frames());
    Ok((resize_image(&img, size, size)?.normalized(), bins, frames))
}

pub fn load_sample(manifest: &DatasetManifest, entry: &ManifestEntry, model: &ModelConfig) -> Result<Sample> {
    let audio = read_wav(&manifest.resolve(&entry.audio))?;
    let (image, bins, frames) = audio_image(&audio, model.image_size).map_err(|e| match e {
        Error::InvalidInput(m) => Error::format(manifest.resolve(&entry.audio), m),
        other => other,
    })?;
    let (raw_mask, odd) = read_mask_png(&manifest.resolve(&entry.mask))?;
    let spec_mask = if raw_mask.height() == bins && raw_mask.width() == frames {
        raw_mask
    } else {
        resize_mask(&raw_mask, bins, frames)?
    };
    let mask = resize_mask(&spec_mask, model.image_size, model.image_size)?;
    Ok(Sample {
        id: entry.id.clone(),
        audio,
        image,
        mask,
        spec_mask,
        nonbinary_mask_pixels: odd,
    })
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, model: &ModelConfig) -> Result<Self> {
        let samples = manifest
            .entries
            .par_iter()
            .map(|e| load_sample(manifest, e, model))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            split: manifest.split,
            samples,
        })
    }

    pub fn load_split(dir: &Path, split: Split, model: &ModelConfig) -> Result<Self> {
        Self::load(&load_split_manifest(dir, split)?, model)
    }

    /// Builds a dataset directly from synthesized samples.
    pub fn from_synth(split: Split, samples: &[SynthSample], model: &ModelConfig) -> Result<Self> {
        let samples = samples
            .par_iter()
            .map(|s| {
                let (image, bins, frames) = audio_image(&s.noisy, model.image_size)?;
                debug_assert_eq!((bins, frames), (s.mask.height(), s.mask.width()));
                Ok(Sample {
                    id: s.id.clone(),
                    audio: s.noisy.clone(),
                    image,
                    mask: resize_mask(&s.mask, model.image_size, model.image_size)?,
                    spec_mask: s.mask.clone(),
                    nonbinary_mask_pixels: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { split, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn nonbinary_mask_pixels(&self) -> usize {
        self.samples.iter().map(|s| s.nonbinary_mask_pixels).sum()
    }
}

/// Loads and checks every split of a corpus: manifests parse, ids are
/// disjoint, and every entry loads.
pub fn validate_corpus(dir: &Path, model: &ModelConfig) -> Result<Vec<Dataset>> {
    let manifests = Split::ALL
        .iter()
        .map(|&s| load_split_manifest(dir, s))
        .collect::<Result<Vec<_>>>()?;
    check_disjoint(&manifests)?;
    manifests.iter().map(|m| Dataset::load(m, model)).collect()
}
