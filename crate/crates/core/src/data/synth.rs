//! Synthetic bird-call corpora.
//!
//! A clean clip is a sum of linear chirps under Hann envelopes. Noise of one
//! randomly chosen kind is added at a random SNR and the mix is scaled to a
//! fixed peak. The ground-truth mask marks spectrogram bins where
//! `log1p(|STFT(clean)|)` exceeds `mask_threshold` times its maximum.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Split;
use crate::dsp::{magnitude_image, stft, AudioSignal, ImageScale, Mask, StftParams};
use crate::error::{config_err, Result};
use crate::kv::{parse_value, KvConfig};

/// Peak amplitude of every synthesized noisy clip.
pub const PEAK: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    White,
    Pink,
    /// Pink noise low-passed at 500 Hz.
    Wind,
    /// Poisson-timed impulses, each decaying exponentially.
    Rain,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Wind, NoiseKind::Rain];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Wind => "wind",
            NoiseKind::Rain => "rain",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            "wind" | "wind_lowfreq" => Ok(NoiseKind::Wind),
            "rain" | "rain_impulsive" => Ok(NoiseKind::Rain),
            other => Err(format!("unknown noise kind {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    pub sample_rate: u32,
    pub min_chirps: usize,
    pub max_chirps: usize,
    pub min_freq: f64,
    pub max_freq: f64,
    pub min_chirp_duration: f64,
    pub max_chirp_duration: f64,
    pub noise_kinds: Vec<NoiseKind>,
    /// Either bound may be `inf`, meaning no noise.
    pub min_snr_db: f64,
    pub max_snr_db: f64,
    pub mask_threshold: f64,
    pub rain_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_samples: 128,
            val_samples: 32,
            test_samples: 32,
            min_duration: 1.0,
            max_duration: 3.0,
            sample_rate: 16000,
            min_chirps: 1,
            max_chirps: 3,
            min_freq: 1000.0,
            max_freq: 6000.0,
            min_chirp_duration: 0.1,
            max_chirp_duration: 0.5,
            noise_kinds: NoiseKind::ALL.to_vec(),
            min_snr_db: 0.0,
            max_snr_db: 10.0,
            mask_threshold: 0.1,
            rain_rate: 40.0,
        }
    }
}

impl SynthConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Val => self.val_samples,
            Split::Test => self.test_samples,
        }
    }

    pub fn total(&self) -> usize {
        self.train_samples + self.val_samples + self.test_samples
    }

    pub fn with_counts(mut self, train: usize, val: usize, test: usize) -> Self {
        self.train_samples = train;
        self.val_samples = val;
        self.test_samples = test;
        self
    }
}

impl KvConfig for SynthConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train_samples" => self.train_samples = parse_value(key, value)?,
            "val_samples" => self.val_samples = parse_value(key, value)?,
            "test_samples" => self.test_samples = parse_value(key, value)?,
            "min_duration" => self.min_duration = parse_value(key, value)?,
            "max_duration" => self.max_duration = parse_value(key, value)?,
            "sample_rate" => self.sample_rate = parse_value(key, value)?,
            "min_chirps" => self.min_chirps = parse_value(key, value)?,
            "max_chirps" => self.max_chirps = parse_value(key, value)?,
            "min_freq" => self.min_freq = parse_value(key, value)?,
            "max_freq" => self.max_freq = parse_value(key, value)?,
            "min_chirp_duration" => self.min_chirp_duration = parse_value(key, value)?,
            "max_chirp_duration" => self.max_chirp_duration = parse_value(key, value)?,
            "noise_kinds" => {
                self.noise_kinds = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.parse().map_err(|e: String| config_err!("{key}: {e}")))
                    .collect::<Result<_>>()?
            }
            "min_snr_db" => self.min_snr_db = parse_value(key, value)?,
            "max_snr_db" => self.max_snr_db = parse_value(key, value)?,
            "mask_threshold" => self.mask_threshold = parse_value(key, value)?,
            "rain_rate" => self.rain_rate = parse_value(key, value)?,
            _ => return Err(config_err!("unknown synthesis setting {key:?}")),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let kinds: Vec<&str> = self.noise_kinds.iter().map(|k| k.name()).collect();
        vec![
            ("train_samples", self.train_samples.to_string()),
            ("val_samples", self.val_samples.to_string()),
            ("test_samples", self.test_samples.to_string()),
            ("min_duration", self.min_duration.to_string()),
            ("max_duration", self.max_duration.to_string()),
            ("sample_rate", self.sample_rate.to_string()),
            ("min_chirps", self.min_chirps.to_string()),
            ("max_chirps", self.max_chirps.to_string()),
            ("min_freq", self.min_freq.to_string()),
            ("max_freq", self.max_freq.to_string()),
            ("min_chirp_duration", self.min_chirp_duration.to_string()),
            ("max_chirp_duration", self.max_chirp_duration.to_string()),
            ("noise_kinds", kinds.join(",")),
            ("min_snr_db", self.min_snr_db.to_string()),
            ("max_snr_db", self.max_snr_db.to_string()),
            ("mask_threshold", self.mask_threshold.to_string()),
            ("rain_rate", self.rain_rate.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        let nyquist = f64::from(self.sample_rate) / 2.0;
        if self.sample_rate == 0 {
            return Err(config_err!("sample_rate must be positive"));
        }
        if !(self.min_freq > 0.0 && self.min_freq <= self.max_freq && self.max_freq < nyquist) {
            return Err(config_err!(
                "chirp band {}..{} Hz must lie within (0, {nyquist})",
                self.min_freq,
                self.max_freq
            ));
        }
        let n_fft = StftParams::default().n_fft() as f64;
        if !(self.min_duration > 0.0 && self.min_duration <= self.max_duration)
            || self.min_duration * f64::from(self.sample_rate) <= n_fft
            || !self.max_duration.is_finite()
        {
            return Err(config_err!(
                "durations must satisfy {} samples < min_duration <= max_duration",
                n_fft
            ));
        }
        if self.min_chirps > self.max_chirps {
            return Err(config_err!("min_chirps exceeds max_chirps"));
        }
        if !(self.min_chirp_duration > 0.0 && self.min_chirp_duration <= self.max_chirp_duration) {
            return Err(config_err!("chirp durations must be positive and ordered"));
        }
        if self.noise_kinds.is_empty() {
            return Err(config_err!("noise_kinds must name at least one kind"));
        }
        if self.min_snr_db.is_nan() || self.max_snr_db.is_nan() || self.min_snr_db > self.max_snr_db {
            return Err(config_err!("snr range must be ordered"));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(config_err!("mask_threshold must lie in (0, 1)"));
        }
        if !(self.rain_rate > 0.0 && self.rain_rate.is_finite()) {
            return Err(config_err!("rain_rate must be positive"));
        }
        Ok(())
    }
}

/// One generated clip and its labels.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub id: String,
    pub clean: AudioSignal,
    pub noisy: AudioSignal,
    /// Spectrogram-resolution ground truth (frequency bins x frames).
    pub mask: Mask,
    pub noise: NoiseKind,
    /// Infinite when no noise was added.
    pub snr_db: f64,
    pub chirps: usize,
}

fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(buf.len())
    } else {
        planner.plan_fft_forward(buf.len())
    };
    fft.process(buf);
}

/// Applies a real, even spectral gain `gain(freq_hz)` to a real signal.
fn shape_spectrum(signal: &[f64], sample_rate: u32, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = signal.len();
    let mut buf: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf, false);
    let df = f64::from(sample_rate) / n as f64;
    for (k, b) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        *b *= gain(bin as f64 * df);
    }
    fft_in_place(&mut buf, true);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn white(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn pink(n: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w = white(n, rng);
    shape_spectrum(&w, sample_rate, |f| if f > 0.0 { 1.0 / f.sqrt() } else { 0.0 })
}

pub fn noise(kind: NoiseKind, n: usize, sample_rate: u32, rain_rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        NoiseKind::White => white(n, rng),
        NoiseKind::Pink => pink(n, sample_rate, rng),
        NoiseKind::Wind => {
            let p = pink(n, sample_rate, rng);
            shape_spectrum(&p, sample_rate, |f| if f <= 500.0 { 1.0 } else { 0.0 })
        }
        NoiseKind::Rain => {
            let seconds = n as f64 / f64::from(sample_rate);
            let count = Poisson::new(rain_rate * seconds).map(|d| d.sample(rng)).unwrap_or(0.0) as usize;
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let mut x = vec![0.0; n];
            for _ in 0..count {
                let at = rng.random_range(0..n);
                x[at] += normal.sample(rng);
            }
            // Convolution with exp(-t / 5 ms).
            let decay = (-1.0 / (0.005 * f64::from(sample_rate))).exp();
            let mut prev = 0.0;
            for v in x.iter_mut() {
                prev = *v + decay * prev;
                *v = prev;
            }
            x
        }
    }
}

/// Linear chirp from `f0` to `f1` Hz starting at sample `start`, under a
/// Hann envelope, added into `out`.
pub fn add_chirp(out: &mut [f64], sample_rate: u32, start: usize, len: usize, f0: f64, f1: f64, amplitude: f64) {
    let sr = f64::from(sample_rate);
    let dur = len as f64 / sr;
    for i in 0..len.min(out.len().saturating_sub(start)) {
        let t = i as f64 / sr;
        let phase = 2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * dur));
        let env = 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos();
        out[start + i] += amplitude * env * phase.sin();
    }
}

/// Bins where `log1p(|STFT(clean)|)` exceeds `threshold` times its maximum.
pub fn ground_truth_mask(clean: &AudioSignal, threshold: f64) -> Result<Mask> {
    let spec = stft(clean, StftParams::default())?;
    let img = magnitude_image(&spec, ImageScale::Log1p);
    let max = img.pixels().iter().cloned().fold(0.0, f64::max);
    let labels = img
        .pixels()
        .iter()
        .map(|&v| u8::from(max > 0.0 && v > threshold * max))
        .collect();
    Mask::new(labels, img.height(), img.width())
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Generates sample `index` of `split`; independent of every other sample.
pub fn synthesize_sample(config: &SynthConfig, seed: u64, split: Split, index: usize) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 32) | index as u64);
    let sr = config.sample_rate;
    let seconds = rng.random_range(config.min_duration..=config.max_duration);
    let n = (seconds * f64::from(sr)).round() as usize;

    let chirps = rng.random_range(config.min_chirps..=config.max_chirps);
    let mut clean = vec![0.0; n];
    for _ in 0..chirps {
        let dur = rng.random_range(config.min_chirp_duration..=config.max_chirp_duration);
        let len = ((dur * f64::from(sr)) as usize).clamp(2, n);
        let start = rng.random_range(0..=n - len);
        let f0 = rng.random_range(config.min_freq..=config.max_freq);
        let f1 = rng.random_range(config.min_freq..=config.max_freq);
        let amp = rng.random_range(0.3..=1.0);
        add_chirp(&mut clean, sr, start, len, f0, f1, amp);
    }

    let kind = config.noise_kinds[rng.random_range(0..config.noise_kinds.len())];
    let snr_db = if config.min_snr_db == config.max_snr_db {
        config.min_snr_db
    } else {
        rng.random_range(config.min_snr_db..config.max_snr_db)
    };
    let mut noisy = clean.clone();
    if snr_db.is_finite() {
        let mut eps = noise(kind, n, sr, config.rain_rate, &mut rng);
        let en = energy(&eps);
        if en > 0.0 {
            let ec = energy(&clean);
            // Without a clean signal, noise is scaled to 0.1 RMS.
            let target = if ec > 0.0 { ec / 10f64.powf(snr_db / 10.0) } else { 0.01 * n as f64 };
            let g = (target / en).sqrt();
            eps.iter_mut().for_each(|v| *v *= g);
        }
        noisy.iter_mut().zip(&eps).for_each(|(y, e)| *y += e);
    }

    let peak = noisy.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK / peak;
        noisy.iter_mut().for_each(|v| *v *= g);
        clean.iter_mut().for_each(|v| *v *= g);
    }
    let clean = AudioSignal::new(clean, sr)?;
    let mask = ground_truth_mask(&clean, config.mask_threshold)?;
    Ok(SynthSample {
        id: format!("{}-{index:04}", split.name()),
        clean,
        noisy: AudioSignal::new(noisy, sr)?,
        mask,
        noise: kind,
        snr_db,
        chirps,
    })
}

/// All samples of one split, generated in parallel.
pub fn synthesize_split(config: &SynthConfig, seed: u64, split: Split) -> Result<Vec<SynthSample>> {
    config.validate()?;
    (0..config.count(split))
        .into_par_iter()
        .map(|i| synthesize_sample(config, seed, split, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{apply_mask, istft, sdr};
    use crate::kv::KvFile;

    fn quiet() -> SynthConfig {
        SynthConfig {
            min_snr_db: f64::INFINITY,
            max_snr_db: f64::INFINITY,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn config_round_trip_and_validation() {
        let c = SynthConfig { noise_kinds: vec![NoiseKind::Rain, NoiseKind::Wind], min_snr_db: f64::INFINITY, max_snr_db: f64::INFINITY, ..SynthConfig::default() };
        let mut back = SynthConfig::default();
        back.apply(&KvFile::parse(&c.to_kv_string()).unwrap()).unwrap();
        assert_eq!(back, c);
        back.validate().unwrap();
        assert!(SynthConfig { max_freq: 8000.0, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { min_duration: 0.01, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { noise_kinds: vec![], ..SynthConfig::default() }.validate().is_err());
        assert!(back.set("noise_kinds", "white,thunder").is_err());
        assert_eq!(SynthConfig::default().total(), 192);
    }

    #[test]
    fn samples_are_deterministic_and_independent() {
        let c = SynthConfig::default();
        let a = synthesize_sample(&c, 7, Split::Train, 3).unwrap();
        let b = synthesize_sample(&c, 7, Split::Train, 3).unwrap();
        assert_eq!(a.noisy, b.noisy);
        assert_eq!(a.mask, b.mask);
        let other = synthesize_sample(&c, 7, Split::Val, 3).unwrap();
        assert_ne!(a.noisy, other.noisy);
        let peak = a.noisy.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - PEAK).abs() < 1e-12);
        assert!(a.noisy.duration_secs() >= 1.0 && a.noisy.duration_secs() <= 3.0);
    }

    #[test]
    fn snr_is_as_requested() {
        let c = SynthConfig { min_snr_db: 5.0, max_snr_db: 5.0, ..SynthConfig::default() };
        for i in 0..8 {
            let s = synthesize_sample(&c, 1, Split::Test, i).unwrap();
            let noise: Vec<f64> = s.noisy.samples.iter().zip(&s.clean.samples).map(|(y, x)| y - x).collect();
            let measured = 10.0 * (s.clean.energy() / energy(&noise)).log10();
            assert!((measured - 5.0).abs() < 1e-6, "{} {measured}", s.noise);
        }
    }

    #[test]
    fn zero_chirps_give_empty_mask() {
        let c = SynthConfig { min_chirps: 0, max_chirps: 0, ..SynthConfig::default() };
        let s = synthesize_sample(&c, 0, Split::Train, 0).unwrap();
        assert_eq!(s.mask.count_ones(), 0);
        assert_eq!(s.clean.energy(), 0.0);
    }

    #[test]
    fn noiseless_mask_reconstructs_clean() {
        let c = quiet();
        for i in 0..6 {
            let s = synthesize_sample(&c, 11, Split::Train, i).unwrap();
            assert_eq!(s.noisy, s.clean);
            let spec = stft(&s.noisy, StftParams::default()).unwrap();
            let out = istft(&apply_mask(&spec, &s.mask).unwrap()).unwrap();
            let db = sdr(&s.clean, &out).unwrap();
            assert!(db >= 20.0, "sample {i}: {db} dB");
        }
    }

    #[test]
    fn mask_follows_chirp_ridge() {
        // A constant 2 kHz tone across the whole clip lights bin 128.
        let sr = 16000;
        let mut x = vec![0.0; 16000];
        add_chirp(&mut x, sr, 0, 16000, 2000.0, 2000.0, 1.0);
        let mask = ground_truth_mask(&AudioSignal::new(x, sr).unwrap(), 0.1).unwrap();
        let mid = mask.width() / 2;
        assert_eq!(mask.get(128, mid), 1);
        assert_eq!(mask.get(400, mid), 0);
        assert_eq!(mask.get(10, mid), 0);
    }

    #[test]
    fn noise_spectra() {
        let sr = 16000;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let band_energy = |x: &[f64], lo: f64, hi: f64| {
            let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft_in_place(&mut buf, false);
            let df = sr as f64 / x.len() as f64;
            buf[..x.len() / 2]
                .iter()
                .enumerate()
                .filter(|(k, _)| (*k as f64 * df) >= lo && (*k as f64 * df) < hi)
                .map(|(_, c)| c.norm_sqr())
                .sum::<f64>()
        };
        let wind = noise(NoiseKind::Wind, 32000, sr, 40.0, &mut rng);
        assert!(band_energy(&wind, 600.0, 8000.0) < 1e-12 * band_energy(&wind, 0.0, 500.0));
        let pink = noise(NoiseKind::Pink, 32000, sr, 40.0, &mut rng);
        // Equal-width bands: the lower one carries more power.
        assert!(band_energy(&pink, 100.0, 1100.0) > 3.0 * band_energy(&pink, 5000.0, 6000.0));
        let rain = noise(NoiseKind::Rain, 32000, sr, 40.0, &mut rng);
        assert!(rain.iter().any(|&v| v != 0.0));
        assert!(noise(NoiseKind::White, 100, sr, 40.0, &mut rng).len() == 100);
    }
}
