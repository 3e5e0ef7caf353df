//! Time/frequency conversion, audio images, masks and signal quality.
//!
//! A noisy recording is taken to the STFT domain, its magnitude becomes the
//! image the segmentation model looks at, and a binary mask predicted on
//! that image zeroes noise bins before overlap-add resynthesis. The phase of
//! every retained bin is the noisy input's own phase.

mod grid;
mod resize;
mod stft;

pub use grid::{AudioImage, ImageScale, Mask};
pub use resize::{resize_image, resize_mask};
pub use stft::{apply_mask, istft, magnitude_image, stft, Spectrogram, StftParams, WindowKind};

use crate::error::{invalid, Result};

/// Returned by [`sdr`] when the estimate matches the reference to within
/// numerical precision.
pub const SDR_CAP_DB: f64 = 100.0;

/// Mono time-domain signal.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Signal-to-distortion ratio in dB, capped at [`SDR_CAP_DB`].
pub fn sdr(reference: &AudioSignal, estimate: &AudioSignal) -> Result<f64> {
    sdr_with_cap(reference, estimate, SDR_CAP_DB)
}

pub fn sdr_with_cap(reference: &AudioSignal, estimate: &AudioSignal, cap_db: f64) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(invalid!(
            "sdr: reference has {} samples, estimate has {}",
            reference.len(),
            estimate.len()
        ));
    }
    if reference.sample_rate != estimate.sample_rate {
        return Err(invalid!(
            "sdr: sample rates differ ({} vs {})",
            reference.sample_rate,
            estimate.sample_rate
        ));
    }
    let signal = reference.energy();
    if signal == 0.0 {
        return Err(invalid!("sdr: reference signal is all zeros"));
    }
    let distortion: f64 = reference
        .samples
        .iter()
        .zip(&estimate.samples)
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    if distortion < 1e-12 * signal {
        return Ok(cap_db);
    }
    Ok(10.0 * (signal / distortion).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(len: usize, freq: f64, sr: u32) -> AudioSignal {
        let samples = (0..len)
            .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / sr as f64).sin())
            .collect();
        AudioSignal::new(samples, sr).unwrap()
    }

    #[test]
    fn sdr_identical_hits_cap() {
        let x = sine(1000, 440.0, 16000);
        assert_eq!(sdr(&x, &x).unwrap(), SDR_CAP_DB);
    }

    #[test]
    fn sdr_against_silence_is_zero_db() {
        let x = sine(1000, 440.0, 16000);
        let zero = AudioSignal::new(vec![0.0; 1000], 16000).unwrap();
        assert!(sdr(&x, &zero).unwrap().abs() < 1e-12);
    }

    #[test]
    fn sdr_one_percent_noise_is_twenty_db() {
        let x = sine(4000, 440.0, 16000);
        // Alternating-sign noise scaled to exactly 1% of the reference energy.
        let raw: Vec<f64> = (0..4000).map(|n| if n % 3 == 0 { 1.0 } else { -0.5 }).collect();
        let raw_energy: f64 = raw.iter().map(|v| v * v).sum();
        let gain = (0.01 * x.energy() / raw_energy).sqrt();
        let est = AudioSignal::new(
            x.samples.iter().zip(&raw).map(|(s, n)| s + gain * n).collect(),
            16000,
        )
        .unwrap();
        assert!((sdr(&x, &est).unwrap() - 20.0).abs() < 1e-6);
    }

    #[test]
    fn sdr_rejects_bad_inputs() {
        let x = sine(100, 440.0, 16000);
        let short = sine(99, 440.0, 16000);
        assert!(sdr(&x, &short).is_err());
        let zero = AudioSignal::new(vec![0.0; 100], 16000).unwrap();
        assert!(sdr(&zero, &x).is_err());
        assert!(AudioSignal::new(vec![0.0], 0).is_err());
    }
}
