use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{AudioImage, AudioSignal, ImageScale, Mask};
use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    Hann,
    Hamming,
}

impl WindowKind {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        let (a0, a1) = match self {
            WindowKind::Hann => (0.5, 0.5),
            WindowKind::Hamming => (0.54, 0.46),
        };
        (0..n)
            .map(|i| a0 - a1 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect()
    }
}

/// Frame length, hop and analysis window. Construction checks that the
/// squared window overlap-adds to a constant at this hop, which is the
/// normalization [`istft`] relies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftParams {
    n_fft: usize,
    hop: usize,
    window: WindowKind,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 256,
            window: WindowKind::Hann,
        }
    }
}

impl StftParams {
    pub fn new(n_fft: usize, hop: usize, window: WindowKind) -> Result<Self> {
        if n_fft < 4 || !n_fft.is_power_of_two() {
            return Err(invalid!("n_fft must be a power of two >= 4, got {n_fft}"));
        }
        if hop == 0 || hop > n_fft {
            return Err(invalid!("hop must be in 1..={n_fft}, got {hop}"));
        }
        let w = window.coefficients(n_fft);
        let envelope: Vec<f64> = (0..hop)
            .map(|offset| (offset..n_fft).step_by(hop).map(|i| w[i] * w[i]).sum())
            .collect();
        let lo = envelope.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = envelope.iter().cloned().fold(0.0, f64::max);
        if lo <= 0.0 || (hi - lo) / hi > 1e-9 {
            return Err(invalid!(
                "{window:?} window with n_fft={n_fft}, hop={hop} does not overlap-add to a constant"
            ));
        }
        Ok(Self { n_fft, hop, window })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> WindowKind {
        self.window
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for a signal of `len` samples under centered padding.
    pub fn n_frames(&self, len: usize) -> usize {
        let padded = len + 2 * (self.n_fft / 2);
        (padded - self.n_fft) / self.hop + 1
    }
}

/// Complex STFT grid stored frequency-major: `bins[f * n_frames + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    bins: Vec<Complex64>,
    n_frames: usize,
    params: StftParams,
    original_length: usize,
    sample_rate: u32,
}

impl Spectrogram {
    pub fn new(
        bins: Vec<Complex64>,
        n_frames: usize,
        params: StftParams,
        original_length: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        let spec = Self {
            bins,
            n_frames,
            params,
            original_length,
            sample_rate,
        };
        spec.check_consistent()?;
        Ok(spec)
    }

    fn check_consistent(&self) -> Result<()> {
        let expected_frames = self.params.n_frames(self.original_length);
        if self.n_frames == 0 || self.n_frames != expected_frames {
            return Err(shape_err!(
                "spectrogram has {} frames but a {}-sample signal gives {expected_frames}",
                self.n_frames,
                self.original_length
            ));
        }
        if self.bins.len() != self.params.n_bins() * self.n_frames {
            return Err(shape_err!(
                "spectrogram storage holds {} bins, expected {}x{}",
                self.bins.len(),
                self.params.n_bins(),
                self.n_frames
            ));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.params.n_bins()
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn params(&self) -> StftParams {
        self.params
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [Complex64] {
        &mut self.bins
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.bins[bin * self.n_frames + frame]
    }
}

/// Centered STFT: the signal is reflect-padded by `n_fft / 2` on both sides.
pub fn stft(signal: &AudioSignal, params: StftParams) -> Result<Spectrogram> {
    let n = params.n_fft;
    let pad = n / 2;
    let len = signal.len();
    if len <= pad {
        return Err(invalid!(
            "signal of {len} samples is too short for n_fft={n} (needs more than {pad})"
        ));
    }
    let padded: Vec<f64> = (0..len + 2 * pad)
        .map(|i| signal.samples[reflect_index(i as isize - pad as isize, len)])
        .collect();
    let window = params.window.coefficients(n);
    let n_frames = params.n_frames(len);
    let n_bins = params.n_bins();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut bins = vec![Complex64::new(0.0, 0.0); n_bins * n_frames];
    let mut frame = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..n_frames {
        let start = t * params.hop;
        for (i, slot) in frame.iter_mut().enumerate() {
            *slot = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut frame);
        for f in 0..n_bins {
            bins[f * n_frames + t] = frame[f];
        }
    }
    Spectrogram::new(bins, n_frames, params, len, signal.sample_rate)
}

fn reflect_index(i: isize, len: usize) -> usize {
    let last = len as isize - 1;
    let mut i = i;
    if last == 0 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i > last {
            i = 2 * last - i;
        } else {
            return i as usize;
        }
    }
}

/// Windowed overlap-add inverse, normalized by the summed squared window and
/// trimmed to the recorded original length.
pub fn istft(spec: &Spectrogram) -> Result<AudioSignal> {
    spec.check_consistent()?;
    let params = spec.params;
    let n = params.n_fft;
    let pad = n / 2;
    let n_frames = spec.n_frames;
    let n_bins = params.n_bins();
    let window = params.window.coefficients(n);
    let total = n + params.hop * (n_frames - 1);
    let mut acc = vec![0.0; total];
    let mut envelope = vec![0.0; total];
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut frame = vec![Complex64::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;
    for t in 0..n_frames {
        for f in 0..n_bins {
            frame[f] = spec.bins[f * n_frames + t];
        }
        // DC and Nyquist are real for a real signal.
        frame[0].im = 0.0;
        frame[n / 2].im = 0.0;
        for f in 1..n / 2 {
            frame[n - f] = frame[f].conj();
        }
        ifft.process(&mut frame);
        let start = t * params.hop;
        for i in 0..n {
            acc[start + i] += frame[i].re * scale * window[i];
            envelope[start + i] += window[i] * window[i];
        }
    }
    let samples = (0..spec.original_length)
        .map(|i| {
            let e = envelope[i + pad];
            if e > 1e-11 {
                acc[i + pad] / e
            } else {
                0.0
            }
        })
        .collect();
    AudioSignal::new(samples, spec.sample_rate)
}

/// Pixel (f, t) is the bin magnitude, optionally `ln(1 + |X|)` compressed.
pub fn magnitude_image(spec: &Spectrogram, scale: ImageScale) -> AudioImage {
    let pixels = spec
        .bins
        .iter()
        .map(|c| {
            let m = c.norm();
            match scale {
                ImageScale::Linear => m,
                ImageScale::Log1p => m.ln_1p(),
            }
        })
        .collect();
    AudioImage::new(pixels, spec.n_bins(), spec.n_frames, scale)
        .expect("magnitudes of a consistent spectrogram form a valid image")
}

/// Zero every bin whose mask label is 0; retained bins are copied untouched.
pub fn apply_mask(spec: &Spectrogram, mask: &Mask) -> Result<Spectrogram> {
    if mask.height() != spec.n_bins() || mask.width() != spec.n_frames {
        return Err(invalid!(
            "mask is {}x{} but spectrogram is {}x{}",
            mask.height(),
            mask.width(),
            spec.n_bins(),
            spec.n_frames
        ));
    }
    let bins = spec
        .bins
        .iter()
        .zip(mask.labels())
        .map(|(&b, &l)| if l == 1 { b } else { Complex64::new(0.0, 0.0) })
        .collect();
    Ok(Spectrogram {
        bins,
        n_frames: spec.n_frames,
        params: spec.params,
        original_length: spec.original_length,
        sample_rate: spec.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> AudioSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioSignal::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000).unwrap()
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = a.iter().map(|x| x * x).sum();
        (num / den).sqrt()
    }

    /// O(n^2) DFT of one windowed frame, straight from the definition.
    fn naive_dft(frame: &[f64]) -> Vec<Complex64> {
        let n = frame.len();
        (0..n / 2 + 1)
            .map(|k| {
                frame.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (i, &x)| {
                    let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                    acc + Complex64::new(x * ang.cos(), x * ang.sin())
                })
            })
            .collect()
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let x = AudioSignal::new(vec![0.0; 4096], 16000).unwrap();
        let s = stft(&x, StftParams::default()).unwrap();
        assert_eq!(s.n_frames(), 4096 / 256 + 1);
        assert!(s.bins().iter().all(|c| c.re == 0.0 && c.im == 0.0));
        let back = istft(&s).unwrap();
        assert!(back.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centered_sinusoid_matches_naive_dft() {
        let params = StftParams::new(256, 64, WindowKind::Hann).unwrap();
        let k = 13;
        let len = 2048;
        let x = AudioSignal::new(
            (0..len)
                .map(|i| (2.0 * PI * k as f64 * i as f64 / 256.0).sin())
                .collect(),
            16000,
        )
        .unwrap();
        let s = stft(&x, params).unwrap();
        let window = WindowKind::Hann.coefficients(256);
        // Interior frames need no padding.
        for t in 2..s.n_frames() - 2 {
            let start = t * 64 - 128;
            let frame: Vec<f64> = (0..256).map(|i| x.samples[start + i] * window[i]).collect();
            let oracle = naive_dft(&frame);
            for f in 0..s.n_bins() {
                assert!((s.get(f, t) - oracle[f]).norm() < 1e-9);
            }
            let peak = (0..s.n_bins())
                .max_by(|&a, &b| s.get(a, t).norm().total_cmp(&s.get(b, t).norm()))
                .unwrap();
            assert_eq!(peak, k);
        }
    }

    #[test]
    fn round_trip_white_noise() {
        let x = noise(16000, 1);
        let s = stft(&x, StftParams::default()).unwrap();
        let y = istft(&s).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(rel_l2(&x.samples, &y.samples) < 1e-6);
    }

    #[test]
    fn round_trip_hamming_and_odd_lengths() {
        let params = StftParams::new(512, 128, WindowKind::Hamming).unwrap();
        for len in [1025, 3001, 7777] {
            let x = noise(len, len as u64);
            let y = istft(&stft(&x, params).unwrap()).unwrap();
            assert!(rel_l2(&x.samples, &y.samples) < 1e-6, "len {len}");
        }
    }

    #[test]
    fn single_bin_reconstruction_correlates() {
        let params = StftParams::default();
        let k = 40;
        let pure: Vec<f64> = (0..16000)
            .map(|i| (2.0 * PI * k as f64 * i as f64 / 1024.0).cos())
            .collect();
        let x = AudioSignal::new(pure.clone(), 16000).unwrap();
        let mut s = stft(&x, params).unwrap();
        let frames = s.n_frames();
        for (idx, b) in s.bins_mut().iter_mut().enumerate() {
            if idx / frames != k {
                *b = Complex64::new(0.0, 0.0);
            }
        }
        let y = istft(&s).unwrap();
        let dot: f64 = y.samples.iter().zip(&pure).map(|(a, b)| a * b).sum();
        let corr = dot / (y.energy().sqrt() * x.energy().sqrt());
        assert!(corr > 0.99, "correlation {corr}");
    }

    #[test]
    fn stft_is_linear() {
        let params = StftParams::default();
        let a = noise(5000, 7);
        let b = noise(5000, 8);
        let combo = AudioSignal::new(
            a.samples
                .iter()
                .zip(&b.samples)
                .map(|(x, y)| 0.3 * x - 1.7 * y)
                .collect(),
            16000,
        )
        .unwrap();
        let sa = stft(&a, params).unwrap();
        let sb = stft(&b, params).unwrap();
        let sc = stft(&combo, params).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for ((x, y), z) in sa.bins().iter().zip(sb.bins()).zip(sc.bins()) {
            let expect = x * 0.3 - y * 1.7;
            num += (z - expect).norm_sqr();
            den += expect.norm_sqr();
        }
        assert!((num / den).sqrt() < 1e-9);
    }

    #[test]
    fn short_signal_and_bad_params_rejected() {
        let x = AudioSignal::new(vec![0.1; 512], 16000).unwrap();
        assert!(stft(&x, StftParams::default()).is_err());
        assert!(StftParams::new(1000, 250, WindowKind::Hann).is_err());
        assert!(StftParams::new(1024, 0, WindowKind::Hann).is_err());
        assert!(StftParams::new(1024, 2048, WindowKind::Hann).is_err());
        // Squared Hann at 50% overlap is not constant.
        assert!(StftParams::new(1024, 512, WindowKind::Hann).is_err());
    }

    #[test]
    fn inconsistent_spectrogram_rejected() {
        let p = StftParams::default();
        assert!(Spectrogram::new(vec![Complex64::new(0.0, 0.0); 513 * 3], 3, p, 4096, 16000).is_err());
    }

    #[test]
    fn magnitude_pixels() {
        let p = StftParams::default();
        let frames = p.n_frames(600);
        let mut bins = vec![Complex64::new(0.0, 0.0); 513 * frames];
        bins[0] = Complex64::new(3.0, 4.0);
        let s = Spectrogram::new(bins, frames, p, 600, 16000).unwrap();
        let lin = magnitude_image(&s, ImageScale::Linear);
        assert_eq!(lin.get(0, 0), 5.0);
        assert_eq!(lin.get(1, 0), 0.0);
        let log = magnitude_image(&s, ImageScale::Log1p);
        assert!((log.get(0, 0) - 6.0f64.ln()).abs() < 1e-15);
        assert_eq!((log.height(), log.width()), (513, frames));
    }

    #[test]
    fn mask_identity_zero_and_checkerboard() {
        let s = stft(&noise(3000, 5), StftParams::default()).unwrap();
        let ones = Mask::filled(s.n_bins(), s.n_frames(), true);
        assert_eq!(apply_mask(&s, &ones).unwrap(), s);

        let zeros = Mask::filled(s.n_bins(), s.n_frames(), false);
        let silent = apply_mask(&s, &zeros).unwrap();
        assert!(silent.bins().iter().all(|c| *c == Complex64::new(0.0, 0.0)));
        assert!(istft(&silent).unwrap().samples.iter().all(|&v| v == 0.0));

        let board = Mask::from_fn(s.n_bins(), s.n_frames(), |r, c| (r + c) % 2 == 0);
        let masked = apply_mask(&s, &board).unwrap();
        for f in 0..s.n_bins() {
            for t in 0..s.n_frames() {
                let got = masked.get(f, t);
                if (f + t) % 2 == 0 {
                    assert_eq!(got.re.to_bits(), s.get(f, t).re.to_bits());
                    assert_eq!(got.im.to_bits(), s.get(f, t).im.to_bits());
                } else {
                    assert_eq!(got, Complex64::new(0.0, 0.0));
                }
            }
        }
        assert!(apply_mask(&s, &Mask::filled(3, 3, true)).is_err());
    }

    #[test]
    fn masked_reconstruction_is_deterministic() {
        let x = noise(8000, 9);
        let run = || {
            let s = stft(&x, StftParams::default()).unwrap();
            let m = Mask::from_fn(s.n_bins(), s.n_frames(), |r, _| r % 3 != 0);
            istft(&apply_mask(&s, &m).unwrap()).unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.samples.iter().zip(&b.samples).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
