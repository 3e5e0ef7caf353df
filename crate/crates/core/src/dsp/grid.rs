use crate::error::{invalid, shape_err, Result};

/// Amplitude compression applied when building an [`AudioImage`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageScale {
    Linear,
    Log1p,
}

/// Real-valued image, row-major. For spectrogram images rows are frequency
/// bins (row 0 = DC) and columns are frames.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioImage {
    pixels: Vec<f64>,
    height: usize,
    width: usize,
    pub scale: ImageScale,
}

impl AudioImage {
    pub fn new(pixels: Vec<f64>, height: usize, width: usize, scale: ImageScale) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(shape_err!(
                "image of {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            ));
        }
        if scale == ImageScale::Linear && pixels.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid!("linear image pixels must be finite and non-negative"));
        }
        Ok(Self {
            pixels,
            height,
            width,
            scale,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            pixels: vec![0.0; height * width],
            height,
            width,
            scale: ImageScale::Linear,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Min-max normalization to [0, 1]. A constant image maps to all zeros.
    pub fn normalized(&self) -> AudioImage {
        let (lo, hi) = self
            .pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                (lo.min(p), hi.max(p))
            });
        let range = hi - lo;
        let pixels = if range > 0.0 && range.is_finite() {
            self.pixels
                .iter()
                .map(|p| ((p - lo) / range).clamp(0.0, 1.0))
                .collect()
        } else {
            vec![0.0; self.pixels.len()]
        };
        AudioImage {
            pixels,
            height: self.height,
            width: self.width,
            scale: self.scale,
        }
    }
}

/// Binary label grid: 1 = keep (bird), 0 = remove (noise).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    labels: Vec<u8>,
    height: usize,
    width: usize,
}

impl Mask {
    pub fn new(labels: Vec<u8>, height: usize, width: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err!(
                "mask of {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(invalid!("mask labels must be 0 or 1, found {bad}"));
        }
        Ok(Self {
            labels,
            height,
            width,
        })
    }

    pub fn filled(height: usize, width: usize, label: bool) -> Self {
        Self {
            labels: vec![label as u8; height * width],
            height,
            width,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                labels.push(f(r, c) as u8);
            }
        }
        Self {
            labels,
            height,
            width,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn count_ones(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}
