//! Audio in, audio out: spectrogram masking with a model or a given mask.

use crate::data::audio_image;
use crate::dsp::{
    apply_mask, istft, magnitude_image, resize_mask, stft, AudioImage, AudioSignal, ImageScale,
    Mask, StftParams,
};
use crate::error::{shape_err, Result};
use crate::model::ViTVS;
use crate::tensor::Real;

/// Keeps the bins labeled 1 and inverts. `mask` must match the default
/// STFT grid of `audio`.
pub fn mask_denoise(audio: &AudioSignal, mask: &Mask) -> Result<AudioSignal> {
    let spec = stft(audio, StftParams::default())?;
    if mask.height() != spec.n_bins() || mask.width() != spec.n_frames() {
        return Err(shape_err!(
            "mask is {}x{} but the spectrogram grid is {}x{}",
            mask.height(),
            mask.width(),
            spec.n_bins(),
            spec.n_frames()
        ));
    }
    istft(&apply_mask(&spec, mask)?)
}

#[derive(Clone, Debug)]
pub struct Denoised {
    pub audio: AudioSignal,
    /// Predicted mask on the spectrogram grid.
    pub mask: Mask,
    /// Predicted mask at the model's input size.
    pub model_mask: Mask,
}

/// Predicts a mask for `audio`, maps it back to the spectrogram grid and
/// resynthesizes. The output has exactly the input's length.
pub fn denoise<T: Real>(model: &ViTVS<T>, audio: &AudioSignal) -> Result<Denoised> {
    let size = model.config().image_size;
    let (image, bins, frames) = audio_image(audio, size)?;
    let model_mask = model.predict_mask(&image)?;
    let mask = resize_mask(&model_mask, bins, frames)?;
    let audio = mask_denoise(audio, &mask)?;
    Ok(Denoised { audio, mask, model_mask })
}

/// Log-magnitude image on the spectrogram grid scaled to [0, 1] by
/// `log1p(|X|) / log1p(max |X|)`; all-zero input stays black.
pub fn spectrogram_image(audio: &AudioSignal) -> Result<AudioImage> {
    let spec = stft(audio, StftParams::default())?;
    let img = magnitude_image(&spec, ImageScale::Log1p);
    let max = img.pixels().iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(img);
    }
    AudioImage::new(
        img.pixels().iter().map(|v| v / max).collect(),
        img.height(),
        img.width(),
        ImageScale::Linear,
    )
}
