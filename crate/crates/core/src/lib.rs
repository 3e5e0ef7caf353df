//! Bird sound denoising by spectrogram segmentation with a vision transformer.
//!
//! Audio goes through an STFT, the log-magnitude image is segmented by a
//! transformer encoder/decoder into keep/remove labels, and the masked
//! spectrogram is inverted back to audio.
//!
//! * [`dsp`]: STFT/ISTFT, audio images, masks, SDR.
//! * [`tensor`]: dense tensors with a reverse-mode gradient tape.
//! * [`model`]: the segmentation network.
//! * [`training`]: loss, AdamW and the epoch loop.
//! * [`metrics`]: IoU, Dice, F1 and report tables.
//! * [`data`]: synthetic corpora and dataset loading.
//! * [`io`]: WAV and PNG files.
//! * [`cli`]: the `vitvs` command-line tool.

pub mod cli;
pub mod data;
pub mod dsp;
pub mod error;
pub mod io;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
