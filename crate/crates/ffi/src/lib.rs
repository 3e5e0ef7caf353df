//! C ABI over the `vitvs` crate.
//!
//! Every fallible function returns a [`VitvsStatus`]. On failure a message
//! for the calling thread is available from [`vitvs_last_error_message`]
//! until the next failing call on that thread. Models are opaque handles
//! created by [`vitvs_model_load`] and released with [`vitvs_model_free`].
//! Audio is mono `float` at any sample rate; masks are `uint8_t` labels
//! (0 remove, 1 keep) laid out bin-major: `mask[bin * n_frames + frame]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use vitvs::dsp::{sdr, AudioSignal, Mask, StftParams};
use vitvs::model::ViTVS;
use vitvs::pipeline::{denoise, mask_denoise};
use vitvs::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VitvsStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Io = 3,
    Shape = 4,
    InvalidInput = 5,
    Panic = 6,
    NonFinite = 7,
}

/// A loaded model.
pub struct VitvsModel {
    inner: ViTVS<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VitvsStatus {
    match e {
        Error::Config(_) => VitvsStatus::Config,
        Error::Io { .. } | Error::Format { .. } => VitvsStatus::Io,
        Error::Shape(_) => VitvsStatus::Shape,
        Error::InvalidInput(_) => VitvsStatus::InvalidInput,
        Error::NonFinite(_) => VitvsStatus::NonFinite,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VitvsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VitvsStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            VitvsStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            VitvsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

/// # Safety
/// `samples` must point to `n` readable floats.
unsafe fn read_audio(samples: *const f32, n: usize, sample_rate: u32) -> Result<AudioSignal, Failure> {
    let p = non_null(samples, "samples")?;
    let data = std::slice::from_raw_parts(p, n);
    Ok(AudioSignal::new(data.iter().map(|&v| f64::from(v)).collect(), sample_rate)?)
}

/// # Safety
/// `out` must point to `signal.len()` writable floats.
unsafe fn write_audio(signal: &AudioSignal, out: *mut f32) -> Result<(), Failure> {
    non_null(out, "out")?;
    let dst = std::slice::from_raw_parts_mut(out, signal.len());
    for (d, &s) in dst.iter_mut().zip(&signal.samples) {
        *d = s as f32;
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vitvs_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Message of the calling thread's last failure, or NULL if there was none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn vitvs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint written by the `vitvs` tool.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn vitvs_model_load(path: *const c_char, out: *mut *mut VitvsModel) -> VitvsStatus {
    guard(|| {
        let path = non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path).to_str().map_err(|_| Error::InvalidInput("path is not UTF-8".into()))?;
        let inner = ViTVS::<f32>::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(VitvsModel { inner }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`vitvs_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vitvs_model_free(model: *mut VitvsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the model's square input image.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vitvs_model_image_size(model: *const VitvsModel, out: *mut usize) -> VitvsStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*m).inner.config().image_size;
        Ok(())
    })
}

/// Spectrogram grid (frequency bins by frames) for a signal of `n_samples`.
///
/// # Safety
/// `n_bins` and `n_frames` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitvs_spectrogram_shape(n_samples: usize, n_bins: *mut usize, n_frames: *mut usize) -> VitvsStatus {
    guard(|| {
        non_null(n_bins, "n_bins")?;
        non_null(n_frames, "n_frames")?;
        let p = StftParams::default();
        if n_samples <= p.n_fft() / 2 {
            return Err(Error::InvalidInput(format!("signal needs more than {} samples", p.n_fft() / 2)).into());
        }
        *n_bins = p.n_bins();
        *n_frames = p.n_frames(n_samples);
        Ok(())
    })
}

/// Predicted mask on the spectrogram grid. `mask_len` must equal
/// `n_bins * n_frames` from [`vitvs_spectrogram_shape`].
///
/// # Safety
/// `samples` must hold `n` floats and `mask_out` `mask_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vitvs_predict_mask(
    model: *const VitvsModel,
    samples: *const f32,
    n: usize,
    sample_rate: u32,
    mask_out: *mut u8,
    mask_len: usize,
) -> VitvsStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        non_null(mask_out, "mask_out")?;
        let audio = read_audio(samples, n, sample_rate)?;
        let result = denoise(&(*m).inner, &audio)?;
        let labels = result.mask.labels();
        if labels.len() != mask_len {
            return Err(Error::Shape(format!("mask needs {} bytes, got {mask_len}", labels.len())).into());
        }
        std::slice::from_raw_parts_mut(mask_out, mask_len).copy_from_slice(labels);
        Ok(())
    })
}

/// Denoises `n` samples into `out` (also `n` floats).
///
/// # Safety
/// `samples` and `out` must each hold `n` floats.
#[no_mangle]
pub unsafe extern "C" fn vitvs_denoise(
    model: *const VitvsModel,
    samples: *const f32,
    n: usize,
    sample_rate: u32,
    out: *mut f32,
) -> VitvsStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let audio = read_audio(samples, n, sample_rate)?;
        let result = denoise(&(*m).inner, &audio)?;
        write_audio(&result.audio, out)
    })
}

/// Applies a caller-supplied spectrogram-grid mask and resynthesizes.
///
/// # Safety
/// `samples` and `out` must hold `n` floats and `mask` `mask_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vitvs_mask_denoise(
    samples: *const f32,
    n: usize,
    sample_rate: u32,
    mask: *const u8,
    mask_len: usize,
    out: *mut f32,
) -> VitvsStatus {
    guard(|| {
        let mask = non_null(mask, "mask")?;
        let audio = read_audio(samples, n, sample_rate)?;
        let p = StftParams::default();
        let (bins, frames) = (p.n_bins(), p.n_frames(n));
        if mask_len != bins * frames {
            return Err(Error::Shape(format!("mask has {mask_len} labels, grid is {bins}x{frames}")).into());
        }
        let labels = std::slice::from_raw_parts(mask, mask_len).to_vec();
        let result = mask_denoise(&audio, &Mask::new(labels, bins, frames)?)?;
        write_audio(&result, out)
    })
}

/// Signal-to-distortion ratio in dB of `estimate` against `reference`.
///
/// # Safety
/// `reference` and `estimate` must hold `n` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vitvs_sdr(reference: *const f32, estimate: *const f32, n: usize, out: *mut f64) -> VitvsStatus {
    guard(|| {
        non_null(out, "out")?;
        let r = read_audio(reference, n, 1)?;
        let e = read_audio(estimate, n, 1)?;
        *out = sdr(&r, &e)?;
        Ok(())
    })
}
