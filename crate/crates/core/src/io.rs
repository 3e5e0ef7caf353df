//! WAV and grayscale PNG files.
//!
//! WAV input accepts integer PCM (8 to 32 bit) and 32-bit float, any channel
//! count; channels are averaged to mono. Output is mono float-32 or PCM-16.
//! PNG input accepts any color type and bit depth and averages color
//! channels to gray; output is 8-bit gray. Image row 0 is the first row of
//! the grid (frequency bin 0 for spectrogram images).

use std::io::Cursor;
use std::path::Path;

use crate::dsp::{AudioImage, AudioSignal, Mask};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WavFormat {
    #[default]
    Float32,
    Pcm16,
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (samples, rate) = decode_wav(&bytes).map_err(|e| wav_error(path, e))?;
    AudioSignal::new(samples, rate).map_err(|e| Error::format(path, e.to_string()))
}

fn decode_wav(bytes: &[u8]) -> std::result::Result<(Vec<f64>, u32), hound::Error> {
    let mut reader = hound::WavReader::new(Cursor::new(bytes))?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let channels = usize::from(spec.channels.max(1));
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok((samples, spec.sample_rate))
}

pub fn write_wav(path: &Path, signal: &AudioSignal, format: WavFormat) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: match format {
            WavFormat::Float32 => 32,
            WavFormat::Pcm16 => 16,
        },
        sample_format: match format {
            WavFormat::Float32 => hound::SampleFormat::Float,
            WavFormat::Pcm16 => hound::SampleFormat::Int,
        },
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut buf, spec).map_err(|e| wav_error(path, e))?;
        for &s in &signal.samples {
            let r = match format {
                WavFormat::Float32 => writer.write_sample(s as f32),
                WavFormat::Pcm16 => {
                    writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
                }
            };
            r.map_err(|e| wav_error(path, e))?;
        }
        writer.finalize().map_err(|e| wav_error(path, e))?;
    }
    std::fs::write(path, buf.into_inner()).map_err(|e| Error::io(path, e))
}

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, format!("PNG: {e}"))
}

pub fn read_png(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|e| png_error(path, e))
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<GrayImage, png::DecodingError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let (color, _) = reader.output_color_type();
    let size = reader.output_buffer_size().unwrap_or(0);
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let channels = color.samples();
    // Alpha is ignored; color channels are averaged.
    let colors = match color {
        png::ColorType::GrayscaleAlpha => 1,
        png::ColorType::Rgba => 3,
        _ => channels,
    };
    let mut pixels = Vec::with_capacity(width * height);
    for row in buf.chunks(info.line_size).take(height) {
        for px in row[..width * channels].chunks(channels) {
            let total: u32 = px[..colors].iter().map(|&v| u32::from(v)).sum();
            pixels.push(((total + colors as u32 / 2) / colors as u32) as u8);
        }
    }
    Ok(GrayImage { width, height, pixels })
}

pub fn encode_png(image: &GrayImage) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer.write_image_data(&image.pixels).expect("in-memory PNG data");
        writer.finish().expect("in-memory PNG");
    }
    out
}

pub fn write_png(path: &Path, image: &GrayImage) -> Result<()> {
    if image.width == 0 || image.height == 0 {
        return Err(png_error(path, "cannot write an empty image"));
    }
    std::fs::write(path, encode_png(image)).map_err(|e| Error::io(path, e))
}

/// Labels 0/1 as gray 0/255.
pub fn mask_to_gray(mask: &Mask) -> GrayImage {
    GrayImage {
        width: mask.width(),
        height: mask.height(),
        pixels: mask.labels().iter().map(|&l| l * 255).collect(),
    }
}

/// Gray values of 128 and above become label 1. Also returns how many
/// pixels were neither 0 nor 255.
pub fn gray_to_mask(image: &GrayImage) -> (Mask, usize) {
    let odd = image.pixels.iter().filter(|&&v| v != 0 && v != 255).count();
    let labels = image.pixels.iter().map(|&v| u8::from(v >= 128)).collect();
    let mask = Mask::new(labels, image.height, image.width).expect("binary labels");
    (mask, odd)
}

/// Pixel values clamped to [0, 1] and scaled to 0..=255.
pub fn image_to_gray(image: &AudioImage) -> GrayImage {
    GrayImage {
        width: image.width(),
        height: image.height(),
        pixels: image
            .pixels()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    }
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    write_png(path, &mask_to_gray(mask))
}

pub fn read_mask_png(path: &Path) -> Result<(Mask, usize)> {
    Ok(gray_to_mask(&read_png(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_float_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..1000).map(|i| ((i as f32) * 0.01).sin() as f64 * 0.5).collect();
        let sig = AudioSignal::new(samples, 22050).unwrap();
        write_wav(&path, &sig, WavFormat::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 22050);
        assert_eq!(back.samples, sig.samples);
    }

    #[test]
    fn wav_pcm16_and_stereo_downmix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for (l, r) in [(16384i16, 0i16), (-32768, -32768), (100, 300)] {
            w.write_sample(l).unwrap();
            w.write_sample(r).unwrap();
        }
        w.finalize().unwrap();
        let sig = read_wav(&path).unwrap();
        assert_eq!(sig.samples, vec![0.25, -1.0, 200.0 / 32768.0]);

        let mono = dir.path().join("m.wav");
        write_wav(&mono, &AudioSignal::new(vec![0.5, -2.0], 8000).unwrap(), WavFormat::Pcm16).unwrap();
        let back = read_wav(&mono).unwrap();
        assert!((back.samples[0] - 16384.0 / 32768.0).abs() < 1e-12);
        assert_eq!(back.samples[1], -32767.0 / 32768.0);
    }

    #[test]
    fn bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"not audio").unwrap();
        assert!(matches!(read_wav(&junk), Err(Error::Format { .. })));
        assert!(matches!(read_wav(&dir.path().join("missing.wav")), Err(Error::Io { .. })));
        assert!(matches!(read_png(&junk), Err(Error::Format { .. })));
    }

    #[test]
    fn png_round_trip_and_mask_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let img = GrayImage { width: 3, height: 2, pixels: vec![0, 50, 127, 128, 200, 255] };
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back, img);
        let (mask, odd) = gray_to_mask(&back);
        assert_eq!(mask.labels(), &[0, 0, 0, 1, 1, 1]);
        assert_eq!(odd, 4);
        let m = Mask::new(vec![1, 0, 0, 1], 2, 2).unwrap();
        write_mask_png(&path, &m).unwrap();
        assert_eq!(read_mask_png(&path).unwrap(), (m, 0));
    }

    #[test]
    fn rgb_png_is_averaged() {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, 2, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[255, 255, 255, 0, 30, 60]).unwrap();
        }
        let g = decode_png(&bytes).unwrap();
        assert_eq!(g.pixels, vec![255, 30]);
    }

    #[test]
    fn image_scaling() {
        let img = AudioImage::new(vec![0.001, 0.0, 0.5, 1.0, 2.0, 0.25], 2, 3, crate::dsp::ImageScale::Linear).unwrap();
        assert_eq!(image_to_gray(&img).pixels, vec![0, 0, 128, 255, 255, 64]);
    }
}
