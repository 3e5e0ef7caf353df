use super::{AudioImage, Mask};
use crate::error::{invalid, Result};

/// Bilinear resize on half-pixel centers with edge clamping.
pub fn resize_image(img: &AudioImage, target_h: usize, target_w: usize) -> Result<AudioImage> {
    if target_h == 0 || target_w == 0 {
        return Err(invalid!("resize target must be at least 1x1, got {target_h}x{target_w}"));
    }
    if img.height() == 0 || img.width() == 0 {
        return Err(invalid!("cannot resize an empty image"));
    }
    if (target_h, target_w) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let rows = axis_taps(img.height(), target_h);
    let cols = axis_taps(img.width(), target_w);
    let mut out = Vec::with_capacity(target_h * target_w);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = lerp(img.get(r0, c0), img.get(r0, c1), fc);
            let bottom = lerp(img.get(r1, c0), img.get(r1, c1), fc);
            out.push(lerp(top, bottom, fr));
        }
    }
    AudioImage::new(out, target_h, target_w, img.scale)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i0 == i1 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Nearest-neighbour resize on half-pixel centers. Source index for output
/// `d` is `floor((d + 0.5) * src / dst)`, computed in integers.
pub fn resize_mask(mask: &Mask, target_h: usize, target_w: usize) -> Result<Mask> {
    if target_h == 0 || target_w == 0 {
        return Err(invalid!("resize target must be at least 1x1, got {target_h}x{target_w}"));
    }
    if mask.height() == 0 || mask.width() == 0 {
        return Err(invalid!("cannot resize an empty mask"));
    }
    let src_row = |d: usize| ((2 * d + 1) * mask.height()) / (2 * target_h);
    let src_col = |d: usize| ((2 * d + 1) * mask.width()) / (2 * target_w);
    let cols: Vec<usize> = (0..target_w).map(src_col).collect();
    let mut labels = Vec::with_capacity(target_h * target_w);
    for r in 0..target_h {
        let sr = src_row(r);
        labels.extend(cols.iter().map(|&sc| mask.get(sr, sc)));
    }
    Mask::new(labels, target_h, target_w)
}
