//! Non-overlapping patch extraction and its inverse.
//!
//! Images are channel-last `[.., H, W, C]`; patch sequences are
//! `[.., N, p*p*C]` with patches in row-major grid order and each patch
//! flattened row, column, channel.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor, Var};

struct Plan {
    lead: Vec<usize>,
    gh: usize,
    gw: usize,
    p: usize,
    c: usize,
}

impl Plan {
    fn blocks(&self) -> Vec<usize> {
        let mut s = self.lead.clone();
        s.extend([self.gh, self.p, self.gw, self.p, self.c]);
        s
    }

    fn grid(&self) -> Vec<usize> {
        let mut s = self.lead.clone();
        s.extend([self.gh, self.gw, self.p, self.p, self.c]);
        s
    }

    fn patches(&self) -> Vec<usize> {
        let mut s = self.lead.clone();
        s.extend([self.gh * self.gw, self.p * self.p * self.c]);
        s
    }

    fn image(&self) -> Vec<usize> {
        let mut s = self.lead.clone();
        s.extend([self.gh * self.p, self.gw * self.p, self.c]);
        s
    }

    /// Swaps the in-patch row axis with the grid column axis. Self-inverse.
    fn perm(&self) -> Vec<usize> {
        let l = self.lead.len();
        let mut perm: Vec<usize> = (0..l).collect();
        perm.extend([l, l + 2, l + 1, l + 3, l + 4]);
        perm
    }
}

fn plan_patchify(shape: &[usize], p: usize) -> Result<Plan> {
    if shape.len() < 3 || p == 0 {
        return Err(shape_err!("cannot cut {shape:?} into {p}x{p} patches"));
    }
    let l = shape.len() - 3;
    let (h, w, c) = (shape[l], shape[l + 1], shape[l + 2]);
    if h % p != 0 || w % p != 0 {
        return Err(shape_err!("image {h}x{w} is not divisible into {p}x{p} patches"));
    }
    Ok(Plan {
        lead: shape[..l].to_vec(),
        gh: h / p,
        gw: w / p,
        p,
        c,
    })
}

fn plan_fold(shape: &[usize], p: usize, height: usize, width: usize) -> Result<Plan> {
    if shape.len() < 2 || p == 0 || height % p != 0 || width % p != 0 {
        return Err(shape_err!("cannot fold {shape:?} into a {height}x{width} image of {p}x{p} patches"));
    }
    let l = shape.len() - 2;
    let (n, dim) = (shape[l], shape[l + 1]);
    let (gh, gw) = (height / p, width / p);
    if n != gh * gw || dim % (p * p) != 0 || dim == 0 {
        return Err(shape_err!(
            "{n} patches of width {dim} do not tile a {height}x{width} image with {p}x{p} patches"
        ));
    }
    Ok(Plan {
        lead: shape[..l].to_vec(),
        gh,
        gw,
        p,
        c: dim / (p * p),
    })
}

pub fn image_to_patches<T: Real>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let plan = plan_patchify(image.shape(), p)?;
    image
        .reshape(&plan.blocks())?
        .permute(&plan.perm())?
        .into_reshaped(&plan.patches())
}

pub fn patches_to_image<T: Real>(
    patches: &Tensor<T>,
    p: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let plan = plan_fold(patches.shape(), p, height, width)?;
    patches
        .reshape(&plan.grid())?
        .permute(&plan.perm())?
        .into_reshaped(&plan.image())
}

/// [`image_to_patches`] on the tape.
pub fn patchify<'t, T: Real>(image: Var<'t, T>, p: usize) -> Result<Var<'t, T>> {
    let plan = plan_patchify(&image.shape(), p)?;
    image
        .reshape(&plan.blocks())?
        .permute(&plan.perm())?
        .reshape(&plan.patches())
}

/// [`patches_to_image`] on the tape.
pub fn fold<'t, T: Real>(
    patches: Var<'t, T>,
    p: usize,
    height: usize,
    width: usize,
) -> Result<Var<'t, T>> {
    let plan = plan_fold(&patches.shape(), p, height, width)?;
    patches
        .reshape(&plan.grid())?
        .permute(&plan.perm())?
        .reshape(&plan.image())
}
