//! Tiled inference with Gaussian center weighting, and the resize-then-tile
//! path for arbitrary input sizes.

use crate::config::SIZE_MULTIPLE;
use crate::error::{Error, Result};
use crate::model::FlowModel;
use matchflow_tensor::Tensor;

/// Default standard deviation of the center weighting.
pub const SIGMA: f64 = 0.05;

/// Patch layout over a test image; every patch has the training size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub starts: Vec<(usize, usize)>,
    pub patch: (usize, usize),
    pub test: (usize, usize),
}

impl TilePlan {
    /// Number of patches covering each pixel, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let (h, w) = self.test;
        let mut c = vec![0u32; h * w];
        for &(r0, c0) in &self.starts {
            for r in r0..(r0 + self.patch.0).min(h) {
                for v in &mut c[r * w + c0..r * w + (c0 + self.patch.1).min(w)] {
                    *v += 1;
                }
            }
        }
        c
    }
}

/// Two patches along the width when the heights match, four corner patches
/// otherwise; a single patch when test and train sizes are equal. Repeated
/// starts are dropped.
///
/// Corner patches only reach every pixel while the test size is at most
/// twice the train size on each axis, so larger tests are rejected.
pub fn split_patches(test: (usize, usize), train: (usize, usize)) -> Result<TilePlan> {
    if train.0 == 0 || train.1 == 0 {
        return Err(Error::Contract("train size must be positive".into()));
    }
    if test.0 < train.0 || test.1 < train.1 {
        return Err(Error::Contract(format!(
            "test size {}x{} is smaller than train size {}x{}; resize before tiling",
            test.0, test.1, train.0, train.1
        )));
    }
    if test.0 > 2 * train.0 || test.1 > 2 * train.1 {
        return Err(Error::Contract(format!(
            "test size {}x{} exceeds twice the train size {}x{}; resize before tiling",
            test.0, test.1, train.0, train.1
        )));
    }
    let (dh, dw) = (test.0 - train.0, test.1 - train.1);
    let candidates = if test == train {
        vec![(0, 0)]
    } else if test.0 <= train.0 {
        vec![(0, 0), (0, dw)]
    } else {
        vec![(0, 0), (dh, 0), (dh, dw), (0, dw)]
    };
    let mut starts: Vec<(usize, usize)> = Vec::new();
    for s in candidates {
        if !starts.contains(&s) {
            starts.push(s);
        }
    }
    Ok(TilePlan { starts, patch: train, test })
}

/// `N(d; 0, σ)` with `d = ‖(u/H − 0.5, v/W − 0.5)‖` for row `u`, column `v`.
pub fn pixel_weight(u: usize, v: usize, train: (usize, usize), sigma: f64) -> f64 {
    let du = (2.0 * u as f64 - train.0 as f64) / (2.0 * train.0 as f64);
    let dv = (2.0 * v as f64 - train.1 as f64) / (2.0 * train.1 as f64);
    let d2 = du * du + dv * dv;
    (-d2 / (2.0 * sigma * sigma)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * sigma)
}

/// Weighted average of per-patch flows `[2×H_train×W_train]`; pixels covered
/// by a single patch copy its value.
pub fn blend(patch_flows: &[Tensor<f32>], plan: &TilePlan, sigma: f64) -> Result<Tensor<f32>> {
    if patch_flows.len() != plan.starts.len() {
        return Err(Error::Plan(format!("{} flows for {} patches", patch_flows.len(), plan.starts.len())));
    }
    let (h, w) = plan.test;
    let (ph, pw) = plan.patch;
    for f in patch_flows {
        if f.shape() != [2, ph, pw] {
            return Err(Error::Plan(format!("patch flow {:?} is not [2, {ph}, {pw}]", f.shape())));
        }
    }
    let cover = plan.coverage();
    if let Some(i) = cover.iter().position(|&c| c == 0) {
        return Err(Error::Plan(format!("pixel ({}, {}) is not covered by any patch", i / w, i % w)));
    }
    let weights: Vec<f64> = (0..ph * pw).map(|i| pixel_weight(i / pw, i % pw, plan.patch, sigma)).collect();
    let mut num = vec![0.0f64; 2 * h * w];
    let mut den = vec![0.0f64; h * w];
    let mut out = Tensor::zeros(&[2, h, w]);
    for (f, &(r0, c0)) in patch_flows.iter().zip(&plan.starts) {
        for u in 0..ph.min(h - r0) {
            for v in 0..pw.min(w - c0) {
                let o = (r0 + u) * w + c0 + v;
                let pi = u * pw + v;
                if cover[o] == 1 {
                    out.data_mut()[o] = f.data()[pi];
                    out.data_mut()[h * w + o] = f.data()[ph * pw + pi];
                } else {
                    let wt = weights[pi];
                    den[o] += wt;
                    num[o] += wt * f.data()[pi] as f64;
                    num[h * w + o] += wt * f.data()[ph * pw + pi] as f64;
                }
            }
        }
    }
    for o in 0..h * w {
        if cover[o] > 1 {
            out.data_mut()[o] = (num[o] / den[o]) as f32;
            out.data_mut()[h * w + o] = (num[h * w + o] / den[o]) as f32;
        }
    }
    Ok(out)
}

/// Half-pixel-aligned bilinear resize of `[c×h×w]` with edge clamping.
pub fn resize_bilinear(x: &Tensor<f32>, nh: usize, nw: usize) -> Tensor<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if (h, w) == (nh, nw) {
        return x.clone();
    }
    let taps = |n: usize, m: usize| -> Vec<(usize, usize, f32)> {
        (0..m)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n as f64 / m as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = s.floor() as usize;
                (i0, (i0 + 1).min(n - 1), (s - i0 as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, nh), taps(w, nw));
    let mut out = Tensor::zeros(&[c, nh, nw]);
    for ci in 0..c {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let a = plane[y0 * w + x0] + fx * (plane[y0 * w + x1] - plane[y0 * w + x0]);
                let b = plane[y1 * w + x0] + fx * (plane[y1 * w + x1] - plane[y1 * w + x0]);
                out.data_mut()[(ci * nh + oy) * nw + ox] = a + fy * (b - a);
            }
        }
    }
    out
}

/// Nearest multiple of 32, at least 32.
pub fn round_to_multiple(n: usize) -> usize {
    let m = SIZE_MULTIPLE;
    (((n + m / 2) / m) * m).max(m)
}

fn crop(x: &Tensor<f32>, r0: usize, c0: usize, h: usize, w: usize) -> Tensor<f32> {
    let (c, _, fw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let fh = x.shape()[1];
    Tensor::from_fn(&[c, h, w], |i| {
        let (ci, r, col) = (i / (h * w), (i / w) % h, i % w);
        x.data()[(ci * fh + r0 + r) * fw + c0 + col]
    })
}

/// Options for [`resize_infer`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileOptions {
    pub train_size: (usize, usize),
    pub tile: bool,
    pub sigma: f64,
}

impl TileOptions {
    pub fn new(train_size: (usize, usize)) -> Self {
        Self { train_size, tile: true, sigma: SIGMA }
    }
}

/// Flow at the inputs' own resolution for images of any size above 32 px.
///
/// Inputs are resized so both sides are multiples of 32 (and, when tiling,
/// between one and two times the training size), inferred per patch and
/// blended, then the flow is resized back with its components rescaled per
/// axis.
pub fn resize_infer(i1: &Tensor<f32>, i2: &Tensor<f32>, model: &dyn FlowModel, opts: &TileOptions) -> Result<Tensor<f32>> {
    if i1.shape() != i2.shape() || i1.ndim() != 3 || i1.shape()[0] != 3 {
        return Err(Error::Contract(format!("image shapes {:?} and {:?} must be equal [3,H,W]", i1.shape(), i2.shape())));
    }
    let (h, w) = (i1.shape()[1], i1.shape()[2]);
    if h <= SIZE_MULTIPLE || w <= SIZE_MULTIPLE {
        return Err(Error::Resolution(format!("{h}x{w} input is too small; both sides must exceed {SIZE_MULTIPLE} px")));
    }
    let (th, tw) = opts.train_size;
    let (mut nh, mut nw) = (round_to_multiple(h), round_to_multiple(w));
    if opts.tile {
        nh = nh.clamp(th, 2 * th);
        nw = nw.clamp(tw, 2 * tw);
    }
    let (a, b) = (resize_bilinear(i1, nh, nw), resize_bilinear(i2, nh, nw));
    let flow = if opts.tile {
        let plan = split_patches((nh, nw), opts.train_size)?;
        let flows = plan
            .starts
            .iter()
            .map(|&(r0, c0)| model.predict(&crop(&a, r0, c0, th, tw), &crop(&b, r0, c0, th, tw)))
            .collect::<Result<Vec<_>>>()?;
        if flows.len() == 1 && plan.patch == plan.test {
            flows.into_iter().next().expect("one patch")
        } else {
            blend(&flows, &plan, opts.sigma)?
        }
    } else {
        model.predict(&a, &b)?
    };
    if (nh, nw) == (h, w) {
        return Ok(flow);
    }
    let mut back = resize_bilinear(&flow, h, w);
    let (su, sv) = (w as f32 / nw as f32, h as f32 / nh as f32);
    let n = h * w;
    for v in &mut back.data_mut()[..n] {
        *v *= su;
    }
    for v in &mut back.data_mut()[n..] {
        *v *= sv;
    }
    Ok(back)
}
