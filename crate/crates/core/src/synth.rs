//! Seeded synthetic image pairs: static scenes under a parametric warp, and
//! layered scenes with independently moving foreground squares.

use crate::config::SIZE_MULTIPLE;
use crate::error::{contract, Result};
use crate::matching::GtMatches;
use matchflow_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Procedural texture on a padded canvas, sampled bilinearly in image
/// coordinates.
#[derive(Clone, Debug)]
pub struct Texture {
    canvas: Tensor<f32>,
    pad: usize,
}

impl Texture {
    /// Smooth gradient plus three octaves of colored Gaussian blobs.
    pub fn generate(rng: &mut ChaCha8Rng, h: usize, w: usize, pad: usize) -> Self {
        let (ch, cw) = (h + 2 * pad, w + 2 * pad);
        let mut base = [[0.0f32; 3]; 3];
        for row in &mut base {
            *row = [rng.random_range(0.25..0.75), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
        }
        let mut canvas = Tensor::from_fn(&[3, ch, cw], |i| {
            let (c, y, x) = (i / (ch * cw), (i / cw) % ch, i % cw);
            let b = base[c];
            b[0] + b[1] * (x as f32 / cw as f32 - 0.5) + b[2] * (y as f32 / ch as f32 - 0.5)
        });
        for (radius, amp) in [(10.0f64, 0.5f64), (4.5, 0.45), (2.0, 0.35)] {
            let count = ((ch * cw) as f64 / (radius * radius * 5.0)).ceil() as usize;
            for _ in 0..count {
                let cx = rng.random_range(0.0..cw as f64);
                let cy = rng.random_range(0.0..ch as f64);
                let r = radius * rng.random_range(0.6..1.4);
                let color = [
                    rng.random_range(-amp..amp),
                    rng.random_range(-amp..amp),
                    rng.random_range(-amp..amp),
                ];
                let reach = (3.0 * r).ceil() as isize;
                let inv = 1.0 / (2.0 * r * r);
                for y in (cy as isize - reach).max(0)..(cy as isize + reach + 1).min(ch as isize) {
                    for x in (cx as isize - reach).max(0)..(cx as isize + reach + 1).min(cw as isize) {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        let k = (-d2 * inv).exp();
                        for (c, col) in color.iter().enumerate() {
                            canvas.data_mut()[(c * ch + y as usize) * cw + x as usize] += (col * k) as f32;
                        }
                    }
                }
            }
        }
        for v in canvas.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Self { canvas, pad }
    }

    /// Bilinear sample at image coordinates; exact at integer positions.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let (ch, cw) = (self.canvas.shape()[1], self.canvas.shape()[2]);
        let sx = (x + self.pad as f64).clamp(0.0, (cw - 1) as f64);
        let sy = (y + self.pad as f64).clamp(0.0, (ch - 1) as f64);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(cw - 1), (y0 + 1).min(ch - 1));
        let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
        let d = self.canvas.data();
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let p = |yy: usize, xx: usize| d[(c * ch + yy) * cw + xx];
            let a = p(y0, x0) + fx * (p(y0, x1) - p(y0, x0));
            let b = p(y1, x0) + fx * (p(y1, x1) - p(y1, x0));
            *o = a + fy * (b - a);
        }
        out
    }
}

/// Maps image-1 pixel coordinates to image-2 coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Warp {
    Translation { tx: f64, ty: f64 },
    /// Row-major 3×3 matrix acting on `(x, y, 1)`.
    Homography([f64; 9]),
}

impl Warp {
    pub fn identity() -> Self {
        Self::Translation { tx: 0.0, ty: 0.0 }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Self::Translation { tx, ty } => (x + tx, y + ty),
            Self::Homography(m) => {
                let z = m[6] * x + m[7] * y + m[8];
                ((m[0] * x + m[1] * y + m[2]) / z, (m[3] * x + m[4] * y + m[5]) / z)
            }
        }
    }

    pub fn inverse(&self) -> Self {
        match *self {
            Self::Translation { tx, ty } => Self::Translation { tx: -tx, ty: -ty },
            Self::Homography(m) => {
                let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                    + m[2] * (m[3] * m[7] - m[4] * m[6]);
                let adj = [
                    m[4] * m[8] - m[5] * m[7],
                    m[2] * m[7] - m[1] * m[8],
                    m[1] * m[5] - m[2] * m[4],
                    m[5] * m[6] - m[3] * m[8],
                    m[0] * m[8] - m[2] * m[6],
                    m[2] * m[3] - m[0] * m[5],
                    m[3] * m[7] - m[4] * m[6],
                    m[1] * m[6] - m[0] * m[7],
                    m[0] * m[4] - m[1] * m[3],
                ];
                Self::Homography(adj.map(|v| v / det))
            }
        }
    }
}

/// How a static pair's warp is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WarpSpec {
    Fixed(Warp),
    /// Uniform translation with components in `[-max, max]`, optionally rounded.
    RandomTranslation { max: f64, integer: bool },
    /// Translation up to `max_shift` plus a small random projective part.
    RandomHomography { max_shift: f64 },
}

/// Global appearance change applied to the second image: value
/// `c·(v − 0.5) + 0.5 + b` with `b ∈ [−brightness, brightness]` and
/// `c ∈ [1 − contrast, 1 + contrast]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JitterSpec {
    pub brightness: f64,
    pub contrast: f64,
}

#[derive(Clone, Debug)]
pub struct StaticScenePair {
    pub i1: Tensor<f32>,
    pub i2: Tensor<f32>,
    pub warp: Warp,
    /// 1 where the warped pixel lands inside image 2.
    pub valid: Tensor<f32>,
}

impl StaticScenePair {
    /// Exact image-2 position of an image-1 point, `None` when out of frame.
    pub fn correspond(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (h, w) = (self.i1.shape()[1] as f64, self.i1.shape()[2] as f64);
        let (tx, ty) = self.warp.apply(x, y);
        (tx >= 0.0 && ty >= 0.0 && tx < w && ty < h).then_some((tx, ty))
    }

    /// Coarse ground-truth matches on the 1/8 grid.
    pub fn gt_matches(&self) -> GtMatches {
        let (h, w) = (self.i1.shape()[1] / 8, self.i1.shape()[2] / 8);
        GtMatches::from_correspondence(h, w, |x, y| self.correspond(x, y))
    }
}

fn check_size(size: (usize, usize)) -> Result<()> {
    if size.0 == 0 || size.1 == 0 || size.0 % SIZE_MULTIPLE != 0 || size.1 % SIZE_MULTIPLE != 0 {
        return contract(format!("size {}x{} must be positive multiples of {SIZE_MULTIPLE}", size.0, size.1));
    }
    Ok(())
}

fn render(h: usize, w: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Tensor<f32> {
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let v = f(x, y);
            for (c, &vc) in v.iter().enumerate() {
                out.data_mut()[(c * h + y) * w + x] = vc;
            }
        }
    }
    out
}

fn apply_jitter(img: &mut Tensor<f32>, rng: &mut ChaCha8Rng, j: &JitterSpec) {
    if j.brightness == 0.0 && j.contrast == 0.0 {
        return;
    }
    let b = if j.brightness > 0.0 { rng.random_range(-j.brightness..j.brightness) } else { 0.0 } as f32;
    let c = if j.contrast > 0.0 { rng.random_range(1.0 - j.contrast..1.0 + j.contrast) } else { 1.0 } as f32;
    for v in img.data_mut() {
        *v = (c * (*v - 0.5) + 0.5 + b).clamp(0.0, 1.0);
    }
}

fn pad_for(size: (usize, usize)) -> usize {
    size.0.max(size.1) / 4 + 4
}

/// Static pair where `I2(p) = T(W⁻¹(p))` for a seeded texture `T = I1`.
pub fn gen_static_pair(seed: u64, size: (usize, usize), warp: &WarpSpec, jitter: &JitterSpec) -> Result<StaticScenePair> {
    check_size(size)?;
    let (h, w) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Texture::generate(&mut rng, h, w, pad_for(size));
    let warp = match *warp {
        WarpSpec::Fixed(wp) => wp,
        WarpSpec::RandomTranslation { max, integer } => {
            let mut t = [rng.random_range(-max..=max), rng.random_range(-max..=max)];
            if integer {
                t = t.map(f64::round);
            }
            Warp::Translation { tx: t[0], ty: t[1] }
        }
        WarpSpec::RandomHomography { max_shift } => {
            let mut s = |a: f64| rng.random_range(-a..=a);
            let (a, b, c, d) = (s(0.05), s(0.05), s(0.05), s(0.05));
            let (e, f) = (s(2e-4), s(2e-4));
            let (tx, ty) = (s(max_shift), s(max_shift));
            // Keep the image center's displacement equal to (tx, ty).
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            let m = [1.0 + a, b, 0.0, c, 1.0 + d, 0.0, e, f, 1.0];
            let z = e * cx + f * cy + 1.0;
            let px = ((1.0 + a) * cx + b * cy) / z;
            let py = (c * cx + (1.0 + d) * cy) / z;
            let mut m = m;
            m[2] = (cx + tx - px) * z;
            m[5] = (cy + ty - py) * z;
            Warp::Homography(m)
        }
    };
    let limit = h.min(w) as f64 / 4.0;
    let mut outside = 0usize;
    let mut valid = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let (tx, ty) = warp.apply(x as f64, y as f64);
            if (tx - x as f64).abs() > limit || (ty - y as f64).abs() > limit {
                return contract(format!("warp moves pixel ({x}, {y}) by more than {limit} px"));
            }
            if tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64 {
                valid.set(&[y, x], 1.0);
            } else {
                outside += 1;
            }
        }
    }
    if 2 * outside > h * w {
        return contract(format!("warp pushes {outside} of {} pixels out of frame", h * w));
    }
    let inv = warp.inverse();
    let i1 = render(h, w, |x, y| tex.sample(x as f64, y as f64));
    let mut i2 = render(h, w, |x, y| {
        let (sx, sy) = inv.apply(x as f64, y as f64);
        tex.sample(sx, sy)
    });
    apply_jitter(&mut i2, &mut rng, jitter);
    Ok(StaticScenePair { i1, i2, warp, valid })
}

/// Axis-aligned square layer moving by an integer-free translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layer {
    /// Top-left corner in image-1 coordinates.
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub motion: (f64, f64),
}

impl Layer {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && y >= self.y0 && x < self.x0 + self.side && y < self.y0 + self.side
    }

    fn contains_moved(&self, x: f64, y: f64) -> bool {
        self.contains(x - self.motion.0, y - self.motion.1)
    }
}

/// Motion of a layered scene.
#[derive(Clone, Debug, PartialEq)]
pub enum MotionSpec {
    /// Background translation and explicit foreground layers, back to front.
    Fixed { background: (f64, f64), layers: Vec<Layer> },
    /// Random background translation only.
    Uniform { max: f64, integer: bool },
    /// Random background plus `layers` random squares.
    Random { max_background: f64, max_foreground: f64, layers: usize, integer: bool },
}

#[derive(Clone, Debug)]
pub struct FlowScenePair {
    pub i1: Tensor<f32>,
    pub i2: Tensor<f32>,
    /// `[2×H×W]` flow of image-1 pixels.
    pub flow: Tensor<f32>,
    /// `[H×W]`, 1 where the target is out of frame or hidden by a nearer layer.
    pub occlusion: Tensor<f32>,
}

/// Layer owning a point, `None` for the background.
fn owner(layers: &[Layer], x: f64, y: f64, moved: bool) -> Option<usize> {
    layers.iter().enumerate().rev().find(|(_, l)| if moved { l.contains_moved(x, y) } else { l.contains(x, y) }).map(|(i, _)| i)
}

/// Layered pair: background texture under a translation plus foreground
/// squares with their own textures and translations.
pub fn gen_flow_pair(seed: u64, size: (usize, usize), motion: &MotionSpec) -> Result<FlowScenePair> {
    check_size(size)?;
    let (h, w) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pad = pad_for(size);
    let bg_tex = Texture::generate(&mut rng, h, w, pad);
    let pick = |rng: &mut ChaCha8Rng, max: f64, integer: bool| {
        let t = (rng.random_range(-max..=max), rng.random_range(-max..=max));
        if integer {
            (t.0.round(), t.1.round())
        } else {
            t
        }
    };
    let (bg, layers) = match motion {
        MotionSpec::Fixed { background, layers } => (*background, layers.clone()),
        MotionSpec::Uniform { max, integer } => (pick(&mut rng, *max, *integer), Vec::new()),
        MotionSpec::Random { max_background, max_foreground, layers, integer } => {
            let bgm = pick(&mut rng, *max_background, *integer);
            let ls = (0..*layers)
                .map(|_| {
                    let side = rng.random_range(16.0..=(h.min(w) as f64 / 2.0)).round();
                    let x0 = rng.random_range(0.0..(w as f64 - side)).round();
                    let y0 = rng.random_range(0.0..(h as f64 - side)).round();
                    Layer { x0, y0, side, motion: pick(&mut rng, *max_foreground, *integer) }
                })
                .collect();
            (bgm, ls)
        }
    };
    let limit = h.min(w) as f64 / 4.0;
    for m in std::iter::once(bg).chain(layers.iter().map(|l| l.motion)) {
        if m.0.abs() > limit || m.1.abs() > limit {
            return contract(format!("motion ({}, {}) exceeds {limit} px", m.0, m.1));
        }
    }
    let textures: Vec<Texture> = layers.iter().map(|_| Texture::generate(&mut rng, h, w, pad)).collect();
    let motion_of = |o: Option<usize>| o.map_or(bg, |k| layers[k].motion);
    let i1 = render(h, w, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        match owner(&layers, xf, yf, false) {
            Some(k) => textures[k].sample(xf, yf),
            None => bg_tex.sample(xf, yf),
        }
    });
    let i2 = render(h, w, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let o = owner(&layers, xf, yf, true);
        let m = motion_of(o);
        match o {
            Some(k) => textures[k].sample(xf - m.0, yf - m.1),
            None => bg_tex.sample(xf - m.0, yf - m.1),
        }
    });
    let n = h * w;
    let mut flow = Tensor::zeros(&[2, h, w]);
    let mut occ = Tensor::zeros(&[h, w]);
    let mut outside = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let o = owner(&layers, x as f64, y as f64, false);
            let m = motion_of(o);
            flow.data_mut()[i] = m.0 as f32;
            flow.data_mut()[n + i] = m.1 as f32;
            let (tx, ty) = (x as f64 + m.0, y as f64 + m.1);
            let inside = tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64;
            if !inside {
                outside += 1;
            }
            if !inside || owner(&layers, tx, ty, true) != o {
                occ.data_mut()[i] = 1.0;
            }
        }
    }
    if 2 * outside > n {
        return contract(format!("motion pushes {outside} of {n} pixels out of frame"));
    }
    Ok(FlowScenePair { i1, i2, flow, occlusion: occ })
}
