//! Flow metrics, occlusion-region breakdown, local correlation maps, and
//! flow colorization.

use crate::error::{contract, Error, Result};
use crate::flow::downsample_flow;
use matchflow_tensor::Tensor;

/// Window radius of [`corr_viz`]; the map is `(2r+1)²`.
pub const VIZ_RADIUS: usize = 5;

fn check_pair(pred: &Tensor<f32>, gt: &Tensor<f32>, mask: Option<&Tensor<f32>>) -> Result<(usize, usize)> {
    if pred.shape() != gt.shape() || pred.ndim() != 3 || pred.shape()[0] != 2 {
        return contract(format!("flow shapes {:?} and {:?} must be equal [2,H,W]", pred.shape(), gt.shape()));
    }
    let (h, w) = (gt.shape()[1], gt.shape()[2]);
    if let Some(m) = mask {
        if m.shape() != [h, w] {
            return contract(format!("mask {:?} does not match {h}x{w} flow", m.shape()));
        }
    }
    Ok((h, w))
}

fn valid_pixels(n: usize, mask: Option<&Tensor<f32>>) -> Vec<usize> {
    (0..n).filter(|&i| mask.map_or(true, |m| m.data()[i] > 0.0)).collect()
}

/// Per-pixel end-point errors.
pub fn epe_map(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Vec<f64> {
    let n = gt.numel() / 2;
    (0..n)
        .map(|i| {
            let du = pred.data()[i] as f64 - gt.data()[i] as f64;
            let dv = pred.data()[n + i] as f64 - gt.data()[n + i] as f64;
            (du * du + dv * dv).sqrt()
        })
        .collect()
}

/// Mean end-point error over the masked pixels.
pub fn aepe(pred: &Tensor<f32>, gt: &Tensor<f32>, mask: Option<&Tensor<f32>>) -> Result<f64> {
    let (h, w) = check_pair(pred, gt, mask)?;
    let px = valid_pixels(h * w, mask);
    if px.is_empty() {
        return contract("AEPE over an empty mask");
    }
    let e = epe_map(pred, gt);
    Ok(px.iter().map(|&i| e[i]).sum::<f64>() / px.len() as f64)
}

/// How the two outlier thresholds combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlSemantics {
    /// EPE above 3 px and above 5% of the ground-truth magnitude.
    #[default]
    And,
    /// EPE above 3 px or above 5% of the ground-truth magnitude.
    Or,
}

impl std::str::FromStr for FlSemantics {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "and" => Ok(Self::And),
            "or" => Ok(Self::Or),
            _ => Err(Error::Config(format!("unknown Fl-all semantics `{s}` (expected and|or)"))),
        }
    }
}

/// Outlier percentage.
pub fn fl_all(pred: &Tensor<f32>, gt: &Tensor<f32>, mask: Option<&Tensor<f32>>, sem: FlSemantics) -> Result<f64> {
    let (h, w) = check_pair(pred, gt, mask)?;
    let px = valid_pixels(h * w, mask);
    if px.is_empty() {
        return contract("Fl-all over an empty mask");
    }
    let n = h * w;
    let e = epe_map(pred, gt);
    let bad = px
        .iter()
        .filter(|&&i| {
            let mag = (gt.data()[i] as f64).hypot(gt.data()[n + i] as f64);
            let (a, b) = (e[i] > 3.0, e[i] > 0.05 * mag);
            match sem {
                FlSemantics::And => a && b,
                FlSemantics::Or => a || b,
            }
        })
        .count();
    Ok(100.0 * bad as f64 / px.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Noc,
    OccIn,
    OccOut,
}

/// Labels every pixel: occluded pixels are out-of-frame when their
/// ground-truth endpoint leaves `[0,W)×[0,H)`.
pub fn region_split(occ: &Tensor<f32>, gt: &Tensor<f32>) -> Result<Vec<Region>> {
    if gt.ndim() != 3 || gt.shape()[0] != 2 || occ.shape() != &gt.shape()[1..] {
        return contract(format!("occlusion mask {:?} and flow {:?} are not aligned", occ.shape(), gt.shape()));
    }
    let (h, w) = (gt.shape()[1], gt.shape()[2]);
    let n = h * w;
    Ok((0..n)
        .map(|i| {
            if occ.data()[i] <= 0.0 {
                return Region::Noc;
            }
            let x = (i % w) as f64 + gt.data()[i] as f64;
            let y = (i / w) as f64 + gt.data()[n + i] as f64;
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                Region::OccOut
            } else {
                Region::OccIn
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionStat {
    pub region: &'static str,
    pub pixels: usize,
    pub fraction: f64,
    /// `None` when the region is empty.
    pub aepe: Option<f64>,
}

/// AEPE over all pixels and over Noc / Occ / Occ-in / Occ-out.
pub fn region_table(pred: &Tensor<f32>, gt: &Tensor<f32>, occ: &Tensor<f32>) -> Result<Vec<RegionStat>> {
    check_pair(pred, gt, None)?;
    let labels = region_split(occ, gt)?;
    let e = epe_map(pred, gt);
    let n = labels.len();
    let stat = |name: &'static str, keep: &dyn Fn(Region) -> bool| {
        let px: Vec<usize> = (0..n).filter(|&i| keep(labels[i])).collect();
        let aepe = (!px.is_empty()).then(|| px.iter().map(|&i| e[i]).sum::<f64>() / px.len() as f64);
        RegionStat { region: name, pixels: px.len(), fraction: px.len() as f64 / n as f64, aepe }
    };
    Ok(vec![
        stat("all", &|_| true),
        stat("noc", &|r| r == Region::Noc),
        stat("occ", &|r| r != Region::Noc),
        stat("occ-in", &|r| r == Region::OccIn),
        stat("occ-out", &|r| r == Region::OccOut),
    ])
}

/// Mean of softmax-normalized 11×11 correlation windows around the
/// ground-truth targets of the given coarse cells (all cells when `None`).
///
/// `corr` is `[N×N]` over an `h×w` coarse grid; `gt` is full-resolution
/// `[2×8h×8w]` and is reduced to the coarse grid (area mean, values ÷ 8).
/// Window centers are rounded to the nearest cell; offsets that fall outside
/// the grid are skipped and the remaining entries renormalized.
pub fn corr_viz(corr: &Tensor<f32>, grid: (usize, usize), gt: &Tensor<f32>, points: Option<&[(usize, usize)]>) -> Result<Tensor<f64>> {
    let (h, w) = grid;
    let n = h * w;
    if corr.shape() != [n, n] {
        return contract(format!("volume {:?} does not match a {h}x{w} grid", corr.shape()));
    }
    if gt.shape() != [2, 8 * h, 8 * w] {
        return contract(format!("gt flow {:?} is not [2, {}, {}]", gt.shape(), 8 * h, 8 * w));
    }
    let coarse = downsample_flow(gt)?;
    let all: Vec<(usize, usize)> = (0..n).map(|i| (i / w, i % w)).collect();
    let pts = points.unwrap_or(&all);
    let side = 2 * VIZ_RADIUS + 1;
    let r = VIZ_RADIUS as isize;
    let mut acc = vec![0.0f64; side * side];
    let mut used = 0usize;
    let mut win = vec![None; side * side];
    for &(py, px) in pts {
        if py >= h || px >= w {
            return contract(format!("sample point ({py}, {px}) outside the {h}x{w} grid"));
        }
        let i = py * w + px;
        let tx = (px as f64 + coarse.data()[i] as f64).round() as isize;
        let ty = (py as f64 + coarse.data()[n + i] as f64).round() as isize;
        let mut mx = f64::NEG_INFINITY;
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (tx + dx, ty + dy);
                let k = ((dy + r) as usize) * side + (dx + r) as usize;
                win[k] = if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    let c = corr.data()[i * n + y as usize * w + x as usize] as f64;
                    mx = mx.max(c);
                    Some(c)
                } else {
                    None
                };
            }
        }
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let total: f64 = win.iter().flatten().map(|&c| (c - mx).exp()).sum();
        for (a, c) in acc.iter_mut().zip(&win) {
            if let Some(c) = c {
                *a += (c - mx).exp() / total;
            }
        }
        used += 1;
    }
    if used == 0 {
        return contract("no sample point has an in-range correlation window");
    }
    Ok(Tensor::new(&[side, side], acc.into_iter().map(|a| a / used as f64).collect())?)
}

/// Fully saturated wheel color for an angle in radians, each channel in [0,1].
fn hue_rgb(angle: f64) -> [f64; 3] {
    let h = (angle.to_degrees().rem_euclid(360.0)) / 60.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// RGB `[3×H×W]` in [0,1]: hue from the flow angle, saturation from the
/// magnitude relative to `max_magnitude` (the field maximum when `None`),
/// full value. Zero flow is white.
pub fn flow_to_color(f: &Tensor<f32>, max_magnitude: Option<f64>) -> Result<Tensor<f32>> {
    if f.ndim() != 3 || f.shape()[0] != 2 {
        return contract(format!("flow must be [2,H,W], got {:?}", f.shape()));
    }
    let n = f.numel() / 2;
    let mag = |i: usize| (f.data()[i] as f64).hypot(f.data()[n + i] as f64);
    let maxm = max_magnitude.unwrap_or_else(|| (0..n).map(mag).fold(0.0, f64::max));
    let maxm = if maxm > 0.0 { maxm } else { 1.0 };
    let mut out = Tensor::zeros(&[3, f.shape()[1], f.shape()[2]]);
    for i in 0..n {
        let s = (mag(i) / maxm).min(1.0);
        let rgb = hue_rgb((f.data()[n + i] as f64).atan2(f.data()[i] as f64));
        for (c, &v) in rgb.iter().enumerate() {
            out.data_mut()[c * n + i] = (1.0 - s * (1.0 - v)) as f32;
        }
    }
    Ok(out)
}

/// Grayscale-to-heat rendering of a 2D map, each cell scaled up `cell` times.
pub fn heatmap(map: &Tensor<f64>, cell: usize) -> Tensor<f32> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (lo, hi) = map.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (oh, ow) = (h * cell, w * cell);
    let mut out = Tensor::zeros(&[3, oh, ow]);
    for y in 0..oh {
        for x in 0..ow {
            let t = (map.data()[(y / cell) * w + x / cell] - lo) / span;
            let rgb = [t.min(1.0), (2.0 * t - 0.5).clamp(0.0, 1.0), (1.0 - 2.0 * t).max(0.0) * 0.5];
            for (c, v) in rgb.iter().enumerate() {
                out.data_mut()[(c * oh + y) * ow + x] = *v as f32;
            }
        }
    }
    out
}
