//! Correlation volume, dual-softmax match probabilities, the matching loss,
//! and match extraction.

use crate::error::{contract, Result};
use matchflow_tensor::{Real, Tape, Tensor, TensorError, Var};

/// Default dual-softmax temperature.
pub const TEMPERATURE: f64 = 0.1;
/// Floor applied to probabilities inside the log of the matching loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// All-pairs inner products of two `[C×h×w]` maps as an `[N×N]` matrix,
/// `N = h·w`, row = source pixel, column = target pixel.
pub fn correlation_volume<T: Real>(g: &mut Tape<T>, f1: Var, f2: Var, scaled: bool) -> Result<Var> {
    let (s1, s2) = (g.shape(f1).to_vec(), g.shape(f2).to_vec());
    if s1 != s2 || s1.len() != 3 {
        return Err(TensorError::Dimension(format!("correlation needs equal [C,h,w] maps, got {s1:?} and {s2:?}")).into());
    }
    let (c, n) = (s1[0], s1[1] * s1[2]);
    let a = g.reshape(f1, &[c, n])?;
    let a = g.transpose(a)?;
    let b = g.reshape(f2, &[c, n])?;
    let corr = g.matmul(a, b)?;
    if scaled {
        Ok(g.scale(corr, T::one() / T::lit(c as f64).sqrt())?)
    } else {
        Ok(corr)
    }
}

/// `P(i,j) = softmax_j(C(i,·)/τ) · softmax_i(C(·,j)/τ)`.
pub fn dual_softmax<T: Real>(g: &mut Tape<T>, corr: Var, temperature: T) -> Result<Var> {
    if g.shape(corr).len() != 2 {
        return Err(TensorError::Dimension(format!("dual softmax needs an [N×M] volume, got {:?}", g.shape(corr))).into());
    }
    let rows = g.softmax(corr, 1, temperature)?;
    let cols = g.softmax(corr, 0, temperature)?;
    Ok(g.mul(rows, cols)?)
}

/// Ground-truth coarse correspondences `(source index, target index)`,
/// at most one target per source.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GtMatches(pub Vec<(usize, usize)>);

impl GtMatches {
    /// Quantizes a full-resolution correspondence onto the `h×w` coarse grid.
    ///
    /// Each coarse cell is represented by its center pixel `8c + 3.5`. The
    /// mapped center is rounded to the nearest coarse cell and kept when that
    /// cell is in range and within half a cell of the continuous target on
    /// both axes.
    pub fn from_correspondence(h: usize, w: usize, map: impl Fn(f64, f64) -> Option<(f64, f64)>) -> Self {
        let mut out = Vec::new();
        for cy in 0..h {
            for cx in 0..w {
                let (px, py) = (8.0 * cx as f64 + 3.5, 8.0 * cy as f64 + 3.5);
                let Some((tx, ty)) = map(px, py) else { continue };
                let (gx, gy) = ((tx - 3.5) / 8.0, (ty - 3.5) / 8.0);
                let (rx, ry) = (gx.round(), gy.round());
                if rx < 0.0 || ry < 0.0 || rx >= w as f64 || ry >= h as f64 {
                    continue;
                }
                if (gx - rx).abs() <= 0.5 && (gy - ry).abs() <= 0.5 {
                    out.push((cy * w + cx, ry as usize * w + rx as usize));
                }
            }
        }
        Self(out)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `−mean log P(i,j)` over the ground-truth pairs, with the log clamped.
pub fn matching_loss<T: Real>(g: &mut Tape<T>, prob: Var, gt: &GtMatches) -> Result<Var> {
    if gt.is_empty() {
        return contract("matching loss needs at least one ground-truth match");
    }
    let s = g.shape(prob).to_vec();
    if s.len() != 2 {
        return Err(TensorError::Dimension(format!("match probability must be [N×M], got {s:?}")).into());
    }
    let (n, m) = (s[0], s[1]);
    let mut idx = Vec::with_capacity(gt.len());
    for &(i, j) in &gt.0 {
        if i >= n || j >= m {
            return contract(format!("ground-truth pair ({i}, {j}) outside a {n}x{m} volume"));
        }
        idx.push(i * m + j);
    }
    let picked = g.gather(prob, &idx)?;
    let logs = g.log_clamped(picked, T::lit(LOG_FLOOR))?;
    let mean = g.mean(logs)?;
    Ok(g.scale(mean, -T::one())?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub source: usize,
    pub target: usize,
    pub score: f64,
}

fn argmax<T: Real>(it: impl Iterator<Item = T>) -> usize {
    let mut best = (0, T::neg_infinity());
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Pairs with `P > threshold`; with `mutual`, only pairs that are both the
/// row and the column argmax.
pub fn extract_matches<T: Real>(prob: &Tensor<T>, threshold: f64, mutual: bool) -> Result<Vec<Match>> {
    if !(0.0..=1.0).contains(&threshold) {
        return contract(format!("threshold {threshold} outside [0, 1]"));
    }
    if prob.ndim() != 2 {
        return Err(TensorError::Dimension(format!("match probability must be [N×M], got {:?}", prob.shape())).into());
    }
    let (n, m) = (prob.shape()[0], prob.shape()[1]);
    let d = prob.data();
    let mut out = Vec::new();
    for i in 0..n {
        let row = &d[i * m..(i + 1) * m];
        if mutual {
            let j = argmax(row.iter().copied());
            let v = row[j].as_f64();
            if v > threshold && argmax((0..n).map(|r| d[r * m + j])) == i {
                out.push(Match { source: i, target: j, score: v });
            }
        } else {
            for (j, &v) in row.iter().enumerate() {
                if v.as_f64() > threshold {
                    out.push(Match { source: i, target: j, score: v.as_f64() });
                }
            }
        }
    }
    Ok(out)
}

/// Correlation then dual softmax on plain tensors.
pub fn match_probability<T: Real>(f1: &Tensor<T>, f2: &Tensor<T>, scaled: bool, temperature: T) -> Result<Tensor<T>> {
    let mut g = Tape::new();
    let (a, b) = (g.constant(f1.clone()), g.constant(f2.clone()));
    let c = correlation_volume(&mut g, a, b, scaled)?;
    let p = dual_softmax(&mut g, c, temperature)?;
    Ok(g.value(p).clone())
}

/// Correlation on plain tensors.
pub fn correlation<T: Real>(f1: &Tensor<T>, f2: &Tensor<T>, scaled: bool) -> Result<Tensor<T>> {
    let mut g = Tape::new();
    let (a, b) = (g.constant(f1.clone()), g.constant(f2.clone()));
    let c = correlation_volume(&mut g, a, b, scaled)?;
    Ok(g.value(c).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_dual_softmax_anchor() {
        let mut g: Tape<f64> = Tape::new();
        let c = g.constant(Tensor::eye(2));
        let p = dual_softmax(&mut g, c, TEMPERATURE).unwrap();
        // (e^10 / (e^10 + 1))², 30-digit evaluation.
        assert!((g.value(p).at(&[0, 0]) - 0.99990920632356161).abs() < 1e-5);
    }

    #[test]
    fn empty_gt_is_contract_error() {
        let mut g: Tape<f64> = Tape::new();
        let p = g.constant(Tensor::full(&[2, 2], 0.25));
        assert!(matches!(matching_loss(&mut g, p, &GtMatches::default()), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn translation_gt_matches() {
        let gt = GtMatches::from_correspondence(8, 12, |x, y| Some((x + 8.0, y)));
        assert_eq!(gt.len(), 8 * 11);
        assert!(gt.0.iter().all(|&(i, j)| j == i + 1));
    }
}
