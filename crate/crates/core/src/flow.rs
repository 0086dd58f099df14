//! Correlation pyramid, bilinear lookup, convolutional GRU refinement,
//! ×8 upsampling, and the γ-weighted L1 flow loss.

use crate::config::FlowConfig;
use crate::encoder::ContextVars;
use crate::error::{contract, Error, Result};
use crate::matching::correlation_volume;
use crate::params::{ParamSpec, Params};
use matchflow_tensor::{CustomOp, Real, Tape, Tensor, TensorError, Var};

/// Channels of the raw flow branch inside the motion encoder.
const FLOW_BRANCH: usize = 16;
/// Init gain of the last flow-head layer, so early residuals stay small.
const HEAD_GAIN: f64 = 0.1;

pub fn param_specs(cfg: &FlowConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    let mut conv = |name: &str, cout: usize, cin: usize, k: usize, gain: f64| {
        s.push(ParamSpec::conv(format!("upd.{name}.w"), cout, cin, k, gain));
        s.push(ParamSpec::zeros(format!("upd.{name}.b"), &[cout]));
    };
    let (m, hd, cx) = (cfg.motion, cfg.hidden, cfg.context);
    conv("mc", m, cfg.lookup_channels(), 1, 1.0);
    conv("mf", FLOW_BRANCH, 2, 3, 1.0);
    conv("mo", m - 2, m + FLOW_BRANCH, 3, 1.0);
    let gru_in = hd + m + cx;
    conv("gz", hd, gru_in, 3, 0.5);
    conv("gr", hd, gru_in, 3, 0.5);
    conv("gq", hd, gru_in, 3, 0.5);
    conv("h1", hd, hd, 3, 1.0);
    conv("h2", 2, hd, 3, HEAD_GAIN);
    s
}

/// Level `l` of the pyramid pools the target axes of `corr[N×N]` by `2^l`;
/// each level is `[N × h/2^l × w/2^l]`.
pub fn correlation_pyramid<T: Real>(g: &mut Tape<T>, corr: Var, grid: (usize, usize), levels: usize) -> Result<Vec<Var>> {
    let (h, w) = grid;
    let n = h * w;
    if g.shape(corr) != [n, n] {
        return Err(TensorError::Dimension(format!("volume {:?} does not match a {h}x{w} grid", g.shape(corr))).into());
    }
    if levels == 0 {
        return contract("pyramid needs at least one level");
    }
    let f = 1usize << (levels - 1);
    if h % f != 0 || w % f != 0 {
        return Err(TensorError::Dimension(format!("{h}x{w} target grid is not divisible by {f} for {levels} levels")).into());
    }
    let mut cur = g.reshape(corr, &[n, h, w])?;
    let mut out = vec![cur];
    for _ in 1..levels {
        cur = g.avg_pool2(cur)?;
        out.push(cur);
    }
    Ok(out)
}

/// Bilinear sample of a `[h×w]` plane, zero outside. Returns the value and
/// the four `(index, weight)` taps that lie inside.
#[inline]
fn taps(h: usize, w: usize, sx: f64, sy: f64) -> ([(usize, f64); 4], usize, f64, f64) {
    let (x0, y0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0, sy - y0);
    let mut t = [(0usize, 0.0f64); 4];
    let mut cnt = 0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (xx, yy) = (x0 + dx, y0 + dy);
            if xx >= 0.0 && yy >= 0.0 && xx < w as f64 && yy < h as f64 {
                t[cnt] = (yy as usize * w + xx as usize, wy * wx);
                cnt += 1;
            }
        }
    }
    (t, cnt, fx, fy)
}

fn corner<T: Real>(plane: &[T], h: usize, w: usize, x: f64, y: f64) -> f64 {
    if x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 {
        plane[y as usize * w + x as usize].as_f64()
    } else {
        0.0
    }
}

struct LookupOp {
    levels: usize,
    radius: usize,
    grid: (usize, usize),
}

impl LookupOp {
    fn forward<T: Real>(&self, pyr: &[&Tensor<T>], flow: &Tensor<T>) -> Tensor<T> {
        let (h, w) = self.grid;
        let n = h * w;
        let r = self.radius as isize;
        let side = 2 * self.radius + 1;
        let mut out = Tensor::zeros(&[self.levels * side * side, h, w]);
        let fd = flow.data();
        for l in 0..self.levels {
            let (hl, wl) = (h >> l, w >> l);
            let inv = 1.0 / (1u64 << l) as f64;
            let pd = pyr[l].data();
            for i in 0..n {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                let cx = (x + fd[i].as_f64()) * inv;
                let cy = (y + fd[n + i].as_f64()) * inv;
                let plane = &pd[i * hl * wl..(i + 1) * hl * wl];
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (t, cnt, _, _) = taps(hl, wl, cx + dx as f64, cy + dy as f64);
                        let mut v = 0.0;
                        for &(idx, wt) in &t[..cnt] {
                            v += wt * plane[idx].as_f64();
                        }
                        let ch = l * side * side + (dy + r) as usize * side + (dx + r) as usize;
                        out.data_mut()[ch * n + i] = T::lit(v);
                    }
                }
            }
        }
        out
    }
}

impl<T: Real> CustomOp<T> for LookupOp {
    fn name(&self) -> &'static str {
        "corr_lookup"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> matchflow_tensor::Result<Vec<Option<Tensor<T>>>> {
        let (h, w) = self.grid;
        let n = h * w;
        let r = self.radius as isize;
        let side = 2 * self.radius + 1;
        let flow = inputs[self.levels];
        let fd = flow.data();
        let gd = grad_output.data();
        let mut dflow = vec![0.0f64; 2 * n];
        let mut grads = Vec::with_capacity(self.levels + 1);
        for l in 0..self.levels {
            let (hl, wl) = (h >> l, w >> l);
            let inv = 1.0 / (1u64 << l) as f64;
            let pd = inputs[l].data();
            let mut dp = vec![T::zero(); pd.len()];
            for i in 0..n {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                let cx = (x + fd[i].as_f64()) * inv;
                let cy = (y + fd[n + i].as_f64()) * inv;
                let base = i * hl * wl;
                let plane = &pd[base..base + hl * wl];
                for dy in -r..=r {
                    for dx in -r..=r {
                        let ch = l * side * side + (dy + r) as usize * side + (dx + r) as usize;
                        let go = gd[ch * n + i].as_f64();
                        if go == 0.0 {
                            continue;
                        }
                        let (sx, sy) = (cx + dx as f64, cy + dy as f64);
                        let (t, cnt, fx, fy) = taps(hl, wl, sx, sy);
                        for &(idx, wt) in &t[..cnt] {
                            dp[base + idx] += T::lit(go * wt);
                        }
                        let (x0, y0) = (sx.floor(), sy.floor());
                        let a = corner(plane, hl, wl, x0, y0);
                        let b = corner(plane, hl, wl, x0 + 1.0, y0);
                        let c = corner(plane, hl, wl, x0, y0 + 1.0);
                        let d = corner(plane, hl, wl, x0 + 1.0, y0 + 1.0);
                        let dsx = (1.0 - fy) * (b - a) + fy * (d - c);
                        let dsy = (1.0 - fx) * (c - a) + fx * (d - b);
                        dflow[i] += go * dsx * inv;
                        dflow[n + i] += go * dsy * inv;
                    }
                }
            }
            grads.push(Some(Tensor::new(inputs[l].shape(), dp)?));
        }
        grads.push(Some(Tensor::new(flow.shape(), dflow.into_iter().map(T::lit).collect())?));
        Ok(grads)
    }
}

/// Samples every pyramid level on a `(2r+1)²` window around each pixel's
/// displaced position `(x+u, y+v) / 2^l`. Output `[levels·(2r+1)² × h × w]`,
/// channel `l·(2r+1)² + (dy+r)(2r+1) + (dx+r)`; samples outside read 0.
pub fn lookup<T: Real>(g: &mut Tape<T>, pyr: &[Var], flow: Var, radius: usize) -> Result<Var> {
    let fs = g.shape(flow).to_vec();
    if fs.len() != 3 || fs[0] != 2 {
        return Err(TensorError::Dimension(format!("flow must be [2,h,w], got {fs:?}")).into());
    }
    let grid = (fs[1], fs[2]);
    let n = grid.0 * grid.1;
    for (l, &p) in pyr.iter().enumerate() {
        if g.shape(p) != [n, grid.0 >> l, grid.1 >> l] {
            return Err(TensorError::Dimension(format!("pyramid level {l} has shape {:?}", g.shape(p))).into());
        }
    }
    let op = LookupOp { levels: pyr.len(), radius, grid };
    let vals: Vec<&Tensor<T>> = pyr.iter().map(|&p| g.value(p)).collect();
    let out = op.forward(&vals, g.value(flow));
    let mut inputs = pyr.to_vec();
    inputs.push(flow);
    Ok(g.custom(&inputs, out, Box::new(op))?)
}

fn conv<T: Real>(g: &mut Tape<T>, p: &Params, name: &str, x: Var) -> Result<Var> {
    let w = p[&format!("upd.{name}.w")];
    let pad = g.shape(w)[2] / 2;
    let y = g.conv2d(x, w, 1, pad)?;
    Ok(g.add_bias(y, p[&format!("upd.{name}.b")], 0)?)
}

/// Lookup features and the current flow mixed into `motion` channels, the
/// last two of which are the raw flow.
pub fn motion_encoder<T: Real>(g: &mut Tape<T>, p: &Params, corr_feats: Var, flow: Var) -> Result<Var> {
    let c = conv(g, p, "mc", corr_feats)?;
    let c = g.relu(c)?;
    let f = conv(g, p, "mf", flow)?;
    let f = g.relu(f)?;
    let cf = g.concat(&[c, f], 0)?;
    let m = conv(g, p, "mo", cf)?;
    let m = g.relu(m)?;
    Ok(g.concat(&[m, flow], 0)?)
}

/// One refinement step: convolutional GRU update `h' = h + z⊙(q − h)` and a
/// two-layer head emitting the residual flow.
pub fn gru_step<T: Real>(g: &mut Tape<T>, p: &Params, hidden: Var, context: Var, corr_feats: Var, flow: Var) -> Result<(Var, Var)> {
    let hs = g.shape(hidden).to_vec();
    for (what, v) in [("context", context), ("lookup", corr_feats), ("flow", flow)] {
        if g.shape(v)[1..] != hs[1..] {
            return Err(TensorError::Dimension(format!("{what} {:?} does not match hidden {hs:?}", g.shape(v))).into());
        }
    }
    let motion = motion_encoder(g, p, corr_feats, flow)?;
    let x = g.concat(&[motion, context], 0)?;
    let hx = g.concat(&[hidden, x], 0)?;
    let z = conv(g, p, "gz", hx)?;
    let z = g.sigmoid(z)?;
    let r = conv(g, p, "gr", hx)?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, hidden)?;
    let rx = g.concat(&[rh, x], 0)?;
    let q = conv(g, p, "gq", rx)?;
    let q = g.tanh(q)?;
    let d = g.sub(q, hidden)?;
    let d = g.mul(z, d)?;
    let h2 = g.add(hidden, d)?;
    let o = conv(g, p, "h1", h2)?;
    let o = g.relu(o)?;
    let delta = conv(g, p, "h2", o)?;
    Ok((h2, delta))
}

/// Partial sums `f_1..f_N` of the residual flows at 1/8 resolution.
#[derive(Clone, Debug)]
pub struct RefinementTrace {
    pub flows: Vec<Var>,
    pub deltas: Vec<Var>,
}

/// Correlation, pyramid, and `iters` GRU refinements from zero flow.
#[allow(clippy::too_many_arguments)]
pub fn iterate<T: Real>(
    g: &mut Tape<T>,
    p: &Params,
    cfg: &FlowConfig,
    f1: Var,
    f2: Var,
    ctx: ContextVars,
    iters: usize,
    scale_corr: bool,
) -> Result<RefinementTrace> {
    if iters == 0 {
        return contract("at least one refinement iteration is required");
    }
    let s = g.shape(f1).to_vec();
    let grid = (s[1], s[2]);
    let corr = correlation_volume(g, f1, f2, scale_corr)?;
    let pyr = correlation_pyramid(g, corr, grid, cfg.corr_levels)?;
    let mut flow = g.constant(Tensor::zeros(&[2, grid.0, grid.1]));
    let mut hidden = ctx.hidden;
    let mut trace = RefinementTrace { flows: Vec::with_capacity(iters), deltas: Vec::with_capacity(iters) };
    for _ in 0..iters {
        let cur = if cfg.detach_flow { g.detach(flow) } else { flow };
        let feats = lookup(g, &pyr, cur, cfg.radius)?;
        let (h, delta) = gru_step(g, p, hidden, ctx.context, feats, cur)?;
        hidden = h;
        flow = g.add(cur, delta)?;
        trace.flows.push(flow);
        trace.deltas.push(delta);
    }
    Ok(trace)
}

/// Source taps `(i0, i1, frac)` for half-pixel-aligned ×`factor` upsampling.
fn upsample_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

struct UpsampleOp {
    factor: usize,
}

impl UpsampleOp {
    fn forward<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let f = self.factor;
        let (ty, tx) = (upsample_taps(h, f), upsample_taps(w, f));
        let scale = T::lit(f as f64);
        let mut out = Tensor::zeros(&[c, h * f, w * f]);
        let xd = x.data();
        let mut row0 = vec![T::zero(); w * f];
        let mut row1 = vec![T::zero(); w * f];
        for ci in 0..c {
            let plane = &xd[ci * h * w..(ci + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let (a, b) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                    row0[ox] = a + fx * (b - a);
                    let (a, b) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                    row1[ox] = a + fx * (b - a);
                }
                let fy = T::lit(fy);
                let dst = &mut out.data_mut()[(ci * h * f + oy) * w * f..(ci * h * f + oy + 1) * w * f];
                for ((d, &a), &b) in dst.iter_mut().zip(&row0).zip(&row1) {
                    *d = (a + fy * (b - a)) * scale;
                }
            }
        }
        out
    }
}

impl<T: Real> CustomOp<T> for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample_flow"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> matchflow_tensor::Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let f = self.factor;
        let (ty, tx) = (upsample_taps(h, f), upsample_taps(w, f));
        let mut dx = vec![T::zero(); x.numel()];
        let gd = grad_output.data();
        let scale = f as f64;
        for ci in 0..c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = gd[(ci * h * f + oy) * w * f + ox].as_f64() * scale;
                    for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                        for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                            plane[yy * w + xx] += T::lit(gv * wy * wx);
                        }
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(x.shape(), dx)?)])
    }
}

/// Bilinear ×8 upsampling of a `[2×h×w]` flow with values multiplied by 8.
pub fn upsample_flow<T: Real>(g: &mut Tape<T>, flow: Var) -> Result<Var> {
    let s = g.shape(flow).to_vec();
    if s.len() != 3 || s[0] != 2 {
        return Err(TensorError::Dimension(format!("flow must be [2,h,w], got {s:?}")).into());
    }
    let op = UpsampleOp { factor: 8 };
    let out = op.forward(g.value(flow));
    Ok(g.custom(&[flow], out, Box::new(op))?)
}

/// [`upsample_flow`] on a plain tensor.
pub fn upsample_flow_tensor<T: Real>(flow: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Tape::new();
    let v = g.constant(flow.clone());
    let u = upsample_flow(&mut g, v)?;
    Ok(g.value(u).clone())
}

/// Area-mean ×1/8 downsampling with values divided by 8.
pub fn downsample_flow<T: Real>(flow: &Tensor<T>) -> Result<Tensor<T>> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 || s[1] % 8 != 0 || s[2] % 8 != 0 {
        return Err(TensorError::Dimension(format!("flow {s:?} is not [2,8h,8w]")).into());
    }
    let (h, w) = (s[1] / 8, s[2] / 8);
    let fw = s[2];
    let mut out = Tensor::zeros(&[2, h, w]);
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..8 {
                    for dx in 0..8 {
                        acc += flow.data()[(c * s[1] + 8 * y + dy) * fw + 8 * x + dx].as_f64();
                    }
                }
                out.set(&[c, y, x], T::lit(acc / 512.0));
            }
        }
    }
    Ok(out)
}

/// A coarse cell is valid when all 64 of its pixels are.
pub fn downsample_mask<T: Real>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    let s = mask.shape();
    if s.len() != 2 || s[0] % 8 != 0 || s[1] % 8 != 0 {
        return Err(TensorError::Dimension(format!("mask {s:?} is not [8h,8w]")).into());
    }
    let (h, w) = (s[0] / 8, s[1] / 8);
    Ok(Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        let all = (0..64).all(|k| mask.data()[(8 * y + k / 8) * s[1] + 8 * x + k % 8] > T::zero());
        if all {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// `γ^{N−i}` for `i = 1..N`.
pub fn loss_weights(n: usize, gamma: f64) -> Vec<f64> {
    (1..=n).map(|i| gamma.powi((n - i) as i32)).collect()
}

/// `Σ_i γ^{N−i} · mean over valid pixels of (|Δu| + |Δv|)`.
pub fn flow_loss<T: Real>(g: &mut Tape<T>, flows: &[Var], gt: &Tensor<T>, gamma: f64, valid: Option<&Tensor<T>>) -> Result<Var> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return contract(format!("gamma {gamma} outside (0, 1]"));
    }
    if flows.is_empty() {
        return contract("flow loss needs at least one prediction");
    }
    let s = gt.shape().to_vec();
    if s.len() != 3 || s[0] != 2 {
        return Err(TensorError::Dimension(format!("gt flow must be [2,h,w], got {s:?}")).into());
    }
    let count = match valid {
        Some(m) => {
            if m.shape() != [s[1], s[2]] {
                return Err(TensorError::Dimension(format!("mask {:?} does not match flow {s:?}", m.shape())).into());
            }
            m.data().iter().filter(|&&v| v > T::zero()).count()
        }
        None => s[1] * s[2],
    };
    if count == 0 {
        return contract("flow loss over an empty valid mask");
    }
    let weight_mask = valid.map(|m| {
        let bin: Vec<T> = m.data().iter().map(|&v| if v > T::zero() { T::one() } else { T::zero() }).collect();
        let mut both = bin.clone();
        both.extend(bin);
        Tensor::new(&s, both).expect("mask duplicated over both components")
    });
    let gtv = g.constant(gt.clone());
    let mw = weight_mask.map(|m| g.constant(m));
    let weights = loss_weights(flows.len(), gamma);
    let mut total: Option<Var> = None;
    for (&f, &wgt) in flows.iter().zip(&weights) {
        if g.shape(f) != s.as_slice() {
            return Err(TensorError::Dimension(format!("prediction {:?} does not match gt {s:?}", g.shape(f))).into());
        }
        let d = g.sub(gtv, f)?;
        let mut a = g.abs(d)?;
        if let Some(m) = mw {
            a = g.mul(a, m)?;
        }
        let sum = g.sum(a)?;
        let term = g.scale(sum, T::lit(wgt / count as f64))?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Contract("empty trace".into()))
}
